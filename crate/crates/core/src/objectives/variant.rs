use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::Error;

/// Every training variant of the ablation, from plain classifiers to the
/// full two-cycle augmented model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantName {
    NoAdaptation,
    TargetOnly,
    SourcePlusTarget,
    S2tOnly,
    OneCycleSts,
    OneCycleTst,
    RcalOneCycleSts,
    RcalOneCycleTst,
    AcalOneCycleSts,
    AcalOneCycleTst,
    Cyclegan,
    Rcal,
    Acal,
}

impl VariantName {
    pub const ALL: [VariantName; 13] = [
        VariantName::NoAdaptation,
        VariantName::TargetOnly,
        VariantName::SourcePlusTarget,
        VariantName::S2tOnly,
        VariantName::OneCycleSts,
        VariantName::OneCycleTst,
        VariantName::RcalOneCycleSts,
        VariantName::RcalOneCycleTst,
        VariantName::AcalOneCycleSts,
        VariantName::AcalOneCycleTst,
        VariantName::Cyclegan,
        VariantName::Rcal,
        VariantName::Acal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VariantName::NoAdaptation => "no_adaptation",
            VariantName::TargetOnly => "target_only",
            VariantName::SourcePlusTarget => "source_plus_target",
            VariantName::S2tOnly => "s2t_only",
            VariantName::OneCycleSts => "one_cycle_sts",
            VariantName::OneCycleTst => "one_cycle_tst",
            VariantName::RcalOneCycleSts => "rcal_one_cycle_sts",
            VariantName::RcalOneCycleTst => "rcal_one_cycle_tst",
            VariantName::AcalOneCycleSts => "acal_one_cycle_sts",
            VariantName::AcalOneCycleTst => "acal_one_cycle_tst",
            VariantName::Cyclegan => "cyclegan",
            VariantName::Rcal => "rcal",
            VariantName::Acal => "acal",
        }
    }

    /// Variants whose cycle terms are L1 reconstructions.
    pub fn uses_reconstruction(self) -> bool {
        matches!(
            self,
            VariantName::OneCycleSts | VariantName::OneCycleTst | VariantName::Cyclegan
        )
    }

    /// Variants with any generator or discriminator term.
    pub fn is_adversarial(self) -> bool {
        !matches!(
            self,
            VariantName::NoAdaptation | VariantName::TargetOnly | VariantName::SourcePlusTarget
        )
    }

    /// The target classifier starts as a copy of the pretrained source
    /// classifier instead of a fresh initialization.
    pub fn starts_from_source_model(self) -> bool {
        self == VariantName::NoAdaptation
    }

    /// Variants defined for target batches without labels.
    pub fn accepts_unlabeled_target(self) -> bool {
        matches!(self, VariantName::NoAdaptation | VariantName::Acal)
    }
}

impl fmt::Display for VariantName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VariantName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        VariantName::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = VariantName::ALL.iter().map(|v| v.as_str()).collect();
                Error::config(format!("unknown variant '{s}' (expected one of {})", names.join(", ")))
            })
    }
}

/// A raw loss term. Keys are the diagnostic names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Term {
    /// `D_S`: real source vs `G_{T→S}(x_t)`.
    AdvDS,
    /// `D_T`: real target vs `G_{S→T}(x_s)`.
    AdvDT,
    /// `G_{S→T}` fooling `D_T`.
    AdvGSt,
    /// `G_{T→S}` fooling `D_S`.
    AdvGTs,
    /// `|G_{T→S}(G_{S→T}(x_s)) - x_s|`.
    ReconSts,
    /// `|G_{S→T}(G_{T→S}(x_t)) - x_t|`.
    ReconTst,
    /// `CE(M_S(G_{T→S}(G_{S→T}(x_s))), y_s)`.
    RelaxedSts,
    /// `CE(M_T(G_{S→T}(G_{T→S}(x_t))), y_t)`, pseudo-labels when unlabeled.
    RelaxedTst,
    /// `CE(M_S(x_s), y_s)`.
    TaskSReal,
    /// `CE(M_S(G_{T→S}(x_t)), y_t)`.
    TaskSMapped,
    /// `CE(M_T(x_t), y_t)`.
    TaskTReal,
    /// `CE(M_T(x_t), argmax M_S(G_{T→S}(x_t)))`.
    TaskTPseudo,
    /// `CE(M_T(G_{S→T}(x_s)), y_s)`.
    TaskTMapped,
    /// `CE(M_T(x_s), y_s)`.
    TaskTSource,
}

impl Term {
    pub fn key(self) -> &'static str {
        match self {
            Term::AdvDS => "adv_d_s",
            Term::AdvDT => "adv_d_t",
            Term::AdvGSt => "adv_g_st",
            Term::AdvGTs => "adv_g_ts",
            Term::ReconSts => "recon_sts",
            Term::ReconTst => "recon_tst",
            Term::RelaxedSts => "relaxed_sts",
            Term::RelaxedTst => "relaxed_tst",
            Term::TaskSReal => "task_s_real",
            Term::TaskSMapped => "task_s_mapped",
            Term::TaskTReal => "task_t_real",
            Term::TaskTPseudo => "task_t_pseudo",
            Term::TaskTMapped => "task_t_mapped",
            Term::TaskTSource => "task_t_source",
        }
    }
}

/// Active terms of one variant for one supervision branch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TermSet {
    pub terms: Vec<Term>,
    /// `task_t_mapped` also trains `G_{S→T}` (through a constant `M_T`).
    pub feedback_st: bool,
    /// `task_s_mapped` also trains `G_{T→S}` (through a constant `M_S`).
    pub feedback_ts: bool,
}

impl TermSet {
    pub fn contains(&self, t: Term) -> bool {
        self.terms.contains(&t)
    }

    /// Diagnostic keys in sorted order.
    pub fn keys(&self) -> Vec<&'static str> {
        let mut k: Vec<_> = self.terms.iter().map(|t| t.key()).collect();
        k.sort_unstable();
        k
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub adv_w: f64,
    pub cyc_w: f64,
    pub task_w: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Supervision {
    Supervised,
    Unsupervised,
    Semi { labeled_fraction: f64 },
}

impl Supervision {
    /// Fraction of target training items that keep their labels.
    pub fn labeled_fraction(self) -> f64 {
        match self {
            Supervision::Supervised => 1.0,
            Supervision::Unsupervised => 0.0,
            Supervision::Semi { labeled_fraction } => labeled_fraction,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantSpec {
    pub name: VariantName,
    pub weights: LossWeights,
    pub supervision: Supervision,
    /// Generator loss `log(1 - D(G(x)))` instead of `-log D(G(x))`.
    #[serde(default)]
    pub saturating_g: bool,
}

impl VariantSpec {
    /// Default weights: `adv_w = 1`, `task_w = 1`, and `cyc_w = 10` for L1
    /// reconstruction cycles or `1` for classifier-scored cycles.
    pub fn new(name: VariantName) -> Self {
        VariantSpec {
            name,
            weights: LossWeights {
                adv_w: 1.0,
                cyc_w: if name.uses_reconstruction() { 10.0 } else { 1.0 },
                task_w: 1.0,
            },
            supervision: Supervision::Supervised,
            saturating_g: false,
        }
    }

    pub fn with_supervision(mut self, supervision: Supervision) -> Self {
        self.supervision = supervision;
        self
    }

    pub fn validate(&self) -> Result<(), Error> {
        let w = self.weights;
        for (k, v) in [("adv_w", w.adv_w), ("cyc_w", w.cyc_w), ("task_w", w.task_w)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("weight {k} = {v} must be a non-negative number")));
            }
        }
        let f = self.supervision.labeled_fraction();
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::config(format!("labeled_fraction {f} outside [0, 1]")));
        }
        if f < 1.0 && !self.name.accepts_unlabeled_target() {
            return Err(Error::config(format!(
                "variant {} needs a fully labeled target; supervision {:?} leaves target items unlabeled",
                self.name, self.supervision
            )));
        }
        Ok(())
    }

    /// Terms for a target batch that is labeled (`supervised = true`) or
    /// unlabeled.
    pub fn terms(&self, supervised: bool) -> TermSet {
        use Term::*;
        let adv4 = [AdvDS, AdvDT, AdvGSt, AdvGTs];
        let (terms, feedback_st, feedback_ts): (Vec<Term>, bool, bool) = match self.name {
            VariantName::NoAdaptation => (vec![TaskTSource], false, false),
            VariantName::TargetOnly => (vec![TaskTReal], false, false),
            VariantName::SourcePlusTarget => (vec![TaskTReal, TaskTSource], false, false),
            VariantName::S2tOnly => (vec![AdvDT, AdvGSt, TaskTReal, TaskTMapped], true, false),
            VariantName::OneCycleSts => (
                vec![AdvDT, AdvGSt, ReconSts, TaskTReal, TaskTMapped],
                false,
                false,
            ),
            VariantName::OneCycleTst => (
                vec![AdvDS, AdvGTs, ReconTst, TaskTReal, TaskTMapped],
                false,
                false,
            ),
            VariantName::RcalOneCycleSts => (
                vec![AdvDT, AdvGSt, RelaxedSts, TaskTReal, TaskTMapped],
                false,
                false,
            ),
            VariantName::RcalOneCycleTst => (
                vec![AdvDS, AdvGTs, RelaxedTst, TaskTReal, TaskTMapped],
                false,
                false,
            ),
            VariantName::AcalOneCycleSts => (
                vec![AdvDT, AdvGSt, RelaxedSts, TaskTReal, TaskTMapped],
                true,
                false,
            ),
            VariantName::AcalOneCycleTst => (
                vec![AdvDS, AdvGTs, RelaxedTst, TaskSReal, TaskSMapped, TaskTReal, TaskTMapped],
                false,
                true,
            ),
            VariantName::Cyclegan => {
                let mut t = adv4.to_vec();
                t.extend([ReconSts, ReconTst, TaskTReal, TaskTMapped]);
                (t, false, false)
            }
            VariantName::Rcal => {
                let mut t = adv4.to_vec();
                t.extend([RelaxedSts, RelaxedTst, TaskTReal, TaskTMapped]);
                (t, false, false)
            }
            VariantName::Acal if supervised => {
                let mut t = adv4.to_vec();
                t.extend([RelaxedSts, RelaxedTst, TaskSReal, TaskSMapped, TaskTReal, TaskTMapped]);
                (t, true, true)
            }
            VariantName::Acal => {
                let mut t = adv4.to_vec();
                t.extend([RelaxedSts, RelaxedTst, TaskSReal, TaskTPseudo, TaskTMapped]);
                (t, true, false)
            }
        };
        TermSet {
            terms,
            feedback_st,
            feedback_ts,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for v in VariantName::ALL {
            assert_eq!(v.as_str().parse::<VariantName>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.as_str()));
        }
        assert!("acl".parse::<VariantName>().is_err());
    }

    #[test]
    fn default_cycle_weights() {
        assert_eq!(VariantSpec::new(VariantName::Cyclegan).weights.cyc_w, 10.0);
        assert_eq!(VariantSpec::new(VariantName::Rcal).weights.cyc_w, 1.0);
    }

    #[test]
    fn supervision_validation() {
        let semi = Supervision::Semi { labeled_fraction: 0.5 };
        assert!(VariantSpec::new(VariantName::Acal).with_supervision(semi).validate().is_ok());
        assert!(VariantSpec::new(VariantName::Rcal)
            .with_supervision(Supervision::Unsupervised)
            .validate()
            .is_err());
        let bad = Supervision::Semi { labeled_fraction: 1.5 };
        assert!(VariantSpec::new(VariantName::Acal).with_supervision(bad).validate().is_err());
        let mut neg = VariantSpec::new(VariantName::Acal);
        neg.weights.task_w = -1.0;
        assert!(neg.validate().is_err());
    }

    #[test]
    fn acal_adds_task_terms_to_rcal() {
        let rcal = VariantSpec::new(VariantName::Rcal).terms(true);
        let acal = VariantSpec::new(VariantName::Acal).terms(true);
        assert!(rcal.terms.iter().all(|t| acal.contains(*t)));
        assert!(acal.feedback_st && acal.feedback_ts);
        let unsup = VariantSpec::new(VariantName::Acal).terms(false);
        assert!(unsup.contains(Term::TaskTPseudo));
        assert!(!unsup.contains(Term::TaskTReal) && !unsup.contains(Term::TaskSMapped));
    }
}
