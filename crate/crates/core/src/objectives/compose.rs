use std::collections::BTreeMap;

use super::variant::{Term, TermSet, VariantSpec};
use super::{adv_d_loss, adv_g_loss, pseudo_label, recon_cycle_loss};
use crate::data::DomainDataset;
use crate::nets::{mix_seed, Bound, Mode, Network};
use crate::tensor::{GradientMap, Graph, Tensor, Var};
use crate::{Error, Result};

/// The six networks of a two-domain run.
#[derive(Debug, Clone, PartialEq)]
pub struct NetSet {
    pub g_st: Network,
    pub g_ts: Network,
    pub d_s: Network,
    pub d_t: Network,
    pub m_s: Network,
    pub m_t: Network,
}

/// Graph prefixes, also used as parameter-key prefixes in gradient maps.
pub const NET_PREFIXES: [&str; 6] = ["g_st", "g_ts", "d_s", "d_t", "m_s", "m_t"];

impl NetSet {
    pub fn get(&self, prefix: &str) -> Option<&Network> {
        Some(match prefix {
            "g_st" => &self.g_st,
            "g_ts" => &self.g_ts,
            "d_s" => &self.d_s,
            "d_t" => &self.d_t,
            "m_s" => &self.m_s,
            "m_t" => &self.m_t,
            _ => return None,
        })
    }

    pub fn get_mut(&mut self, prefix: &str) -> Option<&mut Network> {
        Some(match prefix {
            "g_st" => &mut self.g_st,
            "g_ts" => &mut self.g_ts,
            "d_s" => &mut self.d_s,
            "d_t" => &mut self.d_t,
            "m_s" => &mut self.m_s,
            "m_t" => &mut self.m_t,
            _ => return None,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &Network)> {
        NET_PREFIXES.into_iter().map(|p| (p, self.get(p).unwrap()))
    }
}

/// Images with optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub y: Vec<Option<usize>>,
}

impl Batch {
    pub fn from_dataset(ds: &DomainDataset, indices: &[usize]) -> Batch {
        let (x, y) = ds.batch(indices);
        Batch { x, y }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn rows(&self, labeled: bool) -> Vec<usize> {
        (0..self.y.len()).filter(|&i| self.y[i].is_some() == labeled).collect()
    }
}

/// Which update the bundle is built for. Each phase binds only the
/// networks it owns as trainable parameters and builds only the losses
/// those networks minimize; `All` builds every loss with every network
/// trainable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Discriminators,
    Generators,
    TaskModels,
    All,
}

impl Phase {
    pub fn owns(self, prefix: &str) -> bool {
        match self {
            Phase::All => true,
            Phase::Discriminators => prefix.starts_with("d_"),
            Phase::Generators => prefix.starts_with("g_"),
            Phase::TaskModels => prefix.starts_with("m_"),
        }
    }

    fn builds(self, term: Term) -> bool {
        use Term::*;
        match self {
            Phase::All => true,
            Phase::Discriminators => matches!(term, AdvDS | AdvDT),
            Phase::Generators => matches!(
                term,
                AdvGSt | AdvGTs | ReconSts | ReconTst | RelaxedSts | RelaxedTst | TaskSMapped | TaskTMapped
            ),
            Phase::TaskModels => matches!(
                term,
                TaskSReal | TaskSMapped | TaskTReal | TaskTPseudo | TaskTMapped | TaskTSource
            ),
        }
    }
}

/// Supervision branch of one target batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Supervised,
    Unsupervised,
    /// Labeled and unlabeled items in one batch; each item takes its own
    /// branch.
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComposeOptions {
    pub phase: Phase,
    /// Root of every dropout mask drawn while composing.
    pub dropout_seed: u64,
}

/// Losses for one update phase, living in their own graph.
///
/// Discriminator losses are the raw adversarial terms. The generator loss is
/// `adv_w·(adversarial) + cyc_w·(cycle) + task_w·(task feedback)`. Task
/// model losses are unweighted sums of their classification terms, with
/// target-real and pseudo-labeled terms scaled by their share of the batch.
#[derive(Debug)]
pub struct LossBundle {
    graph: Graph,
    pub d_s_loss: Option<Var>,
    pub d_t_loss: Option<Var>,
    pub g_loss: Option<Var>,
    pub m_s_loss: Option<Var>,
    pub m_t_loss: Option<Var>,
    terms: BTreeMap<&'static str, Var>,
    branch: Branch,
}

impl LossBundle {
    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn branch(&self) -> Branch {
        self.branch
    }

    pub fn value(&self, v: Var) -> f64 {
        self.graph.value(v).item()
    }

    /// Every raw term built in this phase, before weighting.
    pub fn diagnostics(&self) -> BTreeMap<String, f64> {
        self.terms
            .iter()
            .map(|(k, &v)| (k.to_string(), self.value(v)))
            .collect()
    }

    pub fn term(&self, key: &str) -> Option<Var> {
        self.terms.get(key).copied()
    }

    pub fn clamp_events(&self) -> usize {
        self.graph.clamp_events()
    }

    pub fn gradients(&self, loss: Var) -> Result<GradientMap> {
        Ok(self.graph.backward(loss)?)
    }

    /// Named losses present in this bundle.
    pub fn losses(&self) -> Vec<(&'static str, Var)> {
        [
            ("d_s_loss", self.d_s_loss),
            ("d_t_loss", self.d_t_loss),
            ("g_loss", self.g_loss),
            ("m_s_loss", self.m_s_loss),
            ("m_t_loss", self.m_t_loss),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
        .collect()
    }
}

struct Ctx<'a> {
    g: Graph,
    nets: &'a NetSet,
    phase: Phase,
    live: BTreeMap<&'static str, Bound>,
    frozen: BTreeMap<&'static str, Bound>,
    seed: u64,
}

impl Ctx<'_> {
    /// Parameters if the phase owns the network, constants otherwise.
    fn live(&mut self, p: &'static str) -> Result<Bound> {
        if !self.phase.owns(p) {
            return self.frozen(p);
        }
        if let Some(b) = self.live.get(p) {
            return Ok(b.clone());
        }
        let b = self.nets.get(p).unwrap().bind(&mut self.g, p, true)?;
        self.live.insert(p, b.clone());
        Ok(b)
    }

    fn frozen(&mut self, p: &'static str) -> Result<Bound> {
        if let Some(b) = self.frozen.get(p) {
            return Ok(b.clone());
        }
        let b = self.nets.get(p).unwrap().bind(&mut self.g, &format!("{p}#const"), false)?;
        self.frozen.insert(p, b.clone());
        Ok(b)
    }

    fn run(&mut self, p: &'static str, bound: &Bound, x: Var, mode: Mode) -> Result<Var> {
        let net = self.nets.get(p).unwrap();
        Ok(net.forward(&mut self.g, bound, x, mode)?)
    }

    fn train_mode(&self, salt: &str) -> Mode {
        Mode::Train {
            dropout_seed: mix_seed(self.seed, salt),
        }
    }

    fn ce(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        Ok(self.g.softmax_cross_entropy(logits, labels)?)
    }
}

fn weighted_sum(g: &mut Graph, parts: &[(f64, Var)]) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for &(k, v) in parts {
        let s = if k == 1.0 { v } else { g.scale(v, k) };
        acc = Some(match acc {
            None => s,
            Some(a) => g.add(a, s)?,
        });
    }
    Ok(acc)
}

fn labels_of(y: &[Option<usize>], rows: &[usize]) -> Vec<usize> {
    rows.iter().map(|&r| y[r].expect("labeled row")).collect()
}

/// Builds the loss terms `spec` prescribes for one source batch and one
/// target batch.
///
/// The target batch decides the branch: fully labeled batches take the
/// supervised terms, unlabeled items take the pseudo-labeled terms. Inside
/// every loss, networks that loss must not train enter as constants and
/// mapped images consumed by a task model are cut from their generator.
pub fn compose_variant(
    spec: &VariantSpec,
    batch_s: &Batch,
    batch_t: &Batch,
    nets: &NetSet,
    opts: ComposeOptions,
) -> Result<LossBundle> {
    spec.validate()?;
    let labeled = batch_t.rows(true);
    let unlabeled = batch_t.rows(false);
    let n_t = batch_t.len();
    if batch_s.is_empty() || n_t == 0 {
        return Err(Error::config("empty source or target batch"));
    }
    if !unlabeled.is_empty() && !spec.name.accepts_unlabeled_target() {
        return Err(Error::config(format!(
            "variant {} needs target labels, but {} of {n_t} target items are unlabeled",
            spec.name,
            unlabeled.len()
        )));
    }
    let branch = match (labeled.is_empty(), unlabeled.is_empty()) {
        (false, true) => Branch::Supervised,
        (true, false) => Branch::Unsupervised,
        _ => Branch::Mixed,
    };
    let mut set = TermSet {
        terms: Vec::new(),
        feedback_st: false,
        feedback_ts: false,
    };
    for (present, sup) in [(!labeled.is_empty(), true), (!unlabeled.is_empty(), false)] {
        if present {
            let s = spec.terms(sup);
            for t in s.terms {
                if !set.terms.contains(&t) {
                    set.terms.push(t);
                }
            }
            set.feedback_st |= s.feedback_st;
            set.feedback_ts |= s.feedback_ts;
        }
    }
    set.terms.sort();

    use Term::*;
    let needs_ys = set.terms.iter().any(|t| {
        matches!(t, RelaxedSts | TaskSReal | TaskTMapped | TaskTSource)
    });
    let y_s: Vec<usize> = if needs_ys {
        batch_s
            .y
            .iter()
            .map(|l| l.ok_or_else(|| Error::config("source batch has unlabeled items; source labels are required")))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let needs_pseudo = !unlabeled.is_empty()
        && set.terms.iter().any(|t| matches!(t, TaskTPseudo | RelaxedTst))
        && set.terms.iter().any(|&t| opts.phase.builds(t) && matches!(t, TaskTPseudo | RelaxedTst));
    let pseudo = if needs_pseudo {
        Some(pseudo_label(&nets.m_s, &nets.g_ts, &batch_t.x)?)
    } else {
        None
    };
    // Target labels where present, pseudo-labels elsewhere.
    let y_t_eff: Option<Vec<usize>> = pseudo.as_ref().map_or_else(
        || unlabeled.is_empty().then(|| labels_of(&batch_t.y, &labeled)),
        |p| Some((0..n_t).map(|i| batch_t.y[i].unwrap_or(p[i])).collect()),
    );

    let mut c = Ctx {
        g: Graph::new(),
        nets,
        phase: opts.phase,
        live: BTreeMap::new(),
        frozen: BTreeMap::new(),
        seed: opts.dropout_seed,
    };
    let xs = c.g.constant(batch_s.x.clone());
    let xt = c.g.constant(batch_t.x.clone());
    let built: Vec<Term> = set
        .terms
        .iter()
        .copied()
        .filter(|&t| opts.phase.builds(t))
        .filter(|&t| {
            // Outside the task-model phase a mapped-task term only matters
            // as generator feedback.
            opts.phase != Phase::Generators
                || match t {
                    TaskTMapped => set.feedback_st,
                    TaskSMapped => set.feedback_ts,
                    _ => true,
                }
        })
        .collect();
    let has = |t: Term| built.contains(&t);
    let w = spec.weights;

    let mut terms: BTreeMap<&'static str, Var> = BTreeMap::new();
    let mut g_parts: Vec<(f64, Var)> = Vec::new();
    let mut m_s_parts: Vec<(f64, Var)> = Vec::new();
    let mut m_t_parts: Vec<(f64, Var)> = Vec::new();

    // Generator outputs, computed once and shared by every consumer.
    let want_fake_t = [AdvDT, AdvGSt, ReconSts, RelaxedSts, TaskTMapped].iter().any(|&t| has(t));
    let want_fake_s = [AdvDS, AdvGTs, ReconTst, RelaxedTst, TaskSMapped].iter().any(|&t| has(t));
    let fake_t = if want_fake_t {
        let b = c.live("g_st")?;
        Some(c.run("g_st", &b, xs, Mode::Eval)?)
    } else {
        None
    };
    let fake_s = if want_fake_s {
        let b = c.live("g_ts")?;
        Some(c.run("g_ts", &b, xt, Mode::Eval)?)
    } else {
        None
    };

    if has(AdvDT) {
        let d = c.live("d_t")?;
        let real = c.run("d_t", &d, xt, Mode::Eval)?;
        let cut = c.g.detach(fake_t.unwrap());
        let fake = c.run("d_t", &d, cut, Mode::Eval)?;
        terms.insert(AdvDT.key(), adv_d_loss(&mut c.g, real, fake)?);
    }
    if has(AdvDS) {
        let d = c.live("d_s")?;
        let real = c.run("d_s", &d, xs, Mode::Eval)?;
        let cut = c.g.detach(fake_s.unwrap());
        let fake = c.run("d_s", &d, cut, Mode::Eval)?;
        terms.insert(AdvDS.key(), adv_d_loss(&mut c.g, real, fake)?);
    }
    if has(AdvGSt) {
        let d = c.frozen("d_t")?;
        let p = c.run("d_t", &d, fake_t.unwrap(), Mode::Eval)?;
        let l = adv_g_loss(&mut c.g, p, spec.saturating_g)?;
        terms.insert(AdvGSt.key(), l);
        g_parts.push((w.adv_w, l));
    }
    if has(AdvGTs) {
        let d = c.frozen("d_s")?;
        let p = c.run("d_s", &d, fake_s.unwrap(), Mode::Eval)?;
        let l = adv_g_loss(&mut c.g, p, spec.saturating_g)?;
        terms.insert(AdvGTs.key(), l);
        g_parts.push((w.adv_w, l));
    }

    let cyc_s = if has(ReconSts) || has(RelaxedSts) {
        let b = c.live("g_ts")?;
        Some(c.run("g_ts", &b, fake_t.unwrap(), Mode::Eval)?)
    } else {
        None
    };
    let cyc_t = if has(ReconTst) || has(RelaxedTst) {
        let b = c.live("g_st")?;
        Some(c.run("g_st", &b, fake_s.unwrap(), Mode::Eval)?)
    } else {
        None
    };
    if has(ReconSts) {
        let l = recon_cycle_loss(&mut c.g, xs, cyc_s.unwrap())?;
        terms.insert(ReconSts.key(), l);
        g_parts.push((w.cyc_w, l));
    }
    if has(ReconTst) {
        let l = recon_cycle_loss(&mut c.g, xt, cyc_t.unwrap())?;
        terms.insert(ReconTst.key(), l);
        g_parts.push((w.cyc_w, l));
    }
    if has(RelaxedSts) {
        let m = c.frozen("m_s")?;
        let logits = c.run("m_s", &m, cyc_s.unwrap(), Mode::Eval)?;
        let l = c.ce(logits, &y_s)?;
        terms.insert(RelaxedSts.key(), l);
        g_parts.push((w.cyc_w, l));
    }
    if has(RelaxedTst) {
        let y = y_t_eff
            .as_ref()
            .ok_or_else(|| Error::config("relaxed target cycle needs target labels or pseudo-labels"))?;
        let m = c.frozen("m_t")?;
        let logits = c.run("m_t", &m, cyc_t.unwrap(), Mode::Eval)?;
        let l = c.ce(logits, y)?;
        terms.insert(RelaxedTst.key(), l);
        g_parts.push((w.cyc_w, l));
    }

    let frac_l = labeled.len() as f64 / n_t as f64;
    let frac_u = unlabeled.len() as f64 / n_t as f64;
    let build_m = opts.phase.owns("m_s") || opts.phase.owns("m_t");
    let build_g = opts.phase.owns("g_st") || opts.phase.owns("g_ts");

    if has(TaskSReal) {
        let m = c.live("m_s")?;
        let mode = c.train_mode("m_s/real");
        let logits = c.run("m_s", &m, xs, mode)?;
        let l = c.ce(logits, &y_s)?;
        terms.insert(TaskSReal.key(), l);
        m_s_parts.push((1.0, l));
    }
    if has(TaskSMapped) && !labeled.is_empty() {
        let y = labels_of(&batch_t.y, &labeled);
        let rows = if unlabeled.is_empty() {
            fake_s.unwrap()
        } else {
            c.g.select_rows(fake_s.unwrap(), &labeled)?
        };
        if build_m {
            let m = c.live("m_s")?;
            let cut = c.g.detach(rows);
            let mode = c.train_mode("m_s/mapped");
            let logits = c.run("m_s", &m, cut, mode)?;
            let l = c.ce(logits, &y)?;
            terms.insert(TaskSMapped.key(), l);
            m_s_parts.push((frac_l, l));
        }
        if build_g && set.feedback_ts {
            let m = c.frozen("m_s")?;
            let logits = c.run("m_s", &m, rows, Mode::Eval)?;
            let l = c.ce(logits, &y)?;
            g_parts.push((w.task_w * frac_l, l));
        }
    }
    if has(TaskTReal) || has(TaskTPseudo) {
        let m = c.live("m_t")?;
        let mode = c.train_mode("m_t/real");
        let logits = c.run("m_t", &m, xt, mode)?;
        if has(TaskTReal) && !labeled.is_empty() {
            let sel = if unlabeled.is_empty() {
                logits
            } else {
                c.g.select_rows(logits, &labeled)?
            };
            let l = c.ce(sel, &labels_of(&batch_t.y, &labeled))?;
            terms.insert(TaskTReal.key(), l);
            m_t_parts.push((frac_l, l));
        }
        if has(TaskTPseudo) && !unlabeled.is_empty() {
            let p = pseudo.as_ref().expect("pseudo-labels computed");
            let sel = if labeled.is_empty() {
                logits
            } else {
                c.g.select_rows(logits, &unlabeled)?
            };
            let y: Vec<usize> = unlabeled.iter().map(|&i| p[i]).collect();
            let l = c.ce(sel, &y)?;
            terms.insert(TaskTPseudo.key(), l);
            m_t_parts.push((frac_u, l));
        }
    }
    if has(TaskTMapped) {
        if build_m {
            let m = c.live("m_t")?;
            let cut = c.g.detach(fake_t.unwrap());
            let mode = c.train_mode("m_t/mapped");
            let logits = c.run("m_t", &m, cut, mode)?;
            let l = c.ce(logits, &y_s)?;
            terms.insert(TaskTMapped.key(), l);
            m_t_parts.push((1.0, l));
        }
        if build_g && set.feedback_st {
            let m = c.frozen("m_t")?;
            let logits = c.run("m_t", &m, fake_t.unwrap(), Mode::Eval)?;
            let l = c.ce(logits, &y_s)?;
            g_parts.push((w.task_w, l));
        }
    }
    if has(TaskTSource) {
        let m = c.live("m_t")?;
        let mode = c.train_mode("m_t/source");
        let logits = c.run("m_t", &m, xs, mode)?;
        let l = c.ce(logits, &y_s)?;
        terms.insert(TaskTSource.key(), l);
        m_t_parts.push((1.0, l));
    }

    let g_loss = if build_g { weighted_sum(&mut c.g, &g_parts)? } else { None };
    let m_s_loss = if opts.phase.owns("m_s") { weighted_sum(&mut c.g, &m_s_parts)? } else { None };
    let m_t_loss = if opts.phase.owns("m_t") { weighted_sum(&mut c.g, &m_t_parts)? } else { None };
    Ok(LossBundle {
        d_s_loss: terms.get(AdvDS.key()).copied(),
        d_t_loss: terms.get(AdvDT.key()).copied(),
        g_loss,
        m_s_loss,
        m_t_loss,
        graph: c.g,
        terms,
        branch,
    })
}
