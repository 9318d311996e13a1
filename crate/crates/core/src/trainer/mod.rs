//! Source pretraining and the alternating adversarial training loop.
//!
//! Every step runs three phases on one source batch and one target batch:
//! discriminator updates, one generator update, then task-model updates.
//! Each phase composes its own loss graph in which only the networks it
//! owns are parameters, so the others cannot move.
//!
//! Batch sampling is counter-based: the batches of step `t` are a pure
//! function of `(seed, t)` and the data, which makes resumption exact.

mod optim;
mod state;

pub use optim::{optimizer_step, Moment, Moments, OptimizerKind};
pub use state::{BestModel, TrainState};

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BatchIter, DomainDataset, DomainPair};
use crate::eval::accuracy;
use crate::nets::{build_classifier, build_discriminator, build_generator, mix_seed, InitSpec, Mode, Network};
use crate::objectives::{compose_variant, Batch, Branch, ComposeOptions, NetSet, Phase, VariantName, VariantSpec};
use crate::{Error, Result};

/// How target batches pick their supervision branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchMode {
    /// Draw the whole batch from the labeled pool with probability equal to
    /// the labeled fraction, otherwise from the unlabeled pool.
    #[default]
    PerBatch,
    /// Draw from all target items; each item takes its own branch.
    PerItem,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 1000,
            batch_size: 32,
            lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: VariantSpec,
    pub steps: usize,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub lr_m: f64,
    pub optimizer: OptimizerKind,
    pub d_steps_per_g_step: usize,
    pub seed: u64,
    pub eval_every: usize,
    /// Keep the pretrained source model fixed for the whole run.
    pub freeze_source_model: bool,
    /// Multiplier on `lr_m` when fine-tuning the source model.
    pub source_lr_scale: f64,
    pub branch_mode: BranchMode,
    pub pretrain: PretrainConfig,
    /// Compare every non-owned network bitwise around each phase.
    pub check_isolation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: VariantSpec::new(VariantName::Acal),
            steps: 2000,
            batch_size: 8,
            lr_g: 2e-4,
            lr_d: 2e-4,
            lr_m: 1e-3,
            optimizer: OptimizerKind::default(),
            d_steps_per_g_step: 1,
            seed: 0,
            eval_every: 200,
            freeze_source_model: false,
            source_lr_scale: 0.1,
            branch_mode: BranchMode::PerBatch,
            pretrain: PretrainConfig::default(),
            check_isolation: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.variant.validate()?;
        for (name, v) in [
            ("lr_g", self.lr_g),
            ("lr_d", self.lr_d),
            ("lr_m", self.lr_m),
            ("pretrain.lr", self.pretrain.lr),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.source_lr_scale.is_finite() && self.source_lr_scale >= 0.0) {
            return Err(Error::config("source_lr_scale must be non-negative"));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("d_steps_per_g_step", self.d_steps_per_g_step),
            ("eval_every", self.eval_every),
            ("pretrain.batch_size", self.pretrain.batch_size),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if let OptimizerKind::Adam { beta1, beta2, eps } = self.optimizer {
            if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
                return Err(Error::config("adam needs betas in [0, 1) and a positive eps"));
            }
        }
        Ok(())
    }

    fn lr_for(&self, prefix: &str) -> Option<f64> {
        match prefix {
            "g_st" | "g_ts" => Some(self.lr_g),
            "d_s" | "d_t" => Some(self.lr_d),
            "m_t" => Some(self.lr_m),
            "m_s" if self.freeze_source_model => None,
            "m_s" => Some(self.lr_m * self.source_lr_scale),
            _ => None,
        }
    }
}

/// One training step's record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    /// Number of completed steps, starting at 1.
    pub step: u64,
    pub branch: Branch,
    pub diagnostics: BTreeMap<String, f64>,
    pub target_val_accuracy: Option<f64>,
    pub source_val_accuracy: Option<f64>,
    pub epsilon_clamp_count: usize,
}

/// Networks whose parameters a phase changed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhaseAudit {
    pub phase: &'static str,
    pub changed: Vec<&'static str>,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub record: MetricRecord,
    pub audits: Vec<PhaseAudit>,
}

/// Summary of one finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: VariantName,
    pub seed: u64,
    /// Target test accuracy of the final task model.
    pub final_acc: f64,
    /// Target test accuracy of the task model with the best validation score.
    pub best_acc: f64,
    pub best_step: u64,
    pub wall_s: f64,
}

/// Source and target batches for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepBatches {
    pub source: Batch,
    pub target: Batch,
}

/// Supervised iff the item is labeled.
pub fn select_branch(label: Option<usize>) -> Branch {
    match label {
        Some(_) => Branch::Supervised,
        None => Branch::Unsupervised,
    }
}

fn nth_batch(pool: &[usize], batch_size: usize, seed: u64, step: u64) -> Result<Vec<usize>> {
    let bs = batch_size.min(pool.len());
    let nb = pool.len().div_ceil(bs.max(1)) as u64;
    let it = BatchIter::over(pool, bs, seed, step / nb.max(1))?;
    Ok(it.nth_batch((step % nb) as usize).expect("batch index in range").to_vec())
}

/// The batches of step `step` (0-based).
pub fn sample_batches(
    cfg: &TrainConfig,
    source: &DomainDataset,
    target: &DomainDataset,
    step: u64,
) -> Result<StepBatches> {
    let all_s: Vec<usize> = (0..source.len()).collect();
    let si = nth_batch(&all_s, cfg.batch_size, mix_seed(cfg.seed, "source"), step)?;
    let ti = match cfg.branch_mode {
        BranchMode::PerItem => {
            let all: Vec<usize> = (0..target.len()).collect();
            nth_batch(&all, cfg.batch_size, mix_seed(cfg.seed, "target/all"), step)?
        }
        BranchMode::PerBatch => {
            let labeled = target.labeled_indices();
            let unlabeled = target.unlabeled_indices();
            let p = labeled.len() as f64 / target.len().max(1) as f64;
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &format!("branch/{step}")));
            let draw: f64 = rng.random();
            let supervised = unlabeled.is_empty() || (!labeled.is_empty() && draw < p);
            if supervised {
                nth_batch(&labeled, cfg.batch_size, mix_seed(cfg.seed, "target/labeled"), step)?
            } else {
                nth_batch(&unlabeled, cfg.batch_size, mix_seed(cfg.seed, "target/unlabeled"), step)?
            }
        }
    };
    Ok(StepBatches {
        source: Batch::from_dataset(source, &si),
        target: Batch::from_dataset(target, &ti),
    })
}

/// Deterministic initial parameters of a fresh source model.
pub fn init_source_model(seed: u64, image_shape: [usize; 3], classes: usize) -> Result<Network> {
    Ok(build_classifier(image_shape, classes, InitSpec::new(mix_seed(seed, "init/m_s")))?)
}

/// Plain cross-entropy training of the source model on fully labeled
/// source data with the pretraining schedule of `cfg`.
pub fn pretrain_source(m_s: &Network, source: &DomainDataset, cfg: &TrainConfig) -> Result<Network> {
    cfg.validate()?;
    if !source.is_fully_labeled() {
        return Err(Error::config(format!(
            "source pretraining needs labels on every item; {} of {} are unlabeled",
            source.len() - source.labeled_count(),
            source.len()
        )));
    }
    let mut net = m_s.clone();
    let mut moments = Moments::new();
    let all: Vec<usize> = (0..source.len()).collect();
    for t in 0..cfg.pretrain.steps as u64 {
        let idx = nth_batch(&all, cfg.pretrain.batch_size, mix_seed(cfg.seed, "pretrain"), t)?;
        let batch = Batch::from_dataset(source, &idx);
        let y: Vec<usize> = batch.y.iter().map(|l| l.expect("labeled")).collect();
        let mut g = crate::Graph::new();
        let b = net.bind(&mut g, "m_s", true)?;
        let x = g.constant(batch.x);
        let mode = Mode::Train {
            dropout_seed: mix_seed(cfg.seed, &format!("pretrain/{t}")),
        };
        let logits = net.forward(&mut g, &b, x, mode)?;
        let loss = g.softmax_cross_entropy(logits, &y)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Numerical {
                step: t,
                term: "pretrain_ce".into(),
                value,
            });
        }
        let grads = g.backward(loss)?;
        optimizer_step(&mut net, "m_s", &grads, &mut moments, cfg.pretrain.lr, cfg.optimizer).map_err(at_step(t))?;
    }
    Ok(net)
}

/// Fresh generators and discriminators, the given source model, and a
/// target model that is either a copy of it or freshly initialized.
pub fn init_nets(cfg: &TrainConfig, m_s: &Network, classes: usize) -> Result<NetSet> {
    let shape = m_s.input_shape();
    let init = |salt: &str| InitSpec::new(mix_seed(cfg.seed, salt));
    let m_t = if cfg.variant.name.starts_from_source_model() {
        m_s.clone()
    } else {
        build_classifier(shape, classes, init("init/m_t"))?
    };
    Ok(NetSet {
        g_st: build_generator(shape, init("init/g_st"))?,
        g_ts: build_generator(shape, init("init/g_ts"))?,
        d_s: build_discriminator(shape, init("init/d_s"))?,
        d_t: build_discriminator(shape, init("init/d_t"))?,
        m_s: m_s.clone(),
        m_t,
    })
}

/// Rejects configurations that contradict the data before any step runs.
pub fn check_run(cfg: &TrainConfig, pair: &DomainPair, m_s: &Network) -> Result<()> {
    cfg.validate()?;
    pair.validate()?;
    let shape = pair.source_train.image_shape();
    if m_s.input_shape() != shape {
        return Err(Error::config(format!(
            "source model expects {:?} images, data has {shape:?}",
            m_s.input_shape()
        )));
    }
    let t = &pair.target_train;
    let unlabeled = t.len() - t.labeled_count();
    if unlabeled > 0 && !cfg.variant.name.accepts_unlabeled_target() {
        return Err(Error::config(format!(
            "variant {} needs target labels, but {unlabeled} of {} target training items are unlabeled",
            cfg.variant.name,
            t.len()
        )));
    }
    Ok(())
}

/// Stamps the step onto a numerical abort raised below the trainer.
fn at_step(step: u64) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numerical { term, value, .. } => Error::Numerical { step, term, value },
        other => other,
    }
}

fn check_finite(step: u64, values: &BTreeMap<String, f64>) -> Result<()> {
    for (term, &value) in values {
        if !value.is_finite() {
            return Err(Error::Numerical {
                step,
                term: term.clone(),
                value,
            });
        }
    }
    Ok(())
}

fn phase_name(p: Phase) -> &'static str {
    match p {
        Phase::Discriminators => "discriminators",
        Phase::Generators => "generators",
        Phase::TaskModels => "task_models",
        Phase::All => "all",
    }
}

struct PhaseResult {
    diagnostics: BTreeMap<String, f64>,
    clamps: usize,
    branch: crate::objectives::Branch,
    audit: PhaseAudit,
}

fn run_phase(
    state: &mut TrainState,
    cfg: &TrainConfig,
    batches: &StepBatches,
    phase: Phase,
    dropout_salt: &str,
) -> Result<PhaseResult> {
    let step = state.step;
    let bundle = compose_variant(
        &cfg.variant,
        &batches.source,
        &batches.target,
        &state.nets,
        ComposeOptions {
            phase,
            dropout_seed: mix_seed(cfg.seed, dropout_salt),
        },
    )?;
    let mut diagnostics = bundle.diagnostics();
    for (name, v) in bundle.losses() {
        if matches!(name, "g_loss" | "m_s_loss" | "m_t_loss") {
            diagnostics.insert(name.to_string(), bundle.value(v));
        }
    }
    check_finite(step, &diagnostics)?;

    let before = cfg.check_isolation.then(|| state.nets.clone());
    let updates: [(&str, Option<crate::Var>, &[&'static str]); 4] = [
        ("d_s_loss", bundle.d_s_loss, &["d_s"]),
        ("d_t_loss", bundle.d_t_loss, &["d_t"]),
        ("g_loss", bundle.g_loss, &["g_st", "g_ts"]),
        ("m_t_loss", bundle.m_t_loss, &["m_t"]),
    ];
    let m_s_update = [("m_s_loss", bundle.m_s_loss, &["m_s"][..])];
    for (_, loss, owners) in updates.iter().chain(m_s_update.iter()) {
        let Some(loss) = *loss else { continue };
        let lrs: Vec<(&str, f64)> = owners
            .iter()
            .filter_map(|p| cfg.lr_for(p).map(|lr| (*p, lr)))
            .collect();
        if lrs.is_empty() {
            continue;
        }
        let grads = bundle.gradients(loss)?;
        for (prefix, lr) in lrs {
            let net = state.nets.get_mut(prefix).expect("known prefix");
            optimizer_step(net, prefix, &grads, &mut state.moments, lr, cfg.optimizer).map_err(at_step(step))?;
        }
    }

    let mut changed = Vec::new();
    if let Some(before) = before {
        for (prefix, net) in state.nets.iter() {
            if !net.params_bit_eq(before.get(prefix).unwrap()) {
                if !phase.owns(prefix) {
                    return Err(Error::Isolation {
                        phase: phase_name(phase).into(),
                        net: prefix.into(),
                    });
                }
                changed.push(prefix);
            }
        }
    }
    Ok(PhaseResult {
        diagnostics,
        clamps: bundle.clamp_events(),
        branch: bundle.branch(),
        audit: PhaseAudit {
            phase: phase_name(phase),
            changed,
        },
    })
}

/// One full update: discriminators, generator, task models, in that order.
/// Evaluation is not part of the step; see [`train_until`].
pub fn train_step(state: &mut TrainState, cfg: &TrainConfig, batches: &StepBatches) -> Result<StepOutcome> {
    let t = state.step;
    let mut diagnostics = BTreeMap::new();
    let mut clamps = 0;
    let mut audits = Vec::new();
    let mut branch = None;
    for i in 0..cfg.d_steps_per_g_step {
        let r = run_phase(state, cfg, batches, Phase::Discriminators, &format!("d/{t}/{i}"))?;
        // The recorded discriminator terms are those of the last update.
        diagnostics.extend(r.diagnostics);
        clamps += r.clamps;
        branch = Some(r.branch);
        audits.push(r.audit);
    }
    for (phase, salt) in [(Phase::Generators, "g"), (Phase::TaskModels, "m")] {
        let r = run_phase(state, cfg, batches, phase, &format!("{salt}/{t}"))?;
        diagnostics.extend(r.diagnostics);
        clamps += r.clamps;
        branch = Some(r.branch);
        audits.push(r.audit);
    }
    state.step += 1;
    Ok(StepOutcome {
        record: MetricRecord {
            step: state.step,
            branch: branch.expect("at least one phase"),
            diagnostics,
            target_val_accuracy: None,
            source_val_accuracy: None,
            epsilon_clamp_count: clamps,
        },
        audits,
    })
}

/// Fresh state for a run, with the untrained target model evaluated as the
/// initial best.
pub fn init_state(cfg: &TrainConfig, pair: &DomainPair, m_s: &Network) -> Result<TrainState> {
    check_run(cfg, pair, m_s)?;
    let nets = init_nets(cfg, m_s, pair.source_train.class_count())?;
    let val = accuracy(&nets.m_t, &pair.target_val)?;
    let best = BestModel {
        step: 0,
        val_accuracy: val,
        m_t: nets.m_t.clone(),
    };
    Ok(TrainState {
        nets,
        moments: Moments::new(),
        step: 0,
        rng_seed: cfg.seed,
        history: Vec::new(),
        best,
    })
}

/// Runs steps until `state.step == until`, evaluating every `eval_every`
/// steps and at `cfg.steps`. Records are appended to the history and, if a
/// sink is given, written to it as JSON lines.
pub fn train_until(
    state: &mut TrainState,
    cfg: &TrainConfig,
    pair: &DomainPair,
    until: u64,
    mut sink: Option<&mut dyn Write>,
) -> Result<()> {
    if state.rng_seed != cfg.seed {
        return Err(Error::config(format!(
            "state was created with seed {}, config has seed {}",
            state.rng_seed, cfg.seed
        )));
    }
    while state.step < until {
        let batches = sample_batches(cfg, &pair.source_train, &pair.target_train, state.step)?;
        let mut record = train_step(state, cfg, &batches)?.record;
        let s = state.step;
        if s % cfg.eval_every as u64 == 0 || s == cfg.steps as u64 {
            let tv = accuracy(&state.nets.m_t, &pair.target_val)?;
            record.target_val_accuracy = Some(tv);
            record.source_val_accuracy = Some(accuracy(&state.nets.m_s, &pair.source_val)?);
            if tv > state.best.val_accuracy {
                state.best = BestModel {
                    step: s,
                    val_accuracy: tv,
                    m_t: state.nets.m_t.clone(),
                };
            }
        }
        if let Some(w) = sink.as_deref_mut() {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")?;
        }
        state.history.push(record);
    }
    Ok(())
}

/// Test accuracies of the final and best-by-validation target models.
pub fn summarize(state: &TrainState, cfg: &TrainConfig, pair: &DomainPair, wall_s: f64) -> Result<AblationRow> {
    Ok(AblationRow {
        variant: cfg.variant.name,
        seed: cfg.seed,
        final_acc: accuracy(&state.nets.m_t, &pair.target_test)?,
        best_acc: accuracy(&state.best.m_t, &pair.target_test)?,
        best_step: state.best.step,
        wall_s,
    })
}

/// A complete run from a pretrained source model.
pub fn run_training(
    cfg: &TrainConfig,
    pair: &DomainPair,
    pretrained_m_s: &Network,
    sink: Option<&mut dyn Write>,
) -> Result<(TrainState, AblationRow)> {
    let start = Instant::now();
    let mut state = init_state(cfg, pair, pretrained_m_s)?;
    train_until(&mut state, cfg, pair, cfg.steps as u64, sink)?;
    let row = summarize(&state, cfg, pair, start.elapsed().as_secs_f64())?;
    Ok((state, row))
}
