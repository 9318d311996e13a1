use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MetricRecord, Moments};
use crate::nets::{load_checkpoint_as, save_checkpoint, Network, Role};
use crate::objectives::{NetSet, NET_PREFIXES};
use crate::Result;

/// Target model with the highest validation accuracy seen so far.
#[derive(Debug, Clone, PartialEq)]
pub struct BestModel {
    pub step: u64,
    pub val_accuracy: f64,
    pub m_t: Network,
}

/// Everything needed to continue a run bit-exactly.
///
/// Batch sampling and dropout masks are derived from `(rng_seed, step)`, so
/// the pair is the complete random-stream state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub nets: NetSet,
    pub moments: Moments,
    pub step: u64,
    pub rng_seed: u64,
    pub history: Vec<MetricRecord>,
    pub best: BestModel,
}

const STATE_FILE: &str = "state.json";
const BEST_FILE: &str = "best_m_t.acnt";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateFile {
    step: u64,
    rng_seed: u64,
    best_step: u64,
    best_val_accuracy: f64,
    moments: Moments,
    history: Vec<MetricRecord>,
}

fn role_of(prefix: &str) -> Role {
    match &prefix[..2] {
        "g_" => Role::Generator,
        "d_" => Role::Discriminator,
        _ => Role::Classifier,
    }
}

impl TrainState {
    /// Writes `state.json` plus one checkpoint per network into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        for (prefix, net) in self.nets.iter() {
            save_checkpoint(net, dir.join(format!("{prefix}.acnt")))?;
        }
        save_checkpoint(&self.best.m_t, dir.join(BEST_FILE))?;
        let file = StateFile {
            step: self.step,
            rng_seed: self.rng_seed,
            best_step: self.best.step,
            best_val_accuracy: self.best.val_accuracy,
            moments: self.moments.clone(),
            history: self.history.clone(),
        };
        fs::write(dir.join(STATE_FILE), serde_json::to_vec(&file)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<TrainState> {
        let dir = dir.as_ref();
        let file: StateFile = serde_json::from_slice(&fs::read(dir.join(STATE_FILE))?)?;
        let load = |prefix: &str| load_checkpoint_as(dir.join(format!("{prefix}.acnt")), role_of(prefix));
        let [g_st, g_ts, d_s, d_t, m_s, m_t] = NET_PREFIXES;
        Ok(TrainState {
            nets: NetSet {
                g_st: load(g_st)?,
                g_ts: load(g_ts)?,
                d_s: load(d_s)?,
                d_t: load(d_t)?,
                m_s: load(m_s)?,
                m_t: load(m_t)?,
            },
            moments: file.moments,
            step: file.step,
            rng_seed: file.rng_seed,
            history: file.history,
            best: BestModel {
                step: file.best_step,
                val_accuracy: file.best_val_accuracy,
                m_t: load_checkpoint_as(dir.join(BEST_FILE), Role::Classifier)?,
            },
        })
    }
}
