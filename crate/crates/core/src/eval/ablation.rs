use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DataConfig, DomainPair};
use crate::nets::Network;
use crate::objectives::{VariantName, VariantSpec};
use crate::trainer::{init_source_model, pretrain_source, run_training, AblationRow, TrainConfig};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// One (variant, seed) result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub final_acc: f64,
    pub best_acc: f64,
    pub best_step: u64,
    pub wall_s: f64,
}

/// Per-seed results of one variant and their statistics. Standard
/// deviations use the `n - 1` denominator and are 0 for a single seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: VariantName,
    pub runs: Vec<SeedResult>,
    pub final_mean: f64,
    pub final_std: f64,
    pub best_mean: f64,
    pub best_std: f64,
    pub wall_s: f64,
}

impl VariantSummary {
    pub fn from_runs(variant: VariantName, runs: Vec<SeedResult>) -> Self {
        let finals: Vec<f64> = runs.iter().map(|r| r.final_acc).collect();
        let bests: Vec<f64> = runs.iter().map(|r| r.best_acc).collect();
        let (final_mean, final_std) = mean_std(&finals);
        let (best_mean, best_std) = mean_std(&bests);
        VariantSummary {
            variant,
            wall_s: runs.iter().map(|r| r.wall_s).sum(),
            runs,
            final_mean,
            final_std,
            best_mean,
            best_std,
        }
    }
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub schema_version: u32,
    /// SHA-256 of the canonical JSON of every config and seed of the suite.
    pub fingerprint: String,
    /// True when a run aborted; rows then hold only the completed runs.
    pub partial: bool,
    pub rows: Vec<VariantSummary>,
}

impl AblationReport {
    pub fn row(&self, v: VariantName) -> Option<&VariantSummary> {
        self.rows.iter().find(|r| r.variant == v)
    }
}

/// A suite of (variant, seed) runs over one data configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub variants: Vec<VariantName>,
    pub seeds: Vec<u64>,
    /// Base training config. Each run replaces the variant name (keeping
    /// that variant's default weights) and the seed.
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            variants: vec![
                VariantName::NoAdaptation,
                VariantName::Cyclegan,
                VariantName::Rcal,
                VariantName::Acal,
            ],
            seeds: vec![1, 2, 3],
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl AblationConfig {
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        crate::sha256_hex(&canonical)
    }

    /// The training config of one run.
    pub fn run_config(&self, variant: VariantName, seed: u64) -> TrainConfig {
        let mut spec = VariantSpec::new(variant).with_supervision(self.train.variant.supervision);
        spec.saturating_g = self.train.variant.saturating_g;
        TrainConfig {
            variant: spec,
            seed,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() || self.seeds.is_empty() {
            return Err(Error::config("an ablation needs at least one variant and one seed"));
        }
        // Contradictions specific to one variant surface as that run's
        // error, so the other runs still complete.
        self.train.validate()
    }
}

#[derive(Debug, Clone, Default)]
pub struct AblationOptions {
    /// Directory for one metrics stream per run, named
    /// `{variant}_seed{seed}.jsonl`.
    pub metrics_dir: Option<PathBuf>,
    /// Record every wall time as 0 so reports are byte-stable.
    pub zero_wall_time: bool,
}

/// An aborted suite: the failing run's error and the runs that completed.
#[derive(Debug, thiserror::Error)]
#[error("{error}")]
pub struct AblationFailure {
    pub partial: AblationReport,
    #[source]
    pub error: Error,
}

/// Data and pretrained source model of one seed, shared by every variant.
pub fn prepare_seed(cfg: &AblationConfig, seed: u64) -> Result<(DomainPair, Network)> {
    let base = cfg.run_config(cfg.variants[0], seed);
    let pair = cfg.data.build(seed, base.variant.supervision.labeled_fraction())?;
    let init = init_source_model(seed, pair.source_train.image_shape(), pair.source_train.class_count())?;
    let m_s = pretrain_source(&init, &pair.source_train, &base)?;
    Ok((pair, m_s))
}

fn run_one(
    cfg: &AblationConfig,
    opts: &AblationOptions,
    variant: VariantName,
    seed: u64,
    prepared: &(DomainPair, Network),
) -> Result<AblationRow> {
    let tc = cfg.run_config(variant, seed);
    let (pair, m_s) = prepared;
    let mut row = match &opts.metrics_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut w = BufWriter::new(File::create(dir.join(format!("{variant}_seed{seed}.jsonl")))?);
            run_training(&tc, pair, m_s, Some(&mut w))?.1
        }
        None => run_training(&tc, pair, m_s, None)?.1,
    };
    if opts.zero_wall_time {
        row.wall_s = 0.0;
    }
    Ok(row)
}

/// Runs every (variant, seed) pair, in parallel where threads allow, and
/// assembles the report in (variant, seed) order.
pub fn run_ablation(cfg: &AblationConfig, opts: &AblationOptions) -> std::result::Result<AblationReport, AblationFailure> {
    let fingerprint = cfg.fingerprint();
    let empty = |partial| AblationReport {
        schema_version: SCHEMA_VERSION,
        fingerprint: fingerprint.clone(),
        partial,
        rows: Vec::new(),
    };
    if let Err(error) = cfg.validate() {
        return Err(AblationFailure {
            partial: empty(true),
            error,
        });
    }
    let prepared: Vec<Result<(DomainPair, Network)>> =
        cfg.seeds.par_iter().map(|&s| prepare_seed(cfg, s)).collect();
    let mut ready = Vec::with_capacity(prepared.len());
    for (p, &seed) in prepared.into_iter().zip(&cfg.seeds) {
        match p {
            Ok(p) => ready.push(p),
            Err(e) => {
                return Err(AblationFailure {
                    partial: empty(true),
                    error: Error::Run {
                        variant: "pretrain".into(),
                        seed,
                        source: Box::new(e),
                    },
                })
            }
        }
    }
    let jobs: Vec<(VariantName, usize)> = cfg
        .variants
        .iter()
        .flat_map(|&v| (0..cfg.seeds.len()).map(move |i| (v, i)))
        .collect();
    let results: Vec<Result<AblationRow>> = jobs
        .par_iter()
        .map(|&(v, i)| {
            let seed = cfg.seeds[i];
            run_one(cfg, opts, v, seed, &ready[i]).map_err(|e| Error::Run {
                variant: v.to_string(),
                seed,
                source: Box::new(e),
            })
        })
        .collect();

    let mut report = empty(false);
    let mut first_error = None;
    for &v in &cfg.variants {
        let mut runs = Vec::new();
        for (&(jv, i), r) in jobs.iter().zip(&results) {
            if jv != v {
                continue;
            }
            match r {
                Ok(row) => runs.push(SeedResult {
                    seed: cfg.seeds[i],
                    final_acc: row.final_acc,
                    best_acc: row.best_acc,
                    best_step: row.best_step,
                    wall_s: row.wall_s,
                }),
                Err(_) => report.partial = true,
            }
        }
        if !runs.is_empty() {
            report.rows.push(VariantSummary::from_runs(v, runs));
        }
    }
    for r in results {
        if let Err(e) = r {
            first_error = Some(e);
            break;
        }
    }
    match first_error {
        None => Ok(report),
        Some(error) => Err(AblationFailure { partial: report, error }),
    }
}
