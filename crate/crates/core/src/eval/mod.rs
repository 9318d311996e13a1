//! Accuracy, the multi-variant ablation harness and report rendering.

mod ablation;
mod report;

pub use ablation::{
    mean_std, prepare_seed, run_ablation, AblationConfig, AblationFailure, AblationOptions, AblationReport,
    SeedResult, VariantSummary, SCHEMA_VERSION,
};
pub use report::{emit_report, render, render_csv, render_json, render_svg, ReportFormat, CSV_HEADER};
pub use crate::trainer::AblationRow;

use crate::data::DomainDataset;
use crate::nets::Network;
use crate::{Error, Result};

/// Fraction of items whose argmax prediction (ties to the lowest class)
/// equals the label, with the classifier in eval mode.
pub fn accuracy(m: &Network, ds: &DomainDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::config("accuracy of an empty dataset"));
    }
    if !ds.is_fully_labeled() {
        return Err(Error::config(format!(
            "accuracy needs labels on every item; {} of {} are unlabeled",
            ds.len() - ds.labeled_count(),
            ds.len()
        )));
    }
    const CHUNK: usize = 256;
    let mut correct = 0usize;
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(CHUNK) {
        let (x, y) = ds.batch(chunk);
        let pred = m.predict(&x)?.argmax_rows();
        correct += pred.iter().zip(&y).filter(|(p, l)| Some(**p) == **l).count();
    }
    Ok(correct as f64 / ds.len() as f64)
}
