use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{
    gen_glyph_domain, load_idx, split_per_class, strip_labels, subsample_per_class, DataError, DomainDataset,
    GlyphStyle, Split,
};
use crate::nets::mix_seed;

/// Everything one adaptation run reads.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainPair {
    pub source_train: DomainDataset,
    pub source_val: DomainDataset,
    /// Low-resource target training set; may be partly or fully unlabeled.
    pub target_train: DomainDataset,
    pub target_val: DomainDataset,
    pub target_test: DomainDataset,
}

impl DomainPair {
    pub fn validate(&self) -> Result<(), DataError> {
        let shape = self.source_train.image_shape();
        for (name, ds) in self.parts() {
            if ds.is_empty() {
                return Err(DataError::Invalid(format!("{name} is empty")));
            }
            if ds.image_shape() != shape {
                return Err(DataError::Invalid(format!(
                    "{name} images are {:?}, source train images are {shape:?}",
                    ds.image_shape()
                )));
            }
            if ds.class_count() != self.source_train.class_count() {
                return Err(DataError::Invalid(format!("{name} has a different class count")));
            }
        }
        for (name, ds) in [
            ("source_train", &self.source_train),
            ("source_val", &self.source_val),
            ("target_val", &self.target_val),
            ("target_test", &self.target_test),
        ] {
            if !ds.is_fully_labeled() {
                return Err(DataError::Invalid(format!("{name} must be fully labeled")));
            }
        }
        Ok(())
    }

    pub fn parts(&self) -> [(&'static str, &DomainDataset); 5] {
        [
            ("source_train", &self.source_train),
            ("source_val", &self.source_val),
            ("target_train", &self.target_train),
            ("target_val", &self.target_val),
            ("target_test", &self.target_test),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlyphPairConfig {
    pub source_style: GlyphStyle,
    pub target_style: GlyphStyle,
    pub source_per_class: usize,
    /// Size of the target pool the per-run labeled sample is drawn from.
    pub target_pool_per_class: usize,
    /// Labeled target items per class seen in training.
    pub target_per_class: usize,
    /// Per-class size of each validation and test split.
    pub eval_per_class: usize,
    /// Seed of the rendered corpora; fixed across runs.
    pub corpus_seed: u64,
}

impl Default for GlyphPairConfig {
    fn default() -> Self {
        GlyphPairConfig {
            source_style: GlyphStyle::source_default(),
            target_style: GlyphStyle::target_default(),
            source_per_class: 200,
            target_pool_per_class: 100,
            target_per_class: 10,
            eval_per_class: 50,
            corpus_seed: 2024,
        }
    }
}

/// Paired IDX files. Validation items are carved per class out of the
/// test files; the rest stay in the test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxPairConfig {
    pub source_train_images: PathBuf,
    pub source_train_labels: PathBuf,
    pub target_train_images: PathBuf,
    pub target_train_labels: PathBuf,
    pub target_test_images: PathBuf,
    pub target_test_labels: PathBuf,
    pub class_count: usize,
    pub target_per_class: usize,
    pub val_per_class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Glyph(GlyphPairConfig),
    Idx(IdxPairConfig),
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Glyph(GlyphPairConfig::default())
    }
}

impl DataConfig {
    /// Builds the pair for one run: the labeled target sample is drawn with
    /// `run_seed`, then labels are kept on `labeled_fraction` of it per
    /// class.
    pub fn build(&self, run_seed: u64, labeled_fraction: f64) -> Result<DomainPair, DataError> {
        let pick = mix_seed(run_seed, "target-sample");
        let strip = mix_seed(run_seed, "target-labels");
        let pair = match self {
            DataConfig::Glyph(c) => {
                let seed = c.corpus_seed;
                let source_train = gen_glyph_domain(&c.source_style, c.source_per_class, seed, Split::Train)?;
                let source_val = gen_glyph_domain(&c.source_style, c.eval_per_class, seed, Split::Val)?;
                // The target pool uses its own stream so source and target
                // never share jitter draws.
                let tseed = mix_seed(seed, "target");
                let pool = gen_glyph_domain(&c.target_style, c.target_pool_per_class, tseed, Split::Train)?;
                let target_train = subsample_per_class(&pool, c.target_per_class, pick)?;
                DomainPair {
                    source_train,
                    source_val,
                    target_train: strip_labels(&target_train, labeled_fraction, strip)?,
                    target_val: gen_glyph_domain(&c.target_style, c.eval_per_class, tseed, Split::Val)?,
                    target_test: gen_glyph_domain(&c.target_style, c.eval_per_class, tseed, Split::Test)?,
                }
            }
            DataConfig::Idx(c) => {
                let k = c.class_count;
                let source_all = load_idx(&c.source_train_images, &c.source_train_labels, "source", k, Split::Train)?;
                let (source_val, source_train) = split_per_class(&source_all, c.val_per_class, mix_seed(0, "source-val"))?;
                let pool = load_idx(&c.target_train_images, &c.target_train_labels, "target", k, Split::Train)?;
                let target_train = subsample_per_class(&pool, c.target_per_class, pick)?;
                let test_all = load_idx(&c.target_test_images, &c.target_test_labels, "target", k, Split::Test)?;
                let (target_val, target_test) = split_per_class(&test_all, c.val_per_class, mix_seed(0, "target-val"))?;
                DomainPair {
                    source_train,
                    source_val,
                    target_train: strip_labels(&target_train, labeled_fraction, strip)?,
                    target_val,
                    target_test,
                }
            }
        };
        pair.validate()?;
        Ok(pair)
    }
}
