//! Desk-scale deep forest training.
//!
//! Forests come in two flavors: random forests (bootstrap sample per tree,
//! best Gini split over a sqrt-width random feature subset) and
//! completely-random tree forests (uniformly random feature, uniformly
//! random threshold between the node's observed min and max). Cascade layers
//! are grown one at a time; the class vectors handed to the next layer are
//! produced by k-fold cross-fitting so a layer never sees vectors emitted by
//! forests trained on its own rows, while the layer's published forests are
//! refit on all rows. Growth stops early on stalled validation accuracy and
//! the returned model is truncated at the best validation layer.
//!
//! All randomness flows from one master seed through fixed derivation rules,
//! so training is reproducible tree-by-tree even when the per-tree work runs
//! in parallel.

mod dataset;
pub mod scan;

pub use dataset::Dataset;

use crate::model::{
    CascadeModel, ClassVector, DecisionTree, Forest, ForestKind, ModelError, TreeNode,
    TREES_PER_FOREST,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("csv error at line {line}: {msg}")]
    Csv { line: u64, msg: String },
    #[error("label column '{name}' not found; available: {available:?}")]
    LabelColumnMissing {
        name: String,
        available: Vec<String>,
    },
    #[error("expected at most 2 distinct labels, found {distinct}")]
    NonBinaryLabels { distinct: usize },
    #[error("dataset has no rows")]
    EmptyDataset,
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("invalid training configuration: {0}")]
    BadConfig(String),
    #[error("scan window {window:?} larger than grid {grid:?}")]
    WindowTooLarge {
        window: (usize, usize),
        grid: (usize, usize),
    },
    #[error("row has width {got}, expected {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Training hyperparameters. The defaults target the modeled accelerator:
/// 32 trees per forest, depth 8, up to 4 cascade layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub trees_per_forest: usize,
    pub max_depth: usize,
    pub min_samples_split: usize,
    /// Features examined per random-forest split; `None` means
    /// `floor(sqrt(width))`.
    pub rf_feature_subsample: Option<usize>,
    /// Cross-fitting folds for augmented-feature generation.
    pub folds: usize,
    /// Consecutive non-improving layers tolerated before growth stops.
    pub patience: usize,
    pub max_layers: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            trees_per_forest: TREES_PER_FOREST,
            max_depth: 8,
            min_samples_split: 2,
            rf_feature_subsample: None,
            folds: 3,
            patience: 1,
            max_layers: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.trees_per_forest == 0
            || self.max_depth == 0
            || self.min_samples_split == 0
            || self.max_layers == 0
        {
            return Err(TrainError::BadConfig(
                "counts and depths must be positive".into(),
            ));
        }
        if self.folds < 2 {
            return Err(TrainError::BadConfig("folds must be at least 2".into()));
        }
        if self.rf_feature_subsample == Some(0) {
            return Err(TrainError::BadConfig(
                "rf_feature_subsample must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Fixed seed-splitting rule (splitmix64) so per-tree / per-fold / per-layer
/// streams are independent of execution order.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn maybe_par_map<T, F>(n: usize, f: F) -> Result<Vec<T>, TrainError>
where
    T: Send,
    F: Fn(usize) -> Result<T, TrainError> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

enum SplitRule {
    /// Best Gini split over a random feature subset of the given size.
    Gini { subsample: usize },
    /// Uniformly random feature and threshold.
    UniformRandom,
}

struct Grower<'a> {
    rows: &'a [Vec<f64>],
    labels: &'a [u8],
    width: usize,
    max_depth: usize,
    min_samples_split: usize,
    rule: SplitRule,
}

impl Grower<'_> {
    fn leaf(&self, idx: &[usize]) -> TreeNode {
        let pos = idx.iter().filter(|&&i| self.labels[i] == 1).count();
        TreeNode::leaf(pos as f64 / idx.len() as f64)
    }

    fn grow(&self, idx: Vec<usize>, depth: usize, rng: &mut ChaCha8Rng) -> TreeNode {
        let pos = idx.iter().filter(|&&i| self.labels[i] == 1).count();
        if depth >= self.max_depth
            || idx.len() < self.min_samples_split
            || pos == 0
            || pos == idx.len()
        {
            return self.leaf(&idx);
        }
        let split = match self.rule {
            SplitRule::Gini { subsample } => self.best_gini_split(&idx, subsample, rng),
            SplitRule::UniformRandom => self.uniform_random_split(&idx, rng),
        };
        let Some((feature, threshold)) = split else {
            return self.leaf(&idx);
        };
        let (left, right): (Vec<usize>, Vec<usize>) = idx
            .into_iter()
            .partition(|&i| self.rows[i][feature] <= threshold);
        debug_assert!(!left.is_empty() && !right.is_empty());
        TreeNode::split(
            feature,
            threshold,
            self.grow(left, depth + 1, rng),
            self.grow(right, depth + 1, rng),
        )
    }

    /// Distinct features sampled without replacement (partial Fisher-Yates),
    /// in draw order.
    fn shuffled_features(&self, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut pool: Vec<usize> = (0..self.width).collect();
        let k = k.min(pool.len());
        for i in 0..k {
            let j = rng.gen_range(i..pool.len());
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }

    /// As above but ascending, so the Gini scan's first-wins tie-break lands
    /// on the lowest feature index.
    fn sample_features(&self, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut chosen = self.shuffled_features(k, rng);
        chosen.sort_unstable();
        chosen
    }

    fn best_gini_split(
        &self,
        idx: &[usize],
        subsample: usize,
        rng: &mut ChaCha8Rng,
    ) -> Option<(usize, f64)> {
        let n = idx.len() as f64;
        let mut best: Option<(f64, usize, f64)> = None;
        for feature in self.sample_features(subsample, rng) {
            let mut vals: Vec<(f64, u8)> = idx
                .iter()
                .map(|&i| (self.rows[i][feature], self.labels[i]))
                .collect();
            vals.sort_by(|a, b| a.0.total_cmp(&b.0));
            let total_pos = vals.iter().filter(|(_, l)| *l == 1).count() as f64;
            let mut left_pos = 0f64;
            for i in 0..vals.len() - 1 {
                if vals[i].1 == 1 {
                    left_pos += 1.0;
                }
                if vals[i].0 == vals[i + 1].0 {
                    continue;
                }
                let nl = (i + 1) as f64;
                let nr = n - nl;
                let (pl, pr) = (left_pos / nl, (total_pos - left_pos) / nr);
                let gini = nl * 2.0 * pl * (1.0 - pl) + nr * 2.0 * pr * (1.0 - pr);
                let threshold = (vals[i].0 + vals[i + 1].0) / 2.0;
                // Strict improvement keeps the first (lowest feature, lowest
                // threshold) candidate on ties.
                if best.map_or(true, |(g, _, _)| gini < g) {
                    best = Some((gini, feature, threshold));
                }
            }
        }
        best.map(|(_, f, t)| (f, t))
    }

    fn uniform_random_split(&self, idx: &[usize], rng: &mut ChaCha8Rng) -> Option<(usize, f64)> {
        // Try features in a shuffled order; a feature that is constant on
        // this node's rows is redrawn until the width is exhausted.
        for feature in self.shuffled_features(self.width, rng) {
            let mut min = f64::INFINITY;
            let mut max = f64::NEG_INFINITY;
            for &i in idx {
                let v = self.rows[i][feature];
                min = min.min(v);
                max = max.max(v);
            }
            if max > min {
                let threshold = rng.gen_range(min..max);
                return Some((feature, threshold));
            }
        }
        None
    }
}

fn isqrt_floor(n: usize) -> usize {
    ((n as f64).sqrt().floor() as usize).max(1)
}

fn train_forest_on(
    kind: ForestKind,
    rows: &[Vec<f64>],
    labels: &[u8],
    idx: &[usize],
    config: &TrainConfig,
    seed: u64,
) -> Result<Forest, TrainError> {
    config.validate()?;
    if idx.is_empty() {
        return Err(TrainError::TooFewSamples { need: 1, got: 0 });
    }
    let width = rows[idx[0]].len();
    if let Some(bad) = idx.iter().find(|&&i| rows[i].len() != width) {
        return Err(TrainError::WidthMismatch {
            expected: width,
            got: rows[*bad].len(),
        });
    }
    let classes: std::collections::BTreeSet<u8> = idx.iter().map(|&i| labels[i]).collect();
    if classes.len() < 2 {
        log::warn!(
            "training data for {kind:?} forest holds a single class; trees degenerate to leaves"
        );
    }
    let rule = || match kind {
        ForestKind::Random => SplitRule::Gini {
            subsample: config.rf_feature_subsample.unwrap_or_else(|| isqrt_floor(width)),
        },
        ForestKind::CompletelyRandom => SplitRule::UniformRandom,
    };
    let trees = maybe_par_map(config.trees_per_forest, |t| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, t as u64));
        let grower = Grower {
            rows,
            labels,
            width,
            max_depth: config.max_depth,
            min_samples_split: config.min_samples_split,
            rule: rule(),
        };
        // Random forests bootstrap their per-tree sample; completely-random
        // trees see every row and differ only through their random splits.
        let sample: Vec<usize> = match kind {
            ForestKind::Random => (0..idx.len())
                .map(|_| idx[rng.gen_range(0..idx.len())])
                .collect(),
            ForestKind::CompletelyRandom => idx.to_vec(),
        };
        Ok(DecisionTree::new(grower.grow(sample, 1, &mut rng)))
    })?;
    Ok(Forest::new(kind, trees)?)
}

/// Train a 32-tree random forest (bootstrap + Gini over a feature subset).
pub fn train_random_forest(
    rows: &[Vec<f64>],
    labels: &[u8],
    config: &TrainConfig,
    seed: u64,
) -> Result<Forest, TrainError> {
    let idx: Vec<usize> = (0..rows.len()).collect();
    train_forest_on(ForestKind::Random, rows, labels, &idx, config, seed)
}

/// Train a 32-tree completely-random tree forest.
pub fn train_completely_random_forest(
    rows: &[Vec<f64>],
    labels: &[u8],
    config: &TrainConfig,
    seed: u64,
) -> Result<Forest, TrainError> {
    let idx: Vec<usize> = (0..rows.len()).collect();
    train_forest_on(ForestKind::CompletelyRandom, rows, labels, &idx, config, seed)
}

/// Cross-fitted class vectors for one cascade layer plus the layer's
/// published forests (refit on all rows).
///
/// Every row's vectors come from the fold model that never saw that row, so
/// augmented features do not leak training labels. Fold membership is
/// recorded in the result for auditing.
pub struct AugmentedFeatures {
    pub vectors: Vec<[ClassVector; 2]>,
    pub forests: [Forest; 2],
    pub fold_of: Vec<usize>,
}

pub fn generate_augmented_features(
    rows: &[Vec<f64>],
    labels: &[u8],
    config: &TrainConfig,
    seed: u64,
) -> Result<AugmentedFeatures, TrainError> {
    config.validate()?;
    let n = rows.len();
    if n < config.folds {
        return Err(TrainError::TooFewSamples {
            need: config.folds,
            got: n,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xF01D));
        order.shuffle(&mut rng);
    }
    let mut fold_of = vec![0usize; n];
    for (rank, &i) in order.iter().enumerate() {
        fold_of[i] = rank % config.folds;
    }

    let per_fold = maybe_par_map(config.folds, |f| {
        let train_idx: Vec<usize> = (0..n).filter(|&i| fold_of[i] != f).collect();
        let fold_seed = derive_seed(seed, 1 + f as u64);
        let cr = train_forest_on(
            ForestKind::CompletelyRandom,
            rows,
            labels,
            &train_idx,
            config,
            derive_seed(fold_seed, 0),
        )?;
        let rf = train_forest_on(
            ForestKind::Random,
            rows,
            labels,
            &train_idx,
            config,
            derive_seed(fold_seed, 1),
        )?;
        Ok([cr, rf])
    })?;

    let mut vectors = vec![[ClassVector::from_positive(0.0); 2]; n];
    for (i, row) in rows.iter().enumerate() {
        let [cr, rf] = &per_fold[fold_of[i]];
        vectors[i] = [cr.predict(row)?, rf.predict(row)?];
    }

    let all: Vec<usize> = (0..n).collect();
    let refit_seed = derive_seed(seed, 0x5EF1_7);
    let cr = train_forest_on(
        ForestKind::CompletelyRandom,
        rows,
        labels,
        &all,
        config,
        derive_seed(refit_seed, 0),
    )?;
    let rf = train_forest_on(
        ForestKind::Random,
        rows,
        labels,
        &all,
        config,
        derive_seed(refit_seed, 1),
    )?;
    Ok(AugmentedFeatures {
        vectors,
        forests: [cr, rf],
        fold_of,
    })
}

/// Layer count that truncation will keep: argmax of the validation sequence,
/// first occurrence.
pub fn best_layer_count(val_accuracy: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, acc) in val_accuracy.iter().enumerate() {
        if *acc > val_accuracy[best] {
            best = i;
        }
    }
    best + 1
}

/// True once `patience` consecutive layers have failed to beat the best
/// validation accuracy seen so far.
pub fn should_stop(val_accuracy: &[f64], patience: usize) -> bool {
    if val_accuracy.is_empty() {
        return false;
    }
    val_accuracy.len() - best_layer_count(val_accuracy) >= patience
}

fn accuracy_raw(preds: &[u8], labels: &[u8]) -> f64 {
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    correct as f64 / preds.len() as f64
}

/// Classification accuracy of a model over labeled rows.
pub fn accuracy(model: &CascadeModel, rows: &[Vec<f64>], labels: &[u8]) -> Result<f64, TrainError> {
    if rows.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let classes = maybe_par_map(rows.len(), |i| Ok(model.infer(&rows[i])?.prediction.class()))?;
    let correct = classes
        .iter()
        .zip(labels)
        .filter(|(c, l)| *c == *l)
        .count();
    Ok(correct as f64 / rows.len() as f64)
}

/// A grown cascade with its validation history.
pub struct CascadeGrowth {
    pub model: CascadeModel,
    pub val_accuracy: Vec<f64>,
    pub grown_layers: usize,
}

/// Grow a cascade layer by layer with early stopping, returning the model
/// truncated at the best validation layer.
pub fn grow_cascade(
    train_rows: &[Vec<f64>],
    train_labels: &[u8],
    valid_rows: &[Vec<f64>],
    valid_labels: &[u8],
    config: &TrainConfig,
    seed: u64,
) -> Result<CascadeGrowth, TrainError> {
    config.validate()?;
    if train_rows.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let base_width = train_rows[0].len();
    let have_validation = !valid_rows.is_empty();
    if !have_validation {
        log::warn!("empty validation set: growing the fixed maximum of {} layers", config.max_layers);
    }

    let mut layer_rows: Vec<Vec<f64>> = train_rows.to_vec();
    let mut layers: Vec<[Forest; 2]> = Vec::new();
    let mut val_accuracy: Vec<f64> = Vec::new();

    for layer_idx in 0..config.max_layers {
        let aug = generate_augmented_features(
            &layer_rows,
            train_labels,
            config,
            derive_seed(seed, 0x1A7E5 + layer_idx as u64),
        )?;
        layers.push(aug.forests);
        let model = CascadeModel::new(base_width, layers.clone())?;
        if have_validation {
            val_accuracy.push(accuracy(&model, valid_rows, valid_labels)?);
        }
        if layer_idx + 1 < config.max_layers {
            layer_rows = train_rows
                .iter()
                .zip(&aug.vectors)
                .map(|(base, [a, b])| {
                    let mut row = base.clone();
                    row.extend_from_slice(&a.0);
                    row.extend_from_slice(&b.0);
                    row
                })
                .collect();
        }
        if have_validation && should_stop(&val_accuracy, config.patience) {
            break;
        }
    }

    let grown_layers = layers.len();
    let keep = if have_validation {
        best_layer_count(&val_accuracy)
    } else {
        layers.len()
    };
    layers.truncate(keep);
    Ok(CascadeGrowth {
        model: CascadeModel::new(base_width, layers)?,
        val_accuracy,
        grown_layers,
    })
}
