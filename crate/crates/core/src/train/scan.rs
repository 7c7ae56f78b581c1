//! Multi-grained scanning: sliding-window feature transformation.
//!
//! Each window size ("grain") slides over the instance grid; every patch is
//! scored by the grain's two forests and the class vectors of all patches
//! concatenate into that grain's transformed feature vector. A cascade
//! trained on scanned data routes grain `i` to layers `i, i+G, i+2G, ...`,
//! each layer consuming its grain's vector (plus the previous layer's class
//! vectors) instead of the raw grid.

use super::{
    accuracy_raw, generate_augmented_features, train_forest_on, best_layer_count, should_stop,
    TrainConfig, TrainError,
};
use crate::model::{ClassVector, Forest, ForestKind};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridShape {
    pub rows: usize,
    pub cols: usize,
}

impl GridShape {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Sliding-window configuration: up to a few `(rows, cols)` window sizes and
/// a common stride.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanConfig {
    pub windows: Vec<(usize, usize)>,
    pub stride: usize,
}

impl ScanConfig {
    pub fn new(windows: Vec<(usize, usize)>) -> Self {
        ScanConfig { windows, stride: 1 }
    }

    pub fn validate(&self, grid: GridShape) -> Result<(), TrainError> {
        if self.windows.is_empty() || self.stride == 0 {
            return Err(TrainError::BadConfig(
                "scanning needs at least one window and a positive stride".into(),
            ));
        }
        for &(wr, wc) in &self.windows {
            if wr == 0 || wc == 0 || wr > grid.rows || wc > grid.cols {
                return Err(TrainError::WindowTooLarge {
                    window: (wr, wc),
                    grid: (grid.rows, grid.cols),
                });
            }
        }
        Ok(())
    }

    /// Patches produced by one window over the grid.
    pub fn patch_count(&self, grid: GridShape, window: (usize, usize)) -> usize {
        let steps = |span: usize, w: usize| (span - w) / self.stride + 1;
        steps(grid.rows, window.0) * steps(grid.cols, window.1)
    }
}

/// All patches of `window` over a row-major flattened grid instance.
pub fn extract_patches(
    instance: &[f64],
    grid: GridShape,
    window: (usize, usize),
    stride: usize,
) -> Result<Vec<Vec<f64>>, TrainError> {
    if instance.len() != grid.len() {
        return Err(TrainError::WidthMismatch {
            expected: grid.len(),
            got: instance.len(),
        });
    }
    let (wr, wc) = window;
    let mut patches = Vec::new();
    let mut r = 0;
    while r + wr <= grid.rows {
        let mut c = 0;
        while c + wc <= grid.cols {
            let mut patch = Vec::with_capacity(wr * wc);
            for dr in 0..wr {
                let start = (r + dr) * grid.cols + c;
                patch.extend_from_slice(&instance[start..start + wc]);
            }
            patches.push(patch);
            c += stride;
        }
        r += stride;
    }
    Ok(patches)
}

/// Trained scanning stage: one (completely-random, random) forest pair per
/// grain.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanModel {
    pub grid: GridShape,
    pub config: ScanConfig,
    pub grains: Vec<[Forest; 2]>,
}

impl ScanModel {
    pub fn num_grains(&self) -> usize {
        self.grains.len()
    }

    /// Transformed vector width of grain `g`.
    pub fn grain_width(&self, g: usize) -> usize {
        self.config.patch_count(self.grid, self.config.windows[g]) * 4
    }

    /// Per-grain transformed feature vectors for one instance: each patch
    /// contributes both forests' class vectors, concatenated in patch order.
    pub fn transform(&self, instance: &[f64]) -> Result<Vec<Vec<f64>>, TrainError> {
        let mut out = Vec::with_capacity(self.grains.len());
        for (g, forests) in self.grains.iter().enumerate() {
            let window = self.config.windows[g];
            let patches = extract_patches(instance, self.grid, window, self.config.stride)?;
            let mut vector = Vec::with_capacity(patches.len() * 4);
            for patch in &patches {
                for forest in forests {
                    vector.extend_from_slice(&forest.predict(patch)?.0);
                }
            }
            out.push(vector);
        }
        Ok(out)
    }
}

/// Train the scanning forests: every patch inherits its instance's label.
pub fn train_scan_model(
    instances: &[Vec<f64>],
    labels: &[u8],
    grid: GridShape,
    scan: &ScanConfig,
    config: &TrainConfig,
    seed: u64,
) -> Result<ScanModel, TrainError> {
    scan.validate(grid)?;
    if instances.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut grains = Vec::with_capacity(scan.windows.len());
    for (g, &window) in scan.windows.iter().enumerate() {
        let mut patch_rows = Vec::new();
        let mut patch_labels = Vec::new();
        for (inst, &label) in instances.iter().zip(labels) {
            for patch in extract_patches(inst, grid, window, scan.stride)? {
                patch_rows.push(patch);
                patch_labels.push(label);
            }
        }
        let idx: Vec<usize> = (0..patch_rows.len()).collect();
        let grain_seed = super::derive_seed(seed, 0x5CA2 + g as u64);
        let cr = train_forest_on(
            ForestKind::CompletelyRandom,
            &patch_rows,
            &patch_labels,
            &idx,
            config,
            super::derive_seed(grain_seed, 0),
        )?;
        let rf = train_forest_on(
            ForestKind::Random,
            &patch_rows,
            &patch_labels,
            &idx,
            config,
            super::derive_seed(grain_seed, 1),
        )?;
        grains.push([cr, rf]);
    }
    Ok(ScanModel {
        grid,
        config: scan.clone(),
        grains,
    })
}

/// Cascade over scanned features: layer `k` consumes grain `k mod G`'s
/// transformed vector concatenated with the previous layer's class vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ScannedCascadeModel {
    pub scan: ScanModel,
    pub layers: Vec<[Forest; 2]>,
}

impl ScannedCascadeModel {
    pub fn grain_for_layer(&self, layer: usize) -> usize {
        layer % self.scan.num_grains()
    }

    pub fn infer(&self, instance: &[f64]) -> Result<ClassVector, TrainError> {
        let grains = self.scan.transform(instance)?;
        let mut prev: Option<[ClassVector; 2]> = None;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut row = grains[self.grain_for_layer(k)].clone();
            if let Some([a, b]) = prev {
                row.extend_from_slice(&a.0);
                row.extend_from_slice(&b.0);
            }
            prev = Some([layer[0].predict(&row)?, layer[1].predict(&row)?]);
        }
        let [a, b] = prev.ok_or(TrainError::EmptyDataset)?;
        Ok(ClassVector::mean2(a, b))
    }

    pub fn accuracy(&self, instances: &[Vec<f64>], labels: &[u8]) -> Result<f64, TrainError> {
        let mut correct = 0usize;
        for (inst, &label) in instances.iter().zip(labels) {
            if self.infer(inst)?.class() == label {
                correct += 1;
            }
        }
        Ok(correct as f64 / instances.len() as f64)
    }
}

/// A grown scanned cascade with its validation history.
pub struct ScannedCascadeGrowth {
    pub model: ScannedCascadeModel,
    pub val_accuracy: Vec<f64>,
}

/// Train scanning forests, then grow the cascade over the transformed
/// vectors with the usual cross-fitting and early stopping.
pub fn train_scanned_cascade(
    train_instances: &[Vec<f64>],
    train_labels: &[u8],
    valid_instances: &[Vec<f64>],
    valid_labels: &[u8],
    grid: GridShape,
    scan_cfg: &ScanConfig,
    config: &TrainConfig,
    seed: u64,
) -> Result<ScannedCascadeGrowth, TrainError> {
    config.validate()?;
    let scan = train_scan_model(train_instances, train_labels, grid, scan_cfg, config, seed)?;
    let grains = scan.num_grains();

    let transform_all = |instances: &[Vec<f64>]| -> Result<Vec<Vec<Vec<f64>>>, TrainError> {
        instances.iter().map(|i| scan.transform(i)).collect()
    };
    let train_grains = transform_all(train_instances)?;
    let valid_grains = transform_all(valid_instances)?;
    let have_validation = !valid_instances.is_empty();

    let mut layers: Vec<[Forest; 2]> = Vec::new();
    let mut val_accuracy = Vec::new();
    let mut aug: Option<Vec<[ClassVector; 2]>> = None;

    for layer_idx in 0..config.max_layers {
        let g = layer_idx % grains;
        let layer_rows: Vec<Vec<f64>> = train_grains
            .iter()
            .enumerate()
            .map(|(i, per_grain)| {
                let mut row = per_grain[g].clone();
                if let Some(vs) = &aug {
                    row.extend_from_slice(&vs[i][0].0);
                    row.extend_from_slice(&vs[i][1].0);
                }
                row
            })
            .collect();
        let fitted = generate_augmented_features(
            &layer_rows,
            train_labels,
            config,
            super::derive_seed(seed, 0x9CAD + layer_idx as u64),
        )?;
        layers.push(fitted.forests);
        aug = Some(fitted.vectors);

        if have_validation {
            let model = ScannedCascadeModel {
                scan: scan.clone(),
                layers: layers.clone(),
            };
            let preds: Result<Vec<u8>, TrainError> = valid_instances
                .iter()
                .enumerate()
                .map(|(i, _)| {
                    // Reuse the precomputed grain vectors for speed.
                    let mut prev: Option<[ClassVector; 2]> = None;
                    for (k, layer) in model.layers.iter().enumerate() {
                        let mut row = valid_grains[i][model.grain_for_layer(k)].clone();
                        if let Some([a, b]) = prev {
                            row.extend_from_slice(&a.0);
                            row.extend_from_slice(&b.0);
                        }
                        prev = Some([layer[0].predict(&row)?, layer[1].predict(&row)?]);
                    }
                    let [a, b] = prev.unwrap();
                    Ok(ClassVector::mean2(a, b).class())
                })
                .collect();
            val_accuracy.push(accuracy_raw(&preds?, valid_labels));
            if should_stop(&val_accuracy, config.patience) {
                break;
            }
        }
    }

    let keep = if have_validation {
        best_layer_count(&val_accuracy)
    } else {
        layers.len()
    };
    layers.truncate(keep);
    Ok(ScannedCascadeGrowth {
        model: ScannedCascadeModel { scan, layers },
        val_accuracy,
    })
}
