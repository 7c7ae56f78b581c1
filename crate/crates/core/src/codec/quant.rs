//! Per-feature affine quantization and the integer-domain model.
//!
//! Features and split thresholds share one 14-bit affine map per feature
//! index, calibrated from data; leaf probabilities use the fixed
//! `p -> round(p * (2^14 - 1))` map. All rounding is round-half-up, which
//! keeps quantization monotone and order-independent.
//!
//! [`QuantizedModel::infer`] is the integer reference engine: it reproduces
//! the accelerator's arithmetic (leaf-sum accumulation, shift-by-5 forest
//! averaging, shift-by-1 final averaging) by walking pointer trees, giving
//! the simulator an independent route to check against bit-for-bit.

use super::{pack_model, CodecError, PackedModel, VALUE_MAX};
use crate::model::{CascadeModel, ForestKind, TreeNode, FORESTS_PER_LAYER, NUM_CLASSES, TREES_PER_FOREST};
use serde::{Deserialize, Serialize};

/// Augmented class-vector entries appended to the base features for every
/// layer after the first.
pub const AUGMENTED_WIDTH: usize = FORESTS_PER_LAYER * NUM_CLASSES;

/// Quantized positive-class threshold for the `p >= 0.5` decision rule:
/// `round_half_up(0.5 * 16383)`.
pub const CLASS_THRESHOLD_Q: u16 = 8192;

fn round_half_up(x: f64) -> f64 {
    (x + 0.5).floor()
}

/// Affine map from a real-valued feature to an unsigned 14-bit word.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub scale: f64,
    pub offset: f64,
}

impl FeatureMap {
    /// Map a calibrated `[min, max]` range onto the full 14-bit range. A
    /// constant feature (min == max) degenerates to an identity-scale map.
    pub fn from_range(min: f64, max: f64) -> Self {
        if max > min {
            FeatureMap {
                scale: VALUE_MAX as f64 / (max - min),
                offset: min,
            }
        } else {
            FeatureMap {
                scale: 1.0,
                offset: min,
            }
        }
    }

    /// Full-range map for values already in [0, 1] (class-vector features).
    pub fn unit() -> Self {
        FeatureMap {
            scale: VALUE_MAX as f64,
            offset: 0.0,
        }
    }

    pub fn quantize(&self, x: f64) -> u16 {
        let q = round_half_up((x - self.offset) * self.scale);
        if q <= 0.0 {
            0
        } else if q >= VALUE_MAX as f64 {
            VALUE_MAX
        } else {
            q as u16
        }
    }

    pub fn dequantize(&self, q: u16) -> f64 {
        q as f64 / self.scale + self.offset
    }

    /// Size of one quantization step in the real domain.
    pub fn step(&self) -> f64 {
        1.0 / self.scale
    }
}

/// Leaf probabilities map onto the full 14-bit range.
pub fn quantize_leaf(p: f64) -> u16 {
    let q = round_half_up(p * VALUE_MAX as f64);
    if q <= 0.0 {
        0
    } else if q >= VALUE_MAX as f64 {
        VALUE_MAX
    } else {
        q as u16
    }
}

pub fn dequantize_leaf(q: u16) -> f64 {
    q as f64 / VALUE_MAX as f64
}

/// One cascade layer's per-feature maps, indexed by layer input position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizationMap {
    pub features: Vec<FeatureMap>,
}

impl QuantizationMap {
    pub fn width(&self) -> usize {
        self.features.len()
    }

    pub fn quantize_row(&self, row: &[f64]) -> Result<Vec<u16>, CodecError> {
        if row.len() != self.features.len() {
            return Err(CodecError::FeatureWidth {
                got: row.len(),
                expected: self.features.len(),
            });
        }
        Ok(row
            .iter()
            .zip(&self.features)
            .map(|(x, m)| m.quantize(*x))
            .collect())
    }

    /// Per-feature min/max over the calibration rows.
    pub fn from_calibration(rows: &[Vec<f64>], width: usize) -> Result<Self, CodecError> {
        if rows.is_empty() {
            return Err(CodecError::EmptyCalibration);
        }
        let mut min = vec![f64::INFINITY; width];
        let mut max = vec![f64::NEG_INFINITY; width];
        for (i, row) in rows.iter().enumerate() {
            if row.len() != width {
                return Err(CodecError::CalibrationWidth {
                    row: i,
                    got: row.len(),
                    expected: width,
                });
            }
            for (j, x) in row.iter().enumerate() {
                min[j] = min[j].min(*x);
                max[j] = max[j].max(*x);
            }
        }
        Ok(QuantizationMap {
            features: min
                .into_iter()
                .zip(max)
                .map(|(lo, hi)| FeatureMap::from_range(lo, hi))
                .collect(),
        })
    }
}

/// A tree over quantized thresholds and leaf values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuantizedNode {
    Split {
        feature: usize,
        threshold_q: u16,
        left: Box<QuantizedNode>,
        right: Box<QuantizedNode>,
    },
    Leaf {
        value_q: u16,
    },
}

impl QuantizedNode {
    pub fn node_count(&self) -> usize {
        match self {
            QuantizedNode::Leaf { .. } => 1,
            QuantizedNode::Split { left, right, .. } => 1 + left.node_count() + right.node_count(),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            QuantizedNode::Leaf { .. } => 1,
            QuantizedNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizedTree {
    root: QuantizedNode,
    node_count: usize,
    max_depth: usize,
}

impl QuantizedTree {
    pub fn new(root: QuantizedNode) -> Self {
        let node_count = root.node_count();
        let max_depth = root.depth();
        QuantizedTree {
            root,
            node_count,
            max_depth,
        }
    }

    pub fn root(&self) -> &QuantizedNode {
        &self.root
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    /// Integer-domain traversal; same `<=` branch rule as the float engine.
    pub fn traverse(&self, features_q: &[u16]) -> Result<(u16, usize), CodecError> {
        let mut node = &self.root;
        let mut path_length = 1usize;
        loop {
            match node {
                QuantizedNode::Leaf { value_q } => return Ok((*value_q, path_length)),
                QuantizedNode::Split {
                    feature,
                    threshold_q,
                    left,
                    right,
                } => {
                    let x =
                        features_q
                            .get(*feature)
                            .copied()
                            .ok_or(CodecError::FeatureWidth {
                                got: features_q.len(),
                                expected: *feature + 1,
                            })?;
                    node = if x <= *threshold_q { left } else { right };
                    path_length += 1;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizedForest {
    pub kind: ForestKind,
    pub trees: Vec<QuantizedTree>,
}

/// Integer-domain cascade inference output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedInference {
    /// Final positive-class probability, 14-bit.
    pub final_q: u16,
    /// Both forests' quantized probabilities at every layer.
    pub per_layer_q: Vec<[u16; 2]>,
    /// 1 iff `final_q >= CLASS_THRESHOLD_Q`.
    pub class: u8,
}

/// The quantized counterpart of a [`CascadeModel`], with this layer map
/// convention: every layer's map covers its full input width, where the
/// base-feature entries repeat layer 0's calibrated maps and the four
/// class-vector entries (layers > 0) are full-range unit maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedModel {
    pub base_feature_width: usize,
    pub layers: Vec<[QuantizedForest; 2]>,
    pub maps: Vec<QuantizationMap>,
}

impl QuantizedModel {
    pub fn max_depth(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.iter())
            .flat_map(|f| f.trees.iter())
            .map(QuantizedTree::max_depth)
            .max()
            .unwrap_or(1)
    }

    pub fn node_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.iter())
            .flat_map(|f| f.trees.iter())
            .map(QuantizedTree::node_count)
            .sum()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Quantize a base-feature row with layer 0's maps, which is also the
    /// vector the accelerator keeps in its input buffer for every layer.
    pub fn quantize_base(&self, row: &[f64]) -> Result<Vec<u16>, CodecError> {
        self.maps
            .first()
            .ok_or(CodecError::EmptyCalibration)?
            .quantize_row(row)
    }

    /// Integer reference inference: per forest, sum 32 leaf words and shift
    /// right by 5; between layers, append `[MAX-q_a, q_a, MAX-q_b, q_b]` to
    /// the stored base vector; final prediction is `(q_a + q_b) >> 1`.
    pub fn infer(&self, base_q: &[u16]) -> Result<QuantizedInference, CodecError> {
        if base_q.len() != self.base_feature_width {
            return Err(CodecError::FeatureWidth {
                got: base_q.len(),
                expected: self.base_feature_width,
            });
        }
        let mut per_layer_q = Vec::with_capacity(self.layers.len());
        let mut features: Vec<u16> = base_q.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut layer_out = [0u16; 2];
            for (fi, forest) in layer.iter().enumerate() {
                let mut sum: u32 = 0;
                for tree in &forest.trees {
                    sum += tree.traverse(&features)?.0 as u32;
                }
                debug_assert!(sum <= TREES_PER_FOREST as u32 * VALUE_MAX as u32);
                layer_out[fi] = (sum >> 5) as u16;
            }
            per_layer_q.push(layer_out);
            if k + 1 < self.layers.len() {
                features.truncate(self.base_feature_width);
                features.extend_from_slice(&[
                    VALUE_MAX - layer_out[0],
                    layer_out[0],
                    VALUE_MAX - layer_out[1],
                    layer_out[1],
                ]);
            }
        }
        let last = per_layer_q.last().copied().unwrap_or([0, 0]);
        let final_q = ((last[0] as u32 + last[1] as u32) >> 1) as u16;
        Ok(QuantizedInference {
            final_q,
            per_layer_q,
            class: u8::from(final_q >= CLASS_THRESHOLD_Q),
        })
    }

    /// Predicted classes for a quantized batch.
    pub fn predict_classes(&self, rows_q: &[Vec<u16>]) -> Result<Vec<u8>, CodecError> {
        rows_q.iter().map(|r| Ok(self.infer(r)?.class)).collect()
    }

    pub fn pack(&self) -> Result<PackedModel, CodecError> {
        pack_model(self)
    }
}

fn quantize_node(node: &TreeNode, map: &QuantizationMap) -> QuantizedNode {
    match node {
        TreeNode::Leaf { value } => QuantizedNode::Leaf {
            value_q: quantize_leaf(*value),
        },
        TreeNode::Split {
            feature,
            threshold,
            left,
            right,
        } => QuantizedNode::Split {
            feature: *feature,
            threshold_q: map.features[*feature].quantize(*threshold),
            left: Box::new(quantize_node(left, map)),
            right: Box::new(quantize_node(right, map)),
        },
    }
}

/// Quantize a float-domain model using per-feature ranges observed in the
/// calibration rows (base features) and full-range unit maps for the class
/// vector features of layers after the first.
pub fn quantize_model(
    model: &CascadeModel,
    calibration: &[Vec<f64>],
) -> Result<QuantizedModel, CodecError> {
    model.validate()?;
    let width = model.base_feature_width;
    let base = QuantizationMap::from_calibration(calibration, width)?;
    let mut maps = Vec::with_capacity(model.layers.len());
    let mut layers = Vec::with_capacity(model.layers.len());
    for (k, layer) in model.layers.iter().enumerate() {
        let mut features = base.features.clone();
        if k > 0 {
            features.extend(std::iter::repeat(FeatureMap::unit()).take(AUGMENTED_WIDTH));
        }
        let map = QuantizationMap { features };
        let mut forests = Vec::with_capacity(2);
        for forest in layer {
            forests.push(QuantizedForest {
                kind: forest.kind,
                trees: forest
                    .trees
                    .iter()
                    .map(|t| QuantizedTree::new(quantize_node(t.root(), &map)))
                    .collect(),
            });
        }
        let [a, b]: [QuantizedForest; 2] = forests.try_into().expect("two forests per layer");
        layers.push([a, b]);
        maps.push(map);
    }
    Ok(QuantizedModel {
        base_feature_width: width,
        layers,
        maps,
    })
}

/// Rebuild a [`QuantizedModel`] from packed RAM images.
pub(super) fn unpack_model(packed: &PackedModel) -> Result<QuantizedModel, CodecError> {
    if packed.maps.len() != packed.layers.len() {
        return Err(CodecError::BadField {
            field: "quantization map count",
            value: packed.maps.len() as u64,
        });
    }
    let base_feature_width = packed.base_feature_width();
    let mut layers = Vec::with_capacity(packed.layers.len());
    for (k, layer) in packed.layers.iter().enumerate() {
        let kinds = [ForestKind::CompletelyRandom, ForestKind::Random];
        let mut forests = Vec::with_capacity(2);
        for (forest, kind) in layer.forests.iter().zip(kinds) {
            let mut trees = Vec::with_capacity(TREES_PER_FOREST);
            for group in &forest.groups {
                for t in 0..super::TREES_PER_GROUP {
                    trees.push(super::unpack_tree(group.tree_words(t))?);
                }
            }
            if trees.len() != TREES_PER_FOREST {
                return Err(CodecError::BadField {
                    field: "trees per forest",
                    value: trees.len() as u64,
                });
            }
            forests.push(QuantizedForest { kind, trees });
        }
        let expected_width = if k == 0 {
            base_feature_width
        } else {
            base_feature_width + AUGMENTED_WIDTH
        };
        if packed.maps[k].width() != expected_width {
            return Err(CodecError::BadField {
                field: "layer map width",
                value: packed.maps[k].width() as u64,
            });
        }
        let [a, b]: [QuantizedForest; 2] = forests.try_into().expect("two forests per layer");
        layers.push([a, b]);
    }
    Ok(QuantizedModel {
        base_feature_width,
        layers,
        maps: packed.maps.clone(),
    })
}
