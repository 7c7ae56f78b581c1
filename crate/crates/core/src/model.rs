//! Logical (unquantized) deep forest data model and reference inference.
//!
//! This is the float-domain ground truth: a cascade of layers, each layer
//! holding two 32-tree forests. Every packed or simulated path in the crate
//! is checked against the traversals implemented here.
//!
//! Models are immutable after construction and safe to share across threads;
//! every inference call is stateless.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Trees per forest, fixed by the modeled accelerator.
pub const TREES_PER_FOREST: usize = 32;
/// Forests per cascade layer (one completely-random, one random).
pub const FORESTS_PER_LAYER: usize = 2;
/// Binary classification only: the 32-bit node layout stores one leaf scalar.
pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("feature index {index} out of range for input width {width}")]
    FeatureIndexOutOfRange { index: usize, width: usize },
    #[error("layer {layer} expects input width {expected}, got {got}")]
    WidthMismatch {
        layer: usize,
        expected: usize,
        got: usize,
    },
    #[error("leaf value {value} outside [0, 1]")]
    LeafValueOutOfRange { value: f64 },
    #[error("forest must contain exactly {TREES_PER_FOREST} trees, got {got}")]
    ForestArity { got: usize },
    #[error("model has no layers")]
    EmptyModel,
    #[error("model declares {got} classes; only {NUM_CLASSES} supported")]
    UnsupportedClassCount { got: usize },
    #[error("base feature width must be positive")]
    ZeroWidth,
    #[error("model file is not valid JSON: {0}")]
    Json(String),
}

/// A single node of a decision tree. Splits compare one input feature against
/// a threshold and descend left iff `feature <= threshold`; leaves carry the
/// positive-class probability observed at training time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
    Leaf {
        #[serde(rename = "leaf")]
        value: f64,
    },
}

impl TreeNode {
    pub fn leaf(value: f64) -> Self {
        TreeNode::Leaf { value }
    }

    pub fn split(feature: usize, threshold: f64, left: TreeNode, right: TreeNode) -> Self {
        TreeNode::Split {
            feature,
            threshold,
            left: Box::new(left),
            right: Box::new(right),
        }
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, TreeNode::Leaf { .. })
    }

    pub fn node_count(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 1,
            TreeNode::Split { left, right, .. } => 1 + left.node_count() + right.node_count(),
        }
    }

    /// Depth in nodes: a lone leaf has depth 1.
    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 1,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    fn check(&self, input_width: usize) -> Result<(), ModelError> {
        match self {
            TreeNode::Leaf { value } => {
                if !(0.0..=1.0).contains(value) {
                    return Err(ModelError::LeafValueOutOfRange { value: *value });
                }
                Ok(())
            }
            TreeNode::Split {
                feature,
                left,
                right,
                ..
            } => {
                if *feature >= input_width {
                    return Err(ModelError::FeatureIndexOutOfRange {
                        index: *feature,
                        width: input_width,
                    });
                }
                left.check(input_width)?;
                right.check(input_width)
            }
        }
    }
}

/// Result of walking one tree: the leaf probability and the number of nodes
/// visited, leaf included.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Traversal {
    pub leaf_value: f64,
    pub path_length: usize,
}

/// A binary decision tree with its measured depth and node count.
///
/// Serializes as the bare nested node object; depth and count are recomputed
/// on load.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(try_from = "TreeNode")]
pub struct DecisionTree {
    root: TreeNode,
    node_count: usize,
    max_depth: usize,
}

impl TryFrom<TreeNode> for DecisionTree {
    type Error = ModelError;

    fn try_from(root: TreeNode) -> Result<Self, ModelError> {
        Ok(DecisionTree::new(root))
    }
}

impl Serialize for DecisionTree {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.root.serialize(serializer)
    }
}

impl DecisionTree {
    pub fn new(root: TreeNode) -> Self {
        let node_count = root.node_count();
        let max_depth = root.depth();
        DecisionTree {
            root,
            node_count,
            max_depth,
        }
    }

    pub fn root(&self) -> &TreeNode {
        &self.root
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    /// Descend from the root, going left iff `features[feature] <= threshold`.
    pub fn traverse(&self, features: &[f64]) -> Result<Traversal, ModelError> {
        let mut node = &self.root;
        let mut path_length = 1usize;
        loop {
            match node {
                TreeNode::Leaf { value } => {
                    return Ok(Traversal {
                        leaf_value: *value,
                        path_length,
                    })
                }
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    let x = features.get(*feature).copied().ok_or(
                        ModelError::FeatureIndexOutOfRange {
                            index: *feature,
                            width: features.len(),
                        },
                    )?;
                    node = if x <= *threshold { left } else { right };
                    path_length += 1;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ForestKind {
    Random,
    CompletelyRandom,
}

/// An ordered ensemble of exactly 32 trees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub kind: ForestKind,
    pub trees: Vec<DecisionTree>,
}

impl Forest {
    pub fn new(kind: ForestKind, trees: Vec<DecisionTree>) -> Result<Self, ModelError> {
        if trees.len() != TREES_PER_FOREST {
            return Err(ModelError::ForestArity { got: trees.len() });
        }
        Ok(Forest { kind, trees })
    }

    /// Mean leaf probability over all trees, as a normalized class vector.
    pub fn predict(&self, features: &[f64]) -> Result<ClassVector, ModelError> {
        let mut sum = 0.0;
        for tree in &self.trees {
            sum += tree.traverse(features)?.leaf_value;
        }
        let p = sum / self.trees.len() as f64;
        Ok(ClassVector::from_positive(p))
    }

    pub fn max_depth(&self) -> usize {
        self.trees.iter().map(DecisionTree::max_depth).max().unwrap_or(0)
    }

    pub fn node_count(&self) -> usize {
        self.trees.iter().map(DecisionTree::node_count).sum()
    }
}

/// Per-forest class-probability distribution `[p(class 0), p(class 1)]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassVector(pub [f64; 2]);

impl ClassVector {
    pub fn from_positive(p: f64) -> Self {
        ClassVector([1.0 - p, p])
    }

    pub fn positive(&self) -> f64 {
        self.0[1]
    }

    /// Predicted class under the fixed `p >= 0.5 -> positive` rule.
    pub fn class(&self) -> u8 {
        u8::from(self.0[1] >= 0.5)
    }

    /// Element-wise mean of two vectors; the final-prediction averaging step.
    pub fn mean2(a: ClassVector, b: ClassVector) -> ClassVector {
        ClassVector([(a.0[0] + b.0[0]) / 2.0, (a.0[1] + b.0[1]) / 2.0])
    }

    pub fn is_normalized(&self, tol: f64) -> bool {
        (self.0[0] + self.0[1] - 1.0).abs() <= tol
            && self.0.iter().all(|p| (-tol..=1.0 + tol).contains(p))
    }
}

/// Full cascade inference output: the final averaged prediction plus both
/// forests' class vectors at every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeInference {
    pub prediction: ClassVector,
    pub per_layer: Vec<[ClassVector; 2]>,
}

/// A layered cascade model. Layer 0 consumes the base feature vector; every
/// later layer consumes `concat(base, cv_a, cv_b)` where `cv_a`/`cv_b` are
/// the previous layer's class vectors in forest order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeModel {
    pub base_feature_width: usize,
    pub num_classes: usize,
    pub layers: Vec<[Forest; 2]>,
}

impl CascadeModel {
    pub fn new(base_feature_width: usize, layers: Vec<[Forest; 2]>) -> Result<Self, ModelError> {
        let model = CascadeModel {
            base_feature_width,
            num_classes: NUM_CLASSES,
            layers,
        };
        model.validate()?;
        Ok(model)
    }

    /// Input width consumed by layer `k` (0-based).
    pub fn layer_input_width(&self, layer: usize) -> usize {
        if layer == 0 {
            self.base_feature_width
        } else {
            self.base_feature_width + FORESTS_PER_LAYER * NUM_CLASSES
        }
    }

    /// Structural validation: arity, widths, leaf ranges, feature indices.
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.base_feature_width == 0 {
            return Err(ModelError::ZeroWidth);
        }
        if self.num_classes != NUM_CLASSES {
            return Err(ModelError::UnsupportedClassCount {
                got: self.num_classes,
            });
        }
        if self.layers.is_empty() {
            return Err(ModelError::EmptyModel);
        }
        for (k, layer) in self.layers.iter().enumerate() {
            let width = self.layer_input_width(k);
            for forest in layer {
                if forest.trees.len() != TREES_PER_FOREST {
                    return Err(ModelError::ForestArity {
                        got: forest.trees.len(),
                    });
                }
                for tree in &forest.trees {
                    tree.root.check(width).map_err(|e| match e {
                        ModelError::FeatureIndexOutOfRange { index, .. } => {
                            ModelError::FeatureIndexOutOfRange {
                                index,
                                width,
                            }
                        }
                        other => other,
                    })?;
                }
            }
        }
        Ok(())
    }

    /// Reference cascade inference in the float domain.
    pub fn infer(&self, base_features: &[f64]) -> Result<CascadeInference, ModelError> {
        if base_features.len() != self.base_feature_width {
            return Err(ModelError::WidthMismatch {
                layer: 0,
                expected: self.base_feature_width,
                got: base_features.len(),
            });
        }
        let mut per_layer = Vec::with_capacity(self.layers.len());
        let mut features: Vec<f64> = base_features.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            if features.len() != self.layer_input_width(k) {
                return Err(ModelError::WidthMismatch {
                    layer: k,
                    expected: self.layer_input_width(k),
                    got: features.len(),
                });
            }
            let cv_a = layer[0].predict(&features)?;
            let cv_b = layer[1].predict(&features)?;
            per_layer.push([cv_a, cv_b]);
            if k + 1 < self.layers.len() {
                features.clear();
                features.extend_from_slice(base_features);
                features.extend_from_slice(&cv_a.0);
                features.extend_from_slice(&cv_b.0);
            }
        }
        let last = per_layer.last().ok_or(ModelError::EmptyModel)?;
        Ok(CascadeInference {
            prediction: ClassVector::mean2(last[0], last[1]),
            per_layer,
        })
    }

    /// Predicted class for a batch of rows.
    pub fn predict_classes(&self, rows: &[Vec<f64>]) -> Result<Vec<u8>, ModelError> {
        rows.iter()
            .map(|r| Ok(self.infer(r)?.prediction.class()))
            .collect()
    }

    /// Total node count across all trees in all layers.
    pub fn node_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.iter())
            .map(Forest::node_count)
            .sum()
    }

    /// Largest tree depth anywhere in the model.
    pub fn max_depth(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.iter())
            .map(Forest::max_depth)
            .max()
            .unwrap_or(0)
    }

    /// Serialize to the interchange JSON format.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serialization cannot fail")
    }

    /// Parse and validate a model from interchange JSON.
    pub fn from_json(s: &str) -> Result<Self, ModelError> {
        let model: CascadeModel =
            serde_json::from_str(s).map_err(|e| ModelError::Json(e.to_string()))?;
        model.validate()?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn leaf(v: f64) -> TreeNode {
        TreeNode::leaf(v)
    }

    fn forest_of_leaves(values: &[f64]) -> Forest {
        let trees = values
            .iter()
            .map(|v| DecisionTree::new(leaf(*v)))
            .collect();
        Forest::new(ForestKind::Random, trees).unwrap()
    }

    // Independent traversal used as an oracle: deliberately re-implements the
    // walk without DecisionTree::traverse.
    fn oracle_walk(node: &TreeNode, features: &[f64]) -> (f64, usize) {
        match node {
            TreeNode::Leaf { value } => (*value, 1),
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                let child = if features[*feature] <= *threshold {
                    left
                } else {
                    right
                };
                let (v, d) = oracle_walk(child, features);
                (v, d + 1)
            }
        }
    }

    fn random_tree(rng: &mut StdRng, depth_left: usize, width: usize) -> TreeNode {
        if depth_left <= 1 || rng.gen_bool(0.25) {
            return leaf(rng.gen_range(0.0..=1.0));
        }
        TreeNode::split(
            rng.gen_range(0..width),
            rng.gen_range(0.0..1.0),
            random_tree(rng, depth_left - 1, width),
            random_tree(rng, depth_left - 1, width),
        )
    }

    fn complete_tree(rng: &mut StdRng, depth: usize, width: usize) -> TreeNode {
        if depth == 1 {
            return leaf(rng.gen_range(0.0..=1.0));
        }
        TreeNode::split(
            rng.gen_range(0..width),
            rng.gen_range(0.0..1.0),
            complete_tree(rng, depth - 1, width),
            complete_tree(rng, depth - 1, width),
        )
    }

    #[test]
    fn single_leaf_traversal() {
        let tree = DecisionTree::new(leaf(0.7));
        let t = tree.traverse(&[1.0, 2.0]).unwrap();
        assert_eq!(t.leaf_value, 0.7);
        assert_eq!(t.path_length, 1);
    }

    #[test]
    fn boundary_goes_left() {
        let tree = DecisionTree::new(TreeNode::split(0, 5.0, leaf(0.0), leaf(1.0)));
        let t = tree.traverse(&[5.0]).unwrap();
        assert_eq!(t.leaf_value, 0.0);
        assert_eq!(t.path_length, 2);
        let t = tree.traverse(&[5.0001]).unwrap();
        assert_eq!(t.leaf_value, 1.0);
    }

    #[test]
    fn complete_tree_path_length_is_depth() {
        let mut rng = StdRng::seed_from_u64(7);
        let tree = DecisionTree::new(complete_tree(&mut rng, 3, 4));
        assert_eq!(tree.node_count(), 7);
        for _ in 0..100 {
            let features: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..1.0)).collect();
            let t = tree.traverse(&features).unwrap();
            assert_eq!(t.path_length, 3);
        }
    }

    #[test]
    fn feature_index_out_of_range() {
        let tree = DecisionTree::new(TreeNode::split(3, 0.5, leaf(0.0), leaf(1.0)));
        let err = tree.traverse(&[0.0, 1.0]).unwrap_err();
        assert!(matches!(
            err,
            ModelError::FeatureIndexOutOfRange { index: 3, width: 2 }
        ));
    }

    #[test]
    fn forest_predict_all_ones() {
        let forest = forest_of_leaves(&[1.0; 32]);
        let cv = forest.predict(&[0.0]).unwrap();
        assert_eq!(cv.0, [0.0, 1.0]);
    }

    #[test]
    fn forest_predict_half_half() {
        let mut values = vec![0.0; 16];
        values.extend(vec![1.0; 16]);
        let forest = forest_of_leaves(&values);
        let cv = forest.predict(&[0.0]).unwrap();
        assert_eq!(cv.0, [0.5, 0.5]);
    }

    #[test]
    fn forest_predict_matches_per_tree_oracle() {
        let mut rng = StdRng::seed_from_u64(11);
        let trees: Vec<DecisionTree> = (0..32)
            .map(|_| DecisionTree::new(random_tree(&mut rng, 4, 5)))
            .collect();
        let forest = Forest::new(ForestKind::CompletelyRandom, trees).unwrap();
        let features: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..1.0)).collect();

        let mut sum = 0.0;
        for tree in &forest.trees {
            sum += oracle_walk(tree.root(), &features).0;
        }
        let expected = sum / 32.0;
        let cv = forest.predict(&features).unwrap();
        assert!((cv.positive() - expected).abs() < 1e-15);
        assert!(cv.is_normalized(1e-9));
    }

    #[test]
    fn forest_rejects_wrong_arity() {
        let trees = vec![DecisionTree::new(leaf(0.5)); 31];
        assert!(matches!(
            Forest::new(ForestKind::Random, trees),
            Err(ModelError::ForestArity { got: 31 })
        ));
    }

    fn random_model(seed: u64, layers: usize, width: usize, depth: usize) -> CascadeModel {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut built = Vec::new();
        for k in 0..layers {
            let in_width = if k == 0 { width } else { width + 4 };
            let mut forests = Vec::new();
            for kind in [ForestKind::CompletelyRandom, ForestKind::Random] {
                let trees = (0..32)
                    .map(|_| DecisionTree::new(random_tree(&mut rng, depth, in_width)))
                    .collect();
                forests.push(Forest::new(kind, trees).unwrap());
            }
            let [a, b]: [Forest; 2] = forests.try_into().unwrap();
            built.push([a, b]);
        }
        CascadeModel::new(width, built).unwrap()
    }

    #[test]
    fn one_layer_all_leaf_cascade() {
        let layer = [forest_of_leaves(&[1.0; 32]), forest_of_leaves(&[1.0; 32])];
        let model = CascadeModel::new(3, vec![layer]).unwrap();
        let out = model.infer(&[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(out.prediction.0, [0.0, 1.0]);
    }

    #[test]
    fn layer2_sees_layer1_outputs() {
        // Layer 2 trees split only on the augmented indices (base..base+3), so
        // changing layer-1 leaf values must change the output while base
        // features stay fixed.
        let base_width = 2;
        let make = |layer1_value: f64| {
            let layer1 = [
                forest_of_leaves(&[layer1_value; 32]),
                forest_of_leaves(&[layer1_value; 32]),
            ];
            let aug_tree = || {
                DecisionTree::new(TreeNode::split(
                    base_width + 1, // cv_a positive entry
                    0.5,
                    leaf(0.25),
                    leaf(0.75),
                ))
            };
            let layer2 = [
                Forest::new(ForestKind::CompletelyRandom, (0..32).map(|_| aug_tree()).collect())
                    .unwrap(),
                Forest::new(ForestKind::Random, (0..32).map(|_| aug_tree()).collect()).unwrap(),
            ];
            CascadeModel::new(base_width, vec![layer1, layer2]).unwrap()
        };
        let low = make(0.25).infer(&[0.0, 0.0]).unwrap();
        let high = make(0.75).infer(&[0.0, 0.0]).unwrap();
        assert_eq!(low.prediction.0[1], 0.25);
        assert_eq!(high.prediction.0[1], 0.75);
    }

    // Independent scripted cascade used as an oracle for infer().
    fn oracle_cascade(model: &CascadeModel, base: &[f64]) -> [f64; 2] {
        let mut feats = base.to_vec();
        let mut last = [[0.0; 2]; 2];
        for (k, layer) in model.layers.iter().enumerate() {
            for (fi, forest) in layer.iter().enumerate() {
                let mut sum = 0.0;
                for tree in &forest.trees {
                    sum += oracle_walk(tree.root(), &feats).0;
                }
                let p = sum / forest.trees.len() as f64;
                last[fi] = [1.0 - p, p];
            }
            if k + 1 < model.layers.len() {
                feats = base.to_vec();
                feats.extend_from_slice(&last[0]);
                feats.extend_from_slice(&last[1]);
            }
        }
        [
            (last[0][0] + last[1][0]) / 2.0,
            (last[0][1] + last[1][1]) / 2.0,
        ]
    }

    #[test]
    fn cascade_matches_scripted_oracle() {
        let model = random_model(42, 4, 6, 5);
        let mut rng = StdRng::seed_from_u64(99);
        for _ in 0..50 {
            let base: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..1.0)).collect();
            let got = model.infer(&base).unwrap();
            let want = oracle_cascade(&model, &base);
            assert_eq!(got.prediction.0, want);
            // Final prediction is exactly the mean of the last layer.
            let last = got.per_layer.last().unwrap();
            assert_eq!(
                got.prediction,
                ClassVector::mean2(last[0], last[1])
            );
            for layer in &got.per_layer {
                assert!(layer[0].is_normalized(1e-9));
                assert!(layer[1].is_normalized(1e-9));
            }
        }
    }

    #[test]
    fn infer_rejects_wrong_width() {
        let model = random_model(1, 2, 4, 3);
        assert!(matches!(
            model.infer(&[0.0; 3]),
            Err(ModelError::WidthMismatch { .. })
        ));
    }

    #[test]
    fn json_round_trip_and_shape() {
        let model = random_model(5, 2, 4, 4);
        let json = model.to_json();
        let back = CascadeModel::from_json(&json).unwrap();
        assert_eq!(model, back);
        // Interchange shape: nested node objects with the documented keys.
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["num_classes"], 2);
        assert_eq!(v["base_feature_width"], 4);
        let tree = &v["layers"][0][0]["trees"][0];
        assert!(tree.get("leaf").is_some() || tree.get("feature").is_some());
        // Determinism of serialization.
        assert_eq!(json, model.to_json());
    }

    #[test]
    fn json_rejects_bad_leaf() {
        let mut model = random_model(5, 1, 4, 3);
        model.layers[0][0].trees[0] = DecisionTree::new(leaf(1.5));
        let json = model.to_json();
        assert!(matches!(
            CascadeModel::from_json(&json),
            Err(ModelError::LeafValueOutOfRange { .. })
        ));
    }
}
