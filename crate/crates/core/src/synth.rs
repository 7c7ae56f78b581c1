//! Deterministic synthetic datasets and model generators.
//!
//! The tabular generator emits an income-style mixed numeric/categorical
//! binary classification set shaped like the usual census benchmarks; the
//! grid generator emits small two-pattern images for scanning experiments.
//! Model generators produce random or complete cascades for codec and
//! simulator testing without a training run.

use crate::codec::{QuantizationMap, QuantizedForest, QuantizedModel, QuantizedNode, QuantizedTree, FeatureMap, VALUE_MAX};
use crate::model::{CascadeModel, DecisionTree, Forest, ForestKind, TreeNode};
use crate::train::scan::GridShape;
use crate::train::Dataset;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::fmt::Write as _;

const WORKCLASSES: [(&str, f64); 4] = [
    ("Private", 0.60),
    ("SelfEmp", 0.15),
    ("Gov", 0.20),
    ("Unemployed", 0.05),
];
const MARITAL: [(&str, f64); 4] = [
    ("Married", 0.45),
    ("Single", 0.35),
    ("Divorced", 0.15),
    ("Widowed", 0.05),
];
const OCCUPATIONS: [(&str, f64); 6] = [
    ("Tech", 0.15),
    ("Manager", 0.15),
    ("Sales", 0.20),
    ("Clerical", 0.18),
    ("Service", 0.17),
    ("Manual", 0.15),
];

fn pick<'a>(rng: &mut ChaCha8Rng, table: &'a [(&'a str, f64)]) -> &'a str {
    let mut x: f64 = rng.gen();
    for (name, w) in table {
        if x < *w {
            return name;
        }
        x -= w;
    }
    table.last().unwrap().0
}

/// Census-style binary-income CSV: header plus `n` rows, fully determined by
/// the seed. Label values are `<=50K` / `>50K`.
pub fn adult_like_csv(n: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Normal<f64> = Normal::new(0.0, 0.55).unwrap();
    let hours_dist: Normal<f64> = Normal::new(40.0, 10.0).unwrap();
    let mut out = String::with_capacity(n * 64);
    out.push_str(
        "age,workclass,education_num,marital_status,occupation,hours_per_week,capital_gain,sex,income\n",
    );
    for _ in 0..n {
        let age = rng.gen_range(17..=75);
        let workclass = pick(&mut rng, &WORKCLASSES);
        let education: i64 = (rng.gen_range(1..=16) + rng.gen_range(1..=16) + 2) / 3 + 3;
        let education = education.min(16);
        let marital = pick(&mut rng, &MARITAL);
        let occupation = pick(&mut rng, &OCCUPATIONS);
        let hours = hours_dist.sample(&mut rng).round().clamp(1.0, 99.0) as i64;
        let capital_gain = if rng.gen_bool(0.12) {
            rng.gen_range(500..25_000)
        } else {
            0
        };
        let sex = if rng.gen_bool(0.5) { "M" } else { "F" };

        let mut score = 0.04 * (age as f64 - 38.0)
            + 0.45 * (education as f64 - 9.5)
            + 0.035 * (hours as f64 - 40.0);
        if marital == "Married" {
            score += 1.6;
        }
        if occupation == "Manager" || occupation == "Tech" {
            score += 0.8;
        }
        if capital_gain > 0 {
            score += 1.4;
        }
        if workclass == "SelfEmp" {
            score += 0.3;
        }
        if workclass == "Unemployed" {
            score -= 0.5;
        }
        score += noise.sample(&mut rng);
        let income = if score > 1.9 { ">50K" } else { "<=50K" };
        writeln!(
            out,
            "{age},{workclass},{education},{marital},{occupation},{hours},{capital_gain},{sex},{income}"
        )
        .unwrap();
    }
    out
}

/// The census-style set, already ingested through the CSV pipeline.
pub fn adult_like(n: usize, seed: u64) -> Dataset {
    Dataset::from_csv_reader(adult_like_csv(n, seed).as_bytes(), "income")
        .expect("generated csv always parses")
}

/// Two-pattern grid instances: class 0 carries horizontal stripes, class 1
/// vertical ones, both with a random phase and pixel noise. Returns
/// row-major flattened grids in [0, 1].
pub fn grid_instances(n: usize, grid: GridShape, seed: u64) -> (Vec<Vec<f64>>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Normal<f64> = Normal::new(0.0, 0.12).unwrap();
    let mut instances = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % 2) as u8;
        let phase = rng.gen_range(0..2usize);
        let mut pixels = Vec::with_capacity(grid.len());
        for r in 0..grid.rows {
            for c in 0..grid.cols {
                let stripe = if label == 0 { r + phase } else { c + phase } % 2;
                let v = 0.25 + 0.5 * stripe as f64 + noise.sample(&mut rng);
                pixels.push(v.clamp(0.0, 1.0));
            }
        }
        instances.push(pixels);
        labels.push(label);
    }
    (instances, labels)
}

/// Grid instances as CSV (`p0..pN` pixel columns plus `label`).
pub fn grid_csv(n: usize, grid: GridShape, seed: u64) -> String {
    let (instances, labels) = grid_instances(n, grid, seed);
    let mut out = String::new();
    let header: Vec<String> = (0..grid.len()).map(|i| format!("p{i}")).collect();
    out.push_str(&header.join(","));
    out.push_str(",label\n");
    for (pixels, label) in instances.iter().zip(&labels) {
        let row: Vec<String> = pixels.iter().map(|p| format!("{p:.4}")).collect();
        out.push_str(&row.join(","));
        writeln!(out, ",{label}").unwrap();
    }
    out
}

fn random_node(rng: &mut ChaCha8Rng, depth_left: usize, width: usize, split_prob: f64) -> TreeNode {
    if depth_left <= 1 || !rng.gen_bool(split_prob) {
        return TreeNode::leaf(rng.gen_range(0.0..=1.0));
    }
    TreeNode::split(
        rng.gen_range(0..width),
        rng.gen_range(0.0..1.0),
        random_node(rng, depth_left - 1, width, split_prob),
        random_node(rng, depth_left - 1, width, split_prob),
    )
}

fn complete_node(rng: &mut ChaCha8Rng, depth: usize, width: usize) -> TreeNode {
    if depth == 1 {
        return TreeNode::leaf(rng.gen_range(0.0..=1.0));
    }
    TreeNode::split(
        rng.gen_range(0..width),
        0.5,
        complete_node(rng, depth - 1, width),
        complete_node(rng, depth - 1, width),
    )
}

fn forests_for_layer(
    rng: &mut ChaCha8Rng,
    width: usize,
    mut make: impl FnMut(&mut ChaCha8Rng, usize) -> TreeNode,
) -> [Forest; 2] {
    let mut forest = |rng: &mut ChaCha8Rng, kind| {
        Forest::new(
            kind,
            (0..32).map(|_| DecisionTree::new(make(rng, width))).collect(),
        )
        .expect("32 trees")
    };
    [
        forest(rng, ForestKind::CompletelyRandom),
        forest(rng, ForestKind::Random),
    ]
}

/// Random cascade with thresholds and leaves in [0, 1]; tree shapes vary up
/// to `max_depth`.
pub fn random_cascade(
    seed: u64,
    layers: usize,
    base_width: usize,
    max_depth: usize,
    split_prob: f64,
) -> CascadeModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = (0..layers)
        .map(|k| {
            let width = if k == 0 { base_width } else { base_width + 4 };
            forests_for_layer(&mut rng, width, |rng, w| {
                random_node(rng, max_depth, w, split_prob)
            })
        })
        .collect();
    CascadeModel::new(base_width, layers).expect("generated model is valid")
}

/// Cascade of complete trees of exactly `depth`; every traversal walks
/// `depth` nodes, which pins the accelerator's cycle arithmetic.
pub fn complete_cascade(seed: u64, layers: usize, base_width: usize, depth: usize) -> CascadeModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = (0..layers)
        .map(|k| {
            let width = if k == 0 { base_width } else { base_width + 4 };
            forests_for_layer(&mut rng, width, |rng, w| complete_node(rng, depth, w))
        })
        .collect();
    CascadeModel::new(base_width, layers).expect("generated model is valid")
}

/// Calibration rows spanning [0, 1] on every base feature.
pub fn unit_calibration(width: usize) -> Vec<Vec<f64>> {
    vec![vec![0.0; width], vec![1.0; width]]
}

/// Random quantized cascade with full-range unit maps; handy when a test
/// needs packed images without the float pipeline.
pub fn random_quantized_cascade(
    seed: u64,
    layers: usize,
    base_width: usize,
    max_depth: usize,
) -> QuantizedModel {
    fn node(rng: &mut ChaCha8Rng, depth_left: usize, width: usize) -> QuantizedNode {
        if depth_left <= 1 || !rng.gen_bool(0.8) {
            return QuantizedNode::Leaf {
                value_q: rng.gen_range(0..=VALUE_MAX),
            };
        }
        QuantizedNode::Split {
            feature: rng.gen_range(0..width),
            threshold_q: rng.gen_range(0..=VALUE_MAX),
            left: Box::new(node(rng, depth_left - 1, width)),
            right: Box::new(node(rng, depth_left - 1, width)),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let built: Vec<[QuantizedForest; 2]> = (0..layers)
        .map(|k| {
            let width = if k == 0 { base_width } else { base_width + 4 };
            let forest = |rng: &mut ChaCha8Rng, kind| QuantizedForest {
                kind,
                trees: (0..32)
                    .map(|_| QuantizedTree::new(node(rng, max_depth, width)))
                    .collect(),
            };
            [
                forest(&mut rng, ForestKind::CompletelyRandom),
                forest(&mut rng, ForestKind::Random),
            ]
        })
        .collect();
    let maps = (0..layers)
        .map(|k| QuantizationMap {
            features: (0..if k == 0 { base_width } else { base_width + 4 })
                .map(|_| FeatureMap::unit())
                .collect(),
        })
        .collect();
    QuantizedModel {
        base_feature_width: base_width,
        layers: built,
        maps,
    }
}

/// Random feature rows in [0, 1].
pub fn random_rows(n: usize, width: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..width).map(|_| rng.gen_range(0.0..=1.0)).collect())
        .collect()
}

/// Random quantized rows over the full 14-bit range.
pub fn random_rows_q(n: usize, width: usize, seed: u64) -> Vec<Vec<u16>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..width).map(|_| rng.gen_range(0..=VALUE_MAX)).collect())
        .collect()
}

/// Near-balanced full binary tree with exactly `node_count` nodes (must be
/// odd); useful for exercising address-capacity limits.
pub fn balanced_tree_with_nodes(node_count: usize, width: usize) -> TreeNode {
    assert!(node_count % 2 == 1, "a full binary tree has an odd node count");
    fn build(count: usize, depth: usize, width: usize) -> TreeNode {
        if count == 1 {
            return TreeNode::leaf(0.5);
        }
        let half = (count - 1) / 2;
        let left = if half % 2 == 1 { half } else { half - 1 };
        let right = count - 1 - left;
        TreeNode::split(
            depth % width,
            0.5,
            build(left, depth + 1, width),
            build(right, depth + 1, width),
        )
    }
    build(node_count, 0, width)
}
