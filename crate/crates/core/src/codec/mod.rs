//! Fixed-point quantization and the packed 32-bit-per-node tree encoding.
//!
//! Each node is one 32-bit word, MSB to LSB:
//!
//! ```text
//! | sign_leaf (1) | right_idx (9) | value (14) | feature_idx (8) |
//! ```
//!
//! `value` holds the quantized threshold for splits and the quantized leaf
//! probability for leaves. Trees are stored in pre-order, so a split's left
//! child always sits at the next address and only the right-child address is
//! stored; dropping the 8-bit left-child pointer of the conventional 40-bit
//! layout saves 20% of tree storage. Leaves set the sign bit and, in
//! canonical form, zero the address and feature fields.

mod dfpack;
mod quant;

pub use dfpack::{read_dfpack, write_dfpack, DFPACK_MAGIC, DFPACK_VERSION};
pub use quant::{
    dequantize_leaf, quantize_leaf, quantize_model, FeatureMap, QuantizationMap, QuantizedForest,
    QuantizedInference, QuantizedModel, QuantizedNode, QuantizedTree, AUGMENTED_WIDTH,
    CLASS_THRESHOLD_Q,
};

use crate::model::ModelError;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FEATURE_BITS: u32 = 8;
pub const VALUE_BITS: u32 = 14;
pub const RIGHT_IDX_BITS: u32 = 9;

pub const FEATURE_MAX: u16 = (1 << FEATURE_BITS) - 1;
pub const VALUE_MAX: u16 = (1 << VALUE_BITS) - 1;
pub const RIGHT_IDX_MAX: u16 = (1 << RIGHT_IDX_BITS) - 1;

/// Largest tree addressable by a 9-bit right-child index.
pub const MAX_TREE_NODES: usize = RIGHT_IDX_MAX as usize;
/// Trees per RAM image / per node computing unit.
pub const TREES_PER_GROUP: usize = 8;

const FEATURE_SHIFT: u32 = 0;
const VALUE_SHIFT: u32 = FEATURE_BITS;
const RIGHT_IDX_SHIFT: u32 = FEATURE_BITS + VALUE_BITS;
const LEAF_BIT: u32 = 1 << 31;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("{field} value {value} exceeds its {bits}-bit field (max {max})")]
    FieldOverflow {
        field: &'static str,
        value: u32,
        bits: u32,
        max: u32,
    },
    #[error("tree has {nodes} nodes; at most {max} are addressable")]
    Capacity { nodes: usize, max: usize },
    #[error("tree depth {depth} exceeds configured maximum {max}")]
    DepthExceeded { depth: usize, max: usize },
    #[error("corrupt tree image at address {addr}: {reason}")]
    ImageCorrupt { addr: usize, reason: String },
    #[error("a tree group must contain exactly {TREES_PER_GROUP} trees, got {got}")]
    GroupArity { got: usize },
    #[error("calibration data is empty")]
    EmptyCalibration,
    #[error("calibration row {row} has width {got}, expected {expected}")]
    CalibrationWidth {
        row: usize,
        got: usize,
        expected: usize,
    },
    #[error("feature vector has width {got}, expected {expected}")]
    FeatureWidth { got: usize, expected: usize },
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("bad container magic (expected \"DFPK\")")]
    BadMagic,
    #[error("unsupported container version {got} (expected {expected})")]
    BadVersion { got: u16, expected: u16 },
    #[error("container truncated while reading {what}")]
    Truncated { what: &'static str },
    #[error("{0} trailing bytes after container payload")]
    TrailingBytes(usize),
    #[error("container field {field} has invalid value {value}")]
    BadField { field: &'static str, value: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One packed node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodeWord(pub u32);

/// Decoded fields of a [`NodeWord`]. Decoding is total: non-canonical leaves
/// (junk in the address or feature field) still decode, and
/// [`NodeWord::is_canonical`] reports them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodedNode {
    Split {
        feature_idx: u8,
        threshold_q: u16,
        right_idx: u16,
    },
    Leaf {
        value_q: u16,
    },
}

fn check_field(field: &'static str, value: u32, bits: u32) -> Result<u32, CodecError> {
    let max = (1u32 << bits) - 1;
    if value > max {
        return Err(CodecError::FieldOverflow {
            field,
            value,
            bits,
            max,
        });
    }
    Ok(value)
}

impl NodeWord {
    /// Canonical leaf word: sign bit set, feature and address fields zero.
    pub fn leaf(value_q: u16) -> Result<Self, CodecError> {
        let v = check_field("value", value_q as u32, VALUE_BITS)?;
        Ok(NodeWord(LEAF_BIT | (v << VALUE_SHIFT)))
    }

    pub fn split(feature_idx: u16, value_q: u16, right_idx: u16) -> Result<Self, CodecError> {
        let f = check_field("feature_idx", feature_idx as u32, FEATURE_BITS)?;
        let v = check_field("value", value_q as u32, VALUE_BITS)?;
        let r = check_field("right_idx", right_idx as u32, RIGHT_IDX_BITS)?;
        Ok(NodeWord(
            (r << RIGHT_IDX_SHIFT) | (v << VALUE_SHIFT) | (f << FEATURE_SHIFT),
        ))
    }

    pub fn is_leaf(self) -> bool {
        self.0 & LEAF_BIT != 0
    }

    pub fn feature_idx(self) -> u8 {
        (self.0 >> FEATURE_SHIFT) as u8
    }

    pub fn value_q(self) -> u16 {
        ((self.0 >> VALUE_SHIFT) & VALUE_MAX as u32) as u16
    }

    pub fn right_idx(self) -> u16 {
        ((self.0 >> RIGHT_IDX_SHIFT) & RIGHT_IDX_MAX as u32) as u16
    }

    /// A leaf is canonical when its unused fields are zeroed; splits are
    /// always canonical.
    pub fn is_canonical(self) -> bool {
        !self.is_leaf() || (self.right_idx() == 0 && self.feature_idx() == 0)
    }

    pub fn decode(self) -> DecodedNode {
        if self.is_leaf() {
            DecodedNode::Leaf {
                value_q: self.value_q(),
            }
        } else {
            DecodedNode::Split {
                feature_idx: self.feature_idx(),
                threshold_q: self.value_q(),
                right_idx: self.right_idx(),
            }
        }
    }
}

/// Serialize one quantized tree to its pre-order word image.
///
/// `max_depth` is the RAM image's depth budget `d`: the tree must not exceed
/// it in depth, and its node count must fit both `2^d - 1` and the 9-bit
/// right-child address space.
pub fn pack_tree(tree: &QuantizedTree, max_depth: usize) -> Result<Vec<NodeWord>, CodecError> {
    let n = tree.node_count();
    let cap = MAX_TREE_NODES.min((1usize << max_depth.min(31)) - 1);
    if n > cap {
        return Err(CodecError::Capacity { nodes: n, max: cap });
    }
    if tree.max_depth() > max_depth {
        return Err(CodecError::DepthExceeded {
            depth: tree.max_depth(),
            max: max_depth,
        });
    }
    let mut words = Vec::with_capacity(n);
    pack_node(tree.root(), &mut words)?;
    debug_assert_eq!(words.len(), n);
    Ok(words)
}

fn pack_node(node: &QuantizedNode, words: &mut Vec<NodeWord>) -> Result<(), CodecError> {
    match node {
        QuantizedNode::Leaf { value_q } => {
            words.push(NodeWord::leaf(*value_q)?);
            Ok(())
        }
        QuantizedNode::Split {
            feature,
            threshold_q,
            left,
            right,
        } => {
            let at = words.len();
            if *feature > FEATURE_MAX as usize {
                return Err(CodecError::FieldOverflow {
                    field: "feature_idx",
                    value: *feature as u32,
                    bits: FEATURE_BITS,
                    max: FEATURE_MAX as u32,
                });
            }
            // Placeholder; the right-child address is known once the left
            // subtree has been emitted.
            words.push(NodeWord(0));
            pack_node(left, words)?;
            let right_at = words.len();
            words[at] = NodeWord::split(*feature as u16, *threshold_q, right_at as u16)?;
            pack_node(right, words)
        }
    }
}

/// Rebuild a quantized tree from a pre-order image, validating the encoding
/// invariants as it parses: in-range right-child addresses, the left subtree
/// exactly filling `[a+1, right_idx)`, and no unreachable words.
pub fn unpack_tree(words: &[NodeWord]) -> Result<QuantizedTree, CodecError> {
    if words.is_empty() {
        return Err(CodecError::ImageCorrupt {
            addr: 0,
            reason: "empty image".into(),
        });
    }
    let (root, end) = parse_subtree(words, 0)?;
    if end != words.len() {
        return Err(CodecError::ImageCorrupt {
            addr: end,
            reason: format!("{} unreachable trailing words", words.len() - end),
        });
    }
    Ok(QuantizedTree::new(root))
}

/// Parse the subtree rooted at `addr`; returns the node and the exclusive end
/// of its address range.
fn parse_subtree(words: &[NodeWord], addr: usize) -> Result<(QuantizedNode, usize), CodecError> {
    let word = *words.get(addr).ok_or_else(|| CodecError::ImageCorrupt {
        addr,
        reason: "address past end of image".into(),
    })?;
    match word.decode() {
        DecodedNode::Leaf { value_q } => Ok((QuantizedNode::Leaf { value_q }, addr + 1)),
        DecodedNode::Split {
            feature_idx,
            threshold_q,
            right_idx,
        } => {
            let right = right_idx as usize;
            if right >= words.len() {
                return Err(CodecError::ImageCorrupt {
                    addr,
                    reason: format!("right_idx {right} out of range (len {})", words.len()),
                });
            }
            if right <= addr + 1 {
                return Err(CodecError::ImageCorrupt {
                    addr,
                    reason: format!("right_idx {right} overlaps parent or left child"),
                });
            }
            let (left, left_end) = parse_subtree(words, addr + 1)?;
            if left_end != right {
                return Err(CodecError::ImageCorrupt {
                    addr,
                    reason: format!(
                        "left subtree ends at {left_end} but right child starts at {right}"
                    ),
                });
            }
            let (right_node, end) = parse_subtree(words, right)?;
            Ok((
                QuantizedNode::Split {
                    feature: feature_idx as usize,
                    threshold_q,
                    left: Box::new(left),
                    right: Box::new(right_node),
                },
                end,
            ))
        }
    }
}

/// Run the full pre-order invariant scan over a single-tree image without
/// materializing the tree.
pub fn validate_tree_image(words: &[NodeWord]) -> Result<(), CodecError> {
    unpack_tree(words).map(|_| ())
}

/// One nodes-RAM image: 8 trees packed back-to-back in pre-order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeRamImage {
    pub words: Vec<NodeWord>,
    pub tree_offsets: [u32; TREES_PER_GROUP],
    pub tree_node_counts: [u32; TREES_PER_GROUP],
    pub max_depth: u8,
}

impl TreeRamImage {
    /// Word of `tree`'s node at tree-local address `addr`.
    pub fn word(&self, tree: usize, addr: usize) -> Option<NodeWord> {
        if tree >= TREES_PER_GROUP || addr >= self.tree_node_counts[tree] as usize {
            return None;
        }
        self.words
            .get(self.tree_offsets[tree] as usize + addr)
            .copied()
    }

    pub fn tree_words(&self, tree: usize) -> &[NodeWord] {
        let start = self.tree_offsets[tree] as usize;
        let end = start + self.tree_node_counts[tree] as usize;
        &self.words[start..end]
    }

    pub fn node_count(&self) -> usize {
        self.words.len()
    }

    /// Recover the image from a flat word block: tree boundaries are implied
    /// by the pre-order encoding, so parsing 8 consecutive trees both splits
    /// and validates the block. Addresses inside each tree are tree-local,
    /// hence the per-tree subslice.
    pub fn from_words(words: Vec<NodeWord>, max_depth: u8) -> Result<Self, CodecError> {
        let mut tree_offsets = [0u32; TREES_PER_GROUP];
        let mut tree_node_counts = [0u32; TREES_PER_GROUP];
        let mut at = 0usize;
        for t in 0..TREES_PER_GROUP {
            if at >= words.len() {
                return Err(CodecError::ImageCorrupt {
                    addr: at,
                    reason: format!("image ends after {t} trees; expected {TREES_PER_GROUP}"),
                });
            }
            let (_, len) = parse_subtree(&words[at..], 0).map_err(|e| offset_error(e, at))?;
            tree_offsets[t] = at as u32;
            tree_node_counts[t] = len as u32;
            at += len;
        }
        if at != words.len() {
            return Err(CodecError::ImageCorrupt {
                addr: at,
                reason: format!("{} unreachable trailing words", words.len() - at),
            });
        }
        Ok(TreeRamImage {
            words,
            tree_offsets,
            tree_node_counts,
            max_depth,
        })
    }
}

// parse_subtree reports tree-local addresses; shift them into image space.
fn offset_error(e: CodecError, base: usize) -> CodecError {
    match e {
        CodecError::ImageCorrupt { addr, reason } => CodecError::ImageCorrupt {
            addr: addr + base,
            reason,
        },
        other => other,
    }
}

/// Pack exactly 8 quantized trees into one RAM image.
pub fn pack_group(trees: &[QuantizedTree], max_depth: usize) -> Result<TreeRamImage, CodecError> {
    if trees.len() != TREES_PER_GROUP {
        return Err(CodecError::GroupArity { got: trees.len() });
    }
    let mut words = Vec::new();
    let mut tree_offsets = [0u32; TREES_PER_GROUP];
    let mut tree_node_counts = [0u32; TREES_PER_GROUP];
    for (i, tree) in trees.iter().enumerate() {
        let block = pack_tree(tree, max_depth)?;
        tree_offsets[i] = words.len() as u32;
        tree_node_counts[i] = block.len() as u32;
        words.extend(block);
    }
    Ok(TreeRamImage {
        words,
        tree_offsets,
        tree_node_counts,
        max_depth: max_depth as u8,
    })
}

/// A fully packed cascade: per layer, two forests of four 8-tree RAM images,
/// plus that layer's quantization maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackedModel {
    pub max_depth: u8,
    pub layers: Vec<PackedLayer>,
    pub maps: Vec<QuantizationMap>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackedLayer {
    pub forests: [PackedForest; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackedForest {
    pub groups: Vec<TreeRamImage>,
}

impl PackedForest {
    pub fn node_count(&self) -> usize {
        self.groups.iter().map(TreeRamImage::node_count).sum()
    }
}

impl PackedModel {
    pub fn base_feature_width(&self) -> usize {
        self.maps.first().map(|m| m.width()).unwrap_or(0)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn node_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.forests.iter())
            .map(PackedForest::node_count)
            .sum()
    }

    /// Unpack every group back into pointer trees; forest kinds follow the
    /// fixed (CompletelyRandom, Random) layer convention.
    pub fn to_quantized(&self) -> Result<QuantizedModel, CodecError> {
        quant::unpack_model(self)
    }

    pub fn footprint(&self) -> StorageFootprint {
        storage_footprint(self.node_count())
    }
}

/// Pack a quantized model into per-group RAM images.
pub fn pack_model(model: &QuantizedModel) -> Result<PackedModel, CodecError> {
    let d = model.max_depth();
    let mut layers = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let mut forests = Vec::with_capacity(2);
        for forest in layer {
            let groups = forest
                .trees
                .chunks(TREES_PER_GROUP)
                .map(|chunk| pack_group(chunk, d))
                .collect::<Result<Vec<_>, _>>()?;
            forests.push(PackedForest { groups });
        }
        let [a, b]: [PackedForest; 2] = forests.try_into().expect("two forests per layer");
        layers.push(PackedLayer { forests: [a, b] });
    }
    Ok(PackedModel {
        max_depth: d as u8,
        layers,
        maps: model.maps.clone(),
    })
}

/// Storage cost of the packed encoding against the conventional 40-bit
/// layout that also stores an 8-bit left-child address.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StorageFootprint {
    pub node_count: usize,
    pub packed_bits: u64,
    pub baseline_bits: u64,
    pub savings_fraction: f64,
}

pub fn storage_footprint(node_count: usize) -> StorageFootprint {
    let packed_bits = 32 * node_count as u64;
    let baseline_bits = 40 * node_count as u64;
    let savings_fraction = if node_count == 0 {
        0.0
    } else {
        (baseline_bits - packed_bits) as f64 / baseline_bits as f64
    };
    StorageFootprint {
        node_count,
        packed_bits,
        baseline_bits,
        savings_fraction,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    pub(crate) fn random_qtree(rng: &mut StdRng, depth_left: usize, width: usize) -> QuantizedNode {
        if depth_left <= 1 || rng.gen_bool(0.3) {
            return QuantizedNode::Leaf {
                value_q: rng.gen_range(0..=VALUE_MAX),
            };
        }
        QuantizedNode::Split {
            feature: rng.gen_range(0..width),
            threshold_q: rng.gen_range(0..=VALUE_MAX),
            left: Box::new(random_qtree(rng, depth_left - 1, width)),
            right: Box::new(random_qtree(rng, depth_left - 1, width)),
        }
    }

    #[test]
    fn leaf_word_is_sign_bit_only() {
        assert_eq!(NodeWord::leaf(0).unwrap(), NodeWord(0x8000_0000));
    }

    #[test]
    fn zero_split_is_zero_word() {
        assert_eq!(NodeWord::split(0, 0, 0).unwrap(), NodeWord(0x0000_0000));
    }

    #[test]
    fn split_word_layout() {
        let w = NodeWord::split(3, 100, 17).unwrap();
        assert_eq!(w.0, (17u32 << 22) | (100u32 << 8) | 3);
        assert_eq!(w.0, 0x0440_6403);
        assert_eq!(
            w.decode(),
            DecodedNode::Split {
                feature_idx: 3,
                threshold_q: 100,
                right_idx: 17
            }
        );
    }

    #[test]
    fn field_overflow_names_field() {
        let err = NodeWord::split(300, 0, 0).unwrap_err();
        assert!(matches!(
            err,
            CodecError::FieldOverflow {
                field: "feature_idx",
                ..
            }
        ));
        let err = NodeWord::split(0, 20000, 0).unwrap_err();
        assert!(matches!(err, CodecError::FieldOverflow { field: "value", .. }));
        let err = NodeWord::split(0, 0, 600).unwrap_err();
        assert!(matches!(
            err,
            CodecError::FieldOverflow {
                field: "right_idx",
                ..
            }
        ));
    }

    #[test]
    fn leaf_decode_round_trip() {
        let w = NodeWord(0x8000_0000);
        assert_eq!(w.decode(), DecodedNode::Leaf { value_q: 0 });
        assert!(w.is_canonical());
    }

    #[test]
    fn non_canonical_leaf_still_decodes() {
        // Sign bit set plus junk in feature/address fields.
        let w = NodeWord(LEAF_BIT | (5 << RIGHT_IDX_SHIFT) | (9 << VALUE_SHIFT) | 7);
        assert!(!w.is_canonical());
        assert_eq!(w.decode(), DecodedNode::Leaf { value_q: 9 });
    }

    #[test]
    fn random_words_round_trip() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..1000 {
            if rng.gen_bool(0.5) {
                let v = rng.gen_range(0..=VALUE_MAX);
                let w = NodeWord::leaf(v).unwrap();
                assert_eq!(w.decode(), DecodedNode::Leaf { value_q: v });
            } else {
                let f = rng.gen_range(0..=FEATURE_MAX);
                let v = rng.gen_range(0..=VALUE_MAX);
                let r = rng.gen_range(0..=RIGHT_IDX_MAX);
                let w = NodeWord::split(f, v, r).unwrap();
                assert_eq!(
                    w.decode(),
                    DecodedNode::Split {
                        feature_idx: f as u8,
                        threshold_q: v,
                        right_idx: r
                    }
                );
            }
        }
    }

    #[test]
    fn pack_single_leaf() {
        let tree = QuantizedTree::new(QuantizedNode::Leaf { value_q: 0 });
        let words = pack_tree(&tree, 8).unwrap();
        assert_eq!(words, vec![NodeWord(0x8000_0000)]);
    }

    #[test]
    fn pack_smallest_split() {
        let tree = QuantizedTree::new(QuantizedNode::Split {
            feature: 0,
            threshold_q: 5,
            left: Box::new(QuantizedNode::Leaf { value_q: 1 }),
            right: Box::new(QuantizedNode::Leaf { value_q: 2 }),
        });
        let words = pack_tree(&tree, 8).unwrap();
        assert_eq!(words.len(), 3);
        assert_eq!(
            words[0].decode(),
            DecodedNode::Split {
                feature_idx: 0,
                threshold_q: 5,
                right_idx: 2
            }
        );
        assert_eq!(words[1].decode(), DecodedNode::Leaf { value_q: 1 });
        assert_eq!(words[2].decode(), DecodedNode::Leaf { value_q: 2 });
    }

    #[test]
    fn pack_unpack_round_trip_random_trees() {
        let mut rng = StdRng::seed_from_u64(17);
        for _ in 0..50 {
            let tree = QuantizedTree::new(random_qtree(&mut rng, 8, 12));
            let words = pack_tree(&tree, 8).unwrap();
            let back = unpack_tree(&words).unwrap();
            assert_eq!(tree, back);
        }
    }

    #[test]
    fn preorder_invariants_hold_on_packed_images() {
        let mut rng = StdRng::seed_from_u64(23);
        for _ in 0..50 {
            let tree = QuantizedTree::new(random_qtree(&mut rng, 8, 12));
            let words = pack_tree(&tree, 8).unwrap();
            // Direct scan, independent of unpack: every split's right index
            // exceeds its own address + 1 and the image parses exactly.
            for (a, w) in words.iter().enumerate() {
                if let DecodedNode::Split { right_idx, .. } = w.decode() {
                    assert!((right_idx as usize) > a + 1);
                    assert!((right_idx as usize) < words.len());
                }
            }
            validate_tree_image(&words).unwrap();
        }
    }

    #[test]
    fn unpack_rejects_out_of_range_right_idx() {
        let words = vec![
            NodeWord::split(0, 0, 9).unwrap(),
            NodeWord::leaf(0).unwrap(),
        ];
        let err = unpack_tree(&words).unwrap_err();
        match err {
            CodecError::ImageCorrupt { addr, .. } => assert_eq!(addr, 0),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn unpack_rejects_overlapping_subtrees() {
        // right_idx == addr+1 would overlap the left child.
        let words = vec![
            NodeWord::split(0, 0, 1).unwrap(),
            NodeWord::leaf(0).unwrap(),
            NodeWord::leaf(0).unwrap(),
        ];
        assert!(matches!(
            unpack_tree(&words),
            Err(CodecError::ImageCorrupt { addr: 0, .. })
        ));
    }

    #[test]
    fn unpack_rejects_unreachable_words() {
        let mut words = pack_tree(
            &QuantizedTree::new(QuantizedNode::Leaf { value_q: 3 }),
            8,
        )
        .unwrap();
        words.push(NodeWord::leaf(1).unwrap());
        assert!(matches!(
            unpack_tree(&words),
            Err(CodecError::ImageCorrupt { addr: 1, .. })
        ));
    }

    #[test]
    fn pack_enforces_capacity() {
        // A left-leaning chain of 600 nodes needs more than 9 bits of address.
        let mut node = QuantizedNode::Leaf { value_q: 0 };
        for _ in 0..300 {
            node = QuantizedNode::Split {
                feature: 0,
                threshold_q: 0,
                left: Box::new(node),
                right: Box::new(QuantizedNode::Leaf { value_q: 0 }),
            };
        }
        let tree = QuantizedTree::new(node);
        assert_eq!(tree.node_count(), 601);
        assert!(matches!(
            pack_tree(&tree, 31),
            Err(CodecError::Capacity { nodes: 601, max: 511 })
        ));
    }

    #[test]
    fn pack_enforces_depth() {
        // Left spine of depth 6: 11 nodes, within the 2^5-1 capacity, so the
        // depth check is what trips.
        let mut node = QuantizedNode::Leaf { value_q: 0 };
        for _ in 0..5 {
            node = QuantizedNode::Split {
                feature: 0,
                threshold_q: 0,
                left: Box::new(node),
                right: Box::new(QuantizedNode::Leaf { value_q: 0 }),
            };
        }
        let tree = QuantizedTree::new(node);
        assert_eq!((tree.max_depth(), tree.node_count()), (6, 11));
        assert!(matches!(
            pack_tree(&tree, 5),
            Err(CodecError::DepthExceeded { depth: 6, max: 5 })
        ));
    }

    #[test]
    fn group_of_single_leaves() {
        let trees: Vec<QuantizedTree> = (0..8)
            .map(|i| QuantizedTree::new(QuantizedNode::Leaf { value_q: i }))
            .collect();
        let image = pack_group(&trees, 8).unwrap();
        assert_eq!(image.words.len(), 8);
        assert_eq!(image.tree_offsets, [0, 1, 2, 3, 4, 5, 6, 7]);
        assert_eq!(image.tree_node_counts, [1; 8]);
    }

    #[test]
    fn group_offsets_are_cumulative() {
        let tree = QuantizedTree::new(QuantizedNode::Split {
            feature: 1,
            threshold_q: 7,
            left: Box::new(QuantizedNode::Leaf { value_q: 0 }),
            right: Box::new(QuantizedNode::Leaf { value_q: 1 }),
        });
        let trees = vec![tree; 8];
        let image = pack_group(&trees, 8).unwrap();
        assert_eq!(image.words.len(), 24);
        assert_eq!(image.tree_offsets, [0, 3, 6, 9, 12, 15, 18, 21]);
    }

    #[test]
    fn group_round_trips_per_block() {
        let mut rng = StdRng::seed_from_u64(31);
        let trees: Vec<QuantizedTree> = (0..8)
            .map(|_| QuantizedTree::new(random_qtree(&mut rng, 7, 9)))
            .collect();
        let image = pack_group(&trees, 8).unwrap();
        for (i, tree) in trees.iter().enumerate() {
            assert_eq!(&unpack_tree(image.tree_words(i)).unwrap(), tree);
        }
        // Boundary recovery from the flat block agrees.
        let again = TreeRamImage::from_words(image.words.clone(), 8).unwrap();
        assert_eq!(again, image);
    }

    #[test]
    fn group_arity_checked() {
        let trees: Vec<QuantizedTree> = (0..7)
            .map(|_| QuantizedTree::new(QuantizedNode::Leaf { value_q: 0 }))
            .collect();
        assert!(matches!(
            pack_group(&trees, 8),
            Err(CodecError::GroupArity { got: 7 })
        ));
    }

    #[test]
    fn footprint_savings_is_exactly_20_percent() {
        for n in [1usize, 3, 255, 65280] {
            let f = storage_footprint(n);
            assert_eq!(f.packed_bits, 32 * n as u64);
            assert_eq!(f.baseline_bits, 40 * n as u64);
            assert_eq!(f.savings_fraction, 0.20);
        }
        let one = storage_footprint(1);
        assert_eq!((one.packed_bits, one.baseline_bits), (32, 40));
        // 4 layers x 2 forests x 32 trees x 255 nodes
        assert_eq!(storage_footprint(65280).packed_bits, 32 * 65280);
    }
}
