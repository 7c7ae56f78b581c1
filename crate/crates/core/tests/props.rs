//! Property tests for the codec and traversal invariants.

use df_accel::codec::{
    pack_tree, unpack_tree, validate_tree_image, DecodedNode, FeatureMap, NodeWord, QuantizedNode,
    QuantizedTree, FEATURE_MAX, RIGHT_IDX_MAX, VALUE_MAX,
};
use df_accel::model::{DecisionTree, TreeNode};
use proptest::prelude::*;

fn qtree_strategy(width: usize) -> impl Strategy<Value = QuantizedNode> {
    let leaf = (0u16..=VALUE_MAX).prop_map(|value_q| QuantizedNode::Leaf { value_q });
    leaf.prop_recursive(7, 96, 2, move |inner| {
        (0..width, 0u16..=VALUE_MAX, inner.clone(), inner).prop_map(|(f, t, l, r)| {
            QuantizedNode::Split {
                feature: f,
                threshold_q: t,
                left: Box::new(l),
                right: Box::new(r),
            }
        })
    })
}

fn ftree_strategy(width: usize) -> impl Strategy<Value = TreeNode> {
    let leaf = (0.0f64..=1.0).prop_map(TreeNode::leaf);
    leaf.prop_recursive(7, 96, 2, move |inner| {
        (0..width, 0.0f64..1.0, inner.clone(), inner)
            .prop_map(|(f, t, l, r)| TreeNode::split(f, t, l, r))
    })
}

proptest! {
    #[test]
    fn node_word_round_trip(leaf in any::<bool>(),
                            feature in 0u16..=FEATURE_MAX,
                            value in 0u16..=VALUE_MAX,
                            right in 0u16..=RIGHT_IDX_MAX) {
        if leaf {
            let w = NodeWord::leaf(value).unwrap();
            prop_assert!(w.is_canonical());
            prop_assert_eq!(w.decode(), DecodedNode::Leaf { value_q: value });
        } else {
            let w = NodeWord::split(feature, value, right).unwrap();
            prop_assert_eq!(w.decode(), DecodedNode::Split {
                feature_idx: feature as u8,
                threshold_q: value,
                right_idx: right,
            });
        }
    }

    #[test]
    fn pack_unpack_round_trip(root in qtree_strategy(16)) {
        let tree = QuantizedTree::new(root);
        let words = pack_tree(&tree, tree.max_depth()).unwrap();
        prop_assert_eq!(words.len(), tree.node_count());
        validate_tree_image(&words).unwrap();
        // Pre-order left-child law, checked against the raw words.
        for (a, w) in words.iter().enumerate() {
            if let DecodedNode::Split { right_idx, .. } = w.decode() {
                prop_assert!((right_idx as usize) > a + 1);
                prop_assert!((right_idx as usize) < words.len());
            }
        }
        let back = unpack_tree(&words).unwrap();
        prop_assert_eq!(&back, &tree);
    }

    #[test]
    fn quantization_is_monotone_and_bounded(lo in -1e6f64..1e6, span in 0.0f64..1e6,
                                            xs in proptest::collection::vec(-1e6f64..2e6, 2)) {
        let map = FeatureMap::from_range(lo, lo + span);
        let (a, b) = (xs[0].min(xs[1]), xs[0].max(xs[1]));
        let (qa, qb) = (map.quantize(a), map.quantize(b));
        prop_assert!(qa <= qb);
        prop_assert!(qb <= VALUE_MAX);
        // Within the calibrated range the round trip stays inside one step.
        if span > 0.0 {
            let x = lo + span * 0.37;
            prop_assert!((map.dequantize(map.quantize(x)) - x).abs() <= map.step() + 1e-12);
        }
    }

    #[test]
    fn traversal_path_bounds(root in ftree_strategy(8),
                             features in proptest::collection::vec(0.0f64..1.0, 8)) {
        let tree = DecisionTree::new(root);
        let t = tree.traverse(&features).unwrap();
        prop_assert!(t.path_length >= 1);
        prop_assert!(t.path_length <= tree.max_depth());
        prop_assert!((0.0..=1.0).contains(&t.leaf_value));
    }
}
