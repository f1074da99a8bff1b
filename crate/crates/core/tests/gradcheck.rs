mod common;

use std::collections::HashSet;

use common::gradcheck::check_random_graph;
use pruneprobe::autodiff::OpKind;

const ALL_KINDS: [OpKind; 19] = [
    OpKind::Leaf,
    OpKind::MatMul,
    OpKind::Add,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::Scale,
    OpKind::AddRow,
    OpKind::Relu,
    OpKind::Softmax,
    OpKind::LayerNorm,
    OpKind::CrossEntropy,
    OpKind::Gather,
    OpKind::SliceCols,
    OpKind::ConcatCols,
    OpKind::SliceRows,
    OpKind::ConcatRows,
    OpKind::Sum,
    OpKind::Dropout,
    OpKind::Attention,
];

#[test]
fn random_graphs_match_finite_differences() {
    let mut seen = HashSet::new();
    let mut worst: (f64, u64) = (0.0, 0);
    for seed in 0..120 {
        let r = check_random_graph(seed);
        assert!(r.checked > 0);
        if r.max_rel_error > worst.0 {
            worst = (r.max_rel_error, seed);
        }
        seen.extend(r.kinds);
    }
    println!("max relative error {:e} (graph {})", worst.0, worst.1);
    assert!(worst.0 < 1e-4, "graph {} has relative error {:e}", worst.1, worst.0);
    for k in ALL_KINDS {
        assert!(seen.contains(&k), "{:?} never exercised", k);
    }
}
