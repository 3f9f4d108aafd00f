//! Fixtures shared by the benchmarks.

use rgcl_core::numerics::{DenseMatrix, RandomStream};
use rgcl_core::rgcl::UnimodalViews;
use rgcl_core::{Activation, EncoderParams, EncoderShape};

/// A seeded encoder and `n` random two-view inputs of width `d`.
pub fn fixture(n: usize, d: usize, hidden: usize, embed: usize) -> (EncoderParams, DenseMatrix, UnimodalViews) {
    let root = RandomStream::new(42);
    let shape = EncoderShape { input: d, hidden, embed, activation: Activation::Tanh };
    let params = EncoderParams::init(shape, &root);
    let mut s = root.substream("bench-data");
    let x = DenseMatrix::from_vec(n, d, s.draw_gaussian(n * d)).expect("sized");
    let a = DenseMatrix::from_vec(n, d, s.draw_gaussian(n * d)).expect("sized");
    let b = DenseMatrix::from_vec(n, d, s.draw_gaussian(n * d)).expect("sized");
    (params, x, UnimodalViews::new(a, b).expect("same shape"))
}
