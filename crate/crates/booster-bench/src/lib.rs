//! Shared fixtures for the benchmark targets.

use booster_core::{rng, Model, Tensor};

pub const SIDE: usize = 28;

/// Model plus a random batch shaped like the synthetic corpus.
pub fn fixture(batch: usize) -> (Model, Tensor, Vec<usize>) {
    let model = Model::build("cnn-small", (1, SIDE, SIDE), 10, 7).unwrap();
    let mut r = rng::stream(0xBE, &[1]);
    let x = Tensor::rand_uniform(vec![batch, 1, SIDE, SIDE], 0.0, 1.0, &mut r);
    let y = (0..batch).map(|i| i % 10).collect();
    (model, x, y)
}
