//! Fixtures shared by the benchmarks.

use attmask_core::data::{make_batch, make_synthetic, AugConfig, ImageDataset};
use attmask_core::distill::{StudentTeacherPair, ViewBatch};
use attmask_core::optim::OptimizerState;
use attmask_core::{EncoderConfig, RngState, RunConfig};

/// The shipped desk configuration.
pub fn desk() -> RunConfig {
    RunConfig::from_json(
        include_str!("../../../configs/desk.json"),
        "configs/desk.json",
    )
    .expect("shipped config is valid")
}

pub fn dataset(per_class: usize) -> ImageDataset {
    let mut rng = RngState::new(0).stream("synthetic", 0);
    make_synthetic(4, per_class, 32, 3, &mut rng).expect("valid synthetic parameters")
}

pub fn batch(ds: &ImageDataset, size: usize) -> ViewBatch<f32> {
    let idx: Vec<usize> = (0..size).collect();
    make_batch(ds, &idx, &AugConfig::default(), &RngState::new(1), 0)
}

pub fn pair_and_optimizer(cfg: &EncoderConfig) -> (StudentTeacherPair<f32>, OptimizerState<f32>) {
    let pair = StudentTeacherPair::new(cfg, &mut RngState::new(2).stream("init", 0), 0.9);
    let opt = OptimizerState::new(Default::default(), &pair.student);
    (pair, opt)
}
