#![allow(dead_code)]

use loco_core::engine::{ModelState, TaskSpec};
use loco_core::synth::VolumeSample;
use loco_core::{seed, PvtConfig, TaskId, Tensor};

/// A three-stage model small enough for per-test training on 8³ volumes.
pub fn tiny_config() -> PvtConfig {
    let mut cfg = PvtConfig::desk();
    cfg.patch_size = [8, 8, 8];
    cfg.embed_dims = vec![4, 8, 8];
    cfg.heads = vec![1, 2, 2];
    cfg.encoder_depths = vec![1, 1, 1];
    cfg.decoder_depths = vec![1, 1];
    cfg.sr_ratios = vec![2, 1, 1];
    cfg.head_channels = 4;
    cfg
}

pub fn spec(id: u32, classes: usize, epochs: usize) -> TaskSpec {
    TaskSpec {
        id: TaskId(id),
        name: format!("task{id}"),
        classes: (0..classes).map(|c| format!("t{id}c{c}")).collect(),
        epochs,
        lr: 1e-3,
        body_part_range: None,
    }
}

/// Random image with a blob label per class.
pub fn sample(cfg: &PvtConfig, classes: usize, s: u64) -> VolumeSample {
    let [h, w, d] = cfg.patch_size;
    let image = Tensor::randn([1, h, w, d], 1.0, &mut seed::rng(s, "image")).unwrap();
    let labels = Tensor::from_fn([classes, h, w, d], |i| {
        let c = i / (h * w * d);
        let v = i % (h * w * d);
        let (x, y, z) = (v / (w * d), (v / d) % w, v % d);
        f64::from(x / 4 == c % 2 && y < 5 && z >= 2)
    })
    .unwrap();
    VolumeSample {
        image,
        labels,
        class_names: (0..classes).map(|c| format!("c{c}")).collect(),
        spacing: [1.0; 3],
    }
}

pub fn trained_base(cfg: &PvtConfig, seed: u64) -> (ModelState, Vec<VolumeSample>) {
    let data: Vec<_> = (0..3).map(|i| sample(cfg, 2, 100 + i)).collect();
    let mut st = ModelState::new(cfg, seed).unwrap();
    st.train_base(&spec(0, 2, 1), &data).unwrap();
    (st, data)
}
