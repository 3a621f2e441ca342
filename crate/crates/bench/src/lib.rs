//! Fixtures shared by the benchmarks in `benches/`.

use loco_core::metrics::Mask;
use loco_core::synth::VolumeSample;
use loco_core::{scenario, seed, Adaptation, ModelState, PvtConfig, Tensor};

pub fn randn(shape: &[usize], label: &str) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, &mut seed::rng(0, label)).expect("valid shape")
}

/// A solid ball of radius `r` voxels centred at `c`.
pub fn ball(shape: [usize; 3], c: [f64; 3], r: f64) -> Mask {
    let [_, w, d] = shape;
    let data = (0..shape.iter().product())
        .map(|i| {
            let p = [(i / (w * d)) as f64, ((i / d) % w) as f64, (i % d) as f64];
            p.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() <= r * r
        })
        .collect();
    Mask::new(shape, data).expect("matching length")
}

/// One held-out volume of the first desk task.
pub fn desk_sample() -> VolumeSample {
    let task = &scenario::desk_tasks(7)[0];
    let (_, test) = task.data(3).expect("recipe is valid");
    test.into_iter().next().expect("non-empty split")
}

/// An untrained desk model with a frozen base and one adapted task.
pub fn desk_state() -> ModelState {
    let tasks = scenario::desk_tasks(7);
    let sample = desk_sample();
    let mut st = ModelState::new(&PvtConfig::desk_shallow(), 1).expect("valid config");
    let base = loco_core::TaskSpec { epochs: 0, ..tasks[0].spec.clone() };
    st.train_base(&base, std::slice::from_ref(&sample)).expect("base registers");
    st.register_task(&tasks[1].spec, Adaptation::Lora).expect("task registers");
    st
}
