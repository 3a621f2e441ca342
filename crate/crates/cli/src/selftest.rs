//! Quick oracle and invariant checks on tiny models.

use std::time::Instant;

use anyhow::{Context, Result};
use loco_core::autodiff::Conv3dGeom;
use loco_core::engine::{compute_pir, layout_pir, load_checkpoint, save_checkpoint};
use loco_core::fusion::{binary_entropy, entropy_ensemble, mask_out_of_range, BodyAxisRegressor, BodyPartProfile, PredictionMap};
use loco_core::metrics::{dsc, hd95, Mask};
use loco_core::pvt::layout;
use loco_core::synth::VolumeSample;
use loco_core::{reference, seed, Adaptation, CheckpointError, Error, Graph, LoraConv3d, LoraLinear, ModelState};
use loco_core::{ParamGroup, ParamStore, PvtConfig, TaskId, TaskSpec, Tensor};
use rand::Rng;

pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn tiny() -> PvtConfig {
    PvtConfig {
        patch_size: [8, 8, 8],
        embed_dims: vec![4, 8, 8],
        heads: vec![1, 2, 2],
        encoder_depths: vec![1, 1, 1],
        decoder_depths: vec![1, 1],
        sr_ratios: vec![2, 1, 1],
        head_channels: 4,
        ..PvtConfig::desk()
    }
}

fn spec(id: u32, epochs: usize) -> TaskSpec {
    TaskSpec {
        id: TaskId(id),
        name: format!("task{id}"),
        classes: vec![format!("t{id}a"), format!("t{id}b")],
        epochs,
        lr: 1e-3,
        body_part_range: None,
    }
}

fn sample(s: u64) -> Result<VolumeSample> {
    let image = Tensor::randn([1, 8, 8, 8], 1.0, &mut seed::rng(s, "image"))?;
    let labels = Tensor::from_fn([2, 8, 8, 8], |i| f64::from((i % 512) / 64 < 3 + i / 512))?;
    Ok(VolumeSample { image, labels, class_names: vec!["a".into(), "b".into()], spacing: [1.0; 3] })
}

/// Base trained on task 0 and continual tasks 1 and 2, one epoch each.
fn trained() -> Result<ModelState> {
    let mut st = ModelState::new(&tiny(), 3)?;
    let data = [sample(1)?, sample(2)?];
    st.train_base(&spec(0, 1), &data)?;
    st.continual_step(&spec(1, 1), &data, Adaptation::Lora)?;
    st.continual_step(&spec(2, 1), &data, Adaptation::Lora)?;
    Ok(st)
}

fn op_gradients() -> Result<(bool, String)> {
    let r = |shape: &[usize], label: &str| Tensor::randn(shape.to_vec(), 1.0, &mut seed::rng(5, label));
    let mut worst: f64 = 0.0;
    worst = worst.max(reference::op_gradient_error(&[r(&[3, 4], "a")?, r(&[4, 2], "b")?], |t, v| t.matmul(v[0], v[1]), 1)?);
    worst = worst.max(reference::op_gradient_error(&[r(&[4, 5], "a")?], |t, v| t.softmax(v[0], 1), 2)?);
    worst = worst.max(reference::op_gradient_error(
        &[r(&[4, 6], "a")?, r(&[6], "g")?, r(&[6], "b")?],
        |t, v| t.layernorm(v[0], v[1], v[2], 1e-6),
        3,
    )?);
    worst = worst.max(reference::op_gradient_error(
        &[r(&[2, 4, 3, 5], "x")?, r(&[3, 2, 3, 3, 3], "k")?],
        |t, v| t.conv3d(v[0], v[1], Conv3dGeom::uniform(2, 1)),
        4,
    )?);
    worst = worst.max(reference::op_gradient_error(
        &[r(&[2, 2, 3, 2], "x")?, r(&[2, 3, 2, 2, 2], "k")?],
        |t, v| t.deconv3d(v[0], v[1], 2),
        5,
    )?);
    Ok((worst < 1e-4, format!("max relative error {worst:.2e}")))
}

fn model_gradients() -> Result<(bool, String)> {
    let mut st = ModelState::new(&tiny(), 4)?;
    st.train_base(&spec(0, 0), &[sample(1)?])?;
    st.register_task(&spec(1, 0), Adaptation::Lora)?;
    let ids = st.task_params(TaskId(1));
    let mut rng = seed::rng(4, "b");
    for &id in &ids {
        if st.store.get(id).name.contains(".lora_b.") {
            let shape = st.store.value(id).shape().to_vec();
            st.store.update(id, Tensor::randn(shape, 0.05, &mut rng)?)?;
        }
    }
    let picks: Vec<_> = ids
        .iter()
        .filter(|&&id| st.store.get(id).name.contains(".lora_"))
        .step_by(5)
        .map(|&id| (id, rng.random_range(0..st.store.value(id).numel())))
        .collect();
    let pairs = reference::model_gradient_pairs(&st, &sample(9)?, TaskId(1), &picks, 1e-5)?;
    let worst = pairs.iter().map(|&(a, n)| reference::rel_err(a, n, 1e-7)).fold(0.0, f64::max);
    Ok((worst < 1e-3, format!("{} adapter entries, max relative error {worst:.2e}", pairs.len())))
}

fn zero_init() -> Result<(bool, String)> {
    let mut st = ModelState::new(&tiny(), 6)?;
    st.train_base(&spec(0, 0), &[sample(1)?])?;
    st.register_task(&spec(1, 0), Adaptation::Lora)?;
    let x = sample(7)?.image;
    let with = st.logits(&x, TaskId(1))?;
    let mut g = Graph::frozen(&st.store);
    let xv = g.input(x);
    let t = st.model.trace(&mut g, xv, TaskId(1), false)?;
    let same = with.bit_eq(g.tape.value(t.logits));
    Ok((same, format!("fresh adapters bitwise transparent: {same}")))
}

fn lora_merge() -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for i in 0..6u64 {
        let mut rng = seed::rng(i, "merge");
        let mut store = ParamStore::new();
        let mut lin = LoraLinear::new(&mut store, "lin", 6, 5, true, &mut rng)?;
        lin.add_task_adapter(&mut store, TaskId(1), 2, 1.0, 0.3, i)?;
        let geom = Conv3dGeom::uniform(1 + (i as usize) % 2, 1);
        let mut conv = LoraConv3d::new(&mut store, "conv", 2, 3, 3, geom, false, &mut rng)?;
        conv.add_task_adapter(&mut store, TaskId(1), 1, 0.5, 0.3, i)?;
        for b in [lin.adapter(TaskId(1))?.b, conv.adapter(TaskId(1))?.b] {
            let shape = store.value(b).shape().to_vec();
            store.update(b, Tensor::randn(shape, 0.3, &mut rng)?)?;
        }
        let xl = Tensor::randn([4, 6], 1.0, &mut rng)?;
        let xc = Tensor::randn([2, 4, 5, 3], 1.0, &mut rng)?;
        let mut g = Graph::frozen(&store);
        let (a, b) = (g.input(xl.clone()), g.input(xc.clone()));
        let yl = lin.forward(&mut g, a, Some(TaskId(1)))?;
        let yc = conv.forward(&mut g, b, Some(TaskId(1)))?;
        let w = lin.merged_weight(&store, TaskId(1))?;
        let bias = store.value(lin.bias.expect("bias requested"));
        let dense = Tensor::from_fn([4, 5], |i| {
            let (n, j) = (i / 5, i % 5);
            bias.data()[j] + (0..6).map(|k| xl.data()[n * 6 + k] * w.data()[j * 6 + k]).sum::<f64>()
        })?;
        worst = worst.max(g.tape.value(yl).max_abs_diff(&dense));
        let merged = reference::conv3d(&xc, &conv.merged_kernel(&store, TaskId(1))?, geom)?;
        worst = worst.max(g.tape.value(yc).max_abs_diff(&merged));
    }
    Ok((worst < 1e-10, format!("max |unmerged - merged| {worst:.2e}")))
}

fn no_forgetting() -> Result<(bool, String)> {
    let mut st = ModelState::new(&tiny(), 8)?;
    let data = [sample(1)?, sample(2)?];
    st.train_base(&spec(0, 1), &data)?;
    let x = sample(5)?.image;
    let before = st.logits(&x, TaskId(0))?;
    st.continual_step(&spec(1, 1), &data, Adaptation::Lora)?;
    st.continual_step(&spec(2, 1), &data, Adaptation::HeadOnly)?;
    let same = before.bit_eq(&st.logits(&x, TaskId(0))?) && st.verify_base().is_ok();
    Ok((same, format!("task-0 logits bitwise unchanged after two steps: {same}")))
}

fn pir_ledger(st: &ModelState) -> Result<(bool, String)> {
    let pir = compute_pir(st);
    let expected = layout_pir(st.config(), &[(TaskId(0), 2), (TaskId(1), 2), (TaskId(2), 2)]);
    let sum: f64 = pir.tasks.iter().map(|t| t.percent).sum();
    let present = st.store.count(|g| g == ParamGroup::Adapter(TaskId(1)));
    let ok = pir == expected && (sum - pir.cumulative_percent).abs() < 1e-12
        && present == layout::count(&layout::adapters(st.config(), TaskId(1)));
    Ok((ok, format!("{:.3}% per task, {:.3}% cumulative", pir.tasks[0].percent, pir.cumulative_percent)))
}

fn checkpoints(st: &ModelState) -> Result<(bool, String)> {
    let dir = tempfile::tempdir()?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    save_checkpoint(st, &a)?;
    let specs = [spec(0, 0), spec(1, 0), spec(2, 0)];
    let loaded = load_checkpoint(&a, st.config(), &specs, &[TaskId(1), TaskId(2)])?;
    save_checkpoint(&loaded, &b)?;
    let read = |p: std::path::PathBuf| std::fs::read(&p).with_context(|| format!("reading {}", p.display()));
    let mut same = true;
    for name in ["base.loco", "task_1.loco", "task_2.loco"] {
        same &= read(a.join(name))? == read(b.join(name))?;
    }
    let subset = load_checkpoint(&a, st.config(), &specs, &[TaskId(2)])?;
    let missing = matches!(subset.logits(&sample(3)?.image, TaskId(1)), Err(Error::MissingTask(_)));
    let mut bytes = read(a.join("task_1.loco"))?;
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    std::fs::write(a.join("task_1.loco"), bytes)?;
    let damaged = matches!(
        load_checkpoint(&a, st.config(), &specs, &[TaskId(1)]),
        Err(Error::Checkpoint(CheckpointError::ChecksumMismatch { .. }))
    );
    Ok((
        same && missing && damaged,
        format!("byte-identical round trip: {same}; absent shard refused: {missing}; flipped bit detected: {damaged}"),
    ))
}

fn metrics() -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for s in 0..20u64 {
        let mut rng = seed::rng(s, "masks");
        let shape = [rng.random_range(2..=9), rng.random_range(2..=9), rng.random_range(2..=9)];
        let n = shape.iter().product();
        let mut mk = || Mask::new(shape, (0..n).map(|i| i == 0 || rng.random_bool(0.2)).collect());
        let (a, b) = (mk()?, mk()?);
        let sp = [1.0, 1.5, 2.0];
        worst = worst.max((hd95(&a, &b, sp)? - reference::hd95_brute(&a, &b, sp)?).abs());
    }
    let line = |on: &[usize]| Mask::new([8, 1, 1], (0..8).map(|i| on.contains(&i)).collect());
    let half = dsc(&line(&[0, 1, 2, 3])?, &line(&[2, 3, 4, 5])?)?;
    Ok((worst < 1e-9 && half == 0.5, format!("hd95 vs all-pairs {worst:.1e}; half-overlap dice {half}")))
}

fn fusion() -> Result<(bool, String)> {
    let mut rng = seed::rng(2, "fusion");
    let preds = (0..3u32)
        .map(|t| {
            let probs = Tensor::from_fn([1, 3, 3, 4], |_| rng.random_range(0.0..1.0))?;
            PredictionMap::new(TaskId(t), vec!["shared".into()], probs, [1.0; 3])
        })
        .collect::<loco_core::Result<Vec<_>>>()?;
    let fused = entropy_ensemble(&preds)?;
    let mut agree = true;
    for v in 0..36 {
        let best = (0..3)
            .min_by(|&a, &b| binary_entropy(preds[a].probs.data()[v]).total_cmp(&binary_entropy(preds[b].probs.data()[v])))
            .expect("three predictions");
        agree &= fused.winners[0][v] == Some(TaskId(best as u32));
        agree &= fused.masks[0].data[v] == (preds[best].probs.data()[v] > 0.5);
    }
    let d = 8;
    let volume = Tensor::from_fn([1, 2, 2, d], |i| ((i % d) as f64 + 0.5) / d as f64)?;
    let scores = BodyAxisRegressor::default().estimate(&volume)?;
    let profile = BodyPartProfile { range: (0.0, 0.5), ..BodyPartProfile::full(TaskId(0)) };
    let p = PredictionMap::new(TaskId(0), vec!["a".into()], Tensor::full([1, 2, 2, d], 0.9)?, [1.0; 3])?;
    let masked = mask_out_of_range(&p, &profile, &scores)?;
    let upper: Vec<usize> = (d / 2..d).collect();
    let exact = masked.masked_slices.iter().copied().collect::<Vec<_>>() == upper;
    Ok((agree && exact, format!("entropy winner matches oracle: {agree}; out-of-range slices masked: {exact}")))
}

pub fn run() -> Vec<Check> {
    let mut checks = Vec::new();
    let mut push = |name: &'static str, r: Result<(bool, String)>| {
        let (pass, detail) = r.unwrap_or_else(|e| (false, format!("error: {e:#}")));
        checks.push(Check { name, pass, detail });
    };
    let start = Instant::now();
    push("op gradients", op_gradients());
    push("model gradients", model_gradients());
    push("zero-init identity", zero_init());
    push("LoRA merge equivalence", lora_merge());
    push("no forgetting", no_forgetting());
    match trained() {
        Ok(st) => {
            push("parameter ledger", pir_ledger(&st));
            push("checkpoints", checkpoints(&st));
        }
        Err(e) => {
            push("parameter ledger", Err(e));
            push("checkpoints", Err(anyhow::anyhow!("training failed")));
        }
    }
    push("metrics", metrics());
    push("fusion", fusion());
    eprintln!("selftest finished in {:.1?}", start.elapsed());
    checks
}
