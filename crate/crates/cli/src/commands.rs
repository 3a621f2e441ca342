use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use loco_core::engine::checkpoint::{save_task_shard, task_path};
use loco_core::engine::{compute_pir, load_checkpoint, save_checkpoint, EpochLog};
use loco_core::fusion::{build_profile, BodyAxisRegressor};
use loco_core::report::{evaluate_fused, evaluate_task, infer_fused, Report, ReportRow};
use loco_core::synth::{read_volume, write_volume, VolumeSample};
use loco_core::{Adaptation, Error, ModelState, TaskId, Tensor};

use crate::config::RunConfig;
use crate::rundir::{self, Manifest};

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seeds.model = s;
    }
    Ok(cfg)
}

fn log_text(log: &[EpochLog]) -> String {
    let mut s = String::from("task epoch mean_loss\n");
    for e in log {
        writeln!(s, "{} {} {:.10}", e.task, e.epoch, e.mean_loss).unwrap();
    }
    s
}

pub fn train_base(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let out = out.unwrap_or_else(|| cfg.out.clone());
    let spec = cfg.spec(TaskId(0))?;
    let (train, _) = cfg.data(TaskId(0))?;
    let mut state = ModelState::new(&cfg.model(), cfg.seeds.model)?;
    eprintln!("training base task `{}` on {} volumes for {} epochs", spec.name, train.len(), spec.epochs);
    state.train_base(&spec, &train)?;
    let images: Vec<&Tensor> = train.iter().map(|s| &s.image).collect();
    let reg = BodyAxisRegressor::fit(&images)?;
    let profile = build_profile(TaskId(0), &train, &reg)?;

    save_checkpoint(&state, &out)?;
    rundir::write_axis(&out, &reg)?;
    profile.write(&rundir::profile_path(&out, TaskId(0)))?;
    rundir::write_file(&rundir::reports_dir(&out).join("train-base.log"), log_text(&state.log).as_bytes())?;
    let checksum = state.base_checksum().expect("frozen after training");
    Manifest::new("train-base", &cfg, vec![TaskId(0)], checksum).write(&out)?;
    println!("base checkpoint written to {}", out.display());
    Ok(())
}

fn load_state(dir: &Path, cfg: &RunConfig, tasks: &[TaskId]) -> Result<ModelState> {
    let mut state = load_checkpoint(dir, &cfg.model(), &cfg.specs()?, tasks)
        .with_context(|| format!("loading checkpoint {}", dir.display()))?;
    state.reseed(cfg.seeds.model);
    Ok(state)
}

pub fn continue_task(
    config: Option<&Path>,
    checkpoint: &Path,
    task: TaskId,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<()> {
    let manifest = Manifest::read(checkpoint)?;
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => manifest.config.clone(),
    };
    if let Some(s) = seed {
        cfg.seeds.model = s;
    }
    if task == TaskId(0) || manifest.tasks.contains(&task) || task_path(checkpoint, task).exists() {
        return Err(Error::Conflict(format!("task {task} is already trained in {}", checkpoint.display())).into());
    }
    let spec = cfg.spec(task)?;
    let loaded = manifest.continual_tasks();
    let mut state = load_state(checkpoint, &cfg, &loaded)?;
    let reg = rundir::read_axis(checkpoint)?;
    let (train, _) = cfg.data(task)?;
    eprintln!("training task {task} `{}` on {} volumes for {} epochs", spec.name, train.len(), spec.epochs);
    state.continual_step(&spec, &train, Adaptation::Lora)?;
    let profile = build_profile(task, &train, &reg)?;

    let out = out.unwrap_or_else(|| checkpoint.to_path_buf());
    let mut tasks = manifest.tasks.clone();
    if out == checkpoint {
        save_task_shard(&state, &out, task)?;
    } else {
        save_checkpoint(&state, &out)?;
        rundir::copy_profiles(checkpoint, &out, &tasks)?;
    }
    profile.write(&rundir::profile_path(&out, task))?;
    rundir::write_file(
        &rundir::reports_dir(&out).join(format!("continue-task_{task}.log")),
        log_text(&state.log).as_bytes(),
    )?;
    tasks.push(task);
    tasks.sort();
    let checksum = state.base_checksum().expect("loaded bases are frozen");
    Manifest::new("continue", &cfg, tasks, checksum).write(&out)?;
    println!("task {task} shard written to {}", task_path(&out, task).display());
    Ok(())
}

/// Reads the manifest, model, regressor and profiles of a run directory.
fn open_run(checkpoint: &Path) -> Result<(Manifest, ModelState, BodyAxisRegressor, Vec<loco_core::fusion::BodyPartProfile>)> {
    let manifest = Manifest::read(checkpoint)?;
    let state = load_state(checkpoint, &manifest.config, &manifest.continual_tasks())?;
    let reg = rundir::read_axis(checkpoint)?;
    let profiles = rundir::read_profiles(checkpoint, &manifest.tasks)?;
    Ok((manifest, state, reg, profiles))
}

/// Writes a manifest into `out` when it is a different directory from the
/// checkpoint the outputs came from.
fn note_source(manifest: &Manifest, command: &str, checkpoint: &Path, out: &Path, checksum: u64) -> Result<()> {
    if out == checkpoint {
        return Ok(());
    }
    let mut m = Manifest::new(command, &manifest.config, manifest.tasks.clone(), checksum);
    m.checkpoint = Some(checkpoint.to_path_buf());
    m.files = manifest.files.clone();
    let text = toml::to_string(&m)?;
    rundir::write_file(&out.join(rundir::MANIFEST), text.as_bytes())
}

pub fn infer(checkpoint: &Path, volume: &Path, out: Option<PathBuf>) -> Result<()> {
    let (manifest, state, reg, profiles) = open_run(checkpoint)?;
    let sample = read_volume(volume)?;
    let fused = infer_fused(&state, &sample.image, sample.spacing, Some((&profiles, &reg)))?;
    let [h, w, d] = state.config().patch_size;
    let n = h * w * d;
    let labels = Tensor::from_fn([fused.classes.len(), h, w, d], |i| f64::from(fused.masks[i / n].data[i % n]))?;
    let seg = VolumeSample {
        image: sample.image.clone(),
        labels,
        class_names: fused.classes.clone(),
        spacing: sample.spacing,
    };
    let out = out.unwrap_or_else(|| checkpoint.to_path_buf());
    let stem = volume.file_stem().map_or_else(|| "volume".into(), |s| s.to_string_lossy().into_owned());
    let path = rundir::reports_dir(&out).join(format!("{stem}.seg.lvol"));
    std::fs::create_dir_all(rundir::reports_dir(&out)).with_context(|| format!("creating {}", out.display()))?;
    write_volume(&seg, &path)?;
    note_source(&manifest, "infer", checkpoint, &out, state.base_checksum().expect("frozen"))?;
    for (c, m) in fused.classes.iter().zip(&fused.masks) {
        println!("{c:<16} {:>7} voxels", m.count());
    }
    println!("fused segmentation written to {}", path.display());
    Ok(())
}

pub fn report(checkpoint: &Path, out: Option<PathBuf>) -> Result<()> {
    let (manifest, state, reg, profiles) = open_run(checkpoint)?;
    let cfg = &manifest.config;
    let pir = compute_pir(&state);
    let cumulative = (!pir.tasks.is_empty()).then_some(pir.cumulative_percent);
    let mut per_task = Vec::new();
    let mut fused = Vec::new();
    for &t in &manifest.tasks {
        let (_, test) = cfg.data(t)?;
        per_task.push(evaluate_task(&state, t, &test)?);
        fused.push(evaluate_fused(&state, t, &test, Some((&profiles, &reg)))?);
    }
    let table = Report {
        rows: vec![
            ReportRow { method: "per-task heads".into(), datasets: per_task, pir: cumulative },
            ReportRow { method: "fused".into(), datasets: fused, pir: cumulative },
        ],
    };
    let mut text = table.to_text();
    writeln!(text, "\nbase parameters: {}", pir.base_params).unwrap();
    for b in &pir.tasks {
        writeln!(
            text,
            "task {}: {} adapter + {} head parameters ({:.4}%)",
            b.task, b.adapter_params, b.head_params, b.percent
        )
        .unwrap();
    }
    let out = out.unwrap_or_else(|| checkpoint.to_path_buf());
    let dir = rundir::reports_dir(&out);
    rundir::write_file(&dir.join("report.txt"), text.as_bytes())?;
    rundir::write_file(&dir.join("report.csv"), table.to_csv().as_bytes())?;
    note_source(&manifest, "report", checkpoint, &out, state.base_checksum().expect("frozen"))?;
    print!("{text}");
    Ok(())
}

/// Writes the held-out volumes of one task as volume files.
pub fn synth(config: &Path, task: TaskId, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config, None)?;
    let out = out.unwrap_or_else(|| cfg.out.clone()).join("volumes");
    let (_, test) = cfg.data(task)?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    for (i, s) in test.iter().enumerate() {
        let p = out.join(format!("task_{task}_{i:03}.lvol"));
        write_volume(s, &p)?;
        println!("{}", p.display());
    }
    Ok(())
}
