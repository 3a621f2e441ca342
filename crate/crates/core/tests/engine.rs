mod common;

use common::*;
use loco_core::engine::checkpoint::{base_path, decode_shard, encode_shard, task_path};
use loco_core::engine::{compute_pir, layout_pir, load_checkpoint, loss, save_checkpoint, Adaptation, ModelState};
use loco_core::{CheckpointError, Error, Graph, ParamGroup, ParamStore, TaskId, Tensor};

fn snapshot(st: &ModelState, data: &[loco_core::synth::VolumeSample], task: TaskId) -> Vec<Tensor> {
    data.iter().map(|s| st.logits(&s.image, task).unwrap()).collect()
}

fn same(a: &[Tensor], b: &[Tensor]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.bit_eq(y))
}

#[test]
fn continual_steps_leave_earlier_tasks_bitwise_intact() {
    let cfg = tiny_config();
    let (mut st, data) = trained_base(&cfg, 2);
    let before = snapshot(&st, &data, TaskId(0));
    let checksum = st.base_checksum().unwrap();
    st.continual_step(&spec(1, 1, 1), &[sample(&cfg, 1, 7)], Adaptation::Lora).unwrap();
    let t1 = snapshot(&st, &data, TaskId(1));
    st.continual_step(&spec(2, 2, 1), &[sample(&cfg, 2, 8)], Adaptation::HeadOnly).unwrap();
    assert!(same(&before, &snapshot(&st, &data, TaskId(0))));
    assert!(same(&t1, &snapshot(&st, &data, TaskId(1))));
    assert_eq!(st.base_checksum(), Some(checksum));
    st.verify_base().unwrap();
}

#[test]
fn task_parameters_are_exactly_its_adapters_and_head() {
    let cfg = tiny_config();
    let (mut st, _) = trained_base(&cfg, 2);
    st.register_task(&spec(1, 1, 0), Adaptation::Lora).unwrap();
    let owned = st.task_params(TaskId(1));
    let expect = st
        .store
        .ids_in(|g| g == ParamGroup::Adapter(TaskId(1)) || g == ParamGroup::Head(TaskId(1)));
    assert_eq!(owned, expect);
    for id in &owned {
        let name = &st.store.get(*id).name;
        assert!(name.ends_with(".t1") || name.starts_with("head.t1"), "{name}");
    }
    assert!(owned.iter().all(|id| !st.store.get(*id).name.contains(".t0")));
}

#[test]
fn training_order_does_not_change_task_outputs() {
    let cfg = tiny_config();
    let (base, data) = trained_base(&cfg, 4);
    let (s1, s2) = (spec(1, 1, 2), spec(2, 2, 2));
    let (d1, d2) = ([sample(&cfg, 1, 11)], [sample(&cfg, 2, 12)]);
    let mut a = base.clone();
    a.continual_step(&s1, &d1, Adaptation::Lora).unwrap();
    a.continual_step(&s2, &d2, Adaptation::Lora).unwrap();
    let mut b = base;
    b.continual_step(&s2, &d2, Adaptation::Lora).unwrap();
    b.continual_step(&s1, &d1, Adaptation::Lora).unwrap();
    for t in [TaskId(1), TaskId(2)] {
        assert!(same(&snapshot(&a, &data, t), &snapshot(&b, &data, t)));
    }
}

#[test]
fn fixed_seeds_reproduce_the_loss_sequence() {
    let cfg = tiny_config();
    let (a, _) = trained_base(&cfg, 6);
    let (b, _) = trained_base(&cfg, 6);
    let bits = |s: &ModelState| s.log.iter().map(|l| l.mean_loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.base_checksum(), b.base_checksum());
}

#[test]
fn loss_vanishes_at_a_perfect_prediction() {
    let target = Tensor::from_fn([2, 3, 3, 3], |i| f64::from(i % 3 == 0)).unwrap();
    let logits = target.map(|t| if t > 0.5 { 40.0 } else { -40.0 });
    let store = ParamStore::new();
    let mut g = Graph::frozen(&store);
    let z = g.input(logits);
    let l = loss(&mut g, z, &target).unwrap();
    assert!(g.tape.value(l).item().unwrap() < 1e-6);
    let z = g.input(Tensor::zeros([2, 3, 3, 3]).unwrap());
    assert!(matches!(loss(&mut g, z, &Tensor::zeros([1, 3, 3, 3]).unwrap()), Err(Error::Dimension(_))));
}

#[test]
fn parameter_ledger_adds_up() {
    let cfg = tiny_config();
    let (mut st, _) = trained_base(&cfg, 3);
    let empty = compute_pir(&st);
    assert_eq!(empty.cumulative_percent, 0.0);
    st.register_task(&spec(1, 2, 0), Adaptation::Lora).unwrap();
    st.register_task(&spec(2, 2, 0), Adaptation::Lora).unwrap();
    let pir = compute_pir(&st);
    let from_layout = layout_pir(&cfg, &[(TaskId(0), 2), (TaskId(1), 2), (TaskId(2), 2)]);
    assert_eq!(pir, from_layout);
    assert_eq!(pir.cumulative_percent, pir.tasks.iter().map(|t| t.percent).sum::<f64>());
    assert!((pir.cumulative_percent - 2.0 * pir.tasks[0].percent).abs() < 1e-12);
    assert_eq!(pir.base_params + pir.added_params(), st.store.iter().map(|(_, p)| p.value.numel()).sum::<usize>());
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let cfg = tiny_config();
    let (mut st, data) = trained_base(&cfg, 8);
    st.continual_step(&spec(1, 1, 1), &[sample(&cfg, 1, 3)], Adaptation::Lora).unwrap();
    st.continual_step(&spec(2, 2, 1), &[sample(&cfg, 2, 4)], Adaptation::HeadOnly).unwrap();
    let specs = [spec(0, 2, 1), spec(1, 1, 1), spec(2, 2, 1)];
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&st, dir.path()).unwrap();
    let loaded = load_checkpoint(dir.path(), &cfg, &specs, &[TaskId(1), TaskId(2)]).unwrap();
    let again = tempfile::tempdir().unwrap();
    save_checkpoint(&loaded, again.path()).unwrap();
    for name in ["base.loco", "task_1.loco", "task_2.loco"] {
        let a = std::fs::read(dir.path().join(name)).unwrap();
        let b = std::fs::read(again.path().join(name)).unwrap();
        assert_eq!(a, b, "{name}");
    }
    for t in [TaskId(0), TaskId(1), TaskId(2)] {
        assert!(same(&snapshot(&st, &data, t), &snapshot(&loaded, &data, t)));
    }

    let subset = load_checkpoint(dir.path(), &cfg, &specs, &[TaskId(2)]).unwrap();
    assert_eq!(subset.tasks().collect::<Vec<_>>(), vec![TaskId(0), TaskId(2)]);
    assert!(same(&snapshot(&st, &data, TaskId(2)), &snapshot(&subset, &data, TaskId(2))));
    assert!(matches!(subset.logits(&data[0].image, TaskId(1)), Err(Error::MissingTask(_))));
    assert!(subset.store.trainable_ids().is_empty());
}

#[test]
fn damaged_checkpoints_fail_with_distinct_errors() {
    let cfg = tiny_config();
    let (mut st, _) = trained_base(&cfg, 8);
    st.continual_step(&spec(1, 1, 1), &[sample(&cfg, 1, 3)], Adaptation::Lora).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&st, dir.path()).unwrap();
    let bytes = std::fs::read(task_path(dir.path(), TaskId(1))).unwrap();

    let mut flipped = bytes.clone();
    flipped[40] ^= 1;
    assert!(matches!(decode_shard(&flipped), Err(CheckpointError::ChecksumMismatch { .. })));
    let mut version = bytes.clone();
    version[4] = 9;
    assert!(matches!(decode_shard(&version), Err(CheckpointError::VersionMismatch { .. })));
    assert!(matches!(decode_shard(&bytes[..6]), Err(CheckpointError::Truncated(_))));
    assert!(matches!(decode_shard(b"NOPE0000"), Err(CheckpointError::BadMagic { .. })));

    let mut other = decode_shard(&bytes).unwrap();
    other.base_checksum ^= 1;
    std::fs::write(task_path(dir.path(), TaskId(1)), encode_shard(&other)).unwrap();
    let specs = [spec(0, 2, 1), spec(1, 1, 1)];
    let err = load_checkpoint(dir.path(), &cfg, &specs, &[TaskId(1)]).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(CheckpointError::BaseMismatch { .. })), "{err}");
    assert!(base_path(dir.path()).exists());
}
