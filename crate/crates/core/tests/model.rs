mod common;

use common::*;
use loco_core::engine::{Adaptation, ModelState};
use loco_core::pvt::{layout, multi_head, LoraSites};
use loco_core::{reference, seed, Error, Graph, ParamGroup, ParamStore, PvtConfig, PvtModel, TaskId, Tensor};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn layout_enumeration_matches_the_built_store() {
    let cfg = PvtConfig::desk();
    let mut store = ParamStore::new();
    let mut model = PvtModel::build(&cfg, &mut store, 3).unwrap();
    model.add_task(&mut store, TaskId(0), "base", &["a".into(), "b".into()], false, 1).unwrap();
    model.add_task(&mut store, TaskId(1), "next", &["c".into()], true, 2).unwrap();
    let mut want: Vec<(String, Vec<usize>, ParamGroup)> = layout::backbone(&cfg)
        .into_iter()
        .chain(layout::head(&cfg, TaskId(0), 2))
        .chain(layout::head(&cfg, TaskId(1), 1))
        .chain(layout::adapters(&cfg, TaskId(1)))
        .map(|p| (p.name, p.shape, p.group))
        .collect();
    let mut got: Vec<(String, Vec<usize>, ParamGroup)> =
        store.iter().map(|(_, p)| (p.name.clone(), p.value.shape().to_vec(), p.group)).collect();
    want.sort_by(|a, b| a.0.cmp(&b.0));
    got.sort_by(|a, b| a.0.cmp(&b.0));
    assert_eq!(got, want);
    assert_eq!(cfg.encoder_depths.iter().sum::<usize>(), 12);
    assert_eq!(cfg.decoder_depths.iter().sum::<usize>(), 10);
    assert_eq!(model.encoder.iter().map(|s| s.layers.len()).sum::<usize>(), 12);
    assert_eq!(model.decoder.iter().map(|s| s.layers.len()).sum::<usize>(), 10);
}

#[test]
fn encoder_pyramid_divides_volume_by_eight() {
    let cfg = tiny_config();
    let mut store = ParamStore::new();
    let mut model = PvtModel::build(&cfg, &mut store, 3).unwrap();
    model.add_task(&mut store, TaskId(0), "base", &["a".into()], false, 1).unwrap();
    let mut g = Graph::frozen(&store);
    let x = g.input(Tensor::randn([1, 8, 8, 8], 1.0, &mut seed::rng(1, "x")).unwrap());
    let t = model.trace(&mut g, x, TaskId(0), true).unwrap();
    let mut prev = 8 * 8 * 8;
    for (stage, v) in t.encoder.iter().enumerate() {
        let tokens = g.tape.shape(*v)[0];
        assert_eq!(tokens * 8, prev, "stage {stage}");
        assert_eq!(g.tape.shape(*v)[1], cfg.embed_dims[stage]);
        prev = tokens;
    }
    assert_eq!(g.tape.shape(t.logits), &[1, 8, 8, 8]);
}

#[test]
fn wrong_input_shape_is_a_dimension_error() {
    let cfg = tiny_config();
    let mut st = ModelState::new(&cfg, 1).unwrap();
    st.train_base(&spec(0, 1, 0), &[sample(&cfg, 1, 1)]).unwrap();
    let bad = Tensor::zeros([1, 8, 8, 4]).unwrap();
    assert!(matches!(st.predict(&bad, TaskId(0)), Err(Error::Dimension(_))));
    assert!(matches!(st.predict(&sample(&cfg, 1, 1).image, TaskId(4)), Err(Error::MissingTask(_))));
}

#[test]
fn fresh_adapters_do_not_change_any_logit() {
    let cfg = tiny_config();
    let (mut st, data) = trained_base(&cfg, 5);
    st.register_task(&spec(1, 2, 0), Adaptation::Lora).unwrap();
    for s in &data {
        let with = st.logits(&s.image, TaskId(1)).unwrap();
        let mut g = Graph::frozen(&st.store);
        let x = g.input(s.image.clone());
        let t = st.model.trace(&mut g, x, TaskId(1), false).unwrap();
        assert!(with.bit_eq(g.tape.value(t.logits)));
    }
    let mut plain = ModelState::new(&PvtConfig { lora: { let mut l = cfg.lora.clone(); l.sites = LoraSites::none(); l }, ..cfg.clone() }, 5).unwrap();
    plain.train_base(&spec(0, 2, 1), &data).unwrap();
    plain.register_task(&spec(1, 2, 0), Adaptation::Lora).unwrap();
    assert_eq!(plain.store.count(|g| g == ParamGroup::Adapter(TaskId(1))), 0);
    for s in &data {
        assert!(plain.logits(&s.image, TaskId(1)).unwrap().bit_eq(&st.logits(&s.image, TaskId(1)).unwrap()));
    }
}

#[test]
fn end_to_end_lora_gradients_match_finite_differences() {
    let cfg = tiny_config();
    let (mut st, _data) = trained_base(&cfg, 9);
    st.register_task(&spec(1, 2, 0), Adaptation::Lora).unwrap();
    let ids = st.task_params(TaskId(1));
    let mut rng = seed::rng(9, "b");
    for &id in &ids {
        if st.store.get(id).name.contains(".lora_b.") {
            let shape = st.store.value(id).shape().to_vec();
            st.store.update(id, Tensor::randn(shape, 0.05, &mut rng).unwrap()).unwrap();
        }
    }
    let adapters: Vec<_> = ids.iter().copied().filter(|&id| st.store.get(id).name.contains(".lora_")).collect();
    let convs: Vec<_> = adapters.iter().copied().filter(|&id| {
        let n = &st.store.get(id).name;
        n.contains(".pe.") || n.starts_with("final.conv")
    }).collect();
    let linears: Vec<_> = adapters.iter().copied().filter(|id| !convs.contains(id)).collect();
    assert!(!convs.is_empty() && !linears.is_empty());
    let mut picks = Vec::new();
    for k in 0..12 {
        let pool = if k % 3 == 0 { &convs } else { &linears };
        let id = pool[rng.random_range(0..pool.len())];
        picks.push((id, rng.random_range(0..st.store.value(id).numel())));
    }
    let s = sample(&cfg, 2, 77);
    for (a, n) in reference::model_gradient_pairs(&st, &s, TaskId(1), &picks, 1e-5).unwrap() {
        assert!(reference::rel_err(a, n, 1e-7) < 1e-3, "{a} vs {n}");
    }
}

#[test]
fn invalid_configs_name_their_invariant() {
    let mut cfg = tiny_config();
    cfg.heads = vec![3, 1, 1];
    let err = ModelState::new(&cfg, 0).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    let mut cfg = tiny_config();
    cfg.patch_size = [8, 8, 6];
    assert!(matches!(ModelState::new(&cfg, 0), Err(Error::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn multi_head_matches_per_head_loops(s in any::<u64>(), heads in 1usize..4, nq in 1usize..6, nk in 1usize..6) {
        let c = heads * 3;
        let q = Tensor::randn([nq, c], 1.0, &mut seed::rng(s, "q")).unwrap();
        let k = Tensor::randn([nk, c], 1.0, &mut seed::rng(s, "k")).unwrap();
        let v = Tensor::randn([nk, c], 1.0, &mut seed::rng(s, "v")).unwrap();
        let store = ParamStore::new();
        let mut g = Graph::frozen(&store);
        let (qv, kv, vv) = (g.input(q.clone()), g.input(k.clone()), g.input(v.clone()));
        let out = multi_head(&mut g, qv, kv, vv, heads).unwrap();
        let want = reference::attention(&q, &k, &v, heads).unwrap();
        prop_assert!(g.tape.value(out).max_abs_diff(&want) < 1e-12);
    }
}
