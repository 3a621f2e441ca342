use loco_core::autodiff::Conv3dGeom;
use loco_core::reference;
use loco_core::{seed, Graph, LoraConv3d, LoraLinear, ParamStore, TaskId, Tensor};
use proptest::prelude::*;

const T: TaskId = TaskId(1);

fn randomize_b(store: &mut ParamStore, id: loco_core::ParamId, s: u64) {
    let shape = store.value(id).shape().to_vec();
    store.update(id, Tensor::randn(shape, 0.3, &mut seed::rng(s, "b")).unwrap()).unwrap();
}

fn linear_out(store: &ParamStore, layer: &LoraLinear, x: &Tensor, task: Option<TaskId>) -> Tensor {
    let mut g = Graph::frozen(store);
    let xv = g.input(x.clone());
    let y = layer.forward(&mut g, xv, task).unwrap();
    g.tape.value(y).clone()
}

fn conv_out(store: &ParamStore, layer: &LoraConv3d, x: &Tensor, task: Option<TaskId>) -> Tensor {
    let mut g = Graph::frozen(store);
    let xv = g.input(x.clone());
    let y = layer.forward(&mut g, xv, task).unwrap();
    g.tape.value(y).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn linear_zero_b_is_identity(s in any::<u64>(), c in 2usize..12, d in 2usize..12, n in 1usize..6) {
        let mut store = ParamStore::new();
        let mut layer = LoraLinear::new(&mut store, "l", c, d, true, &mut seed::rng(s, "w")).unwrap();
        let x = Tensor::randn([n, c], 1.0, &mut seed::rng(s, "x")).unwrap();
        let before = linear_out(&store, &layer, &x, None);
        let r = layer.max_rank().max(1);
        if layer.max_rank() == 0 {
            return Ok(());
        }
        layer.add_task_adapter(&mut store, T, r, r as f64 / 2.0, 0.02, s).unwrap();
        prop_assert!(linear_out(&store, &layer, &x, Some(T)).bit_eq(&before));
    }

    #[test]
    fn linear_unmerged_equals_merged(s in any::<u64>(), c in 2usize..12, d in 2usize..12, n in 1usize..6) {
        let mut store = ParamStore::new();
        let mut layer = LoraLinear::new(&mut store, "l", c, d, true, &mut seed::rng(s, "w")).unwrap();
        prop_assume!(layer.max_rank() > 0);
        let r = layer.max_rank();
        layer.add_task_adapter(&mut store, T, r, 3.0, 0.5, s).unwrap();
        randomize_b(&mut store, layer.adapter(T).unwrap().b, s);
        let x = Tensor::randn([n, c], 1.0, &mut seed::rng(s, "x")).unwrap();
        let w = layer.merged_weight(&store, T).unwrap();
        let bias = store.value(layer.bias.unwrap()).clone();
        let want = Tensor::from_fn([n, d], |i| {
            let (row, col) = (i / d, i % d);
            (0..c).map(|k| x.data()[row * c + k] * w.data()[col * c + k]).sum::<f64>() + bias.data()[col]
        }).unwrap();
        prop_assert!(linear_out(&store, &layer, &x, Some(T)).max_abs_diff(&want) < 1e-10);
    }

    #[test]
    fn delta_scales_linearly_with_alpha(s in any::<u64>(), k in 1.0f64..5.0) {
        let mut store = ParamStore::new();
        let mut layer = LoraLinear::new(&mut store, "l", 8, 6, false, &mut seed::rng(s, "w")).unwrap();
        layer.add_task_adapter(&mut store, T, 2, 1.0, 0.5, s).unwrap();
        randomize_b(&mut store, layer.adapter(T).unwrap().b, s);
        let x = Tensor::randn([3, 8], 1.0, &mut seed::rng(s, "x")).unwrap();
        let base = linear_out(&store, &layer, &x, None);
        let d1 = linear_out(&store, &layer, &x, Some(T));
        layer.adapters.get_mut(&T).unwrap().alpha = k;
        let dk = linear_out(&store, &layer, &x, Some(T));
        for ((b, y1), yk) in base.data().iter().zip(d1.data()).zip(dk.data()) {
            prop_assert!(((yk - b) - k * (y1 - b)).abs() < 1e-10);
        }
    }

    #[test]
    fn conv_unmerged_equals_merged(
        s in any::<u64>(),
        c in 1usize..5,
        d in 1usize..5,
        k in 1usize..4,
        stride in 1usize..3,
    ) {
        let mut store = ParamStore::new();
        let geom = Conv3dGeom::uniform(stride, k / 2);
        let mut layer = LoraConv3d::new(&mut store, "conv", c, d, k, geom, true, &mut seed::rng(s, "w")).unwrap();
        let r = layer.max_rank();
        layer.add_task_adapter(&mut store, T, r, 1.5, 0.5, s).unwrap();
        let p = layer.adapter(T).unwrap().clone();
        prop_assert_eq!(store.value(p.b).shape(), &[d * k * k, r * k][..]);
        prop_assert_eq!(store.value(p.a).shape(), &[r * k, c * k][..]);
        randomize_b(&mut store, p.b, s);
        store.update(layer.bias.unwrap(), Tensor::randn([d], 1.0, &mut seed::rng(s, "bias")).unwrap()).unwrap();
        let x = Tensor::randn([c, 5, 4, 6], 1.0, &mut seed::rng(s, "x")).unwrap();
        let merged = layer.merged_kernel(&store, T).unwrap();
        let mut want = reference::conv3d(&x, &merged, geom).unwrap();
        let bias = store.value(layer.bias.unwrap()).clone();
        let per = want.numel() / d;
        for (i, v) in want.data_mut().iter_mut().enumerate() {
            *v += bias.data()[i / per];
        }
        prop_assert!(conv_out(&store, &layer, &x, Some(T)).max_abs_diff(&want) < 1e-10);
    }

    #[test]
    fn conv_zero_b_is_identity(s in any::<u64>(), c in 1usize..5, d in 1usize..5) {
        let mut store = ParamStore::new();
        let geom = Conv3dGeom::uniform(1, 1);
        let mut layer = LoraConv3d::new(&mut store, "conv", c, d, 3, geom, true, &mut seed::rng(s, "w")).unwrap();
        let x = Tensor::randn([c, 4, 4, 4], 1.0, &mut seed::rng(s, "x")).unwrap();
        let before = conv_out(&store, &layer, &x, None);
        layer.add_task_adapter(&mut store, T, layer.max_rank(), 1.0, 0.02, s).unwrap();
        prop_assert!(conv_out(&store, &layer, &x, Some(T)).bit_eq(&before));
    }
}

#[test]
fn conv_rank_above_limit_is_rejected() {
    let mut store = ParamStore::new();
    let mut layer = LoraConv3d::new(&mut store, "conv", 4, 4, 3, Conv3dGeom::uniform(1, 1), false, &mut seed::rng(0, "w")).unwrap();
    assert_eq!(layer.max_rank(), 2);
    assert!(matches!(
        layer.add_task_adapter(&mut store, T, 3, 1.5, 0.02, 0),
        Err(loco_core::Error::Config(_))
    ));
}
