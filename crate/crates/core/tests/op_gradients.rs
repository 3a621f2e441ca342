use loco_core::autodiff::{Conv3dGeom, Tape, Var};
use loco_core::reference::{self, op_gradient_error};
use loco_core::{seed, Result, Tensor};
use proptest::prelude::*;

const TOL: f64 = 1e-4;

fn randn(shape: &[usize], s: u64, label: &str) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, &mut seed::rng(s, label)).unwrap()
}

fn check(inputs: &[Tensor], s: u64, op: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
    let err = op_gradient_error(inputs, op, s).unwrap();
    assert!(err < TOL, "relative gradient error {err:e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn matmul_family(s in any::<u64>()) {
        let a = randn(&[3, 4], s, "a");
        let b = randn(&[4, 2], s, "b");
        let c = randn(&[5, 4], s, "c");
        check(&[a.clone(), b], s, |t, v| t.matmul(v[0], v[1]));
        check(&[a.clone(), c], s, |t, v| t.matmul_nt(v[0], v[1]));
        check(&[a], s, |t, v| t.transpose(v[0]));
    }

    #[test]
    fn elementwise(s in any::<u64>()) {
        let a = randn(&[2, 3], s, "a");
        let b = randn(&[2, 3], s, "b");
        check(&[a.clone(), b.clone()], s, |t, v| t.add(v[0], v[1]));
        check(&[a.clone(), b.clone()], s, |t, v| t.sub(v[0], v[1]));
        check(&[a.clone(), b], s, |t, v| t.mul(v[0], v[1]));
        check(std::slice::from_ref(&a), s, |t, v| Ok(t.scale(v[0], -1.7)));
        check(std::slice::from_ref(&a), s, |t, v| Ok(t.gelu(v[0])));
        check(&[a], s, |t, v| Ok(t.sigmoid(v[0])));
    }

    #[test]
    fn reductions_and_layout(s in any::<u64>()) {
        let a = randn(&[2, 3, 4], s, "a");
        let bias = randn(&[3], s, "bias");
        check(std::slice::from_ref(&a), s, |t, v| Ok(t.sum(v[0])));
        check(std::slice::from_ref(&a), s, |t, v| Ok(t.mean(v[0])));
        check(std::slice::from_ref(&a), s, |t, v| t.reshape(v[0], &[6, 4]));
        check(std::slice::from_ref(&a), s, |t, v| t.permute(v[0], &[2, 0, 1]));
        check(std::slice::from_ref(&a), s, |t, v| t.slice(v[0], 2, 1, 2));
        check(&[a.clone(), a.clone()], s, |t, v| t.concat(&[v[0], v[1]], 1));
        check(&[a, bias], s, |t, v| t.add_bias(v[0], v[1], 1));
    }

    #[test]
    fn normalizers(s in any::<u64>()) {
        let x = randn(&[4, 6], s, "x");
        let g = randn(&[6], s, "g");
        let b = randn(&[6], s, "b");
        check(std::slice::from_ref(&x), s, |t, v| t.softmax(v[0], 1));
        check(std::slice::from_ref(&x), s, |t, v| t.softmax(v[0], 0));
        check(&[x, g, b], s, |t, v| t.layernorm(v[0], v[1], v[2], 1e-6));
    }

    #[test]
    fn convolutions(s in any::<u64>()) {
        let x = randn(&[2, 4, 3, 5], s, "x");
        let k = randn(&[3, 2, 3, 3, 3], s, "k");
        check(&[x.clone(), k.clone()], s, |t, v| t.conv3d(v[0], v[1], Conv3dGeom::uniform(1, 1)));
        check(&[x.clone(), k], s, |t, v| t.conv3d(v[0], v[1], Conv3dGeom::uniform(2, 1)));
        let up = randn(&[2, 3, 2, 2, 2], s, "up");
        check(&[x.clone(), up], s, |t, v| t.deconv3d(v[0], v[1], 2));
        let dw = randn(&[2, 1, 3, 3, 3], s, "dw");
        check(&[x, dw], s, |t, v| t.depthwise_conv3d(v[0], v[1], 1));
    }

    #[test]
    fn segmentation_loss(s in any::<u64>()) {
        let z = randn(&[2, 3, 2, 2], s, "z");
        let target = Tensor::from_fn([2, 3, 2, 2], |i| f64::from(seed::derive(s, &format!("t{i}")) % 2 == 0)).unwrap();
        check(&[z], s, |t, v| t.seg_loss(v[0], &target, 1.0));
    }

    #[test]
    fn conv_matches_direct_loops(s in any::<u64>(), stride in 1usize..3, pad in 0usize..2) {
        let x = randn(&[2, 5, 4, 3], s, "x");
        let k = randn(&[3, 2, 3, 2, 3], s, "k");
        let geom = Conv3dGeom::uniform(stride, pad);
        let mut t = Tape::new();
        let (xv, kv) = (t.constant(x.clone()), t.constant(k.clone()));
        let y = t.conv3d(xv, kv, geom).unwrap();
        let want = reference::conv3d(&x, &k, geom).unwrap();
        prop_assert!(t.value(y).max_abs_diff(&want) < 1e-12);

        let up = randn(&[2, 3, 2, 3, 2], s, "up");
        let uv = t.constant(up.clone());
        let d = t.deconv3d(xv, uv, stride).unwrap();
        prop_assert!(t.value(d).max_abs_diff(&reference::deconv3d(&x, &up, stride).unwrap()) < 1e-12);

        let dw = randn(&[2, 1, 3, 3, 3], s, "dw");
        let dv = t.constant(dw.clone());
        let z = t.depthwise_conv3d(xv, dv, 1).unwrap();
        prop_assert!(t.value(z).max_abs_diff(&reference::depthwise3d(&x, &dw, 1).unwrap()) < 1e-12);
    }

    #[test]
    fn softmax_rows_are_stochastic(s in any::<u64>(), scale in 0.1f64..50.0) {
        let x = Tensor::randn(vec![7, 9], scale, &mut seed::rng(s, "x")).unwrap();
        let mut t = Tape::new();
        let xv = t.constant(x);
        let p = t.softmax(xv, 1).unwrap();
        for row in t.value(p).data().chunks(9) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
