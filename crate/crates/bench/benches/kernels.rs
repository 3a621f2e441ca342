use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use loco_bench::{ball, desk_sample, desk_state, randn};
use loco_core::metrics::hd95;
use loco_core::{Conv3dGeom, Tape, TaskId};

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [64, 256, 512] {
        let a = randn(&[n, 64], "a");
        let b = randn(&[64, n], "b");
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut t = Tape::new();
                let (x, y) = (t.leaf(a.clone(), true), t.leaf(b.clone(), true));
                let z = t.matmul(x, y).unwrap();
                let s = t.sum(z);
                t.backward(s).unwrap();
            })
        });
    }
    g.finish();
}

fn conv3d(c: &mut Criterion) {
    let x = randn(&[16, 16, 16, 8], "x");
    let w = randn(&[32, 16, 3, 3, 3], "w");
    c.bench_function("conv3d forward+backward 16->32 @16x16x8", |bench| {
        bench.iter(|| {
            let mut t = Tape::new();
            let (xv, wv) = (t.leaf(x.clone(), true), t.leaf(w.clone(), true));
            let y = t.conv3d(xv, wv, Conv3dGeom::uniform(2, 1)).unwrap();
            let s = t.sum(y);
            t.backward(s).unwrap();
        })
    });
}

fn metrics(c: &mut Criterion) {
    let shape = [32, 32, 16];
    let a = ball(shape, [15.0, 15.0, 7.0], 6.0);
    let b = ball(shape, [17.0, 14.0, 8.0], 5.0);
    c.bench_function("hd95 32x32x16", |bench| bench.iter(|| hd95(&a, &b, [1.0, 1.0, 2.0]).unwrap()));
}

fn model(c: &mut Criterion) {
    let st = desk_state();
    let sample = desk_sample();
    let mut g = c.benchmark_group("desk model");
    g.sample_size(10);
    g.bench_function("forward", |bench| bench.iter(|| st.logits(&sample.image, TaskId(1)).unwrap()));
    g.bench_function("loss and adapter gradients", |bench| {
        let mut st = st.clone();
        for id in st.task_params(TaskId(1)) {
            st.store.set_trainable(id, true);
        }
        bench.iter(|| st.loss_and_grads(&sample, TaskId(1)).unwrap())
    });
    g.finish();
}

criterion_group!(benches, matmul, conv3d, metrics, model);
criterion_main!(benches);
