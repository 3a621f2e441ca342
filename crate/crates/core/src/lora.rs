//! Low-rank adapters for linear and 3D convolution layers.
//!
//! A linear layer maps row tokens `X[N×c]` to `X·W0ᵀ + b`, and an adapter for
//! task `t` adds `(α/r)·(X·Aᵀ)·Bᵀ` with `A[r×c]`, `B[d×r]`. A conv adapter uses
//! `B[dk²×rk]` and `A[rk×ck]`; their product is reshaped to a `[d,c,k,k,k]`
//! kernel and convolved alongside the frozen kernel.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Conv3dGeom, Var};
use crate::error::{Error, Result};
use crate::params::{Graph, ParamGroup, ParamId, ParamStore, TaskId};
use crate::tensor::Tensor;

pub const DEFAULT_A_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SiteKind {
    Linear,
    Conv3d,
}

#[derive(Clone, Debug)]
pub struct LoraPair {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
    pub task: TaskId,
    pub kind: SiteKind,
}

impl LoraPair {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

fn check_rank(rank: usize, alpha: f64, layer: &str) -> Result<()> {
    if rank == 0 {
        return Err(Error::Config(format!("adapter rank on `{layer}` must be positive")));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::Config(format!("adapter alpha on `{layer}` must be positive, got {alpha}")));
    }
    Ok(())
}

fn insert_pair(
    store: &mut ParamStore,
    layer: &str,
    task: TaskId,
    a_shape: [usize; 2],
    b_shape: [usize; 2],
    a_std: f64,
    seed: u64,
) -> Result<(ParamId, ParamId)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Tensor::randn(a_shape, a_std, &mut rng)?;
    let b = Tensor::zeros(b_shape)?;
    let group = ParamGroup::Adapter(task);
    let a = store.insert(format!("{layer}.lora_a.t{task}"), a, group)?;
    let b = store.insert(format!("{layer}.lora_b.t{task}"), b, group)?;
    Ok((a, b))
}

/// Linear layer `[N×c] → [N×d]` with optional per-task adapters.
#[derive(Clone, Debug)]
pub struct LoraLinear {
    pub name: String,
    pub w0: ParamId,
    pub bias: Option<ParamId>,
    pub d: usize,
    pub c: usize,
    pub adapters: BTreeMap<TaskId, LoraPair>,
}

impl LoraLinear {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, d: usize, bias: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        let w = Tensor::randn([d, c], 1.0 / (c as f64).sqrt(), rng)?;
        let w0 = store.insert(format!("{name}.weight"), w, ParamGroup::Base)?;
        let bias = if bias {
            Some(store.insert(format!("{name}.bias"), Tensor::zeros([d])?, ParamGroup::Base)?)
        } else {
            None
        };
        Ok(Self {
            name: name.to_string(),
            w0,
            bias,
            d,
            c,
            adapters: BTreeMap::new(),
        })
    }

    /// Largest rank the low-rank constraint permits on this layer.
    pub fn max_rank(&self) -> usize {
        self.d.min(self.c) / 2
    }

    pub fn add_task_adapter(
        &mut self,
        store: &mut ParamStore,
        task: TaskId,
        rank: usize,
        alpha: f64,
        a_std: f64,
        seed: u64,
    ) -> Result<()> {
        check_rank(rank, alpha, &self.name)?;
        if rank > self.max_rank() {
            return Err(Error::Config(format!(
                "rank {rank} on `{}` exceeds min(d, c)/2 = {}",
                self.name,
                self.max_rank()
            )));
        }
        if self.adapters.contains_key(&task) {
            return Err(Error::Conflict(format!("layer `{}` already has an adapter for task {task}", self.name)));
        }
        let (a, b) = insert_pair(store, &self.name, task, [rank, self.c], [self.d, rank], a_std, seed)?;
        self.adapters.insert(task, LoraPair { a, b, rank, alpha, task, kind: SiteKind::Linear });
        Ok(())
    }

    pub fn adapter(&self, task: TaskId) -> Result<&LoraPair> {
        self.adapters.get(&task).ok_or_else(|| Error::MissingAdapter(task, self.name.clone()))
    }

    /// Forward over row tokens. `task = None` evaluates the frozen path only.
    pub fn forward(&self, g: &mut Graph, x: Var, task: Option<TaskId>) -> Result<Var> {
        let pair = task.map(|t| self.adapter(t)).transpose()?;
        let w0 = g.param(self.w0);
        let mut y = g.tape.matmul_nt(x, w0)?;
        if let Some(b) = self.bias {
            let b = g.param(b);
            y = g.tape.add_bias(y, b, 1)?;
        }
        if let Some(p) = pair {
            let a = g.param(p.a);
            let b = g.param(p.b);
            let ax = g.tape.matmul_nt(x, a)?;
            let bax = g.tape.matmul_nt(ax, b)?;
            let delta = g.tape.scale(bax, p.scale());
            y = g.tape.add(y, delta)?;
        }
        Ok(y)
    }

    /// `W0 + (α/r)·B·A`, for inference or comparison.
    pub fn merged_weight(&self, store: &ParamStore, task: TaskId) -> Result<Tensor> {
        let p = self.adapter(task)?;
        let ba = matmul(store.value(p.b), store.value(p.a));
        let s = p.scale();
        let w0 = store.value(self.w0);
        Tensor::new([self.d, self.c], w0.data().iter().zip(&ba).map(|(w, d)| w + s * d).collect())
    }

    pub fn adapter_param_count(&self, task: TaskId) -> Option<usize> {
        self.adapters.get(&task).map(|p| p.rank * (self.d + self.c))
    }
}

/// 3D convolution `[c, S…] → [d, S'…]` with a cubic kernel of side `k`.
#[derive(Clone, Debug)]
pub struct LoraConv3d {
    pub name: String,
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
    pub d: usize,
    pub c: usize,
    pub k: usize,
    pub geom: Conv3dGeom,
    pub adapters: BTreeMap<TaskId, LoraPair>,
}

impl LoraConv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c: usize,
        d: usize,
        k: usize,
        geom: Conv3dGeom,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let fan_in = c * k * k * k;
        let w = Tensor::randn([d, c, k, k, k], (2.0 / fan_in as f64).sqrt(), rng)?;
        let kernel = store.insert(format!("{name}.weight"), w, ParamGroup::Base)?;
        let bias = if bias {
            Some(store.insert(format!("{name}.bias"), Tensor::zeros([d])?, ParamGroup::Base)?)
        } else {
            None
        };
        Ok(Self {
            name: name.to_string(),
            kernel,
            bias,
            d,
            c,
            k,
            geom,
            adapters: BTreeMap::new(),
        })
    }

    /// Largest rank for which `B·A` stays rank deficient, never below 1.
    pub fn max_rank(&self) -> usize {
        ((self.d * self.k).min(self.c) / 2).max(1)
    }

    pub fn add_task_adapter(
        &mut self,
        store: &mut ParamStore,
        task: TaskId,
        rank: usize,
        alpha: f64,
        a_std: f64,
        seed: u64,
    ) -> Result<()> {
        check_rank(rank, alpha, &self.name)?;
        if rank > self.max_rank() {
            return Err(Error::Config(format!(
                "rank {rank} on `{}` exceeds max(1, min(d·k, c)/2) = {}",
                self.name,
                self.max_rank()
            )));
        }
        if self.adapters.contains_key(&task) {
            return Err(Error::Conflict(format!("layer `{}` already has an adapter for task {task}", self.name)));
        }
        let (d, c, k) = (self.d, self.c, self.k);
        let (a, b) = insert_pair(store, &self.name, task, [rank * k, c * k], [d * k * k, rank * k], a_std, seed)?;
        self.adapters.insert(task, LoraPair { a, b, rank, alpha, task, kind: SiteKind::Conv3d });
        Ok(())
    }

    pub fn adapter(&self, task: TaskId) -> Result<&LoraPair> {
        self.adapters.get(&task).ok_or_else(|| Error::MissingAdapter(task, self.name.clone()))
    }

    pub fn forward(&self, g: &mut Graph, x: Var, task: Option<TaskId>) -> Result<Var> {
        let pair = task.map(|t| self.adapter(t)).transpose()?;
        let w = g.param(self.kernel);
        let mut y = g.tape.conv3d(x, w, self.geom)?;
        if let Some(p) = pair {
            let a = g.param(p.a);
            let b = g.param(p.b);
            let ba = g.tape.matmul(b, a)?;
            let k = self.k;
            let r = g.tape.reshape(ba, &[self.d, k, k, self.c, k])?;
            let delta_kernel = g.tape.permute(r, &[0, 3, 1, 2, 4])?;
            let delta = g.tape.conv3d(x, delta_kernel, self.geom)?;
            let delta = g.tape.scale(delta, p.scale());
            y = g.tape.add(y, delta)?;
        }
        if let Some(b) = self.bias {
            let b = g.param(b);
            y = g.tape.add_bias(y, b, 0)?;
        }
        Ok(y)
    }

    /// The `[d,c,k,k,k]` kernel obtained from `B·A`.
    pub fn delta_kernel(&self, store: &ParamStore, task: TaskId) -> Result<Tensor> {
        let p = self.adapter(task)?;
        let (d, c, k) = (self.d, self.c, self.k);
        let ba = matmul(store.value(p.b), store.value(p.a));
        let mut out = vec![0.0; d * c * k * k * k];
        for di in 0..d {
            for ka in 0..k {
                for kb in 0..k {
                    for ci in 0..c {
                        for kc in 0..k {
                            let row = di * k * k + ka * k + kb;
                            let col = ci * k + kc;
                            let dst = (((di * c + ci) * k + ka) * k + kb) * k + kc;
                            out[dst] = ba[row * c * k + col];
                        }
                    }
                }
            }
        }
        Tensor::new([d, c, k, k, k], out)
    }

    /// `δ0 + (α/r)·reshape(B·A)`.
    pub fn merged_kernel(&self, store: &ParamStore, task: TaskId) -> Result<Tensor> {
        let s = self.adapter(task)?.scale();
        let delta = self.delta_kernel(store, task)?;
        let base = store.value(self.kernel);
        Tensor::new(base.shape().to_vec(), base.data().iter().zip(delta.data()).map(|(w, d)| w + s * d).collect())
    }

    pub fn adapter_param_count(&self, task: TaskId) -> Option<usize> {
        let (d, c, k) = (self.d, self.c, self.k);
        self.adapters
            .get(&task)
            .map(|p| (d * k * k) * (p.rank * k) + (p.rank * k) * (c * k))
    }
}

fn matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    crate::linalg::matmul_new(m, k, n, a.data(), crate::linalg::View::Normal, b.data(), crate::linalg::View::Normal)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    #[test]
    fn hand_evaluated_linear_adapter() {
        let mut s = ParamStore::new();
        let mut l = LoraLinear::new(&mut s, "l", 2, 2, false, &mut rng()).unwrap();
        s.update(l.w0, Tensor::eye(2).unwrap()).unwrap();
        l.add_task_adapter(&mut s, TaskId(1), 1, 1.0, DEFAULT_A_STD, 0).unwrap();
        let p = l.adapter(TaskId(1)).unwrap().clone();
        s.update(p.b, Tensor::new([2, 1], vec![1.0, 0.0]).unwrap()).unwrap();
        s.update(p.a, Tensor::new([1, 2], vec![0.0, 1.0]).unwrap()).unwrap();
        let mut g = Graph::new(&s);
        let x = g.input(Tensor::new([1, 2], vec![1.0, 2.0]).unwrap());
        let y = l.forward(&mut g, x, Some(TaskId(1))).unwrap();
        assert_eq!(g.tape.value(y).data(), &[3.0, 2.0]);
    }

    #[test]
    fn half_alpha_scale_is_half() {
        let mut s = ParamStore::new();
        let mut l = LoraLinear::new(&mut s, "l", 128, 128, false, &mut rng()).unwrap();
        l.add_task_adapter(&mut s, TaskId(1), 64, 32.0, DEFAULT_A_STD, 0).unwrap();
        assert_eq!(l.adapter(TaskId(1)).unwrap().scale(), 0.5);
    }

    #[test]
    fn parameter_counts() {
        let mut s = ParamStore::new();
        let mut l = LoraLinear::new(&mut s, "l", 64, 64, true, &mut rng()).unwrap();
        l.add_task_adapter(&mut s, TaskId(1), 16, 8.0, DEFAULT_A_STD, 1).unwrap();
        assert_eq!(l.adapter_param_count(TaskId(1)), Some(2048));
        let mut c = LoraConv3d::new(&mut s, "c", 8, 8, 3, Conv3dGeom::uniform(1, 1), false, &mut rng()).unwrap();
        c.add_task_adapter(&mut s, TaskId(1), 4, 2.0, DEFAULT_A_STD, 1).unwrap();
        assert_eq!(c.adapter_param_count(TaskId(1)), Some(1152));
        let p = c.adapter(TaskId(1)).unwrap();
        assert_eq!(s.value(p.b).shape(), &[72, 12]);
        assert_eq!(s.value(p.a).shape(), &[12, 24]);
        assert!(matches!(
            c.add_task_adapter(&mut s, TaskId(2), 0, 1.0, DEFAULT_A_STD, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn duplicate_and_missing_adapters() {
        let mut s = ParamStore::new();
        let mut l = LoraLinear::new(&mut s, "l", 4, 4, false, &mut rng()).unwrap();
        l.add_task_adapter(&mut s, TaskId(1), 2, 1.0, DEFAULT_A_STD, 0).unwrap();
        assert!(matches!(
            l.add_task_adapter(&mut s, TaskId(1), 2, 1.0, DEFAULT_A_STD, 0),
            Err(Error::Conflict(_))
        ));
        assert!(matches!(
            l.add_task_adapter(&mut s, TaskId(2), 3, 1.0, DEFAULT_A_STD, 0),
            Err(Error::Config(_))
        ));
        let mut g = Graph::new(&s);
        let x = g.input(Tensor::ones([1, 4]).unwrap());
        assert!(matches!(l.forward(&mut g, x, Some(TaskId(7))), Err(Error::MissingAdapter(TaskId(7), _))));
    }
}
