use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use super::config::{PvtConfig, SiteRank};
use crate::autodiff::{Conv3dGeom, Var};
use crate::error::{Error, Result};
use crate::lora::{LoraConv3d, LoraLinear};
use crate::params::{Graph, ParamGroup, ParamId, ParamStore, TaskId};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.insert(format!("{name}.gain"), Tensor::ones([dim])?, ParamGroup::Base)?,
            bias: store.insert(format!("{name}.bias"), Tensor::zeros([dim])?, ParamGroup::Base)?,
        })
    }

    fn forward(&self, g: &mut Graph, x: Var, eps: f64) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.tape.layernorm(x, gain, bias, eps)
    }
}

/// Convolution without adapters: spatial reduction, depthwise positional
/// encoding, upsampling deconvolutions and task heads.
#[derive(Clone, Debug)]
pub struct PlainConv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: Conv3dGeom,
}

impl PlainConv {
    fn new(
        store: &mut ParamStore,
        name: &str,
        shape: [usize; 5],
        fan_in: usize,
        geom: Conv3dGeom,
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w = Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)?;
        Ok(Self {
            weight: store.insert(format!("{name}.weight"), w, group)?,
            bias: store.insert(format!("{name}.bias"), Tensor::zeros([shape[0]])?, group)?,
            geom,
        })
    }

    fn conv(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.tape.conv3d(x, w, self.geom)?;
        g.tape.add_bias(y, b, 0)
    }

    fn deconv(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.tape.deconv3d(x, w, self.geom.stride[0])?;
        g.tape.add_bias(y, b, 0)
    }

    fn depthwise(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.tape.depthwise_conv3d(x, w, self.geom.padding[0])?;
        g.tape.add_bias(y, b, 0)
    }
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub q: LoraLinear,
    pub k: LoraLinear,
    pub v: LoraLinear,
    pub o: LoraLinear,
    pub reduce: Option<(PlainConv, Norm)>,
    pub heads: usize,
}

#[derive(Clone, Debug)]
pub struct PvtLayer {
    pub norm1: Norm,
    pub attn: Attention,
    pub norm2: Norm,
    pub fc1: LoraLinear,
    pub dw: Option<PlainConv>,
    pub fc2: LoraLinear,
}

#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub pe: LoraConv3d,
    pub pe_norm: Norm,
    pub layers: Vec<PvtLayer>,
    pub grid: [usize; 3],
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub level: usize,
    pub up: PlainConv,
    pub up_norm: Norm,
    pub layers: Vec<PvtLayer>,
    pub grid: [usize; 3],
}

#[derive(Clone, Debug)]
pub struct TaskHead {
    pub name: String,
    pub classes: Vec<String>,
    pub conv: PlainConv,
    pub has_adapters: bool,
}

/// Where an adapter site sits, used to apply ablation flags.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SiteClass {
    AttnQv,
    Ffn,
    PeConv,
}

pub enum SiteMut<'a> {
    Linear(&'a mut LoraLinear),
    Conv(&'a mut LoraConv3d),
}

#[derive(Clone, Debug)]
pub struct PvtModel {
    pub config: PvtConfig,
    pub encoder: Vec<EncoderStage>,
    pub decoder: Vec<DecoderStage>,
    pub final_up: PlainConv,
    pub penultimate: LoraConv3d,
    pub tasks: BTreeMap<TaskId, TaskHead>,
}

/// Intermediate activations of one forward pass.
pub struct Trace {
    pub encoder: Vec<Var>,
    pub logits: Var,
}

impl PvtModel {
    /// Builds the backbone with all weights in the base group. Task heads are
    /// added separately.
    pub fn build(config: &PvtConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        config.validate()?;
        let cfg = config.clone();
        let mut rng = seed::rng(seed, "backbone");
        let n = cfg.stages();
        let stride = cfg.pe_stride;
        let pk = cfg.pe_kernel();
        let mut encoder = Vec::with_capacity(n);
        for s in 0..n {
            let c_in = if s == 0 { cfg.in_channels } else { cfg.embed_dims[s - 1] };
            let dim = cfg.embed_dims[s];
            let name = format!("enc{s}");
            let geom = Conv3dGeom::uniform(stride, stride - 1);
            let pe = LoraConv3d::new(store, &format!("{name}.pe"), c_in, dim, pk, geom, true, &mut rng)?;
            let pe_norm = Norm::new(store, &format!("{name}.pe_norm"), dim)?;
            let layers = (0..cfg.encoder_depths[s])
                .map(|i| PvtLayer::new(store, &cfg, &format!("{name}.layer{i}"), s, &mut rng))
                .collect::<Result<_>>()?;
            encoder.push(EncoderStage { pe, pe_norm, layers, grid: cfg.grid(s) });
        }
        let mut decoder = Vec::with_capacity(n - 1);
        for j in 0..n - 1 {
            let level = n - 2 - j;
            let (c_in, dim) = (cfg.embed_dims[level + 1], cfg.embed_dims[level]);
            let name = format!("dec{j}");
            let up = deconv(store, &format!("{name}.up"), c_in, dim, stride, &mut rng)?;
            let up_norm = Norm::new(store, &format!("{name}.up_norm"), dim)?;
            let layers = (0..cfg.decoder_depths[j])
                .map(|i| PvtLayer::new(store, &cfg, &format!("{name}.layer{i}"), level, &mut rng))
                .collect::<Result<_>>()?;
            decoder.push(DecoderStage { level, up, up_norm, layers, grid: cfg.grid(level) });
        }
        let hc = cfg.head_channels;
        let final_up = deconv(store, "final.up", cfg.embed_dims[0], hc, stride, &mut rng)?;
        let penultimate = LoraConv3d::new(store, "final.conv", hc, hc, 3, Conv3dGeom::uniform(1, 1), true, &mut rng)?;
        Ok(Self {
            config: cfg,
            encoder,
            decoder,
            final_up,
            penultimate,
            tasks: BTreeMap::new(),
        })
    }

    /// Registers a task: a new head and, when `with_adapters`, adapters on every
    /// site enabled in the config.
    pub fn add_task(
        &mut self,
        store: &mut ParamStore,
        task: TaskId,
        name: &str,
        classes: &[String],
        with_adapters: bool,
        seed: u64,
    ) -> Result<()> {
        if self.tasks.contains_key(&task) {
            return Err(Error::Conflict(format!("task {task} is already registered")));
        }
        if classes.is_empty() {
            return Err(Error::Config(format!("task {task} declares no classes")));
        }
        for (i, c) in classes.iter().enumerate() {
            if classes[..i].contains(c) {
                return Err(Error::Config(format!("task {task} lists class `{c}` twice")));
            }
        }
        let hc = self.config.head_channels;
        let group = if task == TaskId(0) { ParamGroup::Base } else { ParamGroup::Head(task) };
        let mut rng = seed::rng(seed, "head");
        let conv = PlainConv::new(
            store,
            &format!("head.t{task}"),
            [classes.len(), hc, 1, 1, 1],
            hc,
            Conv3dGeom::uniform(1, 0),
            group,
            &mut rng,
        )?;
        let has_adapters = with_adapters && task != TaskId(0);
        if has_adapters {
            let lora = self.config.lora.clone();
            let sites = lora.sites;
            for (class, site) in self.sites_mut(sites.encoder, sites.decoder) {
                let enabled = match class {
                    SiteClass::AttnQv => sites.attn_qv,
                    SiteClass::Ffn => sites.ffn,
                    SiteClass::PeConv => sites.pe_conv,
                };
                if !enabled {
                    continue;
                }
                match site {
                    SiteMut::Linear(l) => {
                        let r = site_rank(&lora, class).clamped(l.max_rank());
                        let s = seed::derive(seed, &l.name);
                        l.add_task_adapter(store, task, r.rank, r.alpha, lora.a_init_std, s)?;
                    }
                    SiteMut::Conv(c) => {
                        let r = site_rank(&lora, class).clamped(c.max_rank());
                        let s = seed::derive(seed, &c.name);
                        c.add_task_adapter(store, task, r.rank, r.alpha, lora.a_init_std, s)?;
                    }
                }
            }
        }
        self.tasks.insert(
            task,
            TaskHead {
                name: name.to_string(),
                classes: classes.to_vec(),
                conv,
                has_adapters,
            },
        );
        Ok(())
    }

    /// All adapter-capable sites in the selected halves of the network.
    pub fn sites_mut(&mut self, encoder: bool, decoder: bool) -> Vec<(SiteClass, SiteMut<'_>)> {
        let mut out = Vec::new();
        if encoder {
            for st in &mut self.encoder {
                out.push((SiteClass::PeConv, SiteMut::Conv(&mut st.pe)));
                for l in &mut st.layers {
                    layer_sites(l, &mut out);
                }
            }
        }
        if decoder {
            for st in &mut self.decoder {
                for l in &mut st.layers {
                    layer_sites(l, &mut out);
                }
            }
            out.push((SiteClass::PeConv, SiteMut::Conv(&mut self.penultimate)));
        }
        out
    }

    pub fn task(&self, task: TaskId) -> Result<&TaskHead> {
        self.tasks.get(&task).ok_or(Error::MissingTask(task))
    }

    /// Raw head outputs `[O, H, W, D]` for `x[in_channels, H, W, D]`.
    pub fn logits(&self, g: &mut Graph, x: Var, task: TaskId) -> Result<Var> {
        Ok(self.trace(g, x, task, true)?.logits)
    }

    /// As [`logits`](Self::logits), optionally bypassing the task's adapters.
    pub fn trace(&self, g: &mut Graph, x: Var, task: TaskId, use_adapters: bool) -> Result<Trace> {
        let head = self.task(task)?;
        let cfg = &self.config;
        let expected = [cfg.in_channels, cfg.patch_size[0], cfg.patch_size[1], cfg.patch_size[2]];
        if g.tape.shape(x) != expected {
            return Err(Error::dim(format!(
                "model input must have shape {expected:?}, got {:?}",
                g.tape.shape(x)
            )));
        }
        let lt = (use_adapters && head.has_adapters).then_some(task);
        let eps = cfg.ln_eps;
        let mut vol = x;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for st in &self.encoder {
            let y = st.pe.forward(g, vol, active(&st.pe.adapters, lt))?;
            let t = to_tokens(g, y)?;
            let mut t = st.pe_norm.forward(g, t, eps)?;
            for l in &st.layers {
                t = l.forward(g, t, st.grid, lt, eps)?;
            }
            skips.push(t);
            vol = to_volume(g, t, st.grid)?;
        }
        let mut t = *skips.last().expect("at least two stages");
        for st in &self.decoder {
            let v = to_volume(g, t, self.encoder[st.level + 1].grid)?;
            let up = st.up.deconv(g, v)?;
            let u = to_tokens(g, up)?;
            let u = st.up_norm.forward(g, u, eps)?;
            t = g.tape.add(u, skips[st.level])?;
            for l in &st.layers {
                t = l.forward(g, t, st.grid, lt, eps)?;
            }
        }
        let v = to_volume(g, t, self.encoder[0].grid)?;
        let up = self.final_up.deconv(g, v)?;
        let up = g.tape.gelu(up);
        let h = self.penultimate.forward(g, up, active(&self.penultimate.adapters, lt))?;
        let h = g.tape.gelu(h);
        let logits = head.conv.conv(g, h)?;
        Ok(Trace { encoder: skips, logits })
    }

    /// Sigmoid probabilities for one input volume, evaluated without gradients.
    pub fn predict(&self, store: &ParamStore, x: &Tensor, task: TaskId) -> Result<Tensor> {
        let logits = self.predict_logits(store, x, task)?;
        Ok(logits.map(crate::autodiff::sigmoid_scalar))
    }

    pub fn predict_logits(&self, store: &ParamStore, x: &Tensor, task: TaskId) -> Result<Tensor> {
        let mut g = Graph::frozen(store);
        let xv = g.input(x.clone());
        let y = self.logits(&mut g, xv, task)?;
        Ok(g.tape.value(y).clone())
    }
}

fn site_rank(lora: &super::config::LoraConfig, class: SiteClass) -> SiteRank {
    match class {
        SiteClass::AttnQv => lora.attn_qv,
        SiteClass::Ffn => lora.ffn,
        SiteClass::PeConv => lora.pe_conv,
    }
}

fn layer_sites<'a>(l: &'a mut PvtLayer, out: &mut Vec<(SiteClass, SiteMut<'a>)>) {
    out.push((SiteClass::AttnQv, SiteMut::Linear(&mut l.attn.q)));
    out.push((SiteClass::AttnQv, SiteMut::Linear(&mut l.attn.v)));
    out.push((SiteClass::Ffn, SiteMut::Linear(&mut l.fc1)));
    out.push((SiteClass::Ffn, SiteMut::Linear(&mut l.fc2)));
}

fn deconv(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<PlainConv> {
    let w = Tensor::randn([c_in, c_out, k, k, k], (2.0 / c_in as f64).sqrt(), rng)?;
    Ok(PlainConv {
        weight: store.insert(format!("{name}.weight"), w, ParamGroup::Base)?,
        bias: store.insert(format!("{name}.bias"), Tensor::zeros([c_out])?, ParamGroup::Base)?,
        geom: Conv3dGeom::uniform(k, 0),
    })
}

fn active<T>(adapters: &BTreeMap<TaskId, T>, task: Option<TaskId>) -> Option<TaskId> {
    task.filter(|t| adapters.contains_key(t))
}

/// `[C, a, b, c]` volume to `[a·b·c, C]` row tokens.
pub(crate) fn to_tokens(g: &mut Graph, v: Var) -> Result<Var> {
    let s = g.tape.shape(v).to_vec();
    let n = s[1] * s[2] * s[3];
    let m = g.tape.reshape(v, &[s[0], n])?;
    g.tape.transpose(m)
}

pub(crate) fn to_volume(g: &mut Graph, t: Var, grid: [usize; 3]) -> Result<Var> {
    let c = g.tape.shape(t)[1];
    let m = g.tape.transpose(t)?;
    g.tape.reshape(m, &[c, grid[0], grid[1], grid[2]])
}

impl PvtLayer {
    fn new(store: &mut ParamStore, cfg: &PvtConfig, name: &str, level: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let dim = cfg.embed_dims[level];
        let hidden = dim * cfg.mlp_ratio;
        let reduce = match cfg.sr_kernel(level) {
            Some(k) => {
                let conv = PlainConv::new(
                    store,
                    &format!("{name}.attn.sr"),
                    [dim, dim, k[0], k[1], k[2]],
                    dim * k[0] * k[1] * k[2],
                    Conv3dGeom { stride: k, padding: [0; 3] },
                    ParamGroup::Base,
                    rng,
                )?;
                Some((conv, Norm::new(store, &format!("{name}.attn.sr_norm"), dim)?))
            }
            None => None,
        };
        let attn = Attention {
            q: LoraLinear::new(store, &format!("{name}.attn.q"), dim, dim, true, rng)?,
            k: LoraLinear::new(store, &format!("{name}.attn.k"), dim, dim, true, rng)?,
            v: LoraLinear::new(store, &format!("{name}.attn.v"), dim, dim, true, rng)?,
            o: LoraLinear::new(store, &format!("{name}.attn.o"), dim, dim, true, rng)?,
            reduce,
            heads: cfg.heads[level],
        };
        let dw = if cfg.dwconv {
            Some(PlainConv::new(
                store,
                &format!("{name}.ffn.dw"),
                [hidden, 1, 3, 3, 3],
                27,
                Conv3dGeom::uniform(1, 1),
                ParamGroup::Base,
                rng,
            )?)
        } else {
            None
        };
        Ok(Self {
            norm1: Norm::new(store, &format!("{name}.norm1"), dim)?,
            attn,
            norm2: Norm::new(store, &format!("{name}.norm2"), dim)?,
            fc1: LoraLinear::new(store, &format!("{name}.ffn.fc1"), dim, hidden, true, rng)?,
            dw,
            fc2: LoraLinear::new(store, &format!("{name}.ffn.fc2"), hidden, dim, true, rng)?,
        })
    }

    fn forward(&self, g: &mut Graph, x: Var, grid: [usize; 3], task: Option<TaskId>, eps: f64) -> Result<Var> {
        let h = self.norm1.forward(g, x, eps)?;
        let a = self.attn.forward(g, h, grid, task, eps)?;
        let x = g.tape.add(x, a)?;
        let h = self.norm2.forward(g, x, eps)?;
        let mut f = self.fc1.forward(g, h, active(&self.fc1.adapters, task))?;
        if let Some(dw) = &self.dw {
            let v = to_volume(g, f, grid)?;
            let v = dw.depthwise(g, v)?;
            f = to_tokens(g, v)?;
        }
        let f = g.tape.gelu(f);
        let f = self.fc2.forward(g, f, active(&self.fc2.adapters, task))?;
        g.tape.add(x, f)
    }
}

impl Attention {
    /// Multi-head attention over row tokens `x[N×C]` laid out on `grid`.
    pub fn forward(&self, g: &mut Graph, x: Var, grid: [usize; 3], task: Option<TaskId>, eps: f64) -> Result<Var> {
        let q = self.q.forward(g, x, active(&self.q.adapters, task))?;
        let src = match &self.reduce {
            Some((conv, norm)) => {
                let v = to_volume(g, x, grid)?;
                let r = conv.conv(g, v)?;
                let t = to_tokens(g, r)?;
                norm.forward(g, t, eps)?
            }
            None => x,
        };
        let k = self.k.forward(g, src, None)?;
        let v = self.v.forward(g, src, active(&self.v.adapters, task))?;
        let y = multi_head(g, q, k, v, self.heads)?;
        self.o.forward(g, y, None)
    }
}

/// Scaled dot-product attention with heads split along the feature axis.
pub fn multi_head(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let dim = g.tape.shape(q)[1];
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Config(format!("embed dim {dim} is not divisible by {heads} heads")));
    }
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.tape.slice(q, 1, h * dh, dh)?,
                g.tape.slice(k, 1, h * dh, dh)?,
                g.tape.slice(v, 1, h * dh, dh)?,
            )
        };
        let s = g.tape.matmul_nt(qh, kh)?;
        let s = g.tape.scale(s, scale);
        let p = g.tape.softmax(s, 1)?;
        outs.push(g.tape.matmul(p, vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        g.tape.concat(&outs, 1)
    }
}
