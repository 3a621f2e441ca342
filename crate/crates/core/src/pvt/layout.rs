//! Parameter shapes of a model, enumerated from its config without
//! allocating any weights. Used for budget accounting at scales that would not
//! fit in memory.

use super::config::{PvtConfig, SiteRank};
use crate::params::{ParamGroup, TaskId};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamShape {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
}

impl ParamShape {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

struct Out<'a> {
    v: Vec<ParamShape>,
    cfg: &'a PvtConfig,
}

impl Out<'_> {
    fn push(&mut self, name: String, shape: Vec<usize>, group: ParamGroup) {
        self.v.push(ParamShape { name, shape, group });
    }

    fn base(&mut self, name: String, shape: Vec<usize>) {
        self.push(name, shape, ParamGroup::Base);
    }

    fn norm(&mut self, name: &str, dim: usize) {
        self.base(format!("{name}.gain"), vec![dim]);
        self.base(format!("{name}.bias"), vec![dim]);
    }

    fn linear(&mut self, name: &str, c: usize, d: usize) {
        self.base(format!("{name}.weight"), vec![d, c]);
        self.base(format!("{name}.bias"), vec![d]);
    }

    fn layer(&mut self, name: &str, level: usize) {
        let cfg = self.cfg;
        let dim = cfg.embed_dims[level];
        let hidden = dim * cfg.mlp_ratio;
        self.norm(&format!("{name}.norm1"), dim);
        for p in ["q", "k", "v", "o"] {
            self.linear(&format!("{name}.attn.{p}"), dim, dim);
        }
        if let Some(k) = cfg.sr_kernel(level) {
            self.base(format!("{name}.attn.sr.weight"), vec![dim, dim, k[0], k[1], k[2]]);
            self.base(format!("{name}.attn.sr.bias"), vec![dim]);
            self.norm(&format!("{name}.attn.sr_norm"), dim);
        }
        self.norm(&format!("{name}.norm2"), dim);
        self.linear(&format!("{name}.ffn.fc1"), dim, hidden);
        if cfg.dwconv {
            self.base(format!("{name}.ffn.dw.weight"), vec![hidden, 1, 3, 3, 3]);
            self.base(format!("{name}.ffn.dw.bias"), vec![hidden]);
        }
        self.linear(&format!("{name}.ffn.fc2"), hidden, dim);
    }

    fn lora_linear(&mut self, name: &str, c: usize, d: usize, site: SiteRank, task: TaskId) {
        let r = site.clamped(d.min(c) / 2).rank;
        let g = ParamGroup::Adapter(task);
        self.push(format!("{name}.lora_a.t{task}"), vec![r, c], g);
        self.push(format!("{name}.lora_b.t{task}"), vec![d, r], g);
    }

    fn lora_conv(&mut self, name: &str, c: usize, d: usize, k: usize, site: SiteRank, task: TaskId) {
        let r = site.clamped(((d * k).min(c) / 2).max(1)).rank;
        let g = ParamGroup::Adapter(task);
        self.push(format!("{name}.lora_a.t{task}"), vec![r * k, c * k], g);
        self.push(format!("{name}.lora_b.t{task}"), vec![d * k * k, r * k], g);
    }

    fn layer_adapters(&mut self, name: &str, level: usize, task: TaskId) {
        let cfg = self.cfg;
        let dim = cfg.embed_dims[level];
        let hidden = dim * cfg.mlp_ratio;
        if cfg.lora.sites.attn_qv {
            self.lora_linear(&format!("{name}.attn.q"), dim, dim, cfg.lora.attn_qv, task);
            self.lora_linear(&format!("{name}.attn.v"), dim, dim, cfg.lora.attn_qv, task);
        }
        if cfg.lora.sites.ffn {
            self.lora_linear(&format!("{name}.ffn.fc1"), dim, hidden, cfg.lora.ffn, task);
            self.lora_linear(&format!("{name}.ffn.fc2"), hidden, dim, cfg.lora.ffn, task);
        }
    }
}

/// Frozen backbone parameters (excluding any head).
pub fn backbone(cfg: &PvtConfig) -> Vec<ParamShape> {
    let mut o = Out { v: Vec::new(), cfg };
    let n = cfg.stages();
    let k = cfg.pe_kernel();
    let s = cfg.pe_stride;
    for st in 0..n {
        let c_in = if st == 0 { cfg.in_channels } else { cfg.embed_dims[st - 1] };
        let dim = cfg.embed_dims[st];
        o.base(format!("enc{st}.pe.weight"), vec![dim, c_in, k, k, k]);
        o.base(format!("enc{st}.pe.bias"), vec![dim]);
        o.norm(&format!("enc{st}.pe_norm"), dim);
        for i in 0..cfg.encoder_depths[st] {
            o.layer(&format!("enc{st}.layer{i}"), st);
        }
    }
    for j in 0..n - 1 {
        let level = n - 2 - j;
        let (c_in, dim) = (cfg.embed_dims[level + 1], cfg.embed_dims[level]);
        o.base(format!("dec{j}.up.weight"), vec![c_in, dim, s, s, s]);
        o.base(format!("dec{j}.up.bias"), vec![dim]);
        o.norm(&format!("dec{j}.up_norm"), dim);
        for i in 0..cfg.decoder_depths[j] {
            o.layer(&format!("dec{j}.layer{i}"), level);
        }
    }
    let hc = cfg.head_channels;
    o.base("final.up.weight".into(), vec![cfg.embed_dims[0], hc, s, s, s]);
    o.base("final.up.bias".into(), vec![hc]);
    o.base("final.conv.weight".into(), vec![hc, hc, 3, 3, 3]);
    o.base("final.conv.bias".into(), vec![hc]);
    o.v
}

pub fn head(cfg: &PvtConfig, task: TaskId, classes: usize) -> Vec<ParamShape> {
    let group = if task == TaskId(0) { ParamGroup::Base } else { ParamGroup::Head(task) };
    vec![
        ParamShape {
            name: format!("head.t{task}.weight"),
            shape: vec![classes, cfg.head_channels, 1, 1, 1],
            group,
        },
        ParamShape {
            name: format!("head.t{task}.bias"),
            shape: vec![classes],
            group,
        },
    ]
}

/// Adapters a continual task adds under the config's site flags.
pub fn adapters(cfg: &PvtConfig, task: TaskId) -> Vec<ParamShape> {
    let mut o = Out { v: Vec::new(), cfg };
    let sites = cfg.lora.sites;
    let n = cfg.stages();
    let k = cfg.pe_kernel();
    if sites.encoder {
        for st in 0..n {
            if sites.pe_conv {
                let c_in = if st == 0 { cfg.in_channels } else { cfg.embed_dims[st - 1] };
                o.lora_conv(&format!("enc{st}.pe"), c_in, cfg.embed_dims[st], k, cfg.lora.pe_conv, task);
            }
            for i in 0..cfg.encoder_depths[st] {
                o.layer_adapters(&format!("enc{st}.layer{i}"), st, task);
            }
        }
    }
    if sites.decoder {
        for j in 0..n - 1 {
            for i in 0..cfg.decoder_depths[j] {
                o.layer_adapters(&format!("dec{j}.layer{i}"), n - 2 - j, task);
            }
        }
        if sites.pe_conv {
            let hc = cfg.head_channels;
            o.lora_conv("final.conv", hc, hc, 3, cfg.lora.pe_conv, task);
        }
    }
    o.v
}

pub fn count(shapes: &[ParamShape]) -> usize {
    shapes.iter().map(ParamShape::numel).sum()
}
