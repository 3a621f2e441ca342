use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::DEFAULT_A_STD;

/// Rank and scaling constant of one kind of adapter site.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteRank {
    pub rank: usize,
    pub alpha: f64,
}

impl SiteRank {
    /// Rank `r` with `α = r/2`.
    pub fn half_alpha(rank: usize) -> Self {
        Self {
            rank,
            alpha: rank as f64 / 2.0,
        }
    }

    /// Rank reduced to `max`, with `α` rescaled so `α/r` is unchanged.
    pub fn clamped(self, max: usize) -> Self {
        if self.rank <= max {
            return self;
        }
        Self {
            rank: max,
            alpha: self.alpha * max as f64 / self.rank as f64,
        }
    }
}

/// Which adapter sites a continual task receives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraSites {
    pub attn_qv: bool,
    pub ffn: bool,
    pub pe_conv: bool,
    pub encoder: bool,
    pub decoder: bool,
}

impl Default for LoraSites {
    fn default() -> Self {
        Self::full()
    }
}

impl LoraSites {
    pub fn full() -> Self {
        Self {
            attn_qv: true,
            ffn: true,
            pe_conv: true,
            encoder: true,
            decoder: true,
        }
    }

    pub fn none() -> Self {
        Self {
            attn_qv: false,
            ffn: false,
            pe_conv: false,
            encoder: true,
            decoder: true,
        }
    }

    /// Attention-only adapters, the reference row of the site ablation.
    pub fn qv_only() -> Self {
        Self {
            ffn: false,
            pe_conv: false,
            ..Self::full()
        }
    }

    pub fn qv_ffn() -> Self {
        Self {
            pe_conv: false,
            ..Self::full()
        }
    }

    pub fn qv_pe_conv() -> Self {
        Self {
            ffn: false,
            ..Self::full()
        }
    }

    pub fn any(&self) -> bool {
        (self.attn_qv || self.ffn || self.pe_conv) && (self.encoder || self.decoder)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub sites: LoraSites,
    pub attn_qv: SiteRank,
    pub ffn: SiteRank,
    pub pe_conv: SiteRank,
    pub a_init_std: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            sites: LoraSites::full(),
            attn_qv: SiteRank::half_alpha(64),
            ffn: SiteRank::half_alpha(16),
            pe_conv: SiteRank::half_alpha(16),
            a_init_std: DEFAULT_A_STD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PvtConfig {
    /// Input extents `(H, W, D)`; `D` is the body axis.
    pub patch_size: [usize; 3],
    pub in_channels: usize,
    pub embed_dims: Vec<usize>,
    pub encoder_depths: Vec<usize>,
    pub decoder_depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub sr_ratios: Vec<usize>,
    pub mlp_ratio: usize,
    pub pe_stride: usize,
    pub head_channels: usize,
    pub dwconv: bool,
    pub ln_eps: f64,
    pub lora: LoraConfig,
}

impl Default for PvtConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl PvtConfig {
    /// The default desk-scale configuration.
    pub fn desk() -> Self {
        let embed_dims = vec![16, 32, 64, 128];
        Self {
            patch_size: [32, 32, 16],
            in_channels: 1,
            heads: embed_dims.iter().map(|d| (d / 16).max(1)).collect(),
            embed_dims,
            encoder_depths: vec![2, 3, 4, 3],
            decoder_depths: vec![3, 4, 3],
            sr_ratios: vec![8, 4, 2, 1],
            mlp_ratio: 4,
            pe_stride: 2,
            head_channels: 8,
            dwconv: true,
            ln_eps: 1e-6,
            lora: LoraConfig::default(),
        }
    }

    /// Widths of the full-size small backbone at its training patch size.
    /// Used for parameter accounting.
    pub fn full_scale() -> Self {
        let embed_dims = vec![64, 128, 320, 512];
        Self {
            patch_size: [224, 224, 32],
            heads: vec![1, 2, 5, 8],
            embed_dims,
            sr_ratios: vec![8, 4, 2, 1],
            head_channels: 32,
            ..Self::desk()
        }
    }

    /// [`desk`](Self::desk) with one transformer layer per block, the
    /// configuration the desk training runs use.
    pub fn desk_shallow() -> Self {
        Self {
            encoder_depths: vec![1, 1, 1, 1],
            decoder_depths: vec![1, 1, 1],
            ..Self::desk()
        }
    }

    pub fn stages(&self) -> usize {
        self.encoder_depths.len()
    }

    /// Kernel of the strided encoder convolution.
    pub fn pe_kernel(&self) -> usize {
        2 * self.pe_stride - 1
    }

    /// Token grid of encoder stage `s`.
    pub fn grid(&self, s: usize) -> [usize; 3] {
        let f = self.pe_stride.pow(s as u32 + 1);
        self.patch_size.map(|e| e / f)
    }

    /// Per-axis kernel of the spatial-reduction convolution at stage `s`, or
    /// `None` when no reduction applies.
    pub fn sr_kernel(&self, s: usize) -> Option<[usize; 3]> {
        let g = self.grid(s);
        let sr = self.sr_ratios[s];
        let k = g.map(|e| sr.min(e));
        (k != [1, 1, 1]).then_some(k)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.stages();
        let fail = |m: String| Err(Error::Config(m));
        if n < 2 {
            return fail(format!("at least two encoder stages are required, got {n}"));
        }
        for (what, len) in [
            ("embed_dims", self.embed_dims.len()),
            ("heads", self.heads.len()),
            ("sr_ratios", self.sr_ratios.len()),
        ] {
            if len != n {
                return fail(format!("len({what}) = {len} must equal len(encoder_depths) = {n}"));
            }
        }
        if self.decoder_depths.len() + 1 != n {
            return fail(format!(
                "len(decoder_depths) = {} must equal len(encoder_depths) - 1 = {}",
                self.decoder_depths.len(),
                n - 1
            ));
        }
        if self.pe_stride < 2 {
            return fail(format!("pe_stride must be at least 2, got {}", self.pe_stride));
        }
        let f = self.pe_stride.pow(n as u32);
        if self.patch_size.iter().any(|&e| e == 0 || e % f != 0) {
            return fail(format!(
                "every patch_size extent {:?} must be divisible by pe_stride^stages = {f}",
                self.patch_size
            ));
        }
        for s in 0..n {
            let (d, h) = (self.embed_dims[s], self.heads[s]);
            if d == 0 || h == 0 || d % h != 0 {
                return fail(format!("embed dim {d} of stage {s} is not divisible by {h} heads"));
            }
            if self.sr_ratios[s] == 0 {
                return fail(format!("sr_ratio of stage {s} must be positive"));
            }
        }
        if self.in_channels == 0 || self.head_channels == 0 || self.mlp_ratio == 0 {
            return fail("in_channels, head_channels and mlp_ratio must be positive".into());
        }
        if !(self.ln_eps > 0.0) {
            return fail(format!("ln_eps must be positive, got {}", self.ln_eps));
        }
        for (what, s) in [
            ("attn_qv", self.lora.attn_qv),
            ("ffn", self.lora.ffn),
            ("pe_conv", self.lora.pe_conv),
        ] {
            if s.rank == 0 || !(s.alpha > 0.0) {
                return fail(format!("lora.{what} needs a positive rank and alpha"));
            }
        }
        if !(self.lora.a_init_std > 0.0) {
            return fail("lora.a_init_std must be positive".into());
        }
        Ok(())
    }
}
