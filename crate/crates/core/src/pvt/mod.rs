//! The 3D pyramid vision transformer backbone with adapter sites on the
//! attention query/value projections, the feed-forward layers, the encoder
//! patch embeddings and the decoder's penultimate convolution.

mod config;
pub mod layout;
mod model;

pub use config::{LoraConfig, LoraSites, PvtConfig, SiteRank};
pub use model::{
    multi_head, Attention, DecoderStage, EncoderStage, Norm, PlainConv, PvtLayer, PvtModel, SiteClass, SiteMut,
    TaskHead, Trace,
};
