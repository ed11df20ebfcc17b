//! Network building blocks on top of the autodiff graph.

pub mod optim;
pub mod params;
pub mod segmenter;
pub mod text;
pub mod vit;

pub use optim::{poly_lr, AdamW};
pub use params::{Archive, NamedArray, ParamId, ParamStore};
pub use segmenter::{Segmenter, SegmenterConfig};
pub use text::{TextConfig, TextTransformer, WordVocab};
pub use vit::{Vit, VitConfig, VitForward};
