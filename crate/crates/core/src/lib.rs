//! Data and algorithm toolkit for remote-sensing vision-language agents.
//!
//! - [`grammar`]: the special-token markup carried by prompts and responses.
//! - [`builder`]: instruction records for the eight task formats, caption
//!   validation and the encoder tiling plan.
//! - [`trajdec`]: the recurrent trajectory decoder, its losses, analytic
//!   gradients and a small gradient-descent fitter.
//! - [`metrics`]: detection, relation, caption, classification and
//!   navigation metrics.

pub mod builder;
pub mod grammar;
pub mod metrics;
pub mod record;
pub mod trajdec;

pub use grammar::{
    canonicalize, emit, parse, Decimal, GrammarError, MarkupDoc, MarkupNode, ModalityLabel,
    NormBox, PixelRect, Pos3, Pose6, TaskTag,
};
pub use record::{InstructionRecord, TaskKind};
