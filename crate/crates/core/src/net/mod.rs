//! The segmentation network: residual encoder, configurable skip topology,
//! soft attention gates and analytic parameter counters.

mod config;
mod counts;
mod layers;
mod model;
mod params;

pub use config::{ModelConfig, Origin, SkipMode, SkipSource, SkipSpec, Transform};
pub use counts::{
    audit, count_params_fullscale, count_params_unet, encoder_counts, gate_counts, head_count,
    AuditRow, ParamAudit, StageCount,
};
pub use layers::{
    resample_spatial, AttentionGate, BatchNorm, Conv, ConvBnRelu, Ctx, Resampler, BN_EPS,
    BN_MOMENTUM,
};
pub use model::{
    build_model, Branch, DecoderStage, EncoderBlock, ForwardOptions, ForwardOutput, GateMode,
    GateTrace, Model, StageGates,
};
pub use params::{Bound, Param, ParamId, ParamKind, ParamStore, StatsId};
