pub mod density;
pub mod distortion;
pub mod expr;
pub mod hyperbolicity;
pub mod inducing;
pub mod jet;
pub mod map;
pub mod orbit;
pub mod pipeline;

pub use density::{BirkhoffHistogram, BirkhoffParams, DensityError, DensityEstimate, DensityParams, Grid};
pub use distortion::{DistortionError, DistortionResult, SummabilityParams, SummabilityReport};
pub use expr::{Expr, ExprError};
pub use hyperbolicity::{ExpansionReport, HyperbolicityError, Sampling};
pub use inducing::{
    BindingLemmaReport, InducedBranch, InducedPartition, InducingContext, InducingError, PartitionParams,
};
pub use jet::Jet2;
pub use map::{CriticalPoint, MapConfig, MapError, MapSpec, NondegeneracyReport, Side};
pub use orbit::{OrbitError, OrbitRecord, SumReport, SumVerdict};
pub use pipeline::{PipelineConfig, PipelineReport, ScanRow, Stage};
