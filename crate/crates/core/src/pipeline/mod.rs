mod config;
pub mod experiment;
pub mod stages;

pub use config::{EncoderConfig, PipelineConfig, Precision, TrackletConfig, SCHEMA_VERSION};
pub use experiment::{run_method, run_steps, Outcome, Prepared, Steps};
pub use stages::{run_pipeline, run_stage, ArtifactManifest, EvalOutput, Stage, StageStatus, Workspace};
