//! Predict the difficulty of chart-literacy test items with a schema-constrained
//! chat-completions model, and score those predictions against ground truth
//! aggregated from participant responses.
//!
//! The crate is organised the way data flows through it:
//!
//! - [`ingestion`] parses response tables and item manifests.
//! - [`aggregation`] turns responses into per-item difficulty, splits and filters.
//! - [`schemas`] owns the three analysis schemas, prompts and output parsing.
//! - [`client`] talks to any OpenAI-compatible endpoint, with retries, rate
//!   limiting and a content-addressed response cache.
//! - [`image`] detects image formats, rasterizes SVG and applies the fallback policy.
//! - [`predict`] runs the text-only, vision-only and multimodal pipelines.
//! - [`evaluation`] computes MAE, MSE, SEM and prediction histograms.
//! - [`simulation`] generates Rasch-model responses and offline mock predictors.

pub mod aggregation;
pub mod client;
pub mod evaluation;
pub mod image;
pub mod ingestion;
pub mod predict;
pub mod rng;
pub mod schemas;
pub mod simulation;

pub use aggregation::{aggregate_items, filter_by_format, split_dataset, ItemAggregate, SplitResult};
pub use client::{CacheKey, Client, ClientConfig, ClientError, Completion};
pub use evaluation::{compare_pipelines, EvaluationReport, HistogramBin, RankEntry};
pub use image::{detect_format, prepare_image, rasterize_svg, EncodedImage, ImageFormat, ImagePolicy, PreparedImage};
pub use ingestion::{parse_item_manifest, parse_response_records, ItemContent, ParseOptions, ResponseRecord};
pub use predict::{BatchConfig, BatchOutcome, PredictionRecord, Predictor, Provenance};
pub use schemas::{
    build_request, parse_structured_response, ChatRequest, ItemAnalysis, ModelConfig, PredictorKind, PROMPT_VERSION,
};
