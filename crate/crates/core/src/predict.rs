//! Per-item and batch prediction for the three pipelines.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{Client, ClientError};
use crate::image::{prepare_image, ImageError, ImagePolicy, ImageSource, PreparedImage};
use crate::ingestion::ItemContent;
use crate::schemas::{
    build_request, parse_structured_response, ChatRequest, ItemAnalysis, ModelConfig, PredictorKind, SchemaError,
    PROMPT_VERSION,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    #[serde(rename = "model")]
    ModelCall,
    #[serde(rename = "cache")]
    CacheHit,
    Fallback,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::ModelCall => "model",
            Provenance::CacheHit => "cache",
            Provenance::Fallback => "fallback",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Provenance {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "model" => Ok(Provenance::ModelCall),
            "cache" => Ok(Provenance::CacheHit),
            "fallback" => Ok(Provenance::Fallback),
            other => Err(format!("unknown provenance `{other}`")),
        }
    }
}

/// One predicted easiness value and where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub item_id: String,
    pub kind: PredictorKind,
    /// Predicted easiness (proportion correct).
    pub prediction: f64,
    pub provenance: Provenance,
    /// Absent exactly when `provenance` is `Fallback`.
    pub analysis: Option<ItemAnalysis>,
    pub prompt_version: String,
    pub model_id: String,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatchConfig {
    pub max_concurrency: usize,
    /// Easiness assigned to items whose image cannot be used.
    pub fallback_value: f64,
    pub image_policy: ImagePolicy,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self { max_concurrency: 4, fallback_value: 0.5, image_policy: ImagePolicy::default() }
    }
}

#[derive(Debug, Error)]
pub enum PredictionCause {
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
}

#[derive(Debug, Error)]
pub enum PredictionError {
    #[error("prediction failed for `{item_id}`: {cause}")]
    PredictionFailed {
        item_id: String,
        #[source]
        cause: PredictionCause,
    },
}

impl PredictionError {
    pub fn item_id(&self) -> &str {
        match self {
            PredictionError::PredictionFailed { item_id, .. } => item_id,
        }
    }

    pub fn cause(&self) -> &PredictionCause {
        match self {
            PredictionError::PredictionFailed { cause, .. } => cause,
        }
    }

    pub fn is_auth(&self) -> bool {
        matches!(self.cause(), PredictionCause::Client(e) if e.is_auth())
    }
}

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("batch has no items")]
    EmptyBatch,
    #[error("all {} items failed; first failure: {}", .0.len(), .0[0].error)]
    AllFailed(Vec<ItemFailure>),
    #[error("invalid batch configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug)]
pub struct ItemFailure {
    /// Position of the item in the batch input.
    pub index: usize,
    pub error: PredictionError,
}

/// Successful records in input order, plus a sidecar list of failures.
#[derive(Debug)]
pub struct BatchOutcome {
    pub records: Vec<PredictionRecord>,
    pub failures: Vec<ItemFailure>,
}

/// What `predict_item` will do for an item, before any model call.
#[derive(Debug)]
pub enum Plan {
    Request(Box<ChatRequest>),
    Fallback,
}

/// Prepare the image (for image pipelines) and build the request, or decide
/// that the item falls back.
pub fn plan(
    kind: PredictorKind,
    item: &ItemContent,
    policy: &ImagePolicy,
    images: &dyn ImageSource,
    model: &ModelConfig,
) -> Result<Plan, PredictionCause> {
    let image = if kind.needs_image() {
        match prepare_image(&item.image_url, policy, images)? {
            PreparedImage::Encoded(img) => Some(img),
            PreparedImage::Fallback { format } => {
                log::info!("{}: {format} image not usable, using fallback", item.item_id);
                return Ok(Plan::Fallback);
            }
        }
    } else {
        None
    };
    Ok(Plan::Request(Box::new(build_request(kind, item, image.as_ref(), model)?)))
}

pub struct Predictor {
    client: Arc<Client>,
    images: Arc<dyn ImageSource>,
    model: ModelConfig,
    batch: BatchConfig,
}

impl Predictor {
    pub fn new(client: Arc<Client>, images: Arc<dyn ImageSource>, model: ModelConfig, batch: BatchConfig) -> Self {
        Self { client, images, model, batch }
    }

    pub fn batch_config(&self) -> &BatchConfig {
        &self.batch
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.model
    }

    /// See [`plan`].
    pub fn plan(&self, kind: PredictorKind, item: &ItemContent) -> Result<Plan, PredictionCause> {
        plan(kind, item, &self.batch.image_policy, self.images.as_ref(), &self.model)
    }

    fn record(
        &self,
        item: &ItemContent,
        kind: PredictorKind,
        provenance: Provenance,
        analysis: Option<ItemAnalysis>,
    ) -> PredictionRecord {
        PredictionRecord {
            item_id: item.item_id.clone(),
            kind,
            prediction: analysis.as_ref().map_or(self.batch.fallback_value, ItemAnalysis::prediction),
            provenance,
            analysis,
            prompt_version: PROMPT_VERSION.to_string(),
            model_id: self.model.model_id.clone(),
            timestamp: Utc::now(),
        }
    }

    fn run(&self, kind: PredictorKind, item: &ItemContent) -> Result<PredictionRecord, PredictionCause> {
        let request = match self.plan(kind, item)? {
            Plan::Fallback => return Ok(self.record(item, kind, Provenance::Fallback, None)),
            Plan::Request(r) => r,
        };
        let first = self.client.complete(&request, PROMPT_VERSION)?;
        let (completion, analysis) = match parse_structured_response(&first.content, kind) {
            Ok(a) => (first, a),
            Err(e) if e.is_retryable() => {
                log::warn!("{}: rejected model output ({e}); asking once more", item.item_id);
                let retry = request.with_correction(&first.content, &e.to_string());
                let second = self.client.complete(&retry, PROMPT_VERSION)?;
                let analysis = parse_structured_response(&second.content, kind)?;
                (second, analysis)
            }
            Err(e) => return Err(e.into()),
        };
        let provenance = if completion.from_cache { Provenance::CacheHit } else { Provenance::ModelCall };
        Ok(self.record(item, kind, provenance, Some(analysis)))
    }

    /// Predict one item. Unusable images short-circuit to the fallback value;
    /// output that fails validation gets one corrective re-ask.
    pub fn predict_item(&self, kind: PredictorKind, item: &ItemContent) -> Result<PredictionRecord, PredictionError> {
        self.run(kind, item).map_err(|cause| PredictionError::PredictionFailed { item_id: item.item_id.clone(), cause })
    }

    /// Predict many items with at most `max_concurrency` in flight. Output
    /// order matches input order; failed items go to the sidecar list.
    pub fn predict_batch(&self, kind: PredictorKind, items: &[ItemContent]) -> Result<BatchOutcome, BatchError> {
        if items.is_empty() {
            return Err(BatchError::EmptyBatch);
        }
        if self.batch.max_concurrency == 0 {
            return Err(BatchError::InvalidConfig("max_concurrency must be at least 1".into()));
        }
        let slots: Vec<Mutex<Option<Result<PredictionRecord, PredictionError>>>> =
            items.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = self.batch.max_concurrency.min(items.len());
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(item) = items.get(i) else { break };
                    let result = self.predict_item(kind, item);
                    *slots[i].lock().unwrap() = Some(result);
                });
            }
        });

        let mut records = Vec::with_capacity(items.len());
        let mut failures = Vec::new();
        for (index, slot) in slots.into_iter().enumerate() {
            match slot.into_inner().unwrap().expect("every slot is filled") {
                Ok(r) => records.push(r),
                Err(error) => failures.push(ItemFailure { index, error }),
            }
        }
        if records.is_empty() {
            return Err(BatchError::AllFailed(failures));
        }
        Ok(BatchOutcome { records, failures })
    }
}

pub const PREDICTION_COLUMNS: [&str; 6] = ["item_id", "kind", "prediction", "provenance", "model_id", "prompt_version"];

#[derive(Debug, Error)]
pub enum PredictionFileError {
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: {reason}")]
    BadRow { row: u64, reason: String },
}

/// Write the predictions table.
pub fn write_predictions<W: Write>(records: &[PredictionRecord], sink: W) -> Result<(), PredictionFileError> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(PREDICTION_COLUMNS)?;
    for r in records {
        w.write_record([
            r.item_id.clone(),
            r.kind.as_str().to_string(),
            r.prediction.to_string(),
            r.provenance.as_str().to_string(),
            r.model_id.clone(),
            r.prompt_version.clone(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// A row of the predictions table.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub item_id: String,
    pub kind: PredictorKind,
    pub prediction: f64,
    pub provenance: Provenance,
    pub model_id: String,
    pub prompt_version: String,
}

pub fn read_predictions<R: Read>(source: R) -> Result<Vec<PredictionRow>, PredictionFileError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| PredictionFileError::MissingColumn(name.to_string()))
    };
    let (id_c, kind_c, pred_c) = (col("item_id")?, col("kind")?, col("prediction")?);
    let prov_c = headers.iter().position(|h| h == "provenance");
    let model_c = headers.iter().position(|h| h == "model_id");
    let ver_c = headers.iter().position(|h| h == "prompt_version");
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i as u64 + 1;
        let rec = rec?;
        let bad = |reason: String| PredictionFileError::BadRow { row, reason };
        let get = |c: usize| rec.get(c).unwrap_or("");
        let prediction: f64 =
            get(pred_c).parse().map_err(|_| bad(format!("prediction `{}` is not a number", get(pred_c))))?;
        out.push(PredictionRow {
            item_id: get(id_c).to_string(),
            kind: get(kind_c).parse().map_err(bad)?,
            prediction,
            provenance: match prov_c {
                Some(c) => get(c).parse().map_err(bad)?,
                None => Provenance::ModelCall,
            },
            model_id: model_c.map(|c| get(c).to_string()).unwrap_or_default(),
            prompt_version: ver_c.map(|c| get(c).to_string()).unwrap_or_default(),
        });
    }
    Ok(out)
}

/// Two-column submission file; predictions are clamped into [0, 1].
pub fn write_submission<W: Write>(rows: &[(String, f64)], sink: W) -> Result<(), PredictionFileError> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["item_id", "prediction"])?;
    for (id, p) in rows {
        let p = if p.is_nan() { 0.5 } else { p.clamp(0.0, 1.0) };
        w.write_record([id.clone(), p.to_string()])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::{completion_body, ClientConfig, HttpResponse};
    use crate::image::ImageError;
    use crate::simulation::mock::{mock_analysis_json, ScriptedTransport};
    use std::collections::HashMap;

    const SVG: &[u8] = br#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 10 10"><rect width="10" height="10" fill="red"/></svg>"#;

    #[derive(Default)]
    struct CountingSource {
        files: HashMap<String, Vec<u8>>,
        reads: AtomicUsize,
    }

    impl ImageSource for CountingSource {
        fn load(&self, url: &str) -> Result<Vec<u8>, ImageError> {
            self.reads.fetch_add(1, Ordering::SeqCst);
            self.files.get(url).cloned().ok_or_else(|| ImageError::Io { url: url.into(), reason: "missing".into() })
        }
    }

    fn item(id: &str, url: &str) -> ItemContent {
        ItemContent {
            item_id: id.into(),
            image_url: url.into(),
            question_text: format!("Question for {id}?"),
            possible_responses: vec!["A".into(), "B".into(), "C".into()],
        }
    }

    fn predictor(
        transport: Arc<ScriptedTransport>,
        source: Arc<CountingSource>,
        cache: Option<std::path::PathBuf>,
    ) -> Predictor {
        let config = ClientConfig { cache_dir: cache, ..Default::default() };
        let client = Client::with_transport(config, transport).api_key("k").without_rate_limit();
        Predictor::new(Arc::new(client), source, ModelConfig::default(), BatchConfig::default())
    }

    #[test]
    fn text_only_passes_prediction_through_then_hits_cache() {
        let dir = tempfile::tempdir().unwrap();
        let t = Arc::new(ScriptedTransport::with_contents([mock_analysis_json(PredictorKind::TextOnly, 0.42)]));
        let src = Arc::new(CountingSource::default());
        let p = predictor(t.clone(), src.clone(), Some(dir.path().to_path_buf()));
        let first = p.predict_item(PredictorKind::TextOnly, &item("q1", "q1.png")).unwrap();
        assert_eq!((first.prediction, first.provenance), (0.42, Provenance::ModelCall));
        assert!(first.analysis.is_some());
        let second = p.predict_item(PredictorKind::TextOnly, &item("q1", "q1.png")).unwrap();
        assert_eq!((second.prediction, second.provenance), (0.42, Provenance::CacheHit));
        assert_eq!(t.calls(), 1);
        assert_eq!(src.reads.load(Ordering::SeqCst), 0, "text pipeline must not read images");
    }

    #[test]
    fn svg_without_rasterization_falls_back() {
        let t = Arc::new(ScriptedTransport::new(vec![]));
        let src = Arc::new(CountingSource {
            files: HashMap::from([("c.svg".to_string(), SVG.to_vec())]),
            ..Default::default()
        });
        let p = predictor(t.clone(), src, None);
        let rec = p.predict_item(PredictorKind::Multimodal, &item("q", "c.svg")).unwrap();
        assert_eq!(rec.prediction, 0.5);
        assert_eq!(rec.provenance, Provenance::Fallback);
        assert!(rec.analysis.is_none());
        assert_eq!(t.calls(), 0);
    }

    #[test]
    fn one_corrective_reask_then_error() {
        let t = Arc::new(ScriptedTransport::with_contents(["{\"prediction\": 2}", "still not valid"]));
        let p = predictor(t.clone(), Arc::new(CountingSource::default()), None);
        let err = p.predict_item(PredictorKind::TextOnly, &item("q", "q.png")).unwrap_err();
        assert!(matches!(err.cause(), PredictionCause::Schema(_)));
        assert_eq!(t.calls(), 2);
        let reask: serde_json::Value = serde_json::from_slice(&t.requests()[1].body).unwrap();
        assert_eq!(reask["messages"].as_array().unwrap().len(), 4);
    }

    #[test]
    fn corrective_reask_can_recover() {
        let t = Arc::new(ScriptedTransport::with_contents([
            "{\"oops\": true}".to_string(),
            mock_analysis_json(PredictorKind::TextOnly, 0.3),
        ]));
        let p = predictor(t.clone(), Arc::new(CountingSource::default()), None);
        let rec = p.predict_item(PredictorKind::TextOnly, &item("q", "q.png")).unwrap();
        assert_eq!(rec.prediction, 0.3);
        assert_eq!(t.calls(), 2);
    }

    #[test]
    fn batch_keeps_order_and_records_failures() {
        let t = Arc::new(ScriptedTransport::new(vec![]));
        // script enough good answers; the failing item has an unreadable image
        for _ in 0..3 {
            t.push(Ok(HttpResponse::ok(completion_body(&mock_analysis_json(PredictorKind::VisionOnly, 0.6)))));
        }
        let png = crate::image::rasterize_svg(SVG, 4).unwrap();
        let src = Arc::new(CountingSource {
            files: HashMap::from([
                ("a.png".to_string(), png.clone()),
                ("b.png".to_string(), png.clone()),
                ("d.png".to_string(), png),
            ]),
            ..Default::default()
        });
        let p = predictor(t, src, None);
        let items = [item("a", "a.png"), item("b", "b.png"), item("c", "missing.png"), item("d", "d.png")];
        let out = p.predict_batch(PredictorKind::VisionOnly, &items).unwrap();
        let ids: Vec<_> = out.records.iter().map(|r| r.item_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "d"]);
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.failures[0].index, 2);
        assert!(matches!(out.failures[0].error.cause(), PredictionCause::Image(_)));
    }

    #[test]
    fn empty_batch_and_total_failure() {
        let p = predictor(Arc::new(ScriptedTransport::new(vec![])), Arc::new(CountingSource::default()), None);
        assert!(matches!(p.predict_batch(PredictorKind::TextOnly, &[]), Err(BatchError::EmptyBatch)));
        // scripted transport answers 500 once the script is empty
        let cfg = ClientConfig { max_retries: 0, cache_dir: None, ..Default::default() };
        let client = Client::with_transport(cfg, Arc::new(ScriptedTransport::new(vec![]))).api_key("k");
        let p = Predictor::new(
            Arc::new(client),
            Arc::new(CountingSource::default()),
            ModelConfig::default(),
            BatchConfig::default(),
        );
        assert!(matches!(
            p.predict_batch(PredictorKind::TextOnly, &[item("a", "a.png")]),
            Err(BatchError::AllFailed(f)) if f.len() == 1
        ));
    }

    #[test]
    fn predictions_csv_round_trip() {
        let rec = PredictionRecord {
            item_id: "q1".into(),
            kind: PredictorKind::Multimodal,
            prediction: 0.123456789,
            provenance: Provenance::Fallback,
            analysis: None,
            prompt_version: PROMPT_VERSION.into(),
            model_id: "m".into(),
            timestamp: Utc::now(),
        };
        let mut buf = Vec::new();
        write_predictions(std::slice::from_ref(&rec), &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("item_id,kind,prediction,provenance,model_id,prompt_version\n"));
        let rows = read_predictions(buf.as_slice()).unwrap();
        assert_eq!(rows[0].prediction, rec.prediction);
        assert_eq!(rows[0].provenance, Provenance::Fallback);
        assert_eq!(rows[0].kind, PredictorKind::Multimodal);
    }

    #[test]
    fn submission_clamps() {
        let mut buf = Vec::new();
        write_submission(&[("a".into(), 1.2), ("b".into(), -0.1), ("c".into(), 0.4)], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "item_id,prediction\na,1\nb,0\nc,0.4\n");
    }
}
