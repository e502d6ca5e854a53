//! Analysis schemas for the three pipelines, prompt construction and
//! validation of schema-constrained model output.
//!
//! Each analysis variant is described once, as a table of [`FieldSpec`]s.
//! That table drives both the JSON schema sent to the endpoint and the
//! field-by-field validation of what comes back, so the two cannot drift.

mod request;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

pub use request::{build_request, ChatRequest, Correction, ModelConfig, UserPart, PROMPT_VERSION};

/// Which inputs a pipeline gets to see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictorKind {
    #[serde(rename = "text")]
    TextOnly,
    #[serde(rename = "vision")]
    VisionOnly,
    Multimodal,
}

impl PredictorKind {
    pub const ALL: [PredictorKind; 3] = [PredictorKind::TextOnly, PredictorKind::VisionOnly, PredictorKind::Multimodal];

    pub fn as_str(self) -> &'static str {
        match self {
            PredictorKind::TextOnly => "text",
            PredictorKind::VisionOnly => "vision",
            PredictorKind::Multimodal => "multimodal",
        }
    }

    pub fn needs_image(self) -> bool {
        !matches!(self, PredictorKind::TextOnly)
    }

    pub fn sees_text(self) -> bool {
        !matches!(self, PredictorKind::VisionOnly)
    }

    fn schema_name(self) -> &'static str {
        match self {
            PredictorKind::TextOnly => "text_analysis",
            PredictorKind::VisionOnly => "vision_analysis",
            PredictorKind::Multimodal => "multimodal_analysis",
        }
    }
}

impl fmt::Display for PredictorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PredictorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "text" | "text_only" | "textonly" => Ok(PredictorKind::TextOnly),
            "vision" | "vision_only" | "visiononly" => Ok(PredictorKind::VisionOnly),
            "multimodal" => Ok(PredictorKind::Multimodal),
            other => Err(format!("unknown predictor kind `{other}` (expected text, vision or multimodal)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CognitiveTaskType {
    RetrieveValue,
    FindExtremum,
    CompareValues,
    Aggregate,
    FindCorrelation,
    MakePrediction,
    Other,
}

const TASK_TYPES: &[&str] =
    &["retrieve_value", "find_extremum", "compare_values", "aggregate", "find_correlation", "make_prediction", "other"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextAnalysis {
    pub cognitive_task_type: CognitiveTaskType,
    pub question_clarity: u8,
    pub information_integration_level: u8,
    pub option_count: u32,
    pub correct_answer_text: Option<String>,
    pub distractor_plausibility: u8,
    pub format_consistency: u8,
    pub prediction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisionAnalysis {
    pub chart_type: String,
    pub axis_clarity: u8,
    pub encoding_clarity: u8,
    pub readability: u8,
    pub clutter_level: u8,
    pub data_series_count: u32,
    pub annotations_present: bool,
    pub visual_complexity: u8,
    pub prediction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultimodalAnalysis {
    pub visual_summary: String,
    pub textual_demands: String,
    pub option_quality: String,
    pub interaction_notes: String,
    pub prediction: f64,
}

/// Parsed model output, one variant per pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ItemAnalysis {
    Text(TextAnalysis),
    Vision(VisionAnalysis),
    Multimodal(MultimodalAnalysis),
}

impl ItemAnalysis {
    /// Predicted easiness (proportion correct).
    pub fn prediction(&self) -> f64 {
        match self {
            ItemAnalysis::Text(a) => a.prediction,
            ItemAnalysis::Vision(a) => a.prediction,
            ItemAnalysis::Multimodal(a) => a.prediction,
        }
    }

    pub fn kind(&self) -> PredictorKind {
        match self {
            ItemAnalysis::Text(_) => PredictorKind::TextOnly,
            ItemAnalysis::Vision(_) => PredictorKind::VisionOnly,
            ItemAnalysis::Multimodal(_) => PredictorKind::Multimodal,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("analysis serializes")
    }
}

/// Value domain of one schema field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FieldKind {
    /// Real number in [0, 1].
    Probability,
    /// Integer on a closed ordinal scale.
    Ordinal {
        min: i64,
        max: i64,
    },
    /// Non-negative integer.
    Count,
    Text,
    OptionalText,
    Flag,
    Choice(&'static [&'static str]),
}

#[derive(Debug, Clone, Copy)]
pub struct FieldSpec {
    pub name: &'static str,
    pub kind: FieldKind,
    pub description: &'static str,
}

const LIKERT: FieldKind = FieldKind::Ordinal { min: 1, max: 5 };

const PREDICTION: FieldSpec = FieldSpec {
    name: "prediction",
    kind: FieldKind::Probability,
    description: "Estimated proportion of test takers answering correctly, between 0 and 1.",
};

#[rustfmt::skip]
const TEXT_FIELDS: &[FieldSpec] = &[
    FieldSpec { name: "cognitive_task_type", kind: FieldKind::Choice(TASK_TYPES), description: "Main cognitive task the question requires." },
    FieldSpec { name: "question_clarity", kind: LIKERT, description: "Clarity of the question wording, 1 (confusing) to 5 (clear)." },
    FieldSpec { name: "information_integration_level", kind: LIKERT, description: "Amount of information to combine, 1 (single lookup) to 5 (many steps)." },
    FieldSpec { name: "option_count", kind: FieldKind::Count, description: "Number of answer options." },
    FieldSpec { name: "correct_answer_text", kind: FieldKind::OptionalText, description: "Text of the option believed correct, or null." },
    FieldSpec { name: "distractor_plausibility", kind: LIKERT, description: "Plausibility of the wrong options, 1 (obviously wrong) to 5 (very plausible)." },
    FieldSpec { name: "format_consistency", kind: LIKERT, description: "Consistency of option format, 1 (inconsistent) to 5 (uniform)." },
    PREDICTION,
];

#[rustfmt::skip]
const VISION_FIELDS: &[FieldSpec] = &[
    FieldSpec { name: "chart_type", kind: FieldKind::Text, description: "Kind of chart shown." },
    FieldSpec { name: "axis_clarity", kind: LIKERT, description: "Clarity of axes, scales and labels, 1 to 5." },
    FieldSpec { name: "encoding_clarity", kind: LIKERT, description: "Clarity of the data encoding, 1 to 5." },
    FieldSpec { name: "readability", kind: LIKERT, description: "Legibility of text and marks, 1 to 5." },
    FieldSpec { name: "clutter_level", kind: LIKERT, description: "Visual clutter, 1 (minimal) to 5 (heavy)." },
    FieldSpec { name: "data_series_count", kind: FieldKind::Count, description: "Number of distinct data series." },
    FieldSpec { name: "annotations_present", kind: FieldKind::Flag, description: "Whether annotations or data labels are present." },
    FieldSpec { name: "visual_complexity", kind: LIKERT, description: "Overall visual complexity, 1 (simple) to 5 (complex)." },
    PREDICTION,
];

#[rustfmt::skip]
const MULTIMODAL_FIELDS: &[FieldSpec] = &[
    FieldSpec { name: "visual_summary", kind: FieldKind::Text, description: "Visual elements relevant to the question." },
    FieldSpec { name: "textual_demands", kind: FieldKind::Text, description: "What the question demands of the reader." },
    FieldSpec { name: "option_quality", kind: FieldKind::Text, description: "Quality of the answer options and distractors." },
    FieldSpec { name: "interaction_notes", kind: FieldKind::Text, description: "How the chart and the question interact." },
    PREDICTION,
];

pub fn fields(kind: PredictorKind) -> &'static [FieldSpec] {
    match kind {
        PredictorKind::TextOnly => TEXT_FIELDS,
        PredictorKind::VisionOnly => VISION_FIELDS,
        PredictorKind::Multimodal => MULTIMODAL_FIELDS,
    }
}

fn field_schema(spec: &FieldSpec) -> Value {
    let mut s = match spec.kind {
        FieldKind::Probability => json!({"type": "number", "minimum": 0, "maximum": 1}),
        FieldKind::Ordinal { min, max } => json!({"type": "integer", "minimum": min, "maximum": max}),
        FieldKind::Count => json!({"type": "integer", "minimum": 0}),
        FieldKind::Text => json!({"type": "string"}),
        FieldKind::OptionalText => json!({"type": ["string", "null"]}),
        FieldKind::Flag => json!({"type": "boolean"}),
        FieldKind::Choice(values) => json!({"type": "string", "enum": values}),
    };
    s["description"] = Value::String(spec.description.to_string());
    s
}

/// JSON schema for a variant, in strict form: every field required and no
/// additional properties.
pub fn output_schema(kind: PredictorKind) -> Value {
    let specs = fields(kind);
    let properties: Map<String, Value> = specs.iter().map(|f| (f.name.to_string(), field_schema(f))).collect();
    let required: Vec<&str> = specs.iter().map(|f| f.name).collect();
    json!({
        "type": "object",
        "properties": properties,
        "required": required,
        "additionalProperties": false,
    })
}

pub fn schema_name(kind: PredictorKind) -> &'static str {
    kind.schema_name()
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SchemaError {
    #[error("schema violation at `{field}`: {reason}")]
    SchemaViolation { field: String, reason: String },
    #[error("`{field}` = {value} is out of range")]
    OutOfRange { field: String, value: f64 },
    #[error("{kind} request needs an image but none was supplied")]
    MissingImage { kind: PredictorKind },
    #[error("text-only requests must not carry an image")]
    UnexpectedImage,
}

impl SchemaError {
    /// Errors a corrective re-ask may fix.
    pub fn is_retryable(&self) -> bool {
        matches!(self, SchemaError::SchemaViolation { .. } | SchemaError::OutOfRange { .. })
    }

    fn violation(field: &str, reason: impl Into<String>) -> Self {
        SchemaError::SchemaViolation { field: field.to_string(), reason: reason.into() }
    }
}

fn check_field(spec: &FieldSpec, value: &Value) -> Result<(), SchemaError> {
    let name = spec.name;
    let wrong_type = |expected: &str| SchemaError::violation(name, format!("expected {expected}, found {value}"));
    match spec.kind {
        FieldKind::Probability => {
            let x = value.as_f64().ok_or_else(|| wrong_type("a number"))?;
            if !(0.0..=1.0).contains(&x) {
                return Err(SchemaError::OutOfRange { field: name.into(), value: x });
            }
        }
        FieldKind::Ordinal { min, max } => {
            let x = integer(value).ok_or_else(|| wrong_type("an integer"))?;
            if x < min as f64 || x > max as f64 {
                return Err(SchemaError::OutOfRange { field: name.into(), value: x });
            }
        }
        FieldKind::Count => {
            let x = integer(value).ok_or_else(|| wrong_type("an integer"))?;
            if x < 0.0 || x > u32::MAX as f64 {
                return Err(SchemaError::OutOfRange { field: name.into(), value: x });
            }
        }
        FieldKind::Text => {
            value.as_str().ok_or_else(|| wrong_type("a string"))?;
        }
        FieldKind::OptionalText => {
            if !(value.is_null() || value.is_string()) {
                return Err(wrong_type("a string or null"));
            }
        }
        FieldKind::Flag => {
            value.as_bool().ok_or_else(|| wrong_type("a boolean"))?;
        }
        FieldKind::Choice(choices) => {
            let s = value.as_str().ok_or_else(|| wrong_type("a string"))?;
            if !choices.contains(&s) {
                return Err(SchemaError::violation(name, format!("`{s}` is not one of {choices:?}")));
            }
        }
    }
    Ok(())
}

/// Integral JSON numbers, including forms like `3.0`.
fn integer(value: &Value) -> Option<f64> {
    if let Some(i) = value.as_i64() {
        return Some(i as f64);
    }
    value.as_f64().filter(|x| x.fract() == 0.0)
}

/// Strip a surrounding markdown code fence, which some endpoints add even in
/// structured-output mode.
fn strip_fence(raw: &str) -> &str {
    let t = raw.trim();
    let Some(rest) = t.strip_prefix("```") else { return t };
    let rest = rest.strip_prefix("json").unwrap_or(rest);
    rest.strip_suffix("```").unwrap_or(rest).trim()
}

/// Validate and parse model output for the given pipeline.
pub fn parse_structured_response(raw: &str, kind: PredictorKind) -> Result<ItemAnalysis, SchemaError> {
    let value: Value = serde_json::from_str(strip_fence(raw))
        .map_err(|e| SchemaError::violation("$", format!("not valid JSON: {e}")))?;
    let Value::Object(mut obj) = value else {
        return Err(SchemaError::violation("$", "expected a JSON object"));
    };
    let specs = fields(kind);
    for spec in specs {
        let v = obj.get(spec.name).ok_or_else(|| SchemaError::violation(spec.name, "missing"))?;
        check_field(spec, v)?;
    }
    if let Some(extra) = obj.keys().find(|k| !specs.iter().any(|s| s.name == k.as_str())) {
        return Err(SchemaError::violation(extra, "unknown field"));
    }
    // normalise integral floats such as 3.0 so serde accepts them as integers
    for spec in specs {
        if matches!(spec.kind, FieldKind::Ordinal { .. } | FieldKind::Count) {
            if let Some(x) = obj.get(spec.name).and_then(integer) {
                obj.insert(spec.name.to_string(), json!(x as u64));
            }
        }
    }
    let value = Value::Object(obj);
    let parsed = match kind {
        PredictorKind::TextOnly => serde_json::from_value(value).map(ItemAnalysis::Text),
        PredictorKind::VisionOnly => serde_json::from_value(value).map(ItemAnalysis::Vision),
        PredictorKind::Multimodal => serde_json::from_value(value).map(ItemAnalysis::Multimodal),
    };
    parsed.map_err(|e| SchemaError::violation("$", e.to_string()))
}
