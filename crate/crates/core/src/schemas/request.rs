use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{output_schema, schema_name, PredictorKind, SchemaError};
use crate::image::EncodedImage;
use crate::ingestion::ItemContent;

/// Version tag of the shipped prompt templates. Recorded with every prediction.
pub const PROMPT_VERSION: &str = "v1";

const TEXT_SYSTEM: &str = include_str!("../../prompts/v1/text_only.system.txt");
const TEXT_USER: &str = include_str!("../../prompts/v1/text_only.user.txt");
const VISION_SYSTEM: &str = include_str!("../../prompts/v1/vision_only.system.txt");
const VISION_USER: &str = include_str!("../../prompts/v1/vision_only.user.txt");
const MULTIMODAL_SYSTEM: &str = include_str!("../../prompts/v1/multimodal.system.txt");
const MULTIMODAL_USER: &str = include_str!("../../prompts/v1/multimodal.user.txt");
const CORRECTION: &str = include_str!("../../prompts/v1/correction.txt");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub model_id: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { model_id: "gpt-4.1-nano".to_string(), temperature: 0.0, max_output_tokens: 1024 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum UserPart {
    Text(String),
    Image { media_type: String, data_base64: String },
}

/// A rejected reply and the instruction asking the model to fix it.
#[derive(Debug, Clone, PartialEq)]
pub struct Correction {
    pub previous_output: String,
    pub instruction: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub model_id: String,
    pub kind: PredictorKind,
    pub system_prompt: String,
    pub user_parts: Vec<UserPart>,
    pub output_schema: Value,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub correction: Option<Correction>,
}

impl ChatRequest {
    pub fn image_count(&self) -> usize {
        self.user_parts.iter().filter(|p| matches!(p, UserPart::Image { .. })).count()
    }

    /// Text of every prompt the model will see, concatenated.
    pub fn prompt_text(&self) -> String {
        let mut out = self.system_prompt.clone();
        for part in &self.user_parts {
            if let UserPart::Text(t) = part {
                out.push('\n');
                out.push_str(t);
            }
        }
        out
    }

    /// The same request with a corrective follow-up turn appended.
    pub fn with_correction(&self, previous_output: &str, error: &str) -> ChatRequest {
        let mut next = self.clone();
        next.correction = Some(Correction {
            previous_output: previous_output.to_string(),
            instruction: render(CORRECTION, &[("error", error)]),
        });
        next
    }

    /// OpenAI-compatible chat-completions body. Keys are emitted in sorted
    /// order, so equal requests serialize to identical bytes.
    pub fn to_wire_json(&self) -> Value {
        let content: Vec<Value> = self
            .user_parts
            .iter()
            .map(|part| match part {
                UserPart::Text(text) => json!({"type": "text", "text": text}),
                UserPart::Image { media_type, data_base64 } => json!({
                    "type": "image_url",
                    "image_url": {"url": format!("data:{media_type};base64,{data_base64}")},
                }),
            })
            .collect();
        let mut messages =
            vec![json!({"role": "system", "content": self.system_prompt}), json!({"role": "user", "content": content})];
        if let Some(c) = &self.correction {
            messages.push(json!({"role": "assistant", "content": c.previous_output}));
            messages.push(json!({"role": "user", "content": c.instruction}));
        }
        json!({
            "model": self.model_id,
            "messages": messages,
            "temperature": self.temperature,
            "max_tokens": self.max_output_tokens,
            "response_format": {
                "type": "json_schema",
                "json_schema": {
                    "name": schema_name(self.kind),
                    "strict": true,
                    "schema": self.output_schema,
                },
            },
        })
    }

    pub fn to_wire_body(&self) -> Vec<u8> {
        serde_json::to_vec(&self.to_wire_json()).expect("request serializes")
    }
}

/// Substitute `{{name}}` placeholders in a single pass over the template, so
/// placeholder-like text inside substituted values is left alone.
fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        match after.find("}}") {
            Some(end) => {
                let name = after[..end].trim();
                match vars.iter().find(|(k, _)| *k == name) {
                    Some((_, v)) => out.push_str(v),
                    None => out.push_str(&rest[start..start + 2 + end + 2]),
                }
                rest = &after[end + 2..];
            }
            None => {
                out.push_str(&rest[start..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

fn numbered(options: &[String]) -> String {
    options.iter().enumerate().map(|(i, o)| format!("{}. {o}", i + 1)).collect::<Vec<_>>().join("\n")
}

fn templates(kind: PredictorKind) -> (&'static str, &'static str) {
    match kind {
        PredictorKind::TextOnly => (TEXT_SYSTEM, TEXT_USER),
        PredictorKind::VisionOnly => (VISION_SYSTEM, VISION_USER),
        PredictorKind::Multimodal => (MULTIMODAL_SYSTEM, MULTIMODAL_USER),
    }
}

/// Assemble the request for one item. An image must be supplied exactly when
/// the pipeline uses one.
pub fn build_request(
    kind: PredictorKind,
    item: &ItemContent,
    image: Option<&EncodedImage>,
    config: &ModelConfig,
) -> Result<ChatRequest, SchemaError> {
    match (kind.needs_image(), image.is_some()) {
        (true, false) => return Err(SchemaError::MissingImage { kind }),
        (false, true) => return Err(SchemaError::UnexpectedImage),
        _ => {}
    }
    let (system, user) = templates(kind);
    let options = numbered(&item.possible_responses);
    let user_text = if kind.sees_text() {
        render(user, &[("question_text", &item.question_text), ("options", &options)])
    } else {
        user.to_string()
    };
    let mut user_parts = vec![UserPart::Text(user_text.trim_end().to_string())];
    if let Some(img) = image {
        user_parts.push(UserPart::Image { media_type: img.media_type.clone(), data_base64: img.base64() });
    }
    Ok(ChatRequest {
        model_id: config.model_id.clone(),
        kind,
        system_prompt: system.trim_end().to_string(),
        user_parts,
        output_schema: output_schema(kind),
        temperature: config.temperature,
        max_output_tokens: config.max_output_tokens,
        correction: None,
    })
}
