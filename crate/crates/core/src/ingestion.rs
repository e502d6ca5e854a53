//! Parsing of participant-response tables and item manifests.
//!
//! Both inputs are UTF-8 CSV with a header row. `possible_responses` is a
//! single cell holding the answer options joined by a sub-delimiter (`|` by
//! default). Cell values are trimmed, empty options are dropped, and columns
//! we do not model are ignored.

use std::collections::HashSet;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const COL_ITEM_ID: &str = "item_id";
pub const COL_IMAGE_URL: &str = "image_url";
pub const COL_QUESTION_TEXT: &str = "question_text";
pub const COL_POSSIBLE_RESPONSES: &str = "possible_responses";
pub const COL_INCORRECT_RESPONSE: &str = "incorrect_response";
pub const COL_PARTICIPANT_ID: &str = "participant_id";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("malformed row {row}: {reason}")]
    MalformedRow { row: u64, reason: String },
    #[error("row {row}: `{value}` is not a valid incorrect_response (expected 0, 1, true or false)")]
    InvalidOutcome { row: u64, value: String },
    #[error("duplicate item_id `{0}` in manifest")]
    DuplicateItem(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Table dialect.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseOptions {
    /// Field delimiter of the table itself.
    pub delimiter: u8,
    /// Separator between answer options inside `possible_responses`.
    pub options_delimiter: String,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self { delimiter: b',', options_delimiter: "|".to_string() }
    }
}

/// What a predictor is allowed to see about an item.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ItemContent {
    pub item_id: String,
    pub image_url: String,
    pub question_text: String,
    pub possible_responses: Vec<String>,
}

/// One participant's answer to one item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub item_id: String,
    pub image_url: String,
    pub question_text: String,
    pub possible_responses: Vec<String>,
    /// `true` when the participant answered incorrectly.
    pub incorrect_response: bool,
    pub participant_id: Option<String>,
}

impl ResponseRecord {
    pub fn content(&self) -> ItemContent {
        ItemContent {
            item_id: self.item_id.clone(),
            image_url: self.image_url.clone(),
            question_text: self.question_text.clone(),
            possible_responses: self.possible_responses.clone(),
        }
    }
}

/// Split a `possible_responses` cell into trimmed, non-empty options.
pub fn split_options(cell: &str, delimiter: &str) -> Vec<String> {
    cell.split(delimiter).map(str::trim).filter(|s| !s.is_empty()).map(str::to_string).collect()
}

pub fn join_options(options: &[String], delimiter: &str) -> String {
    options.join(delimiter)
}

fn parse_outcome(raw: &str, row: u64) -> Result<bool, IngestError> {
    match raw.to_ascii_lowercase().as_str() {
        "1" | "true" => Ok(true),
        "0" | "false" => Ok(false),
        _ => Err(IngestError::InvalidOutcome { row, value: raw.to_string() }),
    }
}

struct Columns {
    item_id: usize,
    image_url: usize,
    question_text: usize,
    possible_responses: usize,
    incorrect_response: Option<usize>,
    participant_id: Option<usize>,
}

impl Columns {
    fn locate(headers: &csv::StringRecord, with_outcome: bool) -> Result<Self, IngestError> {
        let find = |name: &str| headers.iter().position(|h| h == name);
        let require = |name: &str| find(name).ok_or_else(|| IngestError::MissingColumn(name.to_string()));
        Ok(Self {
            item_id: require(COL_ITEM_ID)?,
            image_url: require(COL_IMAGE_URL)?,
            question_text: require(COL_QUESTION_TEXT)?,
            possible_responses: require(COL_POSSIBLE_RESPONSES)?,
            incorrect_response: if with_outcome { Some(require(COL_INCORRECT_RESPONSE)?) } else { None },
            participant_id: find(COL_PARTICIPANT_ID),
        })
    }
}

fn reader<R: Read>(source: R, options: &ParseOptions) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .delimiter(options.delimiter)
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(false)
        .from_reader(source)
}

fn malformed(row: u64, reason: impl Into<String>) -> IngestError {
    IngestError::MalformedRow { row, reason: reason.into() }
}

/// Convert csv errors on a data row into `MalformedRow` with the data row number.
fn row_error(err: csv::Error, row: u64) -> IngestError {
    match err.kind() {
        csv::ErrorKind::UnequalLengths { expected_len, len, .. } => {
            malformed(row, format!("expected {expected_len} fields, found {len}"))
        }
        csv::ErrorKind::Utf8 { .. } => malformed(row, "invalid UTF-8"),
        _ => IngestError::Csv(err),
    }
}

fn content_from_row(
    record: &csv::StringRecord,
    cols: &Columns,
    row: u64,
    options: &ParseOptions,
) -> Result<ItemContent, IngestError> {
    let cell = |idx: usize| record.get(idx).unwrap_or("");
    let item_id = cell(cols.item_id);
    if item_id.is_empty() {
        return Err(malformed(row, "empty item_id"));
    }
    let question_text = cell(cols.question_text);
    if question_text.is_empty() {
        return Err(malformed(row, "empty question_text"));
    }
    let possible_responses = split_options(cell(cols.possible_responses), &options.options_delimiter);
    if possible_responses.is_empty() {
        return Err(malformed(row, "possible_responses has no options"));
    }
    Ok(ItemContent {
        item_id: item_id.to_string(),
        image_url: cell(cols.image_url).to_string(),
        question_text: question_text.to_string(),
        possible_responses,
    })
}

/// Parse a response table. Row numbers in errors count data rows from 1.
pub fn parse_response_records<R: Read>(source: R, options: &ParseOptions) -> Result<Vec<ResponseRecord>, IngestError> {
    let mut rdr = reader(source, options);
    let cols = Columns::locate(rdr.headers()?, true)?;
    let outcome_col = cols.incorrect_response.expect("outcome column required");

    let mut out = Vec::new();
    for (idx, result) in rdr.records().enumerate() {
        let row = idx as u64 + 1;
        let record = result.map_err(|e| row_error(e, row))?;
        let content = content_from_row(&record, &cols, row, options)?;
        let incorrect_response = parse_outcome(record.get(outcome_col).unwrap_or(""), row)?;
        let participant_id =
            cols.participant_id.and_then(|i| record.get(i)).filter(|s| !s.is_empty()).map(str::to_string);
        out.push(ResponseRecord {
            item_id: content.item_id,
            image_url: content.image_url,
            question_text: content.question_text,
            possible_responses: content.possible_responses,
            incorrect_response,
            participant_id,
        });
    }
    Ok(out)
}

/// Parse an item manifest (no outcomes). Duplicate ids are rejected.
pub fn parse_item_manifest<R: Read>(source: R, options: &ParseOptions) -> Result<Vec<ItemContent>, IngestError> {
    let mut rdr = reader(source, options);
    let cols = Columns::locate(rdr.headers()?, false)?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (idx, result) in rdr.records().enumerate() {
        let row = idx as u64 + 1;
        let record = result.map_err(|e| row_error(e, row))?;
        let content = content_from_row(&record, &cols, row, options)?;
        if !seen.insert(content.item_id.clone()) {
            return Err(IngestError::DuplicateItem(content.item_id));
        }
        out.push(content);
    }
    Ok(out)
}

/// Write response records in the same table format `parse_response_records` reads.
pub fn write_response_records<W: Write>(
    records: &[ResponseRecord],
    sink: W,
    options: &ParseOptions,
) -> Result<(), IngestError> {
    let mut wtr = csv::WriterBuilder::new().delimiter(options.delimiter).from_writer(sink);
    wtr.write_record([
        COL_ITEM_ID,
        COL_IMAGE_URL,
        COL_QUESTION_TEXT,
        COL_POSSIBLE_RESPONSES,
        COL_INCORRECT_RESPONSE,
        COL_PARTICIPANT_ID,
    ])?;
    for r in records {
        wtr.write_record([
            r.item_id.as_str(),
            r.image_url.as_str(),
            r.question_text.as_str(),
            &join_options(&r.possible_responses, &options.options_delimiter),
            if r.incorrect_response { "1" } else { "0" },
            r.participant_id.as_deref().unwrap_or(""),
        ])?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Write an item manifest.
pub fn write_item_manifest<W: Write>(
    items: &[ItemContent],
    sink: W,
    options: &ParseOptions,
) -> Result<(), IngestError> {
    let mut wtr = csv::WriterBuilder::new().delimiter(options.delimiter).from_writer(sink);
    wtr.write_record([COL_ITEM_ID, COL_IMAGE_URL, COL_QUESTION_TEXT, COL_POSSIBLE_RESPONSES])?;
    for item in items {
        wtr.write_record([
            item.item_id.as_str(),
            item.image_url.as_str(),
            item.question_text.as_str(),
            &join_options(&item.possible_responses, &options.options_delimiter),
        ])?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}
