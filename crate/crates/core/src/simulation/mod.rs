//! Synthetic response data from a Rasch model, plus mock predictors and
//! transports so the whole pipeline can be checked without a network.

pub mod mock;

use std::collections::HashMap;

use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::ingestion::{ItemContent, ResponseRecord};
use crate::rng::{self, SplitMix64};

#[derive(Debug, Error, PartialEq)]
pub enum SimulationError {
    #[error("need at least one item and one respondent")]
    Empty,
    #[error("item `{0}` is not in the truth table")]
    UnknownItem(String),
    #[error("noise standard deviation must be finite and non-negative, got {0}")]
    InvalidNoise(f64),
    #[error("non-finite latent parameter for `{0}`")]
    NonFinite(String),
}

/// An item with a Rasch difficulty parameter (logits).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentItem {
    pub item_id: String,
    pub b: f64,
    pub content: ItemContent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Respondent {
    pub respondent_id: String,
    /// Ability in logits.
    pub theta: f64,
}

/// P(correct) under the Rasch model.
pub fn rasch_probability(theta: f64, b: f64) -> f64 {
    1.0 / (1.0 + (-(theta - b)).exp())
}

/// Analytic expected easiness of an item over a respondent population.
pub fn expected_easiness(item: &LatentItem, respondents: &[Respondent]) -> f64 {
    respondents.iter().map(|r| rasch_probability(r.theta, item.b)).sum::<f64>() / respondents.len() as f64
}

/// Simulate one response per (respondent, item) pair.
///
/// The uniform draw for pair `(r, i)` is draw number `r * n_items + i` of
/// the SplitMix64 stream seeded by `seed`, so output does not depend on
/// evaluation order. Records are emitted respondent-major.
pub fn simulate_responses(
    items: &[LatentItem],
    respondents: &[Respondent],
    seed: u64,
) -> Result<Vec<ResponseRecord>, SimulationError> {
    if items.is_empty() || respondents.is_empty() {
        return Err(SimulationError::Empty);
    }
    if let Some(i) = items.iter().find(|i| !i.b.is_finite()) {
        return Err(SimulationError::NonFinite(i.item_id.clone()));
    }
    if let Some(r) = respondents.iter().find(|r| !r.theta.is_finite()) {
        return Err(SimulationError::NonFinite(r.respondent_id.clone()));
    }
    let n_items = items.len() as u64;
    let mut out = Vec::with_capacity(items.len() * respondents.len());
    for (r_idx, resp) in respondents.iter().enumerate() {
        for (i_idx, item) in items.iter().enumerate() {
            let u = rng::unit_f64(rng::draw(seed, r_idx as u64 * n_items + i_idx as u64));
            let correct = u < rasch_probability(resp.theta, item.b);
            out.push(ResponseRecord {
                item_id: item.item_id.clone(),
                image_url: item.content.image_url.clone(),
                question_text: item.content.question_text.clone(),
                possible_responses: item.content.possible_responses.clone(),
                incorrect_response: !correct,
                participant_id: Some(resp.respondent_id.clone()),
            });
        }
    }
    Ok(out)
}

/// `n` items with `b ~ N(0, 1)` and placeholder content. Ids are zero-padded
/// so lexicographic order matches generation order.
pub fn synthetic_items(n: usize, seed: u64) -> Vec<LatentItem> {
    let mut rng = SplitMix64::new(rng::derive_seed(seed, "items"));
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    (0..n)
        .map(|i| {
            let item_id = format!("item_{i:04}");
            LatentItem {
                b: normal.sample(&mut rng),
                content: ItemContent {
                    item_id: item_id.clone(),
                    image_url: format!("images/{item_id}.png"),
                    question_text: format!("Synthetic question {i}: which category has the largest value?"),
                    possible_responses: ["A", "B", "C", "D"].iter().map(|s| s.to_string()).collect(),
                },
                item_id,
            }
        })
        .collect()
}

/// `n` respondents with `theta ~ N(0, 1)`.
pub fn synthetic_respondents(n: usize, seed: u64) -> Vec<Respondent> {
    let mut rng = SplitMix64::new(rng::derive_seed(seed, "respondents"));
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    (0..n).map(|i| Respondent { respondent_id: format!("p{i:06}"), theta: normal.sample(&mut rng) }).collect()
}

/// Ground truth plus clamped Gaussian noise: `clamp(truth + N(0, sd), 0, 1)`.
///
/// The noise for an item depends only on `(seed, item_id)`.
pub fn mock_predictor(
    item_id: &str,
    truth: &HashMap<String, f64>,
    noise_sd: f64,
    seed: u64,
) -> Result<f64, SimulationError> {
    if !(noise_sd.is_finite() && noise_sd >= 0.0) {
        return Err(SimulationError::InvalidNoise(noise_sd));
    }
    let base = *truth.get(item_id).ok_or_else(|| SimulationError::UnknownItem(item_id.to_string()))?;
    if noise_sd == 0.0 {
        return Ok(base.clamp(0.0, 1.0));
    }
    let mut rng = SplitMix64::new(rng::derive_seed(seed, item_id));
    let noise = Normal::new(0.0, noise_sd).expect("valid normal").sample(&mut rng);
    Ok((base + noise).clamp(0.0, 1.0))
}
