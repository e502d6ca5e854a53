//! Per-item ground truth from response records, dataset splits and format filters.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{detect_format, ImageFormat};
use crate::ingestion::{self, IngestError, ItemContent, ParseOptions, ResponseRecord};
use crate::rng::{self, SplitMix64};

#[derive(Debug, Error)]
pub enum AggregateError {
    #[error("MissingData: no response records to aggregate")]
    MissingData,
    #[error("records for item `{0}` disagree on question_text, image_url or options")]
    InconsistentItemContent(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum SplitError {
    #[error("split fraction must lie strictly between 0 and 1, got {0}")]
    InvalidFraction(f64),
    #[error("cannot split an empty item list")]
    Empty,
}

/// Ground truth for one item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemAggregate {
    pub item: ItemContent,
    /// Proportion of responses that were incorrect.
    pub difficulty: f64,
    /// Proportion correct, `1 - difficulty`.
    pub easiness: f64,
    pub n_responses: u64,
}

impl ItemAggregate {
    /// Build from integer counts, dividing once.
    pub fn from_counts(item: ItemContent, n_incorrect: u64, n_responses: u64) -> Self {
        assert!(n_responses >= 1, "an aggregate needs at least one response");
        assert!(n_incorrect <= n_responses);
        let difficulty = n_incorrect as f64 / n_responses as f64;
        Self { item, difficulty, easiness: 1.0 - difficulty, n_responses }
    }

    pub fn item_id(&self) -> &str {
        &self.item.item_id
    }
}

/// Collapse responses into one aggregate per item, sorted by item id.
pub fn aggregate_items(records: &[ResponseRecord]) -> Result<Vec<ItemAggregate>, AggregateError> {
    if records.is_empty() {
        return Err(AggregateError::MissingData);
    }
    struct Tally<'a> {
        first: &'a ResponseRecord,
        incorrect: u64,
        total: u64,
    }
    let mut tallies: BTreeMap<&str, Tally<'_>> = BTreeMap::new();
    for rec in records {
        let tally = tallies.entry(rec.item_id.as_str()).or_insert(Tally { first: rec, incorrect: 0, total: 0 });
        let first = tally.first;
        if first.question_text != rec.question_text
            || first.image_url != rec.image_url
            || first.possible_responses != rec.possible_responses
        {
            return Err(AggregateError::InconsistentItemContent(rec.item_id.clone()));
        }
        tally.total += 1;
        tally.incorrect += u64::from(rec.incorrect_response);
    }
    Ok(tallies.into_values().map(|t| ItemAggregate::from_counts(t.first.content(), t.incorrect, t.total)).collect())
}

/// Two disjoint subsets of an item list.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitResult {
    pub validation: Vec<ItemAggregate>,
    pub test: Vec<ItemAggregate>,
    pub seed: u64,
    pub fraction: f64,
}

/// `floor(fraction * n)`, snapping products that land within 1e-9 of an
/// integer so that e.g. `0.29 * 100` yields 29 rather than 28.
pub fn validation_size(fraction: f64, n: usize) -> usize {
    let raw = fraction * n as f64;
    let nearest = raw.round();
    let size = if (raw - nearest).abs() < 1e-9 { nearest } else { raw.floor() };
    (size.max(0.0) as usize).min(n)
}

/// Shuffle with Fisher–Yates driven by SplitMix64(`seed`), then take the
/// first `floor(fraction * N)` items as validation and the rest as test.
pub fn split_dataset(items: &[ItemAggregate], fraction: f64, seed: u64) -> Result<SplitResult, SplitError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(SplitError::InvalidFraction(fraction));
    }
    if items.is_empty() {
        return Err(SplitError::Empty);
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    rng::shuffle(&mut order, &mut SplitMix64::new(seed));
    let cut = validation_size(fraction, items.len());
    let pick = |idx: &[usize]| idx.iter().map(|&i| items[i].clone()).collect::<Vec<_>>();
    Ok(SplitResult { validation: pick(&order[..cut]), test: pick(&order[cut..]), seed, fraction })
}

/// Keep items whose image URL classifies as one of `allowed`, in input order.
/// Items whose format cannot be determined are dropped.
pub fn filter_by_format(items: &[ItemAggregate], allowed: &[ImageFormat]) -> Vec<ItemAggregate> {
    items
        .iter()
        .filter(|agg| detect_format(None, &agg.item.image_url).map(|f| allowed.contains(&f)).unwrap_or(false))
        .cloned()
        .collect()
}

pub const COL_DIFFICULTY: &str = "difficulty";
pub const COL_EASINESS: &str = "easiness";
pub const COL_N_RESPONSES: &str = "n_responses";

/// Write aggregates as CSV. The four ground-truth columns come first; the
/// item content columns follow so the file can also serve as a manifest.
pub fn write_aggregates<W: Write>(items: &[ItemAggregate], sink: W, options: &ParseOptions) -> Result<(), IngestError> {
    let mut wtr = csv::WriterBuilder::new().delimiter(options.delimiter).from_writer(sink);
    wtr.write_record([
        ingestion::COL_ITEM_ID,
        COL_DIFFICULTY,
        COL_EASINESS,
        COL_N_RESPONSES,
        ingestion::COL_IMAGE_URL,
        ingestion::COL_QUESTION_TEXT,
        ingestion::COL_POSSIBLE_RESPONSES,
    ])?;
    for agg in items {
        wtr.write_record([
            agg.item.item_id.clone(),
            agg.difficulty.to_string(),
            agg.easiness.to_string(),
            agg.n_responses.to_string(),
            agg.item.image_url.clone(),
            agg.item.question_text.clone(),
            ingestion::join_options(&agg.item.possible_responses, &options.options_delimiter),
        ])?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Read aggregates written by [`write_aggregates`]. Content columns are
/// optional; when absent the item content is left empty apart from the id.
pub fn read_aggregates<R: Read>(source: R, options: &ParseOptions) -> Result<Vec<ItemAggregate>, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().delimiter(options.delimiter).trim(csv::Trim::All).from_reader(source);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let require = |name: &str| find(name).ok_or_else(|| IngestError::MissingColumn(name.to_string()));
    let id_col = require(ingestion::COL_ITEM_ID)?;
    let diff_col = require(COL_DIFFICULTY)?;
    let n_col = require(COL_N_RESPONSES)?;
    let url_col = find(ingestion::COL_IMAGE_URL);
    let q_col = find(ingestion::COL_QUESTION_TEXT);
    let opt_col = find(ingestion::COL_POSSIBLE_RESPONSES);

    let mut out = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let row = idx as u64 + 1;
        let rec = rec?;
        let bad = |reason: String| IngestError::MalformedRow { row, reason };
        let get = |c: Option<usize>| c.and_then(|c| rec.get(c)).unwrap_or("").to_string();
        let item_id = get(Some(id_col));
        if item_id.is_empty() {
            return Err(bad("empty item_id".into()));
        }
        let difficulty: f64 = get(Some(diff_col))
            .parse()
            .map_err(|_| bad(format!("difficulty `{}` is not a number", get(Some(diff_col)))))?;
        if !(0.0..=1.0).contains(&difficulty) {
            return Err(bad(format!("difficulty {difficulty} outside [0, 1]")));
        }
        let n_responses: u64 = get(Some(n_col))
            .parse()
            .map_err(|_| bad(format!("n_responses `{}` is not a positive integer", get(Some(n_col)))))?;
        if n_responses == 0 {
            return Err(bad("n_responses must be at least 1".into()));
        }
        out.push(ItemAggregate {
            item: ItemContent {
                item_id,
                image_url: get(url_col),
                question_text: get(q_col),
                possible_responses: ingestion::split_options(&get(opt_col), &options.options_delimiter),
            },
            difficulty,
            easiness: 1.0 - difficulty,
            n_responses,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(id: &str, incorrect: bool) -> ResponseRecord {
        ResponseRecord {
            item_id: id.into(),
            image_url: format!("{id}.png"),
            question_text: format!("Question {id}"),
            possible_responses: vec!["A".into(), "B".into()],
            incorrect_response: incorrect,
            participant_id: None,
        }
    }

    fn agg(id: &str, url: &str) -> ItemAggregate {
        ItemAggregate::from_counts(
            ItemContent {
                item_id: id.into(),
                image_url: url.into(),
                question_text: "Q".into(),
                possible_responses: vec!["A".into()],
            },
            1,
            2,
        )
    }

    fn items(n: usize) -> Vec<ItemAggregate> {
        (0..n).map(|i| agg(&format!("i{i:04}"), "x.png")).collect()
    }

    #[test]
    fn one_in_four_incorrect() {
        let recs = [rec("q", true), rec("q", false), rec("q", false), rec("q", false)];
        let out = aggregate_items(&recs).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].difficulty, 0.25);
        assert_eq!(out[0].easiness, 0.75);
        assert_eq!(out[0].n_responses, 4);
    }

    #[test]
    fn all_correct() {
        let out = aggregate_items(&[rec("q", false), rec("q", false), rec("q", false)]).unwrap();
        assert_eq!((out[0].difficulty, out[0].easiness), (0.0, 1.0));
    }

    #[test]
    fn sorted_by_item_id() {
        let out = aggregate_items(&[rec("b", false), rec("a", true), rec("c", false)]).unwrap();
        let ids: Vec<_> = out.iter().map(|a| a.item_id()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
    }

    #[test]
    fn empty_input_is_missing_data() {
        assert!(matches!(aggregate_items(&[]), Err(AggregateError::MissingData)));
    }

    #[test]
    fn inconsistent_content() {
        let mut other = rec("q", false);
        other.question_text = "different".into();
        assert!(matches!(
            aggregate_items(&[rec("q", true), other]),
            Err(AggregateError::InconsistentItemContent(id)) if id == "q"
        ));
    }

    #[test]
    fn split_230_items() {
        let split = split_dataset(&items(230), 0.8, 42).unwrap();
        assert_eq!((split.validation.len(), split.test.len()), (184, 46));
    }

    #[test]
    fn split_is_deterministic() {
        let a = split_dataset(&items(10), 0.8, 7).unwrap();
        let b = split_dataset(&items(10), 0.8, 7).unwrap();
        assert_eq!(a, b);
        let c = split_dataset(&items(10), 0.8, 8).unwrap();
        assert_ne!(a.validation, c.validation, "different seeds should usually differ");
    }

    #[test]
    fn split_two_items_in_half() {
        let s = split_dataset(&items(2), 0.5, 1).unwrap();
        assert_eq!((s.validation.len(), s.test.len()), (1, 1));
    }

    #[test]
    fn split_rejects_bad_fraction() {
        for f in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(split_dataset(&items(3), f, 0), Err(SplitError::InvalidFraction(_))));
        }
        assert_eq!(split_dataset(&[], 0.5, 0), Err(SplitError::Empty));
    }

    #[test]
    fn validation_size_snaps_near_integers() {
        assert_eq!(validation_size(0.29, 100), 29);
        assert_eq!(validation_size(0.8, 230), 184);
        assert_eq!(validation_size(0.5, 3), 1);
    }

    #[test]
    fn filter_keeps_png_in_order() {
        let list = vec![agg("a", "a.png"), agg("b", "b.svg"), agg("c", "c.PNG"), agg("d", "d")];
        let ids: Vec<_> = filter_by_format(&list, &[ImageFormat::Png]).into_iter().map(|a| a.item.item_id).collect();
        assert_eq!(ids, ["a", "c"]);
        assert!(filter_by_format(&list, &[]).is_empty());
    }

    #[test]
    fn filter_with_all_formats_is_identity() {
        let list = vec![agg("a", "a.png"), agg("b", "b.svg"), agg("c", "c.jpg")];
        let all = [ImageFormat::Png, ImageFormat::Svg, ImageFormat::Jpeg];
        assert_eq!(filter_by_format(&list, &all), list);
    }

    #[test]
    fn aggregates_csv_round_trip() {
        let recs = [rec("a", true), rec("a", false), rec("a", false), rec("b", true)];
        let aggs = aggregate_items(&recs).unwrap();
        let mut buf = Vec::new();
        write_aggregates(&aggs, &mut buf, &ParseOptions::default()).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("item_id,difficulty,easiness,n_responses,"));
        let back = read_aggregates(buf.as_slice(), &ParseOptions::default()).unwrap();
        assert_eq!(back, aggs);
    }

    proptest! {
        #[test]
        fn split_is_a_partition(n in 1usize..300, fraction in 0.001f64..0.999, seed in any::<u64>()) {
            let list = items(n);
            let s = split_dataset(&list, fraction, seed).unwrap();
            prop_assert_eq!(s.validation.len(), validation_size(fraction, n));
            let mut ids: Vec<String> = s.validation.iter().chain(&s.test).map(|a| a.item.item_id.clone()).collect();
            ids.sort();
            let expected: Vec<String> = list.iter().map(|a| a.item.item_id.clone()).collect();
            prop_assert_eq!(ids, expected);
        }

        #[test]
        fn aggregation_is_permutation_invariant(
            outcomes in proptest::collection::vec((0usize..6, any::<bool>()), 1..200),
            seed in any::<u64>(),
        ) {
            let recs: Vec<_> = outcomes.iter().map(|&(i, bad)| rec(&format!("item{i}"), bad)).collect();
            let mut shuffled = recs.clone();
            rng::shuffle(&mut shuffled, &mut SplitMix64::new(seed));
            let a = aggregate_items(&recs).unwrap();
            prop_assert_eq!(&a, &aggregate_items(&shuffled).unwrap());
            // weighted difficulties recover the total incorrect count
            let total: u64 = outcomes.iter().filter(|o| o.1).count() as u64;
            let recovered: f64 = a.iter().map(|x| x.difficulty * x.n_responses as f64).sum();
            prop_assert_eq!(recovered.round() as u64, total);
            for x in &a {
                prop_assert_eq!(x.easiness, 1.0 - x.difficulty);
            }
        }
    }
}
