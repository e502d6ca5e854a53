use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use itemdiff_core::aggregation::{self, read_aggregates, write_aggregates};
use itemdiff_core::client::{Client, Transport};
use itemdiff_core::evaluation::{compare_pipelines, write_distributions, write_mae_bars, EvaluationReport};
use itemdiff_core::image::{ImageFormat, ImageLoader};
use itemdiff_core::ingestion::{
    parse_item_manifest, parse_response_records, write_response_records, ItemContent, ParseOptions,
};
use itemdiff_core::predict::{
    self, read_predictions, write_predictions, write_submission, BatchError, ItemFailure, Plan, Predictor,
};
use itemdiff_core::schemas::{PredictorKind, PROMPT_VERSION};
use itemdiff_core::simulation::mock::{mock_analysis_json, FixtureTransport};
use itemdiff_core::simulation::{mock_predictor, simulate_responses, synthetic_items, synthetic_respondents};
use itemdiff_core::{aggregate_items, filter_by_format, split_dataset};

use crate::config::Config;
use crate::manifest::{write_atomic, RunManifest};
use crate::{AggregateArgs, CliError, EvaluateArgs, FilterArgs, PredictArgs, SimulateArgs, SplitArgs, SubmitArgs};

fn options(delimiter: &str) -> ParseOptions {
    ParseOptions { options_delimiter: delimiter.to_string(), ..ParseOptions::default() }
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

fn read_items_table(path: &Path, opts: &ParseOptions) -> Result<Vec<aggregation::ItemAggregate>, CliError> {
    read_aggregates(read(path)?.as_slice(), opts).map_err(|e| CliError::data(path, e))
}

fn write_items_table(path: &Path, items: &[aggregation::ItemAggregate], opts: &ParseOptions) -> Result<(), CliError> {
    let mut buf = Vec::new();
    write_aggregates(items, &mut buf, opts).map_err(|e| CliError::data(path, e))?;
    write_atomic(path, &buf)
}

/// Read `item_id` plus `easiness` (or `difficulty`, converted) into a map.
fn read_truth(path: &Path) -> Result<BTreeMap<String, f64>, CliError> {
    let bytes = read(path)?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(bytes.as_slice());
    let headers = rdr.headers().map_err(|e| CliError::data(path, e))?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let id_c = find("item_id").ok_or_else(|| CliError::data(path, "missing column `item_id`"))?;
    let (value_c, is_easiness) = match (find("easiness"), find("difficulty")) {
        (Some(c), _) => (c, true),
        (None, Some(c)) => (c, false),
        (None, None) => return Err(CliError::data(path, "needs an `easiness` or `difficulty` column")),
    };
    let mut out = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::data(path, e))?;
        let id = rec.get(id_c).unwrap_or("").to_string();
        let raw = rec.get(value_c).unwrap_or("");
        let v: f64 = raw
            .parse()
            .ok()
            .filter(|v: &f64| (0.0..=1.0).contains(v))
            .ok_or_else(|| CliError::data(path, format!("row {}: `{raw}` is not a proportion", i + 1)))?;
        if out.insert(id.clone(), if is_easiness { v } else { 1.0 - v }).is_some() {
            return Err(CliError::data(path, format!("duplicate item_id `{id}`")));
        }
    }
    Ok(out)
}

pub fn aggregate(args: &AggregateArgs) -> Result<(), CliError> {
    let opts = options(&args.options_delimiter);
    let bytes = read(&args.input)?;
    let records = if bytes.iter().all(u8::is_ascii_whitespace) {
        Vec::new()
    } else {
        parse_response_records(bytes.as_slice(), &opts).map_err(|e| CliError::data(&args.input, e))?
    };
    let items = aggregate_items(&records).map_err(|e| CliError::data(&args.input, e))?;
    write_items_table(&args.output, &items, &opts)?;
    let (lo, hi) = items
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), a| (lo.min(a.difficulty), hi.max(a.difficulty)));
    println!("{} items; difficulty range [{lo:.4}, {hi:.4}]", items.len());
    Ok(())
}

pub fn split(args: &SplitArgs) -> Result<(), CliError> {
    let opts = options(&args.options_delimiter);
    let items = read_items_table(&args.input, &opts)?;
    let result = split_dataset(&items, args.fraction, args.seed).map_err(|e| CliError::data(&args.input, e))?;
    let dir = match &args.out_dir {
        Some(d) => d.clone(),
        None => args.input.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    write_items_table(&dir.join("validation.csv"), &result.validation, &opts)?;
    write_items_table(&dir.join("test.csv"), &result.test, &opts)?;
    println!("validation {} items, test {} items (seed {})", result.validation.len(), result.test.len(), args.seed);
    Ok(())
}

pub fn filter(args: &FilterArgs) -> Result<(), CliError> {
    let opts = options(&args.options_delimiter);
    let allowed: Vec<ImageFormat> = args.formats.iter().map(|f| ImageFormat::from_name(f)).collect();
    let items = read_items_table(&args.input, &opts)?;
    let kept = filter_by_format(&items, &allowed);
    write_items_table(&args.output, &kept, &opts)?;
    println!("kept {} of {} items", kept.len(), items.len());
    Ok(())
}

fn sidecar_path(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    out.with_file_name(name)
}

fn write_failures(path: &Path, failures: &[ItemFailure]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut write = || -> csv::Result<Vec<u8>> {
        w.write_record(["index", "item_id", "error"])?;
        for f in failures {
            w.write_record([f.index.to_string(), f.error.item_id().to_string(), f.error.cause().to_string()])?;
        }
        w.flush()?;
        Ok(w.get_ref().clone())
    };
    let buf = write().map_err(|e| CliError::data(path, e))?;
    write_atomic(path, &buf)
}

/// Build a transport that answers each item's request with the mock
/// predictor's value for that item.
fn fixture_transport(
    kind: PredictorKind,
    items: &[ItemContent],
    cfg: &Config,
    images: &ImageLoader,
    truth: &BTreeMap<String, f64>,
    noise_sd: f64,
    seed: u64,
) -> Result<FixtureTransport, CliError> {
    let table: HashMap<String, f64> = truth.iter().map(|(k, v)| (k.clone(), *v)).collect();
    let model = cfg.model_config();
    let mut transport = FixtureTransport::new();
    for item in items {
        let request = match predict::plan(kind, item, &cfg.images, images, &model) {
            Ok(Plan::Request(r)) => r,
            Ok(Plan::Fallback) | Err(_) => continue,
        };
        let value = match mock_predictor(&item.item_id, &table, noise_sd, seed) {
            Ok(v) => v,
            Err(e) => {
                log::warn!("{e}; the item will fail");
                continue;
            }
        };
        transport.insert(&request.to_wire_body(), mock_analysis_json(kind, value));
    }
    Ok(transport)
}

pub fn predict(args: &PredictArgs) -> Result<(), CliError> {
    let kind: PredictorKind = args.mode.parse().map_err(|e: String| CliError::Config(e))?;
    let mut cfg = Config::load(args.config.as_deref())?;
    if args.rasterize_svg {
        cfg.images.rasterize_svg = true;
    }
    if let Some(v) = args.fallback_value {
        cfg.batch.fallback_value = v;
    }
    if let Some(n) = args.max_concurrency {
        cfg.batch.max_concurrency = n;
    }
    cfg.validate()?;
    if !(args.fixture_noise_sd.is_finite() && args.fixture_noise_sd >= 0.0) {
        return Err(CliError::Config("--fixture-noise-sd must be finite and non-negative".into()));
    }

    let mut manifest = RunManifest::start("predict", serde_json::to_value(&cfg).expect("config serializes"));
    manifest.prompt_version = Some(PROMPT_VERSION.to_string());
    manifest.model_id = Some(cfg.client.model_id.clone());
    manifest.input(&args.items)?;
    if let Some(c) = &args.config {
        manifest.input(c)?;
    }

    let opts = options(&args.options_delimiter);
    let items =
        parse_item_manifest(read(&args.items)?.as_slice(), &opts).map_err(|e| CliError::data(&args.items, e))?;
    let base_dir = args.items.parent().map(Path::to_path_buf);
    let image_cache = cfg.client.cache_dir.clone();

    let client = match &args.offline_fixture {
        Some(fixture) => {
            manifest.input(fixture)?;
            manifest.seeds.insert("fixture_seed".into(), args.fixture_seed);
            let truth = read_truth(fixture)?;
            let loader = ImageLoader::new(base_dir.clone(), None);
            let transport =
                fixture_transport(kind, &items, &cfg, &loader, &truth, args.fixture_noise_sd, args.fixture_seed)?;
            let transport: Arc<dyn Transport> = Arc::new(transport);
            Client::with_transport(cfg.client.clone(), transport)
                .api_key("offline")
                .without_cache()
                .without_rate_limit()
        }
        None => Client::new(cfg.client.clone()),
    };
    let loader = ImageLoader::new(base_dir, if args.offline_fixture.is_some() { None } else { image_cache });
    let predictor = Predictor::new(Arc::new(client), Arc::new(loader), cfg.model_config(), cfg.batch_config());

    let failures_path = sidecar_path(&args.out, ".failures.csv");
    let outcome = match predictor.predict_batch(kind, &items) {
        Ok(o) => o,
        Err(BatchError::AllFailed(failures)) => {
            if let Some(f) = failures.iter().find(|f| f.error.is_auth()) {
                return Err(CliError::Auth(f.error.cause().to_string()));
            }
            write_failures(&failures_path, &failures)?;
            manifest.outputs.push(failures_path.clone());
            manifest.finish(&args.out)?;
            return Err(CliError::Partial { failed: failures.len(), total: items.len(), sidecar: failures_path });
        }
        Err(e) => return Err(CliError::data(&args.items, e)),
    };

    let mut buf = Vec::new();
    write_predictions(&outcome.records, &mut buf).map_err(|e| CliError::data(&args.out, e))?;
    write_atomic(&args.out, &buf)?;
    manifest.outputs.push(args.out.clone());

    let n_fallback = outcome.records.iter().filter(|r| r.provenance == predict::Provenance::Fallback).count();
    println!("{} predictions ({} fallback), {} failures", outcome.records.len(), n_fallback, outcome.failures.len());

    if outcome.failures.is_empty() {
        if failures_path.exists() {
            fs::remove_file(&failures_path).map_err(|e| CliError::io(&failures_path, e))?;
        }
        manifest.finish(&args.out)?;
        return Ok(());
    }
    write_failures(&failures_path, &outcome.failures)?;
    manifest.outputs.push(failures_path.clone());
    manifest.finish(&args.out)?;
    if let Some(f) = outcome.failures.iter().find(|f| f.error.is_auth()) {
        return Err(CliError::Auth(f.error.cause().to_string()));
    }
    Err(CliError::Partial { failed: outcome.failures.len(), total: items.len(), sidecar: failures_path })
}

fn plot_paths(out: &Path) -> (PathBuf, PathBuf) {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    (out.with_file_name(format!("{stem}.mae.csv")), out.with_file_name(format!("{stem}.distribution.csv")))
}

type Pairs = Vec<(f64, f64)>;

pub fn evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    if args.bins == 0 {
        return Err(CliError::Config("--bins must be at least 1".into()));
    }
    let mut manifest = RunManifest::start("evaluate", serde_json::json!({ "bins": args.bins }));
    manifest.input(&args.truth)?;
    let truth = read_truth(&args.truth)?;

    let mut by_kind: BTreeMap<&'static str, (PredictorKind, Pairs)> = BTreeMap::new();
    for path in &args.preds {
        manifest.input(path)?;
        let rows = read_predictions(read(path)?.as_slice()).map_err(|e| CliError::data(path, e))?;
        let mut kinds_here = HashSet::new();
        let mut missing = Vec::new();
        for row in rows {
            let Some(&actual) = truth.get(&row.item_id) else {
                missing.push(row.item_id);
                continue;
            };
            let first_in_file = kinds_here.insert(row.kind);
            let entry = by_kind.entry(row.kind.as_str()).or_insert_with(|| (row.kind, Vec::new()));
            if first_in_file && !entry.1.is_empty() {
                return Err(CliError::data(path, format!("pipeline `{}` appears in more than one file", row.kind)));
            }
            entry.1.push((row.prediction, actual));
        }
        if !missing.is_empty() {
            let shown: Vec<&str> = missing.iter().take(5).map(String::as_str).collect();
            return Err(CliError::data(
                path,
                format!("{} item ids not in the truth table: {}", missing.len(), shown.join(", ")),
            ));
        }
    }
    if by_kind.is_empty() {
        return Err(CliError::Data("no predictions to evaluate".into()));
    }

    let mut reports = Vec::new();
    for (kind, pairs) in by_kind.values() {
        reports.push(
            EvaluationReport::evaluate(*kind, pairs, args.bins).map_err(|e| CliError::Data(format!("{kind}: {e}")))?,
        );
    }
    let ranking = compare_pipelines(&reports).map_err(|e| CliError::Data(e.to_string()))?;

    let json =
        if reports.len() == 1 { serde_json::to_vec_pretty(&reports[0]) } else { serde_json::to_vec_pretty(&reports) }
            .expect("report serializes");
    write_atomic(&args.out, &json)?;

    let (mae_path, dist_path) = plot_paths(&args.out);
    let mut mae_csv = Vec::new();
    write_mae_bars(&ranking, &mut mae_csv).map_err(|e| CliError::data(&mae_path, e))?;
    write_atomic(&mae_path, &mae_csv)?;
    let mut dist_csv = Vec::new();
    write_distributions(&reports, &mut dist_csv).map_err(|e| CliError::data(&dist_path, e))?;
    write_atomic(&dist_path, &dist_csv)?;

    for entry in &ranking {
        println!(
            "{}. {:<10} MAE {:.4} (SEM {:.4})  MSE {:.5}",
            entry.rank, entry.kind, entry.mae, entry.sem_abs_error, entry.mse
        );
    }
    manifest.outputs.extend([args.out.clone(), mae_path, dist_path]);
    manifest.finish(&args.out)?;
    Ok(())
}

pub fn submit(args: &SubmitArgs) -> Result<(), CliError> {
    let rows = read_predictions(read(&args.preds)?.as_slice()).map_err(|e| CliError::data(&args.preds, e))?;
    let mut seen = HashSet::new();
    for r in &rows {
        if !seen.insert(r.item_id.as_str()) {
            return Err(CliError::data(&args.preds, format!("duplicate item_id `{}`", r.item_id)));
        }
    }
    let pairs: Vec<(String, f64)> = rows.into_iter().map(|r| (r.item_id, r.prediction)).collect();
    let mut buf = Vec::new();
    write_submission(&pairs, &mut buf).map_err(|e| CliError::data(&args.out, e))?;
    write_atomic(&args.out, &buf)?;
    println!("{} rows written", pairs.len());
    Ok(())
}

pub fn simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let items = synthetic_items(args.items, args.seed);
    let respondents = synthetic_respondents(args.respondents, args.seed);
    let records = simulate_responses(&items, &respondents, args.seed).map_err(|e| CliError::Data(e.to_string()))?;
    let mut buf = Vec::new();
    write_response_records(&records, &mut buf, &ParseOptions::default()).map_err(|e| CliError::data(&args.out, e))?;
    write_atomic(&args.out, &buf)?;
    println!("{} responses ({} items x {} respondents)", records.len(), items.len(), respondents.len());
    Ok(())
}
