use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use itemdiff_core::aggregation::{aggregate_items, split_dataset};
use itemdiff_core::evaluation::{
    mean_absolute_error, mean_squared_error, prediction_histogram, sem_of_absolute_errors,
};
use itemdiff_core::rng::{draw, unit_f64};
use itemdiff_core::schemas::{parse_structured_response, PredictorKind};
use itemdiff_core::simulation::mock::mock_analysis_json;
use itemdiff_core::simulation::{simulate_responses, synthetic_items, synthetic_respondents};

fn simulation(c: &mut Criterion) {
    let items = synthetic_items(50, 1);
    let respondents = synthetic_respondents(2_000, 2);
    c.bench_function("simulate 50x2000", |b| {
        b.iter(|| simulate_responses(black_box(&items), &respondents, 3).unwrap())
    });

    let records = simulate_responses(&items, &respondents, 3).unwrap();
    c.bench_function("aggregate 100k responses", |b| b.iter(|| aggregate_items(black_box(&records)).unwrap()));

    let aggs = aggregate_items(&records).unwrap();
    c.bench_function("split 50 items", |b| {
        b.iter_batched(|| aggs.clone(), |a| split_dataset(&a, 0.8, 7).unwrap(), BatchSize::SmallInput)
    });
}

fn metrics(c: &mut Criterion) {
    let pairs: Vec<(f64, f64)> =
        (0..10_000u64).map(|i| (unit_f64(draw(1, 2 * i)), unit_f64(draw(1, 2 * i + 1)))).collect();
    let preds: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    c.bench_function("mae+mse+sem 10k", |b| {
        b.iter(|| {
            let p = black_box(&pairs);
            (mean_absolute_error(p).unwrap(), mean_squared_error(p).unwrap(), sem_of_absolute_errors(p).unwrap())
        })
    });
    c.bench_function("histogram 10k / 20 bins", |b| b.iter(|| prediction_histogram(black_box(&preds), 20).unwrap()));
}

fn schemas(c: &mut Criterion) {
    let raw = mock_analysis_json(PredictorKind::TextOnly, 0.42);
    c.bench_function("validate text analysis", |b| {
        b.iter(|| parse_structured_response(black_box(&raw), PredictorKind::TextOnly).unwrap())
    });
}

criterion_group!(benches, simulation, metrics, schemas);
criterion_main!(benches);
