//! Wall-clock properties of the latency benchmark. Kept in one test so the
//! measurements do not compete with each other.

use unifiedface::model::{Model, ModelConfig};
use unifiedface::nn::{init_params, ParamRegistry};
use unifiedface::profile::{bench_latency, BenchConfig};
use unifiedface::rng::Rng;

#[test]
fn latency_measurements_are_consistent() {
    let cfg = ModelConfig::toy();
    let mut reg = ParamRegistry::<f32>::new();
    let model = Model::new(&mut reg, cfg).unwrap();
    init_params(&mut reg, &mut Rng::new(1));
    let one = BenchConfig {
        batch: 2,
        reps: 40,
        warmup: 5,
        ..BenchConfig::for_model(&cfg)
    };

    let a = bench_latency(&model, &reg, &one).unwrap();
    assert_eq!(a.components.len(), 3);
    for s in a.components.values().chain([&a.total]) {
        assert!(s.median_ms <= s.p90_ms);
    }
    let parts = a.component_median_sum();
    assert!(
        (parts - a.total.median_ms).abs() <= 0.10 * a.total.median_ms,
        "components {parts} ms vs total {} ms",
        a.total.median_ms
    );

    let b = bench_latency(&model, &reg, &one).unwrap();
    let drift =
        (a.total.median_ms - b.total.median_ms).abs() / a.total.median_ms.min(b.total.median_ms);
    assert!(
        drift <= 0.15,
        "medians {} and {} ms",
        a.total.median_ms,
        b.total.median_ms
    );

    let doubled = bench_latency(&model, &reg, &BenchConfig { batch: 4, ..one }).unwrap();
    assert!(doubled.total.median_ms > a.total.median_ms.max(b.total.median_ms));
}
