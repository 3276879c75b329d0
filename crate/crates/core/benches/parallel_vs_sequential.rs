use bathy_core::draping::drape_survey;
use bathy_core::heightfield::{generate_terrain, TerrainSpec};
use bathy_core::par;
use bathy_core::recon::{initial_model, loss_and_gradients, normal_samples, ReconConfig, ReconInput};
use bathy_core::survey::{simulate_survey, SurveyConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn bench(c: &mut Criterion) {
    let field = generate_terrain(&TerrainSpec::desk_default()).unwrap();
    let cfg = SurveyConfig { lines_per_set: Some(2), ..Default::default() };
    let survey = simulate_survey(&field, &cfg).unwrap();
    let input = ReconInput::from_draped(&drape_survey(&field, &survey));
    let rc = ReconConfig::default();
    let model = initial_model(&input, field.extent(), &rc).unwrap();
    let batch: Vec<usize> = (0..rc.batch_pings.min(input.pings.len())).collect();
    let (samples, _) = normal_samples(&model, &input, &batch, &rc);

    let mut g = c.benchmark_group("pipeline");
    g.sample_size(10);
    for mode in ["parallel", "sequential"] {
        let run = |f: &mut dyn FnMut()| if mode == "sequential" { par::sequential(f) } else { f() };
        g.bench_function(BenchmarkId::new("simulate_survey", mode), |b| {
            b.iter(|| run(&mut || drop(simulate_survey(&field, &cfg).unwrap())))
        });
        g.bench_function(BenchmarkId::new("crossing_search", mode), |b| {
            b.iter(|| run(&mut || drop(normal_samples(&model, &input, &batch, &rc))))
        });
        g.bench_function(BenchmarkId::new("loss_and_gradients", mode), |b| {
            b.iter(|| run(&mut || drop(loss_and_gradients(&model, &samples, &input.altimeter, rc.height_weight).unwrap())))
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
