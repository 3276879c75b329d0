use bathy_core::autodiff::{Scaling, SirenModel, Tensor};
use bathy_core::draping::drape_survey;
use bathy_core::eval::{map_metrics, node_gradient, signed_errors};
use bathy_core::heightfield::{generate_terrain, HeightField, Hill, TerrainSpec};
use bathy_core::par;
use bathy_core::recon::{
    coverage_mask, export_like, initial_model, loss_and_gradients, normal_samples, optimize, optimize_from, ReconConfig, ReconInput,
};
use bathy_core::survey::{simulate_survey, SurveyConfig};

/// 32 m square at 0.5 m with two lines per direction.
fn small_survey(spec: &TerrainSpec) -> (HeightField, ReconInput) {
    let field = generate_terrain(spec).unwrap();
    let cfg = SurveyConfig { lines_per_set: Some(2), line_spacing: 14.0, ..SurveyConfig::default() };
    let survey = simulate_survey(&field, &cfg).unwrap();
    let input = ReconInput::from_draped(&drape_survey(&field, &survey));
    (field, input)
}

fn one_hill() -> TerrainSpec {
    TerrainSpec { hills: vec![Hill { cx: 16.0, cy: 16.0, radius: 5.0, amplitude: 1.2 }], ..TerrainSpec::flat(65, 65, 0.5, -20.0) }
}

fn quick_config() -> ReconConfig {
    ReconConfig { width: 32, depth: 4, learning_rate: 1e-3, epochs: 40, ..ReconConfig::default() }
}

fn shifted(model: &SirenModel, meters: f64) -> SirenModel {
    let mut m = model.clone();
    let last = m.layers.len() - 1;
    let b = m.layers[last].bias.data()[0] + meters / m.scaling.z_scale;
    m.layers[last].bias = Tensor::scalar(b);
    m
}

#[test]
fn flat_benchmark_converges() {
    // desk-scale survey over a flat 64 m seafloor
    let field = generate_terrain(&TerrainSpec::flat(128, 128, 0.5, -20.0)).unwrap();
    let survey = simulate_survey(&field, &SurveyConfig::default()).unwrap();
    let input = ReconInput::from_draped(&drape_survey(&field, &survey));
    let cfg = ReconConfig { epochs: 100, ..quick_config() };
    let out = optimize(&input, field.extent(), &cfg).unwrap();
    let rec = export_like(&out.model, &field).unwrap();
    let all: Vec<usize> = (0..input.pings.len()).collect();
    let mask = coverage_mask(&field, normal_samples(&out.model, &input, &all, &cfg).0.iter().map(|s| s.point), 1.5);
    let m = map_metrics(&rec, &field, Some(&mask)).unwrap();
    assert!(m.mae < 0.05, "flat MAE {}", m.mae);
    assert_eq!(out.log.len(), 100);
    let first = out.log.first().unwrap().loss_total;
    assert!(out.log.last().unwrap().loss_total < first);
}

#[test]
fn normals_alone_leave_the_offset_free() {
    let (field, input) = small_survey(&one_hill());
    let base = ReconConfig { height_weight: 0.0, ..quick_config() };
    let start = shifted(&initial_model(&input, field.extent(), &base).unwrap(), 1.5);
    let no_alt = ReconInput { altimeter: Vec::new(), ..input.clone() };
    let out = optimize_from(&no_alt, start.clone(), &base).unwrap();
    let err = signed_errors(&export_like(&out.model, &field).unwrap(), &field, None).unwrap();
    let raw = err.iter().map(|e| e.abs()).sum::<f64>() / err.len() as f64;
    let mean = err.iter().sum::<f64>() / err.len() as f64;
    let centered = err.iter().map(|e| (e - mean).abs()).sum::<f64>() / err.len() as f64;
    assert!(centered < 0.25 * raw, "raw {raw}, after shift {centered}");

    let anchored = optimize_from(&input, start, &ReconConfig { height_weight: 10.0, ..base }).unwrap();
    let err = signed_errors(&export_like(&anchored.model, &field).unwrap(), &field, None).unwrap();
    let anchored_raw = err.iter().map(|e| e.abs()).sum::<f64>() / err.len() as f64;
    assert!(anchored_raw < 0.5 * raw, "altimeter should remove the offset: {anchored_raw} vs {raw}");
}

#[test]
fn seeded_runs_are_bit_identical() {
    let (field, input) = small_survey(&one_hill());
    let cfg = ReconConfig { epochs: 2, ..quick_config() };
    let a = optimize(&input, field.extent(), &cfg).unwrap();
    let b = optimize(&input, field.extent(), &cfg).unwrap();
    let c = par::sequential(|| optimize(&input, field.extent(), &cfg).unwrap());
    assert_eq!(a.log, b.log);
    assert_eq!(a.log, c.log);
    assert_eq!(a.model.to_bytes(), c.model.to_bytes());
    let d = optimize(&input, field.extent(), &ReconConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.log, d.log);
}

#[test]
fn excluded_bins_add_no_gradient() {
    let (field, input) = small_survey(&one_hill());
    let cfg = quick_config();
    let model = initial_model(&input, field.extent(), &cfg).unwrap();
    let ids: Vec<usize> = (0..8).collect();
    let (samples, offered) = normal_samples(&model, &input, &ids, &cfg);
    // water-column bins carry estimates but have no crossing on the arc
    let mut widened = input.clone();
    for k in &ids {
        for (i, n) in widened.normals[*k].iter_mut().enumerate().take(20) {
            n.get_or_insert(bathy_core::geometry::Normal2 { ny: 0.3, nz: 0.95 });
            assert!(widened.pings[*k].range(i) < 6.0);
        }
    }
    let (wide, wide_offered) = normal_samples(&model, &widened, &ids, &cfg);
    assert!(wide_offered > offered);
    assert_eq!(wide.len(), samples.len());
    let g1 = loss_and_gradients(&model, &samples, &input.altimeter, 10.0).unwrap();
    let g2 = loss_and_gradients(&model, &wide, &input.altimeter, 10.0).unwrap();
    assert_eq!(g1, g2);
}

#[test]
fn exported_grid_gradient_matches_network() {
    let model = SirenModel::init(3, 16, 30.0, 5).unwrap().with_scaling(Scaling::from_bounds(0.0, 32.0, 0.0, 32.0, -21.0, -19.0).unwrap());
    let like = HeightField::constant(0.0, 0.0, 0.05, 641, 641, 0.0).unwrap();
    let grid = export_like(&model, &like).unwrap();
    let mut worst: f64 = 0.0;
    for (c, r) in [(100, 200), (320, 320), (500, 77), (33, 600)] {
        let (gx, gy) = node_gradient(&grid, c, r).unwrap();
        let (x, y) = grid.node_xy(c, r);
        let (ax, ay) = model.metric_gradient(x, y);
        worst = worst.max((gx - ax).abs()).max((gy - ay).abs());
    }
    // central differences at 0.05 m: error ~ h²/6 · |Φ'''|
    assert!(worst < 2e-3, "worst gradient difference {worst}");
}
