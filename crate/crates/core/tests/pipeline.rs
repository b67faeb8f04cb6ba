use nalgebra::DMatrix;
use npb_hte::ate::{adjusted_ate_taylor, unadjusted_ate};
use npb_hte::cart::{fit_tree, tot_transform, Node, TreeConfig, TreeData};
use npb_hte::data::{generate_synthetic, load_csv, write_csv, Latent, Schema, SynthConfig};
use npb_hte::forest::{fit_arm_forests, forest_ate};
use npb_hte::linproj::hte_linear;
use npb_hte::{Arm, ExperimentTable, SeedSpec, WeightKind, WeightVector};

fn synth(n: usize, seed: u64) -> SynthConfig {
    SynthConfig {
        n,
        q: 0.5,
        zero_mass: 0.4,
        spike_points: vec![],
        tail_log_mean: 1.0,
        tail_log_sd: 0.5,
        n_features: 2,
        scale_loadings: vec![1.0],
        effect_coefficients: vec![0.5, 2.0],
        latent: Latent::Identity,
        seed: SeedSpec::new(seed),
    }
}

fn to_csv(table: &ExperimentTable) -> tempfile::NamedTempFile {
    let file = tempfile::NamedTempFile::new().unwrap();
    let d: Vec<f64> = table.arms().iter().map(|a| a.indicator()).collect();
    let xs: Vec<Vec<f64>> = table.x().column_iter().map(|c| c.iter().copied().collect()).collect();
    let mut cols: Vec<&[f64]> = vec![table.y(), &d];
    cols.extend(xs.iter().map(Vec::as_slice));
    let mut header = vec!["y".to_string(), "d".to_string()];
    header.extend(table.feature_names().iter().cloned());
    write_csv(std::fs::File::create(file.path()).unwrap(), &header, &cols).unwrap();
    file
}

#[test]
fn csv_round_trip_preserves_every_statistic() {
    let table = generate_synthetic(&synth(500, 1)).unwrap().table.with_intercept();
    let file = to_csv(&table);
    let schema = Schema {
        q: Some(0.5),
        ..Schema::new("y", "d", &["intercept", "x1", "x2"])
    };
    let back = load_csv(file.path(), &schema).unwrap();
    assert_eq!(back, table);
    assert_eq!(unadjusted_ate(&back).unwrap(), unadjusted_ate(&table).unwrap());
    assert_eq!(
        adjusted_ate_taylor(&back).unwrap().moments,
        adjusted_ate_taylor(&table).unwrap().moments
    );
}

#[test]
fn bootstrap_coefficient_covariance_matches_analytic() {
    let table = generate_synthetic(&SynthConfig { n_features: 3, ..synth(2000, 2) }).unwrap().table.with_intercept();
    let b = 10_000;
    let s = hte_linear(&table, b, SeedSpec::new(3)).unwrap();
    let draws = s.delta_draws().unwrap();
    let p = table.p();
    let mean: Vec<f64> = (0..p).map(|j| draws.column(j).mean()).collect();
    for j in 0..p {
        for k in 0..p {
            let prod: Vec<f64> = (0..b).map(|r| (draws[(r, j)] - mean[j]) * (draws[(r, k)] - mean[k])).collect();
            let cov = prod.iter().sum::<f64>() / (b - 1) as f64;
            let var_prod = prod.iter().map(|v| (v - cov).powi(2)).sum::<f64>() / (b - 1) as f64;
            let se = (var_prod / b as f64).sqrt();
            let target = s.delta_cov[(j, k)];
            assert!((cov - target).abs() < 5.0 * se, "({j},{k}) {cov} vs {target}");
        }
    }
}

#[test]
fn linear_effect_slopes_are_recovered() {
    let cfg = synth(20_000, 4);
    let table = generate_synthetic(&cfg).unwrap().table.with_intercept();
    let s = hte_linear(&table, 0, SeedSpec::new(0)).unwrap();
    let truth_slope = (1.0 - cfg.zero_mass) * cfg.effect_coefficients[1];
    let sd = s.delta_cov[(1, 1)].sqrt();
    assert!((s.delta_mean[1] - truth_slope).abs() < 5.0 * sd, "{} vs {truth_slope}", s.delta_mean[1]);
    assert!(s.delta_mean[2].abs() < 5.0 * s.delta_cov[(2, 2)].sqrt());
}

#[test]
fn sample_tot_tree_splits_on_the_effect_covariate() {
    let cfg = SynthConfig {
        q: 2.0 / 3.0,
        latent: Latent::Step { threshold: 0.3 },
        effect_coefficients: vec![0.0, 4.0],
        n_features: 3,
        ..synth(30_000, 5)
    };
    let table = generate_synthetic(&cfg).unwrap().table;
    let tot = tot_transform(table.y(), table.arms(), table.q()).unwrap();
    let tree_cfg = TreeConfig {
        max_depth: 2,
        min_leaf: 500,
        ..TreeConfig::default()
    };
    let tree = fit_tree(&TreeData::new(table.x(), &tot.y_star).unwrap(), &WeightVector::posterior_mean(table.n()), &tree_cfg).unwrap();
    match tree.nodes[0] {
        Node::Split { feature, threshold, .. } => {
            assert_eq!(feature, 0);
            assert!((threshold - 0.3).abs() < 0.02, "{threshold}");
        }
        Node::Leaf { .. } => panic!("root did not split"),
    }
}

#[test]
fn exponential_and_multinomial_forests_agree() {
    let cfg = synth(4000, 6);
    let table = generate_synthetic(&cfg).unwrap().table;
    let tree_cfg = TreeConfig {
        max_depth: 3,
        min_leaf: 100,
        ..TreeConfig::default()
    };
    let exp = forest_ate(&fit_arm_forests(&table, 200, &tree_cfg, SeedSpec::new(7), WeightKind::PosteriorDraw).unwrap(), &table).unwrap();
    let mult = forest_ate(&fit_arm_forests(&table, 200, &tree_cfg, SeedSpec::new(8), WeightKind::Multinomial).unwrap(), &table).unwrap();
    let sd = exp.moments.sd().max(mult.moments.sd());
    assert!((exp.moments.mean - mult.moments.mean).abs() < sd);
    assert!((exp.moments.sd() / mult.moments.sd() - 1.0).abs() < 0.3);
    let unadjusted = unadjusted_ate(&table).unwrap();
    assert!((exp.moments.mean - unadjusted.mean).abs() < 2.0 * unadjusted.sd());
}

#[test]
fn arms_are_disjoint_in_arm_forests() {
    let n = 40;
    let x = DMatrix::from_fn(n, 1, |i, _| i as f64);
    let arms: Vec<Arm> = (0..n).map(|i| if i % 2 == 0 { Arm::Treatment } else { Arm::Control }).collect();
    let y: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 5.0 } else { 1.0 }).collect();
    let table = ExperimentTable::new(y, arms, x, vec!["x".into()], 0.5).unwrap();
    let forests = fit_arm_forests(&table, 10, &TreeConfig { min_leaf: 5, ..TreeConfig::default() }, SeedSpec::new(9), WeightKind::PosteriorDraw).unwrap();
    let fa = forest_ate(&forests, &table).unwrap();
    assert!(fa.draws.iter().all(|&d| d == 4.0));
}
