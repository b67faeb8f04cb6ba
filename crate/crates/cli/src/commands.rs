use nalgebra::DMatrix;
use npb_hte::ate::{self, AdjustedTaylor, VarianceReduction};
use npb_hte::cart::{fit_tree, tot_transform, TreeData};
use npb_hte::data::{apply_expansion, build_expansion, generate_synthetic, load_csv, ExpansionPlan, Schema};
use npb_hte::dgp::quantile;
use npb_hte::forest::{self, ArmForests, Selector, SplitProbabilityTable};
use npb_hte::linproj::{self, StratumMoments};
use npb_hte::{Arm, ExperimentTable, PosteriorMoments, SeedSpec, WeightKind, WeightVector};
use serde::Serialize;

use crate::config::RunConfig;
use crate::contour::{ellipses, LEVELS};
use crate::error::{CliError, CliResult};
use crate::output::OutputFile;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Expand,
    Ate,
    LinHte,
    Tree,
    Forest,
    Synth,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Expand => "expand",
            Command::Ate => "ate",
            Command::LinHte => "lin-hte",
            Command::Tree => "tree",
            Command::Forest => "forest",
            Command::Synth => "synth",
        }
    }
}

/// Runs `command` and returns its files without touching the file system.
pub fn run(command: Command, cfg: &RunConfig) -> CliResult<Vec<OutputFile>> {
    match command {
        Command::Expand => cmd_expand(cfg),
        Command::Ate => cmd_ate(cfg),
        Command::LinHte => cmd_lin_hte(cfg),
        Command::Tree => cmd_tree(cfg),
        Command::Forest => cmd_forest(cfg),
        Command::Synth => cmd_synth(cfg),
    }
}

fn load(cfg: &RunConfig, schema: &Schema) -> CliResult<ExperimentTable> {
    Ok(load_csv(cfg.input()?, schema)?)
}

/// Covariates as configured: raw or quintile-expanded, with an intercept when asked.
fn design(cfg: &RunConfig, table: &ExperimentTable, intercept: bool) -> CliResult<(ExperimentTable, Option<ExpansionPlan>)> {
    if cfg.expand {
        let plan = build_expansion(table.x(), table.feature_names())?;
        let (x, names) = apply_expansion(table.x(), &plan, intercept)?;
        return Ok((table.with_features(x, names)?, Some(plan)));
    }
    if intercept && table.intercept_column() != Some(0) {
        return Ok((table.with_intercept(), None));
    }
    Ok((table.clone(), None))
}

fn treatment_column(table: &ExperimentTable) -> Vec<f64> {
    table.arms().iter().map(|a| a.indicator()).collect()
}

/// Mean, sd and the 10th/90th percentiles of a draw vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DrawSummary {
    pub mean: f64,
    pub sd: f64,
    pub p10: f64,
    pub p90: f64,
}

pub fn summarize(draws: &[f64]) -> CliResult<DrawSummary> {
    let m = PosteriorMoments::from_draws(draws)?;
    Ok(DrawSummary {
        mean: m.mean,
        sd: m.sd(),
        p10: quantile(draws, 0.1)?,
        p90: quantile(draws, 0.9)?,
    })
}

fn cmd_expand(cfg: &RunConfig) -> CliResult<Vec<OutputFile>> {
    let schema = cfg.schema()?;
    let table = load(cfg, schema)?;
    let plan = build_expansion(table.x(), table.feature_names())?;
    let (x, names) = apply_expansion(table.x(), &plan, false)?;
    let d = treatment_column(&table);
    let mut header = vec![schema.response.as_str(), schema.treatment.as_str()];
    header.extend(names.iter().map(String::as_str));
    let columns: Vec<Vec<f64>> = x.column_iter().map(|c| c.iter().copied().collect()).collect();
    let mut refs: Vec<&[f64]> = vec![table.y(), &d];
    refs.extend(columns.iter().map(Vec::as_slice));

    #[derive(Serialize)]
    struct Body<'a> {
        input_rows: usize,
        columns: &'a [String],
        plan: &'a ExpansionPlan,
    }
    Ok(vec![
        OutputFile::csv("expanded.csv", &header, &refs)?,
        OutputFile::report(
            "expansion_plan.json",
            "expand",
            &Body {
                input_rows: table.n(),
                columns: &names,
                plan: &plan,
            },
        )?,
    ])
}

#[derive(Debug, Serialize)]
struct AteRow {
    statistic: &'static str,
    formula: &'static str,
    mean: f64,
    sd: f64,
    replicates: Option<usize>,
    singular_replicates: Option<usize>,
}

fn moments_row(statistic: &'static str, formula: &'static str, m: &PosteriorMoments) -> AteRow {
    AteRow {
        statistic,
        formula,
        mean: m.mean,
        sd: m.sd(),
        replicates: None,
        singular_replicates: None,
    }
}

fn cmd_ate(cfg: &RunConfig) -> CliResult<Vec<OutputFile>> {
    let schema = cfg.schema()?;
    let raw = load(cfg, schema)?;
    let (table, _) = design(cfg, &raw, true)?;
    let names = table.feature_names().to_vec();
    let seed = if cfg.boot > 0 || cfg.forest_ate { Some(cfg.require_seed()?) } else { cfg.seed.map(SeedSpec::new) };
    let wrap = |e| CliError::with_names(e, &names);

    let unadjusted = ate::unadjusted_ate(&table).map_err(wrap)?;
    let taylor: AdjustedTaylor = ate::adjusted_ate_taylor(&table).map_err(wrap)?;
    let reduction: VarianceReduction = ate::variance_reduction(&table).map_err(wrap)?;
    let mut rows = vec![
        moments_row("difference_in_means", "exact_posterior", &unadjusted),
        moments_row("regression_adjusted_first_order", "taylor_exact_variance", &taylor.moments),
    ];
    let mut files = Vec::new();
    if cfg.boot > 0 {
        let b = ate::adjusted_ate_bootstrap(&table, cfg.boot, seed.unwrap()).map_err(wrap)?;
        rows.push(AteRow {
            replicates: Some(cfg.boot),
            singular_replicates: Some(b.singular_replicates.len()),
            ..moments_row("regression_adjusted", "bayesian_bootstrap", &b.moments)
        });
        files.push(OutputFile::csv("ate_bootstrap_draws.csv", &["adjusted_ate"], &[&b.draws])?);
    }
    if cfg.forest_ate {
        let (forests, forest_table) = arm_forests(cfg, &raw, seed.unwrap())?;
        let fa = forest::forest_ate(&forests, &forest_table)?;
        rows.push(AteRow {
            replicates: Some(forests.treatment.len()),
            ..moments_row("forest_average_effect", "bayesian_forest", &fa.moments)
        });
        files.push(OutputFile::csv("forest_ate_draws.csv", &["forest_ate"], &[&fa.draws])?);
    }

    #[derive(Serialize)]
    struct Body<'a> {
        seed: Option<u64>,
        n_treatment: usize,
        n_control: usize,
        design_columns: &'a [String],
        rows: Vec<AteRow>,
        decomposition: &'a ate::VarianceDecomposition,
        rough_variance: f64,
        variance_reduction: &'a VarianceReduction,
        x_bar: &'a [f64],
    }
    let body = Body {
        seed: cfg.seed,
        n_treatment: table.arm_count(Arm::Treatment),
        n_control: table.arm_count(Arm::Control),
        design_columns: &names,
        rows,
        decomposition: &taylor.decomposition,
        rough_variance: taylor.rough_variance,
        variance_reduction: &reduction,
        x_bar: &taylor.x_bar,
    };
    files.insert(0, OutputFile::report("ate_report.json", "ate", &body)?);
    Ok(files)
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn cmd_lin_hte(cfg: &RunConfig) -> CliResult<Vec<OutputFile>> {
    let schema = cfg.schema()?;
    let (table, plan) = if cfg.strata.is_empty() {
        let raw = load(cfg, schema)?;
        design(cfg, &raw, true)?
    } else {
        let strata_schema = Schema {
            features: cfg.strata.clone(),
            ..schema.clone()
        };
        (load(cfg, &strata_schema)?, None)
    };
    let names = table.feature_names().to_vec();
    let seed = if cfg.boot > 0 { cfg.require_seed()? } else { cfg.seed.map_or(SeedSpec::new(0), SeedSpec::new) };
    let wrap = |e| CliError::with_names(e, &names);
    let summary = linproj::hte_linear(&table, cfg.boot, seed).map_err(wrap)?;
    let strata: Option<Vec<StratumMoments>> = if cfg.strata.is_empty() {
        None
    } else {
        Some(linproj::stratified_moments(&table, table.x())?)
    };

    let p = table.p();
    let mut files = Vec::new();
    if let Some(draws) = summary.delta_draws() {
        files.push(OutputFile::draws_csv("lin_hte_draws.csv", &names, &matrix_rows(&draws))?);
    }
    let pair = cfg.contour_pair.unwrap_or([0, 1]);
    let mut contour_pair = None;
    if p >= 2 {
        let [i, j] = pair;
        if i >= p || j >= p || i == j {
            return Err(CliError::Config(format!("contour pair {pair:?} is not two distinct columns of a {p}-column design")));
        }
        let c = &summary.delta_cov;
        let contours = ellipses(
            [summary.delta_mean[i], summary.delta_mean[j]],
            [[c[(i, i)], c[(i, j)]], [c[(j, i)], c[(j, j)]]],
            &LEVELS,
        )?;
        let (mut level, mut vertex, mut xs, mut ys) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for ct in &contours {
            for (k, pt) in ct.points.iter().enumerate() {
                level.push(ct.level);
                vertex.push(k as f64);
                xs.push(pt[0]);
                ys.push(pt[1]);
            }
        }
        files.push(OutputFile::csv("lin_hte_contours.csv", &["level", "vertex", "x", "y"], &[&level, &vertex, &xs, &ys])?);
        contour_pair = Some([names[i].clone(), names[j].clone()]);
    }

    #[derive(Serialize)]
    struct ArmFit {
        n: usize,
        beta: Vec<f64>,
        r2: f64,
        cov: Vec<Vec<f64>>,
    }
    let arm_fit = |f: &linproj::OlsFit| ArmFit {
        n: f.residuals.len(),
        beta: f.beta.iter().copied().collect(),
        r2: f.r2,
        cov: matrix_rows(f.sandwich_cov.as_ref().expect("posterior-mean fit")),
    };
    #[derive(Serialize)]
    struct Body<'a> {
        seed: Option<u64>,
        boot: usize,
        singular_replicates: usize,
        design_columns: &'a [String],
        delta_mean: Vec<f64>,
        delta_cov: Vec<Vec<f64>>,
        treatment: ArmFit,
        control: ArmFit,
        contour_pair: Option<[String; 2]>,
        contour_levels: &'a [f64],
        stratified_moments: Option<Vec<StratumMoments>>,
        expansion_plan: Option<ExpansionPlan>,
    }
    let body = Body {
        seed: cfg.seed,
        boot: cfg.boot,
        singular_replicates: summary.singular_replicates.len(),
        design_columns: &names,
        delta_mean: summary.delta_mean.iter().copied().collect(),
        delta_cov: matrix_rows(&summary.delta_cov),
        treatment: arm_fit(&summary.treatment),
        control: arm_fit(&summary.control),
        contour_pair,
        contour_levels: &LEVELS,
        stratified_moments: strata,
        expansion_plan: plan,
    };
    files.insert(0, OutputFile::report("lin_hte_report.json", "lin-hte", &body)?);
    Ok(files)
}

/// Seed for tree and forest commands; optional only when nothing is random.
fn tree_seed(cfg: &RunConfig, stochastic: bool) -> CliResult<SeedSpec> {
    if stochastic {
        cfg.require_seed()
    } else {
        Ok(cfg.seed.map_or(SeedSpec::new(0), SeedSpec::new))
    }
}

fn tot_data(table: &ExperimentTable) -> CliResult<TreeData> {
    let tot = tot_transform(table.y(), table.arms(), table.q())?;
    Ok(TreeData::new(table.x(), &tot.y_star)?)
}

fn cmd_tree(cfg: &RunConfig) -> CliResult<Vec<OutputFile>> {
    let schema = cfg.schema()?;
    let raw = load(cfg, schema)?;
    let (table, _) = design(cfg, &raw, false)?;
    let seed = tree_seed(cfg, cfg.tree.mtry.is_some())?;
    let mut tree_cfg = cfg.tree_config(Some(seed));
    tree_cfg.seed = tree_cfg.seed.replicate(0);
    let data = if cfg.tree.tot { tot_data(&table)? } else { TreeData::new(table.x(), table.y())? };
    let tree = fit_tree(&data, &WeightVector::posterior_mean(table.n()), &tree_cfg)?;
    let mut json = tree.to_json()?;
    json.push('\n');
    Ok(vec![OutputFile::raw("tree.json", json)])
}

fn arm_forests(cfg: &RunConfig, table: &ExperimentTable, seed: SeedSpec) -> CliResult<(ArmForests, ExperimentTable)> {
    let (design_table, _) = design(cfg, table, false)?;
    let forests = forest::fit_arm_forests(
        &design_table,
        cfg.forest.trees,
        &cfg.tree_config(Some(seed)),
        seed,
        cfg.forest.weights,
    )?;
    Ok((forests, design_table))
}

fn split_rows(arm: Option<f64>, t: &SplitProbabilityTable, out: &mut [Vec<f64>; 4]) {
    for (j, by_depth) in t.probabilities.iter().enumerate() {
        for (d, &pr) in by_depth.iter().enumerate() {
            out[0].push(arm.unwrap_or(-1.0));
            out[1].push(j as f64);
            out[2].push((d + 1) as f64);
            out[3].push(pr);
        }
    }
}

#[derive(Debug, Serialize)]
struct SplitSummary {
    forest: &'static str,
    no_split: f64,
    table: SplitProbabilityTable,
}

fn cmd_forest(cfg: &RunConfig) -> CliResult<Vec<OutputFile>> {
    let schema = cfg.schema()?;
    let raw = load(cfg, schema)?;
    let (table, _) = design(cfg, &raw, false)?;
    let stochastic = cfg.forest.weights != WeightKind::PosteriorMeanDgp || cfg.tree.mtry.is_some();
    let seed = tree_seed(cfg, stochastic)?;
    let names = table.feature_names().to_vec();
    let depth = cfg.forest.split_depth.unwrap_or(cfg.tree.max_depth).max(1);
    let p = table.p();
    for (k, q) in cfg.query_points.iter().enumerate() {
        if q.len() != p {
            return Err(CliError::Config(format!("query point {k} has {} values, the design has {p} columns", q.len())));
        }
    }

    let mut files = Vec::new();
    let mut split_cols: [Vec<f64>; 4] = Default::default();
    let mut splits = Vec::new();
    let query_draws: Vec<Vec<f64>>;
    let mut ate_summary = None;
    let mut effect_rows = Vec::new();

    if cfg.tree.tot {
        let model = forest::fit_tot_forest(&table, cfg.forest.trees, &cfg.tree_config(Some(seed)), seed, cfg.forest.weights)?;
        let t = forest::split_probabilities(&model, depth)?;
        split_rows(None, &t, &mut split_cols);
        splits.push(SplitSummary {
            forest: "transformed_outcome",
            no_split: t.no_split,
            table: t,
        });
        query_draws = cfg.query_points.iter().map(|q| model.predict_draws(q)).collect();
        let mut json = model.to_json()?;
        json.push('\n');
        files.push(OutputFile::raw("forest.json", json));
    } else {
        let forests = forest::fit_arm_forests(&table, cfg.forest.trees, &cfg.tree_config(Some(seed)), seed, cfg.forest.weights)?;
        for (label, arm, model) in [
            ("treatment", 1.0, &forests.treatment),
            ("control", 0.0, &forests.control),
        ] {
            let t = forest::split_probabilities(model, depth)?;
            split_rows(Some(arm), &t, &mut split_cols);
            splits.push(SplitSummary {
                forest: label,
                no_split: t.no_split,
                table: t,
            });
        }
        query_draws = cfg
            .query_points
            .iter()
            .map(|q| forest::hte_predict(&forests.treatment, &forests.control, q))
            .collect::<Result<_, _>>()?;
        let fa = forest::forest_ate(&forests, &table)?;
        ate_summary = Some(summarize(&fa.draws)?);
        files.push(OutputFile::csv("forest_ate_draws.csv", &["forest_ate"], &[&fa.draws])?);

        for (k, e) in cfg.effects.iter().enumerate() {
            let j = table
                .feature_index(&e.feature)
                .ok_or_else(|| npb_hte::Error::UnknownColumn(e.feature.clone()))?;
            let draws = forest::variable_effect(&forests, &table, j, &e.selector)?;
            effect_rows.push((k, e.feature.clone(), e.selector.clone(), summarize(&draws)?));
        }
        let mut json = serde_json::to_string(&forests).map_err(npb_hte::Error::from)?;
        json.push('\n');
        files.push(OutputFile::raw("forest.json", json));
    }

    let header: &[&str] = if cfg.tree.tot {
        &["feature", "depth", "probability"]
    } else {
        &["arm", "feature", "depth", "probability"]
    };
    let split_refs: Vec<&[f64]> = if cfg.tree.tot {
        split_cols[1..].iter().map(Vec::as_slice).collect()
    } else {
        split_cols.iter().map(Vec::as_slice).collect()
    };
    files.push(OutputFile::csv("split_probabilities.csv", header, &split_refs)?);

    let summaries = query_draws.iter().map(|d| summarize(d)).collect::<CliResult<Vec<_>>>()?;
    if !summaries.is_empty() {
        let idx: Vec<f64> = (0..summaries.len()).map(|k| k as f64).collect();
        let col = |f: fn(&DrawSummary) -> f64| summaries.iter().map(f).collect::<Vec<f64>>();
        let (m, s, lo, hi) = (col(|d| d.mean), col(|d| d.sd), col(|d| d.p10), col(|d| d.p90));
        files.push(OutputFile::csv("query_effects.csv", &["query", "mean", "sd", "p10", "p90"], &[&idx, &m, &s, &lo, &hi])?);
        let qnames: Vec<String> = (0..query_draws.len()).map(|k| format!("query_{k}")).collect();
        let n_draws = query_draws[0].len();
        let rows: Vec<Vec<f64>> = (0..n_draws).map(|b| query_draws.iter().map(|d| d[b]).collect()).collect();
        files.push(OutputFile::draws_csv("query_draws.csv", &qnames, &rows)?);
    }
    if !effect_rows.is_empty() {
        let idx: Vec<f64> = effect_rows.iter().map(|r| r.0 as f64).collect();
        let col = |f: fn(&DrawSummary) -> f64| effect_rows.iter().map(|r| f(&r.3)).collect::<Vec<f64>>();
        let (m, s, lo, hi) = (col(|d| d.mean), col(|d| d.sd), col(|d| d.p10), col(|d| d.p90));
        files.push(OutputFile::csv("variable_effects.csv", &["effect", "mean", "sd", "p10", "p90"], &[&idx, &m, &s, &lo, &hi])?);
    }

    #[derive(Serialize)]
    struct Effect {
        effect: usize,
        feature: String,
        selector: Selector,
        summary: DrawSummary,
    }
    #[derive(Serialize)]
    struct Body<'a> {
        seed: Option<u64>,
        trees: usize,
        weights: WeightKind,
        transformed_outcome: bool,
        max_depth: usize,
        min_leaf: usize,
        mtry: Option<usize>,
        design_columns: &'a [String],
        split_probabilities: Vec<SplitSummary>,
        query_points: &'a [Vec<f64>],
        query_effects: Vec<DrawSummary>,
        forest_ate: Option<DrawSummary>,
        variable_effects: Vec<Effect>,
    }
    let body = Body {
        seed: cfg.seed,
        trees: cfg.forest.trees,
        weights: cfg.forest.weights,
        transformed_outcome: cfg.tree.tot,
        max_depth: cfg.tree.max_depth,
        min_leaf: cfg.tree.min_leaf,
        mtry: cfg.tree.mtry,
        design_columns: &names,
        split_probabilities: splits,
        query_points: &cfg.query_points,
        query_effects: summaries,
        forest_ate: ate_summary,
        variable_effects: effect_rows
            .into_iter()
            .map(|(effect, feature, selector, summary)| Effect {
                effect,
                feature,
                selector,
                summary,
            })
            .collect(),
    };
    files.push(OutputFile::report("forest_report.json", "forest", &body)?);
    Ok(files)
}

fn cmd_synth(cfg: &RunConfig) -> CliResult<Vec<OutputFile>> {
    let seed = cfg.require_seed()?;
    let mut synth = cfg.synth.clone().unwrap_or_default();
    synth.seed = seed;
    let exp = generate_synthetic(&synth)?;
    let table = &exp.table;
    let d = treatment_column(table);
    let mut header = vec!["y".to_string(), "d".to_string()];
    header.extend(table.feature_names().iter().cloned());
    let xs: Vec<Vec<f64>> = table.x().column_iter().map(|c| c.iter().copied().collect()).collect();
    let mut cols: Vec<&[f64]> = vec![table.y(), &d];
    cols.extend(xs.iter().map(Vec::as_slice));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();

    let cate: Vec<f64> = (0..table.n()).map(|i| synth.expected_cate(&table.row(i))).collect();

    #[derive(Serialize)]
    struct Body<'a> {
        expected_ate: f64,
        sample_ate: f64,
        n_treatment: usize,
        n_control: usize,
        config: &'a npb_hte::data::SynthConfig,
    }
    Ok(vec![
        OutputFile::csv("synthetic.csv", &header_refs, &cols)?,
        OutputFile::csv(
            "synth_truth.csv",
            &["y0", "y1", "expected_cate"],
            &[&exp.truth.y0, &exp.truth.y1, &cate],
        )?,
        OutputFile::report(
            "synth_truth.json",
            "synth",
            &Body {
                expected_ate: exp.truth.expected_ate,
                sample_ate: exp.truth.sample_ate(),
                n_treatment: table.arm_count(Arm::Treatment),
                n_control: table.arm_count(Arm::Control),
                config: &synth,
            },
        )?,
    ])
}
