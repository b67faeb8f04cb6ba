use std::path::{Path, PathBuf};

use clap::Args;
use npb_hte::cart::TreeConfig;
use npb_hte::data::{Schema, SynthConfig};
use npb_hte::forest::{Selector, DEFAULT_TREES};
use npb_hte::{SeedSpec, WeightKind};
use serde::Deserialize;

use crate::error::CliError;

/// Version stamped into every JSON report.
pub const SCHEMA_VERSION: u32 = 1;

/// Substream of the run seed that drives per-node feature draws.
const FEATURE_STREAM: u64 = 11;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeSection {
    pub max_depth: usize,
    pub min_leaf: usize,
    pub mtry: Option<usize>,
    /// Fit trees to the transformed outcome instead of the response.
    pub tot: bool,
}

impl Default for TreeSection {
    fn default() -> Self {
        let d = TreeConfig::default();
        TreeSection {
            max_depth: d.max_depth,
            min_leaf: d.min_leaf,
            mtry: d.mtry,
            tot: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestSection {
    pub trees: usize,
    pub weights: WeightKind,
    /// Deepest level reported in split-probability tables; defaults to max_depth.
    pub split_depth: Option<usize>,
}

impl Default for ForestSection {
    fn default() -> Self {
        ForestSection {
            trees: DEFAULT_TREES,
            weights: WeightKind::PosteriorDraw,
            split_depth: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EffectSpec {
    pub feature: String,
    pub selector: Selector,
}

/// Everything a command needs, read from a TOML file and then overridden by flags.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    /// Bootstrap replicates; 0 disables the bootstrap.
    pub boot: usize,
    pub schema: Option<Schema>,
    /// Replace raw features by their positive-quintile indicators.
    pub expand: bool,
    /// Feature columns forming a mutually exclusive strata design.
    pub strata: Vec<String>,
    /// Coefficient pair for the posterior contours, as design column indices.
    pub contour_pair: Option<[usize; 2]>,
    /// Add the Bayesian-forest ATE row to the ATE report.
    pub forest_ate: bool,
    pub query_points: Vec<Vec<f64>>,
    pub effects: Vec<EffectSpec>,
    pub tree: TreeSection,
    pub forest: ForestSection,
    pub synth: Option<SynthConfig>,
}

/// Flags shared by every subcommand; each one overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Input CSV file.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed for every random draw.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of bootstrap replicates.
    #[arg(long = "boot", value_name = "B")]
    pub boot: Option<usize>,
    #[arg(long)]
    pub max_depth: Option<usize>,
    #[arg(long)]
    pub min_leaf: Option<usize>,
    #[arg(long)]
    pub mtry: Option<usize>,
    /// Use the transformed outcome for trees and forests.
    #[arg(long)]
    pub tot: bool,
    /// Treatment probability.
    #[arg(long)]
    pub q: Option<f64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Response column.
    #[arg(long)]
    pub response: Option<String>,
    /// Treatment column.
    #[arg(long)]
    pub treatment: Option<String>,
    /// Comma-separated feature columns.
    #[arg(long, value_delimiter = ',')]
    pub features: Option<Vec<String>>,
    /// Number of trees per forest.
    #[arg(long)]
    pub trees: Option<usize>,
    /// Expand features into quintile indicators.
    #[arg(long)]
    pub expand: bool,
}

fn resolve(base: Option<&Path>, path: &mut Option<PathBuf>) {
    if let (Some(base), Some(p)) = (base, path.as_mut()) {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads `--config` when given, then applies the remaining flags. Paths
    /// inside the file are relative to the file's directory.
    pub fn load(o: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match &o.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
                let mut cfg = RunConfig::from_toml(&text)?;
                let base = path.parent();
                resolve(base, &mut cfg.input);
                resolve(base, &mut cfg.out);
                cfg
            }
            None => RunConfig::default(),
        };
        cfg.apply(o);
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if o.input.is_some() {
            self.input.clone_from(&o.input);
        }
        if o.out.is_some() {
            self.out.clone_from(&o.out);
        }
        if o.seed.is_some() {
            self.seed = o.seed;
        }
        if let Some(b) = o.boot {
            self.boot = b;
        }
        if let Some(d) = o.max_depth {
            self.tree.max_depth = d;
        }
        if let Some(m) = o.min_leaf {
            self.tree.min_leaf = m;
        }
        if o.mtry.is_some() {
            self.tree.mtry = o.mtry;
        }
        self.tree.tot |= o.tot;
        self.expand |= o.expand;
        if let Some(t) = o.trees {
            self.forest.trees = t;
        }
        if let (None, Some(r), Some(t)) = (&self.schema, &o.response, &o.treatment) {
            self.schema = Some(Schema::new(r, t, &[]));
        }
        if let Some(schema) = self.schema.as_mut() {
            if let Some(r) = &o.response {
                schema.response.clone_from(r);
            }
            if let Some(t) = &o.treatment {
                schema.treatment.clone_from(t);
            }
            if let Some(f) = &o.features {
                schema.features.clone_from(f);
            }
            if o.q.is_some() {
                schema.q = o.q;
            }
        }
        if let (Some(q), Some(s)) = (o.q, self.synth.as_mut()) {
            s.q = q;
        }
        if let (Some(seed), Some(s)) = (o.seed, self.synth.as_mut()) {
            s.seed = SeedSpec::new(seed);
        }
    }

    pub fn input(&self) -> Result<&Path, CliError> {
        self.input.as_deref().ok_or_else(|| CliError::Config("no input file given (--input)".into()))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn schema(&self) -> Result<&Schema, CliError> {
        self.schema
            .as_ref()
            .ok_or_else(|| CliError::Config("no schema given ([schema] section or --response/--treatment)".into()))
    }

    pub fn require_seed(&self) -> Result<SeedSpec, CliError> {
        self.seed
            .map(SeedSpec::new)
            .ok_or_else(|| CliError::Config("this command is stochastic and needs --seed".into()))
    }

    pub fn tree_config(&self, seed: Option<SeedSpec>) -> TreeConfig {
        TreeConfig {
            max_depth: self.tree.max_depth,
            min_leaf: self.tree.min_leaf,
            mtry: self.tree.mtry,
            seed: seed.unwrap_or(SeedSpec::new(0)).substream(FEATURE_STREAM),
        }
    }
}
