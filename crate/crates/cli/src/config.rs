//! Run configuration: one TOML file covering every stage, overridable from
//! the command line with `--section.key=value` flags.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use whittle_core::search::SearchConfig;
use whittle_core::util::sha256_hex;
use whittle_core::{ModelConfig, SearchSpace, TrainerSettings};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Output directory; falls back to $WHITTLE_OUT, then "whittle-out".
    pub out_dir: Option<String>,
    pub model: ModelConfig,
    pub corpus: CorpusConfig,
    pub trainer: TrainerSettings,
    pub calibration: CalibrationConfig,
    pub search: SearchSection,
    pub budget: BudgetConfig,
    pub reform: ReformConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Text file, or a pretokenized .toks file.
    pub path: String,
    /// Trailing fraction of the corpus held out for evaluation windows.
    pub holdout_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub n: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub eval_n: usize,
    pub eval_seq_len: usize,
    pub eval_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    pub population: usize,
    pub elites: usize,
    pub mutation_offspring: usize,
    pub crossover_offspring: usize,
    pub generations: usize,
    pub p_d: f64,
    pub p_s: f64,
    pub p_m: f64,
    pub p_s0: f64,
    pub p_m0: f64,
    pub alpha: f64,
    pub eta: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetConfig {
    pub target_ratio: f64,
    pub tolerance: f64,
    /// Searched depths span [depth - depth_min_delta, depth].
    pub depth_min_delta: usize,
    /// Empty means the derived default grid.
    pub head_ratio_grid: Vec<f64>,
    pub mlp_ratio_grid: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReformConfig {
    pub rho: f64,
    pub iters: usize,
    /// Block whose attention output layer is traced for the step plot.
    pub trace_block: usize,
    /// Calibration sizes swept by `reform --ablate-samples`.
    pub sample_counts: Vec<usize>,
    /// Penalty weights swept by `reform --ablate-rho`.
    pub rhos: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out_dir: None,
            model: ModelConfig::toy(),
            corpus: CorpusConfig::default(),
            trainer: TrainerSettings::default(),
            calibration: CalibrationConfig::default(),
            search: SearchSection::default(),
            budget: BudgetConfig::default(),
            reform: ReformConfig::default(),
        }
    }
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig { path: "assets/corpus.txt".to_string(), holdout_fraction: 0.15 }
    }
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            n: 256,
            seq_len: 32,
            seed: 7,
            eval_n: 8,
            eval_seq_len: 32,
            eval_seed: 99,
        }
    }
}

impl Default for SearchSection {
    fn default() -> Self {
        SearchSection {
            population: 100,
            elites: 10,
            mutation_offspring: 50,
            crossover_offspring: 30,
            generations: 50,
            p_d: 0.1,
            p_s: 0.1,
            p_m: 0.3,
            p_s0: 0.3,
            p_m0: 0.6,
            alpha: 0.8,
            eta: 1000,
            seed: 4242,
        }
    }
}

impl Default for BudgetConfig {
    fn default() -> Self {
        BudgetConfig {
            target_ratio: 0.8,
            tolerance: 0.02,
            depth_min_delta: 1,
            head_ratio_grid: Vec::new(),
            mlp_ratio_grid: Vec::new(),
        }
    }
}

impl Default for ReformConfig {
    fn default() -> Self {
        ReformConfig {
            rho: 1.0,
            iters: 30,
            trace_block: 0,
            sample_counts: vec![128, 512, 1024],
            rhos: vec![0.1, 0.3, 1.0, 3.0, 10.0],
        }
    }
}

fn check_prob(name: &str, v: f64) -> Result<(), String> {
    if !(0.0..=1.0).contains(&v) || !v.is_finite() {
        return Err(format!("{name} must be in [0, 1], got {v}"));
    }
    Ok(())
}

fn check_grid(name: &str, grid: &[f64]) -> Result<(), String> {
    for pair in grid.windows(2) {
        if pair[1] <= pair[0] {
            return Err(format!("{name} must be strictly ascending"));
        }
    }
    if let Some(v) = grid.iter().find(|v| !(**v > 0.0 && **v <= 1.0)) {
        return Err(format!("{name} entries must be in (0, 1], got {v}"));
    }
    Ok(())
}

impl RunConfig {
    /// Range-check everything before any stage runs; the message names the
    /// offending field.
    pub fn validate(&self) -> Result<(), String> {
        self.model.validate().map_err(|e| format!("model: {e}"))?;
        if self.corpus.path.is_empty() {
            return Err("corpus.path must not be empty".to_string());
        }
        if !(0.0..0.9).contains(&self.corpus.holdout_fraction) {
            return Err(format!(
                "corpus.holdout_fraction must be in [0, 0.9), got {}",
                self.corpus.holdout_fraction
            ));
        }
        let t = &self.trainer;
        if t.steps == 0 || t.batch == 0 {
            return Err("trainer.steps and trainer.batch must be positive".to_string());
        }
        if !(t.lr.is_finite() && t.lr > 0.0) {
            return Err(format!("trainer.lr must be positive, got {}", t.lr));
        }
        if t.seq_len < 2 || t.seq_len > self.model.max_seq_len {
            return Err(format!(
                "trainer.seq_len must be in [2, {}], got {}",
                self.model.max_seq_len, t.seq_len
            ));
        }
        let c = &self.calibration;
        for (name, n, len) in
            [("calibration", c.n, c.seq_len), ("calibration.eval", c.eval_n, c.eval_seq_len)]
        {
            if n == 0 {
                return Err(format!("{name} window count must be positive"));
            }
            if len < 2 || len > self.model.max_seq_len {
                return Err(format!(
                    "{name} seq_len must be in [2, {}], got {len}",
                    self.model.max_seq_len
                ));
            }
        }
        let s = &self.search;
        if s.elites == 0 || s.population < s.elites {
            return Err(format!(
                "search.population ({}) must be at least search.elites ({}) and both positive",
                s.population, s.elites
            ));
        }
        if s.mutation_offspring + s.crossover_offspring > s.population {
            return Err(format!(
                "search.mutation_offspring + search.crossover_offspring ({}) exceeds the population ({})",
                s.mutation_offspring + s.crossover_offspring,
                s.population
            ));
        }
        if s.generations == 0 {
            return Err("search.generations must be positive".to_string());
        }
        for (name, v) in [
            ("search.p_d", s.p_d),
            ("search.p_s", s.p_s),
            ("search.p_m", s.p_m),
            ("search.p_s0", s.p_s0),
            ("search.p_m0", s.p_m0),
        ] {
            check_prob(name, v)?;
        }
        if !(s.alpha > 0.0 && s.alpha <= 1.0) {
            return Err(format!("search.alpha must be in (0, 1], got {}", s.alpha));
        }
        if s.eta == 0 {
            return Err("search.eta must be positive".to_string());
        }
        let b = &self.budget;
        if !(b.target_ratio > 0.0 && b.target_ratio <= 1.0) {
            return Err(format!("budget.target_ratio must be in (0, 1], got {}", b.target_ratio));
        }
        if !(0.0..1.0).contains(&b.tolerance) {
            return Err(format!("budget.tolerance must be in [0, 1), got {}", b.tolerance));
        }
        if b.depth_min_delta >= self.model.depth {
            return Err(format!(
                "budget.depth_min_delta must be below the model depth {}",
                self.model.depth
            ));
        }
        check_grid("budget.head_ratio_grid", &b.head_ratio_grid)?;
        check_grid("budget.mlp_ratio_grid", &b.mlp_ratio_grid)?;
        let r = &self.reform;
        if !(r.rho.is_finite() && r.rho > 0.0) {
            return Err(format!("reform.rho must be positive, got {}", r.rho));
        }
        if r.iters == 0 {
            return Err("reform.iters must be positive".to_string());
        }
        if r.trace_block >= self.model.depth {
            return Err(format!(
                "reform.trace_block must be below the model depth {}",
                self.model.depth
            ));
        }
        if r.sample_counts.is_empty() || r.sample_counts.contains(&0) {
            return Err("reform.sample_counts must be positive".to_string());
        }
        if r.rhos.is_empty() || r.rhos.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err("reform.rhos must be positive".to_string());
        }
        Ok(())
    }

    /// The searched structure space implied by the budget section.
    pub fn space(&self) -> SearchSpace {
        let mut space = SearchSpace::toy_default(&self.model, self.budget.target_ratio);
        space.budget_tol = self.budget.tolerance;
        space.depth_min = (self.model.depth - self.budget.depth_min_delta).max(1);
        if !self.budget.head_ratio_grid.is_empty() {
            space.head_ratio_grid = self.budget.head_ratio_grid.clone();
        }
        if !self.budget.mlp_ratio_grid.is_empty() {
            space.mlp_ratio_grid = self.budget.mlp_ratio_grid.clone();
        }
        space
    }

    pub fn search_config(&self) -> SearchConfig {
        let s = &self.search;
        SearchConfig {
            population: s.population,
            elites: s.elites,
            mutation_offspring: s.mutation_offspring,
            crossover_offspring: s.crossover_offspring,
            generations: s.generations,
            p_d: s.p_d,
            p_s: s.p_s,
            p_m: s.p_m,
            p_s0: s.p_s0,
            p_m0: s.p_m0,
            alpha: s.alpha,
            eta: s.eta,
            eval_sequences: self.calibration.eval_n,
            eval_seq_len: self.calibration.eval_seq_len,
            seed: s.seed,
            space: self.space(),
        }
    }

    /// Resolved output directory: config, then $WHITTLE_OUT, then a local
    /// default.
    pub fn resolve_out_dir(&self, flag: Option<&str>) -> PathBuf {
        if let Some(dir) = flag {
            return PathBuf::from(dir);
        }
        if let Some(dir) = &self.out_dir {
            return PathBuf::from(dir);
        }
        if let Ok(dir) = std::env::var("WHITTLE_OUT") {
            if !dir.is_empty() {
                return PathBuf::from(dir);
            }
        }
        PathBuf::from("whittle-out")
    }

    /// Digest of the effective configuration, recorded in provenance.
    pub fn digest(&self) -> String {
        let text = toml::to_string_pretty(self).expect("config serializes");
        sha256_hex(text.as_bytes())[..16].to_string()
    }
}

/// Guess the TOML type of an override value: bool, integer, float, array,
/// then string.
fn parse_override_value(raw: &str) -> toml::Value {
    if raw == "true" || raw == "false" {
        return toml::Value::Boolean(raw == "true");
    }
    if let Ok(v) = raw.parse::<i64>() {
        return toml::Value::Integer(v);
    }
    if let Ok(v) = raw.parse::<f64>() {
        return toml::Value::Float(v);
    }
    if raw.starts_with('[') {
        if let Ok(doc) = format!("v = {raw}").parse::<toml::Table>() {
            if let Some(v) = doc.get("v") {
                return v.clone();
            }
        }
    }
    toml::Value::String(raw.to_string())
}

/// Overlay `patch` onto `base`: tables merge key by key, everything else
/// replaces.
fn deep_merge(base: &mut toml::Value, patch: toml::Value) {
    match (base, patch) {
        (toml::Value::Table(base), toml::Value::Table(patch)) => {
            for (key, value) in patch {
                match base.get_mut(&key) {
                    Some(slot) => deep_merge(slot, value),
                    None => {
                        base.insert(key, value);
                    }
                }
            }
        }
        (slot, value) => *slot = value,
    }
}

/// Load a config file and apply `--section.key=value` overrides. Both are
/// layered over the built-in defaults, so partial sections are fine.
pub fn load_config(
    path: Option<&Path>,
    overrides: &[(String, String, String)],
) -> Result<RunConfig, String> {
    let defaults = toml::to_string(&RunConfig::default()).expect("defaults serialize");
    let mut value: toml::Value = defaults.parse().expect("defaults reparse");
    if let Some(p) = path {
        let text = std::fs::read_to_string(p)
            .map_err(|e| format!("cannot read config {}: {e}", p.display()))?;
        let file: toml::Value =
            text.parse().map_err(|e| format!("config {} is not valid TOML: {e}", p.display()))?;
        deep_merge(&mut value, file);
    }
    for (section, key, raw) in overrides {
        let table = value.as_table_mut().expect("config root is a table");
        let entry =
            table.entry(section.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        let section_table =
            entry.as_table_mut().ok_or_else(|| format!("config key {section} is not a section"))?;
        section_table.insert(key.clone(), parse_override_value(raw));
    }
    let config: RunConfig = value.try_into().map_err(|e| format!("bad config: {e}"))?;
    config.validate()?;
    Ok(config)
}

/// Split `--section.key=value` overrides out of the raw argument list so the
/// remaining arguments can go through the normal parser.
pub fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String, String)>) {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    for arg in args {
        if let Some(body) = arg.strip_prefix("--") {
            if let Some((path, value)) = body.split_once('=') {
                if let Some((section, key)) = path.split_once('.') {
                    let ok = |s: &str| {
                        !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
                    };
                    if ok(section) && ok(key) {
                        overrides.push((section.to_string(), key.to_string(), value.to_string()));
                        continue;
                    }
                }
            }
        }
        rest.push(arg);
    }
    (rest, overrides)
}
