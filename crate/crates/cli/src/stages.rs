//! Stage implementations. Every stage reads named artifacts from the output
//! directory, checks them against the provenance records of the stages that
//! produced them, writes its own artifacts, and records a provenance entry
//! of its own (input hashes, output hashes, seed, config digest).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use whittle_core::container::{
    grams_from_container, grams_to_container, model_from_container, model_to_container,
};
use whittle_core::data::{
    load_pretokenized, sample_calibration, sample_eval_windows, tokenize_bytes, CalibrationSet,
    Corpus,
};
use whittle_core::extract::{
    dense_throughput, equivalence_check, extract_dense, extracted_throughput, DenseSubnetModel,
};
use whittle_core::importance::{
    attention_dim_scores, init_genome, mlp_dim_scores, score_model, top_score_mask,
};
use whittle_core::model::{
    capture_grams, full_block_param_count, param_count, perplexity, train_toy_lm, LayerInputTap,
};
use whittle_core::reform::{
    admm_reform, exact_column_ls_oracle, reform_objective, reform_subnet, rho_sensitivity,
    truncation_baseline, ReformProblem, ReformSettings,
};
use whittle_core::search::{random_genome, run_search, SearchOutcome};
use whittle_core::util::sha256_hex;
use whittle_core::{CountScope, Genome, GramSet, Matrix, ModelWeights, Precision, TensorContainer};

use crate::config::RunConfig;
use crate::plot::{line_chart, Series};
use crate::CliError;

/// One stage's provenance record, written next to its artifacts.
#[derive(Debug, Serialize, Deserialize)]
struct Provenance {
    stage: String,
    config_digest: String,
    seed: Option<u64>,
    /// Input file hashes, keyed by artifact name (or plain path for
    /// external files such as the corpus).
    inputs: BTreeMap<String, String>,
    /// Output artifact hashes, keyed by artifact name.
    outputs: BTreeMap<String, String>,
}

/// Which stage produces a given artifact; used for staleness checks and the
/// hints in missing-artifact errors.
fn producer(name: &str) -> Option<&'static str> {
    Some(match name {
        "model.sdm" | "train_report.json" => "train",
        "calib_windows.json" | "eval_windows.json" | "grams.sdm" => "calibrate",
        "genome_init.txt" => "init",
        "genome_best.txt" | "search_log.jsonl" | "search_log_noinit.jsonl" => "search",
        "model_reformed.sdm"
        | "reform_report.json"
        | "reform_trace.json"
        | "reform_samples.json"
        | "reform_rho.json" => "reform",
        "subnet.sdm" | "equivalence.json" => "extract",
        "eval_report.json" | "sensitivity.json" => "eval",
        "bench.json" => "bench",
        _ if name.starts_with("plots/") => "plot",
        _ => return None,
    })
}

pub struct StageContext {
    config: RunConfig,
    out_dir: PathBuf,
}

impl StageContext {
    pub fn new(config: RunConfig, out_dir: PathBuf) -> Result<Self, CliError> {
        Ok(StageContext { config, out_dir })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn provenance_path(&self, stage: &str) -> PathBuf {
        self.out_dir.join("provenance").join(format!("{stage}.json"))
    }

    fn load_provenance(&self, stage: &str) -> Option<Provenance> {
        let bytes = std::fs::read(self.provenance_path(stage)).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    /// Read an artifact, record its hash, and fail if it is missing or no
    /// longer matches what its producing stage recorded.
    fn read_artifact(
        &self,
        name: &str,
        inputs: &mut BTreeMap<String, String>,
    ) -> Result<Vec<u8>, CliError> {
        let path = self.path(name);
        let stage = producer(name).unwrap_or("(unknown)");
        let bytes = std::fs::read(&path).map_err(|_| {
            CliError::Artifact(format!(
                "missing artifact {name} under {}; run `whittle {stage}` first",
                self.out_dir.display()
            ))
        })?;
        let hash = sha256_hex(&bytes);
        if let Some(record) = self.load_provenance(stage) {
            if let Some(recorded) = record.outputs.get(name) {
                if *recorded != hash {
                    return Err(CliError::Artifact(format!(
                        "stale artifact {name}: content no longer matches what \
                         `whittle {stage}` recorded; re-run `whittle {stage}`"
                    )));
                }
            }
        }
        inputs.insert(name.to_string(), hash);
        Ok(bytes)
    }

    /// Read a file outside the artifact store (corpus, explicit genome).
    fn read_external(
        &self,
        path: &Path,
        field: &str,
        inputs: &mut BTreeMap<String, String>,
    ) -> Result<Vec<u8>, CliError> {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::Config(format!("{field} {}: {e}", path.display())))?;
        inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    fn write_artifact(
        &self,
        name: &str,
        bytes: &[u8],
        outputs: &mut BTreeMap<String, String>,
    ) -> Result<(), CliError> {
        let path = self.path(name);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)
                .map_err(|e| CliError::Artifact(format!("cannot create {}: {e}", dir.display())))?;
        }
        std::fs::write(&path, bytes)
            .map_err(|e| CliError::Artifact(format!("cannot write {}: {e}", path.display())))?;
        outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn write_json<T: Serialize>(
        &self,
        name: &str,
        value: &T,
        outputs: &mut BTreeMap<String, String>,
    ) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value)
            .map_err(|e| CliError::Artifact(format!("cannot encode {name}: {e}")))?;
        text.push('\n');
        self.write_artifact(name, text.as_bytes(), outputs)
    }

    fn write_provenance(
        &self,
        stage: &str,
        seed: Option<u64>,
        inputs: BTreeMap<String, String>,
        outputs: BTreeMap<String, String>,
    ) -> Result<(), CliError> {
        let record = Provenance {
            stage: stage.to_string(),
            config_digest: self.config.digest(),
            seed,
            inputs,
            outputs,
        };
        let path = self.provenance_path(stage);
        std::fs::create_dir_all(path.parent().unwrap())
            .map_err(|e| CliError::Artifact(format!("cannot create provenance dir: {e}")))?;
        let mut text = serde_json::to_string_pretty(&record).unwrap();
        text.push('\n');
        std::fs::write(&path, text)
            .map_err(|e| CliError::Artifact(format!("cannot write {}: {e}", path.display())))?;
        Ok(())
    }

    /// Load the corpus named in the config and split off the held-out tail.
    fn load_corpus(
        &self,
        inputs: &mut BTreeMap<String, String>,
    ) -> Result<(Corpus, Corpus), CliError> {
        let path = Path::new(&self.config.corpus.path);
        let bytes = self.read_external(path, "corpus.path", inputs)?;
        let corpus = if path.extension().is_some_and(|e| e == "toks") {
            load_pretokenized(path)?
        } else {
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "corpus".to_string());
            tokenize_bytes(&name, &bytes)
        };
        Ok(corpus.split(self.config.corpus.holdout_fraction))
    }

    /// Load the trained checkpoint and insist it matches the configured
    /// architecture.
    fn load_model(&self, inputs: &mut BTreeMap<String, String>) -> Result<ModelWeights, CliError> {
        let (config, weights) = self.load_checkpoint("model.sdm", inputs)?;
        if config.fingerprint() != self.config.model.fingerprint() {
            return Err(CliError::Artifact(
                "model.sdm was trained under a different model configuration; \
                 re-run `whittle train`"
                    .to_string(),
            ));
        }
        Ok(weights)
    }

    fn load_checkpoint(
        &self,
        name: &str,
        inputs: &mut BTreeMap<String, String>,
    ) -> Result<(whittle_core::ModelConfig, ModelWeights), CliError> {
        let bytes = self.read_artifact(name, inputs)?;
        let path = self.path(name);
        let container = TensorContainer::from_bytes(&bytes, &path)?;
        Ok(model_from_container(&container, &path)?)
    }

    fn load_grams(&self, inputs: &mut BTreeMap<String, String>) -> Result<GramSet, CliError> {
        let bytes = self.read_artifact("grams.sdm", inputs)?;
        let path = self.path("grams.sdm");
        let container = TensorContainer::from_bytes(&bytes, &path)?;
        Ok(grams_from_container(&container, &path)?)
    }

    fn load_genome(
        &self,
        name: &str,
        inputs: &mut BTreeMap<String, String>,
    ) -> Result<Genome, CliError> {
        let bytes = self.read_artifact(name, inputs)?;
        let text = String::from_utf8(bytes)
            .map_err(|_| CliError::Artifact(format!("{name} is not valid UTF-8")))?;
        let genome = Genome::from_text(&text)?;
        if genome.config_fingerprint != self.config.model.fingerprint() {
            return Err(CliError::Artifact(format!(
                "{name} was built for a different model configuration"
            )));
        }
        Ok(genome)
    }

    fn load_eval_windows(
        &self,
        inputs: &mut BTreeMap<String, String>,
    ) -> Result<CalibrationSet, CliError> {
        let bytes = self.read_artifact("eval_windows.json", inputs)?;
        let eval: CalibrationSet = serde_json::from_slice(&bytes)
            .map_err(|e| CliError::Artifact(format!("eval_windows.json: {e}")))?;
        let want = self.config.calibration.eval_n;
        if eval.sequences.len() != want {
            return Err(CliError::Artifact(format!(
                "eval_windows.json holds {} windows but calibration.eval_n is {want}; \
                 re-run `whittle calibrate`",
                eval.sequences.len()
            )));
        }
        Ok(eval)
    }

    fn retained_fraction(&self, genome: &Genome) -> f64 {
        param_count(&self.config.model, genome, CountScope::BlocksOnly) as f64
            / full_block_param_count(&self.config.model) as f64
    }

    pub fn train(&self) -> Result<(), CliError> {
        let mut inputs = BTreeMap::new();
        let mut outputs = BTreeMap::new();
        let (train_part, held_part) = self.load_corpus(&mut inputs)?;
        let started = Instant::now();
        let (weights, report) =
            train_toy_lm(&self.config.model, &train_part, &self.config.trainer)?;
        let seconds = started.elapsed().as_secs_f64();
        let container = model_to_container(&weights, &self.config.model);
        self.write_artifact("model.sdm", &container.to_bytes(), &mut outputs)?;
        let report_value = serde_json::json!({
            "initial_loss": report.initial_loss(),
            "final_loss": report.final_loss(),
            "losses": report.losses,
            "settings": self.config.trainer,
            "train_tokens": train_part.len(),
            "held_out_tokens": held_part.len(),
        });
        self.write_json("train_report.json", &report_value, &mut outputs)?;
        self.write_provenance("train", Some(self.config.trainer.seed), inputs, outputs)?;
        println!(
            "trained {} steps on {} tokens in {seconds:.1}s; loss {:.4} -> {:.4}",
            self.config.trainer.steps,
            train_part.len(),
            report.initial_loss().unwrap_or(f64::NAN),
            report.final_loss().unwrap_or(f64::NAN),
        );
        println!("checkpoint written to {}", self.path("model.sdm").display());
        Ok(())
    }

    pub fn calibrate(&self) -> Result<(), CliError> {
        let mut inputs = BTreeMap::new();
        let mut outputs = BTreeMap::new();
        let weights = self.load_model(&mut inputs)?;
        let (train_part, held_part) = self.load_corpus(&mut inputs)?;
        let c = &self.config.calibration;
        let calib = sample_calibration(&train_part, c.n, c.seq_len, c.seed)?;
        let eval = sample_eval_windows(&held_part, c.eval_n, c.eval_seq_len, c.eval_seed)?;
        let grams = capture_grams(&weights, &self.config.model, &calib, &LayerInputTap::all())?;
        self.write_json("calib_windows.json", &calib, &mut outputs)?;
        self.write_json("eval_windows.json", &eval, &mut outputs)?;
        let container = grams_to_container(&grams, &self.config.model);
        self.write_artifact("grams.sdm", &container.to_bytes(), &mut outputs)?;
        self.write_provenance("calibrate", Some(c.seed), inputs, outputs)?;
        println!(
            "captured Gram matrices over {} calibration windows ({} tokens); \
             {} evaluation windows held out",
            calib.sequences.len(),
            grams.token_count,
            eval.sequences.len(),
        );
        Ok(())
    }

    pub fn init(&self) -> Result<(), CliError> {
        let mut inputs = BTreeMap::new();
        let mut outputs = BTreeMap::new();
        let weights = self.load_model(&mut inputs)?;
        let grams = self.load_grams(&mut inputs)?;
        let space = self.config.space();
        let genome = init_genome(
            &weights,
            &self.config.model,
            &grams,
            self.config.budget.target_ratio,
            &space,
        )?;
        self.write_artifact("genome_init.txt", genome.to_text().as_bytes(), &mut outputs)?;
        self.write_provenance("init", None, inputs, outputs)?;
        println!(
            "importance-initialized genome keeps {:.4} of block parameters \
             (target {}); written to genome_init.txt",
            self.retained_fraction(&genome),
            self.config.budget.target_ratio,
        );
        Ok(())
    }

    pub fn search(&self, ablate_no_init: bool) -> Result<(), CliError> {
        let mut inputs = BTreeMap::new();
        let mut outputs = BTreeMap::new();
        let weights = self.load_model(&mut inputs)?;
        let start = self.load_genome("genome_init.txt", &mut inputs)?;
        let eval = self.load_eval_windows(&mut inputs)?;
        let search = self.config.search_config();
        let started = Instant::now();
        let outcome = run_search(&weights, &self.config.model, &start, &eval.sequences, &search)?;
        let seconds = started.elapsed().as_secs_f64();
        self.write_artifact(
            "genome_best.txt",
            outcome.best.genome.to_text().as_bytes(),
            &mut outputs,
        )?;
        self.write_artifact("search_log.jsonl", outcome.log.to_jsonl().as_bytes(), &mut outputs)?;
        self.print_search_summary(&outcome, seconds, "search");
        if ablate_no_init {
            let random_start = random_genome(&self.config.model, &search.space, search.seed);
            let no_init =
                run_search(&weights, &self.config.model, &random_start, &eval.sequences, &search)?;
            self.write_artifact(
                "search_log_noinit.jsonl",
                no_init.log.to_jsonl().as_bytes(),
                &mut outputs,
            )?;
            self.print_search_summary(&no_init, 0.0, "no-init ablation");
        }
        self.write_provenance("search", Some(search.seed), inputs, outputs)?;
        Ok(())
    }

    fn print_search_summary(&self, outcome: &SearchOutcome, seconds: f64, label: &str) {
        let best = outcome.best.fitness.unwrap_or(f64::NAN);
        let start = outcome
            .start_fitness
            .map(|f| format!("{f:.4}"))
            .unwrap_or_else(|| "out-of-budget start".to_string());
        let gens = outcome.log.generations.len().saturating_sub(1);
        if seconds > 0.0 {
            println!(
                "{label}: best perplexity {best:.4} (start {start}) after {gens} \
                 generations in {seconds:.1}s; retained fraction {:.4}",
                self.retained_fraction(&outcome.best.genome),
            );
        } else {
            println!(
                "{label}: best perplexity {best:.4} (start {start}) after {gens} \
                 generations",
            );
        }
    }

    /// The first attention or MLP output layer, scanning from the preferred
    /// block, that actually prunes columns; used for the step/rho traces.
    fn trace_problem(
        &self,
        weights: &ModelWeights,
        genome: &Genome,
        grams: &GramSet,
    ) -> Option<(usize, &'static str, Matrix, Matrix, Vec<bool>)> {
        let depth = self.config.model.depth;
        let inv_tokens = 1.0 / grams.token_count.max(1) as f64;
        let order =
            (self.config.reform.trace_block..depth).chain(0..self.config.reform.trace_block);
        for bix in order {
            let bg = &genome.blocks[bix];
            if !bg.kept {
                continue;
            }
            let attn_pruned: Vec<bool> = bg.attn_mask_flat().iter().map(|k| !k).collect();
            if attn_pruned.iter().any(|p| *p) {
                return Some((
                    bix,
                    "w_o",
                    weights.blocks[bix].w_o.to_matrix(),
                    grams.per_block[bix].g_o.scaled(inv_tokens),
                    attn_pruned,
                ));
            }
            let mlp_pruned: Vec<bool> = bg.mlp_mask.bits().iter().map(|k| !k).collect();
            if mlp_pruned.iter().any(|p| *p) {
                return Some((
                    bix,
                    "w_d",
                    weights.blocks[bix].w_d.to_matrix(),
                    grams.per_block[bix].g_d.scaled(inv_tokens),
                    mlp_pruned,
                ));
            }
        }
        None
    }

    pub fn reform(
        &self,
        genome_file: Option<&Path>,
        ablate_samples: bool,
        ablate_rho: bool,
    ) -> Result<(), CliError> {
        let mut inputs = BTreeMap::new();
        let mut outputs = BTreeMap::new();
        let weights = self.load_model(&mut inputs)?;
        let grams = self.load_grams(&mut inputs)?;
        let genome = match genome_file {
            Some(path) => {
                let bytes = self.read_external(path, "--genome-file", &mut inputs)?;
                let text = String::from_utf8(bytes).map_err(|_| {
                    CliError::Artifact(format!("{} is not valid UTF-8", path.display()))
                })?;
                let genome = Genome::from_text(&text)?;
                if genome.config_fingerprint != self.config.model.fingerprint() {
                    return Err(CliError::Artifact(format!(
                        "{} was built for a different model configuration",
                        path.display()
                    )));
                }
                genome
            }
            None => self.load_genome("genome_best.txt", &mut inputs)?,
        };
        let settings =
            ReformSettings { rho: self.config.reform.rho, iters: self.config.reform.iters };
        let (reformed, report) =
            reform_subnet(&weights, &self.config.model, &genome, &grams, &settings)?;
        let mut container = model_to_container(&reformed, &self.config.model);
        container.set_meta("reformed", "true");
        container.set_meta("genome_fingerprint", &genome.structural_fingerprint());
        self.write_artifact("model_reformed.sdm", &container.to_bytes(), &mut outputs)?;
        let total_admm: f64 = report.layers.iter().map(|l| l.objective_admm).sum();
        let total_trunc: f64 = report.layers.iter().map(|l| l.objective_trunc).sum();
        let fallbacks = report.layers.iter().filter(|l| l.fallback).count();
        let report_value = serde_json::json!({
            "rho": report.rho,
            "iters": report.iters,
            "total_objective_admm": total_admm,
            "total_objective_trunc": total_trunc,
            "fallbacks": fallbacks,
            "layers": report.layers,
        });
        self.write_json("reform_report.json", &report_value, &mut outputs)?;

        match self.trace_problem(&weights, &genome, &grams) {
            Some((block, layer, w, g, pruned)) => {
                let result = admm_reform(&ReformProblem {
                    w: w.clone(),
                    g: g.clone(),
                    pruned: pruned.clone(),
                    rho: settings.rho,
                    iters: settings.iters,
                })?;
                let oracle = exact_column_ls_oracle(&w, &g, &pruned)?;
                let trace_value = serde_json::json!({
                    "block": block,
                    "layer": layer,
                    "pruned_cols": pruned.iter().filter(|p| **p).count(),
                    "objective_trace": result.objective_trace,
                    "primal_trace": result.primal_trace,
                    "objective_trunc":
                        reform_objective(&truncation_baseline(&w, &pruned), &w, &g),
                    "objective_oracle": reform_objective(&oracle, &w, &g),
                });
                self.write_json("reform_trace.json", &trace_value, &mut outputs)?;
                if ablate_rho {
                    let curves =
                        rho_sensitivity(&w, &g, &pruned, &self.config.reform.rhos, settings.iters)?;
                    let rho_value = serde_json::json!({
                        "block": block,
                        "layer": layer,
                        "iters": settings.iters,
                        "curves": curves,
                    });
                    self.write_json("reform_rho.json", &rho_value, &mut outputs)?;
                }
            }
            None => {
                if ablate_rho {
                    return Err(CliError::Config(
                        "--ablate-rho needs a genome that prunes at least one column".to_string(),
                    ));
                }
                println!("genome prunes nothing; step trace skipped");
            }
        }

        if ablate_samples {
            let (train_part, _) = self.load_corpus(&mut inputs)?;
            let eval = self.load_eval_windows(&mut inputs)?;
            let c = &self.config.calibration;
            let mut rows = Vec::new();
            for &n in &self.config.reform.sample_counts {
                let calib = sample_calibration(&train_part, n, c.seq_len, c.seed)?;
                let grams_n =
                    capture_grams(&weights, &self.config.model, &calib, &LayerInputTap::all())?;
                let (reformed_n, report_n) =
                    reform_subnet(&weights, &self.config.model, &genome, &grams_n, &settings)?;
                let ppl =
                    perplexity(&reformed_n, &self.config.model, &eval.sequences, Some(&genome))?;
                rows.push(serde_json::json!({
                    "samples": n,
                    "total_objective_admm":
                        report_n.layers.iter().map(|l| l.objective_admm).sum::<f64>(),
                    "total_objective_trunc":
                        report_n.layers.iter().map(|l| l.objective_trunc).sum::<f64>(),
                    "masked_perplexity": ppl,
                }));
            }
            self.write_json(
                "reform_samples.json",
                &serde_json::json!({ "rows": rows }),
                &mut outputs,
            )?;
        }

        self.write_provenance("reform", None, inputs, outputs)?;
        println!(
            "reformed {} layers: objective {total_admm:.6} vs truncation \
             {total_trunc:.6} ({fallbacks} fallbacks)",
            report.layers.len(),
        );
        Ok(())
    }

    pub fn extract(&self, skip_reform: bool) -> Result<(), CliError> {
        let mut inputs = BTreeMap::new();
        let mut outputs = BTreeMap::new();
        let source = if skip_reform { "model.sdm" } else { "model_reformed.sdm" };
        let weights = if skip_reform {
            self.load_model(&mut inputs)?
        } else {
            let (config, weights) = self.load_checkpoint(source, &mut inputs)?;
            if config.fingerprint() != self.config.model.fingerprint() {
                return Err(CliError::Artifact(
                    "model_reformed.sdm was built under a different model \
                     configuration; re-run `whittle reform`"
                        .to_string(),
                ));
            }
            weights
        };
        let genome = self.load_genome("genome_best.txt", &mut inputs)?;
        let eval = self.load_eval_windows(&mut inputs)?;
        let dense = extract_dense(&weights, &self.config.model, &genome)?;
        let d32 = equivalence_check(
            &weights,
            &self.config.model,
            &genome,
            &dense,
            &eval.sequences,
            Precision::F32,
        )?;
        let d64 = equivalence_check(
            &weights,
            &self.config.model,
            &genome,
            &dense,
            &eval.sequences,
            Precision::F64,
        )?;
        if d32 > 1e-4 || d64 > 1e-10 {
            return Err(CliError::Numeric(format!(
                "extracted model disagrees with the masked forward: \
                 |logit diff| {d32:.3e} (f32) / {d64:.3e} (f64)"
            )));
        }
        self.write_artifact("subnet.sdm", &dense.to_container().to_bytes(), &mut outputs)?;
        let equivalence = serde_json::json!({
            "source": source,
            "probes": eval.sequences.len(),
            "max_abs_logit_diff_f32": d32,
            "max_abs_logit_diff_f64": d64,
        });
        self.write_json("equivalence.json", &equivalence, &mut outputs)?;
        self.write_provenance("extract", None, inputs, outputs)?;
        let full = param_count(
            &self.config.model,
            &Genome::identity(&self.config.model),
            CountScope::Full,
        );
        println!(
            "extracted dense subnet: {} scalars ({:.4} of the dense model's {full}); \
             max |logit diff| {d32:.2e} (f32) / {d64:.2e} (f64) over {} probes",
            dense.scalar_count(),
            dense.scalar_count() as f64 / full as f64,
            eval.sequences.len(),
        );
        Ok(())
    }

    pub fn eval(&self, sweep_sensitivity: bool) -> Result<(), CliError> {
        let mut inputs = BTreeMap::new();
        let mut outputs = BTreeMap::new();
        let config = &self.config.model;
        let weights = self.load_model(&mut inputs)?;
        let init = self.load_genome("genome_init.txt", &mut inputs)?;
        let best = self.load_genome("genome_best.txt", &mut inputs)?;
        let (reformed_config, reformed) =
            self.load_checkpoint("model_reformed.sdm", &mut inputs)?;
        if reformed_config.fingerprint() != config.fingerprint() {
            return Err(CliError::Artifact(
                "model_reformed.sdm was built under a different model configuration; \
                 re-run `whittle reform`"
                    .to_string(),
            ));
        }
        let subnet_bytes = self.read_artifact("subnet.sdm", &mut inputs)?;
        let subnet_path = self.path("subnet.sdm");
        let subnet = DenseSubnetModel::from_container(
            &TensorContainer::from_bytes(&subnet_bytes, &subnet_path)?,
            &subnet_path,
        )?;
        let eval = self.load_eval_windows(&mut inputs)?;
        let seqs = &eval.sequences;

        let rows = vec![
            ("dense", perplexity(&weights, config, seqs, None)?, 1.0),
            (
                "init-subnet",
                perplexity(&weights, config, seqs, Some(&init))?,
                self.retained_fraction(&init),
            ),
            (
                "searched-subnet",
                perplexity(&weights, config, seqs, Some(&best))?,
                self.retained_fraction(&best),
            ),
            (
                "reformed-subnet",
                perplexity(&reformed, config, seqs, Some(&best))?,
                self.retained_fraction(&best),
            ),
            ("extracted-dense", subnet.perplexity(seqs)?, self.retained_fraction(&best)),
        ];
        println!("{:<18} {:>12} {:>10}", "model", "perplexity", "retained");
        for (name, ppl, frac) in &rows {
            println!("{name:<18} {ppl:>12.4} {frac:>10.4}");
        }
        let report = serde_json::json!({
            "eval_windows": seqs.len(),
            "rows": rows
                .iter()
                .map(|(name, ppl, frac)| {
                    serde_json::json!({
                        "model": name,
                        "perplexity": ppl,
                        "retained_fraction": frac,
                    })
                })
                .collect::<Vec<_>>(),
        });
        self.write_json("eval_report.json", &report, &mut outputs)?;

        if sweep_sensitivity {
            let grams = self.load_grams(&mut inputs)?;
            let scores = score_model(&weights, config, &grams)?;
            let space = self.config.space();
            let unit = if config.rotary() { 2 } else { 1 };
            let mut attn_rows = Vec::new();
            for &ratio in &space.head_ratio_grid {
                let mut genome = Genome::identity(config);
                for (bg, bs) in genome.blocks.iter_mut().zip(&scores.per_block) {
                    let attn = attention_dim_scores(bs);
                    for (h, mask) in bg.head_masks.iter_mut().enumerate() {
                        let head = &attn[h * config.head_dim..(h + 1) * config.head_dim];
                        *mask = top_score_mask(head, ratio, unit);
                    }
                    bg.head_ratios = vec![ratio; config.n_heads];
                }
                let ppl = perplexity(&weights, config, seqs, Some(&genome))?;
                attn_rows.push(serde_json::json!({ "ratio": ratio, "perplexity": ppl }));
            }
            let mut mlp_rows = Vec::new();
            for &ratio in &space.mlp_ratio_grid {
                let mut genome = Genome::identity(config);
                for (bg, bs) in genome.blocks.iter_mut().zip(&scores.per_block) {
                    let mlp = mlp_dim_scores(bs);
                    bg.mlp_mask = top_score_mask(&mlp, ratio, 1);
                    bg.mlp_ratio = ratio;
                }
                let ppl = perplexity(&weights, config, seqs, Some(&genome))?;
                mlp_rows.push(serde_json::json!({ "ratio": ratio, "perplexity": ppl }));
            }
            let sensitivity = serde_json::json!({
                "attention": attn_rows,
                "mlp": mlp_rows,
            });
            self.write_json("sensitivity.json", &sensitivity, &mut outputs)?;
            println!(
                "sensitivity sweep: {} attention ratios, {} MLP ratios -> sensitivity.json",
                space.head_ratio_grid.len(),
                space.mlp_ratio_grid.len(),
            );
        }

        self.write_provenance("eval", None, inputs, outputs)?;
        Ok(())
    }

    pub fn bench(&self) -> Result<(), CliError> {
        let mut inputs = BTreeMap::new();
        let mut outputs = BTreeMap::new();
        let weights = self.load_model(&mut inputs)?;
        let subnet_bytes = self.read_artifact("subnet.sdm", &mut inputs)?;
        let subnet_path = self.path("subnet.sdm");
        let subnet = DenseSubnetModel::from_container(
            &TensorContainer::from_bytes(&subnet_bytes, &subnet_path)?,
            &subnet_path,
        )?;
        let eval = self.load_eval_windows(&mut inputs)?;
        const REPS: usize = 21;
        let dense = dense_throughput(&weights, &self.config.model, &eval.sequences, REPS)?;
        let extracted = extracted_throughput(&subnet, &eval.sequences, REPS)?;
        let speedup = extracted.tokens_per_sec / dense.tokens_per_sec;

        let grams = self.load_grams(&mut inputs)?;
        let genome = self.load_genome("genome_best.txt", &mut inputs)?;
        let admm = match self.trace_problem(&weights, &genome, &grams) {
            Some((block, layer, w, g, pruned)) => {
                let problem = ReformProblem {
                    w,
                    g,
                    pruned,
                    rho: self.config.reform.rho,
                    iters: self.config.reform.iters,
                };
                let started = Instant::now();
                const SOLVES: usize = 5;
                for _ in 0..SOLVES {
                    admm_reform(&problem)?;
                }
                let per_solve = started.elapsed().as_secs_f64() / SOLVES as f64;
                serde_json::json!({
                    "block": block,
                    "layer": layer,
                    "iters": problem.iters,
                    "seconds_per_solve": per_solve,
                })
            }
            None => serde_json::Value::Null,
        };
        let report = serde_json::json!({
            "reps": REPS,
            "tokens_per_rep": dense.tokens_per_rep,
            "dense_tokens_per_sec": dense.tokens_per_sec,
            "extracted_tokens_per_sec": extracted.tokens_per_sec,
            "speedup": speedup,
            "admm": admm,
        });
        self.write_json("bench.json", &report, &mut outputs)?;
        self.write_provenance("bench", None, inputs, outputs)?;
        println!(
            "dense {:.0} tokens/s, extracted {:.0} tokens/s ({speedup:.2}x) over \
             {REPS} reps",
            dense.tokens_per_sec, extracted.tokens_per_sec,
        );
        Ok(())
    }

    pub fn plot(&self) -> Result<(), CliError> {
        let mut inputs = BTreeMap::new();
        let mut outputs = BTreeMap::new();
        let mut written = Vec::new();

        if self.path("search_log.jsonl").exists() {
            let bytes = self.read_artifact("search_log.jsonl", &mut inputs)?;
            let log = whittle_core::search::SearchLog::from_jsonl(
                std::str::from_utf8(&bytes).unwrap_or_default(),
            )?;
            let mut series = vec![Series {
                label: "with init".to_string(),
                points: curve_points(&log.best_curve()),
            }];
            if self.path("search_log_noinit.jsonl").exists() {
                let bytes = self.read_artifact("search_log_noinit.jsonl", &mut inputs)?;
                let log = whittle_core::search::SearchLog::from_jsonl(
                    std::str::from_utf8(&bytes).unwrap_or_default(),
                )?;
                series.push(Series {
                    label: "random init".to_string(),
                    points: curve_points(&log.best_curve()),
                });
            }
            let svg = line_chart("Search convergence", "generation", "best perplexity", &series);
            self.write_artifact("plots/convergence.svg", svg.as_bytes(), &mut outputs)?;
            written.push("convergence.svg");
        }

        if self.path("sensitivity.json").exists() {
            let bytes = self.read_artifact("sensitivity.json", &mut inputs)?;
            let value: serde_json::Value = serde_json::from_slice(&bytes)
                .map_err(|e| CliError::Artifact(format!("sensitivity.json: {e}")))?;
            let series: Vec<Series> = [("attention", "attention"), ("mlp", "MLP")]
                .iter()
                .filter_map(|(key, label)| {
                    let rows = value.get(*key)?.as_array()?;
                    let points = rows
                        .iter()
                        .filter_map(|r| {
                            Some((r.get("ratio")?.as_f64()?, r.get("perplexity")?.as_f64()?))
                        })
                        .collect::<Vec<_>>();
                    Some(Series { label: label.to_string(), points })
                })
                .collect();
            let svg = line_chart("Masking sensitivity", "inheriting ratio", "perplexity", &series);
            self.write_artifact("plots/sensitivity.svg", svg.as_bytes(), &mut outputs)?;
            written.push("sensitivity.svg");
        }

        if self.path("reform_samples.json").exists() {
            let bytes = self.read_artifact("reform_samples.json", &mut inputs)?;
            let value: serde_json::Value = serde_json::from_slice(&bytes)
                .map_err(|e| CliError::Artifact(format!("reform_samples.json: {e}")))?;
            let rows = value.get("rows").and_then(|r| r.as_array()).cloned().unwrap_or_default();
            let points = rows
                .iter()
                .filter_map(|r| {
                    Some((r.get("samples")?.as_f64()?, r.get("masked_perplexity")?.as_f64()?))
                })
                .collect::<Vec<_>>();
            let svg = line_chart(
                "Reformation vs calibration size",
                "calibration windows",
                "masked perplexity",
                &[Series { label: "reformed".to_string(), points }],
            );
            self.write_artifact("plots/reform_samples.svg", svg.as_bytes(), &mut outputs)?;
            written.push("reform_samples.svg");
        }

        if self.path("reform_trace.json").exists() {
            let bytes = self.read_artifact("reform_trace.json", &mut inputs)?;
            let value: serde_json::Value = serde_json::from_slice(&bytes)
                .map_err(|e| CliError::Artifact(format!("reform_trace.json: {e}")))?;
            let trace = value
                .get("objective_trace")
                .and_then(|t| t.as_array())
                .map(|t| t.iter().filter_map(|v| v.as_f64()).collect::<Vec<_>>())
                .unwrap_or_default();
            let mut series = vec![Series {
                label: "objective".to_string(),
                points: trace.iter().enumerate().map(|(i, v)| ((i + 1) as f64, *v)).collect(),
            }];
            if let Some(oracle) = value.get("objective_oracle").and_then(|v| v.as_f64()) {
                series.push(Series {
                    label: "closed form".to_string(),
                    points: vec![(1.0, oracle), (trace.len().max(1) as f64, oracle)],
                });
            }
            let svg =
                line_chart("Reformation objective by step", "iteration", "objective", &series);
            self.write_artifact("plots/reform_steps.svg", svg.as_bytes(), &mut outputs)?;
            written.push("reform_steps.svg");
        }

        if self.path("reform_rho.json").exists() {
            let bytes = self.read_artifact("reform_rho.json", &mut inputs)?;
            let value: serde_json::Value = serde_json::from_slice(&bytes)
                .map_err(|e| CliError::Artifact(format!("reform_rho.json: {e}")))?;
            let curves =
                value.get("curves").and_then(|c| c.as_array()).cloned().unwrap_or_default();
            let series: Vec<Series> = curves
                .iter()
                .filter_map(|c| {
                    let rho = c.get("rho")?.as_f64()?;
                    let gaps = c.get("rel_gap")?.as_array()?;
                    let points = gaps
                        .iter()
                        .enumerate()
                        .filter_map(|(i, v)| Some(((i + 1) as f64, v.as_f64()?)))
                        .collect::<Vec<_>>();
                    Some(Series { label: format!("rho {rho}"), points })
                })
                .collect();
            let svg = line_chart(
                "Objective gap by penalty weight",
                "iteration",
                "relative gap to closed form",
                &series,
            );
            self.write_artifact("plots/reform_rho.svg", svg.as_bytes(), &mut outputs)?;
            written.push("reform_rho.svg");
        }

        if written.is_empty() {
            return Err(CliError::Artifact(format!(
                "nothing to plot under {}; run the pipeline stages first",
                self.out_dir.display()
            )));
        }
        self.write_provenance("plot", None, inputs, outputs)?;
        println!(
            "wrote {} plots to {}: {}",
            written.len(),
            self.path("plots").display(),
            written.join(", "),
        );
        Ok(())
    }

    /// Recompute the hashes in one or all provenance records.
    pub fn verify(&self, stage: Option<&'static str>) -> Result<(), CliError> {
        let dir = self.out_dir.join("provenance");
        let records: Vec<PathBuf> = match stage {
            Some(stage) => {
                let path = self.provenance_path(stage);
                if !path.exists() {
                    return Err(CliError::Artifact(format!(
                        "no provenance record for stage {stage} under {}",
                        dir.display()
                    )));
                }
                vec![path]
            }
            None => {
                let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
                    .map_err(|_| {
                        CliError::Artifact(format!(
                            "no provenance records under {}; run a stage first",
                            dir.display()
                        ))
                    })?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|e| e == "json"))
                    .collect();
                paths.sort();
                paths
            }
        };
        let mut checked = 0usize;
        let mut failures = Vec::new();
        for record_path in &records {
            let bytes = std::fs::read(record_path).map_err(|e| {
                CliError::Artifact(format!("cannot read {}: {e}", record_path.display()))
            })?;
            let record: Provenance = serde_json::from_slice(&bytes).map_err(|e| {
                CliError::Artifact(format!("malformed {}: {e}", record_path.display()))
            })?;
            for (kind, map) in [("input", &record.inputs), ("output", &record.outputs)] {
                for (name, recorded) in map {
                    checked += 1;
                    let candidate = self.path(name);
                    let path = if candidate.exists() { candidate } else { PathBuf::from(name) };
                    match std::fs::read(&path) {
                        Ok(bytes) if sha256_hex(&bytes) == *recorded => {}
                        Ok(_) => failures.push(format!(
                            "{}: {kind} {name} no longer matches its recorded hash",
                            record.stage
                        )),
                        Err(_) => {
                            failures.push(format!("{}: {kind} {name} is missing", record.stage))
                        }
                    }
                }
            }
        }
        if failures.is_empty() {
            println!("verified {checked} files across {} provenance records", records.len());
            Ok(())
        } else {
            for f in &failures {
                eprintln!("verify: {f}");
            }
            Err(CliError::Artifact(format!(
                "{} of {checked} recorded files failed verification",
                failures.len()
            )))
        }
    }
}

fn curve_points(curve: &[f64]) -> Vec<(f64, f64)> {
    curve.iter().enumerate().map(|(i, v)| (i as f64, *v)).collect()
}
