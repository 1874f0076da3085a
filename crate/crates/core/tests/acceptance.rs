//! Acceptance gate: one test per shipped guarantee, each printing a PASS
//! line with the measured numbers. The heavyweight fixtures (trained toy
//! model, captured Grams, the full evolutionary run) are built once and
//! shared.

use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;
use whittle_core::container::{grams_to_container, model_to_container};
use whittle_core::data::{sample_calibration, sample_eval_windows, tokenize_bytes, Corpus};
use whittle_core::extract::{
    dense_throughput, equivalence_check, extract_dense, extracted_throughput,
};
use whittle_core::genome::{mask_mutation, SelectionMask};
use whittle_core::importance::{element_importance, init_genome};
use whittle_core::model::{
    capture_grams, forward_logits, full_block_param_count, param_count, train_toy_lm, LayerInputTap,
};
use whittle_core::reference::{brute_force_param_count, constrained_removal_error};
use whittle_core::reform::{
    admm_reform, exact_column_ls_oracle, reform_objective, reform_subnet, truncation_baseline,
    ReformProblem, ReformSettings,
};
use whittle_core::search::{budget_window, random_genome, run_search, SearchConfig, SearchOutcome};
use whittle_core::util::{derive_rng, derive_rng_indexed};
use whittle_core::{
    CountScope, Genome, GramSet, Matrix, ModelConfig, ModelWeights, Precision, SearchSpace,
    SimilarityMode, TrainerSettings,
};

struct Fixture {
    config: ModelConfig,
    weights: ModelWeights,
    corpus: Corpus,
    grams: GramSet,
    init08: Genome,
    eval: Vec<Vec<u32>>,
}

const CALIB_SEED: u64 = 7;
const CALIB_SEQS: usize = 256;
const CALIB_LEN: usize = 32;

fn fixture() -> &'static Fixture {
    static FIX: OnceLock<Fixture> = OnceLock::new();
    FIX.get_or_init(|| {
        let config = ModelConfig::toy();
        let text = std::fs::read(corpus_path()).expect("bundled corpus present");
        let corpus = tokenize_bytes("bundled", &text);
        let (weights, report) =
            train_toy_lm(&config, &corpus, &TrainerSettings::default()).expect("training runs");
        let final_loss = report.final_loss().expect("non-empty loss trace");
        assert!(final_loss < 5.05, "toy model failed to learn anything: final loss {final_loss}");
        let calib = sample_calibration(&corpus, CALIB_SEQS, CALIB_LEN, CALIB_SEED).unwrap();
        let grams = capture_grams(&weights, &config, &calib, &LayerInputTap::all()).unwrap();
        let space = SearchSpace::toy_default(&config, 0.8);
        let init08 = init_genome(&weights, &config, &grams, 0.8, &space).unwrap();
        let eval = sample_eval_windows(&corpus, 8, 32, 99).unwrap().sequences;
        Fixture { config, weights, corpus, grams, init08, eval }
    })
}

fn corpus_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../assets/corpus.txt")
}

fn out_dir() -> PathBuf {
    let dir = std::env::var("WHITTLE_OUT").map(PathBuf::from).unwrap_or_else(|_| {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance")
    });
    std::fs::create_dir_all(&dir).expect("output dir creatable");
    dir
}

struct BigSearch {
    outcome: SearchOutcome,
    seconds: f64,
}

fn big_search() -> &'static BigSearch {
    static OUT: OnceLock<BigSearch> = OnceLock::new();
    OUT.get_or_init(|| {
        let f = fixture();
        let space = SearchSpace::toy_default(&f.config, 0.8);
        let search = SearchConfig::toy_default(space, 4242);
        let start = Instant::now();
        let outcome =
            run_search(&f.weights, &f.config, &f.init08, &f.eval, &search).expect("search runs");
        BigSearch { outcome, seconds: start.elapsed().as_secs_f64() }
    })
}

fn box_muller(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Random reformation instance: unit-variance weights, a Gram of `samples`
/// unit-variance inputs scaled so its diagonal is O(1), and a random half of
/// the columns pruned.
fn reform_instance(dim: usize, samples: usize, seed: u64) -> (Matrix, Matrix, Vec<bool>) {
    let mut rng = derive_rng(seed, &["acceptance-reform"]);
    let w = Matrix::from_fn(dim, dim, |_, _| box_muller(&mut rng));
    let scale = 1.0 / (samples as f64).sqrt();
    let x: Vec<Vec<f64>> =
        (0..dim).map(|_| (0..samples).map(|_| box_muller(&mut rng) * scale).collect()).collect();
    let g = Matrix::from_fn(dim, dim, |i, j| x[i].iter().zip(&x[j]).map(|(a, b)| a * b).sum());
    let mut pruned = vec![false; dim];
    for ix in rand::seq::index::sample(&mut rng, dim, dim / 2) {
        pruned[ix] = true;
    }
    (w, g, pruned)
}

#[test]
fn criterion_01_admm_matches_exact_solver() {
    let start = Instant::now();
    let mut worst_gap = 0.0f64;
    for seed in 0..20u64 {
        let (w, g, pruned) = reform_instance(32, 256, seed);
        let problem = ReformProblem {
            w: w.clone(),
            g: g.clone(),
            pruned: pruned.clone(),
            rho: 1.0,
            iters: 30,
        };
        let result = admm_reform(&problem).unwrap();
        let oracle = exact_column_ls_oracle(&w, &g, &pruned).unwrap();
        let obj_admm = reform_objective(&result.w_hat, &w, &g);
        let obj_star = reform_objective(&oracle, &w, &g);
        assert!(obj_star > 0.0, "degenerate instance {seed}");
        let gap = (obj_admm - obj_star) / obj_star;
        assert!(
            gap <= 1e-3,
            "instance {seed}: objective {obj_admm} vs optimum {obj_star}, gap {gap:.3e}"
        );
        worst_gap = worst_gap.max(gap);
    }
    let seconds = start.elapsed().as_secs_f64();
    assert!(seconds < 5.0, "20 instances took {seconds:.2}s");
    println!(
        "[C01] PASS 30-iteration splitting within {worst_gap:.2e} of the closed form \
         on 20 instances in {seconds:.2}s"
    );
}

#[test]
fn criterion_02_admm_beats_truncation() {
    let mut strict = 0;
    let mut worst_ratio = f64::INFINITY;
    for seed in 0..20u64 {
        let (w, g, pruned) = reform_instance(32, 256, seed);
        let problem = ReformProblem {
            w: w.clone(),
            g: g.clone(),
            pruned: pruned.clone(),
            rho: 1.0,
            iters: 30,
        };
        let result = admm_reform(&problem).unwrap();
        let obj_admm = reform_objective(&result.w_hat, &w, &g);
        let obj_trunc = reform_objective(&truncation_baseline(&w, &pruned), &w, &g);
        assert!(
            obj_admm <= obj_trunc + 1e-9,
            "instance {seed}: reform {obj_admm} worse than truncation {obj_trunc}"
        );
        if obj_admm < obj_trunc {
            strict += 1;
        }
        worst_ratio = worst_ratio.min(obj_trunc / obj_admm.max(1e-300));
    }
    assert!(strict >= 19, "only {strict}/20 instances strictly improved");
    println!(
        "[C02] PASS reform beat plain truncation on {strict}/20 instances \
         (worst improvement factor {worst_ratio:.2})"
    );
}

#[test]
fn criterion_03_reform_edge_masks() {
    for seed in 0..5u64 {
        let (w, g, _) = reform_instance(32, 256, seed);
        let nothing = ReformProblem {
            w: w.clone(),
            g: g.clone(),
            pruned: vec![false; 32],
            rho: 1.0,
            iters: 30,
        };
        let result = admm_reform(&nothing).unwrap();
        assert_eq!(result.objective_trace.len(), 30);
        let drift = result
            .w_hat
            .data()
            .iter()
            .zip(w.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(drift <= 1e-12, "instance {seed}: weights drifted by {drift:.3e}");
        for (it, obj) in result.objective_trace.iter().enumerate() {
            assert!(
                obj.abs() <= 1e-20,
                "instance {seed} iteration {it}: objective {obj:.3e} off zero"
            );
        }

        let everything =
            ReformProblem { w: w.clone(), g, pruned: vec![true; 32], rho: 1.0, iters: 30 };
        let result = admm_reform(&everything).unwrap();
        assert!(result.w_hat.data().iter().all(|v| *v == 0.0));
    }
    println!(
        "[C03] PASS empty masks hold the weights fixed (drift <= 1e-12 across all \
         iterations) and full masks end at exact zero"
    );
}

#[test]
fn criterion_04_importance_matches_removal_oracle() {
    let mut worst_rel = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = derive_rng(seed, &["acceptance-importance"]);
        let w = Matrix::from_fn(16, 16, |_, _| box_muller(&mut rng));
        let scale = 1.0 / 8.0;
        let x: Vec<Vec<f64>> =
            (0..16).map(|_| (0..64).map(|_| box_muller(&mut rng) * scale).collect()).collect();
        let g = Matrix::from_fn(16, 16, |i, j| x[i].iter().zip(&x[j]).map(|(a, b)| a * b).sum());
        let (phi, lambda) = element_importance(&w, &g).unwrap();
        assert_eq!(lambda, 0.0, "instance {seed}: healthy Gram needed damping");
        let mut pairs: Vec<(f64, f64)> = Vec::with_capacity(256);
        for i in 0..16 {
            for j in 0..16 {
                let doubled = 2.0 * constrained_removal_error(&w, &g, i, j).unwrap();
                let rel = (phi.get(i, j) - doubled).abs() / doubled.abs().max(1e-12);
                assert!(
                    rel <= 1e-6,
                    "instance {seed} ({i},{j}): score {} vs 2x removal error {doubled}",
                    phi.get(i, j)
                );
                worst_rel = worst_rel.max(rel);
                pairs.push((phi.get(i, j), doubled));
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        for pair in pairs.windows(2) {
            assert!(
                pair[1].1 >= pair[0].1 * (1.0 - 5e-6) - 1e-12,
                "instance {seed}: score order inverts the removal-error order"
            );
        }
    }
    println!(
        "[C04] PASS importance equals twice the constrained removal error \
         (worst relative gap {worst_rel:.2e}) and preserves its ranking"
    );
}

#[test]
fn criterion_05_mask_mutation_statistics() {
    const N: usize = 128;
    const P_M: f64 = 0.3;
    // How each (gamma, alpha) cell behaves: redraws succeed and the
    // early-exit rate is measurable, redraws are statistically impossible so
    // every trial returns the input, the result is always identical to the
    // input for other reasons, or the cell is too borderline to classify.
    #[derive(Clone, Copy, PartialEq)]
    enum Cell {
        Freq,
        Exhausts,
        AlwaysInput,
        InvariantsOnly,
    }
    use Cell::*;
    let gammas = [0.25, 0.5, 0.8, 1.0];
    let alphas = [0.5, 0.8, 0.95];
    let cells: [[Cell; 3]; 4] = [
        [InvariantsOnly, Exhausts, Exhausts],
        [Freq, Exhausts, Exhausts],
        [Freq, Freq, Exhausts],
        [AlwaysInput, AlwaysInput, AlwaysInput],
    ];
    let mut freq_report = Vec::new();
    for (gi, &gamma) in gammas.iter().enumerate() {
        let target = (gamma * N as f64).round() as usize;
        let mut base_rng = derive_rng_indexed(5005, "mask-base", &[gi as u64]);
        let kept = rand::seq::index::sample(&mut base_rng, N, target).into_vec();
        let base = SelectionMask::from_kept_indices(N, &kept);
        for (ai, &alpha) in alphas.iter().enumerate() {
            let cell = cells[gi][ai];
            let trials: u64 = match cell {
                Freq | AlwaysInput => 10_000,
                Exhausts | InvariantsOnly => 300,
            };
            let mut unchanged = 0u64;
            for t in 0..trials {
                let mut rng = derive_rng_indexed(5005, "mask-stats", &[gi as u64, ai as u64, t]);
                let out = mask_mutation(
                    &base,
                    P_M,
                    gamma,
                    alpha,
                    1000,
                    SimilarityMode::RelativeToKeep,
                    &mut rng,
                );
                assert_eq!(
                    out.popcount(),
                    target,
                    "gamma {gamma} alpha {alpha}: wrong cardinality"
                );
                if out.bits() == base.bits() {
                    unchanged += 1;
                } else {
                    let overlap = out.kept_indices().iter().filter(|i| base.get(**i)).count();
                    assert!(
                        overlap as f64 >= alpha * target as f64 - 1e-9,
                        "gamma {gamma} alpha {alpha}: accepted overlap {overlap} \
                         below threshold"
                    );
                }
            }
            match cell {
                Freq => {
                    let freq = unchanged as f64 / trials as f64;
                    assert!(
                        (freq - (1.0 - P_M)).abs() <= 0.03,
                        "gamma {gamma} alpha {alpha}: early-exit rate {freq:.4}, \
                         expected {:.2} +- 0.03",
                        1.0 - P_M
                    );
                    freq_report.push(format!("g={gamma}/a={alpha}: {freq:.3}"));
                }
                Exhausts | AlwaysInput => {
                    assert_eq!(
                        unchanged, trials,
                        "gamma {gamma} alpha {alpha}: expected every trial to \
                         return the input"
                    );
                }
                InvariantsOnly => {}
            }
        }
    }
    println!(
        "[C05] PASS mutation keeps round(gamma*N) bits, honors the similarity bound, \
         returns the input on exhaustion; early-exit rates {{{}}} vs 0.70",
        freq_report.join(", ")
    );
}

#[test]
fn criterion_06_extraction_equivalence() {
    let f = fixture();
    let space = SearchSpace::toy_default(&f.config, 0.8);
    let probes = sample_eval_windows(&f.corpus, 3, 24, 123).unwrap().sequences;

    let identity = Genome::identity(&f.config);
    let dense = extract_dense(&f.weights, &f.config, &identity).unwrap();
    for seq in &probes {
        let a = forward_logits(&f.weights, &f.config, seq, Some(&identity)).unwrap();
        let b = dense.forward_logits(seq).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits(), "identity extraction not bit-equal");
        }
    }

    let mut worst32 = 0.0f64;
    let mut worst64 = 0.0f64;
    for seed in 0..50u64 {
        let genome = random_genome(&f.config, &space, seed);
        let dense = extract_dense(&f.weights, &f.config, &genome).unwrap();
        let d32 =
            equivalence_check(&f.weights, &f.config, &genome, &dense, &probes, Precision::F32)
                .unwrap();
        let d64 =
            equivalence_check(&f.weights, &f.config, &genome, &dense, &probes, Precision::F64)
                .unwrap();
        assert!(d32 <= 1e-4, "seed {seed}: f32 logit gap {d32:.3e}");
        assert!(d64 <= 1e-10, "seed {seed}: f64 logit gap {d64:.3e}");
        worst32 = worst32.max(d32);
        worst64 = worst64.max(d64);
    }
    println!(
        "[C06] PASS identity extraction bit-equal; 50 fuzzed subnets within \
         {worst32:.1e} (f32) / {worst64:.1e} (f64) of the masked forward"
    );
}

#[test]
fn criterion_07_search_improves_fitness() {
    let big = big_search();
    assert!(big.seconds < 1800.0, "full search took {:.0}s, budget is 30 minutes", big.seconds);
    let curve = big.outcome.log.best_curve();
    assert_eq!(curve.len(), 51);
    for pair in curve.windows(2) {
        assert!(
            pair[1] <= pair[0],
            "best fitness worsened between generations: {} -> {}",
            pair[0],
            pair[1]
        );
    }
    let start = big.outcome.start_fitness.expect("starting genome inside the budget");
    let best = big.outcome.best.fitness.expect("best candidate evaluated");
    assert!(best <= start, "final fitness {best} worse than the initialized genome {start}");
    let payload = serde_json::json!({
        "seed": 4242,
        "start_fitness": start,
        "best_fitness": best,
        "best_curve": curve,
    });
    std::fs::write(
        out_dir().join("search_curve.json"),
        serde_json::to_string_pretty(&payload).unwrap(),
    )
    .unwrap();
    println!(
        "[C07] PASS 50-generation search ran in {:.0}s, best perplexity {best:.4} \
         from initialized {start:.4}, curve monotone",
        big.seconds
    );
}

#[test]
fn criterion_08_importance_init_ablation() {
    let f = fixture();
    let space = SearchSpace::toy_default(&f.config, 0.8);
    const PIVOT: usize = 10;
    let run = |seed: u64, start: &Genome| {
        let search = SearchConfig::toy_default(space.clone(), seed);
        run_search(&f.weights, &f.config, start, &f.eval, &search)
            .expect("ablation search runs")
            .log
            .best_curve()
    };
    let no_init_start = |seed: u64| random_genome(&f.config, &space, seed);

    let with0 = big_search().outcome.log.best_curve();
    let without0 = run(4242, &no_init_start(4242));
    assert_eq!(with0.len(), without0.len());
    let tail_mean =
        |curve: &[f64]| curve[PIVOT..].iter().sum::<f64>() / (curve.len() - PIVOT) as f64;
    let final_best = |curve: &[f64]| *curve.last().unwrap();
    let mut payload = serde_json::json!({
        "seed": 4242,
        "pivot_generation": PIVOT,
        "with_init": with0,
        "without_init": without0,
    });
    let emit = |payload: &serde_json::Value| {
        std::fs::write(
            out_dir().join("ablation_curves.json"),
            serde_json::to_string_pretty(payload).unwrap(),
        )
        .unwrap();
    };

    let dominated =
        with0[PIVOT..].iter().zip(&without0[PIVOT..]).all(|(with, without)| without >= with);
    if dominated {
        emit(&payload);
        println!(
            "[C08] PASS random-start best fitness stayed at or above the initialized \
             run's from generation {PIVOT} on (seed 4242); curves in ablation_curves.json"
        );
        return;
    }

    let mut sweep = Vec::new();
    let mut wins_with = 0usize;
    let mut wins_without = 0usize;
    for seed in 4242..4247u64 {
        let (with_curve, without_curve) = if seed == 4242 {
            (with0.clone(), without0.clone())
        } else {
            (run(seed, &f.init08), run(seed, &no_init_start(seed)))
        };
        let with_final = final_best(&with_curve);
        let without_final = final_best(&without_curve);
        let winner = if with_final < without_final {
            wins_with += 1;
            "with_init"
        } else if without_final < with_final {
            wins_without += 1;
            "without_init"
        } else {
            "tie"
        };
        sweep.push(serde_json::json!({
            "seed": seed,
            "final_with_init": with_final,
            "final_without_init": without_final,
            "tail_mean_with_init": tail_mean(&with_curve),
            "tail_mean_without_init": tail_mean(&without_curve),
            "winner": winner,
        }));
    }
    payload["sweep"] = serde_json::Value::Array(sweep);
    emit(&payload);
    assert!(
        wins_with > wins_without,
        "initialized search yielded the better final subnet on only {wins_with}/5 \
         seeds ({wins_without} losses); sweep recorded in ablation_curves.json"
    );
    println!(
        "[C08] PASS initialized search yielded the better final subnet on \
         {wins_with}/5 seeds; sweep in ablation_curves.json"
    );
}

#[test]
fn criterion_09_budget_compliance_and_counts() {
    let f = fixture();
    let space = SearchSpace::toy_default(&f.config, 0.8);
    let (lo, hi) = budget_window(&f.config, &space);
    let big = big_search();
    for (ix, elite) in big.outcome.elites.iter().enumerate() {
        assert!(
            elite.param_count >= lo && elite.param_count <= hi,
            "elite {ix}: {} retained parameters outside [{lo}, {hi}]",
            elite.param_count
        );
        let recount = param_count(&f.config, &elite.genome, CountScope::BlocksOnly);
        assert_eq!(elite.param_count, recount);
    }
    for seed in 0..100u64 {
        let genome = random_genome(&f.config, &space, seed);
        for scope in [CountScope::BlocksOnly, CountScope::Full] {
            assert_eq!(
                param_count(&f.config, &genome, scope),
                brute_force_param_count(&f.config, &genome, scope),
                "seed {seed} {scope:?}: analytic count disagrees with enumeration"
            );
        }
    }
    println!(
        "[C09] PASS all {} elites inside the retention window [{lo}, {hi}]; analytic \
         parameter counts match slot-by-slot enumeration on 100 fuzzed genomes",
        big.outcome.elites.len()
    );
}

#[test]
fn criterion_10_extraction_footprint_and_throughput() {
    let f = fixture();
    let space = SearchSpace::toy_default(&f.config, 0.5);
    let genome = init_genome(&f.weights, &f.config, &f.grams, 0.5, &space).unwrap();
    let dense = extract_dense(&f.weights, &f.config, &genome).unwrap();
    let full_blocks = full_block_param_count(&f.config);
    let fraction = dense.block_scalar_count() as f64 / full_blocks as f64;
    assert!(
        (fraction - 0.5).abs() <= 0.01,
        "extracted block weights are {fraction:.4} of the original, wanted 0.50 \
         within rounding granularity"
    );
    assert_eq!(dense.block_weight_bytes(), dense.block_scalar_count() * 4);

    let baseline = dense_throughput(&f.weights, &f.config, &f.eval, 21).unwrap();
    let extracted = extracted_throughput(&dense, &f.eval, 21).unwrap();
    let speedup = extracted.tokens_per_sec / baseline.tokens_per_sec;
    assert!(
        speedup >= 1.2,
        "extracted half-width model only {speedup:.2}x faster \
         ({:.0} vs {:.0} tokens/s)",
        extracted.tokens_per_sec,
        baseline.tokens_per_sec
    );
    println!(
        "[C10] PASS half-ratio extraction stores {fraction:.4} of the block bytes and \
         runs {speedup:.2}x faster ({:.0} vs {:.0} tokens/s)",
        extracted.tokens_per_sec, baseline.tokens_per_sec
    );
}

#[test]
fn criterion_11_calibration_size_stability() {
    let f = fixture();
    let sizes = [128usize, 512, 1024];
    let mut objectives = Vec::new();
    for &n in &sizes {
        let calib = sample_calibration(&f.corpus, n, CALIB_LEN, 31).unwrap();
        let grams = capture_grams(&f.weights, &f.config, &calib, &LayerInputTap::all()).unwrap();
        let (_, report) =
            reform_subnet(&f.weights, &f.config, &f.init08, &grams, &ReformSettings::default())
                .unwrap();
        let total: f64 = report.layers.iter().map(|l| l.objective_admm).sum();
        assert!(total.is_finite() && total > 0.0);
        objectives.push(total);
    }
    let mut worst = 0.0f64;
    for i in 0..sizes.len() {
        for j in i + 1..sizes.len() {
            let rel = (objectives[i] - objectives[j]).abs() / objectives[i].max(objectives[j]);
            assert!(
                rel < 0.05,
                "objectives for {} vs {} sequences differ by {:.1}%: {:?}",
                sizes[i],
                sizes[j],
                rel * 100.0,
                objectives
            );
            worst = worst.max(rel);
        }
    }
    println!(
        "[C11] PASS reformation objectives stable across calibration sizes \
         {sizes:?}: max pairwise difference {:.2}%",
        worst * 100.0
    );
}

#[test]
fn criterion_12_artifact_determinism() {
    let f = fixture();

    let (weights2, _) = train_toy_lm(&f.config, &f.corpus, &TrainerSettings::default()).unwrap();
    let model_a = model_to_container(&f.weights, &f.config).to_bytes();
    let model_b = model_to_container(&weights2, &f.config).to_bytes();
    assert_eq!(model_a, model_b, "retraining produced different checkpoint bytes");

    let calib = sample_calibration(&f.corpus, CALIB_SEQS, CALIB_LEN, CALIB_SEED).unwrap();
    let grams2 = capture_grams(&f.weights, &f.config, &calib, &LayerInputTap::all()).unwrap();
    assert_eq!(
        grams_to_container(&f.grams, &f.config).to_bytes(),
        grams_to_container(&grams2, &f.config).to_bytes(),
        "recapturing produced different Gram bytes"
    );

    let space = SearchSpace::toy_default(&f.config, 0.8);
    let init2 = init_genome(&f.weights, &f.config, &grams2, 0.8, &space).unwrap();
    assert_eq!(f.init08.to_text(), init2.to_text(), "re-initialization differs");

    let mut search = SearchConfig::toy_default(space, 55);
    search.population = 12;
    search.elites = 3;
    search.mutation_offspring = 6;
    search.crossover_offspring = 3;
    search.generations = 2;
    let run =
        || run_search(&f.weights, &f.config, &f.init08, &f.eval, &search).unwrap().log.to_jsonl();
    let log_a = run();
    let log_b = run();
    assert_eq!(log_a, log_b, "re-running the search produced a different log");

    let pool1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let pool2 = rayon::ThreadPoolBuilder::new().num_threads(2).build().unwrap();
    let log_w1 = pool1.install(run);
    let log_w2 = pool2.install(run);
    assert_eq!(log_w1, log_a, "1-worker run changed the log");
    assert_eq!(log_w2, log_a, "2-worker run changed the log");

    println!(
        "[C12] PASS retraining, recapturing, re-initialization, and re-searching all \
         reproduce byte-identical artifacts; worker count does not leak into results"
    );
}
