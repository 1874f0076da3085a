//! Search-space representation and variation operators: per-head and MLP
//! selection masks, depth bits, inheriting ratios, mask mutation, ratio and
//! depth mutation, crossover, and validation against a quantized search
//! space.

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::util::sha256_hex;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Binary keep/omit vector over one head's dims or one block's MLP units.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionMask {
    bits: Vec<bool>,
}

impl SelectionMask {
    pub fn ones(n: usize) -> Self {
        SelectionMask { bits: vec![true; n] }
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        SelectionMask { bits }
    }

    pub fn from_kept_indices(n: usize, kept: &[usize]) -> Self {
        let mut bits = vec![false; n];
        for &i in kept {
            assert!(i < n, "kept index {i} out of range {n}");
            bits[i] = true;
        }
        SelectionMask { bits }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        self.bits.iter().enumerate().filter_map(|(i, b)| b.then_some(i)).collect()
    }

    /// Fraction of ones: the mask's inheriting ratio.
    pub fn inheriting_ratio(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        self.popcount() as f64 / self.bits.len() as f64
    }

    /// True when the mask is constant on each `(2i, 2i+1)` pair, the
    /// granularity required in rotary mode.
    pub fn is_pairwise(&self) -> bool {
        self.bits.chunks(2).all(|c| c.len() == 2 && c[0] == c[1])
    }
}

/// How the mask-mutation similarity threshold is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SimilarityMode {
    /// Threshold `alpha * round(gamma * N)`: overlap measured relative to the
    /// target keep-set size, satisfiable for every ratio in the grid.
    #[default]
    RelativeToKeep,
    /// Threshold `alpha * N` as literally stated; unsatisfiable whenever
    /// `alpha > gamma`, in which case mutation always falls back to the
    /// input.
    LiteralAlphaN,
}

/// Mutate one selection mask toward target ratio `gamma`.
///
/// Draws an acceptance uniform first; if the mask already has the target
/// cardinality and the draw exceeds `p_m`, the mask is returned unchanged.
/// Otherwise up to `eta` random keep-sets of size `round(gamma * N)` are
/// drawn until one overlaps the current keep-set by at least the similarity
/// threshold; exhaustion returns the input unchanged.
pub fn mask_mutation(
    s: &SelectionMask,
    p_m: f64,
    gamma: f64,
    alpha: f64,
    eta: usize,
    mode: SimilarityMode,
    rng: &mut impl Rng,
) -> SelectionMask {
    mask_mutation_units(s, p_m, gamma, alpha, eta, 1, mode, rng)
}

/// [`mask_mutation`] at a coarser granularity: the mask is treated as
/// `len / unit` contiguous units that are kept or omitted together (rotary
/// attention uses `unit = 2`).
#[allow(clippy::too_many_arguments)]
pub fn mask_mutation_units(
    s: &SelectionMask,
    p_m: f64,
    gamma: f64,
    alpha: f64,
    eta: usize,
    unit: usize,
    mode: SimilarityMode,
    rng: &mut impl Rng,
) -> SelectionMask {
    assert!(unit >= 1 && s.len().is_multiple_of(unit), "mask length not a multiple of unit");
    let n_units = s.len() / unit;
    let current: Vec<bool> = (0..n_units).map(|u| s.get(u * unit)).collect();
    debug_assert!(
        (0..n_units).all(|u| (0..unit).all(|k| s.get(u * unit + k) == current[u])),
        "mask not constant within units"
    );
    let target = (gamma * n_units as f64).round() as usize;
    let p_r: f64 = rng.gen();
    let current_count = current.iter().filter(|b| **b).count();
    if current_count == target && p_r > p_m {
        return s.clone();
    }
    let threshold = match mode {
        SimilarityMode::RelativeToKeep => alpha * target as f64,
        SimilarityMode::LiteralAlphaN => alpha * n_units as f64,
    };
    for _ in 0..eta {
        let draw = rand::seq::index::sample(rng, n_units, target);
        let overlap = draw.iter().filter(|&i| current[i]).count();
        if overlap as f64 >= threshold - 1e-9 {
            let mut bits = vec![false; s.len()];
            for i in draw {
                for k in 0..unit {
                    bits[i * unit + k] = true;
                }
            }
            return SelectionMask { bits };
        }
    }
    s.clone()
}

/// One block's share of a genome: depth bit, per-head masks, MLP mask, and
/// the ratios they were generated toward.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockGenome {
    pub kept: bool,
    pub head_masks: Vec<SelectionMask>,
    pub mlp_mask: SelectionMask,
    pub head_ratios: Vec<f64>,
    pub mlp_ratio: f64,
}

impl BlockGenome {
    pub fn identity(n_heads: usize, head_dim: usize, d_mlp: usize) -> Self {
        BlockGenome {
            kept: true,
            head_masks: vec![SelectionMask::ones(head_dim); n_heads],
            mlp_mask: SelectionMask::ones(d_mlp),
            head_ratios: vec![1.0; n_heads],
            mlp_ratio: 1.0,
        }
    }

    /// Concatenated per-head masks as one length-M vector in head order.
    pub fn attn_mask_flat(&self) -> Vec<bool> {
        let mut flat = Vec::with_capacity(self.head_masks.iter().map(|m| m.len()).sum());
        for m in &self.head_masks {
            flat.extend_from_slice(m.bits());
        }
        flat
    }

    pub fn attn_kept(&self) -> usize {
        self.head_masks.iter().map(|m| m.popcount()).sum()
    }
}

/// Provenance carried with a genome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenomeMeta {
    pub seed: u64,
    pub lineage: String,
    #[serde(default)]
    pub init_ratio: Option<f64>,
}

impl Default for GenomeMeta {
    fn default() -> Self {
        GenomeMeta { seed: 0, lineage: "manual".to_string(), init_ratio: None }
    }
}

/// A complete subnet specification over a model: one [`BlockGenome`] per
/// block, the owning config's fingerprint, and seed lineage.
#[derive(Debug, Clone, PartialEq)]
pub struct Genome {
    pub blocks: Vec<BlockGenome>,
    pub config_fingerprint: String,
    pub meta: GenomeMeta,
}

impl Genome {
    /// All blocks kept, all masks full, ratios 1.
    pub fn identity(config: &ModelConfig) -> Self {
        Genome {
            blocks: (0..config.depth)
                .map(|_| BlockGenome::identity(config.n_heads, config.head_dim, config.d_mlp))
                .collect(),
            config_fingerprint: config.fingerprint(),
            meta: GenomeMeta::default(),
        }
    }

    pub fn kept_blocks(&self) -> usize {
        self.blocks.iter().filter(|b| b.kept).count()
    }

    /// Stable hash of the structural content (depth bits, masks, ratios),
    /// independent of metadata. Used for tie-breaking and logs.
    pub fn structural_fingerprint(&self) -> String {
        let mut bytes = Vec::new();
        for block in &self.blocks {
            bytes.push(block.kept as u8);
            for mask in &block.head_masks {
                bytes.push(0xaa);
                bytes.extend(mask.bits().iter().map(|b| *b as u8));
            }
            bytes.push(0xbb);
            bytes.extend(block.mlp_mask.bits().iter().map(|b| *b as u8));
            for r in &block.head_ratios {
                bytes.extend_from_slice(&r.to_le_bytes());
            }
            bytes.extend_from_slice(&block.mlp_ratio.to_le_bytes());
        }
        sha256_hex(&bytes)
    }

    /// Serialize to the genome text document (JSON with kept-index lists).
    pub fn to_text(&self) -> String {
        let doc = GenomeDoc::from(self);
        serde_json::to_string_pretty(&doc).expect("genome serialization cannot fail")
    }

    /// Parse a genome text document, checking structural coherence.
    pub fn from_text(text: &str) -> Result<Genome> {
        let doc: GenomeDoc =
            serde_json::from_str(text).map_err(|e| Error::InvalidGenome(e.to_string()))?;
        doc.into_genome()
    }
}

#[derive(Serialize, Deserialize)]
struct GenomeDoc {
    format: String,
    config_fingerprint: String,
    head_dim: usize,
    mlp_dim: usize,
    meta: GenomeMeta,
    blocks: Vec<BlockDoc>,
}

#[derive(Serialize, Deserialize)]
struct BlockDoc {
    kept: bool,
    head_kept: Vec<Vec<usize>>,
    mlp_kept: Vec<usize>,
    head_ratios: Vec<f64>,
    mlp_ratio: f64,
}

impl From<&Genome> for GenomeDoc {
    fn from(g: &Genome) -> Self {
        let head_dim = g.blocks.first().and_then(|b| b.head_masks.first()).map_or(0, |m| m.len());
        let mlp_dim = g.blocks.first().map_or(0, |b| b.mlp_mask.len());
        GenomeDoc {
            format: "genome-v1".to_string(),
            config_fingerprint: g.config_fingerprint.clone(),
            head_dim,
            mlp_dim,
            meta: g.meta.clone(),
            blocks: g
                .blocks
                .iter()
                .map(|b| BlockDoc {
                    kept: b.kept,
                    head_kept: b.head_masks.iter().map(|m| m.kept_indices()).collect(),
                    mlp_kept: b.mlp_mask.kept_indices(),
                    head_ratios: b.head_ratios.clone(),
                    mlp_ratio: b.mlp_ratio,
                })
                .collect(),
        }
    }
}

impl GenomeDoc {
    fn into_genome(self) -> Result<Genome> {
        if self.format != "genome-v1" {
            return Err(Error::InvalidGenome(format!("unknown format tag {:?}", self.format)));
        }
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (ix, b) in self.blocks.into_iter().enumerate() {
            if b.head_kept.len() != b.head_ratios.len() {
                return Err(Error::InvalidGenome(format!(
                    "block {ix}: {} head index lists but {} head ratios",
                    b.head_kept.len(),
                    b.head_ratios.len()
                )));
            }
            for kept in b.head_kept.iter().flatten() {
                if *kept >= self.head_dim {
                    return Err(Error::InvalidGenome(format!(
                        "block {ix}: head index {kept} exceeds head_dim {}",
                        self.head_dim
                    )));
                }
            }
            for kept in &b.mlp_kept {
                if *kept >= self.mlp_dim {
                    return Err(Error::InvalidGenome(format!(
                        "block {ix}: mlp index {kept} exceeds mlp_dim {}",
                        self.mlp_dim
                    )));
                }
            }
            blocks.push(BlockGenome {
                kept: b.kept,
                head_masks: b
                    .head_kept
                    .iter()
                    .map(|k| SelectionMask::from_kept_indices(self.head_dim, k))
                    .collect(),
                mlp_mask: SelectionMask::from_kept_indices(self.mlp_dim, &b.mlp_kept),
                head_ratios: b.head_ratios,
                mlp_ratio: b.mlp_ratio,
            });
        }
        Ok(Genome { blocks, config_fingerprint: self.config_fingerprint, meta: self.meta })
    }
}

/// How many blocks/ratios a genome may use: depth range plus the quantized
/// ratio grids, the budget target, and the similarity mode of Algorithm-style
/// mask moves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub depth_min: usize,
    pub depth_max: usize,
    pub head_ratio_grid: Vec<f64>,
    pub mlp_ratio_grid: Vec<f64>,
    pub target_ratio: f64,
    pub budget_tol: f64,
    pub similarity: SimilarityMode,
}

/// Per-head ratio grid: every achievable keep fraction `c / (h_m / unit)`
/// with the resulting ratio inside `[lo, hi]`. `unit` is 2 in rotary mode.
pub fn attn_ratio_grid(head_dim: usize, unit: usize, lo: f64, hi: f64) -> Vec<f64> {
    assert!(unit >= 1 && head_dim.is_multiple_of(unit));
    let n_units = head_dim / unit;
    (1..=n_units)
        .map(|c| c as f64 / n_units as f64)
        .filter(|r| *r >= lo - 1e-9 && *r <= hi + 1e-9)
        .collect()
}

/// MLP ratio grid `lo, lo+step, …` capped at `hi` (with `hi` always
/// included); the default step is `max(0.05, 1/P)`.
pub fn mlp_ratio_grid(d_mlp: usize, lo: f64, hi: f64) -> Vec<f64> {
    let step = (1.0 / d_mlp as f64).max(0.05);
    let mut grid = Vec::new();
    let mut k = 0usize;
    loop {
        let v = lo + k as f64 * step;
        if v > hi + 1e-9 {
            break;
        }
        grid.push(v.min(hi));
        k += 1;
    }
    if grid.last().is_none_or(|v| (hi - v).abs() > 1e-9) {
        grid.push(hi);
    }
    grid
}

impl SearchSpace {
    /// Default space scaled to a toy config: depth may lose one block,
    /// per-head ratios quantized to head granularity in [0.5, 1], MLP ratios
    /// step max(0.05, 1/P) in [0.5, 1].
    pub fn toy_default(config: &ModelConfig, target_ratio: f64) -> Self {
        let unit = if config.rotary() { 2 } else { 1 };
        SearchSpace {
            depth_min: config.depth.saturating_sub(1).max(1),
            depth_max: config.depth,
            head_ratio_grid: attn_ratio_grid(config.head_dim, unit, 0.5, 1.0),
            mlp_ratio_grid: mlp_ratio_grid(config.d_mlp, 0.5, 1.0),
            target_ratio,
            budget_tol: 0.02,
            similarity: SimilarityMode::RelativeToKeep,
        }
    }

    pub fn grid_contains(grid: &[f64], v: f64) -> bool {
        grid.iter().any(|g| (g - v).abs() < 1e-9)
    }

    /// Grid value nearest to `v` (ties toward the lower value).
    pub fn snap(grid: &[f64], v: f64) -> f64 {
        assert!(!grid.is_empty(), "empty ratio grid");
        let mut best = grid[0];
        let mut best_d = (grid[0] - v).abs();
        for &g in &grid[1..] {
            let d = (g - v).abs();
            if d < best_d - 1e-15 {
                best = g;
                best_d = d;
            }
        }
        best
    }
}

/// Mutation probabilities and the similarity-loop constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MutationParams {
    pub p_d: f64,
    pub p_s: f64,
    pub p_m: f64,
    pub alpha: f64,
    pub eta: usize,
}

/// Variation operator of the evolutionary step: optional single depth flip,
/// per-ratio grid resampling with probability `p_s`, then mask mutation of
/// every head and MLP mask toward the (possibly new) ratios.
pub fn mutate_genome(
    g: &Genome,
    params: &MutationParams,
    space: &SearchSpace,
    unit: usize,
    rng: &mut impl Rng,
) -> Genome {
    let mut out = g.clone();
    // depth move: flip one uniformly chosen block's kept bit, clamped to the
    // depth range
    if rng.gen::<f64>() < params.p_d && !out.blocks.is_empty() {
        let ix = rng.gen_range(0..out.blocks.len());
        let kept_now = out.kept_blocks();
        let after = if out.blocks[ix].kept { kept_now - 1 } else { kept_now + 1 };
        if after >= space.depth_min && after <= space.depth_max {
            out.blocks[ix].kept = !out.blocks[ix].kept;
        }
    }
    for block in &mut out.blocks {
        let old_head_ratios = block.head_ratios.clone();
        let old_mlp_ratio = block.mlp_ratio;
        for r in &mut block.head_ratios {
            if rng.gen::<f64>() < params.p_s {
                *r = space.head_ratio_grid[rng.gen_range(0..space.head_ratio_grid.len())];
            }
        }
        if rng.gen::<f64>() < params.p_s {
            block.mlp_ratio = space.mlp_ratio_grid[rng.gen_range(0..space.mlp_ratio_grid.len())];
        }
        for (h, mask) in block.head_masks.iter_mut().enumerate() {
            let gamma = block.head_ratios[h];
            let next = mask_mutation_units(
                mask,
                params.p_m,
                gamma,
                params.alpha,
                params.eta,
                unit,
                space.similarity,
                rng,
            );
            let n_units = mask.len() / unit;
            if next.popcount() / unit != (gamma * n_units as f64).round() as usize {
                // similarity loop exhausted: the mask reverted, so the ratio
                // must revert with it to stay consistent
                block.head_ratios[h] = old_head_ratios[h];
            }
            *mask = next;
        }
        let gamma = block.mlp_ratio;
        let next = mask_mutation(
            &block.mlp_mask,
            params.p_m,
            gamma,
            params.alpha,
            params.eta,
            space.similarity,
            rng,
        );
        if next.popcount() != (gamma * block.mlp_mask.len() as f64).round() as usize {
            block.mlp_ratio = old_mlp_ratio;
        }
        block.mlp_mask = next;
    }
    out
}

/// Uniform per-block crossover; the child's depth is clamped back into range
/// by re-keeping the earliest dropped blocks (below `depth_min`) or dropping
/// the latest kept blocks (above `depth_max`).
pub fn crossover(
    a: &Genome,
    b: &Genome,
    space: &SearchSpace,
    rng: &mut impl Rng,
) -> Result<Genome> {
    if a.config_fingerprint != b.config_fingerprint {
        return Err(Error::ConfigMismatch {
            a: a.config_fingerprint.clone(),
            b: b.config_fingerprint.clone(),
        });
    }
    if a.blocks.len() != b.blocks.len() {
        return Err(Error::ConfigMismatch {
            a: format!("{} blocks", a.blocks.len()),
            b: format!("{} blocks", b.blocks.len()),
        });
    }
    let mut blocks = Vec::with_capacity(a.blocks.len());
    for (ba, bb) in a.blocks.iter().zip(&b.blocks) {
        blocks.push(if rng.gen::<bool>() { ba.clone() } else { bb.clone() });
    }
    let mut child = Genome {
        blocks,
        config_fingerprint: a.config_fingerprint.clone(),
        meta: GenomeMeta { seed: a.meta.seed, lineage: "crossover".to_string(), init_ratio: None },
    };
    while child.kept_blocks() < space.depth_min {
        let ix = child
            .blocks
            .iter()
            .position(|b| !b.kept)
            .expect("kept count below depth_min implies a dropped block");
        child.blocks[ix].kept = true;
    }
    while child.kept_blocks() > space.depth_max {
        let ix = child
            .blocks
            .iter()
            .rposition(|b| b.kept)
            .expect("kept count above depth_max implies a kept block");
        child.blocks[ix].kept = false;
    }
    Ok(child)
}

/// Check a genome against a config and space; violations come back as
/// human-readable strings, an empty list meaning valid.
pub fn validate(g: &Genome, config: &ModelConfig, space: &SearchSpace) -> Vec<String> {
    let mut violations = Vec::new();
    if g.config_fingerprint != config.fingerprint() {
        violations.push(format!(
            "config fingerprint {} does not match model {}",
            g.config_fingerprint,
            config.fingerprint()
        ));
    }
    if g.blocks.len() != config.depth {
        violations.push(format!(
            "genome has {} blocks, config depth is {}",
            g.blocks.len(),
            config.depth
        ));
        return violations;
    }
    let kept = g.kept_blocks();
    if kept < space.depth_min || kept > space.depth_max {
        violations
            .push(format!("kept depth {kept} outside [{}, {}]", space.depth_min, space.depth_max));
    }
    for (ix, block) in g.blocks.iter().enumerate() {
        if block.head_masks.len() != config.n_heads {
            violations.push(format!(
                "block {ix}: {} head masks, expect {}",
                block.head_masks.len(),
                config.n_heads
            ));
            continue;
        }
        for (h, mask) in block.head_masks.iter().enumerate() {
            if mask.len() != config.head_dim {
                violations.push(format!("block {ix} head {h}: mask length {}", mask.len()));
                continue;
            }
            if mask.popcount() == 0 {
                violations.push(format!("block {ix} head {h}: empty head"));
            }
            let ratio = block.head_ratios[h];
            if !SearchSpace::grid_contains(&space.head_ratio_grid, ratio) {
                violations.push(format!("block {ix} head {h}: ratio {ratio} off-grid"));
            }
            let slots = (mask.popcount() as f64 - ratio * config.head_dim as f64).abs();
            if slots > 1.0 + 1e-9 {
                violations.push(format!(
                    "block {ix} head {h}: popcount {} vs ratio {ratio} ({slots:.2} slots apart)",
                    mask.popcount()
                ));
            }
            if config.rotary() && !mask.is_pairwise() {
                violations.push(format!("block {ix} head {h}: mask not pair-granular"));
            }
        }
        if block.mlp_mask.len() != config.d_mlp {
            violations.push(format!("block {ix}: mlp mask length {}", block.mlp_mask.len()));
            continue;
        }
        if block.mlp_mask.popcount() == 0 {
            violations.push(format!("block {ix}: empty mlp"));
        }
        if !SearchSpace::grid_contains(&space.mlp_ratio_grid, block.mlp_ratio) {
            violations.push(format!("block {ix}: mlp ratio {} off-grid", block.mlp_ratio));
        }
        let slots =
            (block.mlp_mask.popcount() as f64 - block.mlp_ratio * config.d_mlp as f64).abs();
        if slots > 1.0 + 1e-9 {
            violations.push(format!(
                "block {ix}: mlp popcount {} vs ratio {} ({slots:.2} slots apart)",
                block.mlp_mask.popcount(),
                block.mlp_ratio
            ));
        }
    }
    violations
}
