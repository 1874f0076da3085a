//! Dense extraction: gather a masked subnet's kept rows and columns into a
//! small standalone model whose forward pass reproduces the masked forward
//! exactly. Both paths run the shared kernel with the same attention scale
//! (from the original head width) and the same rotary angles, and pruned
//! dimensions only ever contribute exact zero terms, so the logits match to
//! the bit in either precision.

use crate::container::TensorContainer;
use crate::error::{Error, Result};
use crate::genome::Genome;
use crate::model::{
    rope_freqs, transformer_forward, BlockCtx, BlockWeights, ModelConfig, ModelWeights, Precision,
    WMat,
};
use crate::numerics::Matrix;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

/// One extracted block: gathered weights plus the index maps back into the
/// source model.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractedBlock {
    pub source_block: usize,
    /// Kept width of each original head, in head order.
    pub head_dims: Vec<usize>,
    /// Per original head, the kept dimension indices in ascending order.
    pub kept_attn: Vec<Vec<usize>>,
    /// Kept MLP dimension indices in ascending order.
    pub kept_mlp: Vec<usize>,
    pub weights: BlockWeights,
}

/// A small dense model carved out of a masked one. Embedding, positional
/// table, final norm, and output projection are copied unchanged; blocks hold
/// only the kept rows and columns.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseSubnetModel {
    /// The source architecture; extraction keeps its vocab, eps, positional
    /// mode, and attention scale.
    pub config: ModelConfig,
    pub genome_fingerprint: String,
    pub blocks: Vec<ExtractedBlock>,
    pub embed: WMat,
    pub pos: Option<WMat>,
    pub norm_final: Vec<f32>,
    pub w_out: WMat,
}

#[derive(Serialize, Deserialize)]
struct BlockStructure {
    source_block: usize,
    kept_attn: Vec<Vec<usize>>,
    kept_mlp: Vec<usize>,
}

fn gather_rows(w: &WMat, rows: &[usize]) -> WMat {
    let mut out = WMat::zeros(rows.len(), w.cols);
    for (r_out, &r_in) in rows.iter().enumerate() {
        out.data[r_out * w.cols..(r_out + 1) * w.cols].copy_from_slice(w.row(r_in));
    }
    out
}

fn gather_cols(w: &WMat, cols: &[usize]) -> WMat {
    let mut out = WMat::zeros(w.rows, cols.len());
    for r in 0..w.rows {
        for (c_out, &c_in) in cols.iter().enumerate() {
            out.set(r, c_out, w.get(r, c_in));
        }
    }
    out
}

/// Gather the kept rows of Q/K/V and the up/gate projections and the kept
/// columns of the output and down projections, block by block. Dropped blocks
/// disappear entirely.
pub fn extract_dense(
    weights: &ModelWeights,
    config: &ModelConfig,
    genome: &Genome,
) -> Result<DenseSubnetModel> {
    if genome.config_fingerprint != config.fingerprint() {
        return Err(Error::ConfigMismatch {
            a: genome.config_fingerprint.clone(),
            b: config.fingerprint(),
        });
    }
    if weights.blocks.len() != config.depth || genome.blocks.len() != config.depth {
        return Err(Error::ShapeMismatch(format!(
            "{} weight blocks, {} genome blocks, config depth {}",
            weights.blocks.len(),
            genome.blocks.len(),
            config.depth
        )));
    }
    let mut blocks = Vec::new();
    for (bix, (bw, bg)) in weights.blocks.iter().zip(&genome.blocks).enumerate() {
        if !bg.kept {
            continue;
        }
        let mut kept_attn = Vec::with_capacity(config.n_heads);
        for (hix, mask) in bg.head_masks.iter().enumerate() {
            let kept = mask.kept_indices();
            if kept.is_empty() {
                return Err(Error::EmptyHead { block: bix, head: hix });
            }
            if config.rotary() && !mask.is_pairwise() {
                return Err(Error::InvalidGenome(format!(
                    "block {bix} head {hix}: rotary extraction needs pairwise masks"
                )));
            }
            kept_attn.push(kept);
        }
        let kept_mlp = bg.mlp_mask.kept_indices();
        if kept_mlp.is_empty() {
            return Err(Error::InvalidGenome(format!("block {bix} keeps no mlp dimensions")));
        }
        let flat_attn: Vec<usize> = kept_attn
            .iter()
            .enumerate()
            .flat_map(|(h, dims)| dims.iter().map(move |d| h * config.head_dim + d))
            .collect();
        let gathered = BlockWeights {
            w_q: gather_rows(&bw.w_q, &flat_attn),
            w_k: gather_rows(&bw.w_k, &flat_attn),
            w_v: gather_rows(&bw.w_v, &flat_attn),
            w_o: gather_cols(&bw.w_o, &flat_attn),
            w_u: gather_rows(&bw.w_u, &kept_mlp),
            w_g: gather_rows(&bw.w_g, &kept_mlp),
            w_d: gather_cols(&bw.w_d, &kept_mlp),
            norm_attn: bw.norm_attn.clone(),
            norm_mlp: bw.norm_mlp.clone(),
        };
        blocks.push(ExtractedBlock {
            source_block: bix,
            head_dims: kept_attn.iter().map(Vec::len).collect(),
            kept_attn,
            kept_mlp,
            weights: gathered,
        });
    }
    if blocks.is_empty() {
        return Err(Error::InvalidGenome("genome keeps no blocks".to_string()));
    }
    Ok(DenseSubnetModel {
        config: config.clone(),
        genome_fingerprint: genome.structural_fingerprint(),
        blocks,
        embed: weights.embed.clone(),
        pos: weights.pos.clone(),
        norm_final: weights.norm_final.clone(),
        w_out: weights.w_out.clone(),
    })
}

impl DenseSubnetModel {
    fn block_ctxs(&self) -> Vec<BlockCtx<'_>> {
        let scale = 1.0 / (self.config.head_dim as f64).sqrt();
        let freqs = self.config.rotary().then(|| rope_freqs(self.config.head_dim));
        self.blocks
            .iter()
            .map(|b| BlockCtx {
                weights: &b.weights,
                head_dims: b.head_dims.clone(),
                scale,
                rope: freqs.as_ref().map(|f| {
                    b.kept_attn
                        .iter()
                        .map(|dims| dims.chunks_exact(2).map(|c| f[c[0] / 2]).collect())
                        .collect()
                }),
                attn_mask: None,
                mlp_mask: None,
            })
            .collect()
    }

    pub fn forward_logits_prec(&self, tokens: &[u32], prec: Precision) -> Result<Matrix> {
        let ctxs = self.block_ctxs();
        match prec {
            Precision::F32 => transformer_forward::<f32>(
                &self.embed,
                self.pos.as_ref(),
                &self.norm_final,
                &self.w_out,
                &ctxs,
                self.config.rms_eps,
                self.config.max_seq_len,
                tokens,
                None,
            ),
            Precision::F64 => transformer_forward::<f64>(
                &self.embed,
                self.pos.as_ref(),
                &self.norm_final,
                &self.w_out,
                &ctxs,
                self.config.rms_eps,
                self.config.max_seq_len,
                tokens,
                None,
            ),
        }
    }

    pub fn forward_logits(&self, tokens: &[u32]) -> Result<Matrix> {
        self.forward_logits_prec(tokens, Precision::F32)
    }

    pub fn perplexity(&self, eval_set: &[Vec<u32>]) -> Result<f64> {
        let mut total = 0.0;
        let mut n = 0usize;
        for seq in eval_set {
            if seq.len() < 2 {
                continue;
            }
            let logits = self.forward_logits(seq)?;
            let (nll, count) = crate::model::nll_from_logits(&logits, seq);
            total += nll;
            n += count;
        }
        if n == 0 {
            return Err(Error::EmptyEvalSet);
        }
        Ok((total / n as f64).exp())
    }

    /// Scalars stored in the extracted blocks (projections plus norm gains).
    pub fn block_scalar_count(&self) -> u64 {
        self.blocks
            .iter()
            .map(|b| {
                let w = &b.weights;
                ([&w.w_q, &w.w_k, &w.w_v, &w.w_o, &w.w_u, &w.w_g, &w.w_d]
                    .iter()
                    .map(|m| m.data.len())
                    .sum::<usize>()
                    + w.norm_attn.len()
                    + w.norm_mlp.len()) as u64
            })
            .sum()
    }

    /// All stored scalars, shared tensors included.
    pub fn scalar_count(&self) -> u64 {
        self.block_scalar_count()
            + self.embed.data.len() as u64
            + self.pos.as_ref().map_or(0, |p| p.data.len() as u64)
            + self.norm_final.len() as u64
            + self.w_out.data.len() as u64
    }

    /// Bytes needed for the block weights at 4 bytes per scalar.
    pub fn block_weight_bytes(&self) -> u64 {
        self.block_scalar_count() * 4
    }

    pub fn to_container(&self) -> TensorContainer {
        let mut c = TensorContainer::new();
        let d = self.config.d_model;
        c.insert("embed.weight", vec![self.embed.rows, self.embed.cols], self.embed.data.clone());
        if let Some(p) = &self.pos {
            c.insert("pos.weight", vec![p.rows, p.cols], p.data.clone());
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let w = &b.weights;
            for (tag, m) in [
                ("w_q", &w.w_q),
                ("w_k", &w.w_k),
                ("w_v", &w.w_v),
                ("w_o", &w.w_o),
                ("w_u", &w.w_u),
                ("w_g", &w.w_g),
                ("w_d", &w.w_d),
            ] {
                c.insert(&format!("ext{i}.{tag}"), vec![m.rows, m.cols], m.data.clone());
            }
            c.insert(&format!("ext{i}.norm_attn"), vec![d], w.norm_attn.clone());
            c.insert(&format!("ext{i}.norm_mlp"), vec![d], w.norm_mlp.clone());
        }
        c.insert("norm_final", vec![d], self.norm_final.clone());
        c.insert("output.weight", vec![self.w_out.rows, self.w_out.cols], self.w_out.data.clone());
        let structure: Vec<BlockStructure> = self
            .blocks
            .iter()
            .map(|b| BlockStructure {
                source_block: b.source_block,
                kept_attn: b.kept_attn.clone(),
                kept_mlp: b.kept_mlp.clone(),
            })
            .collect();
        c.set_meta("kind", "extracted-subnet");
        c.set_meta("config", &serde_json::to_string(&self.config).expect("config serializes"));
        c.set_meta("genome_fingerprint", &self.genome_fingerprint);
        c.set_meta("structure", &serde_json::to_string(&structure).expect("structure serializes"));
        c
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn from_container(container: &TensorContainer, path: &Path) -> Result<Self> {
        let mismatch =
            |detail: String| Error::ManifestMismatch { path: path.display().to_string(), detail };
        let config: ModelConfig = serde_json::from_str(
            container.meta("config").ok_or_else(|| mismatch("missing config metadata".into()))?,
        )?;
        config.validate()?;
        let structure: Vec<BlockStructure> = serde_json::from_str(
            container
                .meta("structure")
                .ok_or_else(|| mismatch("missing structure metadata".into()))?,
        )?;
        let genome_fingerprint = container
            .meta("genome_fingerprint")
            .ok_or_else(|| mismatch("missing genome_fingerprint metadata".into()))?
            .to_string();
        let matrix = |name: &str| -> Result<WMat> {
            let (shape, data) = container.get(name).ok_or_else(|| Error::ManifestMismatch {
                path: path.display().to_string(),
                detail: format!("missing tensor {name}"),
            })?;
            if shape.len() != 2 {
                return Err(Error::ManifestMismatch {
                    path: path.display().to_string(),
                    detail: format!("tensor {name}: expected a matrix, found {shape:?}"),
                });
            }
            Ok(WMat::from_vec(shape[0], shape[1], data.to_vec()))
        };
        let vector = |name: &str| -> Result<Vec<f32>> {
            let (shape, data) = container.get(name).ok_or_else(|| Error::ManifestMismatch {
                path: path.display().to_string(),
                detail: format!("missing tensor {name}"),
            })?;
            if shape.len() != 1 {
                return Err(Error::ManifestMismatch {
                    path: path.display().to_string(),
                    detail: format!("tensor {name}: expected a vector, found {shape:?}"),
                });
            }
            Ok(data.to_vec())
        };
        let embed = matrix("embed.weight")?;
        let pos = match config.positional_mode {
            crate::model::PositionalMode::AbsoluteLearned => Some(matrix("pos.weight")?),
            crate::model::PositionalMode::Rotary => None,
        };
        let mut blocks = Vec::with_capacity(structure.len());
        for (i, s) in structure.into_iter().enumerate() {
            let weights = BlockWeights {
                w_q: matrix(&format!("ext{i}.w_q"))?,
                w_k: matrix(&format!("ext{i}.w_k"))?,
                w_v: matrix(&format!("ext{i}.w_v"))?,
                w_o: matrix(&format!("ext{i}.w_o"))?,
                w_u: matrix(&format!("ext{i}.w_u"))?,
                w_g: matrix(&format!("ext{i}.w_g"))?,
                w_d: matrix(&format!("ext{i}.w_d"))?,
                norm_attn: vector(&format!("ext{i}.norm_attn"))?,
                norm_mlp: vector(&format!("ext{i}.norm_mlp"))?,
            };
            let expected_m: usize = s.kept_attn.iter().map(Vec::len).sum();
            if weights.w_q.rows != expected_m || weights.w_d.cols != s.kept_mlp.len() {
                return Err(mismatch(format!(
                    "block {i}: tensor shapes disagree with the structure metadata"
                )));
            }
            blocks.push(ExtractedBlock {
                source_block: s.source_block,
                head_dims: s.kept_attn.iter().map(Vec::len).collect(),
                kept_attn: s.kept_attn,
                kept_mlp: s.kept_mlp,
                weights,
            });
        }
        let norm_final = vector("norm_final")?;
        let w_out = matrix("output.weight")?;
        Ok(DenseSubnetModel { config, genome_fingerprint, blocks, embed, pos, norm_final, w_out })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&TensorContainer::load(path)?, path)
    }
}

/// Largest absolute logit difference between the masked forward and the
/// extracted forward over the probe sequences.
pub fn equivalence_check(
    weights: &ModelWeights,
    config: &ModelConfig,
    genome: &Genome,
    dense: &DenseSubnetModel,
    probes: &[Vec<u32>],
    prec: Precision,
) -> Result<f64> {
    let mut worst = 0.0f64;
    for seq in probes {
        let masked = crate::model::forward_logits_prec(weights, config, seq, Some(genome), prec)?;
        let extracted = dense.forward_logits_prec(seq, prec)?;
        worst = worst.max(masked.sub(&extracted).max_abs());
    }
    Ok(worst)
}

/// Median tokens-per-second over timed repetitions of a forward sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct ThroughputReport {
    pub tokens_per_sec: f64,
    pub reps: usize,
    pub tokens_per_rep: usize,
}

fn median_rate(
    reps: usize,
    tokens_per_rep: usize,
    mut sweep: impl FnMut() -> Result<()>,
) -> Result<ThroughputReport> {
    assert!(reps > 0);
    sweep()?;
    let mut rates = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        sweep()?;
        let dt = start.elapsed().as_secs_f64().max(1e-9);
        rates.push(tokens_per_rep as f64 / dt);
    }
    rates.sort_by(f64::total_cmp);
    let tokens_per_sec =
        if reps % 2 == 1 { rates[reps / 2] } else { 0.5 * (rates[reps / 2 - 1] + rates[reps / 2]) };
    Ok(ThroughputReport { tokens_per_sec, reps, tokens_per_rep })
}

/// Throughput of the full dense model over the given sequences.
pub fn dense_throughput(
    weights: &ModelWeights,
    config: &ModelConfig,
    seqs: &[Vec<u32>],
    reps: usize,
) -> Result<ThroughputReport> {
    let tokens: usize = seqs.iter().map(Vec::len).sum();
    median_rate(reps, tokens, || {
        for s in seqs {
            crate::model::forward_logits(weights, config, s, None)?;
        }
        Ok(())
    })
}

/// Throughput of an extracted model over the given sequences.
pub fn extracted_throughput(
    model: &DenseSubnetModel,
    seqs: &[Vec<u32>],
    reps: usize,
) -> Result<ThroughputReport> {
    let tokens: usize = seqs.iter().map(Vec::len).sum();
    median_rate(reps, tokens, || {
        for s in seqs {
            model.forward_logits(s)?;
        }
        Ok(())
    })
}
