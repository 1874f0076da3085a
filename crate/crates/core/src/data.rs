//! Corpus ingestion and sampling: byte-level tokenization, the TOKS on-disk
//! token format, deterministic calibration/evaluation window sampling, and a
//! synthetic desk corpus generator.

use crate::error::{Error, Result};
use crate::util::derive_rng;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Reserved begin-of-sequence token id (byte ids occupy 0..=255).
pub const BOS_ID: u32 = 256;
/// Byte-level vocabulary: 256 byte values plus BOS.
pub const BYTE_VOCAB: u32 = 257;

const TOKS_MAGIC: &[u8; 4] = b"TOKS";
const TOKS_VERSION: u8 = 1;

/// A tokenized corpus: a flat id sequence plus provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub name: String,
    pub ids: Vec<u32>,
    pub tokenizer_id: String,
    pub vocab_size: u32,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Split into a training head and a held-out tail. The held-out share is
    /// clamped so both sides are non-empty.
    pub fn split(&self, held_out_frac: f64) -> (Corpus, Corpus) {
        let n = self.ids.len();
        let tail = ((n as f64 * held_out_frac) as usize).clamp(1, n - 1);
        let cut = n - tail;
        let mut train = self.clone();
        let mut held = self.clone();
        train.name = format!("{}/train", self.name);
        train.ids = self.ids[..cut].to_vec();
        held.name = format!("{}/held-out", self.name);
        held.ids = self.ids[cut..].to_vec();
        (train, held)
    }
}

/// Fixed-length sequences sampled from a corpus for calibration or candidate
/// evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibrationSet {
    pub sequences: Vec<Vec<u32>>,
    pub seed: u64,
    pub source: String,
}

impl CalibrationSet {
    pub fn seq_len(&self) -> usize {
        self.sequences.first().map_or(0, |s| s.len())
    }
}

/// Byte-level tokenization: BOS followed by the raw byte values.
pub fn tokenize_bytes(name: &str, text: &[u8]) -> Corpus {
    let mut ids = Vec::with_capacity(text.len() + 1);
    ids.push(BOS_ID);
    ids.extend(text.iter().map(|b| *b as u32));
    Corpus {
        name: name.to_string(),
        ids,
        tokenizer_id: "byte-v1".to_string(),
        vocab_size: BYTE_VOCAB,
    }
}

/// Inverse of [`tokenize_bytes`]: BOS markers are dropped, byte ids map back
/// to bytes.
pub fn detokenize(ids: &[u32]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        if id == BOS_ID {
            continue;
        }
        if id > 255 {
            return Err(Error::IdOutOfRange { id, vocab: BYTE_VOCAB });
        }
        out.push(id as u8);
    }
    Ok(out)
}

/// Write a corpus in the TOKS format: magic "TOKS", version byte, u32 LE
/// vocab size, u64 LE count, then count u32 LE ids.
pub fn save_pretokenized(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(17 + corpus.ids.len() * 4);
    buf.extend_from_slice(TOKS_MAGIC);
    buf.push(TOKS_VERSION);
    buf.extend_from_slice(&corpus.vocab_size.to_le_bytes());
    buf.extend_from_slice(&(corpus.ids.len() as u64).to_le_bytes());
    for id in &corpus.ids {
        buf.extend_from_slice(&id.to_le_bytes());
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Read a TOKS file back into a corpus named after the file stem.
pub fn load_pretokenized(path: &Path) -> Result<Corpus> {
    let display = path.display().to_string();
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 4 || &bytes[..4] != TOKS_MAGIC {
        return Err(Error::BadMagic { path: display, expected: "TOKS".to_string() });
    }
    if bytes.len() < 17 {
        return Err(Error::TruncatedFile {
            path: display,
            detail: "header incomplete".to_string(),
        });
    }
    if bytes[4] != TOKS_VERSION {
        return Err(Error::BadMagic {
            path: display,
            expected: format!("TOKS version {TOKS_VERSION}"),
        });
    }
    let vocab_size = u32::from_le_bytes(bytes[5..9].try_into().unwrap());
    let count = u64::from_le_bytes(bytes[9..17].try_into().unwrap()) as usize;
    let body = &bytes[17..];
    if body.len() != count * 4 {
        return Err(Error::TruncatedFile {
            path: display,
            detail: format!("expected {} id bytes, found {}", count * 4, body.len()),
        });
    }
    let mut ids = Vec::with_capacity(count);
    for chunk in body.chunks_exact(4) {
        let id = u32::from_le_bytes(chunk.try_into().unwrap());
        if id >= vocab_size {
            return Err(Error::IdOutOfRange { id, vocab: vocab_size });
        }
        ids.push(id);
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".to_string());
    Ok(Corpus { name, ids, tokenizer_id: "byte-v1".to_string(), vocab_size })
}

/// Draw `n` uniformly random contiguous windows of `seq_len` tokens.
/// Deterministic per seed; windows may overlap.
pub fn sample_calibration(
    corpus: &Corpus,
    n: usize,
    seq_len: usize,
    seed: u64,
) -> Result<CalibrationSet> {
    if corpus.len() < seq_len {
        return Err(Error::CorpusTooShort { have: corpus.len(), need: seq_len });
    }
    let mut rng = derive_rng(seed, &["calibration", &corpus.name]);
    let max_start = corpus.len() - seq_len;
    let sequences = (0..n)
        .map(|_| {
            let start = rng.gen_range(0..=max_start);
            corpus.ids[start..start + seq_len].to_vec()
        })
        .collect();
    Ok(CalibrationSet { sequences, seed, source: corpus.name.clone() })
}

/// Deterministic English-like filler text of roughly `target_bytes` bytes.
///
/// Sentences are built from a fixed word list with a skewed frequency
/// profile, so a byte-level model has plenty of local structure to learn
/// (spaces, common digraphs, capitalization after periods).
pub fn synthetic_text(target_bytes: usize, seed: u64) -> String {
    const WORDS: &[&str] = &[
        "the", "of", "and", "to", "in", "a", "is", "that", "for", "it", "was", "on", "are", "as",
        "with", "his", "they", "at", "be", "this", "from", "or", "had", "by", "word", "but",
        "what", "some", "we", "can", "out", "other", "were", "all", "there", "when", "up", "use",
        "your", "how", "said", "each", "she", "which", "their", "time", "if", "will", "way",
        "about", "many", "then", "them", "would", "write", "like", "these", "her", "long", "make",
        "thing", "see", "him", "two", "has", "look", "more", "day", "could", "come", "did",
        "number", "sound", "most", "people", "over", "know", "water", "than", "call", "first",
    ];
    let mut rng = derive_rng(seed, &["synthetic-text"]);
    let mut out = String::with_capacity(target_bytes + 64);
    let mut sentences_in_paragraph = 0usize;
    while out.len() < target_bytes {
        let words = rng.gen_range(5..=12);
        for w in 0..words {
            // skew toward the head of the list
            let r: f64 = rng.gen();
            let ix = ((r * r) * WORDS.len() as f64) as usize;
            let word = WORDS[ix.min(WORDS.len() - 1)];
            if w == 0 {
                let mut chars = word.chars();
                if let Some(c) = chars.next() {
                    out.extend(c.to_uppercase());
                    out.push_str(chars.as_str());
                }
            } else {
                out.push(' ');
                out.push_str(word);
            }
        }
        out.push('.');
        sentences_in_paragraph += 1;
        if sentences_in_paragraph >= 8 {
            out.push('\n');
            sentences_in_paragraph = 0;
        } else {
            out.push(' ');
        }
    }
    out.truncate(target_bytes);
    out
}

/// Pick `n` distinct evaluation windows, spread deterministically across the
/// corpus and shuffled by seed. Used for the frozen fitness batch.
pub fn sample_eval_windows(
    corpus: &Corpus,
    n: usize,
    seq_len: usize,
    seed: u64,
) -> Result<CalibrationSet> {
    if corpus.len() < seq_len {
        return Err(Error::CorpusTooShort { have: corpus.len(), need: seq_len });
    }
    let max_start = corpus.len() - seq_len;
    let stride = (max_start / n.max(1)).max(1);
    let mut starts: Vec<usize> = (0..n).map(|i| (i * stride).min(max_start)).collect();
    let mut rng = derive_rng(seed, &["eval-windows", &corpus.name]);
    starts.shuffle(&mut rng);
    let sequences = starts.into_iter().map(|s| corpus.ids[s..s + seq_len].to_vec()).collect();
    Ok(CalibrationSet { sequences, seed, source: corpus.name.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn tokenize_prepends_bos() {
        let c = tokenize_bytes("t", b"ab");
        assert_eq!(c.ids, vec![BOS_ID, 97, 98]);
        assert_eq!(c.vocab_size, BYTE_VOCAB);
    }

    #[test]
    fn tokenize_empty_is_bos_only() {
        let c = tokenize_bytes("t", b"");
        assert_eq!(c.ids, vec![BOS_ID]);
    }

    #[test]
    fn round_trip_random_bytes() {
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..20 {
            let len = rng.gen_range(0..200);
            let bytes: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            let c = tokenize_bytes("t", &bytes);
            assert_eq!(detokenize(&c.ids).unwrap(), bytes);
        }
    }

    #[test]
    fn toks_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toks");
        let mut rng = StdRng::seed_from_u64(9);
        let ids: Vec<u32> = (0..500).map(|_| rng.gen_range(0..BYTE_VOCAB)).collect();
        let corpus = Corpus {
            name: "c".to_string(),
            ids: ids.clone(),
            tokenizer_id: "byte-v1".to_string(),
            vocab_size: BYTE_VOCAB,
        };
        save_pretokenized(&corpus, &path).unwrap();
        let back = load_pretokenized(&path).unwrap();
        assert_eq!(back.ids, ids);
        assert_eq!(back.vocab_size, BYTE_VOCAB);
    }

    #[test]
    fn toks_rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toks");
        std::fs::write(&path, b"NOPE\x01rest").unwrap();
        match load_pretokenized(&path) {
            Err(Error::BadMagic { .. }) => {}
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn toks_rejects_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.toks");
        let corpus = tokenize_bytes("t", b"hello world");
        save_pretokenized(&corpus, &path).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 3]).unwrap();
        match load_pretokenized(&path) {
            Err(Error::TruncatedFile { .. }) => {}
            other => panic!("expected TruncatedFile, got {other:?}"),
        }
    }

    #[test]
    fn toks_rejects_out_of_range_id() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("range.toks");
        let corpus = Corpus {
            name: "c".to_string(),
            ids: vec![3, 999],
            tokenizer_id: "byte-v1".to_string(),
            vocab_size: 10,
        };
        save_pretokenized(&corpus, &path).unwrap();
        match load_pretokenized(&path) {
            Err(Error::IdOutOfRange { id: 999, .. }) => {}
            other => panic!("expected IdOutOfRange, got {other:?}"),
        }
    }

    #[test]
    fn calibration_forced_single_window() {
        let corpus = tokenize_bytes("t", b"abc");
        let set = sample_calibration(&corpus, 1, corpus.len(), 0).unwrap();
        assert_eq!(set.sequences, vec![corpus.ids.clone()]);
    }

    #[test]
    fn calibration_deterministic_per_seed() {
        let corpus = tokenize_bytes("t", synthetic_text(4000, 1).as_bytes());
        let a = sample_calibration(&corpus, 16, 32, 7).unwrap();
        let b = sample_calibration(&corpus, 16, 32, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn calibration_seeds_differ() {
        let corpus = tokenize_bytes("t", synthetic_text(20_000, 1).as_bytes());
        let base = sample_calibration(&corpus, 8, 32, 0).unwrap();
        let mut distinct = 0;
        for seed in 1..=100u64 {
            let other = sample_calibration(&corpus, 8, 32, seed).unwrap();
            if other.sequences != base.sequences {
                distinct += 1;
            }
        }
        assert!(distinct >= 99, "only {distinct}/100 seeds produced distinct sets");
    }

    #[test]
    fn calibration_windows_are_contiguous_slices() {
        let corpus = tokenize_bytes("t", synthetic_text(4000, 2).as_bytes());
        let set = sample_calibration(&corpus, 32, 16, 3).unwrap();
        for seq in &set.sequences {
            assert_eq!(seq.len(), 16);
            let found = corpus.ids.windows(16).any(|w| w == seq.as_slice());
            assert!(found, "window not a contiguous corpus slice");
        }
    }

    #[test]
    fn calibration_rejects_short_corpus() {
        let corpus = tokenize_bytes("t", b"ab");
        match sample_calibration(&corpus, 1, 64, 0) {
            Err(Error::CorpusTooShort { .. }) => {}
            other => panic!("expected CorpusTooShort, got {other:?}"),
        }
    }

    #[test]
    fn synthetic_text_is_deterministic_and_sized() {
        let a = synthetic_text(10_000, 42);
        let b = synthetic_text(10_000, 42);
        assert_eq!(a, b);
        assert_eq!(a.len(), 10_000);
        assert!(a.contains(' ') && a.contains('.'));
        let c = synthetic_text(10_000, 43);
        assert_ne!(a, c);
    }

    #[test]
    fn split_partitions_ids() {
        let corpus = tokenize_bytes("t", synthetic_text(1000, 3).as_bytes());
        let (train, held) = corpus.split(0.1);
        assert_eq!(train.len() + held.len(), corpus.len());
        let mut joined = train.ids.clone();
        joined.extend_from_slice(&held.ids);
        assert_eq!(joined, corpus.ids);
        assert!(!held.is_empty());
    }

    #[test]
    fn eval_windows_distinct_and_seeded() {
        let corpus = tokenize_bytes("t", synthetic_text(50_000, 4).as_bytes());
        let a = sample_eval_windows(&corpus, 8, 64, 11).unwrap();
        let b = sample_eval_windows(&corpus, 8, 64, 11).unwrap();
        assert_eq!(a, b);
        for (i, s) in a.sequences.iter().enumerate() {
            for t in &a.sequences[i + 1..] {
                assert_ne!(s, t, "eval windows collide");
            }
        }
    }
}
