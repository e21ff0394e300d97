//! Same-different word discrimination.
//!
//! Every pair of embedded words is ranked by cosine distance. Pairs of the
//! same word from different speakers are the positives, pairs of different
//! words are negatives, and same-word same-speaker pairs are left out of the
//! ranking. AP is the mean of precision at each positive in the ranking.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::corpus::{SegmentStore, WordSegment};
use crate::encoder::{encode_batch, EncoderConfig, EncoderParams};
use crate::error::{AweError, Result};
use crate::feats::FeatureSequence;
use crate::linalg::{dot, norm};

/// Column tile of the distance kernel.
const TILE: usize = 1024;
/// Segments encoded per encoder call.
const ENCODE_CHUNK: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct LabelledEmbedding {
    pub z: Vec<f32>,
    pub word_type: String,
    pub speaker_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApResult {
    pub ap: f64,
    pub n_positive_pairs: u64,
    pub n_scored_pairs: u64,
    /// (precision, recall) at each positive in rank order.
    pub pr_curve: Vec<(f64, f64)>,
}

/// Position of pair `(i, j)`, `i < j`, in the compact upper-triangular list.
#[inline]
pub fn pair_index(i: usize, j: usize, n: usize) -> usize {
    debug_assert!(i < j && j < n);
    i * n - i * (i + 1) / 2 + (j - i - 1)
}

/// `1 - cos(a, b)` with the cosine clamped to `[-1, 1]`.
#[inline]
pub fn cosine_distance(a: &[f32], b: &[f32]) -> f32 {
    distance_with_norms(a, b, norm(a), norm(b))
}

#[inline]
pub(crate) fn distance_with_norms(a: &[f32], b: &[f32], na: f32, nb: f32) -> f32 {
    let c = (dot(a, b) / (na * nb)).clamp(-1.0, 1.0);
    // +0.0 turns a -0.0 into +0.0 so the bit pattern orders correctly.
    (1.0 - c) + 0.0
}

/// Cosine distances of all `n(n-1)/2` pairs in upper-triangular row order.
pub fn pairwise_cosine_distances(set: &[LabelledEmbedding]) -> Result<Vec<f32>> {
    let n = set.len();
    if n < 2 {
        return Err(AweError::InvalidInput(
            "need at least two embeddings for pairwise distances".into(),
        ));
    }
    let dim = set[0].z.len();
    let mut norms = Vec::with_capacity(n);
    for (i, e) in set.iter().enumerate() {
        if e.z.len() != dim {
            return Err(AweError::DimensionMismatch {
                expected: dim,
                got: e.z.len(),
            });
        }
        let nv = norm(&e.z);
        if !(nv > 0.0) || !nv.is_finite() {
            return Err(AweError::ZeroNorm(i));
        }
        norms.push(nv);
    }

    let mut out = vec![0f32; n * (n - 1) / 2];
    // Split the output into per-row slices so rows can be filled in parallel.
    let mut rows: Vec<(usize, &mut [f32])> = Vec::with_capacity(n - 1);
    let mut rest = out.as_mut_slice();
    for i in 0..n - 1 {
        let (row, tail) = rest.split_at_mut(n - 1 - i);
        rows.push((i, row));
        rest = tail;
    }
    rows.par_chunks_mut(64).for_each(|block| {
        // Column tiles keep a block of embeddings hot across the rows.
        let lo = block[0].0 + 1;
        for j0 in (lo..n).step_by(TILE) {
            let j1 = (j0 + TILE).min(n);
            for (i, row) in block.iter_mut() {
                let i = *i;
                let a = &set[i].z;
                for j in j0.max(i + 1)..j1 {
                    row[j - i - 1] = distance_with_norms(a, &set[j].z, norms[i], norms[j]);
                }
            }
        }
    });
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PairKind {
    Positive,
    Negative,
    Excluded,
}

/// Interned word and speaker labels.
struct Labels {
    word: Vec<u32>,
    speaker: Vec<u32>,
}

impl Labels {
    fn new(set: &[LabelledEmbedding]) -> Self {
        fn intern<'a>(map: &mut HashMap<&'a str, u32>, s: &'a str) -> u32 {
            let next = map.len() as u32;
            *map.entry(s).or_insert(next)
        }
        let (mut wm, mut sm) = (HashMap::new(), HashMap::new());
        let word = set.iter().map(|e| intern(&mut wm, &e.word_type)).collect();
        let speaker = set.iter().map(|e| intern(&mut sm, &e.speaker_id)).collect();
        Self { word, speaker }
    }

    #[inline]
    fn kind(&self, i: usize, j: usize) -> PairKind {
        if self.word[i] != self.word[j] {
            PairKind::Negative
        } else if self.speaker[i] != self.speaker[j] {
            PairKind::Positive
        } else {
            PairKind::Excluded
        }
    }
}

/// Same-different AP from precomputed upper-triangular distances.
///
/// Ranking is by ascending distance with ties broken by pair index.
pub fn samediff_ap_from_distances(set: &[LabelledEmbedding], distances: &[f32]) -> Result<ApResult> {
    let n = set.len();
    if n < 2 || distances.len() != n * (n - 1) / 2 {
        return Err(AweError::DimensionMismatch {
            expected: n * n.saturating_sub(1) / 2,
            got: distances.len(),
        });
    }
    if distances.len() > u32::MAX as usize {
        return Err(AweError::InvalidInput(format!(
            "{} pairs exceed the supported 2^32",
            distances.len()
        )));
    }
    let labels = Labels::new(set);
    let mut positive = vec![false; distances.len()];
    let mut keys: Vec<u64> = Vec::with_capacity(distances.len());
    for i in 0..n - 1 {
        let base = pair_index(i, i + 1, n);
        for j in i + 1..n {
            let idx = base + (j - i - 1);
            match labels.kind(i, j) {
                PairKind::Excluded => continue,
                PairKind::Positive => positive[idx] = true,
                PairKind::Negative => {}
            }
            let d = distances[idx];
            if d.is_nan() {
                return Err(AweError::InvalidInput(format!("NaN distance at pair {idx}")));
            }
            // Non-negative finite f32 bit patterns sort like the values.
            let d = d.max(0.0) + 0.0;
            keys.push(((d.to_bits() as u64) << 32) | idx as u64);
        }
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return Err(AweError::ApUndefined);
    }
    keys.par_sort_unstable();

    let mut hits = 0usize;
    let mut ap = 0.0f64;
    let mut pr_curve = Vec::with_capacity(n_pos);
    for (rank, key) in keys.iter().enumerate() {
        if positive[(key & 0xffff_ffff) as usize] {
            hits += 1;
            let precision = hits as f64 / (rank + 1) as f64;
            ap += precision;
            pr_curve.push((precision, hits as f64 / n_pos as f64));
        }
    }
    Ok(ApResult {
        ap: ap / n_pos as f64,
        n_positive_pairs: n_pos as u64,
        n_scored_pairs: keys.len() as u64,
        pr_curve,
    })
}

/// Speaker-invariant same-different average precision.
pub fn samediff_ap(set: &[LabelledEmbedding]) -> Result<ApResult> {
    let d = pairwise_cosine_distances(set)?;
    samediff_ap_from_distances(set, &d)
}

/// Encodes every segment of a store with the given parameters.
pub fn embed_store(
    params: &EncoderParams<f32>,
    cfg: &EncoderConfig,
    store: &SegmentStore,
) -> Result<Vec<LabelledEmbedding>> {
    let frames: Vec<&[f32]> = (0..store.len()).map(|i| store.frames(i)).collect();
    let z = encode_chunked(params, cfg, &frames)?;
    Ok(z.into_iter()
        .zip(&store.segments)
        .map(|(z, s)| LabelledEmbedding {
            z,
            word_type: s.word_type.clone(),
            speaker_id: s.speaker_id.clone(),
        })
        .collect())
}

pub(crate) fn encode_chunked(
    params: &EncoderParams<f32>,
    cfg: &EncoderConfig,
    frames: &[&[f32]],
) -> Result<Vec<Vec<f32>>> {
    let chunks: Vec<Vec<Vec<f32>>> = frames
        .par_chunks(ENCODE_CHUNK)
        .map(|c| encode_batch(params, cfg, c))
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Slices each segment out of the archive and embeds it; order is preserved.
pub fn embed_segments(
    checkpoint: &Checkpoint,
    feats: &[FeatureSequence],
    segments: &[WordSegment],
) -> Result<Vec<LabelledEmbedding>> {
    let by_id: HashMap<&str, &FeatureSequence> =
        feats.iter().map(|f| (f.utterance_id.as_str(), f)).collect();
    let mut frames = Vec::with_capacity(segments.len());
    for s in segments {
        let f = by_id
            .get(s.utterance_id.as_str())
            .ok_or_else(|| AweError::UnknownUtterance(s.utterance_id.clone()))?;
        let (a, b) = (s.start_frame as usize, s.end_frame as usize);
        if a >= b || b > f.n_frames() {
            return Err(AweError::InvalidInput(format!(
                "segment {}[{a}, {b}) out of bounds for {} frames",
                s.utterance_id,
                f.n_frames()
            )));
        }
        frames.push(f.frames(a, b));
    }
    let z = encode_chunked(&checkpoint.params, &checkpoint.config, &frames)?;
    Ok(z.into_iter()
        .zip(segments)
        .map(|(z, s)| LabelledEmbedding {
            z,
            word_type: s.word_type.clone(),
            speaker_id: s.speaker_id.clone(),
        })
        .collect())
}

/// `n_items,n_scored,n_pos,ap`
pub fn format_ap_report(n_items: usize, r: &ApResult) -> String {
    format!(
        "n_items,n_scored,n_pos,ap\n{},{},{},{:.6}\n",
        n_items, r.n_scored_pairs, r.n_positive_pairs, r.ap
    )
}

pub fn format_pr_curve(r: &ApResult) -> String {
    let mut out = String::from("precision,recall\n");
    for (p, rc) in &r.pr_curve {
        out.push_str(&format!("{p:.6},{rc:.6}\n"));
    }
    out
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, text).map_err(crate::error::io_err(path))
}
