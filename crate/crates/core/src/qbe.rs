//! Query-by-example search over unsegmented utterances.
//!
//! Each search utterance is covered by overlapping windows of several
//! lengths; every window is embedded, and an utterance's score for a query is
//! the minimum cosine distance between the query embedding and any of its
//! windows. Windows that share a start frame are read off one encoder pass as
//! prefixes of the longest window.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{ByteReader, ByteWriter};
use crate::checkpoint::Checkpoint;
use crate::corpus::{WordSegment, MIN_SEGMENT_FRAMES};
use crate::encoder::{encode, encode_prefixes};
use crate::error::{io_err, AweError, Result};
use crate::eval::distance_with_norms;
use crate::feats::FeatureSequence;
use crate::linalg::norm;

const MAGIC: &[u8; 4] = b"AWEI";
const VERSION: u32 = 1;
/// Window starts encoded per encoder call.
const STARTS_PER_CALL: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub min_len: u32,
    pub max_len: u32,
    pub len_step: u32,
    /// Hop between consecutive window starts.
    pub stride: u32,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            min_len: 20,
            max_len: 60,
            len_step: 10,
            stride: 3,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_len == 0 || self.min_len > self.max_len || self.len_step == 0 || self.stride == 0
        {
            return Err(AweError::InvalidConfig(
                "window config needs 1 <= min_len <= max_len, len_step >= 1, stride >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn lengths(&self) -> impl Iterator<Item = usize> + '_ {
        (self.min_len..=self.max_len)
            .step_by(self.len_step as usize)
            .map(|l| l as usize)
    }

    /// Windows of an utterance with `n_frames` frames, grouped by start:
    /// `(start, lengths)`. Utterances shorter than `min_len` get one window
    /// covering everything.
    pub fn windows(&self, n_frames: usize) -> Vec<(usize, Vec<usize>)> {
        let min = self.min_len as usize;
        if n_frames < min {
            return if n_frames == 0 {
                Vec::new()
            } else {
                vec![(0, vec![n_frames])]
            };
        }
        (0..=n_frames - min)
            .step_by(self.stride as usize)
            .map(|s| (s, self.lengths().filter(|&l| s + l <= n_frames).collect()))
            .collect()
    }

    pub fn count(&self, n_frames: usize) -> usize {
        self.windows(n_frames).iter().map(|(_, l)| l.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexedUtterance {
    pub utterance_id: String,
    pub n_frames: u32,
    /// Shorter than `min_len`; indexed as a single full-length window.
    pub short: bool,
    /// `(start_frame, length)` per window, aligned with the embedding rows.
    pub windows: Vec<(u32, u32)>,
    first_row: usize,
}

/// Window embeddings of a search collection, stored as one contiguous
/// row-major `n_windows x M` block.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentIndex {
    pub embed_dim: usize,
    pub utterances: Vec<IndexedUtterance>,
    embeddings: Vec<f32>,
    norms: Vec<f32>,
}

impl SegmentIndex {
    fn from_parts(embed_dim: usize, parts: Vec<(IndexedUtterance, Vec<f32>)>) -> Self {
        let mut utterances = Vec::with_capacity(parts.len());
        let mut embeddings = Vec::new();
        for (mut u, e) in parts {
            u.first_row = embeddings.len() / embed_dim.max(1);
            embeddings.extend_from_slice(&e);
            utterances.push(u);
        }
        let norms = embeddings.chunks_exact(embed_dim.max(1)).map(norm).collect();
        Self {
            embed_dim,
            utterances,
            embeddings,
            norms,
        }
    }

    pub fn n_windows(&self) -> usize {
        self.norms.len()
    }

    pub fn window_embedding(&self, row: usize) -> &[f32] {
        &self.embeddings[row * self.embed_dim..(row + 1) * self.embed_dim]
    }

    /// Rows belonging to utterance `u`.
    pub fn rows(&self, u: usize) -> std::ops::Range<usize> {
        let first = self.utterances[u].first_row;
        first..first + self.utterances[u].windows.len()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.len_u32(self.embed_dim, "AWEI")?;
        w.len_u32(self.utterances.len(), "AWEI")?;
        for u in &self.utterances {
            w.str(&u.utterance_id, "AWEI")?;
            w.u32(u.n_frames);
            w.u32(u.short as u32);
            w.len_u32(u.windows.len(), "AWEI")?;
            for &(s, l) in &u.windows {
                w.u32(s);
                w.u32(l);
            }
        }
        w.u64(self.n_windows() as u64);
        w.f32s(&self.embeddings);
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "AWEI");
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let dim = r.u32()? as usize;
        let n_utts = r.u32()? as usize;
        let mut utts = Vec::with_capacity(n_utts.min(1 << 16));
        let mut total = 0usize;
        for _ in 0..n_utts {
            let utterance_id = r.str()?;
            let n_frames = r.u32()?;
            let short = match r.u32()? {
                0 => false,
                1 => true,
                v => return Err(r.err(format!("bad short flag {v}"))),
            };
            let nw = r.u32()? as usize;
            let mut windows = Vec::with_capacity(nw.min(1 << 20));
            for _ in 0..nw {
                let (s, l) = (r.u32()?, r.u32()?);
                if l == 0 || s as u64 + l as u64 > n_frames as u64 {
                    return Err(r.err(format!("window ({s}, {l}) outside {utterance_id:?}")));
                }
                windows.push((s, l));
            }
            utts.push(IndexedUtterance {
                utterance_id,
                n_frames,
                short,
                windows,
                first_row: total,
            });
            total += nw;
        }
        let n_rows = r.u64()? as usize;
        if n_rows != total {
            return Err(r.err(format!("{n_rows} embedding rows for {total} windows")));
        }
        let embeddings = r.f32s(n_rows * dim)?;
        r.finish()?;
        let norms = embeddings.chunks_exact(dim.max(1)).map(norm).collect();
        Ok(Self {
            embed_dim: dim,
            utterances: utts,
            embeddings,
            norms,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(io_err(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(io_err(path))?)
    }
}

fn index_utterance(
    ckpt: &Checkpoint,
    f: &FeatureSequence,
    wcfg: &WindowConfig,
) -> Result<(IndexedUtterance, Vec<f32>)> {
    let cfg = &ckpt.config;
    let t = f.n_frames();
    let groups = wcfg.windows(t);
    let short = t < wcfg.min_len as usize;
    if short {
        log::warn!(
            "utterance {} has {t} frames (< {}); indexed as one window",
            f.utterance_id,
            wcfg.min_len
        );
    }
    let mut windows = Vec::new();
    let mut emb = Vec::new();
    for chunk in groups.chunks(STARTS_PER_CALL) {
        let seqs: Vec<&[f32]> = chunk
            .iter()
            .map(|(s, lens)| f.frames(*s, s + lens.last().copied().unwrap_or(1)))
            .collect();
        // Windows longer than max_frames see only their first max_frames frames.
        let readouts: Vec<Vec<usize>> = chunk
            .iter()
            .map(|(_, lens)| lens.iter().map(|&l| l.min(cfg.max_frames)).collect())
            .collect();
        let z = encode_prefixes(&ckpt.params, cfg, &seqs, &readouts)?;
        for ((s, lens), zs) in chunk.iter().zip(z) {
            for (&l, zv) in lens.iter().zip(zs) {
                windows.push((*s as u32, l as u32));
                emb.extend_from_slice(&zv);
            }
        }
    }
    Ok((
        IndexedUtterance {
            utterance_id: f.utterance_id.clone(),
            n_frames: t as u32,
            short,
            windows,
            first_row: 0,
        },
        emb,
    ))
}

/// Embeds every window of every utterance in the archive.
pub fn build_index(
    checkpoint: &Checkpoint,
    feats: &[FeatureSequence],
    wcfg: &WindowConfig,
) -> Result<SegmentIndex> {
    wcfg.validate()?;
    if feats.is_empty() {
        return Err(AweError::InvalidInput("cannot index an empty archive".into()));
    }
    let parts = feats
        .par_iter()
        .map(|f| index_utterance(checkpoint, f, wcfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(SegmentIndex::from_parts(checkpoint.config.embed_dim, parts))
}

/// Builds an index with an arbitrary window embedder, called with the frames
/// of each window (row-major, `len x dim`).
pub fn build_index_with<E>(
    feats: &[FeatureSequence],
    wcfg: &WindowConfig,
    embed_dim: usize,
    embed: E,
) -> Result<SegmentIndex>
where
    E: Fn(&[f32]) -> Vec<f32> + Sync,
{
    wcfg.validate()?;
    let parts = feats
        .par_iter()
        .map(|f| {
            let mut windows = Vec::new();
            let mut emb = Vec::new();
            for (s, lens) in wcfg.windows(f.n_frames()) {
                for l in lens {
                    let z = embed(f.frames(s, s + l));
                    if z.len() != embed_dim {
                        return Err(AweError::DimensionMismatch {
                            expected: embed_dim,
                            got: z.len(),
                        });
                    }
                    windows.push((s as u32, l as u32));
                    emb.extend_from_slice(&z);
                }
            }
            Ok((
                IndexedUtterance {
                    utterance_id: f.utterance_id.clone(),
                    n_frames: f.n_frames() as u32,
                    short: f.n_frames() < wcfg.min_len as usize,
                    windows,
                    first_row: 0,
                },
                emb,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SegmentIndex::from_parts(embed_dim, parts))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredUtterance {
    pub utterance_id: String,
    pub score: f32,
}

/// Ranks utterances by their minimum window distance to the query
/// (ascending, ties broken by utterance id).
pub fn score_utterances(index: &SegmentIndex, query: &[f32]) -> Result<Vec<ScoredUtterance>> {
    if query.len() != index.embed_dim {
        return Err(AweError::DimensionMismatch {
            expected: index.embed_dim,
            got: query.len(),
        });
    }
    let nq = norm(query);
    if !(nq > 0.0) {
        return Err(AweError::ZeroNorm(0));
    }
    let mut ranked: Vec<ScoredUtterance> = (0..index.utterances.len())
        .into_par_iter()
        .map(|u| {
            let score = index
                .rows(u)
                .map(|r| distance_with_norms(query, index.window_embedding(r), nq, index.norms[r]))
                .fold(f32::INFINITY, f32::min);
            ScoredUtterance {
                utterance_id: index.utterances[u].utterance_id.clone(),
                score,
            }
        })
        .collect();
    ranked.sort_by(|a, b| {
        a.score
            .total_cmp(&b.score)
            .then_with(|| a.utterance_id.cmp(&b.utterance_id))
    });
    Ok(ranked)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QbeQuery {
    pub query_word: String,
    pub instances: Vec<WordSegment>,
}

/// Which utterances contain which words.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    contains: HashMap<String, HashSet<String>>,
    vocabulary: BTreeSet<String>,
}

impl GroundTruth {
    pub fn insert(&mut self, utterance_id: &str, word: &str) {
        self.contains
            .entry(utterance_id.to_string())
            .or_default()
            .insert(word.to_string());
        self.vocabulary.insert(word.to_string());
    }

    pub fn from_segments(segments: &[WordSegment]) -> Self {
        let mut gt = Self::default();
        for s in segments {
            gt.insert(&s.utterance_id, &s.word_type);
        }
        gt
    }

    pub fn contains(&self, utterance_id: &str, word: &str) -> bool {
        self.contains
            .get(utterance_id)
            .is_some_and(|w| w.contains(word))
    }

    pub fn knows(&self, word: &str) -> bool {
        self.vocabulary.contains(word)
    }

    /// TSV rows `utterance_id<TAB>word_type`; '#' comments allowed.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut gt = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 2 || f[0].is_empty() || f[1].is_empty() {
                return Err(AweError::Parse {
                    path: source.into(),
                    line: i + 1,
                    message: "expected utterance_id<TAB>word_type".into(),
                });
            }
            gt.insert(f[0], f[1]);
        }
        Ok(gt)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn format(&self) -> String {
        let mut rows: Vec<(&String, &String)> = self
            .contains
            .iter()
            .flat_map(|(u, ws)| ws.iter().map(move |w| (u, w)))
            .collect();
        rows.sort();
        let mut out = String::from("# utterance_id\tword_type\n");
        for (u, w) in rows {
            out.push_str(&format!("{u}\t{w}\n"));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InstanceAggregation {
    /// Each spoken instance is its own query; P@10 is averaged.
    #[default]
    Average,
    /// Per-utterance minimum over instances, ranked once.
    PoolMin,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QbeResult {
    pub query_word: String,
    /// One ranking per instance, or a single pooled ranking.
    pub rankings: Vec<Vec<ScoredUtterance>>,
    pub p_at_10: f64,
    /// Indexed utterances that contain the query word.
    pub relevant_total: u64,
}

/// Fraction of the top `min(10, n)` utterances that contain `word`.
pub fn precision_at_10(ranked: &[ScoredUtterance], truth: &GroundTruth, word: &str) -> f64 {
    let k = ranked.len().min(10);
    if k == 0 {
        return 0.0;
    }
    let hits = ranked[..k]
        .iter()
        .filter(|u| truth.contains(&u.utterance_id, word))
        .count();
    hits as f64 / k as f64
}

/// Runs one query word against the index.
pub fn run_qbe(
    checkpoint: &Checkpoint,
    query: &QbeQuery,
    query_feats: &[FeatureSequence],
    index: &SegmentIndex,
    truth: &GroundTruth,
    aggregation: InstanceAggregation,
) -> Result<QbeResult> {
    if !truth.knows(&query.query_word) {
        return Err(AweError::UnknownQueryWord(query.query_word.clone()));
    }
    if query.instances.is_empty() {
        return Err(AweError::InvalidInput(format!(
            "query {:?} has no spoken instances",
            query.query_word
        )));
    }
    let by_id: HashMap<&str, &FeatureSequence> = query_feats
        .iter()
        .map(|f| (f.utterance_id.as_str(), f))
        .collect();
    let mut rankings = Vec::with_capacity(query.instances.len());
    for inst in &query.instances {
        let f = by_id
            .get(inst.utterance_id.as_str())
            .ok_or_else(|| AweError::UnknownUtterance(inst.utterance_id.clone()))?;
        let (a, b) = (inst.start_frame as usize, inst.end_frame as usize);
        if b > f.n_frames() || a >= b {
            return Err(AweError::InvalidInput(format!(
                "query segment {}[{a}, {b}) out of bounds",
                inst.utterance_id
            )));
        }
        if b - a < MIN_SEGMENT_FRAMES {
            return Err(AweError::InvalidInput(format!(
                "query segment {}[{a}, {b}) is shorter than {MIN_SEGMENT_FRAMES} frames",
                inst.utterance_id
            )));
        }
        let z = encode(&checkpoint.params, &checkpoint.config, f.frames(a, b))?;
        rankings.push(score_utterances(index, &z)?);
    }
    if aggregation == InstanceAggregation::PoolMin {
        let mut best: HashMap<String, f32> = HashMap::new();
        for r in &rankings {
            for u in r {
                let e = best.entry(u.utterance_id.clone()).or_insert(f32::INFINITY);
                *e = e.min(u.score);
            }
        }
        let mut pooled: Vec<ScoredUtterance> = best
            .into_iter()
            .map(|(utterance_id, score)| ScoredUtterance { utterance_id, score })
            .collect();
        pooled.sort_by(|a, b| {
            a.score
                .total_cmp(&b.score)
                .then_with(|| a.utterance_id.cmp(&b.utterance_id))
        });
        rankings = vec![pooled];
    }
    let p_at_10 = rankings
        .iter()
        .map(|r| precision_at_10(r, truth, &query.query_word))
        .sum::<f64>()
        / rankings.len() as f64;
    let relevant_total = index
        .utterances
        .iter()
        .filter(|u| truth.contains(&u.utterance_id, &query.query_word))
        .count() as u64;
    Ok(QbeResult {
        query_word: query.query_word.clone(),
        rankings,
        p_at_10,
        relevant_total,
    })
}

/// Groups query instances by word type, in first-appearance order.
pub fn group_queries(instances: &[WordSegment]) -> Vec<QbeQuery> {
    let mut order: Vec<QbeQuery> = Vec::new();
    let mut pos: HashMap<&str, usize> = HashMap::new();
    for s in instances {
        let i = *pos.entry(&s.word_type).or_insert_with(|| {
            order.push(QbeQuery {
                query_word: s.word_type.clone(),
                instances: Vec::new(),
            });
            order.len() - 1
        });
        order[i].instances.push(s.clone());
    }
    order
}

pub fn format_qbe_report(results: &[QbeResult]) -> String {
    let mut out = String::from("query_word,n_instances,relevant_total,p_at_10\n");
    for r in results {
        out.push_str(&format!(
            "{},{},{},{:.6}\n",
            r.query_word,
            r.rankings.len(),
            r.relevant_total,
            r.p_at_10
        ));
    }
    out
}
