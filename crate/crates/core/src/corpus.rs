//! Labelled word segments: alignment I/O, positive-pair mining, slicing
//! segments out of feature archives, and a synthetic multi-family corpus.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, AweError, Result};
use crate::feats::{write_feature_archive, FeatureSequence};

/// Segments shorter than this many frames are dropped when slicing.
pub const MIN_SEGMENT_FRAMES: usize = 4;

/// Feature dimensionality of the synthetic corpus (matches 13 static MFCCs).
pub const SYNTH_DIM: usize = 13;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WordSegment {
    pub utterance_id: String,
    pub word_type: String,
    pub speaker_id: String,
    pub language_id: String,
    pub start_frame: u32,
    /// Exclusive.
    pub end_frame: u32,
}

impl WordSegment {
    pub fn n_frames(&self) -> usize {
        (self.end_frame - self.start_frame) as usize
    }

    /// Identity of the occurrence: which frames of which utterance.
    pub fn occurrence(&self) -> (&str, u32, u32) {
        (&self.utterance_id, self.start_frame, self.end_frame)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.word_type.is_empty() {
            return Err("empty word type".into());
        }
        if self.utterance_id.is_empty() {
            return Err("empty utterance id".into());
        }
        if self.end_frame <= self.start_frame {
            return Err(format!(
                "end_frame {} must exceed start_frame {}",
                self.end_frame, self.start_frame
            ));
        }
        Ok(())
    }

    fn to_tsv(&self, out: &mut String) {
        let _ = write!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.utterance_id,
            self.word_type,
            self.speaker_id,
            self.language_id,
            self.start_frame,
            self.end_frame
        );
    }

    fn from_fields(fields: &[&str]) -> std::result::Result<Self, String> {
        let frame = |s: &str, what: &str| {
            s.trim()
                .parse::<u32>()
                .map_err(|_| format!("{what} {s:?} is not a non-negative integer"))
        };
        let seg = WordSegment {
            utterance_id: fields[0].to_string(),
            word_type: fields[1].to_string(),
            speaker_id: fields[2].to_string(),
            language_id: fields[3].to_string(),
            start_frame: frame(fields[4], "start_frame")?,
            end_frame: frame(fields[5], "end_frame")?,
        };
        seg.validate()?;
        Ok(seg)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositivePair {
    pub anchor: WordSegment,
    pub positive: WordSegment,
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
}

/// Parses alignment TSV text:
/// `utterance_id  word_type  speaker_id  language_id  start_frame  end_frame`.
pub fn parse_alignments(text: &str, source: &str) -> Result<Vec<WordSegment>> {
    data_lines(text)
        .map(|(line, l)| {
            let fields: Vec<&str> = l.split('\t').collect();
            if fields.len() != 6 {
                return Err(AweError::Parse {
                    path: source.to_string(),
                    line,
                    message: format!("expected 6 tab-separated fields, found {}", fields.len()),
                });
            }
            WordSegment::from_fields(&fields).map_err(|message| AweError::Parse {
                path: source.to_string(),
                line,
                message,
            })
        })
        .collect()
}

pub fn load_alignments(path: impl AsRef<Path>) -> Result<Vec<WordSegment>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_alignments(&text, &path.display().to_string())
}

pub fn format_alignments(segments: &[WordSegment]) -> String {
    let mut out = String::from("# utterance_id\tword_type\tspeaker_id\tlanguage_id\tstart_frame\tend_frame\n");
    for s in segments {
        s.to_tsv(&mut out);
        out.push('\n');
    }
    out
}

pub fn write_alignments(segments: &[WordSegment], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_alignments(segments)).map_err(io_err(path))
}

/// Checks every segment against the archive: the utterance must exist and the
/// span must lie within its frames.
pub fn check_against_archive(segments: &[WordSegment], feats: &[FeatureSequence]) -> Result<()> {
    let lengths: HashMap<&str, usize> = feats
        .iter()
        .map(|f| (f.utterance_id.as_str(), f.n_frames()))
        .collect();
    for s in segments {
        let t = *lengths
            .get(s.utterance_id.as_str())
            .ok_or_else(|| AweError::UnknownUtterance(s.utterance_id.clone()))?;
        if s.end_frame as usize > t {
            return Err(AweError::InvalidInput(format!(
                "segment {}[{}, {}) exceeds utterance length {t}",
                s.utterance_id, s.start_frame, s.end_frame
            )));
        }
    }
    Ok(())
}

/// Pair TSV: the six alignment fields of the anchor followed by the six of the positive.
pub fn format_pairs(pairs: &[PositivePair]) -> String {
    let mut out = String::new();
    for p in pairs {
        p.anchor.to_tsv(&mut out);
        out.push('\t');
        p.positive.to_tsv(&mut out);
        out.push('\n');
    }
    out
}

pub fn parse_pairs(text: &str, source: &str) -> Result<Vec<PositivePair>> {
    data_lines(text)
        .map(|(line, l)| {
            let perr = |message: String| AweError::Parse {
                path: source.to_string(),
                line,
                message,
            };
            let fields: Vec<&str> = l.split('\t').collect();
            if fields.len() != 12 {
                return Err(perr(format!(
                    "expected 12 tab-separated fields, found {}",
                    fields.len()
                )));
            }
            let anchor = WordSegment::from_fields(&fields[..6]).map_err(perr)?;
            let positive = WordSegment::from_fields(&fields[6..]).map_err(perr)?;
            if anchor.word_type != positive.word_type || anchor.occurrence() == positive.occurrence()
            {
                return Err(perr("not a pair of distinct same-type occurrences".into()));
            }
            Ok(PositivePair { anchor, positive })
        })
        .collect()
}

pub fn load_pairs(path: impl AsRef<Path>) -> Result<Vec<PositivePair>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_pairs(&text, &path.display().to_string())
}

pub fn write_pairs(pairs: &[PositivePair], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_pairs(pairs)).map_err(io_err(path))
}

/// Decodes index `p` of the `k choose 2` unordered pairs `(i, j)`, `i < j`,
/// enumerated row by row.
fn unordered_pair(mut p: u64, k: u64) -> (usize, usize) {
    let mut i = 0u64;
    loop {
        let row = k - 1 - i;
        if p < row {
            return (i as usize, (i + 1 + p) as usize);
        }
        p -= row;
        i += 1;
    }
}

/// Samples positive pairs uniformly without replacement from the universe of
/// unordered same-type pairs, separately for each language when
/// `per_language` is set.
pub fn mine_pairs(
    segments: &[WordSegment],
    n_pairs: u32,
    per_language: bool,
    rng_seed: u64,
) -> Result<Vec<PositivePair>> {
    // group -> word type -> distinct occurrences
    let mut groups: BTreeMap<&str, BTreeMap<&str, Vec<&WordSegment>>> = BTreeMap::new();
    let mut seen = HashSet::new();
    for s in segments {
        if !seen.insert(s.occurrence()) {
            continue;
        }
        let key = if per_language { s.language_id.as_str() } else { "" };
        groups
            .entry(key)
            .or_default()
            .entry(&s.word_type)
            .or_default()
            .push(s);
    }
    let empty: Vec<String> = groups
        .iter()
        .filter(|(_, types)| types.values().all(|occ| occ.len() < 2))
        .map(|(g, _)| if g.is_empty() { "<all>".to_string() } else { g.to_string() })
        .collect();
    if groups.is_empty() {
        return Err(AweError::NoPairs(vec!["<all>".into()]));
    }
    if !empty.is_empty() {
        return Err(AweError::NoPairs(empty));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut out = Vec::new();
    for types in groups.values() {
        let types: Vec<&Vec<&WordSegment>> = types.values().filter(|o| o.len() >= 2).collect();
        let mut offsets = Vec::with_capacity(types.len() + 1);
        let mut total = 0u64;
        for occ in &types {
            offsets.push(total);
            let k = occ.len() as u64;
            total += k * (k - 1) / 2;
        }
        let take = (n_pairs as u64).min(total);
        let picks: Vec<u64> = if take == total {
            let mut all: Vec<u64> = (0..total).collect();
            all.shuffle(&mut rng);
            all
        } else {
            sample_distinct(&mut rng, total, take as usize)
        };
        for p in picks {
            let t = offsets.partition_point(|&o| o <= p) - 1;
            let occ = types[t];
            let (i, j) = unordered_pair(p - offsets[t], occ.len() as u64);
            out.push(PositivePair {
                anchor: occ[i].clone(),
                positive: occ[j].clone(),
            });
        }
    }
    Ok(out)
}

/// Floyd's algorithm: `n` distinct values from `0..universe`, in draw order.
fn sample_distinct(rng: &mut ChaCha8Rng, universe: u64, n: usize) -> Vec<u64> {
    let mut chosen = HashSet::with_capacity(n);
    let mut order = Vec::with_capacity(n);
    for j in (universe - n as u64)..universe {
        let t = rng.random_range(0..=j);
        let v = if chosen.contains(&t) { j } else { t };
        chosen.insert(v);
        order.push(v);
    }
    order.shuffle(rng);
    order
}

/// Segments sliced from a feature archive, stored contiguously.
#[derive(Debug, Clone)]
pub struct SegmentStore {
    pub segments: Vec<WordSegment>,
    pub dim: usize,
    frames: Vec<Vec<f32>>,
}

impl SegmentStore {
    /// Slices every segment out of `feats`. Segments shorter than
    /// [`MIN_SEGMENT_FRAMES`] are dropped with a warning.
    pub fn build(feats: &[FeatureSequence], segments: &[WordSegment]) -> Result<Self> {
        let by_id: HashMap<&str, &FeatureSequence> =
            feats.iter().map(|f| (f.utterance_id.as_str(), f)).collect();
        let dim = feats.first().map_or(SYNTH_DIM, |f| f.dim());
        let mut kept = Vec::with_capacity(segments.len());
        let mut frames = Vec::with_capacity(segments.len());
        let mut dropped = 0usize;
        for s in segments {
            let f = by_id
                .get(s.utterance_id.as_str())
                .ok_or_else(|| AweError::UnknownUtterance(s.utterance_id.clone()))?;
            if f.dim() != dim {
                return Err(AweError::DimensionMismatch {
                    expected: dim,
                    got: f.dim(),
                });
            }
            let (a, b) = (s.start_frame as usize, s.end_frame as usize);
            if b > f.n_frames() || a >= b {
                return Err(AweError::InvalidInput(format!(
                    "segment {}[{a}, {b}) out of bounds for {} frames",
                    s.utterance_id,
                    f.n_frames()
                )));
            }
            if b - a < MIN_SEGMENT_FRAMES {
                dropped += 1;
                continue;
            }
            kept.push(s.clone());
            frames.push(f.frames(a, b).to_vec());
        }
        if dropped > 0 {
            log::warn!("dropped {dropped} segments shorter than {MIN_SEGMENT_FRAMES} frames");
        }
        Ok(Self {
            segments: kept,
            dim,
            frames,
        })
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn frames(&self, i: usize) -> &[f32] {
        &self.frames[i]
    }

    pub fn n_frames(&self, i: usize) -> usize {
        self.frames[i].len() / self.dim
    }

    /// Index of each occurrence, for resolving pairs back to stored segments.
    pub fn occurrence_index(&self) -> HashMap<(&str, u32, u32), usize> {
        self.segments
            .iter()
            .enumerate()
            .map(|(i, s)| (s.occurrence(), i))
            .collect()
    }

    /// Keeps the segments for which `keep` is true, preserving order.
    pub fn filter(&self, keep: impl Fn(&WordSegment) -> bool) -> Self {
        let (segments, frames) = self
            .segments
            .iter()
            .zip(&self.frames)
            .filter(|(s, _)| keep(s))
            .map(|(s, f)| (s.clone(), f.clone()))
            .unzip();
        Self {
            segments,
            dim: self.dim,
            frames,
        }
    }

    /// Deterministic subsample of at most `cap` segments (order preserved).
    pub fn subsample(&self, cap: usize, seed: u64) -> Self {
        if self.len() <= cap {
            return self.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = rand::seq::index::sample(&mut rng, self.len(), cap).into_vec();
        idx.sort_unstable();
        Self {
            segments: idx.iter().map(|&i| self.segments[i].clone()).collect(),
            dim: self.dim,
            frames: idx.iter().map(|&i| self.frames[i].clone()).collect(),
        }
    }
}

/// Inclusive integer range used in the synthetic corpus spec.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub min: u32,
    pub max: u32,
}

impl Span {
    pub const fn new(min: u32, max: u32) -> Self {
        Self { min, max }
    }

    fn draw(&self, rng: &mut impl Rng) -> u32 {
        rng.random_range(self.min..=self.max)
    }
}

/// Parameters of the synthetic language-family corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticFamilySpec {
    pub n_families: u32,
    pub languages_per_family: u32,
    pub phones_per_language: u32,
    pub shared_fraction_within_family: f64,
    pub shared_fraction_across_family: f64,
    pub n_word_types: u32,
    pub phones_per_word: Span,
    pub n_speakers: u32,
    pub instances_per_type: u32,
    /// Scale of the per-family centre added to every non-global prototype of
    /// that family; 0 draws all prototypes around the origin.
    pub family_offset_scale: f64,
    pub speaker_shift_scale: f64,
    /// Dimension of the subspace speaker shifts are drawn from (shared by all
    /// languages); `SYNTH_DIM` gives isotropic shifts.
    pub speaker_shift_rank: u32,
    pub noise_scale: f64,
    pub frames_per_phone: Span,
    pub words_per_utterance: Span,
    pub seed: u64,
}

impl Default for SyntheticFamilySpec {
    fn default() -> Self {
        Self {
            n_families: 2,
            languages_per_family: 3,
            phones_per_language: 20,
            shared_fraction_within_family: 0.6,
            shared_fraction_across_family: 0.0,
            n_word_types: 50,
            phones_per_word: Span::new(3, 6),
            n_speakers: 12,
            instances_per_type: 20,
            family_offset_scale: 1.5,
            speaker_shift_scale: 4.0,
            speaker_shift_rank: 3,
            noise_scale: 0.4,
            frames_per_phone: Span::new(2, 4),
            words_per_utterance: Span::new(3, 6),
            seed: 0,
        }
    }
}

impl SyntheticFamilySpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AweError::InvalidConfig(m));
        let counts = [
            ("n_families", self.n_families),
            ("languages_per_family", self.languages_per_family),
            ("phones_per_language", self.phones_per_language),
            ("n_word_types", self.n_word_types),
            ("n_speakers", self.n_speakers),
            ("instances_per_type", self.instances_per_type),
        ];
        for (name, v) in counts {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        for (name, s) in [
            ("phones_per_word", self.phones_per_word),
            ("frames_per_phone", self.frames_per_phone),
            ("words_per_utterance", self.words_per_utterance),
        ] {
            if s.min == 0 || s.min > s.max {
                return bad(format!("{name} must satisfy 1 <= min <= max"));
            }
        }
        let (w, a) = (
            self.shared_fraction_within_family,
            self.shared_fraction_across_family,
        );
        if !(0.0..=1.0).contains(&w) || !(0.0..=1.0).contains(&a) {
            return bad("shared fractions must lie in [0, 1]".into());
        }
        if a > w {
            return bad(format!(
                "shared_fraction_across_family ({a}) exceeds shared_fraction_within_family ({w})"
            ));
        }
        if self.speaker_shift_rank == 0 || self.speaker_shift_rank as usize > SYNTH_DIM {
            return bad(format!("speaker_shift_rank must lie in 1..={SYNTH_DIM}"));
        }
        if !(self.family_offset_scale >= 0.0) || !(self.speaker_shift_scale >= 0.0) || !(self.noise_scale >= 0.0) {
            return bad("scales must be non-negative".into());
        }
        Ok(())
    }

    pub fn n_languages(&self) -> usize {
        (self.n_families * self.languages_per_family) as usize
    }

    pub fn language_id(family: usize, index: usize) -> String {
        format!("{}{}", family_id(family), index)
    }
}

fn family_id(family: usize) -> String {
    if family < 26 {
        ((b'A' + family as u8) as char).to_string()
    } else {
        format!("F{family}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticLanguage {
    pub id: String,
    pub family: String,
    /// Phone prototype vectors, each of length [`SYNTH_DIM`].
    pub inventory: Vec<Vec<f32>>,
    /// Word type id -> phone indices into `inventory`.
    pub words: Vec<(String, Vec<usize>)>,
    /// Speaker ids in order; speaker `i` is `speakers[i]`.
    pub speakers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub features: Vec<FeatureSequence>,
    pub segments: Vec<WordSegment>,
    pub languages: Vec<SyntheticLanguage>,
}

impl SyntheticCorpus {
    pub fn family_of(&self, language: &str) -> Option<&str> {
        self.languages
            .iter()
            .find(|l| l.id == language)
            .map(|l| l.family.as_str())
    }

    pub fn family_map(&self) -> String {
        let mut out = String::from("# language_id\tfamily_id\n");
        for l in &self.languages {
            let _ = writeln!(out, "{}\t{}", l.id, l.family);
        }
        out
    }

    /// Writes `feats.awef`, `align.tsv` and `families.tsv` into `dir`.
    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_feature_archive(&self.features, dir.join("feats.awef"))?;
        write_alignments(&self.segments, dir.join("align.tsv"))?;
        let fam = dir.join("families.tsv");
        fs::write(&fam, self.family_map()).map_err(io_err(&fam))
    }
}

fn gaussian_vec(rng: &mut impl Rng, scale: f64) -> Vec<f32> {
    (0..SYNTH_DIM)
        .map(|_| (rng.sample::<f64, _>(StandardNormal) * scale) as f32)
        .collect()
}

/// `rank` orthonormal directions in `SYNTH_DIM` dimensions (Gram-Schmidt on
/// Gaussian draws).
fn orthonormal_basis(rng: &mut impl Rng, rank: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rank);
    while basis.len() < rank {
        let mut v: Vec<f64> = (0..SYNTH_DIM).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

/// Generates the synthetic multi-family corpus described by `spec`.
///
/// Languages in one family share `floor(within * P)` phone prototypes; all
/// languages share `floor(across * P)`. Each utterance is rendered from its
/// own RNG stream derived from `(seed, utterance index)`.
pub fn generate_synthetic_corpus(spec: &SyntheticFamilySpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let p = spec.phones_per_language as usize;
    let n_global = (spec.shared_fraction_across_family * p as f64).floor() as usize;
    let n_family_total = (spec.shared_fraction_within_family * p as f64).floor() as usize;
    let n_family = n_family_total - n_global;
    let n_own = p - n_family_total;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let global: Vec<Vec<f32>> = (0..n_global).map(|_| gaussian_vec(&mut rng, 1.0)).collect();

    let mut languages = Vec::with_capacity(spec.n_languages());
    for f in 0..spec.n_families as usize {
        let centre = gaussian_vec(&mut rng, spec.family_offset_scale);
        let family_phone = |rng: &mut ChaCha8Rng| -> Vec<f32> {
            let mut v = gaussian_vec(rng, 1.0);
            v.iter_mut().zip(&centre).for_each(|(x, c)| *x += c);
            v
        };
        let family_pool: Vec<Vec<f32>> = (0..n_family).map(|_| family_phone(&mut rng)).collect();
        for l in 0..spec.languages_per_family as usize {
            let id = SyntheticFamilySpec::language_id(f, l);
            let mut inventory = global.clone();
            inventory.extend(family_pool.iter().cloned());
            inventory.extend((0..n_own).map(|_| family_phone(&mut rng)));

            let mut seen = HashSet::new();
            let mut words = Vec::with_capacity(spec.n_word_types as usize);
            let mut attempts = 0usize;
            while words.len() < spec.n_word_types as usize {
                let len = spec.phones_per_word.draw(&mut rng) as usize;
                let mut phones = Vec::with_capacity(len);
                while phones.len() < len {
                    let ph = rng.random_range(0..p);
                    if p == 1 || phones.last() != Some(&ph) {
                        phones.push(ph);
                    }
                }
                attempts += 1;
                if seen.insert(phones.clone()) || attempts > 1000 * spec.n_word_types as usize {
                    words.push((format!("{id}_w{:03}", words.len()), phones));
                }
            }
            let speakers = (0..spec.n_speakers)
                .map(|s| format!("{id}_spk{s}"))
                .collect();
            languages.push(SyntheticLanguage {
                id,
                family: family_id(f),
                inventory,
                words,
                speakers,
            });
        }
    }

    let shift_basis = orthonormal_basis(&mut rng, spec.speaker_shift_rank as usize);
    let mut features = Vec::new();
    let mut segments = Vec::new();
    let mut utt_counter = 0u64;
    for lang in &languages {
        let speaker_shift: Vec<Vec<f32>> = lang
            .speakers
            .iter()
            .map(|_| {
                let mut v = vec![0.0f32; SYNTH_DIM];
                for b in &shift_basis {
                    let g = rng.sample::<f64, _>(StandardNormal) * spec.speaker_shift_scale;
                    for (x, y) in v.iter_mut().zip(b) {
                        *x += (g * y) as f32;
                    }
                }
                v
            })
            .collect();
        let mut tokens: Vec<usize> = (0..lang.words.len())
            .flat_map(|w| std::iter::repeat_n(w, spec.instances_per_type as usize))
            .collect();
        tokens.shuffle(&mut rng);
        let mut utterances = Vec::new();
        let mut rest = tokens.as_slice();
        while !rest.is_empty() {
            let n = (spec.words_per_utterance.draw(&mut rng) as usize).min(rest.len());
            utterances.push(&rest[..n]);
            rest = &rest[n..];
        }

        for (u, words) in utterances.into_iter().enumerate() {
            let speaker = u % lang.speakers.len();
            let utt_id = format!("{}_u{u:05}", lang.id);
            let mut urng = ChaCha8Rng::seed_from_u64(spec.seed);
            urng.set_stream(utt_counter + 1);
            utt_counter += 1;

            let mut data = Vec::new();
            let mut frame = 0u32;
            for &w in words {
                let (word_type, phones) = &lang.words[w];
                let start = frame;
                for &ph in phones {
                    let dur = spec.frames_per_phone.draw(&mut urng);
                    for _ in 0..dur {
                        for d in 0..SYNTH_DIM {
                            let eps: f64 = urng.sample(StandardNormal);
                            data.push(
                                lang.inventory[ph][d]
                                    + speaker_shift[speaker][d]
                                    + (eps * spec.noise_scale) as f32,
                            );
                        }
                    }
                    frame += dur;
                }
                segments.push(WordSegment {
                    utterance_id: utt_id.clone(),
                    word_type: word_type.clone(),
                    speaker_id: lang.speakers[speaker].clone(),
                    language_id: lang.id.clone(),
                    start_frame: start,
                    end_frame: frame,
                });
            }
            features.push(FeatureSequence::new(
                utt_id,
                frame as usize,
                SYNTH_DIM,
                data,
                10.0,
            )?);
        }
    }

    Ok(SyntheticCorpus {
        features,
        segments,
        languages,
    })
}
