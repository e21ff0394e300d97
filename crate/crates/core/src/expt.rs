//! Experiment protocols on a labelled multi-language corpus: the cross-lingual
//! train-on-one/test-on-another matrix, language-combination tables, and
//! incremental language-adding sequences.
//!
//! Every language's speakers are split into a training part and a held-out
//! part. Training pairs come only from training speakers; dev scoring and
//! evaluation use held-out speakers. Trained models are cached per seed by
//! their run key, so a language set shared between protocols is trained once.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::corpus::{
    generate_synthetic_corpus, load_alignments, mine_pairs, PositivePair, SegmentStore,
    SyntheticFamilySpec, WordSegment,
};
use crate::encoder::EncoderConfig;
use crate::error::{io_err, AweError, Result};
use crate::eval::{embed_store, samediff_ap};
use crate::feats::{read_feature_archive, FeatureSequence};
use crate::qbe::{build_index, group_queries, run_qbe, GroundTruth, InstanceAggregation, WindowConfig};
use crate::train::{format_epoch_log, train_model, TrainConfig, TrainingData};

/// Feature archive and alignments to use instead of the synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub feats: PathBuf,
    pub alignments: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Combination {
    pub languages: Vec<String>,
    /// Scale each language's pair budget by the plan's `subset_fraction`.
    pub subset: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QbePlan {
    pub window: WindowConfig,
    /// Query words per eval language (first N word types in sorted order
    /// that occur for both the query speaker and the search collection).
    pub n_query_words: usize,
    pub pool_min: bool,
}

impl Default for QbePlan {
    fn default() -> Self {
        Self {
            window: WindowConfig {
                min_len: 8,
                max_len: 24,
                len_step: 4,
                stride: 2,
            },
            n_query_words: 20,
            pool_min: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentPlan {
    pub train_languages: Vec<String>,
    pub eval_languages: Vec<String>,
    pub dev_language: String,
    /// Languages of the cross-lingual matrix; empty means train + eval.
    pub matrix_languages: Vec<String>,
    /// Also fill the matrix diagonal (held-out speakers of the training language).
    pub topline: bool,
    pub subset_fraction: f64,
    pub pairs_per_language: u32,
    /// Speakers per language held out of training (the last ones in sorted order).
    pub held_out_speakers: u32,
    pub seeds: Vec<u64>,
    pub combinations: Vec<Combination>,
    pub sequences: Vec<Vec<String>>,
    pub corpus: SyntheticFamilySpec,
    pub data: Option<DataPaths>,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub qbe: Option<QbePlan>,
}

fn langs(ids: &[&str]) -> Vec<String> {
    ids.iter().map(|s| s.to_string()).collect()
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        let combo = |l: &[&str], subset| Combination {
            languages: langs(l),
            subset,
        };
        Self {
            train_languages: langs(&["A1", "A2", "B1", "B2"]),
            eval_languages: langs(&["A0", "B0"]),
            dev_language: "C0".into(),
            matrix_languages: Vec::new(),
            topline: false,
            subset_fraction: 0.1,
            pairs_per_language: 2000,
            held_out_speakers: 2,
            seeds: vec![1, 2, 3, 4, 5],
            combinations: vec![
                combo(&["A1", "A2"], false),
                combo(&["B1", "B2"], false),
                combo(&["A1", "A2"], true),
                combo(&["B1", "B2"], true),
            ],
            sequences: vec![langs(&["B1", "B2", "A1"]), langs(&["A1", "A2", "B1"])],
            // A third family supplies the dev language, outside both
            // evaluation families.
            corpus: SyntheticFamilySpec {
                n_families: 3,
                ..SyntheticFamilySpec::default()
            },
            data: None,
            encoder: EncoderConfig {
                hidden_dim: 64,
                embed_dim: 32,
                ..EncoderConfig::default()
            },
            train: TrainConfig {
                epochs: 10,
                lr: 3e-3,
                min_updates: 400,
                ..TrainConfig::default()
            },
            qbe: None,
        }
    }
}

impl ExperimentPlan {
    pub fn from_toml(text: &str) -> Result<Self> {
        let plan: Self = toml::from_str(text)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn matrix_languages(&self) -> Vec<String> {
        if !self.matrix_languages.is_empty() {
            return self.matrix_languages.clone();
        }
        let mut all = self.train_languages.clone();
        for l in &self.eval_languages {
            if !all.contains(l) {
                all.push(l.clone());
            }
        }
        all
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AweError::InvalidConfig(m));
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return bad("subset_fraction must lie in (0, 1]".into());
        }
        if self.pairs_per_language == 0 {
            return bad("pairs_per_language must be at least 1".into());
        }
        if self.held_out_speakers < 2 {
            return bad("held_out_speakers must be at least 2".into());
        }
        if self.train_languages.contains(&self.dev_language)
            || self.matrix_languages().contains(&self.dev_language)
        {
            return Err(AweError::LanguageLeak(self.dev_language.clone()));
        }
        for e in &self.eval_languages {
            if self.train_languages.contains(e) {
                return Err(AweError::LanguageLeak(e.clone()));
            }
        }
        if self.sequences.iter().any(|s| s.is_empty()) {
            return bad("incremental sequences must not be empty".into());
        }
        if self.combinations.iter().any(|c| c.languages.is_empty()) {
            return bad("language combinations must not be empty".into());
        }
        if self.data.is_none() {
            self.corpus.validate()?;
        }
        self.encoder.validate()?;
        self.train.validate()?;
        if let Some(q) = &self.qbe {
            q.window.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub model_id: String,
    pub train_set: String,
    pub eval_language: String,
    /// `ap` or `p_at_10`.
    pub metric_name: String,
    pub value: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model_id,train_set,eval_language,metric_name,value,seed\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.6},{}",
                r.model_id, r.train_set, r.eval_language, r.metric_name, r.value, r.seed
            );
        }
        out
    }

    pub fn extend(&mut self, other: ResultTable) {
        self.rows.extend(other.rows);
    }

    /// Value for a (train set, eval language, metric, seed) cell, if present.
    pub fn get(&self, train_set: &str, eval_language: &str, metric: &str, seed: u64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| {
                r.train_set == train_set
                    && r.eval_language == eval_language
                    && r.metric_name == metric
                    && r.seed == seed
            })
            .map(|r| r.value)
    }
}

/// Heatmap data from single-language `ap` rows: seed-averaged value per
/// (train language, eval language), normalized by the column maximum.
pub fn heatmap_csv(table: &ResultTable) -> String {
    let mut cells: BTreeMap<(String, String), (f64, usize)> = BTreeMap::new();
    for r in table.rows.iter().filter(|r| r.metric_name == "ap" && !r.train_set.contains('+')) {
        let e = cells
            .entry((r.train_set.clone(), r.eval_language.clone()))
            .or_insert((0.0, 0));
        e.0 += r.value;
        e.1 += 1;
    }
    let mut col_max: BTreeMap<&str, f64> = BTreeMap::new();
    for ((_, col), (sum, n)) in &cells {
        let v = sum / *n as f64;
        let m = col_max.entry(col.as_str()).or_insert(f64::NEG_INFINITY);
        *m = m.max(v);
    }
    let mut out = String::from("row,col,value,normalized\n");
    for ((row, col), (sum, n)) in &cells {
        let v = sum / *n as f64;
        let m = col_max[col.as_str()];
        let norm = if m > 0.0 { v / m } else { 0.0 };
        let _ = writeln!(out, "{row},{col},{v:.6},{norm:.6}");
    }
    out
}

/// Identity of a trained model: everything that influences its parameters.
#[derive(Serialize)]
struct RunKey<'a> {
    corpus: &'a str,
    languages: Vec<&'a str>,
    pairs_per_language: u32,
    held_out_speakers: u32,
    dev_language: &'a str,
    encoder: &'a EncoderConfig,
    train: &'a TrainConfig,
}

fn sha_hex(text: &str, n: usize) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().take(n / 2).map(|b| format!("{b:02x}")).collect()
}

/// Stable per-(seed, tag) RNG seed.
fn derive_seed(seed: u64, tag: &str) -> u64 {
    let d = Sha256::digest(format!("{seed}:{tag}").as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

struct Corpus {
    features: Vec<FeatureSequence>,
    segments: Vec<WordSegment>,
    /// Descriptor mixed into run keys.
    source: String,
}

struct LanguageSplit {
    train: Vec<WordSegment>,
    held_out: Vec<WordSegment>,
    held_out_speakers: Vec<String>,
}

struct TrainedModel {
    id: String,
    checkpoint: Checkpoint,
}

/// Everything a single seed needs: its corpus, splits, mined pairs and models.
struct SeedRun<'p> {
    plan: &'p ExperimentPlan,
    seed: u64,
    corpus: Arc<Corpus>,
    splits: BTreeMap<String, LanguageSplit>,
    dev: SegmentStore,
    pairs: HashMap<String, Vec<PositivePair>>,
    models: HashMap<String, Arc<TrainedModel>>,
    scores: HashMap<(String, String, &'static str), f64>,
    out_dir: Option<PathBuf>,
}

impl<'p> SeedRun<'p> {
    fn new(
        plan: &'p ExperimentPlan,
        seed: u64,
        shared: Option<Arc<Corpus>>,
        out_dir: Option<PathBuf>,
    ) -> Result<Self> {
        let corpus = match shared {
            Some(c) => c,
            None => {
                let spec = SyntheticFamilySpec {
                    seed,
                    ..plan.corpus.clone()
                };
                let c = generate_synthetic_corpus(&spec)?;
                Arc::new(Corpus {
                    features: c.features,
                    segments: c.segments,
                    source: toml::to_string(&spec)?,
                })
            }
        };
        let mut by_lang: BTreeMap<&str, Vec<&WordSegment>> = BTreeMap::new();
        for s in &corpus.segments {
            by_lang.entry(&s.language_id).or_default().push(s);
        }
        let mut splits = BTreeMap::new();
        for (lang, segs) in by_lang {
            let speakers: BTreeSet<&str> = segs.iter().map(|s| s.speaker_id.as_str()).collect();
            let h = plan.held_out_speakers as usize;
            if speakers.len() <= h {
                return Err(AweError::InvalidConfig(format!(
                    "language {lang} has {} speakers; need more than {h} to hold {h} out",
                    speakers.len()
                )));
            }
            let held: Vec<String> = speakers
                .iter()
                .skip(speakers.len() - h)
                .map(|s| s.to_string())
                .collect();
            let (held_out, train): (Vec<WordSegment>, Vec<WordSegment>) = segs
                .into_iter()
                .cloned()
                .partition(|s| held.contains(&s.speaker_id));
            splits.insert(
                lang.to_string(),
                LanguageSplit {
                    train,
                    held_out,
                    held_out_speakers: held,
                },
            );
        }
        let mut needed: Vec<&String> = plan.matrix_languages.iter().collect();
        needed.extend(&plan.train_languages);
        needed.extend(&plan.eval_languages);
        needed.push(&plan.dev_language);
        needed.extend(plan.combinations.iter().flat_map(|c| &c.languages));
        needed.extend(plan.sequences.iter().flatten());
        for l in needed {
            if !splits.contains_key(l) {
                return Err(AweError::UnknownLanguage(l.clone()));
            }
        }
        let dev = SegmentStore::build(&corpus.features, &splits[&plan.dev_language].held_out)?;
        Ok(Self {
            plan,
            seed,
            corpus,
            splits,
            dev,
            pairs: HashMap::new(),
            models: HashMap::new(),
            scores: HashMap::new(),
            out_dir,
        })
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.plan.train.clone()
        }
    }

    /// Full-budget pairs for one language, mined once per seed.
    fn language_pairs(&mut self, lang: &str) -> Result<&Vec<PositivePair>> {
        if !self.pairs.contains_key(lang) {
            let split = &self.splits[lang];
            let p = mine_pairs(
                &split.train,
                self.plan.pairs_per_language,
                true,
                derive_seed(self.seed, lang),
            )?;
            self.pairs.insert(lang.to_string(), p);
        }
        Ok(&self.pairs[lang])
    }

    fn model(&mut self, languages: &[String], fraction: f64) -> Result<Arc<TrainedModel>> {
        let budget = ((self.plan.pairs_per_language as f64 * fraction).floor() as u32).max(1);
        let mut sorted: Vec<&str> = languages.iter().map(String::as_str).collect();
        sorted.sort_unstable();
        sorted.dedup();
        let train_cfg = self.train_config();
        let key = toml::to_string(&RunKey {
            corpus: &self.corpus.source,
            languages: sorted.clone(),
            pairs_per_language: budget,
            held_out_speakers: self.plan.held_out_speakers,
            dev_language: &self.plan.dev_language,
            encoder: &self.plan.encoder,
            train: &train_cfg,
        })?;
        let id = sha_hex(&key, 16);
        if let Some(m) = self.models.get(&id) {
            return Ok(m.clone());
        }
        if sorted.contains(&self.plan.dev_language.as_str()) {
            return Err(AweError::LanguageLeak(self.plan.dev_language.clone()));
        }
        let mut per_language = Vec::with_capacity(sorted.len());
        for l in &sorted {
            let all = self.language_pairs(l)?;
            per_language.push(all[..all.len().min(budget as usize)].to_vec());
        }
        let data = TrainingData::from_pairs(&self.corpus.features, &per_language)?;
        log::info!(
            "seed {}: training {id} on {} ({} pairs)",
            self.seed,
            sorted.join("+"),
            data.pairs.len()
        );
        let mut outcome = train_model(&data, &self.dev, &self.plan.encoder, &train_cfg)?;
        outcome.checkpoint.meta.extra.insert("model_id".into(), id.clone());
        outcome
            .checkpoint
            .meta
            .extra
            .insert("run_key_sha256".into(), sha_hex(&key, 64));
        outcome
            .checkpoint
            .meta
            .extra
            .insert("dev_language".into(), self.plan.dev_language.clone());
        if let Some(dir) = &self.out_dir {
            let runs = dir.join("runs");
            fs::create_dir_all(&runs).map_err(io_err(&runs))?;
            outcome.checkpoint.save(runs.join(format!("{id}.awec")))?;
            let log_path = runs.join(format!("{id}.log.csv"));
            fs::write(&log_path, format_epoch_log(&outcome.log)).map_err(io_err(&log_path))?;
            let key_path = runs.join(format!("{id}.toml"));
            fs::write(&key_path, &key).map_err(io_err(&key_path))?;
        }
        let m = Arc::new(TrainedModel {
            id: id.clone(),
            checkpoint: outcome.checkpoint,
        });
        self.models.insert(id, m.clone());
        Ok(m)
    }

    /// Checks that nothing of `eval` reached training or model selection.
    fn assert_zero_resource(&self, model: &TrainedModel, eval: &str) -> Result<()> {
        let meta = &model.checkpoint.meta;
        if meta.training_languages.iter().any(|l| l == eval) || self.plan.dev_language == eval {
            return Err(AweError::LanguageLeak(eval.to_string()));
        }
        log::info!(
            "zero-resource check passed: eval {eval}, train [{}], dev {}",
            meta.training_languages.join(","),
            self.plan.dev_language
        );
        Ok(())
    }

    fn ap(&mut self, model: &TrainedModel, eval: &str) -> Result<f64> {
        let k = (model.id.clone(), eval.to_string(), "ap");
        if let Some(v) = self.scores.get(&k) {
            return Ok(*v);
        }
        let store = SegmentStore::build(&self.corpus.features, &self.splits[eval].held_out)?;
        let emb = embed_store(&model.checkpoint.params, &model.checkpoint.config, &store)?;
        let v = samediff_ap(&emb)?.ap;
        self.scores.insert(k, v);
        Ok(v)
    }

    /// Mean P@10 with queries from the first held-out speaker and the other
    /// held-out speakers' utterances as the search collection.
    fn p_at_10(&mut self, model: &TrainedModel, eval: &str, q: &QbePlan) -> Result<f64> {
        let k = (model.id.clone(), eval.to_string(), "p_at_10");
        if let Some(v) = self.scores.get(&k) {
            return Ok(*v);
        }
        let split = &self.splits[eval];
        let query_spk = &split.held_out_speakers[0];
        let (query_segs, search_segs): (Vec<&WordSegment>, Vec<&WordSegment>) =
            split.held_out.iter().partition(|s| &s.speaker_id == query_spk);
        let search_utts: BTreeSet<&str> =
            search_segs.iter().map(|s| s.utterance_id.as_str()).collect();
        let search: Vec<FeatureSequence> = self
            .corpus
            .features
            .iter()
            .filter(|f| search_utts.contains(f.utterance_id.as_str()))
            .cloned()
            .collect();
        let truth = GroundTruth::from_segments(&search_segs.iter().map(|s| (*s).clone()).collect::<Vec<_>>());
        let mut instances: Vec<WordSegment> = query_segs
            .into_iter()
            .filter(|s| truth.knows(&s.word_type) && s.n_frames() >= crate::corpus::MIN_SEGMENT_FRAMES)
            .cloned()
            .collect();
        instances.sort();
        let mut queries = group_queries(&instances);
        queries.truncate(q.n_query_words);
        if queries.is_empty() {
            return Err(AweError::InvalidInput(format!(
                "no query words shared between held-out speakers of {eval}"
            )));
        }
        let index = build_index(&model.checkpoint, &search, &q.window)?;
        let agg = if q.pool_min {
            InstanceAggregation::PoolMin
        } else {
            InstanceAggregation::Average
        };
        let mut sum = 0.0;
        for query in &queries {
            sum += run_qbe(&model.checkpoint, query, &self.corpus.features, &index, &truth, agg)?.p_at_10;
        }
        let v = sum / queries.len() as f64;
        self.scores.insert(k, v);
        Ok(v)
    }

    fn row(&self, model: &TrainedModel, train_set: String, eval: &str, metric: &str, value: f64) -> ResultRow {
        debug_assert!((0.0..=1.0).contains(&value));
        ResultRow {
            model_id: model.id.clone(),
            train_set,
            eval_language: eval.to_string(),
            metric_name: metric.to_string(),
            value,
            seed: self.seed,
        }
    }

    fn crosslingual_matrix(&mut self) -> Result<ResultTable> {
        let languages = self.plan.matrix_languages();
        let mut table = ResultTable::default();
        for train in &languages {
            let model = self.model(std::slice::from_ref(train), 1.0)?;
            for eval in &languages {
                if eval == train {
                    if !self.plan.topline {
                        continue;
                    }
                } else {
                    self.assert_zero_resource(&model, eval)?;
                }
                let v = self.ap(&model, eval)?;
                table.rows.push(self.row(&model, train.clone(), eval, "ap", v));
            }
        }
        Ok(table)
    }

    fn combination_table(&mut self) -> Result<ResultTable> {
        let mut table = ResultTable::default();
        for combo in &self.plan.combinations {
            let fraction = if combo.subset { self.plan.subset_fraction } else { 1.0 };
            let model = self.model(&combo.languages, fraction)?;
            let mut name = combo.languages.join("+");
            if combo.subset && fraction < 1.0 {
                name.push_str(&format!("@{fraction}"));
            }
            for eval in &self.plan.eval_languages {
                if combo.languages.contains(eval) {
                    continue;
                }
                self.assert_zero_resource(&model, eval)?;
                let v = self.ap(&model, eval)?;
                table.rows.push(self.row(&model, name.clone(), eval, "ap", v));
            }
        }
        Ok(table)
    }

    fn incremental_sequences(&mut self) -> Result<ResultTable> {
        let mut table = ResultTable::default();
        for seq in &self.plan.sequences {
            for step in 1..=seq.len() {
                let prefix = &seq[..step];
                let model = self.model(prefix, 1.0)?;
                let name = prefix.join("+");
                for eval in &self.plan.eval_languages {
                    if seq.contains(eval) {
                        continue;
                    }
                    self.assert_zero_resource(&model, eval)?;
                    let v = self.ap(&model, eval)?;
                    table.rows.push(self.row(&model, name.clone(), eval, "ap", v));
                    if let Some(q) = &self.plan.qbe {
                        let v = self.p_at_10(&model, eval, q)?;
                        table.rows.push(self.row(&model, name.clone(), eval, "p_at_10", v));
                    }
                }
            }
        }
        Ok(table)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    CrosslingualMatrix,
    Combinations,
    IncrementalSequences,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [
        Protocol::CrosslingualMatrix,
        Protocol::Combinations,
        Protocol::IncrementalSequences,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::CrosslingualMatrix => "crosslingual",
            Protocol::Combinations => "combinations",
            Protocol::IncrementalSequences => "incremental",
        }
    }
}

fn load_data(plan: &ExperimentPlan) -> Result<Option<Arc<Corpus>>> {
    let Some(d) = &plan.data else {
        return Ok(None);
    };
    let features = read_feature_archive(&d.feats)?;
    let segments = load_alignments(&d.alignments)?;
    crate::corpus::check_against_archive(&segments, &features)?;
    Ok(Some(Arc::new(Corpus {
        features,
        segments,
        source: format!("{}|{}", d.feats.display(), d.alignments.display()),
    })))
}

/// Runs the requested protocols for every seed in the plan. Seeds run in
/// parallel; each returns its tables in protocol order, merged in seed order.
/// When `out_dir` is given, checkpoints, epoch logs and run keys are written
/// to `out_dir/runs/`.
pub fn run_protocols(
    plan: &ExperimentPlan,
    protocols: &[Protocol],
    out_dir: Option<&Path>,
) -> Result<Vec<(Protocol, ResultTable)>> {
    plan.validate()?;
    let shared = load_data(plan)?;
    let per_seed: Vec<Vec<ResultTable>> = plan
        .seeds
        .par_iter()
        .map(|&seed| {
            let mut run = SeedRun::new(plan, seed, shared.clone(), out_dir.map(Path::to_path_buf))?;
            protocols
                .iter()
                .map(|p| match p {
                    Protocol::CrosslingualMatrix => run.crosslingual_matrix(),
                    Protocol::Combinations => run.combination_table(),
                    Protocol::IncrementalSequences => run.incremental_sequences(),
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(protocols
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let mut t = ResultTable::default();
            for seed_tables in &per_seed {
                t.extend(seed_tables[i].clone());
            }
            (p, t)
        })
        .collect())
}

fn run_one(plan: &ExperimentPlan, p: Protocol) -> Result<ResultTable> {
    Ok(run_protocols(plan, &[p], None)?.remove(0).1)
}

pub fn run_crosslingual_matrix(plan: &ExperimentPlan) -> Result<ResultTable> {
    if plan.matrix_languages().len() < 2 {
        return Err(AweError::InvalidConfig(
            "the cross-lingual matrix needs at least two languages".into(),
        ));
    }
    run_one(plan, Protocol::CrosslingualMatrix)
}

pub fn run_combination_table(plan: &ExperimentPlan) -> Result<ResultTable> {
    run_one(plan, Protocol::Combinations)
}

pub fn run_incremental_sequences(plan: &ExperimentPlan) -> Result<ResultTable> {
    run_one(plan, Protocol::IncrementalSequences)
}

/// Runs every protocol and writes `results.csv`, `heatmap.csv`, one CSV per
/// protocol and the resolved plan into `out_dir`.
pub fn run_experiment(plan: &ExperimentPlan, out_dir: impl AsRef<Path>) -> Result<ResultTable> {
    let out = out_dir.as_ref();
    fs::create_dir_all(out).map_err(io_err(out))?;
    let protocols: Vec<Protocol> = Protocol::ALL
        .into_iter()
        .filter(|p| match p {
            Protocol::CrosslingualMatrix => plan.matrix_languages().len() >= 2,
            Protocol::Combinations => !plan.combinations.is_empty(),
            Protocol::IncrementalSequences => !plan.sequences.is_empty(),
        })
        .collect();
    let tables = run_protocols(plan, &protocols, Some(out))?;
    let write = |name: &str, text: String| {
        let p = out.join(name);
        fs::write(&p, text).map_err(io_err(&p))
    };
    write("plan.toml", plan.to_toml()?)?;
    let mut all = ResultTable::default();
    for (p, t) in tables {
        write(&format!("{}.csv", p.name()), t.to_csv())?;
        if p == Protocol::CrosslingualMatrix {
            write("heatmap.csv", heatmap_csv(&t))?;
        }
        all.extend(t);
    }
    write("results.csv", all.to_csv())?;
    Ok(all)
}
