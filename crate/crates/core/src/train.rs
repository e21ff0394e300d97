//! Contrastive training of the encoder.
//!
//! For an anchor `a`, a positive `p` and negatives `n_1..n_K`, the loss is the
//! softmax cross-entropy of the positive among the cosine similarities to the
//! anchor, each divided by a temperature:
//!
//! ```text
//! J = -log( exp(sim(a,p)/tau) / sum_{j in {p, n_1..n_K}} exp(sim(a,j)/tau) )
//! ```

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::corpus::{PositivePair, SegmentStore};
use crate::encoder::{
    backward_cached, forward_train, init_params, EncoderConfig, EncoderParams, ParamGradients,
};
use crate::error::{AweError, Result};
use crate::eval::{embed_store, samediff_ap};
use crate::linalg::{dot, norm, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum NegativePolicy {
    #[default]
    #[serde(rename = "in-batch")]
    InBatch,
    #[serde(rename = "corpus-sampled")]
    CorpusSampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub tau: f64,
    pub k: u32,
    pub batch_pairs: u32,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epochs: u32,
    pub seed: u64,
    pub negative_policy: NegativePolicy,
    /// Maximum number of dev segments scored after each epoch.
    pub dev_cap: usize,
    /// Minimum number of optimizer updates; small pair sets get extra epochs
    /// until this is reached.
    pub min_updates: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            k: 20,
            batch_pairs: 100,
            lr: 0.001,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 25,
            seed: 0,
            negative_policy: NegativePolicy::InBatch,
            dev_cap: 1000,
            min_updates: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AweError::InvalidConfig(m.into()));
        if !(self.tau > 0.0) {
            return bad("tau must be positive");
        }
        if self.k == 0 {
            return bad("K must be at least 1");
        }
        if !(self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.batch_pairs == 0 {
            return bad("batch_pairs must be at least 1");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if self.dev_cap < 2 {
            return bad("dev_cap must be at least 2");
        }
        Ok(())
    }
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine_sim<F: Scalar>(u: &[F], v: &[F]) -> Result<F> {
    if u.len() != v.len() {
        return Err(AweError::DimensionMismatch {
            expected: u.len(),
            got: v.len(),
        });
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == F::zero() {
        return Err(AweError::ZeroNorm(0));
    }
    if nv == F::zero() {
        return Err(AweError::ZeroNorm(1));
    }
    Ok((dot(u, v) / (nu * nv)).max(-F::one()).min(F::one()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<F> {
    pub loss: F,
    pub grad_anchor: Vec<F>,
    pub grad_positive: Vec<F>,
    pub grad_negatives: Vec<Vec<F>>,
}

/// Contrastive loss with its exact gradients w.r.t. all `K + 2` embeddings.
///
/// Zero-norm inputs are reported by position: 0 anchor, 1 positive, `2 + k`
/// the k-th negative.
pub fn contrastive_loss<F: Scalar>(
    anchor: &[F],
    positive: &[F],
    negatives: &[&[F]],
    tau: F,
) -> Result<LossOutput<F>> {
    if !(tau > F::zero()) {
        return Err(AweError::InvalidConfig("tau must be positive".into()));
    }
    let m = anchor.len();
    let others: Vec<&[F]> = std::iter::once(positive).chain(negatives.iter().copied()).collect();
    for (i, v) in std::iter::once(anchor).chain(others.iter().copied()).enumerate() {
        if v.len() != m {
            return Err(AweError::DimensionMismatch {
                expected: m,
                got: v.len(),
            });
        }
        if norm(v) == F::zero() {
            return Err(AweError::ZeroNorm(i));
        }
    }

    let na = norm(anchor);
    let a_hat: Vec<F> = anchor.iter().map(|&x| x / na).collect();
    let norms: Vec<F> = others.iter().map(|v| norm(v)).collect();
    let sims: Vec<F> = others
        .iter()
        .zip(&norms)
        .map(|(v, &n)| dot(&a_hat, v) / n)
        .collect();
    let logits: Vec<F> = sims.iter().map(|&s| s / tau).collect();
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: F = exps.iter().copied().sum();
    let loss = (total.ln() + max - logits[0]).max(F::zero());

    // dJ/dsim_j = (softmax_j - [j == positive]) / tau
    let mut grad_anchor = vec![F::zero(); m];
    let mut grads_other = Vec::with_capacity(others.len());
    for (j, (v, (&s, &n))) in others.iter().zip(sims.iter().zip(&norms)).enumerate() {
        let mut w = exps[j] / total;
        if j == 0 {
            w -= F::one();
        }
        w = w / tau;
        let mut g = vec![F::zero(); m];
        for d in 0..m {
            let v_hat = v[d] / n;
            grad_anchor[d] += w * (v_hat - s * a_hat[d]) / na;
            g[d] = w * (a_hat[d] - s * v_hat) / n;
        }
        grads_other.push(g);
    }
    let mut grads_other = grads_other.into_iter();
    let grad_positive = grads_other.next().expect("positive gradient");
    Ok(LossOutput {
        loss,
        grad_anchor,
        grad_positive,
        grad_negatives: grads_other.collect(),
    })
}

/// Adam moment accumulators, shaped like the encoder tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
    pub step: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &EncoderParams<F>) -> Self {
        let zeros: Vec<Vec<F>> = params.tensors().iter().map(|t| vec![F::zero(); t.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Nothing is modified when any gradient is
/// non-finite.
pub fn adam_step<F: Scalar>(
    params: &mut EncoderParams<F>,
    grads: &ParamGradients<F>,
    state: &mut AdamState<F>,
    enc_cfg: &EncoderConfig,
    cfg: &TrainConfig,
) -> Result<()> {
    let names = enc_cfg.tensor_shapes();
    let g = grads.tensors();
    if g.len() != state.m.len() || g.len() != names.len() {
        return Err(AweError::DimensionMismatch {
            expected: state.m.len(),
            got: g.len(),
        });
    }
    for ((name, _), t) in names.iter().zip(&g) {
        if t.iter().any(|v| !v.is_finite()) {
            return Err(AweError::NonFiniteGradient(name.clone()));
        }
    }
    state.step += 1;
    let b1 = F::from_f64_lossy(cfg.adam_beta1);
    let b2 = F::from_f64_lossy(cfg.adam_beta2);
    let lr = F::from_f64_lossy(cfg.lr);
    let eps = F::from_f64_lossy(cfg.adam_eps);
    let c1 = F::from_f64_lossy(1.0 - cfg.adam_beta1.powi(state.step as i32));
    let c2 = F::from_f64_lossy(1.0 - cfg.adam_beta2.powi(state.step as i32));
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(g)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        if p.len() != g.len() || m.len() != g.len() {
            return Err(AweError::DimensionMismatch {
                expected: p.len(),
                got: g.len(),
            });
        }
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (F::one() - b1) * g[i];
            v[i] = b2 * v[i] + (F::one() - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// One anchor/positive pair with its negatives, as indices into a
/// [`SegmentStore`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingExample {
    pub anchor: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// Word-type ids of the stored segments and, per type, how many there are.
struct TypeTable {
    ids: Vec<u32>,
    counts: Vec<usize>,
}

impl TypeTable {
    fn new(store: &SegmentStore) -> Self {
        let mut map: HashMap<&str, u32> = HashMap::new();
        let mut counts = Vec::new();
        let ids = store
            .segments
            .iter()
            .map(|s| {
                let next = map.len() as u32;
                let id = *map.entry(&s.word_type).or_insert(next);
                if id as usize == counts.len() {
                    counts.push(0);
                }
                counts[id as usize] += 1;
                id
            })
            .collect();
        Self { ids, counts }
    }
}

/// Draws up to `need` distinct segments whose type differs from `word`,
/// uniformly from the whole store, skipping anything in `taken`.
fn corpus_negatives(
    rng: &mut ChaCha8Rng,
    types: &TypeTable,
    word: u32,
    need: usize,
    taken: &mut Vec<usize>,
) -> Result<()> {
    let n = types.ids.len();
    let available = n - types.counts[word as usize];
    let have = taken.len();
    if available < have + need {
        return Err(AweError::InsufficientNegatives {
            needed: have + need,
            available,
        });
    }
    let mut seen: HashSet<usize> = taken.iter().copied().collect();
    // Rejection sampling; falls back to explicit enumeration if the store
    // is dominated by the anchor's type.
    let mut attempts = 0usize;
    while taken.len() < have + need && attempts < 64 * (need + 1) {
        attempts += 1;
        let i = rng.random_range(0..n);
        if types.ids[i] != word && seen.insert(i) {
            taken.push(i);
        }
    }
    if taken.len() < have + need {
        let pool: Vec<usize> = (0..n)
            .filter(|&i| types.ids[i] != word && !seen.contains(&i))
            .collect();
        let k = have + need - taken.len();
        for j in rand::seq::index::sample(rng, pool.len(), k) {
            taken.push(pool[j]);
        }
    }
    Ok(())
}

/// Shuffles the pairs for this epoch, cuts them into batches and attaches `K`
/// negatives to every pair. Deterministic per `(cfg.seed, epoch)`.
pub fn assemble_batches(
    pairs: &[(usize, usize)],
    store: &SegmentStore,
    cfg: &TrainConfig,
    epoch: u32,
) -> Result<Vec<Vec<TrainingExample>>> {
    cfg.validate()?;
    let types = TypeTable::new(store);
    let k = cfg.k as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);

    let mut batches = Vec::with_capacity(pairs.len().div_ceil(cfg.batch_pairs as usize));
    for chunk in order.chunks(cfg.batch_pairs as usize) {
        let mut members: Vec<usize> = Vec::with_capacity(2 * chunk.len());
        let mut seen = HashSet::new();
        for &p in chunk {
            for s in [pairs[p].0, pairs[p].1] {
                if seen.insert(s) {
                    members.push(s);
                }
            }
        }
        let mut batch = Vec::with_capacity(chunk.len());
        for &p in chunk {
            let (a, pos) = pairs[p];
            let word = types.ids[a];
            let mut negatives = Vec::with_capacity(k);
            if cfg.negative_policy == NegativePolicy::InBatch {
                let cands: Vec<usize> = members
                    .iter()
                    .copied()
                    .filter(|&s| types.ids[s] != word)
                    .collect();
                if cands.len() >= k {
                    for j in rand::seq::index::sample(&mut rng, cands.len(), k) {
                        negatives.push(cands[j]);
                    }
                } else {
                    negatives.extend(cands);
                }
            }
            let short = k - negatives.len();
            if short > 0 {
                corpus_negatives(&mut rng, &types, word, short, &mut negatives)?;
            }
            batch.push(TrainingExample {
                anchor: a,
                positive: pos,
                negatives,
            });
        }
        batches.push(batch);
    }
    Ok(batches)
}

/// Mean contrastive loss over `examples` and its gradient w.r.t. the encoder
/// parameters. `frames[i]` is the feature matrix of segment `i`.
pub fn batch_loss_and_grads<F: Scalar>(
    params: &EncoderParams<F>,
    enc_cfg: &EncoderConfig,
    frames: &[&[F]],
    examples: &[TrainingExample],
    tau: F,
) -> Result<(F, ParamGradients<F>)> {
    if examples.is_empty() {
        return Ok((F::zero(), EncoderParams::zeros(enc_cfg)));
    }
    // Each distinct segment is encoded once.
    let mut slot: HashMap<usize, usize> = HashMap::new();
    let mut used: Vec<usize> = Vec::new();
    for ex in examples {
        for &s in std::iter::once(&ex.anchor)
            .chain(std::iter::once(&ex.positive))
            .chain(&ex.negatives)
        {
            slot.entry(s).or_insert_with(|| {
                used.push(s);
                used.len() - 1
            });
        }
    }
    let seqs: Vec<&[F]> = used.iter().map(|&s| frames[s]).collect();
    let (z, cache) = forward_train(params, enc_cfg, &seqs)?;

    let scale = F::one() / F::from_f64_lossy(examples.len() as f64);
    let mut upstream = vec![vec![F::zero(); enc_cfg.embed_dim]; used.len()];
    let mut total = F::zero();
    for ex in examples {
        let negs: Vec<&[F]> = ex.negatives.iter().map(|s| z[slot[s]].as_slice()).collect();
        let out = contrastive_loss(&z[slot[&ex.anchor]], &z[slot[&ex.positive]], &negs, tau)?;
        total += out.loss;
        let add = |dst: &mut Vec<F>, g: &[F]| {
            for (d, &v) in dst.iter_mut().zip(g) {
                *d += v * scale;
            }
        };
        add(&mut upstream[slot[&ex.anchor]], &out.grad_anchor);
        add(&mut upstream[slot[&ex.positive]], &out.grad_positive);
        for (s, g) in ex.negatives.iter().zip(&out.grad_negatives) {
            add(&mut upstream[slot[s]], g);
        }
    }
    let grads = backward_cached(params, enc_cfg, &cache, &upstream)?;
    Ok((total * scale, grads))
}

/// Training pairs pooled over languages, resolved against one segment store.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub store: SegmentStore,
    pub pairs: Vec<(usize, usize)>,
    pub languages: Vec<String>,
}

impl TrainingData {
    /// Builds the pooled training set from per-language pair lists. The
    /// store holds every segment that occurs in some pair; pairs touching a
    /// segment dropped for being too short are discarded.
    pub fn from_pairs(
        feats: &[crate::feats::FeatureSequence],
        per_language: &[Vec<PositivePair>],
    ) -> Result<Self> {
        let mut segments = Vec::new();
        let mut seen = HashSet::new();
        let mut languages = Vec::new();
        for pairs in per_language {
            for p in pairs {
                for s in [&p.anchor, &p.positive] {
                    if seen.insert(s.occurrence()) {
                        segments.push(s.clone());
                    }
                    if !languages.contains(&s.language_id) {
                        languages.push(s.language_id.clone());
                    }
                }
            }
        }
        let store = SegmentStore::build(feats, &segments)?;
        let index = store.occurrence_index();
        let pairs = per_language
            .iter()
            .flatten()
            .filter_map(|p| {
                Some((
                    *index.get(&p.anchor.occurrence())?,
                    *index.get(&p.positive.occurrence())?,
                ))
            })
            .collect();
        drop(index);
        Ok(Self {
            store,
            pairs,
            languages,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: u32,
    pub mean_loss: f64,
    pub dev_ap: f64,
}

pub fn format_epoch_log(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,mean_loss,dev_ap\n");
    for e in log {
        out.push_str(&format!("{},{:.6},{:.6}\n", e.epoch, e.mean_loss, e.dev_ap));
    }
    out
}

/// 1-based epoch with the highest dev AP; the earliest wins ties.
pub fn select_best_epoch(log: &[EpochLog]) -> Option<u32> {
    log.iter()
        .fold(None::<&EpochLog>, |best, e| match best {
            Some(b) if b.dev_ap >= e.dev_ap => Some(b),
            _ => Some(e),
        })
        .map(|e| e.epoch)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub best_epoch: u32,
    pub log: Vec<EpochLog>,
}

/// `cfg.epochs`, raised so that at least `cfg.min_updates` batches are run.
pub fn epochs_for(cfg: &TrainConfig, n_pairs: usize) -> u32 {
    let per_epoch = n_pairs.div_ceil(cfg.batch_pairs as usize).max(1) as u32;
    cfg.epochs.max(cfg.min_updates.div_ceil(per_epoch))
}

/// Trains on the pooled pairs, scoring same-different AP on the dev set after
/// every epoch and returning the best epoch's parameters.
pub fn train_model(
    data: &TrainingData,
    dev: &SegmentStore,
    enc_cfg: &EncoderConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    enc_cfg.validate()?;
    if data.pairs.is_empty() {
        return Err(AweError::InvalidInput("no training pairs".into()));
    }
    if data.store.dim != enc_cfg.input_dim {
        return Err(AweError::DimensionMismatch {
            expected: enc_cfg.input_dim,
            got: data.store.dim,
        });
    }
    for s in &dev.segments {
        if data.languages.contains(&s.language_id) {
            return Err(AweError::LanguageLeak(s.language_id.clone()));
        }
    }
    let dev = dev.subsample(cfg.dev_cap, cfg.seed.wrapping_add(0xD5EE_D000));
    let dev_languages: Vec<String> = {
        let mut l: Vec<String> = dev.segments.iter().map(|s| s.language_id.clone()).collect();
        l.sort();
        l.dedup();
        l
    };

    let mut params = init_params(enc_cfg, cfg.seed);
    let mut adam = AdamState::new(&params);
    let frames: Vec<&[f32]> = (0..data.store.len()).map(|i| data.store.frames(i)).collect();
    let tau = cfg.tau as f32;

    let n_epochs = epochs_for(cfg, data.pairs.len());
    let mut log = Vec::with_capacity(n_epochs as usize);
    let mut best: Option<(EncoderParams<f32>, u32, f64)> = None;
    for epoch in 1..=n_epochs {
        let batches = assemble_batches(&data.pairs, &data.store, cfg, epoch)?;
        let mut loss_sum = 0.0f64;
        let mut n = 0usize;
        for batch in &batches {
            let (loss, grads) = batch_loss_and_grads(&params, enc_cfg, &frames, batch, tau)?;
            adam_step(&mut params, &grads, &mut adam, enc_cfg, cfg)?;
            loss_sum += loss as f64 * batch.len() as f64;
            n += batch.len();
        }
        let dev_ap = samediff_ap(&embed_store(&params, enc_cfg, &dev)?)?.ap;
        let entry = EpochLog {
            epoch,
            mean_loss: loss_sum / n as f64,
            dev_ap,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} dev AP {:.4}",
            entry.mean_loss,
            entry.dev_ap
        );
        log.push(entry);
        if best.as_ref().is_none_or(|(_, _, ap)| dev_ap > *ap) {
            best = Some((params.clone(), epoch, dev_ap));
        }
    }
    let (best_params, best_epoch, dev_score) = match best {
        Some(b) => b,
        None => (params, 0, f64::NAN),
    };
    let mut extra = std::collections::BTreeMap::new();
    extra.insert("dev_languages".to_string(), dev_languages.join(","));
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            config: enc_cfg.clone(),
            params: best_params,
            meta: CheckpointMeta {
                training_languages: data.languages.clone(),
                seed: cfg.seed,
                epoch: best_epoch,
                dev_score,
                extra,
            },
        },
        best_epoch,
        log,
    })
}
