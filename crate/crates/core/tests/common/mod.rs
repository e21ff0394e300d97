//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use awe_core::encoder::{init_params, CellType, EncoderConfig, EncoderParams};
use awe_core::eval::{cosine_distance, LabelledEmbedding};
use awe_core::qbe::SegmentIndex;
use awe_core::train::{batch_loss_and_grads, TrainingExample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn random_seq(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Vec<f64> {
    (0..t * d).map(|_| rng.random_range(-1.5..1.5)).collect()
}

/// Max relative error between analytic and central-difference gradients of
/// the batch loss over every parameter.
pub fn check_encoder_grads(cell: CellType, n_layers: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = EncoderConfig {
        input_dim: 3,
        hidden_dim: 4,
        n_layers,
        embed_dim: 3,
        cell,
        max_frames: 50,
    };
    // Larger-than-default weights so the nonlinearities are exercised.
    let mut params: EncoderParams<f64> = init_params(&cfg, seed).cast();
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            *v *= 4.0;
        }
    }
    let lengths = [7usize, 2, 1, 7, 2, 1];
    let seqs: Vec<Vec<f64>> = lengths.iter().map(|&t| random_seq(&mut rng, t, 3)).collect();
    let frames: Vec<&[f64]> = seqs.iter().map(|s| s.as_slice()).collect();
    let examples = vec![
        TrainingExample {
            anchor: 0,
            positive: 1,
            negatives: vec![2, 3],
        },
        TrainingExample {
            anchor: 4,
            positive: 5,
            negatives: vec![0, 2, 3],
        },
    ];
    let tau = 0.5;
    let (_, grads) = batch_loss_and_grads(&params, &cfg, &frames, &examples, tau).unwrap();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();

    let mut worst = 0.0f64;
    let n_tensors = analytic.len();
    for ti in 0..n_tensors {
        for k in 0..analytic[ti].len() {
            let eval = |delta: f64| {
                let mut p = params.clone();
                p.tensors_mut()[ti][k] += delta;
                batch_loss_and_grads(&p, &cfg, &frames, &examples, tau).unwrap().0
            };
            let numeric = (eval(H) - eval(-H)) / (2.0 * H);
            worst = worst.max(rel_err(analytic[ti][k], numeric));
        }
    }
    worst
}

/// Brute force: enumerate every (i, j), drop same-word same-speaker pairs,
/// sort by (distance, i, j) and average the precision at each positive.
pub fn oracle_ap(set: &[LabelledEmbedding], dist: impl Fn(usize, usize) -> f32) -> Option<f64> {
    let mut scored = Vec::new();
    for i in 0..set.len() {
        for j in i + 1..set.len() {
            let same_word = set[i].word_type == set[j].word_type;
            let same_spk = set[i].speaker_id == set[j].speaker_id;
            if same_word && same_spk {
                continue;
            }
            scored.push((dist(i, j), i, j, same_word));
        }
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let total = scored.iter().filter(|s| s.3).count();
    if total == 0 {
        return None;
    }
    let mut hits = 0;
    let mut sum = 0.0;
    for (rank, s) in scored.iter().enumerate() {
        if s.3 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / total as f64)
}

/// Minimum distance over every window, recomputed from the stored rows.
pub fn linear_scan(index: &SegmentIndex, q: &[f32]) -> Vec<(String, f32)> {
    let mut out: Vec<(String, f32)> = (0..index.utterances.len())
        .map(|u| {
            let best = index
                .rows(u)
                .map(|r| cosine_distance(q, index.window_embedding(r)))
                .fold(f32::INFINITY, f32::min);
            (index.utterances[u].utterance_id.clone(), best)
        })
        .collect();
    out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    out
}

pub const PLANT_DIM: usize = 8;

fn one_hot(k: usize) -> Vec<f32> {
    let mut v = vec![0.0; PLANT_DIM];
    v[k] = 1.0;
    v
}

/// Mean over the frames of a window; the oracle encoder of the planted corpus.
pub fn mean_of_frames(x: &[f32]) -> Vec<f32> {
    let t = (x.len() / PLANT_DIM) as f32;
    let mut m = vec![0.0f32; PLANT_DIM];
    for f in x.chunks(PLANT_DIM) {
        m.iter_mut().zip(f).for_each(|(a, b)| *a += b);
    }
    m.iter_mut().for_each(|v| *v /= t);
    m
}

/// Twenty utterances of one-hot "phones". The query (phones 0 and 1, four
/// frames each) is planted verbatim at an even start in five of them; every
/// other frame uses phones 2..8. Returns the archive, the query frames and
/// the ids of the planted utterances.
pub fn planted_corpus(seed: u64) -> (Vec<awe_core::FeatureSequence>, Vec<f32>, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut query = Vec::new();
    for p in [0, 0, 0, 0, 1, 1, 1, 1] {
        query.extend(one_hot(p));
    }
    let mut hosts: Vec<usize> = (0..20).collect();
    for i in (1..20).rev() {
        hosts.swap(i, rng.random_range(0..=i));
    }
    hosts.truncate(5);
    let mut feats = Vec::new();
    let mut planted = Vec::new();
    for u in 0..20 {
        let t = rng.random_range(30..50);
        let mut data: Vec<f32> = (0..t).flat_map(|_| one_hot(rng.random_range(2..PLANT_DIM))).collect();
        let id = format!("utt{u:02}");
        if hosts.contains(&u) {
            let s = 2 * rng.random_range(0..(t - 8) / 2);
            data[s * PLANT_DIM..(s + 8) * PLANT_DIM].copy_from_slice(&query);
            planted.push(id.clone());
        }
        feats.push(awe_core::FeatureSequence::new(id, t, PLANT_DIM, data, 10.0).unwrap());
    }
    planted.sort();
    (feats, query, planted)
}
