//! Multi-layer unidirectional recurrent encoder with a linear projection of
//! the final hidden state, plus exact backpropagation through time.
//!
//! Sequences in a batch are sorted by decreasing length and packed
//! time-major: step `t` holds one row for every sequence longer than `t`, and
//! those rows are a prefix of the rows at step `t - 1`. Input projections and
//! weight gradients are then single GEMMs over all packed rows; only the
//! recurrent product runs step by step.
//!
//! GRU gate order in the stacked weights is reset, update, candidate:
//!
//! ```text
//! r  = sigmoid(Wx_r x + bx_r + Wh_r h + bh_r)
//! u  = sigmoid(Wx_u x + bx_u + Wh_u h + bh_u)
//! n  = tanh(Wx_n x + bx_n + r * (Wh_n h + bh_n))
//! h' = (1 - u) * n + u * h
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AweError, Result};
use crate::linalg::{axpy, sigmoid, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum CellType {
    #[default]
    #[serde(rename = "gru")]
    Gru,
    #[serde(rename = "vanilla-tanh")]
    Tanh,
}

impl CellType {
    /// Number of stacked gate blocks in the weight matrices.
    pub fn gates(self) -> usize {
        match self {
            CellType::Gru => 3,
            CellType::Tanh => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub embed_dim: usize,
    pub cell: CellType,
    pub max_frames: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 13,
            hidden_dim: 400,
            n_layers: 3,
            embed_dim: 130,
            cell: CellType::Gru,
            max_frames: 120,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0
            || self.hidden_dim == 0
            || self.n_layers == 0
            || self.embed_dim == 0
            || self.max_frames == 0
        {
            return Err(AweError::InvalidConfig(
                "encoder dimensions, layer count and max_frames must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Named tensor shapes in canonical order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let g = self.cell.gates() * self.hidden_dim;
        let mut out = Vec::with_capacity(4 * self.n_layers + 2);
        for l in 0..self.n_layers {
            let inp = if l == 0 { self.input_dim } else { self.hidden_dim };
            out.push((format!("layer{l}.w_x"), vec![g, inp]));
            out.push((format!("layer{l}.w_h"), vec![g, self.hidden_dim]));
            out.push((format!("layer{l}.b_x"), vec![g]));
            out.push((format!("layer{l}.b_h"), vec![g]));
        }
        out.push(("out.w".into(), vec![self.embed_dim, self.hidden_dim]));
        out.push(("out.b".into(), vec![self.embed_dim]));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    /// `gates*H x input`
    pub w_x: Vec<F>,
    /// `gates*H x H`
    pub w_h: Vec<F>,
    pub b_x: Vec<F>,
    pub b_h: Vec<F>,
}

/// All encoder weights. Also used as the container for their gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<F> {
    pub layers: Vec<LayerParams<F>>,
    /// `M x H`
    pub w_out: Vec<F>,
    pub b_out: Vec<F>,
}

pub type ParamGradients<F> = EncoderParams<F>;

impl<F: Scalar> EncoderParams<F> {
    pub fn zeros(cfg: &EncoderConfig) -> Self {
        let shapes = cfg.tensor_shapes();
        let mut tensors = shapes
            .iter()
            .map(|(_, dims)| vec![F::zero(); dims.iter().product()]);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            layers.push(LayerParams {
                w_x: tensors.next().expect("shape"),
                w_h: tensors.next().expect("shape"),
                b_x: tensors.next().expect("shape"),
                b_h: tensors.next().expect("shape"),
            });
        }
        Self {
            layers,
            w_out: tensors.next().expect("shape"),
            b_out: tensors.next().expect("shape"),
        }
    }

    /// Tensors in the order of [`EncoderConfig::tensor_shapes`].
    pub fn tensors(&self) -> Vec<&[F]> {
        let mut out: Vec<&[F]> = Vec::with_capacity(4 * self.layers.len() + 2);
        for l in &self.layers {
            out.extend([&l.w_x[..], &l.w_h[..], &l.b_x[..], &l.b_h[..]]);
        }
        out.push(&self.w_out);
        out.push(&self.b_out);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        let mut out: Vec<&mut [F]> = Vec::with_capacity(4 * self.layers.len() + 2);
        for l in &mut self.layers {
            out.push(&mut l.w_x);
            out.push(&mut l.w_h);
            out.push(&mut l.b_x);
            out.push(&mut l.b_h);
        }
        out.push(&mut self.w_out);
        out.push(&mut self.b_out);
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> EncoderParams<G> {
        let c = |v: &Vec<F>| v.iter().map(|x| G::from_f64_lossy(x.to_f64_lossy())).collect();
        EncoderParams {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    w_x: c(&l.w_x),
                    w_h: c(&l.w_h),
                    b_x: c(&l.b_x),
                    b_h: c(&l.b_h),
                })
                .collect(),
            w_out: c(&self.w_out),
            b_out: c(&self.b_out),
        }
    }

    /// `self += other`
    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn check_shapes(&self, cfg: &EncoderConfig) -> Result<()> {
        for ((_, dims), t) in cfg.tensor_shapes().iter().zip(self.tensors()) {
            let want: usize = dims.iter().product();
            if t.len() != want {
                return Err(AweError::DimensionMismatch {
                    expected: want,
                    got: t.len(),
                });
            }
        }
        if self.layers.len() != cfg.n_layers {
            return Err(AweError::DimensionMismatch {
                expected: cfg.n_layers,
                got: self.layers.len(),
            });
        }
        Ok(())
    }
}

/// Uniform initialization in `[-1/sqrt(H), 1/sqrt(H)]` for every tensor.
pub fn init_params(cfg: &EncoderConfig, seed: u64) -> EncoderParams<f32> {
    let bound = init_bound(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = EncoderParams::<f32>::zeros(cfg);
    for t in p.tensors_mut() {
        for v in t.iter_mut() {
            *v = rng.random_range(-bound..=bound);
        }
    }
    p
}

pub fn init_bound(cfg: &EncoderConfig) -> f32 {
    1.0 / (cfg.hidden_dim as f32).sqrt()
}

/// Sort-by-length packing of a batch.
#[derive(Debug, Clone)]
struct Packing {
    /// `order[k]` is the original index of the k-th longest sequence.
    order: Vec<usize>,
    lens: Vec<usize>,
    /// Number of active sequences at each step.
    batch_sizes: Vec<usize>,
    /// First packed row of each step.
    offsets: Vec<usize>,
    total: usize,
}

impl Packing {
    fn new(lens: &[usize]) -> Self {
        let mut order: Vec<usize> = (0..lens.len()).collect();
        order.sort_by(|&a, &b| lens[b].cmp(&lens[a]));
        let t_max = lens.iter().copied().max().unwrap_or(0);
        let mut batch_sizes = Vec::with_capacity(t_max);
        let mut offsets = Vec::with_capacity(t_max);
        let mut total = 0;
        for t in 0..t_max {
            let b = order.iter().take_while(|&&i| lens[i] > t).count();
            offsets.push(total);
            batch_sizes.push(b);
            total += b;
        }
        Self {
            order,
            lens: lens.to_vec(),
            batch_sizes,
            offsets,
            total,
        }
    }

    fn steps(&self) -> usize {
        self.batch_sizes.len()
    }

    /// Packed row of sorted sequence `k` at step `t`.
    fn row(&self, t: usize, k: usize) -> usize {
        self.offsets[t] + k
    }

    fn last_row(&self, k: usize) -> usize {
        self.row(self.lens[self.order[k]] - 1, k)
    }
}

struct LayerCache<F> {
    /// Packed layer output, `total x H`.
    h: Vec<F>,
    /// GRU: activations r, u, n per row (`total x 3H`). Unused for tanh.
    act: Vec<F>,
    /// GRU: recurrent pre-activations `Wh h + bh` (`total x 3H`).
    gh: Vec<F>,
}

/// Everything the backward pass needs from a forward pass.
pub struct ForwardCache<F> {
    packing: Packing,
    input: Vec<F>,
    layers: Vec<LayerCache<F>>,
    /// Final top-layer hidden state per sorted sequence, `B x H`.
    h_final: Vec<F>,
}

fn effective_len(cfg: &EncoderConfig, seq: &[impl Copy]) -> Result<usize> {
    if seq.is_empty() || seq.len() % cfg.input_dim != 0 {
        return Err(AweError::DimensionMismatch {
            expected: cfg.input_dim,
            got: seq.len(),
        });
    }
    Ok((seq.len() / cfg.input_dim).min(cfg.max_frames))
}

fn pack_input<F: Scalar>(cfg: &EncoderConfig, seqs: &[&[F]], packing: &Packing) -> Vec<F> {
    let d = cfg.input_dim;
    let mut x = vec![F::zero(); packing.total * d];
    for t in 0..packing.steps() {
        for k in 0..packing.batch_sizes[t] {
            let src = &seqs[packing.order[k]][t * d..(t + 1) * d];
            let r = packing.row(t, k);
            x[r * d..(r + 1) * d].copy_from_slice(src);
        }
    }
    x
}

fn row_major(cols: usize) -> (isize, isize) {
    (cols as isize, 1)
}

fn transposed(cols: usize) -> (isize, isize) {
    (1, cols as isize)
}

/// `out (rows x n) = inp (rows x k) * W^T + b`, `W` stored `n x k`.
fn affine<F: Scalar>(inp: &[F], rows: usize, k: usize, w: &[F], b: &[F], out: &mut [F]) {
    let n = b.len();
    for r in 0..rows {
        out[r * n..(r + 1) * n].copy_from_slice(b);
    }
    F::gemm(
        rows,
        k,
        n,
        F::one(),
        inp,
        row_major(k),
        w,
        transposed(k),
        F::one(),
        out,
        row_major(n),
    );
}

fn layer_forward<F: Scalar>(
    cfg: &EncoderConfig,
    p: &LayerParams<F>,
    input: &[F],
    in_dim: usize,
    packing: &Packing,
    keep_cache: bool,
) -> LayerCache<F> {
    let hd = cfg.hidden_dim;
    let g = cfg.cell.gates() * hd;
    let total = packing.total;
    let mut gx = vec![F::zero(); total * g];
    affine(input, total, in_dim, &p.w_x, &p.b_x, &mut gx);

    let mut h = vec![F::zero(); total * hd];
    let mut gh = vec![F::zero(); if keep_cache { total * g } else { 0 }];
    let mut act = vec![F::zero(); if keep_cache && cfg.cell == CellType::Gru { total * g } else { 0 }];
    let b_max = packing.batch_sizes.first().copied().unwrap_or(0);
    let mut gh_step = vec![F::zero(); b_max * g];
    let zeros = vec![F::zero(); hd];

    for t in 0..packing.steps() {
        let bt = packing.batch_sizes[t];
        let r0 = packing.offsets[t];
        let gh_t = &mut gh_step[..bt * g];
        if t == 0 {
            for row in gh_t.chunks_exact_mut(g) {
                row.copy_from_slice(&p.b_h);
            }
        } else {
            let prev = &h[packing.offsets[t - 1] * hd..(packing.offsets[t - 1] + bt) * hd];
            affine(prev, bt, hd, &p.w_h, &p.b_h, gh_t);
        }
        let (done, rest) = h.split_at_mut(r0 * hd);
        for k in 0..bt {
            let row = r0 + k;
            let h_prev: &[F] = if t == 0 {
                &zeros
            } else {
                let pr = packing.offsets[t - 1] + k;
                &done[pr * hd..(pr + 1) * hd]
            };
            let gxr = &gx[row * g..(row + 1) * g];
            let ghr = &gh_t[k * g..(k + 1) * g];
            let out = &mut rest[k * hd..(k + 1) * hd];
            match cfg.cell {
                CellType::Gru => {
                    let mut a = keep_cache.then(|| &mut act[row * g..(row + 1) * g]);
                    for j in 0..hd {
                        let r = sigmoid(gxr[j] + ghr[j]);
                        let u = sigmoid(gxr[hd + j] + ghr[hd + j]);
                        let n = (gxr[2 * hd + j] + r * ghr[2 * hd + j]).tanh();
                        out[j] = (F::one() - u) * n + u * h_prev[j];
                        if let Some(a) = a.as_deref_mut() {
                            a[j] = r;
                            a[hd + j] = u;
                            a[2 * hd + j] = n;
                        }
                    }
                }
                CellType::Tanh => {
                    for j in 0..hd {
                        out[j] = (gxr[j] + ghr[j]).tanh();
                    }
                }
            }
        }
        if keep_cache {
            gh[r0 * g..(r0 + bt) * g].copy_from_slice(gh_t);
        }
    }
    LayerCache { h, act, gh }
}

/// Runs the stack over a packed batch; returns per-layer caches.
fn stack_forward<F: Scalar>(
    params: &EncoderParams<F>,
    cfg: &EncoderConfig,
    input: &[F],
    packing: &Packing,
    keep_cache: bool,
) -> Vec<LayerCache<F>> {
    let mut caches: Vec<LayerCache<F>> = Vec::with_capacity(cfg.n_layers);
    for (l, lp) in params.layers.iter().enumerate() {
        let (inp, in_dim) = if l == 0 {
            (input, cfg.input_dim)
        } else {
            (caches[l - 1].h.as_slice(), cfg.hidden_dim)
        };
        let c = layer_forward(cfg, lp, inp, in_dim, packing, keep_cache);
        if !keep_cache && l > 0 {
            // Only the layer below is needed as input.
            caches[l - 1].h = Vec::new();
        }
        caches.push(c);
    }
    caches
}

fn project<F: Scalar>(params: &EncoderParams<F>, cfg: &EncoderConfig, h: &[F], rows: usize) -> Vec<F> {
    let mut z = vec![F::zero(); rows * cfg.embed_dim];
    affine(h, rows, cfg.hidden_dim, &params.w_out, &params.b_out, &mut z);
    z
}

fn prepare<'a, F: Scalar>(cfg: &EncoderConfig, seqs: &[&'a [F]]) -> Result<(Vec<&'a [F]>, Packing)> {
    cfg.validate()?;
    let mut lens = Vec::with_capacity(seqs.len());
    let mut trimmed = Vec::with_capacity(seqs.len());
    for s in seqs {
        let t = effective_len(cfg, s)?;
        lens.push(t);
        trimmed.push(&s[..t * cfg.input_dim]);
    }
    Ok((trimmed, Packing::new(&lens)))
}

/// Forward pass keeping what [`backward_cached`] needs.
///
/// Each sequence is a flat `T x input_dim` row-major slice; sequences longer
/// than `max_frames` are cut to their first `max_frames` frames.
pub fn forward_train<F: Scalar>(
    params: &EncoderParams<F>,
    cfg: &EncoderConfig,
    seqs: &[&[F]],
) -> Result<(Vec<Vec<F>>, ForwardCache<F>)> {
    params.check_shapes(cfg)?;
    let (seqs, packing) = prepare(cfg, seqs)?;
    let input = pack_input(cfg, &seqs, &packing);
    let layers = stack_forward(params, cfg, &input, &packing, true);
    let hd = cfg.hidden_dim;
    let b = seqs.len();
    let top = &layers.last().expect("n_layers >= 1").h;
    let mut h_final = vec![F::zero(); b * hd];
    for k in 0..b {
        let r = packing.last_row(k);
        h_final[k * hd..(k + 1) * hd].copy_from_slice(&top[r * hd..(r + 1) * hd]);
    }
    let z_sorted = project(params, cfg, &h_final, b);
    let m = cfg.embed_dim;
    let mut z = vec![Vec::new(); b];
    for (k, &orig) in packing.order.iter().enumerate() {
        z[orig] = z_sorted[k * m..(k + 1) * m].to_vec();
    }
    Ok((
        z,
        ForwardCache {
            packing,
            input,
            layers,
            h_final,
        },
    ))
}

/// Embeds a batch; output order matches input order.
pub fn encode_batch<F: Scalar>(
    params: &EncoderParams<F>,
    cfg: &EncoderConfig,
    seqs: &[&[F]],
) -> Result<Vec<Vec<F>>> {
    encode_prefixes(
        params,
        cfg,
        seqs,
        &seqs
            .iter()
            .map(|s| vec![(s.len() / cfg.input_dim.max(1)).min(cfg.max_frames)])
            .collect::<Vec<_>>(),
    )
    .map(|nested| nested.into_iter().map(|mut v| v.pop().expect("one readout")).collect())
}

/// Embeds one sequence.
pub fn encode<F: Scalar>(params: &EncoderParams<F>, cfg: &EncoderConfig, seq: &[F]) -> Result<Vec<F>> {
    Ok(encode_batch(params, cfg, &[seq])?.pop().expect("one output"))
}

/// Embeds prefixes of each sequence without re-running the shared part.
///
/// `readouts[i]` lists prefix lengths of sequence `i` (each in
/// `1..=min(T_i, max_frames)`); the embedding of prefix length `L` equals
/// [`encode`] of the first `L` frames, since a unidirectional encoder's state
/// after `L` steps does not depend on later frames.
pub fn encode_prefixes<F: Scalar>(
    params: &EncoderParams<F>,
    cfg: &EncoderConfig,
    seqs: &[&[F]],
    readouts: &[Vec<usize>],
) -> Result<Vec<Vec<Vec<F>>>> {
    params.check_shapes(cfg)?;
    if readouts.len() != seqs.len() {
        return Err(AweError::DimensionMismatch {
            expected: seqs.len(),
            got: readouts.len(),
        });
    }
    if seqs.is_empty() {
        return Ok(Vec::new());
    }
    let (seqs, packing) = prepare(cfg, seqs)?;
    for (i, r) in readouts.iter().enumerate() {
        if let Some(&bad) = r.iter().find(|&&l| l == 0 || l > packing.lens[i]) {
            return Err(AweError::InvalidInput(format!(
                "readout length {bad} outside 1..={} for sequence {i}",
                packing.lens[i]
            )));
        }
    }
    let input = pack_input(cfg, &seqs, &packing);
    let layers = stack_forward(params, cfg, &input, &packing, false);
    let top = &layers.last().expect("n_layers >= 1").h;
    let hd = cfg.hidden_dim;
    let mut rank = vec![0; seqs.len()];
    for (k, &orig) in packing.order.iter().enumerate() {
        rank[orig] = k;
    }
    let n_out: usize = readouts.iter().map(Vec::len).sum();
    let mut gathered = Vec::with_capacity(n_out * hd);
    for (i, r) in readouts.iter().enumerate() {
        for &l in r {
            let row = packing.row(l - 1, rank[i]);
            gathered.extend_from_slice(&top[row * hd..(row + 1) * hd]);
        }
    }
    let z = project(params, cfg, &gathered, n_out);
    let m = cfg.embed_dim;
    let mut chunks = z.chunks_exact(m);
    Ok(readouts
        .iter()
        .map(|r| r.iter().map(|_| chunks.next().expect("row").to_vec()).collect())
        .collect())
}

/// Gradients of `sum_i <upstream_i, z_i>` w.r.t. every parameter.
pub fn backward_cached<F: Scalar>(
    params: &EncoderParams<F>,
    cfg: &EncoderConfig,
    cache: &ForwardCache<F>,
    upstream: &[Vec<F>],
) -> Result<ParamGradients<F>> {
    let packing = &cache.packing;
    let b = packing.order.len();
    if upstream.len() != b {
        return Err(AweError::DimensionMismatch {
            expected: b,
            got: upstream.len(),
        });
    }
    let (m, hd) = (cfg.embed_dim, cfg.hidden_dim);
    let mut dz = vec![F::zero(); b * m];
    for (k, &orig) in packing.order.iter().enumerate() {
        if upstream[orig].len() != m {
            return Err(AweError::DimensionMismatch {
                expected: m,
                got: upstream[orig].len(),
            });
        }
        dz[k * m..(k + 1) * m].copy_from_slice(&upstream[orig]);
    }

    let mut grads = EncoderParams::<F>::zeros(cfg);
    // out.w += dz^T h_final ; out.b += colsum dz ; dh_final = dz W_out
    F::gemm(m, b, hd, F::one(), &dz, transposed(m), &cache.h_final, row_major(hd), F::zero(), &mut grads.w_out, row_major(hd));
    for row in dz.chunks_exact(m) {
        for (g, &v) in grads.b_out.iter_mut().zip(row) {
            *g += v;
        }
    }
    let mut dh_final = vec![F::zero(); b * hd];
    F::gemm(b, m, hd, F::one(), &dz, row_major(m), &params.w_out, row_major(hd), F::zero(), &mut dh_final, row_major(hd));

    let mut d_ext = vec![F::zero(); packing.total * hd];
    for k in 0..b {
        let r = packing.last_row(k);
        d_ext[r * hd..(r + 1) * hd].copy_from_slice(&dh_final[k * hd..(k + 1) * hd]);
    }

    for l in (0..cfg.n_layers).rev() {
        let (inp, in_dim) = if l == 0 {
            (cache.input.as_slice(), cfg.input_dim)
        } else {
            (cache.layers[l - 1].h.as_slice(), hd)
        };
        d_ext = layer_backward(
            cfg,
            &params.layers[l],
            &cache.layers[l],
            inp,
            in_dim,
            packing,
            &d_ext,
            &mut grads.layers[l],
            l > 0,
        );
    }
    Ok(grads)
}

/// Backward through one layer. Returns the gradient w.r.t. the layer input
/// (packed) when `need_input_grad`, else an empty vector.
#[allow(clippy::too_many_arguments)]
fn layer_backward<F: Scalar>(
    cfg: &EncoderConfig,
    p: &LayerParams<F>,
    c: &LayerCache<F>,
    input: &[F],
    in_dim: usize,
    packing: &Packing,
    d_ext: &[F],
    g: &mut LayerParams<F>,
    need_input_grad: bool,
) -> Vec<F> {
    let hd = cfg.hidden_dim;
    let gw = cfg.cell.gates() * hd;
    let total = packing.total;
    let mut dgx = vec![F::zero(); total * gw];
    let mut dgh = vec![F::zero(); total * gw];
    let b_max = packing.batch_sizes.first().copied().unwrap_or(0);
    let mut carry = vec![F::zero(); b_max * hd];
    let mut dh = vec![F::zero(); hd];

    for t in (0..packing.steps()).rev() {
        let bt = packing.batch_sizes[t];
        let r0 = packing.offsets[t];
        for k in 0..bt {
            let row = r0 + k;
            for j in 0..hd {
                dh[j] = d_ext[row * hd + j] + carry[k * hd + j];
            }
            let prev_row = (t > 0).then(|| packing.offsets[t - 1] + k);
            let h_prev = |j: usize| prev_row.map_or(F::zero(), |pr| c.h[pr * hd + j]);
            let dgx_r = &mut dgx[row * gw..(row + 1) * gw];
            let dgh_r = &mut dgh[row * gw..(row + 1) * gw];
            let carry_r = &mut carry[k * hd..(k + 1) * hd];
            match cfg.cell {
                CellType::Gru => {
                    let a = &c.act[row * gw..(row + 1) * gw];
                    let ghn = &c.gh[row * gw + 2 * hd..(row + 1) * gw];
                    for j in 0..hd {
                        let (r, u, n) = (a[j], a[hd + j], a[2 * hd + j]);
                        let hp = h_prev(j);
                        let dn = dh[j] * (F::one() - u);
                        let du = dh[j] * (hp - n);
                        let dan = dn * (F::one() - n * n);
                        let dar = dan * ghn[j] * r * (F::one() - r);
                        let dau = du * u * (F::one() - u);
                        dgx_r[j] = dar;
                        dgx_r[hd + j] = dau;
                        dgx_r[2 * hd + j] = dan;
                        dgh_r[j] = dar;
                        dgh_r[hd + j] = dau;
                        dgh_r[2 * hd + j] = dan * r;
                        carry_r[j] = dh[j] * u;
                    }
                }
                CellType::Tanh => {
                    for j in 0..hd {
                        let hv = c.h[row * hd + j];
                        let da = dh[j] * (F::one() - hv * hv);
                        dgx_r[j] = da;
                        dgh_r[j] = da;
                        carry_r[j] = F::zero();
                    }
                }
            }
        }
        // carry += dgh_t W_h for rows that have a predecessor step
        if t > 0 {
            F::gemm(
                bt,
                gw,
                hd,
                F::one(),
                &dgh[r0 * gw..(r0 + bt) * gw],
                row_major(gw),
                &p.w_h,
                row_major(hd),
                F::one(),
                &mut carry[..bt * hd],
                row_major(hd),
            );
            // sequences that end at t-1 start with no carry
            let prev_bt = packing.batch_sizes[t - 1];
            for v in &mut carry[bt * hd..prev_bt * hd] {
                *v = F::zero();
            }
        }
    }

    // Weight gradients over all packed rows at once.
    F::gemm(gw, total, in_dim, F::one(), &dgx, transposed(gw), input, row_major(in_dim), F::one(), &mut g.w_x, row_major(in_dim));
    for row in dgx.chunks_exact(gw) {
        axpy(F::one(), row, &mut g.b_x);
    }
    for row in dgh.chunks_exact(gw) {
        axpy(F::one(), row, &mut g.b_h);
    }
    for t in 1..packing.steps() {
        let bt = packing.batch_sizes[t];
        let r0 = packing.offsets[t];
        let p0 = packing.offsets[t - 1];
        F::gemm(
            gw,
            bt,
            hd,
            F::one(),
            &dgh[r0 * gw..(r0 + bt) * gw],
            transposed(gw),
            &c.h[p0 * hd..(p0 + bt) * hd],
            row_major(hd),
            F::one(),
            &mut g.w_h,
            row_major(hd),
        );
    }

    if !need_input_grad {
        return Vec::new();
    }
    let mut dx = vec![F::zero(); total * in_dim];
    F::gemm(total, gw, in_dim, F::one(), &dgx, row_major(gw), &p.w_x, row_major(in_dim), F::zero(), &mut dx, row_major(in_dim));
    dx
}

/// Recomputes the forward pass and returns parameter gradients for the given
/// upstream embedding gradients.
pub fn backward<F: Scalar>(
    params: &EncoderParams<F>,
    cfg: &EncoderConfig,
    seqs: &[&[F]],
    upstream: &[Vec<F>],
) -> Result<ParamGradients<F>> {
    let (_, cache) = forward_train(params, cfg, seqs)?;
    backward_cached(params, cfg, &cache, upstream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn tiny(cell: CellType) -> EncoderConfig {
        EncoderConfig {
            input_dim: 3,
            hidden_dim: 5,
            n_layers: 2,
            embed_dim: 2,
            cell,
            max_frames: 120,
        }
    }

    fn random_seq(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Vec<f64> {
        (0..t * d).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let cfg = EncoderConfig::default();
        assert!((init_bound(&cfg) - 0.05).abs() < 1e-7);
        let small = tiny(CellType::Gru);
        let a = init_params(&small, 7);
        assert_eq!(a, init_params(&small, 7));
        assert_ne!(a, init_params(&small, 8));
        let bound = init_bound(&small);
        assert!(a.tensors().iter().all(|t| t.iter().all(|v| v.abs() <= bound)));
    }

    #[test]
    fn zero_params_give_output_bias() {
        for cell in [CellType::Gru, CellType::Tanh] {
            let cfg = tiny(cell);
            let mut p = EncoderParams::<f64>::zeros(&cfg);
            p.b_out = vec![0.25, -1.5];
            for t in [1usize, 4, 9] {
                let z = encode(&p, &cfg, &vec![0.0; t * 3]).unwrap();
                assert_eq!(z, vec![0.25, -1.5]);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let cfg = tiny(CellType::Gru);
        let p = init_params(&cfg, 0);
        assert!(matches!(
            encode(&p, &cfg, &[0.0f32; 4]),
            Err(AweError::DimensionMismatch { .. })
        ));
        assert!(encode(&p, &cfg, &[]).is_err());
    }

    #[test]
    fn truncation_to_max_frames() {
        let mut cfg = tiny(CellType::Gru);
        cfg.max_frames = 4;
        let p = init_params(&cfg, 1).cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_seq(&mut rng, 6, 3);
        let mut b = a.clone();
        for v in &mut b[12..] {
            *v += 10.0;
        }
        assert_eq!(encode(&p, &cfg, &a).unwrap(), encode(&p, &cfg, &b).unwrap());
        assert_eq!(encode(&p, &cfg, &a).unwrap(), encode(&p, &cfg, &a[..12]).unwrap());
    }

    #[test]
    fn prefixes_match_encoding_the_prefix() {
        let cfg = tiny(CellType::Gru);
        let p = init_params(&cfg, 3).cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = random_seq(&mut rng, 9, 3);
        let outs = encode_prefixes(&p, &cfg, &[&s[..]], &[vec![2, 5, 9]]).unwrap();
        for (l, z) in [2usize, 5, 9].iter().zip(&outs[0]) {
            let want = encode(&p, &cfg, &s[..l * 3]).unwrap();
            for (a, b) in z.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert!(encode_prefixes(&p, &cfg, &[&s[..]], &[vec![10]]).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let cfg = tiny(CellType::Gru);
        let p = init_params(&cfg, 5).cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = random_seq(&mut rng, 4, 3);
        let g = backward(&p, &cfg, &[&s[..]], &[vec![0.0, 0.0]]).unwrap();
        assert!(g.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn bias_gradient_is_unit_vector() {
        let cfg = tiny(CellType::Tanh);
        let p = init_params(&cfg, 5).cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = random_seq(&mut rng, 3, 3);
        let g = backward(&p, &cfg, &[&s[..]], &[vec![1.0, 0.0]]).unwrap();
        assert_eq!(g.b_out, vec![1.0, 0.0]);
    }
}
