//! Synthetic two-modality objectives.
//!
//! Two task families reproduce the gradient-heterogeneity regime at desk
//! scale:
//!
//! * `quadratic_pair`: per-sample loss `½‖θ − x‖²_H` with `x ~ N(μ_mod, σ²_mod·I)`
//!   and modality-specific curvature `H_mod`. The optima `μ_mod` are a shared
//!   centre plus a small per-modality offset, so the modalities conflict. The image modality is the noisy
//!   one, so `Tr(Σ_img)/Tr(Σ_text) = σ²_img/σ²_text` when curvatures match.
//! * `toy_token`: next-token prediction over a joint vocabulary with the
//!   bilinear model `logits = E·W·E[x]`. Image sequences follow near-uniform
//!   transitions (high entropy), text sequences follow steep Zipf transitions.
//!
//! Every random draw is a pure function of `(seed, stream)`: materialization,
//! initialization and each micro-batch use their own ChaCha stream.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::matrix::Matrix;
use crate::numerics::{self, SymMatrix};

const STREAM_BUILD: u64 = u64::MAX;
const STREAM_INIT: u64 = u64::MAX - 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Text,
    Mixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    QuadraticPair,
    ToyToken,
}

/// How modalities are assigned within the sample stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Routing {
    /// One modality per micro-batch (task routing).
    Step,
    /// Modality drawn per sample inside every micro-batch.
    Sample,
}

/// Flat task description; fields irrelevant to `kind` are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModalityTaskSpec {
    pub kind: TaskKind,
    /// Probability that a micro-batch (or sample) is an image one.
    pub mixing: f64,
    pub routing: Routing,
    pub seed: u64,

    // quadratic_pair
    pub rows: usize,
    pub cols: usize,
    /// Condition number of each curvature matrix.
    pub condition: f64,
    pub image_noise: f64,
    pub text_noise: f64,
    /// Scale of the optimum shared by both modalities.
    pub mean_scale: f64,
    /// Scale of each modality's offset from the shared optimum.
    pub mean_separation: f64,
    pub shared_curvature: bool,

    // toy_token
    pub vocab_image: usize,
    pub vocab_text: usize,
    pub embed_dim: usize,
    pub seq_len: usize,
    pub image_zipf: f64,
    pub text_zipf: f64,
    pub init_scale: f64,
}

impl Default for ModalityTaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::QuadraticPair,
            mixing: 0.5,
            routing: Routing::Step,
            seed: 0,
            rows: 4,
            cols: 2,
            condition: 10.0,
            image_noise: 0.1,
            text_noise: 0.001,
            mean_scale: 3.0,
            mean_separation: 0.3,
            shared_curvature: true,
            vocab_image: 256,
            vocab_text: 256,
            embed_dim: 32,
            seq_len: 16,
            image_zipf: 0.3,
            text_zipf: 1.5,
            init_scale: 0.1,
        }
    }
}

impl ModalityTaskSpec {
    pub fn toy_token() -> Self {
        Self {
            kind: TaskKind::ToyToken,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(msg));
        if !(0.0..=1.0).contains(&self.mixing) {
            return cfg(alloc::format!("mixing must lie in [0, 1], got {}", self.mixing));
        }
        match self.kind {
            TaskKind::QuadraticPair => {
                if self.rows == 0 || self.cols == 0 {
                    return cfg("quadratic_pair needs positive rows and cols".into());
                }
                if !(self.condition >= 1.0) {
                    return cfg(alloc::format!("condition must be ≥ 1, got {}", self.condition));
                }
                if !(self.image_noise >= 0.0 && self.text_noise >= 0.0) {
                    return cfg("noise variances must be nonnegative".into());
                }
            }
            TaskKind::ToyToken => {
                if self.vocab_image == 0 || self.vocab_text == 0 || self.embed_dim == 0 {
                    return cfg("toy_token needs positive vocab sizes and embed_dim".into());
                }
                if self.seq_len < 2 {
                    return cfg(alloc::format!("seq_len must be ≥ 2, got {}", self.seq_len));
                }
                if !(self.image_zipf >= 0.0 && self.text_zipf >= 0.0) {
                    return cfg("zipf exponents must be nonnegative".into());
                }
            }
        }
        Ok(())
    }
}

/// Sample payload of a micro-batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Samples {
    /// Draws `x` (column-major `vec` layout) for the quadratic task.
    Points(Vec<(Modality, Vec<f64>)>),
    /// Token sequences for the toy token task.
    Sequences(Vec<(Modality, Vec<usize>)>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MicroBatch {
    pub modality: Modality,
    pub samples: Samples,
    pub size: usize,
}

/// Losses and the averaged gradient of one micro-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    /// Mean loss over image samples (0 when there are none).
    pub loss_image: f64,
    /// Mean loss over text samples (0 when there are none).
    pub loss_text: f64,
    /// Mean loss over the whole micro-batch.
    pub loss: f64,
    pub image_weight: usize,
    pub text_weight: usize,
    pub grads: Vec<Matrix>,
}

/// Population losses per modality and their `mixing`-weighted total.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PopulationLoss {
    pub total: f64,
    pub image: f64,
    pub text: f64,
}

#[derive(Clone, Debug)]
struct Quadratic {
    h_image: Matrix,
    h_text: Matrix,
    mu_image: Vec<f64>,
    mu_text: Vec<f64>,
}

#[derive(Clone, Debug)]
struct Token {
    vocab: usize,
    /// Per context token, cumulative next-token distribution over the
    /// context's own modality block.
    cdf: Vec<Vec<f64>>,
    /// Per context token, next-token probabilities over the same block.
    probs: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
enum TaskData {
    Quadratic(Quadratic),
    Token(Token),
}

/// A materialized task.
#[derive(Clone, Debug)]
pub struct Task {
    spec: ModalityTaskSpec,
    data: TaskData,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_spd(rng: &mut ChaCha8Rng, d: usize, condition: f64) -> Result<Matrix> {
    let a = Matrix::from_fn(d, d, |_, _| normal(rng));
    let sym = a.add(&a.transpose())?.scale(0.5);
    let q = numerics::sym_eigh(&SymMatrix::new(sym)?)?.eigenvectors;
    let spectrum: Vec<f64> = (0..d)
        .map(|i| {
            let t = if d == 1 { 0.0 } else { i as f64 / (d - 1) as f64 };
            math::powf(condition, t)
        })
        .collect();
    let scaled = Matrix::from_fn(d, d, |i, j| q[(i, j)] * spectrum[j]);
    let mut h = scaled.matmul_t_unchecked(&q);
    h.symmetrize();
    Ok(h)
}

impl Task {
    pub fn new(spec: ModalityTaskSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng_for(spec.seed, STREAM_BUILD);
        let data = match spec.kind {
            TaskKind::QuadraticPair => {
                let d = spec.rows * spec.cols;
                let h_image = random_spd(&mut rng, d, spec.condition)?;
                let h_text = if spec.shared_curvature {
                    h_image.clone()
                } else {
                    random_spd(&mut rng, d, spec.condition)?
                };
                let center: Vec<f64> = (0..d).map(|_| spec.mean_scale * normal(&mut rng)).collect();
                let mut offset = |c: &f64| c + spec.mean_separation * normal(&mut rng);
                let mu_image = center.iter().map(&mut offset).collect();
                let mu_text = center.iter().map(&mut offset).collect();
                TaskData::Quadratic(Quadratic {
                    h_image,
                    h_text,
                    mu_image,
                    mu_text,
                })
            }
            TaskKind::ToyToken => {
                let vocab = spec.vocab_image + spec.vocab_text;
                let mut cdf = Vec::with_capacity(vocab);
                let mut probs = Vec::with_capacity(vocab);
                for ctx in 0..vocab {
                    let (n, s) = if ctx < spec.vocab_image {
                        (spec.vocab_image, spec.image_zipf)
                    } else {
                        (spec.vocab_text, spec.text_zipf)
                    };
                    // Zipf weights over a context-specific permutation of the block.
                    let mut order: Vec<usize> = (0..n).collect();
                    for i in (1..n).rev() {
                        let j = rng.random_range(0..=i);
                        order.swap(i, j);
                    }
                    let mut p = vec![0.0; n];
                    for (rank, &slot) in order.iter().enumerate() {
                        p[slot] = math::powf((rank + 1) as f64, -s);
                    }
                    let z: f64 = p.iter().sum();
                    p.iter_mut().for_each(|x| *x /= z);
                    let mut acc = 0.0;
                    let c: Vec<f64> = p
                        .iter()
                        .map(|x| {
                            acc += x;
                            acc
                        })
                        .collect();
                    cdf.push(c);
                    probs.push(p);
                }
                TaskData::Token(Token { vocab, cdf, probs })
            }
        };
        Ok(Self { spec, data })
    }

    pub fn spec(&self) -> &ModalityTaskSpec {
        &self.spec
    }

    /// Parameter names and shapes.
    pub fn param_shapes(&self) -> Vec<(String, (usize, usize))> {
        match &self.data {
            TaskData::Quadratic(_) => vec![("theta".into(), (self.spec.rows, self.spec.cols))],
            TaskData::Token(t) => vec![
                ("embed".into(), (t.vocab, self.spec.embed_dim)),
                ("mix".into(), (self.spec.embed_dim, self.spec.embed_dim)),
            ],
        }
    }

    /// Deterministic initial parameters.
    pub fn initial_params(&self) -> Vec<Matrix> {
        match &self.data {
            TaskData::Quadratic(_) => vec![Matrix::zeros(self.spec.rows, self.spec.cols)],
            TaskData::Token(t) => {
                let mut rng = rng_for(self.spec.seed, STREAM_INIT);
                let d = self.spec.embed_dim;
                let embed = Matrix::from_fn(t.vocab, d, |_, _| self.spec.init_scale * normal(&mut rng));
                vec![embed, Matrix::identity(d)]
            }
        }
    }

    /// Per-modality optima of the quadratic task (`μ_img`, `μ_text`).
    pub fn quadratic_means(&self) -> Option<(&[f64], &[f64])> {
        match &self.data {
            TaskData::Quadratic(q) => Some((&q.mu_image, &q.mu_text)),
            TaskData::Token(_) => None,
        }
    }

    /// Curvatures of the quadratic task (`H_img`, `H_text`).
    pub fn quadratic_curvatures(&self) -> Option<(&Matrix, &Matrix)> {
        match &self.data {
            TaskData::Quadratic(q) => Some((&q.h_image, &q.h_text)),
            TaskData::Token(_) => None,
        }
    }

    /// Samples (quadratic) or tokens (toy token) consumed by one micro-batch.
    pub fn units_per_micro_batch(&self, size: usize) -> u64 {
        match self.spec.kind {
            TaskKind::QuadraticPair => size as u64,
            TaskKind::ToyToken => (size * self.spec.seq_len) as u64,
        }
    }

    fn draw_modality(&self, rng: &mut ChaCha8Rng) -> Modality {
        if rng.random::<f64>() < self.spec.mixing {
            Modality::Image
        } else {
            Modality::Text
        }
    }

    /// Micro-batch number `index` of the stream; a pure function of
    /// `(seed, index)`.
    pub fn sample_micro_batch(&self, index: u64, size: usize) -> MicroBatch {
        let mut rng = rng_for(self.spec.seed, index);
        let batch_modality = match self.spec.routing {
            Routing::Step => self.draw_modality(&mut rng),
            Routing::Sample => Modality::Mixed,
        };
        let pick = |rng: &mut ChaCha8Rng| match batch_modality {
            Modality::Mixed => self.draw_modality(rng),
            m => m,
        };
        let samples = match &self.data {
            TaskData::Quadratic(q) => {
                let mut out = Vec::with_capacity(size);
                for _ in 0..size {
                    let m = pick(&mut rng);
                    let (mu, var) = match m {
                        Modality::Image => (&q.mu_image, self.spec.image_noise),
                        _ => (&q.mu_text, self.spec.text_noise),
                    };
                    let sd = math::sqrt(var);
                    let x = mu.iter().map(|&u| u + sd * normal(&mut rng)).collect();
                    out.push((m, x));
                }
                Samples::Points(out)
            }
            TaskData::Token(t) => {
                let mut out = Vec::with_capacity(size);
                for _ in 0..size {
                    let m = pick(&mut rng);
                    let (offset, n) = match m {
                        Modality::Image => (0, self.spec.vocab_image),
                        _ => (self.spec.vocab_image, self.spec.vocab_text),
                    };
                    let mut seq = Vec::with_capacity(self.spec.seq_len);
                    let mut cur = offset + rng.random_range(0..n);
                    seq.push(cur);
                    for _ in 1..self.spec.seq_len {
                        let u: f64 = rng.random();
                        let cdf = &t.cdf[cur];
                        let k = cdf.partition_point(|&c| c <= u).min(n - 1);
                        cur = offset + k;
                        seq.push(cur);
                    }
                    out.push((m, seq));
                }
                Samples::Sequences(out)
            }
        };
        MicroBatch {
            modality: batch_modality,
            samples,
            size,
        }
    }

    fn check_params(&self, params: &[Matrix]) -> Result<()> {
        let shapes = self.param_shapes();
        if params.len() != shapes.len() {
            return Err(Error::Validation(alloc::format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (p, (_, shape)) in params.iter().zip(&shapes) {
            p.ensure_shape("loss_and_grad", *shape)?;
        }
        Ok(())
    }

    /// Mean loss and gradient over a micro-batch.
    pub fn loss_and_grad(&self, params: &[Matrix], batch: &MicroBatch) -> Result<LossGrad> {
        self.check_params(params)?;
        let out = match (&self.data, &batch.samples) {
            (TaskData::Quadratic(q), Samples::Points(points)) => quadratic_loss_grad(q, &params[0], points)?,
            (TaskData::Token(t), Samples::Sequences(seqs)) => token_loss_grad(t, &params[0], &params[1], seqs)?,
            _ => return Err(Error::Task("micro-batch does not belong to this task".into())),
        };
        if !out.loss.is_finite() {
            return Err(Error::Task(alloc::format!(
                "non-finite loss {} in micro-batch of {} samples",
                out.loss,
                batch.size
            )));
        }
        Ok(out)
    }

    /// Exact expected loss per modality.
    ///
    /// Quadratic: `½(θ−μ)ᵀH(θ−μ) + ½σ²·Tr(H)`. Toy token: cross-entropy
    /// under a uniform context token of the modality and its true transition.
    pub fn population_loss(&self, params: &[Matrix]) -> Result<PopulationLoss> {
        self.check_params(params)?;
        let (image, text) = match &self.data {
            TaskData::Quadratic(q) => {
                let theta = params[0].vec();
                let f = |h: &Matrix, mu: &[f64], var: f64| -> Result<f64> {
                    let diff: Vec<f64> = theta.iter().zip(mu).map(|(a, b)| a - b).collect();
                    let hd = numerics::mat_vec(h, &diff)?;
                    Ok(0.5 * crate::matrix::dot_slices(&diff, &hd) + 0.5 * var * h.trace())
                };
                (
                    f(&q.h_image, &q.mu_image, self.spec.image_noise)?,
                    f(&q.h_text, &q.mu_text, self.spec.text_noise)?,
                )
            }
            TaskData::Token(t) => {
                let vi = self.spec.vocab_image;
                let img = token_population(t, &params[0], &params[1], 0, vi);
                let txt = token_population(t, &params[0], &params[1], vi, self.spec.vocab_text);
                (img, txt)
            }
        };
        let w = self.spec.mixing;
        Ok(PopulationLoss {
            total: w * image + (1.0 - w) * text,
            image,
            text,
        })
    }
}

fn quadratic_loss_grad(q: &Quadratic, theta: &Matrix, points: &[(Modality, Vec<f64>)]) -> Result<LossGrad> {
    let (rows, cols) = theta.shape();
    let t = theta.vec();
    let mut grad = vec![0.0; t.len()];
    let (mut li, mut lt, mut ni, mut nt) = (0.0, 0.0, 0usize, 0usize);
    for (m, x) in points {
        let h = match m {
            Modality::Image => &q.h_image,
            _ => &q.h_text,
        };
        let diff: Vec<f64> = t.iter().zip(x).map(|(a, b)| a - b).collect();
        let hd = numerics::mat_vec(h, &diff)?;
        let loss = 0.5 * crate::matrix::dot_slices(&diff, &hd);
        grad.iter_mut().zip(&hd).for_each(|(g, v)| *g += v);
        if *m == Modality::Image {
            li += loss;
            ni += 1;
        } else {
            lt += loss;
            nt += 1;
        }
    }
    let n = points.len().max(1) as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok(LossGrad {
        loss_image: if ni > 0 { li / ni as f64 } else { 0.0 },
        loss_text: if nt > 0 { lt / nt as f64 } else { 0.0 },
        loss: (li + lt) / n,
        image_weight: ni,
        text_weight: nt,
        grads: vec![Matrix::unvec(rows, cols, &grad)?],
    })
}

/// Logits `E·W·E[x]` and the intermediate `h = W·E[x]`.
fn token_forward(embed: &Matrix, mix: &Matrix, ctx: usize) -> (Vec<f64>, Vec<f64>) {
    let e = embed.row(ctx);
    let d = e.len();
    let h: Vec<f64> = (0..d).map(|i| crate::matrix::dot_slices(mix.row(i), e)).collect();
    let logits = (0..embed.rows())
        .map(|v| crate::matrix::dot_slices(embed.row(v), &h))
        .collect();
    (logits, h)
}

fn log_softmax_parts(logits: &[f64]) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits.iter().map(|&l| math::exp(l - max)).collect();
    let z: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= z);
    (max + math::ln(z), probs)
}

fn token_loss_grad(t: &Token, embed: &Matrix, mix: &Matrix, seqs: &[(Modality, Vec<usize>)]) -> Result<LossGrad> {
    let v = t.vocab;
    let d = embed.cols();
    // Predictions sharing a context token share logits, so aggregate target
    // counts per context first.
    let mut targets: Vec<Vec<(usize, f64)>> = vec![Vec::new(); v];
    let mut ctx_count = vec![0.0; v];
    let mut ctx_modality = vec![Modality::Text; v];
    let mut total = 0usize;
    let (mut ni, mut nt) = (0usize, 0usize);
    for (m, seq) in seqs {
        for w in seq.windows(2) {
            let (x, y) = (w[0], w[1]);
            if x >= v || y >= v {
                return Err(Error::Task(alloc::format!("token id out of range in sample {x}->{y}")));
            }
            ctx_count[x] += 1.0;
            ctx_modality[x] = *m;
            match targets[x].iter_mut().find(|(tok, _)| *tok == y) {
                Some((_, c)) => *c += 1.0,
                None => targets[x].push((y, 1.0)),
            }
            total += 1;
            if *m == Modality::Image {
                ni += 1;
            } else {
                nt += 1;
            }
        }
    }
    let n = total.max(1) as f64;
    let mut d_embed = Matrix::zeros(v, d);
    let mut d_mix = Matrix::zeros(d, d);
    let (mut li, mut lt) = (0.0, 0.0);
    for x in 0..v {
        let count = ctx_count[x];
        if count == 0.0 {
            continue;
        }
        let (logits, h) = token_forward(embed, mix, x);
        let (lse, probs) = log_softmax_parts(&logits);
        let mut loss = 0.0;
        // δ = count·p − target counts, scaled by 1/n
        let mut delta: Vec<f64> = probs.iter().map(|p| count * p / n).collect();
        for &(y, c) in &targets[x] {
            loss += c * (lse - logits[y]);
            delta[y] -= c / n;
        }
        if ctx_modality[x] == Modality::Image {
            li += loss;
        } else {
            lt += loss;
        }
        // dE_v += δ_v·h ; dh = Eᵀδ
        let mut dh = vec![0.0; d];
        for (vv, &dv) in delta.iter().enumerate() {
            if dv == 0.0 {
                continue;
            }
            let row = embed.row(vv);
            for k in 0..d {
                dh[k] += dv * row[k];
                d_embed[(vv, k)] += dv * h[k];
            }
        }
        // h = W·e_x: dW += dh·e_xᵀ, de_x += Wᵀ·dh
        let e = embed.row(x).to_vec();
        for i in 0..d {
            for j in 0..d {
                d_mix[(i, j)] += dh[i] * e[j];
                d_embed[(x, j)] += mix[(i, j)] * dh[i];
            }
        }
    }
    Ok(LossGrad {
        loss_image: if ni > 0 { li / ni as f64 } else { 0.0 },
        loss_text: if nt > 0 { lt / nt as f64 } else { 0.0 },
        loss: (li + lt) / n,
        image_weight: ni,
        text_weight: nt,
        grads: vec![d_embed, d_mix],
    })
}

fn token_population(t: &Token, embed: &Matrix, mix: &Matrix, offset: usize, n: usize) -> f64 {
    let mut total = 0.0;
    for x in offset..offset + n {
        let (logits, _) = token_forward(embed, mix, x);
        let (lse, _) = log_softmax_parts(&logits);
        let p = &t.probs[x];
        total += p
            .iter()
            .enumerate()
            .map(|(k, &pk)| pk * (lse - logits[offset + k]))
            .sum::<f64>();
    }
    total / n as f64
}

/// Sum over coordinates of the unbiased sample variance of the
/// micro-gradients of each modality. Micro-batches tagged
/// [`Modality::Mixed`] are ignored.
pub fn covariance_trace_estimate(grads: &[(Modality, &Matrix)]) -> Result<(f64, f64)> {
    let trace_of = |which: Modality| -> Result<f64> {
        let group: Vec<&Matrix> = grads.iter().filter(|(m, _)| *m == which).map(|(_, g)| *g).collect();
        if group.len() < 2 {
            return Err(Error::Validation(alloc::format!(
                "covariance trace needs ≥ 2 {which:?} micro-gradients, got {}",
                group.len()
            )));
        }
        let len = group[0].len();
        if group.iter().any(|g| g.len() != len) {
            return Err(Error::Validation("micro-gradients differ in size".into()));
        }
        let k = group.len() as f64;
        let mut mean = vec![0.0; len];
        for g in &group {
            mean.iter_mut().zip(g.as_slice()).for_each(|(m, x)| *m += x / k);
        }
        let mut ss = 0.0;
        for g in &group {
            ss += g
                .as_slice()
                .iter()
                .zip(&mean)
                .map(|(x, m)| (x - m) * (x - m))
                .sum::<f64>();
        }
        Ok(ss / (k - 1.0))
    };
    Ok((trace_of(Modality::Image)?, trace_of(Modality::Text)?))
}
