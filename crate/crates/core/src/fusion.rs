//! The fusing model and its query-proxy training loss.
//!
//! A small encoder-decoder transformer reads the `p` patch features of an
//! image as the source sequence and the whole-image feature as the single
//! target token; the decoder output is projected and L2-normalised into
//! one detail-preserving feature. Training needs no box labels: every batch
//! is scored against all class-prompt text features, and the fused feature
//! is pulled towards the best-matching patch similarity per class.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{clip_grad_value, AdamW, AdamWConfig, Graph, ParamStore, Tensor, TensorError, Var};

/// Divisor offset used when normalising the fused output.
pub const OUTPUT_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("invalid fusion config: {0}")]
    Config(String),
    #[error("dimension mismatch: model expects {expected}, got {got}")]
    Dim { expected: usize, got: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, FusionError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FuserKind {
    Transformer,
    /// Mean-pooled tokens through one linear map; ablation baseline.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub use_box_encoding: bool,
    pub ln_eps: f64,
    pub dropout: f64,
    pub kind: FuserKind,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self::with_dim(512)
    }
}

impl FusionConfig {
    /// Three encoder and three decoder layers, 8 heads, `ff_dim = 4 * dim`.
    pub fn with_dim(dim: usize) -> Self {
        Self {
            dim,
            enc_layers: 3,
            dec_layers: 3,
            heads: 8,
            ff_dim: 4 * dim,
            use_box_encoding: false,
            ln_eps: 1e-3,
            dropout: 0.0,
            kind: FuserKind::Transformer,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(FusionError::Config(format!("dim {} not divisible by heads {}", self.dim, self.heads)));
        }
        if self.kind == FuserKind::Transformer && (self.enc_layers == 0 || self.dec_layers == 0) {
            return Err(FusionError::Config("need at least one encoder and one decoder layer".into()));
        }
        if self.ff_dim == 0 {
            return Err(FusionError::Config("ff_dim must be >= 1".into()));
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 {
            return Err(FusionError::Config(format!("ln_eps must be > 0, got {}", self.ln_eps)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(FusionError::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

/// One image worth of fusion input.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionSample {
    pub image_id: u64,
    /// `p x d` patch features, row-major.
    pub patches: Vec<f64>,
    pub num_patches: usize,
    pub image: Vec<f64>,
    /// Normalised `(x0, y0, x1, y1)` per patch.
    pub boxes: Vec<[f64; 4]>,
}

impl FusionSample {
    pub fn patch(&self, i: usize) -> &[f64] {
        let d = self.image.len();
        &self.patches[i * d..(i + 1) * d]
    }
}

#[derive(Debug, Clone)]
pub struct FusionModel {
    pub config: FusionConfig,
    pub params: ParamStore,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.store.insert(format!("{name}.weight"), Tensor::new(vec![fan_in, fan_out], w).unwrap());
        self.store.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
    }

    fn norm(&mut self, name: &str, d: usize) {
        self.store.insert(format!("{name}.gamma"), Tensor::filled(&[d], 1.0));
        self.store.insert(format!("{name}.beta"), Tensor::zeros(&[d]));
    }

    fn attention(&mut self, name: &str, d: usize) {
        for part in ["q", "k", "v", "o"] {
            self.linear(&format!("{name}.{part}"), d, d);
        }
    }
}

/// Forward-pass context: graph, parameters and optional dropout RNG.
struct Ctx<'a> {
    g: &'a mut Graph,
    store: &'a ParamStore,
    cfg: &'a FusionConfig,
    dropout_rng: Option<&'a mut ChaCha8Rng>,
}

impl Ctx<'_> {
    fn linear(&mut self, x: Var, name: &str) -> Result<Var> {
        let w = self.g.param(self.store, &format!("{name}.weight"))?;
        let b = self.g.param(self.store, &format!("{name}.bias"))?;
        let y = self.g.matmul(x, w)?;
        Ok(self.g.add_bias(y, b)?)
    }

    fn norm(&mut self, x: Var, name: &str) -> Result<Var> {
        let gamma = self.g.param(self.store, &format!("{name}.gamma"))?;
        let beta = self.g.param(self.store, &format!("{name}.beta"))?;
        Ok(self.g.layer_norm(x, gamma, beta, self.cfg.ln_eps)?)
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        let p = self.cfg.dropout;
        let Some(rng) = self.dropout_rng.as_deref_mut() else { return Ok(x) };
        if p == 0.0 {
            return Ok(x);
        }
        let shape = self.g.shape(x).to_vec();
        let n = shape.iter().product();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        let m = self.g.constant(Tensor::new(shape, mask)?);
        Ok(self.g.mul(x, m)?)
    }

    /// `[b, n, d] -> [b * heads, n, d / heads]`
    fn split_heads(&mut self, x: Var) -> Result<Var> {
        let s = self.g.shape(x).to_vec();
        let (b, n, d) = (s[0], s[1], s[2]);
        let h = self.cfg.heads;
        let x = self.g.reshape(x, &[b, n, h, d / h])?;
        let x = self.g.permute(x, &[0, 2, 1, 3])?;
        Ok(self.g.reshape(x, &[b * h, n, d / h])?)
    }

    fn merge_heads(&mut self, x: Var, b: usize) -> Result<Var> {
        let s = self.g.shape(x).to_vec();
        let h = self.cfg.heads;
        let (n, dh) = (s[1], s[2]);
        let x = self.g.reshape(x, &[b, h, n, dh])?;
        let x = self.g.permute(x, &[0, 2, 1, 3])?;
        Ok(self.g.reshape(x, &[b, n, h * dh])?)
    }

    fn attention(&mut self, query: Var, memory: Var, name: &str) -> Result<Var> {
        let b = self.g.shape(query)[0];
        let q = self.linear(query, &format!("{name}.q"))?;
        let k = self.linear(memory, &format!("{name}.k"))?;
        let v = self.linear(memory, &format!("{name}.v"))?;
        let (q, k, v) = (self.split_heads(q)?, self.split_heads(k)?, self.split_heads(v)?);
        let out = self.g.scaled_dot_attention(q, k, v)?;
        let out = self.merge_heads(out, b)?;
        self.linear(out, &format!("{name}.o"))
    }

    fn feed_forward(&mut self, x: Var, name: &str) -> Result<Var> {
        let h = self.linear(x, &format!("{name}.ff1"))?;
        let h = self.g.relu(h);
        let h = self.dropout(h)?;
        self.linear(h, &format!("{name}.ff2"))
    }

    /// Post-norm residual block: `norm(x + dropout(f(x)))`.
    fn residual(&mut self, x: Var, delta: Var, norm: &str) -> Result<Var> {
        let delta = self.dropout(delta)?;
        let s = self.g.add(x, delta)?;
        self.norm(s, norm)
    }
}

impl FusionModel {
    /// Xavier-uniform weights, zero biases, unit layer-norm gains.
    pub fn new(config: FusionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let mut params = ParamStore::new();
        let mut init = Init { store: &mut params, rng: ChaCha8Rng::seed_from_u64(seed) };
        match config.kind {
            FuserKind::Linear => init.linear("linear", d, d),
            FuserKind::Transformer => {
                init.linear("input", d, d);
                if config.use_box_encoding {
                    init.linear("box", 4, d);
                }
                for i in 0..config.enc_layers {
                    init.attention(&format!("enc.{i}.attn"), d);
                    init.norm(&format!("enc.{i}.ln1"), d);
                    init.linear(&format!("enc.{i}.ff1"), d, config.ff_dim);
                    init.linear(&format!("enc.{i}.ff2"), config.ff_dim, d);
                    init.norm(&format!("enc.{i}.ln2"), d);
                }
                init.norm("enc.norm", d);
                for i in 0..config.dec_layers {
                    init.attention(&format!("dec.{i}.self"), d);
                    init.norm(&format!("dec.{i}.ln1"), d);
                    init.attention(&format!("dec.{i}.cross"), d);
                    init.norm(&format!("dec.{i}.ln2"), d);
                    init.linear(&format!("dec.{i}.ff1"), d, config.ff_dim);
                    init.linear(&format!("dec.{i}.ff2"), config.ff_dim, d);
                    init.norm(&format!("dec.{i}.ln3"), d);
                }
                init.norm("dec.norm", d);
                init.linear("output", d, d);
            }
        }
        Ok(Self { config, params })
    }

    /// Rebuilds a model from a config and stored parameters, checking that
    /// every expected parameter is present with the right shape.
    pub fn from_params(config: FusionConfig, params: ParamStore) -> Result<Self> {
        let template = Self::new(config.clone(), 0)?;
        for (name, t) in template.params.iter() {
            let got = params.get(name).ok_or_else(|| TensorError::UnknownParam(name.clone()))?;
            if got.shape() != t.shape() {
                return Err(TensorError::Shape { op: "load", lhs: t.shape().to_vec(), rhs: got.shape().to_vec() }.into());
            }
        }
        if params.len() != template.params.len() {
            return Err(FusionError::Config(format!(
                "checkpoint has {} parameters, model expects {}",
                params.len(),
                template.params.len()
            )));
        }
        Ok(Self { config, params })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    fn check_group(&self, samples: &[&FusionSample]) -> Result<usize> {
        let first = samples.first().ok_or(FusionError::Empty("batch"))?;
        let d = self.config.dim;
        let p = first.num_patches;
        if p == 0 {
            return Err(FusionError::Empty("patch list"));
        }
        for s in samples {
            if s.image.len() != d {
                return Err(FusionError::Dim { expected: d, got: s.image.len() });
            }
            if s.patches.len() != s.num_patches * d {
                return Err(FusionError::Dim { expected: s.num_patches * d, got: s.patches.len() });
            }
            if s.num_patches != p {
                return Err(FusionError::Config("samples in one group must share the patch count".into()));
            }
            if self.config.use_box_encoding && s.boxes.len() != p {
                return Err(FusionError::Config(format!("box encoding needs {p} boxes, got {}", s.boxes.len())));
            }
        }
        Ok(p)
    }

    /// Records the forward pass for a group of samples sharing the patch
    /// count and returns the `[b, d]` unit-norm fused features.
    pub fn forward(&self, g: &mut Graph, samples: &[&FusionSample], dropout_rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let p = self.check_group(samples)?;
        let b = samples.len();
        let d = self.config.dim;
        let mut patch_data = Vec::with_capacity(b * p * d);
        let mut image_data = Vec::with_capacity(b * d);
        for s in samples {
            patch_data.extend_from_slice(&s.patches);
            image_data.extend_from_slice(&s.image);
        }
        let patches = g.constant(Tensor::new(vec![b, p, d], patch_data)?);
        let image = g.constant(Tensor::new(vec![b, 1, d], image_data)?);
        let mut cx = Ctx { g, store: &self.params, cfg: &self.config, dropout_rng };

        let fused = match self.config.kind {
            FuserKind::Linear => {
                let tokens = cx.g.concat(&[patches, image], 1)?;
                let mean_w = Tensor::filled(&[b, 1, p + 1], 1.0 / (p + 1) as f64);
                let mean_w = cx.g.constant(mean_w);
                let pooled = cx.g.matmul(mean_w, tokens)?;
                cx.linear(pooled, "linear")?
            }
            FuserKind::Transformer => {
                let mut src = cx.linear(patches, "input")?;
                if self.config.use_box_encoding {
                    let boxes: Vec<f64> = samples
                        .iter()
                        .flat_map(|s| s.boxes.iter().flat_map(box_encoding))
                        .collect();
                    let boxes = cx.g.constant(Tensor::new(vec![b, p, 4], boxes)?);
                    let enc = cx.linear(boxes, "box")?;
                    src = cx.g.add(src, enc)?;
                }
                for i in 0..self.config.enc_layers {
                    let a = cx.attention(src, src, &format!("enc.{i}.attn"))?;
                    src = cx.residual(src, a, &format!("enc.{i}.ln1"))?;
                    let f = cx.feed_forward(src, &format!("enc.{i}"))?;
                    src = cx.residual(src, f, &format!("enc.{i}.ln2"))?;
                }
                let memory = cx.norm(src, "enc.norm")?;

                let mut tgt = cx.linear(image, "input")?;
                for i in 0..self.config.dec_layers {
                    let a = cx.attention(tgt, tgt, &format!("dec.{i}.self"))?;
                    tgt = cx.residual(tgt, a, &format!("dec.{i}.ln1"))?;
                    let c = cx.attention(tgt, memory, &format!("dec.{i}.cross"))?;
                    tgt = cx.residual(tgt, c, &format!("dec.{i}.ln2"))?;
                    let f = cx.feed_forward(tgt, &format!("dec.{i}"))?;
                    tgt = cx.residual(tgt, f, &format!("dec.{i}.ln3"))?;
                }
                let tgt = cx.norm(tgt, "dec.norm")?;
                cx.linear(tgt, "output")?
            }
        };
        let fused = cx.g.reshape(fused, &[b, d])?;
        Ok(cx.g.l2_normalize(fused, 1, OUTPUT_NORM_EPS)?)
    }

    /// Fused unit feature for one image.
    pub fn fuse(&self, sample: &FusionSample) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let v = self.forward(&mut g, &[sample], None)?;
        Ok(g.value(v).data().to_vec())
    }

    /// Fused features for many images, computed in groups of equal patch
    /// count. Output order follows the input.
    pub fn fuse_all(&self, samples: &[FusionSample], chunk: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = vec![Vec::new(); samples.len()];
        for (idx, group) in group_by_patch_count(samples.iter().enumerate().collect(), chunk.max(1)) {
            let mut g = Graph::new();
            let v = self.forward(&mut g, &group, None)?;
            let t = g.value(v);
            for (j, &i) in idx.iter().enumerate() {
                out[i] = t.row(j).to_vec();
            }
        }
        Ok(out)
    }
}

/// `(cx, cy, w, h)` of a normalised `(x0, y0, x1, y1)` box.
fn box_encoding(b: &[f64; 4]) -> [f64; 4] {
    [(b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0, b[2] - b[0], b[3] - b[1]]
}

/// Splits indexed samples into chunks of at most `chunk` sharing a patch
/// count, keeping first-seen order.
fn group_by_patch_count(items: Vec<(usize, &FusionSample)>, chunk: usize) -> Vec<(Vec<usize>, Vec<&FusionSample>)> {
    let mut by_p: BTreeMap<usize, Vec<(usize, &FusionSample)>> = BTreeMap::new();
    let mut order = Vec::new();
    for (i, s) in items {
        let e = by_p.entry(s.num_patches).or_default();
        if e.is_empty() {
            order.push(s.num_patches);
        }
        e.push((i, s));
    }
    let mut out = Vec::new();
    for p in order {
        for part in by_p[&p].chunks(chunk) {
            out.push((part.iter().map(|x| x.0).collect(), part.iter().map(|x| x.1).collect()));
        }
    }
    out
}

/// Query-proxy loss on the graph.
///
/// `fused` is `[b, d]`, `patches` `[b, p, d]`, `texts` `[t, d]`. With
/// `S_patch[t, b] = max_p <w_t, u_bp>` and `S_fused[t, b] = <w_t, v_b>`,
/// returns `mean((S_patch - S_fused)^2)`.
pub fn query_proxy_loss(g: &mut Graph, fused: Var, patches: Var, texts: Var) -> Result<Var> {
    let ps = g.shape(patches).to_vec();
    let ts = g.shape(texts).to_vec();
    if ps.len() != 3 || ts.len() != 2 {
        return Err(FusionError::Config(format!("expected [b,p,d] patches and [t,d] texts, got {ps:?} and {ts:?}")));
    }
    let target = patch_max_similarity(g, patches, texts)?;
    let ft = g.transpose(fused)?;
    let fused_sim = g.matmul(texts, ft)?;
    Ok(g.mse(target, fused_sim)?)
}

/// `[t, b]` matrix of `max_p <w_t, u_bp>`.
fn patch_max_similarity(g: &mut Graph, patches: Var, texts: Var) -> Result<Var> {
    let ps = g.shape(patches).to_vec();
    let (b, p, d) = (ps[0], ps[1], ps[2]);
    let t = g.shape(texts)[0];
    if t == 0 || p == 0 {
        return Err(FusionError::Empty("texts or patches"));
    }
    let flat = g.reshape(patches, &[b * p, d])?;
    let flat_t = g.transpose(flat)?;
    let sim = g.matmul(texts, flat_t)?;
    let sim = g.reshape(sim, &[t, b, p])?;
    Ok(g.max(sim, 2)?)
}

/// Loss value for plain buffers (`fused` `b x d`, `patches` `b x p x d`,
/// `texts` `t x d`, all row-major).
pub fn query_proxy_loss_value(fused: &Tensor, patches: &Tensor, texts: &Tensor) -> Result<f64> {
    if texts.is_empty() || patches.is_empty() {
        return Err(FusionError::Empty("texts or patches"));
    }
    let mut g = Graph::new();
    let f = g.constant(fused.clone());
    let p = g.constant(patches.clone());
    let t = g.constant(texts.clone());
    let l = query_proxy_loss(&mut g, f, p, t)?;
    Ok(g.value(l).item())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Optimizer steps between learning-rate decays.
    pub lr_step: usize,
    pub lr_gamma: f64,
    /// Linear warm-up length in optimizer steps.
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.003,
            weight_decay: 0.0,
            grad_clip: 1e-4,
            lr_step: 60,
            lr_gamma: 0.9,
            warmup_steps: 10,
            batch_size: 30,
            epochs: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Learning rate at optimizer step `step` (0-based): linear warm-up,
    /// then multiplicative decay every `lr_step` steps.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = if self.warmup_steps == 0 { 1.0 } else { ((step + 1) as f64 / self.warmup_steps as f64).min(1.0) };
        let decays = step.checked_div(self.lr_step).unwrap_or(0);
        self.lr * warm * self.lr_gamma.powi(decays as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(FusionError::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(FusionError::Config("batch_size must be >= 1".into()));
        }
        if self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return Err(FusionError::Config("grad_clip must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

impl TrainOutcome {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss\n");
        for (i, l) in self.epoch_losses.iter().enumerate() {
            s.push_str(&format!("{},{:.12e}\n", i + 1, l));
        }
        s
    }
}

/// Loss of one batch, grouping samples by patch count. The MSE over the
/// full `t x b` matrix is recovered by concatenating the groups.
pub fn batch_loss(
    model: &FusionModel,
    g: &mut Graph,
    batch: &[&FusionSample],
    texts: Var,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let d = model.config.dim;
    let items: Vec<(usize, &FusionSample)> = batch.iter().copied().enumerate().collect();
    let mut fused_parts = Vec::new();
    let mut target_parts = Vec::new();
    for (_, group) in group_by_patch_count(items, usize::MAX) {
        let fused = model.forward(g, &group, dropout_rng.as_deref_mut())?;
        let p = group[0].num_patches;
        let data: Vec<f64> = group.iter().flat_map(|s| s.patches.iter().copied()).collect();
        let patches = g.constant(Tensor::new(vec![group.len(), p, d], data)?);
        target_parts.push(patch_max_similarity(g, patches, texts)?);
        fused_parts.push(fused);
    }
    let (fused, target) = if fused_parts.len() == 1 {
        (fused_parts[0], target_parts[0])
    } else {
        (g.concat(&fused_parts, 0)?, g.concat(&target_parts, 1)?)
    };
    let ft = g.transpose(fused)?;
    let fused_sim = g.matmul(texts, ft)?;
    Ok(g.mse(target, fused_sim)?)
}

/// Trains `model` in place on `samples` with all `texts` as proxies.
pub fn train(model: &mut FusionModel, samples: &[FusionSample], texts: &[Vec<f64>], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(model, samples, texts, cfg, |_, _| {})
}

pub fn train_with_progress<F>(
    model: &mut FusionModel,
    samples: &[FusionSample],
    texts: &[Vec<f64>],
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(usize, f64),
{
    cfg.validate()?;
    if samples.is_empty() {
        return Err(FusionError::Empty("feature bank"));
    }
    if texts.is_empty() {
        return Err(FusionError::Empty("text bank"));
    }
    let d = model.config.dim;
    if let Some(bad) = texts.iter().find(|t| t.len() != d) {
        return Err(FusionError::Dim { expected: d, got: bad.len() });
    }
    if let Some(bad) = samples.iter().find(|s| s.image.len() != d) {
        return Err(FusionError::Dim { expected: d, got: bad.image.len() });
    }
    let text_tensor = Tensor::from_rows(texts)?;
    let mut opt = AdamW::new(AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..Default::default() })?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let use_dropout = model.config.dropout > 0.0;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&FusionSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let mut g = Graph::new();
            let texts = g.constant(text_tensor.clone());
            let loss = batch_loss(model, &mut g, &batch, texts, use_dropout.then_some(&mut dropout_rng))?;
            total += g.value(loss).item();
            batches += 1;
            let mut grads = g.backward(loss)?.params();
            clip_grad_value(&mut grads, cfg.grad_clip);
            opt.step(&mut model.params, &grads, cfg.lr_at(step))?;
            step += 1;
        }
        let mean = total / batches as f64;
        on_epoch(epoch, mean);
        epoch_losses.push(mean);
    }
    Ok(TrainOutcome { epoch_losses, steps: step })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn sample(rng: &mut ChaCha8Rng, id: u64, p: usize, d: usize) -> FusionSample {
        let patches: Vec<f64> = (0..p).flat_map(|_| unit(rng, d)).collect();
        FusionSample {
            image_id: id,
            image: patches[..d].to_vec(),
            patches,
            num_patches: p,
            boxes: (0..p).map(|i| [0.0, 0.0, 1.0 / (i + 1) as f64, 1.0 / (i + 1) as f64]).collect(),
        }
    }

    fn small_config(d: usize) -> FusionConfig {
        FusionConfig { heads: 4, enc_layers: 1, dec_layers: 1, ..FusionConfig::with_dim(d) }
    }

    #[test]
    fn config_validation() {
        assert!(FusionConfig { heads: 3, ..FusionConfig::with_dim(64) }.validate().is_err());
        assert!(FusionConfig { enc_layers: 0, ..FusionConfig::with_dim(64) }.validate().is_err());
        assert!(FusionConfig::with_dim(64).validate().is_ok());
        let cfg = FusionConfig::default();
        assert_eq!((cfg.enc_layers, cfg.dec_layers, cfg.heads, cfg.ff_dim), (3, 3, 8, 2048));
    }

    #[test]
    fn single_whole_image_patch_gives_unit_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = FusionModel::new(small_config(16), 0).unwrap();
        let s = sample(&mut rng, 0, 1, 16);
        let v = model.fuse(&s).unwrap();
        assert_eq!(v.len(), 16);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
    }

    #[test]
    fn dim_mismatch_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = FusionModel::new(small_config(16), 0).unwrap();
        let s = sample(&mut rng, 0, 3, 8);
        assert!(matches!(model.fuse(&s), Err(FusionError::Dim { expected: 16, got: 8 })));
    }

    #[test]
    fn fuse_all_matches_single_fuse() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = FusionModel::new(small_config(16), 3).unwrap();
        let samples: Vec<FusionSample> =
            (0..5).map(|i| sample(&mut rng, i, if i % 2 == 0 { 3 } else { 5 }, 16)).collect();
        let all = model.fuse_all(&samples, 2).unwrap();
        for (s, v) in samples.iter().zip(&all) {
            let single = model.fuse(s).unwrap();
            for (a, b) in single.iter().zip(v) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn orthonormal_loss_example() {
        let fused = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let patches = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let texts = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        assert_eq!(query_proxy_loss_value(&fused, &patches, &texts).unwrap(), 1.0);
    }

    #[test]
    fn single_patch_copy_has_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u: Vec<f64> = (0..4).flat_map(|_| unit(&mut rng, 8)).collect();
        let fused = Tensor::new(vec![4, 8], u.clone()).unwrap();
        let patches = Tensor::new(vec![4, 1, 8], u).unwrap();
        let texts = Tensor::new(vec![3, 8], (0..3).flat_map(|_| unit(&mut rng, 8)).collect()).unwrap();
        assert!(query_proxy_loss_value(&fused, &patches, &texts).unwrap().abs() < 1e-15);
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig { lr: 0.01, warmup_steps: 4, lr_step: 10, lr_gamma: 0.5, ..Default::default() };
        assert!((cfg.lr_at(0) - 0.0025).abs() < 1e-15);
        assert!((cfg.lr_at(3) - 0.01).abs() < 1e-15);
        assert!((cfg.lr_at(9) - 0.01).abs() < 1e-15);
        assert!((cfg.lr_at(10) - 0.005).abs() < 1e-15);
    }

    #[test]
    fn zero_epochs_leave_parameters_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut model = FusionModel::new(small_config(8), 0).unwrap();
        let before = model.params.clone();
        let samples: Vec<FusionSample> = (0..4).map(|i| sample(&mut rng, i, 3, 8)).collect();
        let texts = vec![unit(&mut rng, 8)];
        let out = train(&mut model, &samples, &texts, &TrainConfig { epochs: 0, ..Default::default() }).unwrap();
        assert!(out.epoch_losses.is_empty());
        assert_eq!(model.params, before);
    }

    #[test]
    fn train_rejects_empty_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model = FusionModel::new(small_config(8), 0).unwrap();
        let samples = vec![sample(&mut rng, 0, 2, 8)];
        assert!(train(&mut model, &[], &[unit(&mut rng, 8)], &TrainConfig::default()).is_err());
        assert!(train(&mut model, &samples, &[], &TrainConfig::default()).is_err());
        assert!(matches!(
            train(&mut model, &samples, &[vec![1.0; 4]], &TrainConfig::default()),
            Err(FusionError::Dim { .. })
        ));
    }

    #[test]
    fn box_encoding_changes_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = FusionConfig { use_box_encoding: true, ..small_config(8) };
        let model = FusionModel::new(cfg, 0).unwrap();
        let s = sample(&mut rng, 0, 3, 8);
        let mut moved = s.clone();
        moved.boxes[1] = [0.5, 0.5, 1.0, 1.0];
        assert_ne!(model.fuse(&s).unwrap(), model.fuse(&moved).unwrap());
    }

    #[test]
    fn linear_fuser_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = FusionConfig { kind: FuserKind::Linear, ..small_config(8) };
        let model = FusionModel::new(cfg, 0).unwrap();
        let v = model.fuse(&sample(&mut rng, 0, 4, 8)).unwrap();
        assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
