//! Small decoder-only transformer: causal self-attention, pre-norm
//! residual blocks, learned positional embeddings, GELU feedforward.
//! Supports per-head attention capture, LoRA adapters on the four
//! attention projections, a graph-building forward for training, and a
//! KV-cached plain-math forward for generation and evaluation.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand_core::RngCore;

use crate::attention::AttentionTensor;
use crate::rng;
use crate::tensor::{matmul_raw, Tensor, TensorError};

const MASK_NEG: f64 = -1e30;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    SequenceTooLong { len: usize, max: usize },
    TokenOutOfVocab { position: usize, id: u32 },
    DuplicateAdapter { target: ProjTarget },
    InvalidRank { rank: usize, dim: usize },
    EmptyTargets,
    InvalidArg(&'static str),
    Tensor(TensorError),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::SequenceTooLong { len, max } => {
                write!(f, "sequence of {len} tokens exceeds max length {max}")
            }
            ModelError::TokenOutOfVocab { position, id } => {
                write!(f, "token id {id} at position {position} out of vocabulary")
            }
            ModelError::DuplicateAdapter { target } => {
                write!(f, "adapter already attached to {}", target.as_str())
            }
            ModelError::InvalidRank { rank, dim } => {
                write!(f, "lora rank {rank} invalid for model dim {dim}")
            }
            ModelError::EmptyTargets => write!(f, "lora targets must be non-empty"),
            ModelError::InvalidArg(s) => write!(f, "invalid argument: {s}"),
            ModelError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Tensor(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjTarget {
    KProj,
    QProj,
    VProj,
    OProj,
}

impl ProjTarget {
    pub const ALL: [ProjTarget; 4] = [
        ProjTarget::KProj,
        ProjTarget::QProj,
        ProjTarget::VProj,
        ProjTarget::OProj,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ProjTarget::KProj => "k_proj",
            ProjTarget::QProj => "q_proj",
            ProjTarget::VProj => "v_proj",
            ProjTarget::OProj => "o_proj",
        }
    }

    pub fn parse(s: &str) -> Option<ProjTarget> {
        Self::ALL.iter().copied().find(|t| t.as_str() == s)
    }

    fn index(&self) -> usize {
        match self {
            ProjTarget::KProj => 0,
            ProjTarget::QProj => 1,
            ProjTarget::VProj => 2,
            ProjTarget::OProj => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            self.layers,
            self.heads,
            self.model_dim,
            self.ffn_dim,
            self.vocab_size,
            self.max_seq_len,
        ];
        if dims.contains(&0) {
            return Err(ModelError::InvalidArg("all dimensions must be >= 1"));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(ModelError::InvalidArg("model_dim must divide by heads"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    /// Desk-scale "teacher" role.
    pub fn teacher_default(seed: u64) -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 4,
            model_dim: 64,
            ffn_dim: 256,
            vocab_size: crate::tokenizer::VOCAB_SIZE,
            max_seq_len: 384,
            seed,
        }
    }

    /// Desk-scale "student" role.
    pub fn student_default(seed: u64) -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 2,
            model_dim: 32,
            ffn_dim: 128,
            vocab_size: crate::tokenizer::VOCAB_SIZE,
            max_seq_len: 384,
            seed,
        }
    }
}

/// Rank-r factor pair for one attention projection. The effective update
/// is `(lora_alpha / rank) · B·A`, added to the frozen base projection.
pub struct LoraAdapter {
    pub target: ProjTarget,
    pub rank: usize,
    pub lora_alpha: f64,
    /// `[rank, model_dim]`, Gaussian-initialized.
    pub a: Tensor,
    /// `[model_dim, rank]`, zero-initialized so attachment is a no-op.
    pub b: Tensor,
}

impl LoraAdapter {
    pub fn scaling(&self) -> f64 {
        self.lora_alpha / self.rank as f64
    }

    /// The dense `[d, d]` update matrix `(lora_alpha / rank) · B·A`.
    pub fn update_matrix(&self) -> Tensor {
        
        self
            .b
            .detach()
            .matmul(&self.a.detach())
            .expect("factor shapes are construction-checked")
            .scale(self.scaling())
    }
}

struct Layer {
    attn_norm_g: Tensor,
    attn_norm_b: Tensor,
    // [d, d] each, applied as y = x·W
    projections: [Tensor; 4],
    lora: [Option<LoraAdapter>; 4],
    ffn_norm_g: Tensor,
    ffn_norm_b: Tensor,
    ffn_up_w: Tensor,
    ffn_up_b: Tensor,
    ffn_down_w: Tensor,
    ffn_down_b: Tensor,
}

pub struct Transformer {
    pub config: ModelConfig,
    tok_emb: Tensor,
    pos_emb: Tensor,
    layers: Vec<Layer>,
    final_norm_g: Tensor,
    final_norm_b: Tensor,
    lm_head: Tensor,
}

fn randn_tensor(rng: &mut impl RngCore, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng::gaussian(rng) * std).collect();
    Tensor::param(data, shape).expect("shape/count agree by construction")
}

fn param_zeros(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::param(vec![0.0; n], shape).unwrap()
}

fn param_ones(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::param(vec![1.0; n], shape).unwrap()
}

impl Transformer {
    pub fn new(config: ModelConfig) -> Result<Transformer, ModelError> {
        config.validate()?;
        let d = config.model_dim;
        let f = config.ffn_dim;
        let mut rng = rng::seeded(config.seed);
        let std = 0.02;
        let tok_emb = randn_tensor(&mut rng, &[config.vocab_size, d], std);
        let pos_emb = randn_tensor(&mut rng, &[config.max_seq_len, d], std);
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            layers.push(Layer {
                attn_norm_g: param_ones(&[d]),
                attn_norm_b: param_zeros(&[d]),
                projections: [
                    randn_tensor(&mut rng, &[d, d], std),
                    randn_tensor(&mut rng, &[d, d], std),
                    randn_tensor(&mut rng, &[d, d], std),
                    randn_tensor(&mut rng, &[d, d], std),
                ],
                lora: [None, None, None, None],
                ffn_norm_g: param_ones(&[d]),
                ffn_norm_b: param_zeros(&[d]),
                ffn_up_w: randn_tensor(&mut rng, &[d, f], std),
                ffn_up_b: param_zeros(&[f]),
                ffn_down_w: randn_tensor(&mut rng, &[f, d], std),
                ffn_down_b: param_zeros(&[d]),
            });
        }
        let final_norm_g = param_ones(&[d]);
        let final_norm_b = param_zeros(&[d]);
        let lm_head = randn_tensor(&mut rng, &[d, config.vocab_size], std);
        Ok(Transformer {
            config,
            tok_emb,
            pos_emb,
            layers,
            final_norm_g,
            final_norm_b,
            lm_head,
        })
    }

    /// All base (non-adapter) tensors with stable checkpoint names.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            (String::from("tok_emb"), self.tok_emb.clone()),
            (String::from("pos_emb"), self.pos_emb.clone()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn_norm.gamma"), l.attn_norm_g.clone()));
            out.push((format!("layers.{i}.attn_norm.beta"), l.attn_norm_b.clone()));
            for t in ProjTarget::ALL {
                out.push((
                    format!("layers.{i}.{}", t.as_str()),
                    l.projections[t.index()].clone(),
                ));
            }
            out.push((format!("layers.{i}.ffn_norm.gamma"), l.ffn_norm_g.clone()));
            out.push((format!("layers.{i}.ffn_norm.beta"), l.ffn_norm_b.clone()));
            out.push((format!("layers.{i}.ffn_up.weight"), l.ffn_up_w.clone()));
            out.push((format!("layers.{i}.ffn_up.bias"), l.ffn_up_b.clone()));
            out.push((format!("layers.{i}.ffn_down.weight"), l.ffn_down_w.clone()));
            out.push((format!("layers.{i}.ffn_down.bias"), l.ffn_down_b.clone()));
        }
        out.push((String::from("final_norm.gamma"), self.final_norm_g.clone()));
        out.push((String::from("final_norm.beta"), self.final_norm_b.clone()));
        out.push((String::from("lm_head"), self.lm_head.clone()));
        out
    }

    /// Adapter tensors with stable checkpoint names; empty when detached.
    pub fn named_lora_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            for t in ProjTarget::ALL {
                if let Some(ad) = &l.lora[t.index()] {
                    out.push((format!("layers.{i}.{}.lora_a", t.as_str()), ad.a.clone()));
                    out.push((format!("layers.{i}.{}.lora_b", t.as_str()), ad.b.clone()));
                }
            }
        }
        out
    }

    pub fn has_lora(&self) -> bool {
        self.layers
            .iter()
            .any(|l| l.lora.iter().any(|a| a.is_some()))
    }

    pub fn lora_spec(&self) -> Option<(usize, f64, Vec<ProjTarget>)> {
        for l in &self.layers {
            for t in ProjTarget::ALL {
                if let Some(ad) = &l.lora[t.index()] {
                    let targets: Vec<ProjTarget> = ProjTarget::ALL
                        .iter()
                        .copied()
                        .filter(|t| l.lora[t.index()].is_some())
                        .collect();
                    return Some((ad.rank, ad.lora_alpha, targets));
                }
            }
        }
        None
    }

    /// Parameters the optimizer should update: adapters when attached,
    /// otherwise every base tensor.
    pub fn trainable_tensors(&self) -> Vec<Tensor> {
        if self.has_lora() {
            self.named_lora_tensors().into_iter().map(|(_, t)| t).collect()
        } else {
            self.named_tensors().into_iter().map(|(_, t)| t).collect()
        }
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Independent copy sharing no storage with `self`; adapters (when
    /// attached) are copied too, including their current values.
    pub fn deep_clone(&self) -> Transformer {
        let mut out = Transformer::new(self.config).expect("config was validated");
        for ((_, src), (_, dst)) in self.named_tensors().iter().zip(out.named_tensors()) {
            let v = src.to_vec();
            dst.with_data_mut(|d| d.copy_from_slice(&v));
        }
        if let Some((rank, alpha, targets)) = self.lora_spec() {
            out.attach_lora(rank, alpha, &targets, self.config.seed)
                .expect("spec came from a valid model");
            for ((_, src), (_, dst)) in
                self.named_lora_tensors().iter().zip(out.named_lora_tensors())
            {
                let v = src.to_vec();
                dst.with_data_mut(|d| d.copy_from_slice(&v));
            }
        }
        out
    }

    /// Attach zero-update adapters to `targets` in every layer and freeze
    /// the base weights.
    pub fn attach_lora(
        &mut self,
        rank: usize,
        lora_alpha: f64,
        targets: &[ProjTarget],
        seed: u64,
    ) -> Result<(), ModelError> {
        if targets.is_empty() {
            return Err(ModelError::EmptyTargets);
        }
        let d = self.config.model_dim;
        if rank == 0 || rank > d {
            return Err(ModelError::InvalidRank { rank, dim: d });
        }
        for (i, &t) in targets.iter().enumerate() {
            if targets[..i].contains(&t) {
                return Err(ModelError::DuplicateAdapter { target: t });
            }
        }
        for l in &self.layers {
            for &t in targets {
                if l.lora[t.index()].is_some() {
                    return Err(ModelError::DuplicateAdapter { target: t });
                }
            }
        }
        let mut rng = rng::seeded(seed);
        for l in &mut self.layers {
            for &t in targets {
                let a = randn_tensor(&mut rng, &[rank, d], 0.02);
                let b = param_zeros(&[d, rank]);
                l.lora[t.index()] = Some(LoraAdapter {
                    target: t,
                    rank,
                    lora_alpha,
                    a,
                    b,
                });
            }
        }
        for (_, t) in self.named_tensors() {
            t.set_requires_grad(false);
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<(), ModelError> {
        if tokens.len() > self.config.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        for (position, &id) in tokens.iter().enumerate() {
            if id as usize >= self.config.vocab_size {
                return Err(ModelError::TokenOutOfVocab { position, id });
            }
        }
        Ok(())
    }

    fn project(&self, layer: usize, target: ProjTarget, x: &Tensor) -> Tensor {
        let l = &self.layers[layer];
        let base = x
            .matmul(&l.projections[target.index()])
            .expect("projection shapes fixed at construction");
        match &l.lora[target.index()] {
            None => base,
            Some(ad) => {
                let low = x
                    .matmul(&ad.a.permute(&[1, 0]))
                    .expect("lora A shape")
                    .matmul(&ad.b.permute(&[1, 0]))
                    .expect("lora B shape")
                    .scale(ad.scaling());
                base.add(&low)
            }
        }
    }

    /// Graph-building forward pass over a full sequence. Returns logits
    /// `[N, vocab]` and, when requested, the post-softmax attention
    /// weights exactly as used in the pass.
    pub fn forward(
        &self,
        tokens: &[u32],
        capture_attention: bool,
    ) -> Result<(Tensor, Option<AttentionTensor>), ModelError> {
        self.check_tokens(tokens)?;
        if tokens.is_empty() {
            return Err(ModelError::InvalidArg("empty token sequence"));
        }
        let n = tokens.len();
        let d = self.config.model_dim;
        let h = self.config.heads;
        let dh = self.config.head_dim();
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();

        let mut mask = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                mask[i * n + j] = MASK_NEG;
            }
        }
        let mask = Tensor::from_vec(mask, &[n, n]).unwrap();
        let scale = 1.0 / libm::sqrt(dh as f64);

        let mut capture = if capture_attention {
            Some(Vec::with_capacity(self.config.layers * h * n * n))
        } else {
            None
        };

        let mut x = self
            .tok_emb
            .embedding(&ids)
            .add(&self.pos_emb.slice_rows(0, n));
        for li in 0..self.config.layers {
            let l = &self.layers[li];
            let hn = x.layer_norm(&l.attn_norm_g, &l.attn_norm_b, LN_EPS);
            let q = self.project(li, ProjTarget::QProj, &hn);
            let k = self.project(li, ProjTarget::KProj, &hn);
            let v = self.project(li, ProjTarget::VProj, &hn);
            // [N,d] -> [H,N,dh]
            let qh = q.reshape(&[n, h, dh]).permute(&[1, 0, 2]);
            let kh = k.reshape(&[n, h, dh]).permute(&[1, 2, 0]); // [H,dh,N]
            let vh = v.reshape(&[n, h, dh]).permute(&[1, 0, 2]);
            let scores = qh.matmul(&kh)?.scale(scale).add(&mask);
            let attn = scores.softmax(2, 1.0)?;
            if let Some(buf) = capture.as_mut() {
                buf.extend_from_slice(&attn.to_vec());
            }
            let ctx = attn
                .matmul(&vh)?
                .permute(&[1, 0, 2])
                .reshape(&[n, d]);
            let attn_out = self.project(li, ProjTarget::OProj, &ctx);
            x = x.add(&attn_out);
            let hn2 = x.layer_norm(&l.ffn_norm_g, &l.ffn_norm_b, LN_EPS);
            let up = hn2.matmul(&l.ffn_up_w)?.add(&l.ffn_up_b).gelu();
            let down = up.matmul(&l.ffn_down_w)?.add(&l.ffn_down_b);
            x = x.add(&down);
        }
        let xf = x.layer_norm(&self.final_norm_g, &self.final_norm_b, LN_EPS);
        let logits = xf.matmul(&self.lm_head)?;
        let attn = capture.map(|buf| AttentionTensor::new(self.config.layers, h, n, buf)
                    .expect("capture buffer sized by construction"));
        Ok((logits, attn))
    }

    // ── plain-math inference with a KV cache ─────────────────────────

    pub fn new_cache(&self) -> KvCache {
        KvCache {
            k: vec![Vec::new(); self.config.layers],
            v: vec![Vec::new(); self.config.layers],
            len: 0,
        }
    }

    /// Feed `new_tokens` after whatever the cache already holds; returns
    /// logits for each new position, row-major `[new_n, vocab]`.
    pub fn infer_extend(
        &self,
        new_tokens: &[u32],
        cache: &mut KvCache,
    ) -> Result<Vec<f64>, ModelError> {
        self.infer_internal(new_tokens, cache, None)
    }

    /// Full-sequence inference with attention capture (fresh cache).
    pub fn infer_full_with_attention(
        &self,
        tokens: &[u32],
    ) -> Result<(Vec<f64>, AttentionTensor), ModelError> {
        let n = tokens.len();
        let mut cache = self.new_cache();
        let mut buf = vec![0.0; self.config.layers * self.config.heads * n * n];
        let logits = self.infer_internal(tokens, &mut cache, Some((&mut buf, n)))?;
        let attn = AttentionTensor::new(self.config.layers, self.config.heads, n, buf)
            .expect("buffer sized above");
        Ok((logits, attn))
    }

    fn infer_internal(
        &self,
        new_tokens: &[u32],
        cache: &mut KvCache,
        mut capture: Option<(&mut Vec<f64>, usize)>,
    ) -> Result<Vec<f64>, ModelError> {
        if new_tokens.is_empty() {
            return Err(ModelError::InvalidArg("empty token sequence"));
        }
        let total = cache.len + new_tokens.len();
        if total > self.config.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: total,
                max: self.config.max_seq_len,
            });
        }
        for (position, &id) in new_tokens.iter().enumerate() {
            if id as usize >= self.config.vocab_size {
                return Err(ModelError::TokenOutOfVocab {
                    position: cache.len + position,
                    id,
                });
            }
        }
        let d = self.config.model_dim;
        let f = self.config.ffn_dim;
        let nh = self.config.heads;
        let dh = self.config.head_dim();
        let vsz = self.config.vocab_size;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let tok_emb = self.tok_emb.to_vec();
        let pos_emb = self.pos_emb.to_vec();
        let lm_head = self.lm_head.to_vec();

        let mut out = Vec::with_capacity(new_tokens.len() * vsz);
        for &tok in new_tokens {
            let t = cache.len;
            let mut x: Vec<f64> = (0..d)
                .map(|i| tok_emb[tok as usize * d + i] + pos_emb[t * d + i])
                .collect();
            for (li, layer) in self.layers.iter().enumerate() {
                let hn = layer_norm_vec(&x, &layer.attn_norm_g.to_vec(), &layer.attn_norm_b.to_vec());
                let q = self.project_vec(layer, ProjTarget::QProj, &hn);
                let k = self.project_vec(layer, ProjTarget::KProj, &hn);
                let v = self.project_vec(layer, ProjTarget::VProj, &hn);
                cache.k[li].extend_from_slice(&k);
                cache.v[li].extend_from_slice(&v);
                let keys = &cache.k[li];
                let vals = &cache.v[li];
                let mut ctx = vec![0.0; d];
                for hd in 0..nh {
                    let qh = &q[hd * dh..(hd + 1) * dh];
                    // scores over keys 0..=t for this head
                    let mut row = Vec::with_capacity(t + 1);
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..=t {
                        let kj = &keys[j * d + hd * dh..j * d + (hd + 1) * dh];
                        let mut s = 0.0;
                        for p in 0..dh {
                            s += qh[p] * kj[p];
                        }
                        s *= scale;
                        if s > mx {
                            mx = s;
                        }
                        row.push(s);
                    }
                    let mut z = 0.0;
                    for s in row.iter_mut() {
                        *s = libm::exp(*s - mx);
                        z += *s;
                    }
                    for s in row.iter_mut() {
                        *s /= z;
                    }
                    if let Some((buf, n_stride)) = capture.as_mut() {
                        let base = ((li * nh + hd) * *n_stride + t) * *n_stride;
                        buf[base..base + t + 1].copy_from_slice(&row);
                    }
                    let ch = &mut ctx[hd * dh..(hd + 1) * dh];
                    for (j, &a) in row.iter().enumerate() {
                        let vj = &vals[j * d + hd * dh..j * d + (hd + 1) * dh];
                        for p in 0..dh {
                            ch[p] += a * vj[p];
                        }
                    }
                }
                let attn_out = self.project_vec(layer, ProjTarget::OProj, &ctx);
                for i in 0..d {
                    x[i] += attn_out[i];
                }
                let hn2 = layer_norm_vec(&x, &layer.ffn_norm_g.to_vec(), &layer.ffn_norm_b.to_vec());
                let mut up = matvec(&hn2, &layer.ffn_up_w.to_vec(), d, f);
                let up_b = layer.ffn_up_b.to_vec();
                for i in 0..f {
                    up[i] += up_b[i];
                    up[i] = gelu_scalar(up[i]);
                }
                let down = matvec(&up, &layer.ffn_down_w.to_vec(), f, d);
                let down_b = layer.ffn_down_b.to_vec();
                for i in 0..d {
                    x[i] += down[i] + down_b[i];
                }
            }
            let xf = layer_norm_vec(&x, &self.final_norm_g.to_vec(), &self.final_norm_b.to_vec());
            let logits = matvec(&xf, &lm_head, d, vsz);
            out.extend_from_slice(&logits);
            cache.len += 1;
        }
        Ok(out)
    }

    fn project_vec(&self, layer: &Layer, target: ProjTarget, x: &[f64]) -> Vec<f64> {
        let d = self.config.model_dim;
        let w = layer.projections[target.index()].to_vec();
        let mut y = matvec(x, &w, d, d);
        if let Some(ad) = &layer.lora[target.index()] {
            let r = ad.rank;
            let a = ad.a.to_vec(); // [r, d]
            let b = ad.b.to_vec(); // [d, r]
            let mut low = vec![0.0; r];
            for p in 0..d {
                let xv = x[p];
                for ri in 0..r {
                    low[ri] += xv * a[ri * d + p];
                }
            }
            let s = ad.scaling();
            let mut upd = vec![0.0; d];
            for ri in 0..r {
                let lv = low[ri];
                for j in 0..d {
                    upd[j] += lv * b[j * r + ri];
                }
            }
            for j in 0..d {
                y[j] += upd[j] * s;
            }
        }
        y
    }

    /// Autoregressive continuation. Stops at EOS or after
    /// `max_new_tokens`, whichever comes first. Returns the generated
    /// tokens and the logits row (full vocabulary) that produced each.
    pub fn generate_with_logits(
        &self,
        prompt: &[u32],
        max_new_tokens: usize,
        decode: Decode,
    ) -> Result<(Vec<u32>, Vec<f64>), ModelError> {
        if max_new_tokens == 0 {
            return Err(ModelError::InvalidArg("max_new_tokens must be >= 1"));
        }
        if prompt.is_empty() {
            return Err(ModelError::InvalidArg("empty prompt"));
        }
        let vsz = self.config.vocab_size;
        let mut cache = self.new_cache();
        let logits = self.infer_extend(prompt, &mut cache)?;
        let mut last: Vec<f64> = logits[(prompt.len() - 1) * vsz..].to_vec();
        let mut rng = match decode {
            Decode::Greedy => None,
            Decode::Sampled { seed } => Some(rng::seeded(seed)),
        };
        let mut tokens = Vec::new();
        let mut step_logits = Vec::new();
        for _ in 0..max_new_tokens {
            let next = match rng.as_mut() {
                None => argmax(&last) as u32,
                Some(r) => sample_from_logits(&last, r),
            };
            tokens.push(next);
            step_logits.extend_from_slice(&last);
            if next == crate::tokenizer::EOS {
                break;
            }
            if cache.len >= self.config.max_seq_len {
                break;
            }
            last = self.infer_extend(&[next], &mut cache)?;
        }
        Ok((tokens, step_logits))
    }

    pub fn generate(
        &self,
        prompt: &[u32],
        max_new_tokens: usize,
        decode: Decode,
    ) -> Result<Vec<u32>, ModelError> {
        Ok(self.generate_with_logits(prompt, max_new_tokens, decode)?.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decode {
    Greedy,
    Sampled { seed: u64 },
}

pub struct KvCache {
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    len: usize,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn sample_from_logits(logits: &[f64], rng: &mut impl RngCore) -> u32 {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|&l| libm::exp(l - mx)).collect();
    let z: f64 = weights.iter().sum();
    let u = rng::uniform(rng) * z;
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i as u32;
        }
    }
    (logits.len() - 1) as u32
}

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

fn layer_norm_vec(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let d = x.len();
    let mu: f64 = x.iter().sum::<f64>() / d as f64;
    let var: f64 = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
    let is = 1.0 / libm::sqrt(var + LN_EPS);
    (0..d).map(|i| (x[i] - mu) * is * gamma[i] + beta[i]).collect()
}

fn matvec(x: &[f64], w: &[f64], input: usize, output: usize) -> Vec<f64> {
    let mut y = vec![0.0; output];
    matmul_raw(x, w, 1, input, output, &mut y);
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(seed: u64) -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 2,
            model_dim: 16,
            ffn_dim: 32,
            vocab_size: crate::tokenizer::VOCAB_SIZE,
            max_seq_len: 32,
            seed,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config(0);
        c.model_dim = 15;
        assert!(c.validate().is_err());
        c.model_dim = 16;
        assert!(c.validate().is_ok());
        c.layers = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn single_token_attention_is_all_ones() {
        let m = Transformer::new(tiny_config(1)).unwrap();
        let (_, attn) = m.forward(&[5], true).unwrap();
        let attn = attn.unwrap();
        for l in 0..2 {
            for h in 0..2 {
                assert_eq!(attn.get(l, h, 0, 0), 1.0);
            }
        }
    }

    #[test]
    fn captured_rows_are_stochastic_and_causal() {
        let m = Transformer::new(tiny_config(2)).unwrap();
        let tokens: Vec<u32> = crate::tokenizer::encode("abc 12 def");
        let (_, attn) = m.forward(&tokens, true).unwrap();
        assert!(attn.unwrap().check_invariants(1e-6));
    }

    #[test]
    fn capture_flag_does_not_change_logits() {
        let m = Transformer::new(tiny_config(3)).unwrap();
        let tokens: Vec<u32> = crate::tokenizer::encode("2+2=?");
        let (a, _) = m.forward(&tokens, false).unwrap();
        let (b, _) = m.forward(&tokens, true).unwrap();
        let (av, bv) = (a.to_vec(), b.to_vec());
        assert_eq!(av.len(), bv.len());
        for (x, y) in av.iter().zip(&bv) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn infer_path_matches_graph_forward() {
        let m = Transformer::new(tiny_config(4)).unwrap();
        let tokens: Vec<u32> = crate::tokenizer::encode("abc + 12 = x");
        let (graph_logits, _) = m.forward(&tokens, false).unwrap();
        let mut cache = m.new_cache();
        let infer_logits = m.infer_extend(&tokens, &mut cache).unwrap();
        let gv = graph_logits.to_vec();
        assert_eq!(gv.len(), infer_logits.len());
        for (a, b) in gv.iter().zip(&infer_logits) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn infer_capture_matches_graph_capture() {
        let m = Transformer::new(tiny_config(12)).unwrap();
        let tokens: Vec<u32> = crate::tokenizer::encode("hello 7");
        let (_, graph_attn) = m.forward(&tokens, true).unwrap();
        let (_, infer_attn) = m.infer_full_with_attention(&tokens).unwrap();
        let ga = graph_attn.unwrap();
        for (a, b) in ga.raw().iter().zip(infer_attn.raw()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn causality_prefix_logits_unchanged_by_suffix_perturbation() {
        let m = Transformer::new(tiny_config(5)).unwrap();
        let t1: Vec<u32> = crate::tokenizer::encode("abcdef");
        let mut t2 = t1.clone();
        let last = t2.len() - 1;
        t2[last] = crate::tokenizer::encode("z")[0];
        let (l1, _) = m.forward(&t1, false).unwrap();
        let (l2, _) = m.forward(&t2, false).unwrap();
        let v = m.config.vocab_size;
        let (v1, v2) = (l1.to_vec(), l2.to_vec());
        for i in 0..last * v {
            assert_eq!(v1[i].to_bits(), v2[i].to_bits(), "prefix logit changed");
        }
        assert!(v1[last * v..] != v2[last * v..]);
    }

    #[test]
    fn lora_attach_is_noop_bitwise() {
        let mut m = Transformer::new(tiny_config(6)).unwrap();
        let tokens: Vec<u32> = crate::tokenizer::encode("test 99");
        let (before, _) = m.forward(&tokens, false).unwrap();
        m.attach_lora(4, 8.0, &ProjTarget::ALL, 77).unwrap();
        let (after, _) = m.forward(&tokens, false).unwrap();
        for (a, b) in before.to_vec().iter().zip(&after.to_vec()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn lora_scaling_rank4_alpha8_is_two() {
        let mut m = Transformer::new(tiny_config(7)).unwrap();
        m.attach_lora(4, 8.0, &[ProjTarget::QProj], 1).unwrap();
        let (rank, alpha, targets) = m.lora_spec().unwrap();
        assert_eq!((rank, alpha), (4, 8.0));
        assert_eq!(targets, vec![ProjTarget::QProj]);
        let l = &m.layers[0];
        let ad = l.lora[ProjTarget::QProj.index()].as_ref().unwrap();
        assert_eq!(ad.scaling(), 2.0);
    }

    #[test]
    fn lora_update_matrix_hand_oracle() {
        // 2x2 projection: A = [[1,2]], B = [[3],[4]] (rank 1), alpha 4 -> scale 4
        let ad = LoraAdapter {
            target: ProjTarget::QProj,
            rank: 1,
            lora_alpha: 4.0,
            a: Tensor::param(vec![1.0, 2.0], &[1, 2]).unwrap(),
            b: Tensor::param(vec![3.0, 4.0], &[2, 1]).unwrap(),
        };
        // (alpha/r)·B·A = 4·[[3],[4]]·[[1,2]] = [[12,24],[16,32]]
        assert_eq!(ad.update_matrix().to_vec(), vec![12.0, 24.0, 16.0, 32.0]);
    }

    #[test]
    fn duplicate_lora_attach_rejected() {
        let mut m = Transformer::new(tiny_config(8)).unwrap();
        m.attach_lora(2, 4.0, &[ProjTarget::KProj], 1).unwrap();
        assert!(matches!(
            m.attach_lora(2, 4.0, &[ProjTarget::KProj], 2),
            Err(ModelError::DuplicateAdapter { .. })
        ));
    }

    #[test]
    fn lora_freezes_base_and_only_adapters_trainable() {
        let mut m = Transformer::new(tiny_config(9)).unwrap();
        m.attach_lora(2, 4.0, &ProjTarget::ALL, 3).unwrap();
        for (_, t) in m.named_tensors() {
            assert!(!t.requires_grad());
        }
        let trainable = m.trainable_tensors();
        assert_eq!(trainable.len(), 2 * 4 * 2); // layers × targets × {A,B}
        for t in trainable {
            assert!(t.requires_grad());
        }
    }

    #[test]
    fn greedy_generation_deterministic_and_budgeted() {
        let m = Transformer::new(tiny_config(10)).unwrap();
        let prompt = crate::tokenizer::encode("1+1=");
        let a = m.generate(&prompt, 5, Decode::Greedy).unwrap();
        let b = m.generate(&prompt, 5, Decode::Greedy).unwrap();
        assert_eq!(a, b);
        let one = m.generate(&prompt, 1, Decode::Greedy).unwrap();
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn greedy_steps_match_argmax_replay() {
        let m = Transformer::new(tiny_config(11)).unwrap();
        let prompt = crate::tokenizer::encode("xy 3");
        let (tokens, step_logits) = m
            .generate_with_logits(&prompt, 4, Decode::Greedy)
            .unwrap();
        let v = m.config.vocab_size;
        // replay: full forward at each step, compare argmax
        let mut seq = prompt.clone();
        for (i, &tok) in tokens.iter().enumerate() {
            let (logits, _) = m.forward(&seq, false).unwrap();
            let lv = logits.to_vec();
            let last_row = &lv[(seq.len() - 1) * v..];
            assert_eq!(argmax(last_row) as u32, tok);
            let stored = &step_logits[i * v..(i + 1) * v];
            for (a, b) in last_row.iter().zip(stored) {
                assert!((a - b).abs() < 1e-9);
            }
            seq.push(tok);
        }
    }

    #[test]
    fn overlong_and_out_of_vocab_rejected() {
        let m = Transformer::new(tiny_config(13)).unwrap();
        let long = vec![3u32; 33];
        assert!(matches!(
            m.forward(&long, false),
            Err(ModelError::SequenceTooLong { .. })
        ));
        assert!(matches!(
            m.forward(&[3, 200], false),
            Err(ModelError::TokenOutOfVocab { position: 1, .. })
        ));
    }

    #[test]
    fn teacher_student_param_ratio_reported() {
        let t = Transformer::new(ModelConfig::teacher_default(0)).unwrap();
        let s = Transformer::new(ModelConfig::student_default(0)).unwrap();
        let ratio = s.param_count() as f64 / t.param_count() as f64;
        assert!(ratio > 0.0 && ratio < 0.5, "student/teacher ratio {ratio}");
    }
}
