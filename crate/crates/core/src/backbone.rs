//! Frozen tiny transformer encoder.
//!
//! Pre-LN blocks: `x = x + Attn(LN(x))`, `x = x + FFN(LN(x))`, followed by a
//! final layer norm and mean pooling over positions. When an enhancer list is
//! supplied, enhancer `i` is applied to the output of block `i` (after the
//! feed-forward residual).
//!
//! Initialization (seeded ChaCha8): every weight matrix is drawn from
//! `U(-sqrt(3 / fan_in), sqrt(3 / fan_in))`, every bias from `U(-0.02, 0.02)`;
//! layer-norm gains start at 1 and shifts at 0. Positions use fixed sinusoidal
//! encodings (not parameters).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::enhancer::EnhancerParams;
use crate::tensor::{Graph, Tensor, TensorError, Var};

pub const BIAS_INIT_BOUND: f64 = 0.02;

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("invalid backbone config field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("sequence length {len} outside 1..={max}")]
    SequenceLength { len: usize, max: usize },
    #[error("input feature width {got}, expected {expected}")]
    FeatureWidth { got: usize, expected: usize },
    #[error("expected {expected} enhancers, got {got}")]
    EnhancerCount { got: usize, expected: usize },
    #[error("enhancer {index} has width {got}, backbone width is {expected}")]
    EnhancerWidth {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Encoder blocks (one enhancer slot each).
    pub depth: usize,
    /// Hidden width.
    pub width: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub max_seq_len: usize,
    /// Per-token input feature width.
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            width: 32,
            heads: 2,
            ff_width: 64,
            max_seq_len: 16,
            feature_dim: 8,
            seed: 0x5eed_0001,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), BackboneError> {
        let bad = |field, reason: &str| {
            Err(BackboneError::InvalidConfig {
                field,
                reason: reason.to_string(),
            })
        };
        if self.depth == 0 {
            return bad("depth", "must be at least 1");
        }
        if self.width == 0 {
            return bad("width", "must be at least 1");
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return bad("heads", "must divide width");
        }
        if self.ff_width == 0 {
            return bad("ff_width", "must be at least 1");
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len", "must be at least 1");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim", "must be at least 1");
        }
        Ok(())
    }

    /// Closed-form parameter count of the architecture:
    /// `f·d + d + D·(4d² + 4d + 2·d·ff + ff + d + 4d) + 2d`
    /// (embedding, per-block attention/FFN/two layer norms, final layer norm).
    pub fn parameter_count(&self) -> u64 {
        let (f, d, ff, depth) = (
            self.feature_dim as u64,
            self.width as u64,
            self.ff_width as u64,
            self.depth as u64,
        );
        let block = 4 * d * d + 4 * d + 2 * d * ff + ff + d + 4 * d;
        f * d + d + depth * block + 2 * d
    }
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1_gain: Tensor,
    pub ln1_shift: Tensor,
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_shift: Tensor,
    pub w_ff1: Tensor,
    pub b_ff1: Tensor,
    pub w_ff2: Tensor,
    pub b_ff2: Tensor,
}

impl BlockParams {
    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.ln1_gain,
            &self.ln1_shift,
            &self.w_q,
            &self.b_q,
            &self.w_k,
            &self.b_k,
            &self.w_v,
            &self.b_v,
            &self.w_o,
            &self.b_o,
            &self.ln2_gain,
            &self.ln2_shift,
            &self.w_ff1,
            &self.b_ff1,
            &self.w_ff2,
            &self.b_ff2,
        ]
    }
}

/// Immutable pre-trained stand-in. Every parameter is only ever bound into a
/// graph as a constant.
#[derive(Debug, Clone)]
pub struct FrozenBackbone {
    config: BackboneConfig,
    w_embed: Tensor,
    b_embed: Tensor,
    positions: Tensor,
    blocks: Vec<BlockParams>,
    final_gain: Tensor,
    final_shift: Tensor,
}

struct Init(ChaCha8Rng);

impl Init {
    fn weight(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        let a = (3.0 / fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| self.0.random_range(-a..a))
            .collect();
        Tensor::new(vec![fan_in, fan_out], data).expect("shape by construction")
    }

    fn bias(&mut self, n: usize) -> Tensor {
        let data = (0..n)
            .map(|_| self.0.random_range(-BIAS_INIT_BOUND..BIAS_INIT_BOUND))
            .collect();
        Tensor::new(vec![1, n], data).expect("shape by construction")
    }
}

fn sinusoidal(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let k = (i / 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(2.0 * k / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, d], data).expect("shape by construction")
}

/// Builds a backbone deterministically from `config.seed`.
pub fn build_backbone(config: BackboneConfig) -> Result<FrozenBackbone, BackboneError> {
    config.validate()?;
    let d = config.width;
    let mut init = Init(ChaCha8Rng::seed_from_u64(config.seed));
    let ones = || Tensor::new(vec![1, d], vec![1.0; d]).expect("shape");
    let zeros = || Tensor::zeros(&[1, d]);

    let w_embed = init.weight(config.feature_dim, d);
    let b_embed = init.bias(d);
    let blocks = (0..config.depth)
        .map(|_| BlockParams {
            ln1_gain: ones(),
            ln1_shift: zeros(),
            w_q: init.weight(d, d),
            b_q: init.bias(d),
            w_k: init.weight(d, d),
            b_k: init.bias(d),
            w_v: init.weight(d, d),
            b_v: init.bias(d),
            w_o: init.weight(d, d),
            b_o: init.bias(d),
            ln2_gain: ones(),
            ln2_shift: zeros(),
            w_ff1: init.weight(d, config.ff_width),
            b_ff1: init.bias(config.ff_width),
            w_ff2: init.weight(config.ff_width, d),
            b_ff2: init.bias(d),
        })
        .collect();
    Ok(FrozenBackbone {
        positions: sinusoidal(config.max_seq_len, d),
        w_embed,
        b_embed,
        blocks,
        final_gain: ones(),
        final_shift: zeros(),
        config,
    })
}

/// Output of [`FrozenBackbone::encode_graph`].
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// `(1, d)` mean over positions of the final hidden states.
    pub pooled: Var,
    /// `(seq, d)` final hidden states.
    pub hidden: Var,
}

/// Graph handles for one enhancer's four parameter tensors.
#[derive(Debug, Clone, Copy)]
pub struct EnhancerVars {
    pub w_down: Var,
    pub b_down: Var,
    pub w_up: Var,
    pub b_up: Var,
    pub activation: crate::tensor::Activation,
}

impl FrozenBackbone {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn depth(&self) -> usize {
        self.config.depth
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    /// All parameter tensors in a fixed order.
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.w_embed, &self.b_embed];
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out.push(&self.final_gain);
        out.push(&self.final_shift);
        out
    }

    pub fn parameter_count(&self) -> u64 {
        self.parameters().iter().map(|t| t.len() as u64).sum()
    }

    pub fn bitwise_eq(&self, other: &FrozenBackbone) -> bool {
        let (a, b) = (self.parameters(), other.parameters());
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.bitwise_eq(y))
    }

    fn check_input(&self, input: &Tensor) -> Result<usize, BackboneError> {
        let shape = input.shape();
        if shape.len() != 2 {
            return Err(TensorError::Rank {
                op: "embed",
                expected: 2,
                shape: shape.to_vec(),
            }
            .into());
        }
        let len = shape[0];
        if len == 0 || len > self.config.max_seq_len {
            return Err(BackboneError::SequenceLength {
                len,
                max: self.config.max_seq_len,
            });
        }
        if shape[1] != self.config.feature_dim {
            return Err(BackboneError::FeatureWidth {
                got: shape[1],
                expected: self.config.feature_dim,
            });
        }
        Ok(len)
    }

    /// Projects a `(seq, feature_dim)` input to `(seq, d)` and adds positions.
    pub fn embed_graph<'a>(&'a self, g: &mut Graph<'a>, input: Var) -> Result<Var, BackboneError> {
        let len = self.check_input(g.value(input))?;
        let w = g.constant(&self.w_embed);
        let b = g.constant(&self.b_embed);
        let h = g.matmul(input, w)?;
        let h = g.add(h, b)?;
        let d = self.config.width;
        let pos = Tensor::new(vec![len, d], self.positions.data()[..len * d].to_vec())?;
        let p = g.input(pos);
        Ok(g.add(h, p)?)
    }

    pub fn embed(&self, input: &Tensor) -> Result<Tensor, BackboneError> {
        let mut g = Graph::new();
        let x = g.constant(input);
        let h = self.embed_graph(&mut g, x)?;
        Ok(g.value(h).clone())
    }

    fn affine_ln<'a>(
        &'a self,
        g: &mut Graph<'a>,
        x: Var,
        gain: &'a Tensor,
        shift: &'a Tensor,
    ) -> Result<Var, TensorError> {
        let n = g.layer_norm(x);
        let gv = g.constant(gain);
        let sv = g.constant(shift);
        let n = g.mul(n, gv)?;
        g.add(n, sv)
    }

    fn linear<'a>(
        &'a self,
        g: &mut Graph<'a>,
        x: Var,
        w: &'a Tensor,
        b: &'a Tensor,
    ) -> Result<Var, TensorError> {
        let wv = g.constant(w);
        let bv = g.constant(b);
        let y = g.matmul(x, wv)?;
        g.add(y, bv)
    }

    fn block<'a>(&'a self, g: &mut Graph<'a>, x: Var, p: &'a BlockParams) -> Result<Var, TensorError> {
        let d = self.config.width;
        let heads = self.config.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let n1 = self.affine_ln(g, x, &p.ln1_gain, &p.ln1_shift)?;
        let q = self.linear(g, n1, &p.w_q, &p.b_q)?;
        let k = self.linear(g, n1, &p.w_k, &p.b_k)?;
        let v = self.linear(g, n1, &p.w_v, &p.b_v)?;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax(scores);
            outs.push(g.matmul(attn, vh)?);
        }
        let cat = g.concat_cols(&outs)?;
        let a = self.linear(g, cat, &p.w_o, &p.b_o)?;
        let x = g.add(x, a)?;

        let n2 = self.affine_ln(g, x, &p.ln2_gain, &p.ln2_shift)?;
        let f = self.linear(g, n2, &p.w_ff1, &p.b_ff1)?;
        let f = g.gelu(f);
        let f = self.linear(g, f, &p.w_ff2, &p.b_ff2)?;
        g.add(x, f)
    }

    /// Runs all blocks on an embedded `(seq, d)` hidden sequence, applying
    /// `enhancers[i]` after block `i` when given.
    pub fn encode_graph<'a>(
        &'a self,
        g: &mut Graph<'a>,
        hidden: Var,
        enhancers: Option<&[EnhancerVars]>,
    ) -> Result<Encoded, BackboneError> {
        if let Some(es) = enhancers {
            if es.len() != self.config.depth {
                return Err(BackboneError::EnhancerCount {
                    got: es.len(),
                    expected: self.config.depth,
                });
            }
            for (i, e) in es.iter().enumerate() {
                let w = g.value(e.w_down).rows();
                if w != self.config.width {
                    return Err(BackboneError::EnhancerWidth {
                        index: i,
                        got: w,
                        expected: self.config.width,
                    });
                }
            }
        }
        let hv = g.value(hidden);
        if hv.shape().len() != 2 || hv.cols() != self.config.width {
            return Err(BackboneError::FeatureWidth {
                got: hv.cols(),
                expected: self.config.width,
            });
        }
        let mut x = hidden;
        for (i, p) in self.blocks.iter().enumerate() {
            x = self.block(g, x, p)?;
            if let Some(es) = enhancers {
                x = crate::enhancer::enhancer_graph(g, x, &es[i])?;
            }
        }
        let out = self.affine_ln(g, x, &self.final_gain, &self.final_shift)?;
        let pooled = g.mean_axis(out, 0)?;
        Ok(Encoded {
            pooled,
            hidden: out,
        })
    }

    /// Value-level encode of an already embedded sequence.
    pub fn encode(
        &self,
        hidden: &Tensor,
        enhancers: Option<&[EnhancerParams]>,
    ) -> Result<(Tensor, Tensor), BackboneError> {
        let mut g = Graph::new();
        let h = g.constant(hidden);
        let vars = enhancers.map(|es| es.iter().map(|e| e.bind(&mut g, false)).collect::<Vec<_>>());
        let enc = self.encode_graph(&mut g, h, vars.as_deref())?;
        Ok((g.value(enc.pooled).clone(), g.value(enc.hidden).clone()))
    }

    /// Pooled embedding of a raw `(seq, feature_dim)` sample with no enhancers.
    pub fn embed_pooled(&self, sample: &Tensor) -> Result<Vec<f64>, BackboneError> {
        let mut g = Graph::new();
        let x = g.constant(sample);
        let h = self.embed_graph(&mut g, x)?;
        let enc = self.encode_graph(&mut g, h, None)?;
        Ok(g.value(enc.pooled).data().to_vec())
    }
}
