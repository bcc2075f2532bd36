//! Transformer building blocks on top of the autodiff tape.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Mat, Tape, Var, MASKED};
use crate::params::{Init, ParamGroup, ParamId, ParamStore};

/// Affine map `x·W + b` with `W: in×out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        group: ParamGroup,
    ) -> Self {
        let mut init = Init::new(rng);
        let weight = store.register(format!("{name}.weight"), init.xavier(fan_in, fan_out), group);
        let bias = store.register(format!("{name}.bias"), init.zeros(1, fan_out), group);
        Linear {
            weight,
            bias: Some(bias),
        }
    }

    pub fn no_bias(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        group: ParamGroup,
    ) -> Self {
        let mut init = Init::new(rng);
        let weight = store.register(format!("{name}.weight"), init.xavier(fan_in, fan_out), group);
        Linear { weight, bias: None }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.weight);
        let y = tape.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, group: ParamGroup) -> Self {
        let gain = store.register(format!("{name}.gain"), Mat::ones((1, dim)), group);
        let bias = store.register(format!("{name}.bias"), Mat::zeros((1, dim)), group);
        LayerNorm { gain, bias }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let n = tape.normalize_rows(x, 1e-5);
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        let y = tape.mul_row(n, g);
        tape.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
        group: ParamGroup,
    ) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "hidden size must split across heads");
        MultiHeadAttention {
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim, group),
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim, group),
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim, group),
            out: Linear::new(store, rng, &format!("{name}.out"), dim, dim, group),
            heads,
            dim,
        }
    }

    /// Scaled dot-product attention of `query` rows over `memory` rows.
    /// With `causal`, query row `i` only sees memory rows `0..=i`.
    pub fn forward(&self, tape: &mut Tape, query: Var, memory: Var, causal: bool) -> Var {
        let q = self.q.forward(tape, query);
        let k = self.k.forward(tape, memory);
        let v = self.v.forward(tape, memory);
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (tq, _) = tape.shape(q);
        let (tk, _) = tape.shape(k);
        let mask = causal.then(|| tape.constant(causal_mask(tq, tk)));
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let scores = tape.matmul_t(qh, kh);
            let mut scores = tape.scale(scores, scale);
            if let Some(m) = mask {
                scores = tape.add(scores, m);
            }
            let attn = tape.softmax_rows(scores);
            heads.push(tape.matmul(attn, vh));
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)
        };
        self.out.forward(tape, cat)
    }
}

pub fn causal_mask(rows: usize, cols: usize) -> Mat {
    Mat::from_shape_fn((rows, cols), |(i, j)| if j > i { MASKED } else { 0.0 })
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        inner: usize,
        group: ParamGroup,
    ) -> Self {
        FeedForward {
            up: Linear::new(store, rng, &format!("{name}.up"), dim, inner, group),
            down: Linear::new(store, rng, &format!("{name}.down"), inner, dim, group),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, dropout: f64) -> Var {
        let h = self.up.forward(tape, x);
        let h = tape.relu(h);
        let h = tape.dropout(h, dropout);
        self.down.forward(tape, h)
    }
}

/// Pre-norm self-attention block.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    ln_attn: LayerNorm,
    attn: MultiHeadAttention,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
        group: ParamGroup,
    ) -> Self {
        EncoderLayer {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), dim, group),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dim, heads, group),
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), dim, group),
            ff: FeedForward::new(store, rng, &format!("{name}.ff"), dim, ff_dim, group),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, dropout: f64) -> Var {
        let n = self.ln_attn.forward(tape, x);
        let a = self.attn.forward(tape, n, n, false);
        let a = tape.dropout(a, dropout);
        let x = tape.add(x, a);
        let n = self.ln_ff.forward(tape, x);
        let f = self.ff.forward(tape, n, dropout);
        let f = tape.dropout(f, dropout);
        tape.add(x, f)
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    layers: Vec<EncoderLayer>,
    ln_out: LayerNorm,
}

impl Encoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        layers: usize,
        dim: usize,
        heads: usize,
        ff_dim: usize,
        group: ParamGroup,
    ) -> Self {
        Encoder {
            layers: (0..layers)
                .map(|i| {
                    EncoderLayer::new(store, rng, &format!("{name}.{i}"), dim, heads, ff_dim, group)
                })
                .collect(),
            ln_out: LayerNorm::new(store, &format!("{name}.ln_out"), dim, group),
        }
    }

    pub fn forward(&self, tape: &mut Tape, mut x: Var, dropout: f64) -> Var {
        for layer in &self.layers {
            x = layer.forward(tape, x, dropout);
        }
        self.ln_out.forward(tape, x)
    }
}

/// Fixed sinusoidal position table for positions `offset..offset + len`.
pub fn sinusoid(len: usize, dim: usize, offset: usize) -> Mat {
    Mat::from_shape_fn((len, dim), |(p, i)| {
        let pos = (p + offset) as f64;
        let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
        if i % 2 == 0 {
            (pos * rate).sin()
        } else {
            (pos * rate).cos()
        }
    })
}
