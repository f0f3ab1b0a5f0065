//! Post-layer-norm transformer blocks built on [`Tape`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{ParamBuilder, ParamId};
use super::tape::{Tape, Var};
use super::Mat;

/// Sinusoidal position table, `max_positions × d_model`.
pub fn positional_encoding(max_positions: usize, d_model: usize) -> Mat {
    Mat::from_shape_fn((max_positions, d_model), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / d_model as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Dropout state for one forward pass. Inference passes use [`Dropout::off`].
pub struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn off() -> Self {
        Dropout {
            rate: 0.0,
            rng: None,
        }
    }

    pub fn new(rate: f64, seed: u64) -> Self {
        if rate <= 0.0 {
            return Dropout::off();
        }
        Dropout {
            rate,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Var {
        let Some(rng) = self.rng.as_mut() else {
            return x;
        };
        let keep = 1.0 - self.rate;
        let shape = tape.value(x).raw_dim();
        let mask = Mat::from_shape_simple_fn(shape, || {
            if rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        tape.mul_const(x, mask)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    /// `in × out`
    pub w: ParamId,
    /// `1 × out`
    pub b: ParamId,
}

impl Linear {
    pub fn build<R: Rng>(pb: &mut ParamBuilder<R>, name: &str, d_in: usize, d_out: usize) -> Self {
        pb.push_scope(name);
        let w = pb.uniform("w", d_in, d_out);
        let b = pb.zeros("b", 1, d_out);
        pb.pop_scope();
        Linear { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn build<R: Rng>(pb: &mut ParamBuilder<R>, name: &str, d: usize) -> Self {
        pb.push_scope(name);
        let gain = pb.ones("gain", 1, d);
        let bias = pb.zeros("bias", 1, d);
        pb.pop_scope();
        LayerNorm { gain, bias }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        tape.layer_norm(x, g, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn build<R: Rng>(pb: &mut ParamBuilder<R>, name: &str, d: usize, d_ff: usize) -> Self {
        pb.push_scope(name);
        let up = Linear::build(pb, "up", d, d_ff);
        let down = Linear::build(pb, "down", d_ff, d);
        pb.pop_scope();
        FeedForward { up, down }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let h = self.up.forward(tape, x);
        let h = tape.relu(h);
        self.down.forward(tape, h)
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub n_heads: usize,
}

impl Attention {
    pub fn build<R: Rng>(pb: &mut ParamBuilder<R>, name: &str, d: usize, n_heads: usize) -> Self {
        pb.push_scope(name);
        let q = Linear::build(pb, "q", d, d);
        let k = Linear::build(pb, "k", d, d);
        let v = Linear::build(pb, "v", d, d);
        let o = Linear::build(pb, "o", d, d);
        pb.pop_scope();
        Attention {
            q,
            k,
            v,
            o,
            n_heads,
        }
    }

    /// Projects a memory into keys and values.
    pub fn project_kv(&self, tape: &mut Tape, memory: Var) -> (Var, Var) {
        (self.k.forward(tape, memory), self.v.forward(tape, memory))
    }

    /// Attends `queries` (pre-projection) over already projected keys/values.
    pub fn attend(
        &self,
        tape: &mut Tape,
        queries: Var,
        keys: Var,
        values: Var,
        causal: bool,
    ) -> Var {
        let q = self.q.forward(tape, queries);
        let d = tape.value(q).ncols();
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let heads: Vec<Var> = (0..self.n_heads)
            .map(|h| {
                let qh = tape.slice_cols(q, h * dh, dh);
                let kh = tape.slice_cols(keys, h * dh, dh);
                let vh = tape.slice_cols(values, h * dh, dh);
                let scores = tape.matmul_t(qh, kh);
                let scores = tape.scale(scores, scale);
                let p = tape.softmax(scores, causal);
                tape.matmul(p, vh)
            })
            .collect();
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)
        };
        self.o.forward(tape, joined)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderLayer {
    pub attn: Attention,
    pub ln1: LayerNorm,
    pub ff: FeedForward,
    pub ln2: LayerNorm,
}

impl EncoderLayer {
    pub fn build<R: Rng>(
        pb: &mut ParamBuilder<R>,
        name: &str,
        d: usize,
        d_ff: usize,
        n_heads: usize,
    ) -> Self {
        pb.push_scope(name);
        let layer = EncoderLayer {
            attn: Attention::build(pb, "attn", d, n_heads),
            ln1: LayerNorm::build(pb, "ln1", d),
            ff: FeedForward::build(pb, "ff", d, d_ff),
            ln2: LayerNorm::build(pb, "ln2", d),
        };
        pb.pop_scope();
        layer
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, dropout: &mut Dropout) -> Var {
        let (k, v) = self.attn.project_kv(tape, x);
        let a = self.attn.attend(tape, x, k, v, false);
        let a = dropout.apply(tape, a);
        let x = tape.add(x, a);
        let x = self.ln1.forward(tape, x);
        let f = self.ff.forward(tape, x);
        let f = dropout.apply(tape, f);
        let x = tape.add(x, f);
        self.ln2.forward(tape, x)
    }
}

/// Per-layer keys and values of the already decoded prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    pub keys: Mat,
    pub values: Mat,
}

impl LayerCache {
    pub fn empty(d: usize) -> Self {
        LayerCache {
            keys: Mat::zeros((0, d)),
            values: Mat::zeros((0, d)),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.nrows() == 0
    }
}

/// Causal self-attention block, optionally followed by cross-attention over
/// an encoder memory.
#[derive(Debug, Clone, Copy)]
pub struct DecoderLayer {
    pub self_attn: Attention,
    pub ln1: LayerNorm,
    pub cross: Option<(Attention, LayerNorm)>,
    pub ff: FeedForward,
    pub ln3: LayerNorm,
}

/// Projected encoder memory for one decoder layer.
#[derive(Debug, Clone, Copy)]
pub struct CrossKv {
    pub keys: Var,
    pub values: Var,
}

impl DecoderLayer {
    pub fn build<R: Rng>(
        pb: &mut ParamBuilder<R>,
        name: &str,
        d: usize,
        d_ff: usize,
        n_heads: usize,
        with_cross: bool,
    ) -> Self {
        pb.push_scope(name);
        let self_attn = Attention::build(pb, "self_attn", d, n_heads);
        let ln1 = LayerNorm::build(pb, "ln1", d);
        let cross = with_cross.then(|| {
            (
                Attention::build(pb, "cross_attn", d, n_heads),
                LayerNorm::build(pb, "ln2", d),
            )
        });
        let ff = FeedForward::build(pb, "ff", d, d_ff);
        let ln3 = LayerNorm::build(pb, "ln3", d);
        pb.pop_scope();
        DecoderLayer {
            self_attn,
            ln1,
            cross,
            ff,
            ln3,
        }
    }

    /// With `prefix = None` all rows of `x` are decoded at once under a causal
    /// mask. With a cached prefix, `x` holds the new rows only and attends to
    /// the prefix plus itself. Returns the output and this call's projected
    /// keys and values.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        prefix: Option<&LayerCache>,
        cross: Option<CrossKv>,
        dropout: &mut Dropout,
    ) -> (Var, Var, Var) {
        let (k_new, v_new) = self.self_attn.project_kv(tape, x);
        let (keys, values) = match prefix {
            Some(cache) if !cache.is_empty() => {
                let pk = tape.constant(cache.keys.clone());
                let pv = tape.constant(cache.values.clone());
                (
                    tape.concat_rows(&[pk, k_new]),
                    tape.concat_rows(&[pv, v_new]),
                )
            }
            _ => (k_new, v_new),
        };
        let a = self.self_attn.attend(tape, x, keys, values, true);
        let a = dropout.apply(tape, a);
        let h = tape.add(x, a);
        let mut h = self.ln1.forward(tape, h);
        if let Some((attn, ln)) = &self.cross {
            let kv = cross.expect("cross-attention layer needs a memory");
            let c = attn.attend(tape, h, kv.keys, kv.values, false);
            let c = dropout.apply(tape, c);
            let sum = tape.add(h, c);
            h = ln.forward(tape, sum);
        }
        let f = self.ff.forward(tape, h);
        let f = dropout.apply(tape, f);
        let out = tape.add(h, f);
        (self.ln3.forward(tape, out), k_new, v_new)
    }
}
