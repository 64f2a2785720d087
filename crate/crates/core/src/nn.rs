//! Transformer building blocks. Layers hold parameter ids only, so one
//! architecture can be bound to single- or double-precision stores.

use slg_autodiff::{concat, ParamId, ParamStore, Scalar, Tensor, Var};

use crate::error::{Error, Result};

/// Additive value used to mask attention scores.
const MASKED: f64 = -1e9;

#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = store.xavier(&format!("{name}.w"), fan_in, fan_out)?;
        let b = if bias {
            Some(store.zeros(&format!("{name}.b"), &[fan_out])?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    /// Linear map with all weights and the bias set to zero.
    pub fn zeroed<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<Self> {
        Ok(Self {
            w: store.zeros(&format!("{name}.w"), &[fan_in, fan_out])?,
            b: Some(store.zeros(&format!("{name}.b"), &[fan_out])?),
        })
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.b
    }

    pub fn forward<'g, S: Scalar>(&self, x: Var<'g, S>) -> Result<Var<'g, S>> {
        let g = x.graph();
        let y = x.matmul(&g.param(self.w))?;
        Ok(match self.b {
            Some(b) => y.add(&g.param(b))?,
            None => y,
        })
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.ones(&format!("{name}.gain"), &[dim])?,
            bias: store.zeros(&format!("{name}.bias"), &[dim])?,
        })
    }

    pub fn forward<'g, S: Scalar>(&self, x: Var<'g, S>) -> Result<Var<'g, S>> {
        let g = x.graph();
        Ok(x
            .layer_norm(S::from_f64(1e-5))
            .mul(&g.param(self.gain))?
            .add(&g.param(self.bias))?)
    }
}

#[derive(Clone, Debug)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    dim: usize,
}

impl Attention {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "embedding size {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true)?,
            o: Linear::new(store, &format!("{name}.o"), dim, dim, true)?,
            heads,
            dim,
        })
    }

    /// Attends from `query` rows to `memory` rows. `mask` is added to the
    /// `[queries, keys]` score matrix.
    pub fn forward<'g, S: Scalar>(
        &self,
        query: Var<'g, S>,
        memory: Var<'g, S>,
        mask: Option<&Tensor<S>>,
    ) -> Result<Var<'g, S>> {
        let g = query.graph();
        let (q, k, v) = (
            self.q.forward(query)?,
            self.k.forward(memory)?,
            self.v.forward(memory)?,
        );
        let dh = self.dim / self.heads;
        let scale = S::from_f64(1.0 / (dh as f64).sqrt());
        let mask = mask.map(|m| g.constant(m.clone()));
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.slice(1, h * dh, dh)?;
            let kh = k.slice(1, h * dh, dh)?;
            let vh = v.slice(1, h * dh, dh)?;
            let mut scores = qh.matmul(&kh.transpose()?)?.scale(scale);
            if let Some(m) = &mask {
                scores = scores.add(m)?;
            }
            heads.push(scores.softmax().matmul(&vh)?);
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            concat(&heads, 1)?
        };
        self.o.forward(joined)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    l1: Linear,
    l2: Linear,
}

impl FeedForward {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(store, &format!("{name}.l1"), dim, hidden, true)?,
            l2: Linear::new(store, &format!("{name}.l2"), hidden, dim, true)?,
        })
    }

    pub fn forward<'g, S: Scalar>(&self, x: Var<'g, S>) -> Result<Var<'g, S>> {
        self.l2.forward(self.l1.forward(x)?.relu())
    }
}

/// Shape of a transformer stack.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StackShape {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ff: usize,
    pub dropout: f64,
}

fn residual<'g, S: Scalar>(x: Var<'g, S>, y: Var<'g, S>, dropout: f64) -> Result<Var<'g, S>> {
    Ok(x.add(&y.dropout(dropout))?)
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ff: FeedForward,
}

/// Pre-norm transformer encoder with a final layer norm.
#[derive(Clone, Debug)]
pub struct Encoder {
    layers: Vec<EncoderLayer>,
    norm: LayerNorm,
    dropout: f64,
}

impl Encoder {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, shape: StackShape) -> Result<Self> {
        let layers = (0..shape.layers)
            .map(|i| {
                let p = format!("{name}.layers.{i}");
                Ok(EncoderLayer {
                    ln1: LayerNorm::new(store, &format!("{p}.ln1"), shape.dim)?,
                    attn: Attention::new(store, &format!("{p}.attn"), shape.dim, shape.heads)?,
                    ln2: LayerNorm::new(store, &format!("{p}.ln2"), shape.dim)?,
                    ff: FeedForward::new(store, &format!("{p}.ff"), shape.dim, shape.ff)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            norm: LayerNorm::new(store, &format!("{name}.norm"), shape.dim)?,
            dropout: shape.dropout,
        })
    }

    pub fn forward<'g, S: Scalar>(&self, x: Var<'g, S>) -> Result<Var<'g, S>> {
        let mut x = x.dropout(self.dropout);
        for l in &self.layers {
            let h = l.ln1.forward(x)?;
            x = residual(x, l.attn.forward(h, h, None)?, self.dropout)?;
            x = residual(x, l.ff.forward(l.ln2.forward(x)?)?, self.dropout)?;
        }
        self.norm.forward(x)
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    ln1: LayerNorm,
    self_attn: Attention,
    ln2: LayerNorm,
    cross_attn: Attention,
    ln3: LayerNorm,
    ff: FeedForward,
}

/// Pre-norm transformer decoder with causal self-attention, cross-attention
/// to an encoder memory, and a final layer norm.
#[derive(Clone, Debug)]
pub struct Decoder {
    layers: Vec<DecoderLayer>,
    norm: LayerNorm,
    dropout: f64,
}

impl Decoder {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, shape: StackShape) -> Result<Self> {
        let layers = (0..shape.layers)
            .map(|i| {
                let p = format!("{name}.layers.{i}");
                let d = shape.dim;
                Ok(DecoderLayer {
                    ln1: LayerNorm::new(store, &format!("{p}.ln1"), d)?,
                    self_attn: Attention::new(store, &format!("{p}.self_attn"), d, shape.heads)?,
                    ln2: LayerNorm::new(store, &format!("{p}.ln2"), d)?,
                    cross_attn: Attention::new(store, &format!("{p}.cross_attn"), d, shape.heads)?,
                    ln3: LayerNorm::new(store, &format!("{p}.ln3"), d)?,
                    ff: FeedForward::new(store, &format!("{p}.ff"), d, shape.ff)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            norm: LayerNorm::new(store, &format!("{name}.norm"), shape.dim)?,
            dropout: shape.dropout,
        })
    }

    pub fn forward<'g, S: Scalar>(&self, x: Var<'g, S>, memory: Var<'g, S>) -> Result<Var<'g, S>> {
        let t = x.shape()[0];
        let mask = causal_mask::<S>(t);
        let mut x = x.dropout(self.dropout);
        for l in &self.layers {
            let h = l.ln1.forward(x)?;
            x = residual(x, l.self_attn.forward(h, h, Some(&mask))?, self.dropout)?;
            let h = l.ln2.forward(x)?;
            x = residual(x, l.cross_attn.forward(h, memory, None)?, self.dropout)?;
            x = residual(x, l.ff.forward(l.ln3.forward(x)?)?, self.dropout)?;
        }
        self.norm.forward(x)
    }
}

/// `[t, t]` additive mask hiding future positions.
pub fn causal_mask<S: Scalar>(t: usize) -> Tensor<S> {
    Tensor::from_fn(&[t, t], |i| {
        if i % t > i / t {
            S::from_f64(MASKED)
        } else {
            S::zero()
        }
    })
}

/// Sinusoidal position table of shape `[len, dim]`.
pub fn positional_encoding<S: Scalar>(len: usize, dim: usize) -> Tensor<S> {
    Tensor::from_fn(&[len, dim], |i| {
        let (pos, j) = ((i / dim) as f64, i % dim);
        let rate = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / dim as f64);
        S::from_f64(if j % 2 == 0 {
            (pos * rate).sin()
        } else {
            (pos * rate).cos()
        })
    })
}

/// Token embedding plus sinusoidal positions.
pub fn embed_tokens<'g, S: Scalar>(table: Var<'g, S>, ids: &[usize]) -> Result<Var<'g, S>> {
    let dim = table.shape()[1];
    let e = table.embedding(ids)?;
    let pe = table.graph().constant(positional_encoding(ids.len(), dim));
    Ok(e.add(&pe)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use slg_autodiff::{grad_check_params, Graph};

    fn shape() -> StackShape {
        StackShape {
            layers: 1,
            heads: 2,
            dim: 8,
            ff: 12,
            dropout: 0.0,
        }
    }

    #[test]
    fn mask_hides_future() {
        let m = causal_mask::<f32>(3);
        assert_eq!(m.row(0), &[0.0, -1e9, -1e9]);
        assert_eq!(m.row(2), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn positional_rows_differ() {
        let pe = positional_encoding::<f64>(4, 6);
        assert_eq!(pe.row(0)[0], 0.0);
        assert_eq!(pe.row(0)[1], 1.0);
        assert_ne!(pe.row(1), pe.row(2));
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut s = ParamStore::<f32>::new(0);
        assert!(Attention::new(&mut s, "a", 10, 3).is_err());
    }

    #[test]
    fn decoder_is_causal() {
        let mut store = ParamStore::<f64>::new(3);
        let dec = Decoder::new(&mut store, "dec", shape()).unwrap();
        let x = Tensor::from_fn(&[6, 8], |i| ((i * 7) % 11) as f64 / 11.0 - 0.5);
        let mem = Tensor::from_fn(&[3, 8], |i| ((i * 5) % 7) as f64 / 7.0);
        let g = Graph::with_params(&store, false, 0);
        let full = dec.forward(g.constant(x.clone()), g.constant(mem.clone())).unwrap().value();
        let short = dec
            .forward(g.constant(x.reshape(&[48]).unwrap().slice_rows(4)), g.constant(mem))
            .unwrap()
            .value();
        for r in 0..4 {
            assert_eq!(full.row(r), short.row(r));
        }
    }

    trait SliceRows {
        fn slice_rows(&self, n: usize) -> Tensor<f64>;
    }

    impl SliceRows for Tensor<f64> {
        fn slice_rows(&self, n: usize) -> Tensor<f64> {
            Tensor::new(vec![n, 8], self.data()[..n * 8].to_vec()).unwrap()
        }
    }

    #[test]
    fn encoder_decoder_gradients() {
        let mut store = ParamStore::<f64>::new(11);
        let enc = Encoder::new(&mut store, "enc", shape()).unwrap();
        let dec = Decoder::new(&mut store, "dec", shape()).unwrap();
        let x = Tensor::from_fn(&[3, 8], |i| (i as f64 * 0.37).sin());
        let y = Tensor::from_fn(&[4, 8], |i| (i as f64 * 0.21).cos());
        let target = Tensor::from_fn(&[4, 8], |i| (i as f64 * 0.13).sin());
        let err = grad_check_params(
            &store,
            |g| {
                let mem = enc.forward(g.constant(x.clone()))?;
                let out = dec.forward(g.constant(y.clone()), mem)?;
                Ok::<_, Error>(out.mse(&target)?)
            },
            1e-5,
            Some(6),
            1,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
