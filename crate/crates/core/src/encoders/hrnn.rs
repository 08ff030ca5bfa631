//! Hierarchical LSTM: a lower stack summarizes each block of `block_len`
//! frames, an upper stack runs over the block summaries.

use super::{Bound, Encoded, ModelError, ParamId, ParamStore};
use crate::autodiff::{Graph, Tensor, Var};
use crate::rng::SplitMix64;

/// Number of blocks for `t` frames: `ceil(t / block_len)`.
pub fn block_count(t: usize, block_len: usize) -> usize {
    t.div_ceil(block_len)
}

/// One LSTM layer with fused `[input + hidden, 4 * hidden]` weights, gate
/// order `i, f, o, g`.
#[derive(Debug, Clone)]
pub(crate) struct LstmLayer {
    w: ParamId,
    b: ParamId,
    hidden: usize,
}

impl LstmLayer {
    pub(crate) fn new(params: &mut ParamStore, rng: &mut SplitMix64, name: &str, input: usize, hidden: usize) -> Self {
        let w = params.xavier(&format!("{name}.w"), input + hidden, 4 * hidden, rng);
        let mut bias = Tensor::zeros(&[4 * hidden]);
        bias.data_mut()[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        let b = params.add(format!("{name}.b"), bias);
        Self { w, b, hidden }
    }

    /// Hidden state after every step; inputs are `[B, input]`.
    fn run(&self, g: &mut Graph, bound: &Bound, inputs: &[Var]) -> Result<Vec<Var>, ModelError> {
        let h_dim = self.hidden;
        let batch = g.shape(inputs[0])[0];
        let (w, b) = (bound.var(self.w), bound.var(self.b));
        let mut h = g.constant(Tensor::zeros(&[batch, h_dim]));
        let mut c = g.constant(Tensor::zeros(&[batch, h_dim]));
        let mut outputs = Vec::with_capacity(inputs.len());
        for &x in inputs {
            let xh = g.concat(&[x, h])?;
            let z = g.matmul(xh, w)?;
            let z = g.add(z, b)?;
            let gates = g.slice(z, 1, 0, 3 * h_dim)?;
            let gates = g.sigmoid(gates);
            let i = g.slice(gates, 1, 0, h_dim)?;
            let f = g.slice(gates, 1, h_dim, h_dim)?;
            let o = g.slice(gates, 1, 2 * h_dim, h_dim)?;
            let cand = g.slice(z, 1, 3 * h_dim, h_dim)?;
            let cand = g.tanh(cand);
            let keep = g.mul(f, c)?;
            let write = g.mul(i, cand)?;
            c = g.add(keep, write)?;
            let squashed = g.tanh(c);
            h = g.mul(o, squashed)?;
            outputs.push(h);
        }
        Ok(outputs)
    }
}

/// Stacked layers with dropout between them; returns the top layer's final
/// hidden state.
fn run_stack(
    layers: &[LstmLayer],
    g: &mut Graph,
    bound: &Bound,
    inputs: &[Var],
    dropout: f64,
    train: bool,
) -> Result<Var, ModelError> {
    let mut seq = inputs.to_vec();
    for (depth, layer) in layers.iter().enumerate() {
        if depth > 0 {
            seq = seq.iter().map(|&h| g.dropout(h, dropout, train)).collect::<Result<_, _>>()?;
        }
        seq = layer.run(g, bound, &seq)?;
    }
    Ok(*seq.last().expect("non-empty sequence"))
}

#[derive(Debug, Clone)]
pub(crate) struct Hrnn {
    lower: Vec<LstmLayer>,
    upper: Vec<LstmLayer>,
    block_len: usize,
    dropout: f64,
}

impl Hrnn {
    pub(crate) fn new(
        params: &mut ParamStore,
        rng: &mut SplitMix64,
        input: usize,
        block_len: usize,
        cell: usize,
        layers: usize,
        dropout: f64,
    ) -> Self {
        let lower = (0..layers)
            .map(|l| LstmLayer::new(params, rng, &format!("hrnn.lower.{l}"), if l == 0 { input } else { cell }, cell))
            .collect();
        let upper = (0..layers).map(|l| LstmLayer::new(params, rng, &format!("hrnn.upper.{l}"), cell, cell)).collect();
        Self { lower, upper, block_len, dropout }
    }

    /// All full blocks of the batch run through the lower stack together
    /// (rows ordered block-major), the short tail block separately.
    pub(crate) fn encode(
        &self,
        g: &mut Graph,
        bound: &Bound,
        clips: &[Tensor],
        train: bool,
    ) -> Result<Encoded, ModelError> {
        let batch = clips.len();
        let (t, d) = (clips[0].shape()[0], clips[0].shape()[1]);
        let l = self.block_len;
        let full = t / l;
        let tail = t % l;
        let frame = |i: usize, s: usize| &clips[i].data()[s * d..(s + 1) * d];

        let mut blocks = Vec::with_capacity(block_count(t, l));
        if full > 0 {
            let steps: Vec<Var> = (0..l)
                .map(|s| {
                    let mut rows = Vec::with_capacity(full * batch * d);
                    for j in 0..full {
                        for i in 0..batch {
                            rows.extend_from_slice(frame(i, j * l + s));
                        }
                    }
                    g.constant(Tensor::new(vec![full * batch, d], rows).unwrap())
                })
                .collect();
            let last = run_stack(&self.lower, g, bound, &steps, self.dropout, train)?;
            for j in 0..full {
                blocks.push(if full == 1 { last } else { g.slice(last, 0, j * batch, batch)? });
            }
        }
        if tail > 0 {
            let steps: Vec<Var> = (0..tail)
                .map(|s| {
                    let mut rows = Vec::with_capacity(batch * d);
                    for i in 0..batch {
                        rows.extend_from_slice(frame(i, full * l + s));
                    }
                    g.constant(Tensor::new(vec![batch, d], rows).unwrap())
                })
                .collect();
            blocks.push(run_stack(&self.lower, g, bound, &steps, self.dropout, train)?);
        }
        let embedding = run_stack(&self.upper, g, bound, &blocks, self.dropout, train)?;
        Ok(Encoded { embedding, intermediates: blocks })
    }
}
