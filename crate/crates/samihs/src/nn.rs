//! Tape-level building blocks shared by the encoder and decoder: linear
//! layers, layer norm, multi-head attention, and the two-layer GELU MLP.
//! These take already-bound parameter node ids, so the same parameters can
//! back any number of calls on one tape.

use crate::autodiff::{NodeId, Tape};
use ndarray::Array2;

pub(crate) const LN_EPS: f64 = 1e-6;

/// Binds named value tensors onto a tape, recording (name, node) pairs in
/// bind order. The trainability rule is applied per name at bind time, so the
/// freeze policy lives in exactly one place in the caller.
pub(crate) struct Binder<'a> {
    pub tape: &'a mut Tape,
    pub named: Vec<(String, NodeId)>,
    trainable: fn(&str) -> bool,
}

impl<'a> Binder<'a> {
    pub fn new(tape: &'a mut Tape, trainable: fn(&str) -> bool) -> Self {
        Binder { tape, named: Vec::new(), trainable }
    }

    /// Binder for pure evaluation: nothing requires gradients.
    pub fn all_frozen(tape: &'a mut Tape) -> Self {
        Binder::new(tape, |_| false)
    }

    pub fn bind(&mut self, name: String, value: &Array2<f64>) -> NodeId {
        let requires_grad = (self.trainable)(&name);
        let id = self.tape.leaf(value.clone(), requires_grad);
        self.named.push((name, id));
        id
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LinearNodes {
    pub weight: NodeId, // in×out
    pub bias: NodeId,   // 1×out
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerNormNodes {
    pub gamma: NodeId, // 1×c
    pub beta: NodeId,  // 1×c
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttentionNodes {
    pub query: LinearNodes,
    pub key: LinearNodes,
    pub value: LinearNodes,
    pub output: LinearNodes,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct MlpNodes {
    pub fc1: LinearNodes,
    pub fc2: LinearNodes,
}

pub(crate) fn linear(tape: &mut Tape, x: NodeId, layer: &LinearNodes) -> NodeId {
    let y = tape.matmul(x, layer.weight);
    tape.add_row(y, layer.bias)
}

pub(crate) fn layer_norm(tape: &mut Tape, x: NodeId, ln: &LayerNormNodes) -> NodeId {
    tape.layer_norm(x, ln.gamma, ln.beta, LN_EPS)
}

/// Scaled dot-product attention with `num_heads` heads. Queries come from
/// `x_q`, keys and values from `x_kv` (pass the same node for self-attention).
/// The channel width must divide evenly into heads.
pub(crate) fn multi_head_attention(
    tape: &mut Tape,
    x_q: NodeId,
    x_kv: NodeId,
    attn: &AttentionNodes,
    num_heads: usize,
) -> NodeId {
    let q = linear(tape, x_q, &attn.query);
    let k = linear(tape, x_kv, &attn.key);
    let v = linear(tape, x_kv, &attn.value);
    let c = tape.value(q).ncols();
    assert!(num_heads > 0 && c % num_heads == 0, "heads must divide channels");
    let d = c / num_heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut head_outputs = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let qh = tape.narrow_cols(q, h * d, d);
        let kh = tape.narrow_cols(k, h * d, d);
        let vh = tape.narrow_cols(v, h * d, d);
        let scores = tape.matmul_nt(qh, kh);
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax_rows(scores);
        head_outputs.push(tape.matmul(weights, vh));
    }
    let merged = if head_outputs.len() == 1 {
        head_outputs[0]
    } else {
        tape.concat_cols(&head_outputs)
    };
    linear(tape, merged, &attn.output)
}

/// fc1 → GELU → fc2.
pub(crate) fn mlp(tape: &mut Tape, x: NodeId, layers: &MlpNodes) -> NodeId {
    let h = linear(tape, x, &layers.fc1);
    let h = tape.gelu(h);
    linear(tape, h, &layers.fc2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    fn bind_linear(tape: &mut Tape, rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> LinearNodes {
        let weight = tape.param(mat(rng, fan_in, fan_out));
        let bias = tape.param(mat(rng, 1, fan_out));
        LinearNodes { weight, bias }
    }

    /// Single-head attention recomputed with plain scalar loops.
    fn attention_oracle(
        x: &Array2<f64>,
        wq: &Array2<f64>,
        bq: &Array2<f64>,
        wk: &Array2<f64>,
        bk: &Array2<f64>,
        wv: &Array2<f64>,
        bv: &Array2<f64>,
    ) -> Array2<f64> {
        let affine = |w: &Array2<f64>, b: &Array2<f64>| {
            let mut y = x.dot(w);
            for mut row in y.rows_mut() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v += b[[0, j]];
                }
            }
            y
        };
        let q = affine(wq, bq);
        let k = affine(wk, bk);
        let v = affine(wv, bv);
        let n = x.nrows();
        let d = q.ncols();
        let scale = 1.0 / (d as f64).sqrt();
        let mut out = Array2::zeros((n, d));
        for i in 0..n {
            let mut logits = vec![0.0; n];
            for j in 0..n {
                let mut dot = 0.0;
                for t in 0..d {
                    dot += q[[i, t]] * k[[j, t]];
                }
                logits[j] = dot * scale;
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for j in 0..n {
                let w = exps[j] / denom;
                for t in 0..d {
                    out[[i, t]] += w * v[[j, t]];
                }
            }
        }
        out
    }

    #[test]
    fn single_head_attention_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = mat(&mut rng, 5, 4);
        let mut tape = Tape::new();
        let ix = tape.constant(x.clone());
        let query = bind_linear(&mut tape, &mut rng, 4, 4);
        let key = bind_linear(&mut tape, &mut rng, 4, 4);
        let value = bind_linear(&mut tape, &mut rng, 4, 4);
        // Identity output projection isolates the attention core.
        let eye = Array2::from_shape_fn((4, 4), |(i, j)| if i == j { 1.0 } else { 0.0 });
        let wo = tape.constant(eye);
        let bo = tape.constant(Array2::zeros((1, 4)));
        let attn = AttentionNodes { query, key, value, output: LinearNodes { weight: wo, bias: bo } };
        let y = multi_head_attention(&mut tape, ix, ix, &attn, 1);

        let expect = attention_oracle(
            &x,
            tape.value(query.weight),
            tape.value(query.bias),
            tape.value(key.weight),
            tape.value(key.bias),
            tape.value(value.weight),
            tape.value(value.bias),
        );
        let got = tape.value(y);
        for (a, b) in got.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn cross_attention_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut tape = Tape::new();
        let q_in = tape.constant(mat(&mut rng, 1, 8));
        let kv_in = tape.constant(mat(&mut rng, 10, 8));
        let attn = AttentionNodes {
            query: bind_linear(&mut tape, &mut rng, 8, 8),
            key: bind_linear(&mut tape, &mut rng, 8, 8),
            value: bind_linear(&mut tape, &mut rng, 8, 8),
            output: bind_linear(&mut tape, &mut rng, 8, 8),
        };
        let y = multi_head_attention(&mut tape, q_in, kv_in, &attn, 2);
        assert_eq!(tape.value(y).dim(), (1, 8));
    }

    #[test]
    fn mlp_gradients_reach_both_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut tape = Tape::new();
        let x = tape.constant(mat(&mut rng, 3, 4));
        let layers = MlpNodes {
            fc1: bind_linear(&mut tape, &mut rng, 4, 8),
            fc2: bind_linear(&mut tape, &mut rng, 8, 4),
        };
        let y = mlp(&mut tape, x, &layers);
        let loss = tape.mean(y);
        let grads = tape.backward(loss);
        for id in [layers.fc1.weight, layers.fc1.bias, layers.fc2.weight, layers.fc2.bias] {
            assert!(grads.get(id).is_some());
        }
    }
}
