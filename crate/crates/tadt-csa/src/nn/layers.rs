//! Layer parameter containers and their graph forward functions.

use super::graph::{Graph, Var};
use super::{Scalar, Tensor};
use crate::error::Result;
use rand::Rng;

const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

/// Dense layer: `w [in, out]`, `b [1, out]`.
#[derive(Debug, Clone)]
pub struct Linear<S> {
    pub w: Tensor<S>,
    pub b: Tensor<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Linear { w: Tensor::randn(d_in, d_out, INIT_STD, rng), b: Tensor::zeros(1, d_out) }
    }
}

#[derive(Clone, Copy)]
pub struct LinearVars {
    pub w: Var,
    pub b: Var,
}

/// `x w + b`.
pub fn dense<S: Scalar>(g: &mut Graph<S>, x: Var, p: &LinearVars) -> Result<Var> {
    let xw = g.matmul(x, p.w)?;
    g.bias_add(xw, p.b)
}

/// ReLU MLP: dense layers with ReLU between them, no activation after the
/// last layer.
#[derive(Debug, Clone)]
pub struct Mlp<S> {
    pub layers: Vec<Linear<S>>,
}

impl<S: Scalar> Mlp<S> {
    /// `dims = [in, hidden.., out]`.
    pub fn new(dims: &[usize], rng: &mut impl Rng) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| Linear::new(w[0], w[1], rng))
            .collect();
        Mlp { layers }
    }
}

pub struct MlpVars {
    pub layers: Vec<LinearVars>,
}

pub fn relu_mlp<S: Scalar>(g: &mut Graph<S>, x: Var, p: &MlpVars) -> Result<Var> {
    let mut h = x;
    for (i, layer) in p.layers.iter().enumerate() {
        h = dense(g, h, layer)?;
        if i + 1 < p.layers.len() {
            h = g.relu(h);
        }
    }
    Ok(h)
}

/// Row lookup into an embedding table var.
pub fn embedding_lookup<S: Scalar>(g: &mut Graph<S>, table: Var, ids: &[usize]) -> Result<Var> {
    g.gather_rows(table, ids)
}

/// Layer-norm parameters (gain initialized to 1).
#[derive(Debug, Clone)]
pub struct LayerNorm<S> {
    pub gain: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> LayerNorm<S> {
    pub fn new(d: usize) -> Self {
        LayerNorm {
            gain: Tensor::from_vec(1, d, vec![S::one(); d]).unwrap(),
            bias: Tensor::zeros(1, d),
        }
    }
}

#[derive(Clone, Copy)]
pub struct LayerNormVars {
    pub gain: Var,
    pub bias: Var,
}

pub fn layer_norm<S: Scalar>(g: &mut Graph<S>, x: Var, p: &LayerNormVars) -> Result<Var> {
    g.layer_norm(x, p.gain, p.bias, LN_EPS)
}

/// Pre-norm causal transformer block.
#[derive(Debug, Clone)]
pub struct Block<S> {
    pub ln1: LayerNorm<S>,
    pub wq: Linear<S>,
    pub wk: Linear<S>,
    pub wv: Linear<S>,
    pub wo: Linear<S>,
    pub ln2: LayerNorm<S>,
    pub fc1: Linear<S>,
    pub fc2: Linear<S>,
}

impl<S: Scalar> Block<S> {
    pub fn new(d: usize, rng: &mut impl Rng) -> Self {
        Block {
            ln1: LayerNorm::new(d),
            wq: Linear::new(d, d, rng),
            wk: Linear::new(d, d, rng),
            wv: Linear::new(d, d, rng),
            wo: Linear::new(d, d, rng),
            ln2: LayerNorm::new(d),
            fc1: Linear::new(d, 4 * d, rng),
            fc2: Linear::new(4 * d, d, rng),
        }
    }
}

pub struct BlockVars {
    pub ln1: LayerNormVars,
    pub wq: LinearVars,
    pub wk: LinearVars,
    pub wv: LinearVars,
    pub wo: LinearVars,
    pub ln2: LayerNormVars,
    pub fc1: LinearVars,
    pub fc2: LinearVars,
}

/// Causal multi-head self-attention + MLP with residuals. Position i of
/// the output depends only on input rows <= i.
pub fn causal_block<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    p: &BlockVars,
    n_heads: usize,
) -> Result<Var> {
    let d = g.value(x).cols();
    let dh = d / n_heads;
    let a_in = layer_norm(g, x, &p.ln1)?;
    let q = dense(g, a_in, &p.wq)?;
    let k = dense(g, a_in, &p.wk)?;
    let v = dense(g, a_in, &p.wv)?;
    let mut head_outs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let scores = g.matmul_nt(qh, kh)?;
        let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = g.causal_row_softmax(scaled)?;
        head_outs.push(g.matmul(attn, vh)?);
    }
    let cat = g.concat_cols(&head_outs)?;
    let attn_out = dense(g, cat, &p.wo)?;
    let x1 = g.add(x, attn_out)?;

    let m_in = layer_norm(g, x1, &p.ln2)?;
    let h1 = dense(g, m_in, &p.fc1)?;
    let h1a = g.relu(h1);
    let mlp_out = dense(g, h1a, &p.fc2)?;
    g.add(x1, mlp_out)
}

/// Stack of causal blocks with a final layer norm.
#[derive(Debug, Clone)]
pub struct Transformer<S> {
    pub blocks: Vec<Block<S>>,
    pub ln_f: LayerNorm<S>,
}

impl<S: Scalar> Transformer<S> {
    pub fn new(d: usize, n_layers: usize, rng: &mut impl Rng) -> Self {
        Transformer {
            blocks: (0..n_layers).map(|_| Block::new(d, rng)).collect(),
            ln_f: LayerNorm::new(d),
        }
    }
}

pub struct TransformerVars {
    pub blocks: Vec<BlockVars>,
    pub ln_f: LayerNormVars,
}

pub fn transformer_forward<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    p: &TransformerVars,
    n_heads: usize,
) -> Result<Var> {
    let mut h = x;
    for block in &p.blocks {
        h = causal_block(g, h, block, n_heads)?;
    }
    layer_norm(g, h, &p.ln_f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::gradcheck;
    use crate::rng::stream;

    #[test]
    fn identity_dense_passes_through() {
        let mut g: Graph<f64> = Graph::new();
        let mut eye = Tensor::zeros(3, 3);
        for i in 0..3 {
            eye.set(i, i, 1.0);
        }
        let p = LinearVars { w: g.input(eye), b: g.input(Tensor::zeros(1, 3)) };
        let x = g.input(Tensor::from_f64(2, 3, &[1.0, -2.0, 0.5, 0.0, 3.0, -1.0]).unwrap());
        let y = dense(&mut g, x, &p).unwrap();
        assert_eq!(g.value(y).data, g.value(x).data);
    }

    #[test]
    fn embedding_gradient_hits_only_looked_up_row() {
        let mut g: Graph<f64> = Graph::new();
        let table = g.input(Tensor::from_f64(4, 2, &[1., 2., 3., 4., 5., 6., 7., 8.]).unwrap());
        let row = embedding_lookup(&mut g, table, &[2]).unwrap();
        assert_eq!(g.value(row).data, vec![5.0, 6.0]);
        let s = g.sum_all(row);
        g.backward(s).unwrap();
        let grad = g.grad(table).unwrap();
        assert_eq!(grad.data, vec![0., 0., 0., 0., 1., 1., 0., 0.]);
    }

    #[test]
    fn mlp_gradcheck() {
        let mut rng = stream(10, "layers", 0);
        let mlp: Mlp<f64> = Mlp::new(&[3, 5, 2], &mut rng);
        let x = Tensor::randn(2, 3, 1.0, &mut rng);
        let mut params: Vec<Tensor<f64>> = vec![x];
        for l in &mlp.layers {
            params.push(l.w.clone());
            params.push(l.b.clone());
        }
        let report = gradcheck(
            &params,
            |p, want| {
                let mut g = Graph::new();
                let vars: Vec<Var> = p.iter().map(|t| g.input(t.clone())).collect();
                let mv = MlpVars {
                    layers: vec![
                        LinearVars { w: vars[1], b: vars[2] },
                        LinearVars { w: vars[3], b: vars[4] },
                    ],
                };
                let y = relu_mlp(&mut g, vars[0], &mv).unwrap();
                let sq = g.mul(y, y).unwrap();
                let root = g.mean_all(sq);
                let loss = g.value(root).scalar_value();
                if !want {
                    return Ok((loss, None));
                }
                g.backward(root).unwrap();
                let grads = vars
                    .iter()
                    .zip(p)
                    .map(|(v, t)| {
                        g.grad(*v).map(|gt| gt.data.clone()).unwrap_or_else(|| vec![0.0; t.len()])
                    })
                    .collect();
                Ok((loss, Some(grads)))
            },
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-6, "rel err {}", report.max_rel_err);
    }

    fn block_forward(x: &Tensor<f64>, block: &Block<f64>) -> Tensor<f64> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let bv = bind_block(&mut g, block);
        let y = causal_block(&mut g, xv, &bv, 2).unwrap();
        g.value(y).clone()
    }

    fn bind_block(g: &mut Graph<f64>, b: &Block<f64>) -> BlockVars {
        let lin = |g: &mut Graph<f64>, l: &Linear<f64>| LinearVars {
            w: g.input(l.w.clone()),
            b: g.input(l.b.clone()),
        };
        let ln = |g: &mut Graph<f64>, l: &LayerNorm<f64>| LayerNormVars {
            gain: g.input(l.gain.clone()),
            bias: g.input(l.bias.clone()),
        };
        BlockVars {
            ln1: ln(g, &b.ln1),
            wq: lin(g, &b.wq),
            wk: lin(g, &b.wk),
            wv: lin(g, &b.wv),
            wo: lin(g, &b.wo),
            ln2: ln(g, &b.ln2),
            fc1: lin(g, &b.fc1),
            fc2: lin(g, &b.fc2),
        }
    }

    #[test]
    fn causality_is_bitwise() {
        let mut rng = stream(11, "layers", 0);
        let block: Block<f64> = Block::new(4, &mut rng);
        let x = Tensor::randn(5, 4, 1.0, &mut rng);
        let base = block_forward(&x, &block);
        // Mutate the last row; earlier rows must be bitwise unchanged.
        let mut x2 = x.clone();
        for c in 0..4 {
            x2.set(4, c, 99.0 + c as f64);
        }
        let out = block_forward(&x2, &block);
        for r in 0..4 {
            assert_eq!(base.row_slice(r), out.row_slice(r), "row {r} changed");
        }
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        // With L = 1 the attention weight is exactly 1, so the attention
        // branch output equals wo(v(ln(x))).
        let mut rng = stream(12, "layers", 0);
        let block: Block<f64> = Block::new(4, &mut rng);
        let x = Tensor::randn(1, 4, 1.0, &mut rng);

        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let bv = bind_block(&mut g, &block);
        let a_in = layer_norm(&mut g, xv, &bv.ln1).unwrap();
        let v = dense(&mut g, a_in, &bv.wv).unwrap();
        let direct = dense(&mut g, v, &bv.wo).unwrap();
        let q = dense(&mut g, a_in, &bv.wq).unwrap();
        let k = dense(&mut g, a_in, &bv.wk).unwrap();
        let mut heads = Vec::new();
        for h in 0..2 {
            let qh = g.slice_cols(q, h * 2, 2).unwrap();
            let kh = g.slice_cols(k, h * 2, 2).unwrap();
            let vh = g.slice_cols(v, h * 2, 2).unwrap();
            let scores = g.matmul_nt(qh, kh).unwrap();
            let scaled = g.scale(scores, 1.0 / (2.0f64).sqrt());
            let attn = g.causal_row_softmax(scaled).unwrap();
            heads.push(g.matmul(attn, vh).unwrap());
        }
        let cat = g.concat_cols(&heads).unwrap();
        let through_attn = dense(&mut g, cat, &bv.wo).unwrap();
        let (a, b) = (g.value(direct).clone(), g.value(through_attn).clone());
        for (x1, x2) in a.data.iter().zip(&b.data) {
            assert!((x1 - x2).abs() < 1e-12);
        }
    }

    #[test]
    fn transformer_gradcheck_small() {
        let mut rng = stream(13, "layers", 0);
        let tr: Transformer<f64> = Transformer::new(4, 1, &mut rng);
        let x = Tensor::randn(3, 4, 0.5, &mut rng);
        let mut params = vec![x.clone()];
        let b = &tr.blocks[0];
        for t in [
            &b.ln1.gain, &b.ln1.bias, &b.wq.w, &b.wq.b, &b.wk.w, &b.wk.b, &b.wv.w, &b.wv.b,
            &b.wo.w, &b.wo.b, &b.ln2.gain, &b.ln2.bias, &b.fc1.w, &b.fc1.b, &b.fc2.w, &b.fc2.b,
            &tr.ln_f.gain, &tr.ln_f.bias,
        ] {
            params.push((*t).clone());
        }
        let report = gradcheck(
            &params,
            |p, want| {
                let mut g = Graph::new();
                let vars: Vec<Var> = p.iter().map(|t| g.input(t.clone())).collect();
                let mut i = 1;
                let mut next = || {
                    let v = vars[i];
                    i += 1;
                    v
                };
                let bv = BlockVars {
                    ln1: LayerNormVars { gain: next(), bias: next() },
                    wq: LinearVars { w: next(), b: next() },
                    wk: LinearVars { w: next(), b: next() },
                    wv: LinearVars { w: next(), b: next() },
                    wo: LinearVars { w: next(), b: next() },
                    ln2: LayerNormVars { gain: next(), bias: next() },
                    fc1: LinearVars { w: next(), b: next() },
                    fc2: LinearVars { w: next(), b: next() },
                };
                let tv = TransformerVars {
                    blocks: vec![bv],
                    ln_f: LayerNormVars { gain: next(), bias: next() },
                };
                let y = transformer_forward(&mut g, vars[0], &tv, 2).unwrap();
                let sq = g.mul(y, y).unwrap();
                let root = g.mean_all(sq);
                let loss = g.value(root).scalar_value();
                if !want {
                    return Ok((loss, None));
                }
                g.backward(root).unwrap();
                let grads = vars
                    .iter()
                    .zip(p)
                    .map(|(v, t)| {
                        g.grad(*v).map(|gt| gt.data.clone()).unwrap_or_else(|| vec![0.0; t.len()])
                    })
                    .collect();
                Ok((loss, Some(grads)))
            },
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-6, "rel err {}", report.max_rel_err);
    }
}
