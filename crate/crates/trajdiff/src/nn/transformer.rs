//! Transformer building blocks on top of the autodiff tape: linear layers,
//! layer norm, multi-head self-attention, pre-norm residual blocks, and
//! sinusoidal position and step encodings.
//!
//! Each component comes as a pair: a `wire_*` function that declares its
//! parameters through a [`ParamVisitor`], and a forward function that runs
//! it on a [`Tape`] given the loaded variables. Wiring functions are the
//! single source of truth for parameter order.

use crate::nn::params::{Init, ParamVisitor};
use crate::nn::tape::{Matrix, Tape, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Multiplier for the feed-forward hidden width relative to the model width.
pub const FF_WIDTH_FACTOR: usize = 4;

pub struct LinearVars<H> {
    pub w: H,
    pub b: H,
}

pub fn wire_linear<V: ParamVisitor>(
    v: &mut V,
    prefix: &str,
    d_in: usize,
    d_out: usize,
) -> LinearVars<V::Handle> {
    LinearVars {
        w: v.param(&format!("{prefix}.w"), d_in, d_out, Init::FanInUniform),
        b: v.param(&format!("{prefix}.b"), 1, d_out, Init::Zeros),
    }
}

pub fn linear(tape: &mut Tape, x: Var, vars: &LinearVars<Var>) -> Var {
    let h = tape.matmul(x, vars.w);
    tape.add_row(h, vars.b)
}

pub struct LayerNormVars<H> {
    pub gain: H,
    pub bias: H,
}

pub fn wire_layer_norm<V: ParamVisitor>(
    v: &mut V,
    prefix: &str,
    d: usize,
) -> LayerNormVars<V::Handle> {
    LayerNormVars {
        gain: v.param(&format!("{prefix}.gain"), 1, d, Init::Ones),
        bias: v.param(&format!("{prefix}.bias"), 1, d, Init::Zeros),
    }
}

pub fn layer_norm(tape: &mut Tape, x: Var, vars: &LayerNormVars<Var>) -> Var {
    tape.layer_norm_rows(x, vars.gain, vars.bias, LAYER_NORM_EPS)
}

/// One pre-norm transformer block: attention and feed-forward sublayers,
/// each behind a layer norm with a residual connection.
pub struct BlockVars<H> {
    pub ln_attn: LayerNormVars<H>,
    pub query: LinearVars<H>,
    pub key: LinearVars<H>,
    pub value: LinearVars<H>,
    pub output: LinearVars<H>,
    pub ln_ff: LayerNormVars<H>,
    pub ff_in: LinearVars<H>,
    pub ff_out: LinearVars<H>,
}

pub fn wire_block<V: ParamVisitor>(v: &mut V, prefix: &str, d: usize) -> BlockVars<V::Handle> {
    let ff = FF_WIDTH_FACTOR * d;
    BlockVars {
        ln_attn: wire_layer_norm(v, &format!("{prefix}.ln_attn"), d),
        query: wire_linear(v, &format!("{prefix}.attn.q"), d, d),
        key: wire_linear(v, &format!("{prefix}.attn.k"), d, d),
        value: wire_linear(v, &format!("{prefix}.attn.v"), d, d),
        output: wire_linear(v, &format!("{prefix}.attn.o"), d, d),
        ln_ff: wire_layer_norm(v, &format!("{prefix}.ln_ff"), d),
        ff_in: wire_linear(v, &format!("{prefix}.ff.in"), d, ff),
        ff_out: wire_linear(v, &format!("{prefix}.ff.out"), ff, d),
    }
}

/// Scaled dot-product self-attention over all rows of `x`, with heads taken
/// as contiguous column groups of the projections.
pub fn multi_head_attention(
    tape: &mut Tape,
    x: Var,
    vars: &BlockVars<Var>,
    n_heads: usize,
) -> Var {
    let (_, d) = tape.value(x).dim();
    assert!(n_heads > 0 && d % n_heads == 0, "width {d} not divisible into {n_heads} heads");
    let d_head = d / n_heads;
    let inv_sqrt = 1.0 / (d_head as f64).sqrt();

    let q = linear(tape, x, &vars.query);
    let k = linear(tape, x, &vars.key);
    let v = linear(tape, x, &vars.value);

    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let start = h * d_head;
        let qh = tape.slice_cols(q, start, d_head);
        let kh = tape.slice_cols(k, start, d_head);
        let vh = tape.slice_cols(v, start, d_head);
        let scores = tape.matmul_nt(qh, kh);
        let scaled = tape.scale(scores, inv_sqrt);
        let attn = tape.softmax_rows(scaled);
        heads.push(tape.matmul(attn, vh));
    }
    let merged = tape.concat_cols(&heads);
    linear(tape, merged, &vars.output)
}

pub fn transformer_block(tape: &mut Tape, x: Var, vars: &BlockVars<Var>, n_heads: usize) -> Var {
    let normed = layer_norm(tape, x, &vars.ln_attn);
    let attended = multi_head_attention(tape, normed, vars, n_heads);
    let x = tape.add(x, attended);

    let normed = layer_norm(tape, x, &vars.ln_ff);
    let h = linear(tape, normed, &vars.ff_in);
    let h = tape.gelu(h);
    let h = linear(tape, h, &vars.ff_out);
    tape.add(x, h)
}

/// A stack of pre-norm blocks with one final layer norm.
pub struct StackVars<H> {
    pub blocks: Vec<BlockVars<H>>,
    pub ln_final: LayerNormVars<H>,
}

pub fn wire_stack<V: ParamVisitor>(
    v: &mut V,
    prefix: &str,
    d: usize,
    n_layers: usize,
) -> StackVars<V::Handle> {
    let blocks = (0..n_layers)
        .map(|i| wire_block(v, &format!("{prefix}.block{i}"), d))
        .collect();
    StackVars {
        blocks,
        ln_final: wire_layer_norm(v, &format!("{prefix}.ln_final"), d),
    }
}

pub fn transformer_stack(tape: &mut Tape, x: Var, vars: &StackVars<Var>, n_heads: usize) -> Var {
    let mut h = x;
    for block in &vars.blocks {
        h = transformer_block(tape, h, block, n_heads);
    }
    layer_norm(tape, h, &vars.ln_final)
}

fn fill_sinusoidal_row(mut row: ndarray::ArrayViewMut1<f64>, pos: f64, d: usize) {
    for i in 0..d / 2 {
        let freq = 1.0 / 10_000f64.powf(2.0 * i as f64 / d as f64);
        row[2 * i] = (pos * freq).sin();
        row[2 * i + 1] = (pos * freq).cos();
    }
}

/// Sinusoidal position encodings for `positions` consecutive rows; `d` must
/// be even.
pub fn sinusoidal_encoding(positions: usize, d: usize) -> Matrix {
    assert!(d.is_multiple_of(2), "encoding width must be even, got {d}");
    let mut out = Matrix::zeros((positions, d));
    for (pos, row) in out.rows_mut().into_iter().enumerate() {
        fill_sinusoidal_row(row, pos as f64, d);
    }
    out
}

/// Sinusoidal encoding of one diffusion step index as a `1 x d` row.
pub fn step_encoding(step: usize, d: usize) -> Matrix {
    assert!(d.is_multiple_of(2), "encoding width must be even, got {d}");
    let mut out = Matrix::zeros((1, d));
    fill_sinusoidal_row(out.row_mut(0), step as f64, d);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::{flatten_gradients, LayoutBuilder, Loader};
    use ndarray::s;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_shape_fn((r, c), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn encodings_have_expected_values() {
        let pe = sinusoidal_encoding(5, 8);
        assert_eq!(pe.dim(), (5, 8));
        for j in 0..4 {
            assert_eq!(pe[[0, 2 * j]], 0.0);
            assert_eq!(pe[[0, 2 * j + 1]], 1.0);
        }
        assert!((pe[[3, 0]] - 3f64.sin()).abs() < 1e-15);
        assert!(pe.iter().all(|v| v.abs() <= 1.0));
        assert_eq!(step_encoding(3, 8), pe.slice(s![3..4, ..]).to_owned());
    }

    #[test]
    fn stack_preserves_shape_and_is_deterministic() {
        let mut builder = LayoutBuilder::new();
        wire_stack(&mut builder, "t", 8, 2);
        let layout = builder.finish();
        let params = layout.init_params(5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random_matrix(&mut rng, 6, 8);

        let run = |x: &Matrix| -> Matrix {
            let mut tape = Tape::new();
            let mut loader = Loader::new(&layout, &params, &mut tape);
            let vars = wire_stack(&mut loader, "t", 8, 2);
            loader.finish();
            let xv = tape.leaf(x.clone());
            let y = transformer_stack(&mut tape, xv, &vars, 2);
            tape.value(y).clone()
        };
        let y1 = run(&x);
        assert_eq!(y1.dim(), (6, 8));
        assert_eq!(y1, run(&x));
        assert!(y1.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn block_without_positions_is_permutation_equivariant() {
        let mut builder = LayoutBuilder::new();
        wire_block(&mut builder, "b", 6);
        let layout = builder.finish();
        let params = layout.init_params(9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_matrix(&mut rng, 4, 6);
        let perm = [2usize, 0, 3, 1];
        let mut xp = x.clone();
        for (dst, src) in perm.iter().enumerate() {
            xp.row_mut(dst).assign(&x.row(*src));
        }

        let run = |x: &Matrix| -> Matrix {
            let mut tape = Tape::new();
            let mut loader = Loader::new(&layout, &params, &mut tape);
            let vars = wire_block(&mut loader, "b", 6);
            loader.finish();
            let xv = tape.leaf(x.clone());
            let y = transformer_block(&mut tape, xv, &vars, 3);
            tape.value(y).clone()
        };
        let y = run(&x);
        let yp = run(&xp);
        for (dst, src) in perm.iter().enumerate() {
            let diff = &yp.row(dst) - &y.row(*src);
            assert!(diff.iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn stack_gradients_match_finite_differences() {
        let d = 4;
        let heads = 2;
        let mut builder = LayoutBuilder::new();
        wire_stack(&mut builder, "t", d, 1);
        let layout = builder.finish();
        let mut params = layout.init_params(3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_matrix(&mut rng, 3, d);
        let target = random_matrix(&mut rng, 1, d);

        let eval = |p: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let mut loader = Loader::new(&layout, p, &mut tape);
            let vars = wire_stack(&mut loader, "t", d, 1);
            loader.finish();
            let xv = tape.leaf(x.clone());
            let tv = tape.leaf(target.clone());
            let y = transformer_stack(&mut tape, xv, &vars, heads);
            let pooled = tape.mean_rows(y);
            let loss = tape.mse(pooled, tv);
            tape.scalar(loss)
        };

        let analytic = {
            let mut tape = Tape::new();
            let mut loader = Loader::new(&layout, &params, &mut tape);
            let vars = wire_stack(&mut loader, "t", d, 1);
            let leaves = loader.finish();
            let xv = tape.leaf(x.clone());
            let tv = tape.leaf(target.clone());
            let y = transformer_stack(&mut tape, xv, &vars, heads);
            let pooled = tape.mean_rows(y);
            let loss = tape.mse(pooled, tv);
            let grads = tape.backward(loss);
            flatten_gradients(&layout, &leaves, &grads)
        };

        let fd_eps = 1e-5;
        for i in 0..params.len() {
            let orig = params[i];
            params[i] = orig + fd_eps;
            let plus = eval(&params);
            params[i] = orig - fd_eps;
            let minus = eval(&params);
            params[i] = orig;
            let fd = (plus - minus) / (2.0 * fd_eps);
            let a = analytic[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-5);
            let owner = layout
                .entries()
                .iter()
                .find(|e| i >= e.offset && i < e.offset + e.len())
                .map(|e| e.name.as_str())
                .unwrap_or("?");
            assert!(rel < 1e-4, "param {i} ({owner}): analytic {a} vs fd {fd}");
        }
    }
}
