//! Eager tape-based reverse-mode automatic differentiation over `f64`
//! matrices.
//!
//! Every operation computes its value immediately and records a node on the
//! tape; [`Tape::backward`] then walks the nodes in reverse, producing exact
//! gradients with respect to every recorded variable. The op set is exactly
//! what the trajectory networks need: dense algebra, row broadcasts,
//! row-wise softmax and layer norm, GELU, concatenation and slicing along
//! both axes, and mean reductions for pooling and losses.
//!
//! Shape mismatches are programmer errors and panic; data problems (NaN
//! inputs and the like) are handled by callers before matrices reach the
//! tape.

use ndarray::{concatenate, s, Array2, Axis};

pub type Matrix = Array2<f64>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    AddRow(usize, usize),
    SoftmaxRows(usize),
    LayerNormRows {
        x: usize,
        gain: usize,
        bias: usize,
        eps: f64,
    },
    Gelu(usize),
    ConcatRows(Vec<usize>),
    SliceRows {
        src: usize,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<usize>),
    SliceCols {
        src: usize,
        start: usize,
        len: usize,
    },
    MeanRows(usize),
    MeanAll(usize),
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Gradients of one scalar output with respect to every tape variable.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when the output does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_SCALE: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

fn gelu_scalar(x: f64) -> f64 {
    let u = GELU_SCALE * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_SCALE * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = GELU_SCALE * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn accumulate(slot: &mut Option<Matrix>, delta: Matrix) {
    match slot {
        Some(m) => *m += &delta,
        None => *slot = Some(delta),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Current value of a recorded variable.
    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Records an input or parameter matrix.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(value, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(value, Op::Sub(a.0, b.0))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(value, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = &self.nodes[a.0].value * factor;
        self.push(value, Op::Scale(a.0, factor))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (_, ac) = self.shape(a);
        let (br, _) = self.shape(b);
        assert_eq!(ac, br, "matmul: inner dimension mismatch");
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(value, Op::MatMul(a.0, b.0))
    }

    /// `a @ b^T` without materializing the transpose on the tape.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (_, ac) = self.shape(a);
        let (_, bc) = self.shape(b);
        assert_eq!(ac, bc, "matmul_nt: inner dimension mismatch");
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value.t());
        self.push(value, Op::MatMulNT(a.0, b.0))
    }

    /// Adds a `1 x C` row vector to every row of an `R x C` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (_, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row: row must be 1 x C");
        let value = &self.nodes[a.0].value + &self.nodes[row.0].value;
        self.push(value, Op::AddRow(a.0, row.0))
    }

    /// Numerically stable softmax over each row.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mut value = x.clone();
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        self.push(value, Op::SoftmaxRows(a.0))
    }

    /// Row-wise layer normalization with a learned gain and bias (both
    /// `1 x C`).
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let (_, c) = self.shape(x);
        assert_eq!(self.shape(gain), (1, c), "layer_norm: gain must be 1 x C");
        assert_eq!(self.shape(bias), (1, c), "layer_norm: bias must be 1 x C");
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gain.0].value;
        let bv = &self.nodes[bias.0].value;
        let mut value = xv.clone();
        for mut row in value.rows_mut() {
            let mean = row.mean().expect("non-empty row");
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv_std * gv[[0, j]] + bv[[0, j]];
            }
        }
        self.push(
            value,
            Op::LayerNormRows {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                eps,
            },
        )
    }

    /// GELU with the tanh approximation, applied elementwise.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(gelu_scalar);
        self.push(value, Op::Gelu(a.0))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no parts");
        let views: Vec<_> = parts.iter().map(|v| self.nodes[v.0].value.view()).collect();
        let value = concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        self.push(value, Op::ConcatRows(parts.iter().map(|v| v.0).collect()))
    }

    /// Rows `start .. start + len` of a matrix.
    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Var {
        let (r, _) = self.shape(src);
        assert!(start + len <= r, "slice_rows: range out of bounds");
        let value = self.nodes[src.0].value.slice(s![start..start + len, ..]).to_owned();
        self.push(
            value,
            Op::SliceRows {
                src: src.0,
                start,
                len,
            },
        )
    }

    /// Stacks matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no parts");
        let views: Vec<_> = parts.iter().map(|v| self.nodes[v.0].value.view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        self.push(value, Op::ConcatCols(parts.iter().map(|v| v.0).collect()))
    }

    /// Columns `start .. start + len` of a matrix.
    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Var {
        let (_, c) = self.shape(src);
        assert!(start + len <= c, "slice_cols: range out of bounds");
        let value = self.nodes[src.0].value.slice(s![.., start..start + len]).to_owned();
        self.push(
            value,
            Op::SliceCols {
                src: src.0,
                start,
                len,
            },
        )
    }

    /// Mean over rows: `R x C` to `1 x C`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (r, _) = self.shape(a);
        assert!(r > 0, "mean_rows: empty matrix");
        let value = (self.nodes[a.0].value.sum_axis(Axis(0)) / r as f64).insert_axis(Axis(0));
        self.push(value, Op::MeanRows(a.0))
    }

    /// Mean over all entries: `R x C` to `1 x 1`.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        assert!(r * c > 0, "mean_all: empty matrix");
        let mean = self.nodes[a.0].value.sum() / (r * c) as f64;
        let value = Matrix::from_elem((1, 1), mean);
        self.push(value, Op::MeanAll(a.0))
    }

    /// Mean squared error between two matrices of equal shape, as `1 x 1`.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    /// Scalar value of a `1 x 1` variable.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "scalar: variable is not 1 x 1");
        m[[0, 0]]
    }

    /// Reverse pass from a `1 x 1` output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(
            self.shape(output),
            (1, 1),
            "backward: output must be scalar"
        );
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::from_elem((1, 1), 1.0));

        for i in (0..=output.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads[*a], g.clone());
                    accumulate(&mut grads[*b], g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[*a], g.clone());
                    accumulate(&mut grads[*b], -&g);
                }
                Op::Mul(a, b) => {
                    let da = &g * &self.nodes[*b].value;
                    let db = &g * &self.nodes[*a].value;
                    accumulate(&mut grads[*a], da);
                    accumulate(&mut grads[*b], db);
                }
                Op::Scale(a, factor) => {
                    accumulate(&mut grads[*a], &g * *factor);
                }
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.nodes[*b].value.t());
                    let db = self.nodes[*a].value.t().dot(&g);
                    accumulate(&mut grads[*a], da);
                    accumulate(&mut grads[*b], db);
                }
                Op::MatMulNT(a, b) => {
                    let da = g.dot(&self.nodes[*b].value);
                    let db = g.t().dot(&self.nodes[*a].value);
                    accumulate(&mut grads[*a], da);
                    accumulate(&mut grads[*b], db);
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads[*a], g.clone());
                    let drow = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[*row], drow);
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[i].value;
                    let mut da = y.clone();
                    for (mut drow, (yrow, grow)) in da
                        .rows_mut()
                        .into_iter()
                        .zip(y.rows().into_iter().zip(g.rows()))
                    {
                        let dot: f64 = yrow.iter().zip(grow.iter()).map(|(y, g)| y * g).sum();
                        for (d, (y, g)) in
                            drow.iter_mut().zip(yrow.iter().zip(grow.iter()))
                        {
                            *d = y * (g - dot);
                        }
                    }
                    accumulate(&mut grads[*a], da);
                }
                Op::LayerNormRows { x, gain, bias, eps } => {
                    let xv = &self.nodes[*x].value;
                    let gv = &self.nodes[*gain].value;
                    let (r, c) = xv.dim();
                    let mut dx = Matrix::zeros((r, c));
                    let mut dgain = Matrix::zeros((1, c));
                    let mut dbias = Matrix::zeros((1, c));
                    for ri in 0..r {
                        let row = xv.row(ri);
                        let mean = row.mean().expect("non-empty row");
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                        let inv_std = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
                        let grow = g.row(ri);
                        let dxhat: Vec<f64> = (0..c).map(|j| grow[j] * gv[[0, j]]).collect();
                        let mean_dxhat = dxhat.iter().sum::<f64>() / c as f64;
                        let mean_dxhat_xhat =
                            dxhat.iter().zip(&xhat).map(|(d, h)| d * h).sum::<f64>() / c as f64;
                        for j in 0..c {
                            dx[[ri, j]] =
                                (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat) * inv_std;
                            dgain[[0, j]] += grow[j] * xhat[j];
                            dbias[[0, j]] += grow[j];
                        }
                    }
                    accumulate(&mut grads[*x], dx);
                    accumulate(&mut grads[*gain], dgain);
                    accumulate(&mut grads[*bias], dbias);
                }
                Op::Gelu(a) => {
                    let da = &g * &self.nodes[*a].value.mapv(gelu_grad_scalar);
                    accumulate(&mut grads[*a], da);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let (pr, _) = self.nodes[*p].value.dim();
                        let dp = g.slice(s![start..start + pr, ..]).to_owned();
                        accumulate(&mut grads[*p], dp);
                        start += pr;
                    }
                }
                Op::SliceRows { src, start, len } => {
                    let mut dsrc = Matrix::zeros(self.nodes[*src].value.raw_dim());
                    dsrc.slice_mut(s![*start..*start + *len, ..]).assign(&g);
                    accumulate(&mut grads[*src], dsrc);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let (_, pc) = self.nodes[*p].value.dim();
                        let dp = g.slice(s![.., start..start + pc]).to_owned();
                        accumulate(&mut grads[*p], dp);
                        start += pc;
                    }
                }
                Op::SliceCols { src, start, len } => {
                    let mut dsrc = Matrix::zeros(self.nodes[*src].value.raw_dim());
                    dsrc.slice_mut(s![.., *start..*start + *len]).assign(&g);
                    accumulate(&mut grads[*src], dsrc);
                }
                Op::MeanRows(a) => {
                    let (r, c) = self.nodes[*a].value.dim();
                    let da = Matrix::from_shape_fn((r, c), |(_, j)| g[[0, j]] / r as f64);
                    accumulate(&mut grads[*a], da);
                }
                Op::MeanAll(a) => {
                    let (r, c) = self.nodes[*a].value.dim();
                    let da = Matrix::from_elem((r, c), g[[0, 0]] / (r * c) as f64);
                    accumulate(&mut grads[*a], da);
                }
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const FD_EPS: f64 = 1e-6;
    const TOL: f64 = 1e-6;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_shape_fn((r, c), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Central finite differences on every element of every input, against
    /// the analytic gradient.
    fn check_grads<F>(inputs: &[Matrix], build: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = build(&mut tape, &vars);
        let grads = tape.backward(out);

        let eval = |mats: &[Matrix]| -> f64 {
            let mut t = Tape::new();
            let vs: Vec<Var> = mats.iter().map(|m| t.leaf(m.clone())).collect();
            let o = build(&mut t, &vs);
            t.scalar(o)
        };

        for (i, m) in inputs.iter().enumerate() {
            let zero = Matrix::zeros(m.raw_dim());
            let analytic = grads.wrt(vars[i]).unwrap_or(&zero);
            let (r, c) = m.dim();
            for ri in 0..r {
                for ci in 0..c {
                    let mut plus = inputs.to_vec();
                    plus[i][[ri, ci]] += FD_EPS;
                    let mut minus = inputs.to_vec();
                    minus[i][[ri, ci]] -= FD_EPS;
                    let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_EPS);
                    let a = analytic[[ri, ci]];
                    let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
                    assert!(
                        rel < TOL,
                        "input {i} [{ri},{ci}]: analytic {a} vs fd {fd} (rel {rel})"
                    );
                }
            }
        }
    }

    #[test]
    fn elementwise_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_matrix(&mut rng, 3, 4);
        let b = random_matrix(&mut rng, 3, 4);
        check_grads(&[a, b], |t, v| {
            let s = t.add(v[0], v[1]);
            let d = t.sub(s, v[1]);
            let m = t.mul(d, v[0]);
            let sc = t.scale(m, -0.7);
            t.mean_all(sc)
        });
    }

    #[test]
    fn matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_matrix(&mut rng, 3, 5);
        let b = random_matrix(&mut rng, 5, 2);
        check_grads(&[a, b], |t, v| {
            let c = t.matmul(v[0], v[1]);
            let sq = t.mul(c, c);
            t.mean_all(sq)
        });
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_matrix(&mut rng, 4, 6);
        let b = random_matrix(&mut rng, 3, 6);
        let mut tape = Tape::new();
        let va = tape.leaf(a.clone());
        let vb = tape.leaf(b.clone());
        let c = tape.matmul_nt(va, vb);
        assert_eq!(tape.value(c), &a.dot(&b.t()));
        check_grads(&[a, b], |t, v| {
            let c = t.matmul_nt(v[0], v[1]);
            let sq = t.mul(c, c);
            t.mean_all(sq)
        });
    }

    #[test]
    fn add_row_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_matrix(&mut rng, 4, 3);
        let row = random_matrix(&mut rng, 1, 3);
        check_grads(&[a, row], |t, v| {
            let c = t.add_row(v[0], v[1]);
            let sq = t.mul(c, c);
            t.mean_all(sq)
        });
    }

    #[test]
    fn softmax_rows_sums_to_one_and_grads_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_matrix(&mut rng, 3, 5);
        let mut tape = Tape::new();
        let v = tape.leaf(a.clone());
        let y = tape.softmax_rows(v);
        for row in tape.value(y).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        let weights = random_matrix(&mut rng, 3, 5);
        let w = weights.clone();
        check_grads(&[a], move |t, v| {
            let y = t.softmax_rows(v[0]);
            let lw = t.leaf(w.clone());
            let p = t.mul(y, lw);
            t.mean_all(p)
        });
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_matrix(&mut rng, 3, 6);
        let gain = random_matrix(&mut rng, 1, 6);
        let bias = random_matrix(&mut rng, 1, 6);
        check_grads(&[x, gain, bias], |t, v| {
            let y = t.layer_norm_rows(v[0], v[1], v[2], 1e-5);
            let sq = t.mul(y, y);
            t.mean_all(sq)
        });
    }

    #[test]
    fn layer_norm_output_is_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_matrix(&mut rng, 2, 64);
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let gain = tape.leaf(Matrix::ones((1, 64)));
        let bias = tape.leaf(Matrix::zeros((1, 64)));
        let y = tape.layer_norm_rows(v, gain, bias, 1e-12);
        for row in tape.value(y).rows() {
            let mean = row.mean().unwrap();
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn gelu_gradients_and_values() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(3.0) - 3.0).abs() < 4e-3);
        assert!(gelu_scalar(-3.0).abs() < 4e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_matrix(&mut rng, 3, 4) * 2.0;
        check_grads(&[a], |t, v| {
            let y = t.gelu(v[0]);
            let sq = t.mul(y, y);
            t.mean_all(sq)
        });
    }

    #[test]
    fn concat_and_slice_rows_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_matrix(&mut rng, 2, 3);
        let b = random_matrix(&mut rng, 4, 3);
        check_grads(&[a, b], |t, v| {
            let c = t.concat_rows(&[v[0], v[1], v[0]]);
            let mid = t.slice_rows(c, 1, 5);
            let sq = t.mul(mid, mid);
            t.mean_all(sq)
        });
    }

    #[test]
    fn concat_and_slice_cols_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = random_matrix(&mut rng, 3, 2);
        let b = random_matrix(&mut rng, 3, 4);
        check_grads(&[a, b], |t, v| {
            let c = t.concat_cols(&[v[1], v[0]]);
            let mid = t.slice_cols(c, 2, 3);
            let sq = t.mul(mid, mid);
            t.mean_all(sq)
        });
    }

    #[test]
    fn mean_reduction_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_matrix(&mut rng, 4, 3);
        check_grads(std::slice::from_ref(&a), |t, v| {
            let m = t.mean_rows(v[0]);
            let sq = t.mul(m, m);
            t.mean_all(sq)
        });
        check_grads(&[a], |t, v| t.mean_all(v[0]));
    }

    #[test]
    fn mse_matches_hand_value() {
        let mut tape = Tape::new();
        let a = tape.leaf(Matrix::from_shape_vec((2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.leaf(Matrix::zeros((2, 2)));
        let loss = tape.mse(a, b);
        assert_eq!(tape.scalar(loss), (1.0 + 4.0 + 9.0 + 16.0) / 4.0);
    }

    #[test]
    fn composite_network_gradients() {
        // A miniature residual block exercising most ops together.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random_matrix(&mut rng, 4, 6);
        let w1 = random_matrix(&mut rng, 6, 6);
        let b1 = random_matrix(&mut rng, 1, 6);
        let gain = random_matrix(&mut rng, 1, 6);
        let bias = random_matrix(&mut rng, 1, 6);
        let target = random_matrix(&mut rng, 1, 6);
        check_grads(&[x, w1, b1, gain, bias, target], |t, v| {
            let normed = t.layer_norm_rows(v[0], v[3], v[4], 1e-5);
            let h = t.matmul(normed, v[1]);
            let h = t.add_row(h, v[2]);
            let h = t.gelu(h);
            let res = t.add(v[0], h);
            let pooled = t.mean_rows(res);
            t.mse(pooled, v[5])
        });
    }

    #[test]
    fn backward_requires_scalar_output() {
        let mut tape = Tape::new();
        let a = tape.leaf(Matrix::zeros((2, 2)));
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            tape.backward(a);
        }));
        assert!(result.is_err());
    }

    #[test]
    fn gradient_is_none_for_unused_leaf() {
        let mut tape = Tape::new();
        let a = tape.leaf(Matrix::ones((2, 2)));
        let unused = tape.leaf(Matrix::ones((2, 2)));
        let loss = tape.mean_all(a);
        let grads = tape.backward(loss);
        assert!(grads.wrt(a).is_some());
        assert!(grads.wrt(unused).is_none());
    }
}
