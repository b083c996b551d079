//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of a forward pass; [`Tape::backward`]
//! then walks it in reverse. Only the handful of operations the encoder,
//! decoder and losses need are supported.

use ndarray::{Array2, Axis};

use crate::imagegrid::PatchLayout;

pub type Mat = Array2<f64>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
pub const NORM_EPS: f64 = 1e-5;

/// GELU and its derivative, sharing one `tanh`.
fn gelu_with_grad(x: f64) -> (f64, f64) {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    (y, dy)
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// `(n×d) + (1×d)` broadcast over rows
    AddRow(Var, Var),
    Scale(Var, f64),
    /// Keeps the elementwise derivative from the forward pass.
    Gelu(Var, Mat),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    /// Builds a matrix row by row from rows of other values.
    Assemble(Vec<(Var, usize)>),
    /// Forward value is fixed; gradient passes to `x` unchanged.
    StraightThrough(Var),
    MeanRows(Var),
    /// `Σᵢ ‖rowᵢ‖²` as a 1×1 value.
    SumSquares(Var),
    /// Mean squared error of reassembled patches against a target raster.
    Reconstruction {
        patches: Var,
        layout: PatchLayout,
        residual: Vec<f64>,
        hits: Vec<u32>,
    },
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(out, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        self.push(out, Op::Sub(a, b))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let out = self.value(x) + self.value(row);
        self.push(out, Op::AddRow(x, row))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x) * c;
        self.push(out, Op::Scale(x, c))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let both = self.value(x).mapv(gelu_with_grad);
        let out = both.mapv(|(y, _)| y);
        let grad = both.mapv(|(_, dy)| dy);
        self.push(out, Op::Gelu(x, grad))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for mut row in out.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        self.push(out, Op::SoftmaxRows(x))
    }

    /// Per-row standardization followed by a learned gain and bias (`1×d` each).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.mapv(|v| v * v).sum() / d;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            row.mapv_inplace(|v| v * inv);
            inv_std.push(inv);
        }
        let out = &xhat * self.value(gain) + self.value(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    pub fn assemble(&mut self, rows: Vec<(Var, usize)>) -> Var {
        let cols = rows.first().map_or(0, |(v, _)| self.value(*v).ncols());
        let mut out = Mat::zeros((rows.len(), cols));
        for (i, (v, r)) in rows.iter().enumerate() {
            out.row_mut(i).assign(&self.value(*v).row(*r));
        }
        self.push(out, Op::Assemble(rows))
    }

    /// Rows `range` of `x` as a new value.
    pub fn rows(&mut self, x: Var, range: std::ops::Range<usize>) -> Var {
        let rows = range.map(|r| (x, r)).collect();
        self.assemble(rows)
    }

    pub fn straight_through(&mut self, x: Var, forward: Mat) -> Var {
        debug_assert_eq!(forward.dim(), self.value(x).dim());
        self.push(forward, Op::StraightThrough(x))
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = xv
            .mean_axis(Axis(0))
            .expect("mean of empty matrix")
            .insert_axis(Axis(0));
        self.push(out, Op::MeanRows(x))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().map(|v| v * v).sum::<f64>();
        self.push(Mat::from_elem((1, 1), s), Op::SumSquares(x))
    }

    /// MSE between the reassembled (overlap-averaged, unclamped) patches and
    /// `target`, a raster with the layout's dimensions.
    pub fn reconstruction(&mut self, patches: Var, layout: PatchLayout, target: &[f64]) -> Var {
        let pv = self.value(patches);
        let (w, c, s) = (layout.width, layout.channels, layout.patch_size);
        let mut sum = vec![0.0; target.len()];
        let mut hits = vec![0u32; layout.height * w];
        for (idx, patch) in pv.rows().into_iter().enumerate() {
            let (y0, x0) = layout.origin(idx / layout.cols, idx % layout.cols);
            for dy in 0..s {
                for dx in 0..s {
                    let pix = (y0 + dy) * w + x0 + dx;
                    hits[pix] += 1;
                    for ch in 0..c {
                        sum[pix * c + ch] += patch[(dy * s + dx) * c + ch];
                    }
                }
            }
        }
        let mut loss = 0.0;
        let residual: Vec<f64> = sum
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let r = v / hits[i / c].max(1) as f64 - target[i];
                loss += r * r;
                r
            })
            .collect();
        loss /= target.len() as f64;
        self.push(
            Mat::from_elem((1, 1), loss),
            Op::Reconstruction {
                patches,
                layout,
                residual,
                hits,
            },
        )
    }

    /// Gradients of the 1×1 value `loss` with respect to every recorded value.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::ones(self.nodes[loss.0].value.dim()));

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    acc(&mut grads, *a, g.dot(&self.value(*b).t()));
                    acc(&mut grads, *b, self.value(*a).t().dot(&g));
                }
                Op::MatMulT(a, b) => {
                    acc(&mut grads, *a, g.dot(self.value(*b)));
                    acc(&mut grads, *b, g.t().dot(self.value(*a)));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g.clone());
                }
                Op::AddRow(x, row) => {
                    acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *x, g.clone());
                }
                Op::Scale(x, c) => acc(&mut grads, *x, &g * *c),
                Op::Gelu(x, dy) => {
                    acc(&mut grads, *x, g.clone() * dy);
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let mut dx = &g * y;
                    for (mut row, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                        let s = row.sum();
                        row.zip_mut_with(&yrow, |d, &yv| *d -= s * yv);
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    acc(&mut grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *gain, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    let dxhat = &g * self.value(*gain);
                    let d = xhat.ncols() as f64;
                    let mut dx = Mat::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let sum_dh = dh.sum();
                        let sum_dh_xh = dh.dot(&xh);
                        let inv = inv_std[r];
                        for c in 0..xhat.ncols() {
                            dx[(r, c)] = inv / d * (d * dh[c] - sum_dh - xh[c] * sum_dh_xh);
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Assemble(rows) => {
                    for (i, (v, r)) in rows.iter().enumerate() {
                        let shape = self.value(*v).dim();
                        let slot = grads[v.0].get_or_insert_with(|| Mat::zeros(shape));
                        let mut dst = slot.row_mut(*r);
                        dst += &g.row(i);
                    }
                }
                Op::StraightThrough(x) => acc(&mut grads, *x, g.clone()),
                Op::MeanRows(x) => {
                    let n = self.value(*x).nrows();
                    let dx = Mat::from_shape_fn((n, g.ncols()), |(_, c)| g[(0, c)] / n as f64);
                    acc(&mut grads, *x, dx);
                }
                Op::SumSquares(x) => acc(&mut grads, *x, self.value(*x) * (2.0 * g[(0, 0)])),
                Op::Reconstruction {
                    patches,
                    layout,
                    residual,
                    hits,
                } => {
                    let scale = 2.0 * g[(0, 0)] / residual.len() as f64;
                    let (w, c, s) = (layout.width, layout.channels, layout.patch_size);
                    let mut dp = Mat::zeros(self.value(*patches).dim());
                    for (idx, mut row) in dp.rows_mut().into_iter().enumerate() {
                        let (y0, x0) = layout.origin(idx / layout.cols, idx % layout.cols);
                        for dy in 0..s {
                            for dx in 0..s {
                                let pix = (y0 + dy) * w + x0 + dx;
                                let share = scale / hits[pix] as f64;
                                for ch in 0..c {
                                    row[(dy * s + dx) * c + ch] = residual[pix * c + ch] * share;
                                }
                            }
                        }
                    }
                    acc(&mut grads, *patches, dp);
                }
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }
}

pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient of `v`, or zeros shaped like `like` when `v` did not influence the loss.
    pub fn get(&self, v: Var, like: &Mat) -> Mat {
        self.grads[v.0].clone().unwrap_or_else(|| Mat::zeros(like.dim()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central differences of `f` with respect to every entry of `x`.
    fn numeric(x: &Mat, f: &dyn Fn(&Mat) -> f64) -> Mat {
        let h = 1e-6;
        Mat::from_shape_fn(x.dim(), |idx| {
            let mut p = x.clone();
            p[idx] += h;
            let mut m = x.clone();
            m[idx] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
    }

    fn check(x0: Mat, build: impl Fn(&mut Tape, Var) -> Var) {
        let f = |x: &Mat| {
            let mut t = Tape::new();
            let v = t.leaf(x.clone());
            let out = build(&mut t, v);
            t.scalar(out)
        };
        let mut t = Tape::new();
        let v = t.leaf(x0.clone());
        let out = build(&mut t, v);
        let analytic = t.backward(out).get(v, &x0);
        let num = numeric(&x0, &f);
        for (a, n) in analytic.iter().zip(num.iter()) {
            assert!((a - n).abs() < 1e-7 * (1.0 + n.abs()), "analytic {a} vs numeric {n}");
        }
    }

    fn input() -> Mat {
        array![[0.3, -1.2, 0.7], [1.1, 0.4, -0.5]]
    }

    #[test]
    fn matmul_softmax_gelu() {
        let w = array![[0.2, -0.1], [0.5, 0.3], [-0.7, 0.9]];
        check(input(), move |t, x| {
            let wv = t.leaf(w.clone());
            let y = t.matmul(x, wv);
            let y = t.softmax_rows(y);
            let y = t.gelu(y);
            let z = t.matmul_t(y, y);
            t.sum_squares(z)
        });
    }

    #[test]
    fn layer_norm_and_rows() {
        check(input(), |t, x| {
            let g = t.leaf(array![[1.5, -0.5, 0.8]]);
            let b = t.leaf(array![[0.1, 0.2, 0.3]]);
            let y = t.layer_norm(x, g, b);
            let y = t.scale(y, 0.7);
            let picked = t.assemble(vec![(y, 1), (x, 0), (y, 1)]);
            let m = t.mean_rows(picked);
            let y2 = t.add_row(x, m);
            t.sum_squares(y2)
        });
    }

    #[test]
    fn layer_norm_params() {
        let x = input();
        check(array![[1.5, -0.5, 0.8]], move |t, g| {
            let xv = t.leaf(x.clone());
            let b = t.leaf(array![[0.1, 0.2, 0.3]]);
            let y = t.layer_norm(xv, g, b);
            let w = t.leaf(array![[1.0], [2.0], [-3.0]]);
            let z = t.matmul(y, w);
            t.sum_squares(z)
        });
    }

    #[test]
    fn reconstruction_loss() {
        let layout = PatchLayout::new(3, 3, 1, 2, 0.5).unwrap();
        let n = layout.patch_count();
        let target: Vec<f64> = (0..9).map(|i| i as f64 / 9.0).collect();
        let x0 = Mat::from_shape_fn((n, 4), |(i, j)| ((i * 4 + j) as f64 * 0.37).sin());
        check(x0, move |t, x| {
            let y = t.gelu(x);
            t.reconstruction(y, layout, &target)
        });
    }

    #[test]
    fn straight_through_passes_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(array![[1.0, 2.0]]);
        let q = t.straight_through(x, array![[0.0, 0.0]]);
        let l = t.sum_squares(q);
        assert_eq!(t.scalar(l), 0.0);
        let g = t.backward(l).get(x, &array![[0.0, 0.0]]);
        assert_eq!(g, array![[0.0, 0.0]]);
        let mut t = Tape::new();
        let x = t.leaf(array![[1.0, 2.0]]);
        let q = t.straight_through(x, array![[1.0, -1.0]]);
        let l = t.sum_squares(q);
        assert_eq!(t.backward(l).get(x, &array![[0.0, 0.0]]), array![[2.0, -2.0]]);
    }
}
