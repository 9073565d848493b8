//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a `1 × 1` node walks the record in reverse and
//! returns the gradient of that scalar with respect to every node that
//! requires one. Nodes created from [`Tape::constant`] or [`Tape::detach`]
//! never receive or forward gradient.

use std::ops::Range;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-6;
const NORM_EPS: f64 = 1e-12;

enum Op {
    Leaf,
    Detach,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<Range<usize>>,
        probs: Vec<Mat>,
    },
    Gather {
        src: Var,
        index: Vec<usize>,
    },
    Rearrange {
        src: Var,
        map: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    CosineLoss(Var, Var),
    BceWithLogits {
        logits: Var,
        targets: Mat,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Mat,
    },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// `None` when no gradient reached the node.
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient with zeros substituted for nodes that received none.
    pub fn get_or_zeros(&self, v: Var) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(self.shapes[v.0]))
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn softmax_rows(m: &mut Mat) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Per-row `(2 - 2 cos(a_i, b_i))` values.
pub fn cosine_terms(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Vec<f64> {
    a.rows()
        .into_iter()
        .zip(b.rows())
        .map(|(u, v)| {
            let nu = u.dot(&u).sqrt().max(NORM_EPS);
            let nv = v.dot(&v).sqrt().max(NORM_EPS);
            2.0 - 2.0 * u.dot(&v) / (nu * nv)
        })
        .collect()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// A trainable input.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Same value as `x`, but gradient stops here.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::Detach, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    /// `a + row` with `row` (1 × cols) broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row: bias must be a single row");
        let value = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// Exact (erf) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (each 1 × cols).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut rstd = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * r);
            rstd.push(r);
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Multi-head scaled dot-product attention. Rows within each segment attend
    /// only to rows of the same segment (one segment per sequence in a batch).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, segments: &[Range<usize>]) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let dim = qv.ncols();
        assert!(heads > 0 && dim % heads == 0, "attention: dim not divisible by heads");
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros(qv.dim());
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for seg in segments {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = qv.slice(s![seg.clone(), cols.clone()]);
                let kh = kv.slice(s![seg.clone(), cols.clone()]);
                let vh = vv.slice(s![seg.clone(), cols.clone()]);
                let mut p = qh.dot(&kh.t()) * scale;
                softmax_rows(&mut p);
                out.slice_mut(s![seg.clone(), cols]).assign(&p.dot(&vh));
                probs.push(p);
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Row gather: output row `i` is row `index[i]` of `src`.
    pub fn gather_rows(&mut self, src: Var, index: Vec<usize>) -> Var {
        let sv = self.value(src);
        let mut out = Mat::zeros((index.len(), sv.ncols()));
        for (i, &j) in index.iter().enumerate() {
            out.row_mut(i).assign(&sv.row(j));
        }
        let rg = self.rg(src);
        self.push(out, Op::Gather { src, index }, rg)
    }

    /// Arbitrary element rearrangement: output element `j` (row-major, shape
    /// `shape`) is element `map[j]` of `src` in row-major order.
    pub fn rearrange(&mut self, src: Var, shape: (usize, usize), map: Vec<usize>) -> Var {
        assert_eq!(shape.0 * shape.1, map.len(), "rearrange: map length mismatch");
        let sv = self.value(src);
        let flat = sv.as_standard_layout();
        let flat = flat.as_slice().expect("standard layout");
        let data: Vec<f64> = map.iter().map(|&m| flat[m]).collect();
        let out = Mat::from_shape_vec(shape, data).expect("shape checked");
        let rg = self.rg(src);
        self.push(out, Op::Rearrange { src, map }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Mean over rows of `2 - 2 cos(a_i, b_i)`.
    pub fn cosine_loss(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "cosine_loss: shape mismatch");
        let terms = cosine_terms(self.value(a).view(), self.value(b).view());
        let loss = terms.iter().sum::<f64>() / terms.len() as f64;
        let rg = self.rg(a) || self.rg(b);
        self.push(Mat::from_elem((1, 1), loss), Op::CosineLoss(a, b), rg)
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Mat) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.dim(), targets.dim(), "bce: shape mismatch");
        let mut total = 0.0;
        Zip::from(lv).and(&targets).for_each(|&x, &y| {
            // max(x, 0) - x y + log(1 + exp(-|x|))
            total += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
        });
        let loss = total / lv.len() as f64;
        let rg = self.rg(logits);
        self.push(Mat::from_elem((1, 1), loss), Op::BceWithLogits { logits, targets }, rg)
    }

    /// Mean softmax cross-entropy against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: Vec<usize>) -> Var {
        let mut probs = self.value(logits).clone();
        assert_eq!(probs.nrows(), labels.len(), "cross-entropy: label count mismatch");
        softmax_rows(&mut probs);
        let loss = -labels
            .iter()
            .enumerate()
            .map(|(i, &c)| probs[[i, c]].max(1e-300).ln())
            .sum::<f64>()
            / labels.len() as f64;
        let rg = self.rg(logits);
        self.push(
            Mat::from_elem((1, 1), loss),
            Op::SoftmaxCrossEntropy { logits, labels, probs },
            rg,
        )
    }

    /// `Σ w_i · x_i` over same-shaped nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut value = Mat::zeros(self.value(terms[0].0).dim());
        for &(v, w) in terms {
            value.scaled_add(w, self.value(v));
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        self.push(value, Op::WeightedSum(terms.to_vec()), rg)
    }

    /// Gradients of the scalar node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        let shapes = self.nodes.iter().map(|n| n.value.dim()).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(Mat::ones((1, 1)));
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads, shapes }
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, idx: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*row) {
                    self.accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g * *c),
            Op::Gelu(a) => {
                let mut d = self.value(*a).mapv(gelu_grad);
                d *= g;
                self.accumulate(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                if self.rg(*gamma) {
                    self.accumulate(grads, *gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.rg(*beta) {
                    self.accumulate(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.rg(*x) {
                    let dxhat = g * self.value(*gamma);
                    let d = xhat.ncols() as f64;
                    let mut dx = Mat::zeros(xhat.dim());
                    for (r, ((mut out, dh), xh)) in dx
                        .rows_mut()
                        .into_iter()
                        .zip(dxhat.rows())
                        .zip(xhat.rows())
                        .enumerate()
                    {
                        let sum_dh = dh.sum();
                        let sum_dh_xh = dh.dot(&xh);
                        let rs = rstd[r];
                        Zip::from(&mut out).and(&dh).and(&xh).for_each(|o, &a, &b| {
                            *o = rs / d * (d * a - sum_dh - b * sum_dh_xh);
                        });
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let dim = qv.ncols();
                let dh = dim / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Mat::zeros(qv.dim());
                let mut dk = Mat::zeros(kv.dim());
                let mut dv = Mat::zeros(vv.dim());
                let mut pi = 0;
                for seg in segments {
                    for h in 0..*heads {
                        let cols = h * dh..(h + 1) * dh;
                        let p = &probs[pi];
                        pi += 1;
                        let go = g.slice(s![seg.clone(), cols.clone()]);
                        let qh = qv.slice(s![seg.clone(), cols.clone()]);
                        let kh = kv.slice(s![seg.clone(), cols.clone()]);
                        let vh = vv.slice(s![seg.clone(), cols.clone()]);
                        dv.slice_mut(s![seg.clone(), cols.clone()]).assign(&p.t().dot(&go));
                        let dp = go.dot(&vh.t());
                        let mut ds = p * &dp;
                        for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                            let rs = row.sum();
                            Zip::from(&mut row).and(&prow).for_each(|o, &pv| *o -= pv * rs);
                        }
                        ds *= scale;
                        dq.slice_mut(s![seg.clone(), cols.clone()]).assign(&ds.dot(&kh));
                        dk.slice_mut(s![seg.clone(), cols]).assign(&ds.t().dot(&qh));
                    }
                }
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::Gather { src, index } => {
                if self.rg(*src) {
                    let mut d = Mat::zeros(self.value(*src).dim());
                    for (i, &j) in index.iter().enumerate() {
                        let mut row = d.row_mut(j);
                        row += &g.row(i);
                    }
                    self.accumulate(grads, *src, d);
                }
            }
            Op::Rearrange { src, map } => {
                if self.rg(*src) {
                    let dim = self.value(*src).dim();
                    let mut flat = vec![0.0; dim.0 * dim.1];
                    let gs = g.as_standard_layout();
                    for (gv, &m) in gs.iter().zip(map) {
                        flat[m] += gv;
                    }
                    self.accumulate(grads, *src, Mat::from_shape_vec(dim, flat).expect("shape"));
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = self.value(p).nrows();
                    if self.rg(p) {
                        self.accumulate(grads, p, g.slice(s![start..start + n, ..]).to_owned());
                    }
                    start += n;
                }
            }
            Op::CosineLoss(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let n = av.nrows() as f64;
                let coef = -2.0 * g[[0, 0]] / n;
                let mut da = Mat::zeros(av.dim());
                let mut db = Mat::zeros(bv.dim());
                for (i, (u, w)) in av.rows().into_iter().zip(bv.rows()).enumerate() {
                    let nu = u.dot(&u).sqrt().max(NORM_EPS);
                    let nw = w.dot(&w).sqrt().max(NORM_EPS);
                    let c = u.dot(&w) / (nu * nw);
                    // d cos / du = w / (|u||w|) - cos u / |u|^2
                    Zip::from(da.row_mut(i)).and(&u).and(&w).for_each(|o, &uu, &ww| {
                        *o = coef * (ww / (nu * nw) - c * uu / (nu * nu));
                    });
                    Zip::from(db.row_mut(i)).and(&u).and(&w).for_each(|o, &uu, &ww| {
                        *o = coef * (uu / (nu * nw) - c * ww / (nw * nw));
                    });
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::BceWithLogits { logits, targets } => {
                let lv = self.value(*logits);
                let n = lv.len() as f64;
                let mut d = Mat::zeros(lv.dim());
                Zip::from(&mut d).and(lv).and(targets).for_each(|o, &x, &y| {
                    *o = (1.0 / (1.0 + (-x).exp()) - y) / n * g[[0, 0]];
                });
                self.accumulate(grads, *logits, d);
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let mut d = probs.clone();
                for (i, &c) in labels.iter().enumerate() {
                    d[[i, c]] -= 1.0;
                }
                d *= g[[0, 0]] / labels.len() as f64;
                self.accumulate(grads, *logits, d);
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    self.accumulate(grads, v, g * w);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Checks analytic gradients of `f` against central differences at every
    /// element of every input.
    fn check(inputs: Vec<Mat>, f: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.param(m.clone())).collect();
        let out = f(&mut tape, &vars);
        let grads = tape.backward(out);
        let h = 1e-6;
        for (k, m) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[k]);
            for idx in 0..m.len() {
                let eval = |delta: f64| {
                    let mut perturbed = inputs.clone();
                    let (r, c) = (idx / m.ncols(), idx % m.ncols());
                    perturbed[k][[r, c]] += delta;
                    let mut t = Tape::new();
                    let vs: Vec<Var> = perturbed.into_iter().map(|p| t.param(p)).collect();
                    let o = f(&mut t, &vs);
                    t.scalar(o)
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.as_slice().unwrap()[idx];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
                assert!(err < 1e-5, "input {k} elem {idx}: analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn matmul_bias_gelu() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let target = rand_mat(&mut rng, 3, 4);
        check(
            vec![rand_mat(&mut rng, 3, 5), rand_mat(&mut rng, 5, 4), rand_mat(&mut rng, 1, 4)],
            |t, v| {
                let m = t.matmul(v[0], v[1]);
                let b = t.add_row(m, v[2]);
                let g = t.gelu(b);
                let s = t.scale(g, 1.7);
                let c = t.constant(target.clone());
                t.cosine_loss(s, c)
            },
        );
    }

    #[test]
    fn layer_norm_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let target = rand_mat(&mut rng, 4, 6);
        check(
            vec![rand_mat(&mut rng, 4, 6), rand_mat(&mut rng, 1, 6), rand_mat(&mut rng, 1, 6)],
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2]);
                let c = t.constant(target.clone());
                t.cosine_loss(y, c)
            },
        );
    }

    #[test]
    fn attention_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let target = rand_mat(&mut rng, 5, 4);
        check(
            vec![rand_mat(&mut rng, 5, 4), rand_mat(&mut rng, 5, 4), rand_mat(&mut rng, 5, 4)],
            |t, v| {
                let a = t.attention(v[0], v[1], v[2], 2, &[0..2, 2..5]);
                let c = t.constant(target.clone());
                t.cosine_loss(a, c)
            },
        );
    }

    #[test]
    fn gather_rearrange_concat_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let target = rand_mat(&mut rng, 2, 6);
        check(vec![rand_mat(&mut rng, 2, 3), rand_mat(&mut rng, 1, 3)], |t, v| {
            let cat = t.concat_rows(&[v[0], v[1]]);
            let g = t.gather_rows(cat, vec![2, 0, 2, 1]);
            let map: Vec<usize> = (0..12).rev().collect();
            let r = t.rearrange(g, (2, 6), map);
            let c = t.constant(target.clone());
            t.cosine_loss(r, c)
        });
    }

    #[test]
    fn classification_losses_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let targets = Mat::from_shape_fn((3, 4), |(i, j)| ((i + j) % 2) as f64);
        check(vec![rand_mat(&mut rng, 3, 4)], |t, v| {
            let a = t.bce_with_logits(v[0], targets.clone());
            let b = t.softmax_cross_entropy(v[0], vec![0, 3, 1]);
            t.weighted_sum(&[(a, 0.7), (b, 1.3)])
        });
    }

    #[test]
    fn cosine_grad_both_sides() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        check(vec![rand_mat(&mut rng, 3, 5), rand_mat(&mut rng, 3, 5)], |t, v| t.cosine_loss(v[0], v[1]));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut t = Tape::new();
        let a = t.param(Mat::from_elem((1, 3), 1.0));
        let b = t.param(Mat::from_shape_vec((1, 3), vec![1.0, 2.0, 3.0]).unwrap());
        let bd = t.detach(b);
        let l = t.cosine_loss(a, bd);
        let g = t.backward(l);
        assert!(g.get(b).is_none());
        assert!(g.get(a).is_some());
        assert_eq!(g.get_or_zeros(b), Mat::zeros((1, 3)));
    }
}
