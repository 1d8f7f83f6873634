//! Reverse-mode automatic differentiation on dynamically shaped `f64` arrays.
//!
//! A [`Graph`] is an append-only tape of nodes. Operations push a node holding
//! the forward value plus whatever the backward pass needs, and return a
//! [`Var`] handle. [`Graph::backward`] walks the tape in reverse and
//! accumulates gradients. Everything runs single-threaded with fixed
//! iteration orders, so forward values and gradients are bit-reproducible
//! for a given input.
//!
//! All math is `f64`. Scalars are represented as one-element 1-D arrays.

use std::rc::Rc;

use ndarray::{Array1, Array2, ArrayD, ArrayView1, ArrayView2, Axis, Ix1, Ix2};

/// Dynamically shaped f64 array, the value type carried by every node.
pub type Arr = ArrayD<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

fn view2(a: &Arr) -> ArrayView2<'_, f64> {
    a.view()
        .into_dimensionality::<Ix2>()
        .expect("expected a 2-D array")
}

fn view1(a: &Arr) -> ArrayView1<'_, f64> {
    a.view()
        .into_dimensionality::<Ix1>()
        .expect("expected a 1-D array")
}

fn scalar(x: f64) -> Arr {
    Arr::from_elem(ndarray::IxDyn(&[1]), x)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_val(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    /// `[n,d] + [d]`, bias broadcast over rows.
    AddBias(Var, Var),
    /// `[d] -> [n,d]`, the same row repeated n times.
    TileRows(Var),
    MatMul(Var, Var),
    /// `a [n,m] x b [p,m]^T -> [n,p]`.
    MatMulNT(Var, Var),
    Gelu(Var),
    /// Row-wise softmax; 1-D input is treated as a single row.
    SoftmaxRows(Var),
    /// Row-wise softmax restricted to `mask == true` entries; masked-out
    /// positions get probability 0. Every row must have at least one
    /// unmasked entry.
    MaskedSoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        gamma: Var,
        beta: Var,
        x_hat: Arr,
        inv_std: Array1<f64>,
    },
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    /// Rearrange per-token patch logits `[side^2, patch^2 * classes]` into a
    /// flat cell grid `[(side*patch)^2, classes]`.
    PatchToGrid {
        x: Var,
        side: usize,
        patch: usize,
        classes: usize,
    },
    MeanAxis0(Var),
    MeanAll(Var),
    SumAll(Var),
    /// `[n] . [n] -> [1]`.
    Dot(Var, Var),
    /// Average-pool a row-major `side x side` token grid `[side^2, d]` down
    /// to `[(side/2)^2, d]` by 2x2 block means.
    AvgPool2x2 {
        x: Var,
        side: usize,
    },
    Reshape(Var),
    Detach,
    /// Mean cross-entropy of `[n,c]` logits against integer targets.
    CrossEntropyMean {
        logits: Var,
        targets: Rc<Vec<usize>>,
        probs: Arr,
    },
    /// Mean binary cross-entropy with logits, elementwise.
    BceWithLogitsMean {
        logits: Var,
        targets: Rc<Arr>,
    },
    /// Mean absolute error against a constant target.
    L1Mean {
        pred: Var,
        target: Rc<Arr>,
    },
    /// L1 over `mask == 1` entries, normalized by the masked count.
    MaskedL1Mean {
        pred: Var,
        target: Rc<Arr>,
        mask: Rc<Arr>,
    },
    /// Focal loss of a single `[k]` logit vector against one target index.
    FocalLoss {
        logits: Var,
        target: usize,
        gamma: f64,
        alpha: f64,
        probs: Array1<f64>,
    },
}

struct Node {
    value: Arr,
    op: Op,
    needs_grad: bool,
}

/// Append-only computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Arr, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Arr {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: Arr) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf (parameters, gradient-check probes).
    pub fn leaf(&mut self, value: Arr) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), g)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        let g = self.ng(a);
        self.push(v, Op::Scale(a, c), g)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        let g = self.ng(a);
        self.push(v, Op::AddScalar(a), g)
    }

    /// `[n,d] + [d]` with the bias added to every row.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let m = view2(&self.nodes[a.0].value);
        let b = view1(&self.nodes[bias.0].value);
        assert_eq!(m.ncols(), b.len(), "add_bias dim mismatch");
        let v = (&m + &b).into_dyn();
        let g = self.ng(a) || self.ng(bias);
        self.push(v, Op::AddBias(a, bias), g)
    }

    /// Repeat a `[d]` row `n` times into `[n,d]`.
    pub fn tile_rows(&mut self, a: Var, n: usize) -> Var {
        let r = view1(&self.nodes[a.0].value);
        let mut out = Array2::<f64>::zeros((n, r.len()));
        for mut row in out.rows_mut() {
            row.assign(&r);
        }
        let g = self.ng(a);
        self.push(out.into_dyn(), Op::TileRows(a), g)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = view2(&self.nodes[a.0].value);
        let bv = view2(&self.nodes[b.0].value);
        assert_eq!(av.ncols(), bv.nrows(), "matmul dim mismatch");
        let v = av.dot(&bv).into_dyn();
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), g)
    }

    /// `a [n,m] x b [p,m]^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let av = view2(&self.nodes[a.0].value);
        let bv = view2(&self.nodes[b.0].value);
        assert_eq!(av.ncols(), bv.ncols(), "matmul_nt dim mismatch");
        let v = av.dot(&bv.t()).into_dyn();
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulNT(a, b), g)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(gelu_val);
        let g = self.ng(a);
        self.push(v, Op::Gelu(a), g)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = &self.nodes[a.0].value;
        let v = if value.ndim() == 1 {
            let row = view1(value);
            softmax_1d(&row).into_dyn()
        } else {
            let m = view2(value);
            let mut out = m.to_owned();
            for mut row in out.rows_mut() {
                let s = softmax_1d(&row.view());
                row.assign(&s);
            }
            out.into_dyn()
        };
        let g = self.ng(a);
        self.push(v, Op::SoftmaxRows(a), g)
    }

    pub fn masked_softmax_rows(&mut self, a: Var, mask: Rc<Array2<bool>>) -> Var {
        let m = view2(&self.nodes[a.0].value);
        assert_eq!(m.dim(), mask.dim(), "mask shape mismatch");
        let mut out = Array2::<f64>::zeros(m.dim());
        for (i, row) in m.rows().into_iter().enumerate() {
            let mut mx = f64::NEG_INFINITY;
            for (j, &x) in row.iter().enumerate() {
                if mask[[i, j]] && x > mx {
                    mx = x;
                }
            }
            assert!(
                mx > f64::NEG_INFINITY,
                "masked softmax row {i} has no unmasked entries"
            );
            let mut denom = 0.0;
            for (j, &x) in row.iter().enumerate() {
                if mask[[i, j]] {
                    let e = (x - mx).exp();
                    out[[i, j]] = e;
                    denom += e;
                }
            }
            for j in 0..row.len() {
                out[[i, j]] /= denom;
            }
        }
        let g = self.ng(a);
        self.push(out.into_dyn(), Op::MaskedSoftmaxRows(a), g)
    }

    /// Row-wise layer norm over the feature (last) axis of `[n,d]`.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = view2(&self.nodes[x.0].value);
        let gv = view1(&self.nodes[gamma.0].value);
        let bv = view1(&self.nodes[beta.0].value);
        let d = xv.ncols();
        assert_eq!(gv.len(), d);
        assert_eq!(bv.len(), d);
        let mut x_hat = Array2::<f64>::zeros(xv.dim());
        let mut inv_std = Array1::<f64>::zeros(xv.nrows());
        let mut out = Array2::<f64>::zeros(xv.dim());
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                x_hat[[i, j]] = xh;
                out[[i, j]] = gv[j] * xh + bv[j];
            }
        }
        let g = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out.into_dyn(),
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                x_hat: x_hat.into_dyn(),
                inv_std,
            },
            g,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let d = view2(&self.nodes[parts[0].0].value).ncols();
        let n: usize = parts
            .iter()
            .map(|p| view2(&self.nodes[p.0].value).nrows())
            .sum();
        let mut out = Array2::<f64>::zeros((n, d));
        let mut r = 0;
        for p in parts {
            let m = view2(&self.nodes[p.0].value);
            assert_eq!(m.ncols(), d, "concat_rows width mismatch");
            out.slice_mut(ndarray::s![r..r + m.nrows(), ..]).assign(&m);
            r += m.nrows();
        }
        let g = parts.iter().any(|p| self.ng(*p));
        self.push(out.into_dyn(), Op::ConcatRows(parts.to_vec()), g)
    }

    pub fn slice_rows(&mut self, a: Var, from: usize, to: usize) -> Var {
        let m = view2(&self.nodes[a.0].value);
        assert!(from <= to && to <= m.nrows(), "slice_rows out of range");
        let v = m.slice(ndarray::s![from..to, ..]).to_owned().into_dyn();
        let g = self.ng(a);
        self.push(v, Op::SliceRows(a, from, to), g)
    }

    /// Mean over rows: `[n,d] -> [d]`.
    pub fn mean_axis0(&mut self, a: Var) -> Var {
        let m = view2(&self.nodes[a.0].value);
        let v = m.mean_axis(Axis(0)).expect("mean over empty array");
        let g = self.ng(a);
        self.push(v.into_dyn(), Op::MeanAxis0(a), g)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let m = &self.nodes[a.0].value;
        let v = scalar(m.sum() / m.len() as f64);
        let g = self.ng(a);
        self.push(v, Op::MeanAll(a), g)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = scalar(self.nodes[a.0].value.sum());
        let g = self.ng(a);
        self.push(v, Op::SumAll(a), g)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let av = view1(&self.nodes[a.0].value);
        let bv = view1(&self.nodes[b.0].value);
        assert_eq!(av.len(), bv.len(), "dot length mismatch");
        let v = scalar(av.dot(&bv));
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Dot(a, b), g)
    }

    pub fn avg_pool_2x2(&mut self, a: Var, side: usize) -> Var {
        let m = view2(&self.nodes[a.0].value);
        assert_eq!(m.nrows(), side * side, "token count != side^2");
        assert!(side % 2 == 0, "token grid side must be even to pool");
        let half = side / 2;
        let d = m.ncols();
        let mut out = Array2::<f64>::zeros((half * half, d));
        for r in 0..half {
            for c in 0..half {
                let mut acc = Array1::<f64>::zeros(d);
                for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    acc += &m.row((2 * r + dr) * side + (2 * c + dc));
                }
                out.row_mut(r * half + c).assign(&(acc / 4.0));
            }
        }
        let g = self.ng(a);
        self.push(out.into_dyn(), Op::AvgPool2x2 { x: a, side }, g)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let m = &self.nodes[a.0].value;
        assert_eq!(m.len(), shape.iter().product::<usize>(), "reshape length");
        let v = m
            .to_owned()
            .into_shape_with_order(ndarray::IxDyn(shape))
            .expect("reshape failed");
        let g = self.ng(a);
        self.push(v, Op::Reshape(a), g)
    }

    /// Identity in the forward pass; blocks gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.clone();
        self.push(v, Op::Detach, false)
    }

    pub fn cross_entropy_mean(&mut self, logits: Var, targets: Rc<Vec<usize>>) -> Var {
        let m = view2(&self.nodes[logits.0].value);
        assert_eq!(m.nrows(), targets.len(), "target count mismatch");
        let c = m.ncols();
        let mut probs = Array2::<f64>::zeros(m.dim());
        let mut loss = 0.0;
        for (i, row) in m.rows().into_iter().enumerate() {
            let t = targets[i];
            assert!(t < c, "target class out of range");
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for &x in row.iter() {
                denom += (x - mx).exp();
            }
            let log_denom = denom.ln();
            loss -= row[t] - mx - log_denom;
            for j in 0..c {
                probs[[i, j]] = (row[j] - mx).exp() / denom;
            }
        }
        let n = m.nrows() as f64;
        let g = self.ng(logits);
        self.push(
            scalar(loss / n),
            Op::CrossEntropyMean {
                logits,
                targets,
                probs: probs.into_dyn(),
            },
            g,
        )
    }

    pub fn bce_with_logits_mean(&mut self, logits: Var, targets: Rc<Arr>) -> Var {
        let z = &self.nodes[logits.0].value;
        assert_eq!(z.shape(), targets.shape(), "bce shape mismatch");
        let mut loss = 0.0;
        for (&zi, &yi) in z.iter().zip(targets.iter()) {
            loss += zi.max(0.0) - zi * yi + (1.0 + (-zi.abs()).exp()).ln();
        }
        let g = self.ng(logits);
        self.push(
            scalar(loss / z.len() as f64),
            Op::BceWithLogitsMean { logits, targets },
            g,
        )
    }

    pub fn l1_mean(&mut self, pred: Var, target: Rc<Arr>) -> Var {
        let p = &self.nodes[pred.0].value;
        assert_eq!(p.shape(), target.shape(), "l1 shape mismatch");
        let loss: f64 = p
            .iter()
            .zip(target.iter())
            .map(|(&a, &b)| (a - b).abs())
            .sum();
        let g = self.ng(pred);
        self.push(
            scalar(loss / p.len() as f64),
            Op::L1Mean { pred, target },
            g,
        )
    }

    pub fn masked_l1_mean(&mut self, pred: Var, target: Rc<Arr>, mask: Rc<Arr>) -> Var {
        let p = &self.nodes[pred.0].value;
        assert_eq!(p.shape(), target.shape(), "l1 shape mismatch");
        assert_eq!(p.shape(), mask.shape(), "mask shape mismatch");
        let count: f64 = mask.iter().sum();
        let denom = count.max(1.0);
        let loss: f64 = p
            .iter()
            .zip(target.iter())
            .zip(mask.iter())
            .map(|((&a, &b), &m)| m * (a - b).abs())
            .sum();
        let g = self.ng(pred);
        self.push(
            scalar(loss / denom),
            Op::MaskedL1Mean { pred, target, mask },
            g,
        )
    }

    /// Focal loss `-alpha * (1 - p_t)^gamma * ln(p_t)` of one logit vector.
    pub fn focal_loss(&mut self, logits: Var, target: usize, gamma: f64, alpha: f64) -> Var {
        let z = view1(&self.nodes[logits.0].value);
        assert!(target < z.len(), "focal target out of range");
        let probs = softmax_1d(&z);
        let pt = probs[target].max(1e-300);
        let loss = -alpha * (1.0 - probs[target]).powf(gamma) * pt.ln();
        let g = self.ng(logits);
        self.push(
            scalar(loss),
            Op::FocalLoss {
                logits,
                target,
                gamma,
                alpha,
                probs,
            },
            g,
        )
    }

    /// Backpropagate from a scalar node; returns one gradient slot per node.
    pub fn backward(&self, root: Var) -> Vec<Option<Arr>> {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Arr>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(scalar(1.0));
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.accumulate(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        grads
    }

    pub fn grad_of(&self, grads: &[Option<Arr>], v: Var) -> Option<Arr> {
        grads[v.0].clone()
    }

    fn accumulate(&self, idx: usize, dy: &Arr, grads: &mut [Option<Arr>]) {
        let node = &self.nodes[idx];
        let mut bump = |v: Var, g: Arr| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => *acc += &g,
                slot => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::Add(a, b) => {
                bump(*a, dy.clone());
                bump(*b, dy.clone());
            }
            Op::Sub(a, b) => {
                bump(*a, dy.clone());
                bump(*b, dy.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                bump(*a, dy * &self.nodes[b.0].value);
                bump(*b, dy * &self.nodes[a.0].value);
            }
            Op::Scale(a, c) => bump(*a, dy.mapv(|x| x * c)),
            Op::AddScalar(a) => bump(*a, dy.clone()),
            Op::AddBias(a, b) => {
                bump(*a, dy.clone());
                bump(*b, view2(dy).sum_axis(Axis(0)).into_dyn());
            }
            Op::TileRows(a) => bump(*a, view2(dy).sum_axis(Axis(0)).into_dyn()),
            Op::MatMul(a, b) => {
                let dyv = view2(dy);
                let av = view2(&self.nodes[a.0].value);
                let bv = view2(&self.nodes[b.0].value);
                bump(*a, dyv.dot(&bv.t()).into_dyn());
                bump(*b, av.t().dot(&dyv).into_dyn());
            }
            Op::MatMulNT(a, b) => {
                let dyv = view2(dy);
                let av = view2(&self.nodes[a.0].value);
                let bv = view2(&self.nodes[b.0].value);
                bump(*a, dyv.dot(&bv).into_dyn());
                bump(*b, dyv.t().dot(&av).into_dyn());
            }
            Op::Gelu(a) => {
                let g = self.nodes[a.0].value.mapv(gelu_grad);
                bump(*a, dy * &g);
            }
            Op::SoftmaxRows(a) | Op::MaskedSoftmaxRows(a) => {
                let y = &node.value;
                let g = if y.ndim() == 1 {
                    let yv = view1(y);
                    let dv = view1(dy);
                    let s = yv.dot(&dv);
                    ((&dv.to_owned() - s) * &yv).into_dyn()
                } else {
                    let yv = view2(y);
                    let dv = view2(dy);
                    let mut out = Array2::<f64>::zeros(yv.dim());
                    for i in 0..yv.nrows() {
                        let yr = yv.row(i);
                        let dr = dv.row(i);
                        let s = yr.dot(&dr);
                        for j in 0..yv.ncols() {
                            out[[i, j]] = (dr[j] - s) * yr[j];
                        }
                    }
                    out.into_dyn()
                };
                bump(*a, g);
            }
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
            } => {
                let dyv = view2(dy);
                let xh = view2(x_hat);
                let gv = view1(&self.nodes[gamma.0].value);
                let d = dyv.ncols() as f64;
                bump(*beta, dyv.sum_axis(Axis(0)).into_dyn());
                bump(*gamma, (&dyv * &xh).sum_axis(Axis(0)).into_dyn());
                let mut dx = Array2::<f64>::zeros(dyv.dim());
                for i in 0..dyv.nrows() {
                    let dxh: Array1<f64> = (&dyv.row(i) * &gv).to_owned();
                    let m1 = dxh.sum() / d;
                    let m2 = dxh.dot(&xh.row(i)) / d;
                    for j in 0..dyv.ncols() {
                        dx[[i, j]] = inv_std[i] * (dxh[j] - m1 - xh[[i, j]] * m2);
                    }
                }
                bump(*x, dx.into_dyn());
            }
            Op::ConcatRows(parts) => {
                let dyv = view2(dy);
                let mut r = 0;
                for p in parts {
                    let n = view2(&self.nodes[p.0].value).nrows();
                    bump(
                        *p,
                        dyv.slice(ndarray::s![r..r + n, ..]).to_owned().into_dyn(),
                    );
                    r += n;
                }
            }
            Op::SliceRows(a, from, to) => {
                let full = view2(&self.nodes[a.0].value);
                let mut g = Array2::<f64>::zeros(full.dim());
                g.slice_mut(ndarray::s![*from..*to, ..]).assign(&view2(dy));
                bump(*a, g.into_dyn());
            }
            Op::MeanAxis0(a) => {
                let src = view2(&self.nodes[a.0].value);
                let n = src.nrows();
                let dv = view1(dy);
                let mut g = Array2::<f64>::zeros(src.dim());
                for mut row in g.rows_mut() {
                    row.assign(&dv.mapv(|x| x / n as f64));
                }
                bump(*a, g.into_dyn());
            }
            Op::MeanAll(a) => {
                let src = &self.nodes[a.0].value;
                let c = dy[[0]] / src.len() as f64;
                bump(*a, Arr::from_elem(src.raw_dim(), c));
            }
            Op::SumAll(a) => {
                let src = &self.nodes[a.0].value;
                bump(*a, Arr::from_elem(src.raw_dim(), dy[[0]]));
            }
            Op::Dot(a, b) => {
                let c = dy[[0]];
                bump(*a, self.nodes[b.0].value.mapv(|x| x * c));
                bump(*b, self.nodes[a.0].value.mapv(|x| x * c));
            }
            Op::AvgPool2x2 { x, side } => {
                let dyv = view2(dy);
                let d = dyv.ncols();
                let half = side / 2;
                let mut g = Array2::<f64>::zeros((side * side, d));
                for r in 0..half {
                    for c in 0..half {
                        let src = dyv.row(r * half + c);
                        for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let mut row = g.row_mut((2 * r + dr) * side + (2 * c + dc));
                            row += &src.mapv(|v| v / 4.0);
                        }
                    }
                }
                bump(*x, g.into_dyn());
            }
            Op::Reshape(a) => {
                let shape = self.nodes[a.0].value.raw_dim();
                bump(
                    *a,
                    dy.to_owned()
                        .into_shape_with_order(shape)
                        .expect("reshape grad"),
                );
            }
            Op::CrossEntropyMean {
                logits,
                targets,
                probs,
            } => {
                let n = targets.len() as f64;
                let mut g = probs.clone();
                {
                    let mut gv = g
                        .view_mut()
                        .into_dimensionality::<Ix2>()
                        .expect("2-D probs");
                    for (i, &t) in targets.iter().enumerate() {
                        gv[[i, t]] -= 1.0;
                    }
                }
                bump(*logits, g.mapv(|x| x * dy[[0]] / n));
            }
            Op::BceWithLogitsMean { logits, targets } => {
                let z = &self.nodes[logits.0].value;
                let n = z.len() as f64;
                let mut g = z.mapv(|zi| 1.0 / (1.0 + (-zi).exp()));
                g -= &**targets;
                bump(*logits, g.mapv(|x| x * dy[[0]] / n));
            }
            Op::L1Mean { pred, target } => {
                let p = &self.nodes[pred.0].value;
                let n = p.len() as f64;
                let mut g = p.clone();
                g.iter_mut()
                    .zip(target.iter())
                    .for_each(|(a, &b)| *a = sign_zero(*a - b));
                bump(*pred, g.mapv(|x| x * dy[[0]] / n));
            }
            Op::MaskedL1Mean { pred, target, mask } => {
                let p = &self.nodes[pred.0].value;
                let denom = mask.iter().sum::<f64>().max(1.0);
                let mut g = p.clone();
                g.iter_mut()
                    .zip(target.iter())
                    .zip(mask.iter())
                    .for_each(|((a, &b), &m)| *a = m * sign_zero(*a - b));
                bump(*pred, g.mapv(|x| x * dy[[0]] / denom));
            }
            Op::FocalLoss {
                logits,
                target,
                gamma,
                alpha,
                probs,
            } => {
                let pt = probs[*target].max(1e-300);
                let q = 1.0 - probs[*target];
                // dL/dp_t, guarding the gamma = 0 reduction to plain CE
                let dl_dpt = if *gamma == 0.0 {
                    -alpha / pt
                } else {
                    -alpha * (-gamma * q.powf(gamma - 1.0) * pt.ln() + q.powf(*gamma) / pt)
                };
                let mut g = Array1::<f64>::zeros(probs.len());
                for j in 0..probs.len() {
                    let dpt_dzj = pt * (if j == *target { 1.0 } else { 0.0 } - probs[j]);
                    g[j] = dl_dpt * dpt_dzj * dy[[0]];
                }
                bump(*logits, g.into_dyn());
            }
        }
    }
}

fn softmax_1d(row: &ArrayView1<'_, f64>) -> Array1<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = row.mapv(|x| (x - mx).exp());
    let denom = out.sum();
    out /= denom;
    out
}

// sign with sign(0) = 0, the subgradient choice for |x| at 0
fn sign_zero(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x.signum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn arr1(v: &[f64]) -> Arr {
        Array1::from(v.to_vec()).into_dyn()
    }

    fn arr2(rows: usize, cols: usize, v: &[f64]) -> Arr {
        Array2::from_shape_vec((rows, cols), v.to_vec())
            .unwrap()
            .into_dyn()
    }

    /// Central finite difference against analytic gradients for a graph
    /// builder taking one leaf input.
    fn check_grad(input: Arr, build: impl Fn(&mut Graph, Var) -> Var) {
        let h = 1e-6;
        let mut g = Graph::new();
        let x = g.leaf(input.clone());
        let loss = build(&mut g, x);
        let grads = g.backward(loss);
        let analytic = g.grad_of(&grads, x).expect("input gradient missing");
        for i in 0..input.len() {
            let mut plus = input.clone();
            plus.as_slice_mut().unwrap()[i] += h;
            let mut minus = input.clone();
            minus.as_slice_mut().unwrap()[i] -= h;
            let mut gp = Graph::new();
            let xp = gp.leaf(plus);
            let lp_var = build(&mut gp, xp);
            let lp = gp.value(lp_var)[[0]];
            let mut gm = Graph::new();
            let xm = gm.leaf(minus);
            let lm_var = build(&mut gm, xm);
            let lm = gm.value(lm_var)[[0]];
            let fd = (lp - lm) / (2.0 * h);
            let an = analytic.as_slice().unwrap()[i];
            let denom = an.abs().max(fd.abs()).max(1e-4);
            assert!(
                ((an - fd) / denom).abs() < 1e-6,
                "grad mismatch at {i}: analytic {an} vs fd {fd}"
            );
        }
    }

    #[test]
    fn finite_difference_matmul_gelu_chain() {
        let w = arr2(3, 3, &[0.2, -0.4, 0.1, 0.7, 0.3, -0.2, -0.5, 0.6, 0.4]);
        check_grad(arr2(2, 3, &[0.5, -1.2, 0.3, 0.8, 0.1, -0.7]), move |g, x| {
            let wv = g.constant(w.clone());
            let y = g.matmul(x, wv);
            let a = g.gelu(y);
            g.mean_all(a)
        });
    }

    #[test]
    fn finite_difference_softmax_layernorm() {
        let gamma = arr1(&[1.1, 0.9, 1.0, 1.2]);
        let beta = arr1(&[0.0, 0.1, -0.1, 0.05]);
        check_grad(
            arr2(
                3,
                4,
                &[0.5, -1.2, 0.3, 0.9, 0.8, 0.1, -0.7, 0.2, -0.3, 0.6, 1.4, -0.9],
            ),
            move |g, x| {
                let ga = g.leaf(gamma.clone());
                let be = g.leaf(beta.clone());
                let ln = g.layer_norm_rows(x, ga, be, 1e-5);
                let sm = g.softmax_rows(ln);
                let sq = g.mul(sm, sm);
                g.mean_all(sq)
            },
        );
    }

    #[test]
    fn finite_difference_losses() {
        let targets = Rc::new(vec![2usize, 0]);
        check_grad(arr2(2, 3, &[0.5, -1.2, 0.3, 0.8, 0.1, -0.7]), move |g, x| {
            g.cross_entropy_mean(x, targets.clone())
        });

        let t = Rc::new(arr1(&[1.0, 0.0, 1.0]));
        check_grad(arr1(&[0.4, -0.3, 1.2]), move |g, x| {
            g.bce_with_logits_mean(x, t.clone())
        });

        let tgt = Rc::new(arr1(&[0.25, -0.5, 0.75]));
        check_grad(arr1(&[0.4, -0.3, 1.2]), move |g, x| {
            g.l1_mean(x, tgt.clone())
        });

        check_grad(arr1(&[0.4, -0.3, 1.2, 0.1]), move |g, x| {
            g.focal_loss(x, 2, 2.0, 0.25)
        });
    }

    #[test]
    fn finite_difference_masked_softmax_and_pool() {
        let mask = Rc::new(
            Array2::from_shape_vec(
                (2, 4),
                vec![true, false, true, true, false, true, true, false],
            )
            .unwrap(),
        );
        check_grad(
            arr2(2, 4, &[0.5, -1.2, 0.3, 0.9, 0.8, 0.1, -0.7, 0.2]),
            move |g, x| {
                let sm = g.masked_softmax_rows(x, mask.clone());
                let sq = g.mul(sm, sm);
                g.mean_all(sq)
            },
        );

        check_grad(
            arr2(4, 2, &[0.5, -1.2, 0.3, 0.9, 0.8, 0.1, -0.7, 0.2]),
            move |g, x| {
                let p = g.avg_pool_2x2(x, 2);
                let sq = g.mul(p, p);
                g.mean_all(sq)
            },
        );
    }

    #[test]
    fn masked_softmax_puts_zero_outside_mask_and_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(arr2(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.0, 1.0]));
        let mask = Rc::new(
            Array2::from_shape_vec((2, 3), vec![true, true, false, false, true, true]).unwrap(),
        );
        let y = g.masked_softmax_rows(x, mask);
        let yv = g.value(y);
        assert_eq!(yv[[0, 2]], 0.0);
        assert_eq!(yv[[1, 0]], 0.0);
        for i in 0..2 {
            let s: f64 = (0..3).map(|j| yv[[i, j]]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(arr1(&[1.0, 2.0]));
        let d = g.detach(x);
        let xs = g.mul(d, d);
        let loss = g.mean_all(xs);
        let grads = g.backward(loss);
        assert!(
            g.grad_of(&grads, x).is_none(),
            "detached path must not reach the leaf"
        );
    }

    #[test]
    fn focal_loss_with_gamma_zero_alpha_one_is_cross_entropy() {
        let mut g = Graph::new();
        let x = g.constant(arr1(&[0.0, 0.0]));
        let f = g.focal_loss(x, 0, 0.0, 1.0);
        assert!((g.value(f)[[0]] - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_c() {
        let mut g = Graph::new();
        let x = g.constant(Arr::zeros(IxDyn(&[5, 4])));
        let ce = g.cross_entropy_mean(x, Rc::new(vec![0, 1, 2, 3, 0]));
        assert!((g.value(ce)[[0]] - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn tile_and_bias_shapes() {
        let mut g = Graph::new();
        let row = g.leaf(arr1(&[1.0, 2.0, 3.0]));
        let tiled = g.tile_rows(row, 4);
        assert_eq!(g.value(tiled).shape(), &[4, 3]);
        let b = g.leaf(arr1(&[0.5, 0.5, 0.5]));
        let out = g.add_bias(tiled, b);
        let s = g.sum_all(out);
        let grads = g.backward(s);
        assert_eq!(g.grad_of(&grads, row).unwrap().shape(), &[3]);
        assert_eq!(
            g.grad_of(&grads, b).unwrap(),
            arr1(&[4.0, 4.0, 4.0]),
            "bias grad is the row count"
        );
    }
}
