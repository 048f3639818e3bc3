//! Reverse-mode automatic differentiation over `f64` ndarray buffers.
//!
//! Every operation the models need is a node with a hand-written backward
//! rule; `Tensor::backward` walks the graph in reverse topological order and
//! accumulates gradients into the leaves. All arithmetic is `f64` and
//! single-threaded, so forward passes, loss values and gradients are
//! bit-reproducible for a fixed seed. Analytic gradients of each op are
//! checked against central finite differences in the tests below.

use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};
use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

type BackwardFn = Box<dyn Fn(&Inner, &ArrayD<f64>)>;

struct Inner {
    id: u64,
    data: RefCell<ArrayD<f64>>,
    grad: RefCell<Option<ArrayD<f64>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
    needs_grad: bool,
    trainable: bool,
}

/// A node in the autodiff graph. Cloning is cheap (reference counted).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl Tensor {
    fn new_node(
        data: ArrayD<f64>,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        let needs_grad = parents.iter().any(|p| p.inner.needs_grad);
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                parents,
                backward: if needs_grad { backward } else { None },
                needs_grad,
                trainable: false,
            }),
        }
    }

    /// Leaf that participates in gradient computation (a model parameter).
    pub fn param(data: ArrayD<f64>) -> Tensor {
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward: None,
                needs_grad: true,
                trainable: true,
            }),
        }
    }

    /// Leaf with no gradient (inputs, targets, masks).
    pub fn constant(data: ArrayD<f64>) -> Tensor {
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward: None,
                needs_grad: false,
                trainable: false,
            }),
        }
    }

    pub fn from_matrix(m: Array2<f64>) -> Tensor {
        Tensor::constant(m.into_dyn())
    }

    pub fn param_matrix(m: Array2<f64>) -> Tensor {
        Tensor::param(m.into_dyn())
    }

    /// Copies the current values into a fresh constant leaf, cutting the
    /// graph. Used to stop gradients at frozen submodules.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.data())
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn is_trainable(&self) -> bool {
        self.inner.trainable
    }

    pub fn needs_grad(&self) -> bool {
        self.inner.needs_grad
    }

    pub fn data(&self) -> ArrayD<f64> {
        self.inner.data.borrow().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.data.borrow().shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.shape()[1]
    }

    /// Extracts a scalar from a single-element tensor.
    pub fn scalar(&self) -> f64 {
        let d = self.inner.data.borrow();
        assert_eq!(d.len(), 1, "scalar() on tensor of {} elements", d.len());
        *d.iter().next().unwrap()
    }

    pub fn to_matrix(&self) -> Array2<f64> {
        let d = self.inner.data.borrow();
        let sh = d.shape();
        assert_eq!(sh.len(), 2, "to_matrix() on {}-d tensor", sh.len());
        d.clone().into_dimensionality().unwrap()
    }

    /// Overwrites the value of a leaf (optimizer updates).
    pub fn set_data(&self, data: ArrayD<f64>) {
        assert_eq!(
            self.inner.data.borrow().shape(),
            data.shape(),
            "set_data shape mismatch"
        );
        *self.inner.data.borrow_mut() = data;
    }

    pub fn grad(&self) -> Option<ArrayD<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    fn accumulate_grad(&self, g: &ArrayD<f64>) {
        if !self.inner.needs_grad {
            return;
        }
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(existing) => *existing += g,
            None => *slot = Some(g.clone()),
        }
    }

    /// Runs backpropagation from a scalar loss, accumulating gradients into
    /// every reachable leaf with `needs_grad`.
    pub fn backward(&self) {
        assert_eq!(
            self.inner.data.borrow().len(),
            1,
            "backward() must start from a scalar loss"
        );
        // Iterative post-order DFS over parents.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: std::collections::HashSet<u64> = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.inner.id);
        while let Some((node, child)) = stack.pop() {
            if child < node.inner.parents.len() {
                stack.push((node.clone(), child + 1));
                let parent = node.inner.parents[child].clone();
                if parent.inner.needs_grad && visited.insert(parent.inner.id) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }
        self.accumulate_grad(&ArrayD::ones(IxDyn(&[1])));
        for node in order.iter().rev() {
            if let Some(backward) = &node.inner.backward {
                let grad = node.inner.grad.borrow().clone();
                if let Some(g) = grad {
                    backward(&node.inner, &g);
                }
            }
        }
    }

    // ── elementwise binary ──────────────────────────────────────────────

    pub fn add(&self, other: &Tensor) -> Tensor {
        let out = &*self.inner.data.borrow() + &*other.inner.data.borrow();
        Tensor::new_node(
            out,
            vec![self.clone(), other.clone()],
            Some(Box::new(|node, g| {
                node.parents[0].accumulate_grad(g);
                node.parents[1].accumulate_grad(g);
            })),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        let out = &*self.inner.data.borrow() - &*other.inner.data.borrow();
        Tensor::new_node(
            out,
            vec![self.clone(), other.clone()],
            Some(Box::new(|node, g| {
                node.parents[0].accumulate_grad(g);
                node.parents[1].accumulate_grad(&(-g));
            })),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        let out = &*self.inner.data.borrow() * &*other.inner.data.borrow();
        Tensor::new_node(
            out,
            vec![self.clone(), other.clone()],
            Some(Box::new(|node, g| {
                let a = node.parents[0].inner.data.borrow().clone();
                let b = node.parents[1].inner.data.borrow().clone();
                node.parents[0].accumulate_grad(&(g * &b));
                node.parents[1].accumulate_grad(&(g * &a));
            })),
        )
    }

    // ── elementwise with scalars / constants ────────────────────────────

    pub fn scale(&self, c: f64) -> Tensor {
        let out = self.inner.data.borrow().mapv(|x| x * c);
        Tensor::new_node(
            out,
            vec![self.clone()],
            Some(Box::new(move |node, g| {
                node.parents[0].accumulate_grad(&g.mapv(|x| x * c));
            })),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let out = self.inner.data.borrow().mapv(|x| x + c);
        Tensor::new_node(
            out,
            vec![self.clone()],
            Some(Box::new(|node, g| {
                node.parents[0].accumulate_grad(g);
            })),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    /// Elementwise max(x, c): clamps from below, subgradient 1 at x >= c.
    pub fn clamp_min(&self, c: f64) -> Tensor {
        let x = self.inner.data.borrow().clone();
        let out = x.mapv(|v| v.max(c));
        Tensor::new_node(
            out,
            vec![self.clone()],
            Some(Box::new(move |node, g| {
                let x = node.parents[0].inner.data.borrow().clone();
                let mut gx = g.clone();
                ndarray::Zip::from(&mut gx).and(&x).for_each(|gi, &xi| {
                    if xi < c {
                        *gi = 0.0;
                    }
                });
                node.parents[0].accumulate_grad(&gx);
            })),
        )
    }

    /// Elementwise min with a constant array of the same shape.
    pub fn min_const(&self, c: ArrayD<f64>) -> Tensor {
        let x = self.inner.data.borrow().clone();
        let mut out = x.clone();
        ndarray::Zip::from(&mut out).and(&c).for_each(|o, &ci| *o = o.min(ci));
        Tensor::new_node(
            out,
            vec![self.clone()],
            Some(Box::new(move |node, g| {
                let x = node.parents[0].inner.data.borrow().clone();
                let mut gx = g.clone();
                ndarray::Zip::from(&mut gx).and(&x).and(&c).for_each(|gi, &xi, &ci| {
                    if xi > ci {
                        *gi = 0.0;
                    }
                });
                node.parents[0].accumulate_grad(&gx);
            })),
        )
    }

    /// Elementwise max with a constant array of the same shape.
    pub fn max_const(&self, c: ArrayD<f64>) -> Tensor {
        let x = self.inner.data.borrow().clone();
        let mut out = x.clone();
        ndarray::Zip::from(&mut out).and(&c).for_each(|o, &ci| *o = o.max(ci));
        Tensor::new_node(
            out,
            vec![self.clone()],
            Some(Box::new(move |node, g| {
                let x = node.parents[0].inner.data.borrow().clone();
                let mut gx = g.clone();
                ndarray::Zip::from(&mut gx).and(&x).and(&c).for_each(|gi, &xi, &ci| {
                    if xi < ci {
                        *gi = 0.0;
                    }
                });
                node.parents[0].accumulate_grad(&gx);
            })),
        )
    }

    // ── elementwise nonlinearities ──────────────────────────────────────

    pub fn exp(&self) -> Tensor {
        let out = self.inner.data.borrow().mapv(f64::exp);
        Tensor::new_node(
            out,
            vec![self.clone()],
            Some(Box::new(|node, g| {
                let y = node.data.borrow().clone();
                node.parents[0].accumulate_grad(&(g * &y));
            })),
        )
    }

    pub fn ln(&self) -> Tensor {
        let out = self.inner.data.borrow().mapv(f64::ln);
        Tensor::new_node(
            out,
            vec![self.clone()],
            Some(Box::new(|node, g| {
                let x = node.parents[0].inner.data.borrow().clone();
                node.parents[0].accumulate_grad(&(g / &x));
            })),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let out = self.inner.data.borrow().mapv(sigmoid);
        Tensor::new_node(
            out,
            vec![self.clone()],
            Some(Box::new(|node, g| {
                let y = node.data.borrow().clone();
                let dy = y.mapv(|s| s * (1.0 - s));
                node.parents[0].accumulate_grad(&(g * &dy));
            })),
        )
    }

    pub fn relu(&self) -> Tensor {
        let out = self.inner.data.borrow().mapv(|x| x.max(0.0));
        Tensor::new_node(
            out,
            vec![self.clone()],
            Some(Box::new(|node, g| {
                let x = node.parents[0].inner.data.borrow().clone();
                let mut gx = g.clone();
                ndarray::Zip::from(&mut gx).and(&x).for_each(|gi, &xi| {
                    if xi <= 0.0 {
                        *gi = 0.0;
                    }
                });
                node.parents[0].accumulate_grad(&gx);
            })),
        )
    }

    /// Numerically stable ln(1 + e^x); derivative is sigmoid(x).
    pub fn softplus(&self) -> Tensor {
        let out = self.inner.data.borrow().mapv(softplus);
        Tensor::new_node(
            out,
            vec![self.clone()],
            Some(Box::new(|node, g| {
                let x = node.parents[0].inner.data.borrow().clone();
                let dy = x.mapv(sigmoid);
                node.parents[0].accumulate_grad(&(g * &dy));
            })),
        )
    }

    /// Elementwise x^p (x must stay positive where p is fractional).
    pub fn pow_scalar(&self, p: f64) -> Tensor {
        let out = self.inner.data.borrow().mapv(|x| x.powf(p));
        Tensor::new_node(
            out,
            vec![self.clone()],
            Some(Box::new(move |node, g| {
                let x = node.parents[0].inner.data.borrow().clone();
                let dy = x.mapv(|v| p * v.powf(p - 1.0));
                node.parents[0].accumulate_grad(&(g * &dy));
            })),
        )
    }

    // ── matrix ops (2-d) ────────────────────────────────────────────────

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let a = self.to_matrix();
        let b = other.to_matrix();
        assert_eq!(a.ncols(), b.nrows(), "matmul inner dimension mismatch");
        let out = a.dot(&b).into_dyn();
        Tensor::new_node(
            out,
            vec![self.clone(), other.clone()],
            Some(Box::new(|node, g| {
                let g2: Array2<f64> = g.clone().into_dimensionality().unwrap();
                let a = node.parents[0].to_matrix();
                let b = node.parents[1].to_matrix();
                if node.parents[0].inner.needs_grad {
                    node.parents[0].accumulate_grad(&g2.dot(&b.t()).into_dyn());
                }
                if node.parents[1].inner.needs_grad {
                    node.parents[1].accumulate_grad(&a.t().dot(&g2).into_dyn());
                }
            })),
        )
    }

    pub fn t(&self) -> Tensor {
        let out = self.to_matrix().t().to_owned().into_dyn();
        Tensor::new_node(
            out,
            vec![self.clone()],
            Some(Box::new(|node, g| {
                let g2: Array2<f64> = g.clone().into_dimensionality().unwrap();
                node.parents[0].accumulate_grad(&g2.t().to_owned().into_dyn());
            })),
        )
    }

    /// Adds a length-d bias vector to every row of a T×d matrix.
    pub fn add_row(&self, bias: &Tensor) -> Tensor {
        let x = self.to_matrix();
        let b = bias.data();
        assert_eq!(b.ndim(), 1);
        let b1: Array1<f64> = b.into_dimensionality().unwrap();
        assert_eq!(x.ncols(), b1.len(), "bias width mismatch");
        let out = (&x + &b1).into_dyn();
        Tensor::new_node(
            out,
            vec![self.clone(), bias.clone()],
            Some(Box::new(|node, g| {
                let g2: Array2<f64> = g.clone().into_dimensionality().unwrap();
                node.parents[0].accumulate_grad(&g2.clone().into_dyn());
                if node.parents[1].inner.needs_grad {
                    node.parents[1].accumulate_grad(&g2.sum_axis(Axis(0)).into_dyn());
                }
            })),
        )
    }

    // ── reductions / row ops ────────────────────────────────────────────

    pub fn sum(&self) -> Tensor {
        let s = self.inner.data.borrow().sum();
        Tensor::new_node(
            ArrayD::from_elem(IxDyn(&[1]), s),
            vec![self.clone()],
            Some(Box::new(|node, g| {
                let gs = g[[0]];
                let shape = node.parents[0].inner.data.borrow().raw_dim();
                node.parents[0].accumulate_grad(&ArrayD::from_elem(shape, gs));
            })),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.inner.data.borrow().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Row sums of a T×d matrix, keeping the row axis: output is T×1.
    pub fn sum_rows(&self) -> Tensor {
        let x = self.to_matrix();
        let out = x
            .sum_axis(Axis(1))
            .into_shape_with_order((x.nrows(), 1))
            .unwrap()
            .into_dyn();
        Tensor::new_node(
            out,
            vec![self.clone()],
            Some(Box::new(|node, g| {
                let g2: Array2<f64> = g.clone().into_dimensionality().unwrap();
                let (t, d) = {
                    let p = node.parents[0].to_matrix();
                    (p.nrows(), p.ncols())
                };
                let mut gx = Array2::<f64>::zeros((t, d));
                for i in 0..t {
                    let gi = g2[[i, 0]];
                    gx.row_mut(i).fill(gi);
                }
                node.parents[0].accumulate_grad(&gx.into_dyn());
            })),
        )
    }

    /// Scales row t of a T×d matrix by s[t] (s is T×1).
    pub fn rows_scale(&self, s: &Tensor) -> Tensor {
        let x = self.to_matrix();
        let sv = s.to_matrix();
        assert_eq!(sv.ncols(), 1);
        assert_eq!(sv.nrows(), x.nrows());
        let mut out = x.clone();
        for i in 0..x.nrows() {
            out.row_mut(i).mapv_inplace(|v| v * sv[[i, 0]]);
        }
        Tensor::new_node(
            out.into_dyn(),
            vec![self.clone(), s.clone()],
            Some(Box::new(|node, g| {
                let g2: Array2<f64> = g.clone().into_dimensionality().unwrap();
                let x = node.parents[0].to_matrix();
                let sv = node.parents[1].to_matrix();
                if node.parents[0].inner.needs_grad {
                    let mut gx = g2.clone();
                    for i in 0..gx.nrows() {
                        gx.row_mut(i).mapv_inplace(|v| v * sv[[i, 0]]);
                    }
                    node.parents[0].accumulate_grad(&gx.into_dyn());
                }
                if node.parents[1].inner.needs_grad {
                    let mut gs = Array2::<f64>::zeros((x.nrows(), 1));
                    for i in 0..x.nrows() {
                        gs[[i, 0]] = g2.row(i).dot(&x.row(i));
                    }
                    node.parents[1].accumulate_grad(&gs.into_dyn());
                }
            })),
        )
    }

    /// Multiplies each row by a fixed 0/1 weight (masking padded positions).
    pub fn scale_rows_const(&self, weights: Vec<f64>) -> Tensor {
        let x = self.to_matrix();
        assert_eq!(weights.len(), x.nrows());
        let mut out = x.clone();
        for (i, w) in weights.iter().enumerate() {
            out.row_mut(i).mapv_inplace(|v| v * w);
        }
        Tensor::new_node(
            out.into_dyn(),
            vec![self.clone()],
            Some(Box::new(move |node, g| {
                let g2: Array2<f64> = g.clone().into_dimensionality().unwrap();
                let mut gx = g2;
                for (i, w) in weights.iter().enumerate() {
                    gx.row_mut(i).mapv_inplace(|v| v * w);
                }
                node.parents[0].accumulate_grad(&gx.into_dyn());
            })),
        )
    }

    /// Gathers rows by index; duplicates allowed (backward scatter-adds).
    pub fn select_rows(&self, indices: Vec<usize>) -> Tensor {
        let x = self.to_matrix();
        let mut out = Array2::<f64>::zeros((indices.len(), x.ncols()));
        for (k, &i) in indices.iter().enumerate() {
            out.row_mut(k).assign(&x.row(i));
        }
        Tensor::new_node(
            out.into_dyn(),
            vec![self.clone()],
            Some(Box::new(move |node, g| {
                let g2: Array2<f64> = g.clone().into_dimensionality().unwrap();
                let p = node.parents[0].to_matrix();
                let mut gx = Array2::<f64>::zeros((p.nrows(), p.ncols()));
                for (k, &i) in indices.iter().enumerate() {
                    let mut row = gx.row_mut(i);
                    row += &g2.row(k);
                }
                node.parents[0].accumulate_grad(&gx.into_dyn());
            })),
        )
    }

    /// Columns [a, b) of a T×d matrix.
    pub fn slice_cols(&self, a: usize, b: usize) -> Tensor {
        let x = self.to_matrix();
        let out = x.slice(ndarray::s![.., a..b]).to_owned().into_dyn();
        Tensor::new_node(
            out,
            vec![self.clone()],
            Some(Box::new(move |node, g| {
                let g2: Array2<f64> = g.clone().into_dimensionality().unwrap();
                let p = node.parents[0].to_matrix();
                let mut gx = Array2::<f64>::zeros((p.nrows(), p.ncols()));
                gx.slice_mut(ndarray::s![.., a..b]).assign(&g2);
                node.parents[0].accumulate_grad(&gx.into_dyn());
            })),
        )
    }

    pub fn concat_cols(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let mats: Vec<Array2<f64>> = parts.iter().map(|p| p.to_matrix()).collect();
        let views: Vec<_> = mats.iter().map(|m| m.view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).unwrap().into_dyn();
        let widths: Vec<usize> = mats.iter().map(|m| m.ncols()).collect();
        Tensor::new_node(
            out,
            parts.to_vec(),
            Some(Box::new(move |node, g| {
                let g2: Array2<f64> = g.clone().into_dimensionality().unwrap();
                let mut start = 0;
                for (i, w) in widths.iter().enumerate() {
                    let gp = g2.slice(ndarray::s![.., start..start + w]).to_owned();
                    node.parents[i].accumulate_grad(&gp.into_dyn());
                    start += w;
                }
            })),
        )
    }

    pub fn concat_rows(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let mats: Vec<Array2<f64>> = parts.iter().map(|p| p.to_matrix()).collect();
        let views: Vec<_> = mats.iter().map(|m| m.view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).unwrap().into_dyn();
        let heights: Vec<usize> = mats.iter().map(|m| m.nrows()).collect();
        Tensor::new_node(
            out,
            parts.to_vec(),
            Some(Box::new(move |node, g| {
                let g2: Array2<f64> = g.clone().into_dimensionality().unwrap();
                let mut start = 0;
                for (i, h) in heights.iter().enumerate() {
                    let gp = g2.slice(ndarray::s![start..start + h, ..]).to_owned();
                    node.parents[i].accumulate_grad(&gp.into_dyn());
                    start += h;
                }
            })),
        )
    }

    /// Averages row pairs (2t, 2t+1); an odd tail row passes through.
    /// Output has ceil(T/2) rows.
    pub fn avg_pool_rows2(&self) -> Tensor {
        let x = self.to_matrix();
        let t = x.nrows();
        let to = t.div_ceil(2);
        let mut out = Array2::<f64>::zeros((to, x.ncols()));
        for i in 0..to {
            if 2 * i + 1 < t {
                let mean = (&x.row(2 * i) + &x.row(2 * i + 1)) / 2.0;
                out.row_mut(i).assign(&mean);
            } else {
                out.row_mut(i).assign(&x.row(2 * i));
            }
        }
        Tensor::new_node(
            out.into_dyn(),
            vec![self.clone()],
            Some(Box::new(move |node, g| {
                let g2: Array2<f64> = g.clone().into_dimensionality().unwrap();
                let mut gx = Array2::<f64>::zeros((t, g2.ncols()));
                for i in 0..g2.nrows() {
                    if 2 * i + 1 < t {
                        let half = g2.row(i).mapv(|v| v / 2.0);
                        gx.row_mut(2 * i).assign(&half);
                        gx.row_mut(2 * i + 1).assign(&half);
                    } else {
                        gx.row_mut(2 * i).assign(&g2.row(i));
                    }
                }
                node.parents[0].accumulate_grad(&gx.into_dyn());
            })),
        )
    }

    /// Row-wise softmax where masked columns get zero weight. A row whose
    /// keys are all masked becomes all-zero instead of NaN.
    pub fn masked_softmax_rows(&self, key_mask: &[bool]) -> Tensor {
        let x = self.to_matrix();
        assert_eq!(key_mask.len(), x.ncols(), "key mask width mismatch");
        let mask = key_mask.to_vec();
        let mut out = Array2::<f64>::zeros((x.nrows(), x.ncols()));
        for i in 0..x.nrows() {
            let mut mx = f64::NEG_INFINITY;
            for j in 0..x.ncols() {
                if mask[j] {
                    mx = mx.max(x[[i, j]]);
                }
            }
            if mx == f64::NEG_INFINITY {
                continue; // fully masked row stays zero
            }
            let mut denom = 0.0;
            for j in 0..x.ncols() {
                if mask[j] {
                    let e = (x[[i, j]] - mx).exp();
                    out[[i, j]] = e;
                    denom += e;
                }
            }
            for j in 0..x.ncols() {
                out[[i, j]] /= denom;
            }
        }
        Tensor::new_node(
            out.into_dyn(),
            vec![self.clone()],
            Some(Box::new(|node, g| {
                let g2: Array2<f64> = g.clone().into_dimensionality().unwrap();
                let y: Array2<f64> = node.data.borrow().clone().into_dimensionality().unwrap();
                let mut gx = Array2::<f64>::zeros((y.nrows(), y.ncols()));
                for i in 0..y.nrows() {
                    let dot = g2.row(i).dot(&y.row(i));
                    for j in 0..y.ncols() {
                        gx[[i, j]] = y[[i, j]] * (g2[[i, j]] - dot);
                    }
                }
                node.parents[0].accumulate_grad(&gx.into_dyn());
            })),
        )
    }

    /// Plain row-wise softmax over all columns.
    pub fn softmax_rows(&self) -> Tensor {
        let all = vec![true; self.cols()];
        self.masked_softmax_rows(&all)
    }

    /// Row-wise log-sum-exp of a T×d matrix; output T×1.
    pub fn logsumexp_rows(&self) -> Tensor {
        let x = self.to_matrix();
        let mut out = Array2::<f64>::zeros((x.nrows(), 1));
        for i in 0..x.nrows() {
            let mx = x.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = x.row(i).iter().map(|&v| (v - mx).exp()).sum();
            out[[i, 0]] = mx + s.ln();
        }
        Tensor::new_node(
            out.into_dyn(),
            vec![self.clone()],
            Some(Box::new(|node, g| {
                let g2: Array2<f64> = g.clone().into_dimensionality().unwrap();
                let x = node.parents[0].to_matrix();
                let lse: Array2<f64> = node.data.borrow().clone().into_dimensionality().unwrap();
                let mut gx = Array2::<f64>::zeros((x.nrows(), x.ncols()));
                for i in 0..x.nrows() {
                    for j in 0..x.ncols() {
                        gx[[i, j]] = (x[[i, j]] - lse[[i, 0]]).exp() * g2[[i, 0]];
                    }
                }
                node.parents[0].accumulate_grad(&gx.into_dyn());
            })),
        )
    }

    /// Diagonal of a square matrix as an N×1 column.
    pub fn diag(&self) -> Tensor {
        let x = self.to_matrix();
        assert_eq!(x.nrows(), x.ncols(), "diag() needs a square matrix");
        let n = x.nrows();
        let mut out = Array2::<f64>::zeros((n, 1));
        for i in 0..n {
            out[[i, 0]] = x[[i, i]];
        }
        Tensor::new_node(
            out.into_dyn(),
            vec![self.clone()],
            Some(Box::new(move |node, g| {
                let g2: Array2<f64> = g.clone().into_dimensionality().unwrap();
                let mut gx = Array2::<f64>::zeros((n, n));
                for i in 0..n {
                    gx[[i, i]] = g2[[i, 0]];
                }
                node.parents[0].accumulate_grad(&gx.into_dyn());
            })),
        )
    }

    /// Layer normalization over the last axis of a T×d matrix, with affine
    /// parameters gamma and beta (length d).
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
        let x = self.to_matrix();
        let gm: Array1<f64> = gamma.data().into_dimensionality().unwrap();
        let bt: Array1<f64> = beta.data().into_dimensionality().unwrap();
        let d = x.ncols();
        assert_eq!(gm.len(), d);
        assert_eq!(bt.len(), d);
        let mut out = Array2::<f64>::zeros((x.nrows(), d));
        for i in 0..x.nrows() {
            let row = x.row(i);
            let mean = row.mean().unwrap();
            let var = row.mapv(|v| (v - mean).powi(2)).mean().unwrap();
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[[i, j]] = (x[[i, j]] - mean) * inv * gm[j] + bt[j];
            }
        }
        Tensor::new_node(
            out.into_dyn(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            Some(Box::new(move |node, g| {
                let g2: Array2<f64> = g.clone().into_dimensionality().unwrap();
                let x = node.parents[0].to_matrix();
                let gm: Array1<f64> = node.parents[1].data().into_dimensionality().unwrap();
                let d = x.ncols();
                let df = d as f64;
                let mut gx = Array2::<f64>::zeros((x.nrows(), d));
                let mut ggamma = Array1::<f64>::zeros(d);
                let mut gbeta = Array1::<f64>::zeros(d);
                for i in 0..x.nrows() {
                    let row = x.row(i);
                    let mean = row.mean().unwrap();
                    let var = row.mapv(|v| (v - mean).powi(2)).mean().unwrap();
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Array1<f64> = row.mapv(|v| (v - mean) * inv);
                    let gy = g2.row(i);
                    let gyg: Array1<f64> =
                        Array1::from_iter(gy.iter().zip(gm.iter()).map(|(a, b)| a * b));
                    let m1 = gyg.sum() / df;
                    let m2 = gyg
                        .iter()
                        .zip(xhat.iter())
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / df;
                    for j in 0..d {
                        gx[[i, j]] = (gyg[j] - m1 - xhat[j] * m2) * inv;
                        ggamma[j] += gy[j] * xhat[j];
                        gbeta[j] += gy[j];
                    }
                }
                node.parents[0].accumulate_grad(&gx.into_dyn());
                if node.parents[1].inner.needs_grad {
                    node.parents[1].accumulate_grad(&ggamma.into_dyn());
                }
                if node.parents[2].inner.needs_grad {
                    node.parents[2].accumulate_grad(&gbeta.into_dyn());
                }
            })),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let x = self.inner.data.borrow().clone();
        let old_shape: Vec<usize> = x.shape().to_vec();
        let out = x.into_shape_with_order(IxDyn(shape)).expect("reshape size mismatch");
        Tensor::new_node(
            out,
            vec![self.clone()],
            Some(Box::new(move |node, g| {
                let gx = g.clone().into_shape_with_order(IxDyn(&old_shape)).unwrap();
                node.parents[0].accumulate_grad(&gx);
            })),
        )
    }

    // ── 2-d convolution over (N, C, H, W) ───────────────────────────────

    /// Convolution with zero padding. `weight` is (Cout, Cin, kh, kw),
    /// `bias` has length Cout.
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: &Tensor,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Tensor {
        let x = self.data();
        let w = weight.data();
        let b = bias.data();
        let (n, cin, h, wd) = dims4(&x);
        let (cout, cin_w, kh, kw) = dims4(&w);
        assert_eq!(cin, cin_w, "conv2d channel mismatch");
        assert_eq!(b.len(), cout);
        let (sh, sw) = stride;
        let (ph, pw) = pad;
        let ho = (h + 2 * ph - kh) / sh + 1;
        let wo = (wd + 2 * pw - kw) / sw + 1;
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[n, cout, ho, wo]));
        {
            let xs = x.as_slice().unwrap();
            let ws = w.as_slice().unwrap();
            let bs = b.as_slice().unwrap();
            let os = out.as_slice_mut().unwrap();
            conv2d_forward(
                xs, ws, bs, os, n, cin, h, wd, cout, kh, kw, sh, sw, ph, pw, ho, wo,
            );
        }
        let params = (n, cin, h, wd, cout, kh, kw, sh, sw, ph, pw, ho, wo);
        Tensor::new_node(
            out,
            vec![self.clone(), weight.clone(), bias.clone()],
            Some(Box::new(move |node, g| {
                let (n, cin, h, wd, cout, kh, kw, sh, sw, ph, pw, ho, wo) = params;
                let x = node.parents[0].data();
                let w = node.parents[1].data();
                let gs = g.as_slice().unwrap();
                if node.parents[0].inner.needs_grad {
                    let mut gx = ArrayD::<f64>::zeros(IxDyn(&[n, cin, h, wd]));
                    conv2d_backward_input(
                        w.as_slice().unwrap(),
                        gs,
                        gx.as_slice_mut().unwrap(),
                        n, cin, h, wd, cout, kh, kw, sh, sw, ph, pw, ho, wo,
                    );
                    node.parents[0].accumulate_grad(&gx);
                }
                if node.parents[1].inner.needs_grad {
                    let mut gw = ArrayD::<f64>::zeros(IxDyn(&[cout, cin, kh, kw]));
                    conv2d_backward_weight(
                        x.as_slice().unwrap(),
                        gs,
                        gw.as_slice_mut().unwrap(),
                        n, cin, h, wd, cout, kh, kw, sh, sw, ph, pw, ho, wo,
                    );
                    node.parents[1].accumulate_grad(&gw);
                }
                if node.parents[2].inner.needs_grad {
                    let mut gb = ArrayD::<f64>::zeros(IxDyn(&[cout]));
                    {
                        let gbs = gb.as_slice_mut().unwrap();
                        for ni in 0..n {
                            for co in 0..cout {
                                let base = ((ni * cout) + co) * ho * wo;
                                let mut s = 0.0;
                                for k in 0..ho * wo {
                                    s += gs[base + k];
                                }
                                gbs[co] += s;
                            }
                        }
                    }
                    node.parents[2].accumulate_grad(&gb);
                }
            })),
        )
    }

    /// Average pooling over the two trailing spatial axes of (N, C, H, W).
    pub fn avg_pool2d(&self, k: usize, s: usize) -> Tensor {
        let x = self.data();
        let (n, c, h, w) = dims4(&x);
        let ho = (h - k) / s + 1;
        let wo = (w - k) / s + 1;
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[n, c, ho, wo]));
        let norm = 1.0 / (k * k) as f64;
        for ni in 0..n {
            for ci in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for dy in 0..k {
                            for dx in 0..k {
                                acc += x[[ni, ci, oy * s + dy, ox * s + dx]];
                            }
                        }
                        out[[ni, ci, oy, ox]] = acc * norm;
                    }
                }
            }
        }
        let params = (n, c, h, w, k, s, ho, wo);
        Tensor::new_node(
            out,
            vec![self.clone()],
            Some(Box::new(move |node, g| {
                let (n, c, h, w, k, s, ho, wo) = params;
                let norm = 1.0 / (k * k) as f64;
                let mut gx = ArrayD::<f64>::zeros(IxDyn(&[n, c, h, w]));
                for ni in 0..n {
                    for ci in 0..c {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let gv = g[[ni, ci, oy, ox]] * norm;
                                for dy in 0..k {
                                    for dx in 0..k {
                                        gx[[ni, ci, oy * s + dy, ox * s + dx]] += gv;
                                    }
                                }
                            }
                        }
                    }
                }
                node.parents[0].accumulate_grad(&gx);
            })),
        )
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn dims4(a: &ArrayD<f64>) -> (usize, usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 4, "expected a 4-d tensor, got {:?}", s);
    (s[0], s[1], s[2], s[3])
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    x: &[f64], w: &[f64], b: &[f64], out: &mut [f64],
    n: usize, cin: usize, h: usize, wd: usize,
    cout: usize, kh: usize, kw: usize,
    sh: usize, sw: usize, ph: usize, pw: usize,
    ho: usize, wo: usize,
) {
    for ni in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        let wbase = ((co * cin + ci) * kh) * kw;
                        let xbase = (ni * cin + ci) * h * wd;
                        for ky in 0..kh {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += w[wbase + ky * kw + kx]
                                    * x[xbase + iy as usize * wd + ix as usize];
                            }
                        }
                    }
                    out[((ni * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_input(
    w: &[f64], g: &[f64], gx: &mut [f64],
    n: usize, cin: usize, h: usize, wd: usize,
    cout: usize, kh: usize, kw: usize,
    sh: usize, sw: usize, ph: usize, pw: usize,
    ho: usize, wo: usize,
) {
    for ni in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let gv = g[((ni * cout + co) * ho + oy) * wo + ox];
                    if gv == 0.0 {
                        continue;
                    }
                    for ci in 0..cin {
                        let wbase = ((co * cin + ci) * kh) * kw;
                        let xbase = (ni * cin + ci) * h * wd;
                        for ky in 0..kh {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                gx[xbase + iy as usize * wd + ix as usize] +=
                                    gv * w[wbase + ky * kw + kx];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_weight(
    x: &[f64], g: &[f64], gw: &mut [f64],
    n: usize, cin: usize, h: usize, wd: usize,
    cout: usize, kh: usize, kw: usize,
    sh: usize, sw: usize, ph: usize, pw: usize,
    ho: usize, wo: usize,
) {
    for ni in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let gv = g[((ni * cout + co) * ho + oy) * wo + ox];
                    if gv == 0.0 {
                        continue;
                    }
                    for ci in 0..cin {
                        let wbase = ((co * cin + ci) * kh) * kw;
                        let xbase = (ni * cin + ci) * h * wd;
                        for ky in 0..kh {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                gw[wbase + ky * kw + kx] +=
                                    gv * x[xbase + iy as usize * wd + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}
