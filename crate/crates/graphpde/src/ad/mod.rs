//! Tape-based reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! The engine records a forward pass as a flat list of nodes; each node owns
//! its output value and a backward closure that maps the output gradient to
//! gradients for its parents. Nodes are appended in topological order, so the
//! backward sweep is a single reverse pass with accumulation.
//!
//! The engine is generic over [`Scalar`] so the same model code runs in `f32`
//! for training and `f64` for finite-difference gradient checks (see
//! [`gradcheck`]).
//!
//! ```
//! use graphpde::ad::Tape;
//! use ndarray::arr1;
//!
//! let tape: Tape<f64> = Tape::new();
//! let x = tape.leaf(arr1(&[2.0, 3.0]).into_dyn());
//! let y = tape.sum_all(tape.mul(x, x)); // y = Σ x²
//! assert_eq!(tape.value(y)[[0]], 13.0);
//! let grads = tape.backward(y);
//! assert_eq!(grads.get(x).unwrap()[[0]], 4.0); // dy/dx = 2x
//! ```

pub mod gradcheck;

use std::cell::RefCell;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::rc::Rc;

use ndarray::{ArrayD, Axis, Ix1, Ix2};

/// Additive mask value standing in for −∞ in attention logits.
///
/// Large enough that a masked logit underflows to exactly zero after the
/// max-subtracted softmax, small enough to stay finite in `f32`.
pub const NEG_MASK: f64 = -1.0e9;

/// Floating-point element type the tape can operate on.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + ndarray::ScalarOperand
    + ndarray::LinalgScalar
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;
    fn from_f64(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("finite f64 converts")
    }
    fn to_f64(self) -> f64 {
        <f64 as num_traits::NumCast>::from(self).expect("scalar converts to f64")
    }
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(src: &[u8]) -> Self;
    const BYTES: usize;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(src: &[u8]) -> Self {
        f32::from_le_bytes(src[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(src: &[u8]) -> Self {
        f64::from_le_bytes(src[..8].try_into().unwrap())
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

type BackFn<F> = Box<dyn Fn(&ArrayD<F>) -> Vec<ArrayD<F>>>;

struct Node<F: Scalar> {
    value: Rc<ArrayD<F>>,
    parents: Vec<Var>,
    backward: Option<BackFn<F>>,
}

/// Gradients keyed by [`Var`], produced by [`Tape::backward`].
pub struct Grads<F: Scalar> {
    g: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Grads<F> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<F>> {
        self.g.get(v.0).and_then(|o| o.as_ref())
    }
    pub fn take(&mut self, v: Var) -> Option<ArrayD<F>> {
        self.g.get_mut(v.0).and_then(|o| o.take())
    }
}

/// Recording tape. Not thread-safe by design: build one per forward pass.
pub struct Tape<F: Scalar> {
    nodes: RefCell<Vec<Node<F>>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<F>, parents: Vec<Var>, backward: Option<BackFn<F>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward,
        });
        Var(nodes.len() - 1)
    }

    /// Record an input (leaf) tensor. Leaves receive gradients but have no
    /// backward function.
    pub fn leaf(&self, value: ArrayD<F>) -> Var {
        self.push(value, vec![], None)
    }

    pub fn leaf1(&self, value: ndarray::Array1<F>) -> Var {
        self.leaf(value.into_dyn())
    }

    pub fn leaf2(&self, value: ndarray::Array2<F>) -> Var {
        self.leaf(value.into_dyn())
    }

    pub fn scalar(&self, value: F) -> Var {
        self.leaf(ndarray::arr1(&[value]).into_dyn())
    }

    /// Clone out the value of a recorded node.
    pub fn value(&self, v: Var) -> ArrayD<F> {
        (*self.nodes.borrow()[v.0].value).clone()
    }

    fn rc(&self, v: Var) -> Rc<ArrayD<F>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Reverse sweep from a scalar root (any one-element tensor).
    pub fn backward(&self, root: Var) -> Grads<F> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.0].value.len(),
            1,
            "backward root must be a one-element tensor"
        );
        let mut g: Vec<Option<ArrayD<F>>> = vec![None; root.0 + 1];
        g[root.0] = Some(ArrayD::ones(nodes[root.0].value.raw_dim()));
        for i in (0..=root.0).rev() {
            if g[i].is_none() {
                continue;
            }
            let Some(back) = nodes[i].backward.as_ref() else {
                continue;
            };
            let gout = g[i].take().expect("checked above");
            let pg = back(&gout);
            g[i] = Some(gout);
            debug_assert_eq!(pg.len(), nodes[i].parents.len());
            for (p, dp) in nodes[i].parents.iter().zip(pg) {
                debug_assert_eq!(
                    dp.shape(),
                    nodes[p.0].value.shape(),
                    "gradient shape mismatch for parent"
                );
                match &mut g[p.0] {
                    Some(acc) => *acc += &dp,
                    slot @ None => *slot = Some(dp),
                }
            }
        }
        Grads { g }
    }

    // ---------------------------------------------------------------
    // elementwise arithmetic
    // ---------------------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.rc(a), self.rc(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let out = &*va + &*vb;
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.rc(a), self.rc(b));
        assert_eq!(va.shape(), vb.shape(), "sub: shape mismatch");
        let out = &*va - &*vb;
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| vec![g.clone(), -g.clone()])),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.rc(a), self.rc(b));
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let out = &*va * &*vb;
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| vec![g * &*vb, g * &*va])),
        )
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.rc(a), self.rc(b));
        assert_eq!(va.shape(), vb.shape(), "div: shape mismatch");
        let out = &*va / &*vb;
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                let da = g / &*vb;
                let db = -(g * &*va) / (&*vb * &*vb);
                vec![da, db]
            })),
        )
    }

    pub fn neg(&self, a: Var) -> Var {
        let va = self.rc(a);
        self.push(
            -(*va).clone(),
            vec![a],
            Some(Box::new(move |g| vec![-g.clone()])),
        )
    }

    pub fn scale(&self, a: Var, c: F) -> Var {
        let va = self.rc(a);
        self.push(
            &*va * c,
            vec![a],
            Some(Box::new(move |g| vec![g * c])),
        )
    }

    pub fn add_const(&self, a: Var, c: F) -> Var {
        let va = self.rc(a);
        self.push(&*va + c, vec![a], Some(Box::new(move |g| vec![g.clone()])))
    }

    pub fn sqr(&self, a: Var) -> Var {
        let va = self.rc(a);
        let out = &*va * &*va;
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| vec![g * &(&*va * F::from_f64(2.0))])),
        )
    }

    pub fn sqrt(&self, a: Var) -> Var {
        let va = self.rc(a);
        let out = va.mapv(|x| x.sqrt());
        let cached = out.clone();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let half = F::from_f64(0.5);
                vec![g * &cached.mapv(|y| half / y)]
            })),
        )
    }

    pub fn exp(&self, a: Var) -> Var {
        let va = self.rc(a);
        let out = va.mapv(|x| x.exp());
        let cached = out.clone();
        self.push(out, vec![a], Some(Box::new(move |g| vec![g * &cached])))
    }

    // ---------------------------------------------------------------
    // activations
    // ---------------------------------------------------------------

    /// GeLU with the tanh approximation.
    pub fn gelu(&self, a: Var) -> Var {
        let va = self.rc(a);
        let c0 = F::from_f64(0.7978845608028654); // sqrt(2/π)
        let c1 = F::from_f64(0.044715);
        let half = F::from_f64(0.5);
        let one = F::one();
        let three = F::from_f64(3.0);
        let out = va.mapv(|x| {
            let t = (c0 * (x + c1 * x * x * x)).tanh();
            half * x * (one + t)
        });
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let dx = va.mapv(|x| {
                    let u = c0 * (x + c1 * x * x * x);
                    let t = u.tanh();
                    half * (one + t) + half * x * (one - t * t) * c0 * (one + three * c1 * x * x)
                });
                vec![g * &dx]
            })),
        )
    }

    /// Leaky ReLU (slope on the negative side) followed by a hard clamp to
    /// `[-bound, bound]`. Gradient is zero outside the clamp interval.
    pub fn leaky_clip(&self, a: Var, slope: F, bound: F) -> Var {
        let va = self.rc(a);
        let out = va.mapv(|x| {
            let y = if x < F::zero() { slope * x } else { x };
            y.max(-bound).min(bound)
        });
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let dx = va.mapv(|x| {
                    let (y, d) = if x < F::zero() {
                        (slope * x, slope)
                    } else {
                        (x, F::one())
                    };
                    if y > bound || y < -bound {
                        F::zero()
                    } else {
                        d
                    }
                });
                vec![g * &dx]
            })),
        )
    }

    // ---------------------------------------------------------------
    // reductions
    // ---------------------------------------------------------------

    pub fn sum_all(&self, a: Var) -> Var {
        let va = self.rc(a);
        let s: F = va.iter().copied().sum();
        self.push(
            ndarray::arr1(&[s]).into_dyn(),
            vec![a],
            Some(Box::new(move |g| {
                let gs = g[[0]];
                vec![ArrayD::from_elem(va.raw_dim(), gs)]
            })),
        )
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.nodes.borrow()[a.0].value.len();
        let s = self.sum_all(a);
        self.scale(s, F::from_f64(1.0 / n as f64))
    }

    /// Column sums of a 2-D tensor: `[r, c] -> [c]`.
    pub fn sum_axis0(&self, a: Var) -> Var {
        let va = self.rc(a);
        assert_eq!(va.ndim(), 2, "sum_axis0: expects 2-D");
        let rows = va.shape()[0];
        let out = va
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .sum_axis(Axis(0))
            .into_dyn();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut da = ArrayD::zeros(va.raw_dim());
                let mut da2 = da.view_mut().into_dimensionality::<Ix2>().unwrap();
                for r in 0..rows {
                    da2.row_mut(r).assign(&g1);
                }
                vec![da]
            })),
        )
    }

    // ---------------------------------------------------------------
    // linear algebra (2-D)
    // ---------------------------------------------------------------

    /// `[m, k] · [k, n] -> [m, n]`
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.rc(a), self.rc(b));
        let a2 = va.view().into_dimensionality::<Ix2>().expect("matmul lhs 2-D");
        let b2 = vb.view().into_dimensionality::<Ix2>().expect("matmul rhs 2-D");
        assert_eq!(a2.shape()[1], b2.shape()[0], "matmul: inner dim mismatch");
        let out = a2.dot(&b2).into_dyn();
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let a2 = va.view().into_dimensionality::<Ix2>().unwrap();
                let b2 = vb.view().into_dimensionality::<Ix2>().unwrap();
                let da = g2.dot(&b2.t()).into_dyn();
                let db = a2.t().dot(&g2).into_dyn();
                vec![da, db]
            })),
        )
    }

    /// `[m, k] · [n, k]ᵀ -> [m, n]`
    pub fn matmul_nt(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.rc(a), self.rc(b));
        let a2 = va.view().into_dimensionality::<Ix2>().expect("matmul_nt lhs 2-D");
        let b2 = vb.view().into_dimensionality::<Ix2>().expect("matmul_nt rhs 2-D");
        assert_eq!(a2.shape()[1], b2.shape()[1], "matmul_nt: inner dim mismatch");
        let out = a2.dot(&b2.t()).into_dyn();
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let a2 = va.view().into_dimensionality::<Ix2>().unwrap();
                let b2 = vb.view().into_dimensionality::<Ix2>().unwrap();
                let da = g2.dot(&b2).into_dyn();
                let db = g2.t().dot(&a2).into_dyn();
                vec![da, db]
            })),
        )
    }

    /// Add a row vector to every row: `[r, c] + [c]`.
    pub fn add_row(&self, m: Var, v: Var) -> Var {
        let (vm, vv) = (self.rc(m), self.rc(v));
        assert_eq!(vm.ndim(), 2);
        assert_eq!(vv.ndim(), 1);
        assert_eq!(vm.shape()[1], vv.shape()[0], "add_row: width mismatch");
        let m2 = vm.view().into_dimensionality::<Ix2>().unwrap();
        let v1 = vv.view().into_dimensionality::<Ix1>().unwrap();
        let out = (&m2 + &v1).into_dyn();
        self.push(
            out,
            vec![m, v],
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let dv = g2.sum_axis(Axis(0)).into_dyn();
                vec![g.clone(), dv]
            })),
        )
    }

    /// Multiply every row elementwise by a row vector: `[r, c] ⊙ [c]`.
    pub fn mul_row(&self, m: Var, v: Var) -> Var {
        let (vm, vv) = (self.rc(m), self.rc(v));
        assert_eq!(vm.ndim(), 2);
        assert_eq!(vv.ndim(), 1);
        assert_eq!(vm.shape()[1], vv.shape()[0], "mul_row: width mismatch");
        let m2 = vm.view().into_dimensionality::<Ix2>().unwrap();
        let v1 = vv.view().into_dimensionality::<Ix1>().unwrap();
        let out = (&m2 * &v1).into_dyn();
        self.push(
            out,
            vec![m, v],
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let m2 = vm.view().into_dimensionality::<Ix2>().unwrap();
                let v1 = vv.view().into_dimensionality::<Ix1>().unwrap();
                let dm = (&g2 * &v1).into_dyn();
                let dv = (&g2 * &m2).sum_axis(Axis(0)).into_dyn();
                vec![dm, dv]
            })),
        )
    }

    // ---------------------------------------------------------------
    // softmax / normalization
    // ---------------------------------------------------------------

    /// Row-wise softmax of a 2-D tensor, with per-row max subtraction.
    pub fn softmax_rows(&self, a: Var) -> Var {
        let va = self.rc(a);
        assert_eq!(va.ndim(), 2);
        let a2 = va.view().into_dimensionality::<Ix2>().unwrap();
        let mut out = a2.to_owned();
        for mut row in out.rows_mut() {
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            row.mapv_inplace(|x| (x - mx).exp());
            let s: F = row.iter().copied().sum();
            row.mapv_inplace(|x| x / s);
        }
        let cached = out.clone();
        self.push(
            out.into_dyn(),
            vec![a],
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = (&g2 * &cached).into_dyn();
                let dots = (&g2 * &cached).sum_axis(Axis(1));
                let mut dx2 = dx.view_mut().into_dimensionality::<Ix2>().unwrap();
                for (r, mut row) in dx2.rows_mut().into_iter().enumerate() {
                    let d = dots[r];
                    let y = cached.row(r);
                    for (c, e) in row.iter_mut().enumerate() {
                        *e = *e - d * y[c];
                    }
                }
                vec![dx]
            })),
        )
    }

    /// Column-wise softmax of a 2-D tensor (softmax over axis 0 per channel).
    pub fn softmax_cols(&self, a: Var) -> Var {
        let va = self.rc(a);
        assert_eq!(va.ndim(), 2);
        let a2 = va.view().into_dimensionality::<Ix2>().unwrap();
        let mut out = a2.to_owned();
        for mut col in out.columns_mut() {
            let mx = col.iter().copied().fold(F::neg_infinity(), F::max);
            col.mapv_inplace(|x| (x - mx).exp());
            let s: F = col.iter().copied().sum();
            col.mapv_inplace(|x| x / s);
        }
        let cached = out.clone();
        self.push(
            out.into_dyn(),
            vec![a],
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let dots = (&g2 * &cached).sum_axis(Axis(0));
                let mut dx = (&g2 * &cached).into_dyn();
                let mut dx2 = dx.view_mut().into_dimensionality::<Ix2>().unwrap();
                for (c, mut col) in dx2.columns_mut().into_iter().enumerate() {
                    let d = dots[c];
                    let y = cached.column(c);
                    for (r, e) in col.iter_mut().enumerate() {
                        *e = *e - d * y[r];
                    }
                }
                vec![dx]
            })),
        )
    }

    /// Layer normalization over the last axis of a 2-D tensor with learnable
    /// gain and bias.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: F) -> Var {
        let (vx, vg, vb) = (self.rc(x), self.rc(gamma), self.rc(beta));
        assert_eq!(vx.ndim(), 2);
        let x2 = vx.view().into_dimensionality::<Ix2>().unwrap();
        let g1 = vg.view().into_dimensionality::<Ix1>().unwrap();
        let b1 = vb.view().into_dimensionality::<Ix1>().unwrap();
        let (rows, d) = (x2.shape()[0], x2.shape()[1]);
        assert_eq!(g1.len(), d);
        assert_eq!(b1.len(), d);
        let inv_d = F::from_f64(1.0 / d as f64);

        let mut xhat = ndarray::Array2::<F>::zeros((rows, d));
        let mut inv_std = ndarray::Array1::<F>::zeros(rows);
        for r in 0..rows {
            let row = x2.row(r);
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let is = F::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                xhat[[r, c]] = (row[c] - mean) * is;
            }
        }
        let out = (&xhat * &g1 + &b1).into_dyn();
        self.push(
            out,
            vec![x, gamma, beta],
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let g1v = vg.view().into_dimensionality::<Ix1>().unwrap();
                let mut dx = ndarray::Array2::<F>::zeros((rows, d));
                for r in 0..rows {
                    let grow = g2.row(r);
                    let xr = xhat.row(r);
                    // h = dL/dxhat
                    let mut mean_h = F::zero();
                    let mut mean_hx = F::zero();
                    for c in 0..d {
                        let h = grow[c] * g1v[c];
                        mean_h += h;
                        mean_hx += h * xr[c];
                    }
                    mean_h = mean_h * inv_d;
                    mean_hx = mean_hx * inv_d;
                    for c in 0..d {
                        let h = grow[c] * g1v[c];
                        dx[[r, c]] = inv_std[r] * (h - mean_h - xr[c] * mean_hx);
                    }
                }
                let dgamma = (&g2 * &xhat).sum_axis(Axis(0)).into_dyn();
                let dbeta = g2.sum_axis(Axis(0)).into_dyn();
                vec![dx.into_dyn(), dgamma, dbeta]
            })),
        )
    }

    // ---------------------------------------------------------------
    // shape / selection
    // ---------------------------------------------------------------

    /// Select rows of a 2-D tensor (duplicates allowed; gradient scatter-adds).
    pub fn gather_rows(&self, x: Var, idx: &[usize]) -> Var {
        let vx = self.rc(x);
        assert_eq!(vx.ndim(), 2);
        let x2 = vx.view().into_dimensionality::<Ix2>().unwrap();
        let d = x2.shape()[1];
        let mut out = ndarray::Array2::<F>::zeros((idx.len(), d));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&x2.row(i));
        }
        let idx = idx.to_vec();
        self.push(
            out.into_dyn(),
            vec![x],
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = ArrayD::zeros(vx.raw_dim());
                let mut dx2 = dx.view_mut().into_dimensionality::<Ix2>().unwrap();
                for (r, &i) in idx.iter().enumerate() {
                    let mut drow = dx2.row_mut(i);
                    drow += &g2.row(r);
                }
                vec![dx]
            })),
        )
    }

    /// Build a 2-D tensor row by row from `(source, row_index)` pairs.
    ///
    /// Sources may repeat; each may be any 2-D var with matching width.
    pub fn compose_rows(&self, plan: &[(Var, usize)]) -> Var {
        assert!(!plan.is_empty(), "compose_rows: empty plan");
        // Deduplicate parents in first-appearance order.
        let mut parents: Vec<Var> = Vec::new();
        let mut slot_of = Vec::with_capacity(plan.len());
        for &(v, _) in plan {
            let s = match parents.iter().position(|&p| p == v) {
                Some(s) => s,
                None => {
                    parents.push(v);
                    parents.len() - 1
                }
            };
            slot_of.push(s);
        }
        let values: Vec<Rc<ArrayD<F>>> = parents.iter().map(|&p| self.rc(p)).collect();
        let d = values[0].shape()[1];
        for v in &values {
            assert_eq!(v.ndim(), 2, "compose_rows: sources must be 2-D");
            assert_eq!(v.shape()[1], d, "compose_rows: width mismatch");
        }
        let mut out = ndarray::Array2::<F>::zeros((plan.len(), d));
        for (r, (&(_, row), &slot)) in plan.iter().zip(&slot_of).enumerate() {
            let src = values[slot].view().into_dimensionality::<Ix2>().unwrap();
            out.row_mut(r).assign(&src.row(row));
        }
        let rows: Vec<usize> = plan.iter().map(|&(_, r)| r).collect();
        let shapes: Vec<_> = values.iter().map(|v| v.raw_dim()).collect();
        self.push(
            out.into_dyn(),
            parents,
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut grads: Vec<ArrayD<F>> =
                    shapes.iter().map(|s| ArrayD::zeros(s.clone())).collect();
                for (r, (&row, &slot)) in rows.iter().zip(&slot_of).enumerate() {
                    let mut gslot = grads[slot]
                        .view_mut()
                        .into_dimensionality::<Ix2>()
                        .unwrap();
                    let mut grow = gslot.row_mut(row);
                    grow += &g2.row(r);
                }
                grads
            })),
        )
    }

    /// Column slice `[r, c] -> [r, end-start]`.
    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Var {
        let va = self.rc(a);
        assert_eq!(va.ndim(), 2);
        let a2 = va.view().into_dimensionality::<Ix2>().unwrap();
        let out = a2.slice(ndarray::s![.., start..end]).to_owned().into_dyn();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut da = ArrayD::zeros(va.raw_dim());
                let mut da2 = da.view_mut().into_dimensionality::<Ix2>().unwrap();
                da2.slice_mut(ndarray::s![.., start..end]).assign(&g2);
                vec![da]
            })),
        )
    }

    /// Concatenate 2-D tensors along columns.
    pub fn concat_cols(&self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty());
        let values: Vec<Rc<ArrayD<F>>> = vars.iter().map(|&v| self.rc(v)).collect();
        let rows = values[0].shape()[0];
        let widths: Vec<usize> = values
            .iter()
            .map(|v| {
                assert_eq!(v.ndim(), 2);
                assert_eq!(v.shape()[0], rows, "concat_cols: row mismatch");
                v.shape()[1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = ndarray::Array2::<F>::zeros((rows, total));
        let mut at = 0;
        for v in &values {
            let v2 = v.view().into_dimensionality::<Ix2>().unwrap();
            out.slice_mut(ndarray::s![.., at..at + v2.shape()[1]])
                .assign(&v2);
            at += v2.shape()[1];
        }
        self.push(
            out.into_dyn(),
            vars.to_vec(),
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut grads = Vec::with_capacity(widths.len());
                let mut at = 0;
                for &w in &widths {
                    grads.push(g2.slice(ndarray::s![.., at..at + w]).to_owned().into_dyn());
                    at += w;
                }
                grads
            })),
        )
    }

    /// Concatenate 1-D tensors.
    pub fn concat_flat(&self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty());
        let values: Vec<Rc<ArrayD<F>>> = vars.iter().map(|&v| self.rc(v)).collect();
        let lens: Vec<usize> = values
            .iter()
            .map(|v| {
                assert_eq!(v.ndim(), 1, "concat_flat: sources must be 1-D");
                v.len()
            })
            .collect();
        let mut data = Vec::with_capacity(lens.iter().sum());
        for v in &values {
            data.extend(v.iter().copied());
        }
        self.push(
            ndarray::Array1::from_vec(data).into_dyn(),
            vars.to_vec(),
            Some(Box::new(move |g| {
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut grads = Vec::with_capacity(lens.len());
                let mut at = 0;
                for &l in &lens {
                    grads.push(g1.slice(ndarray::s![at..at + l]).to_owned().into_dyn());
                    at += l;
                }
                grads
            })),
        )
    }

    /// Attention-bias lookup for one head:
    /// `B[i,j] = bp[head, φ(i,j)] + bm[head, φ(j,i)] + mask(i,j)`.
    ///
    /// `conn[i,j]` marks pairs connected by a directed path in either
    /// direction; unconnected pairs receive the additive `mask_val`.
    pub fn path_bias(
        &self,
        bp: Var,
        bm: Var,
        phi: Rc<ndarray::Array2<usize>>,
        conn: Rc<ndarray::Array2<bool>>,
        head: usize,
        mask_val: F,
    ) -> Var {
        let (vp, vm) = (self.rc(bp), self.rc(bm));
        assert_eq!(vp.ndim(), 2);
        assert_eq!(vm.ndim(), 2);
        let n = phi.shape()[0];
        let p2 = vp.view().into_dimensionality::<Ix2>().unwrap();
        let m2 = vm.view().into_dimensionality::<Ix2>().unwrap();
        let mut out = ndarray::Array2::<F>::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                let mut b = p2[[head, phi[[i, j]]]] + m2[[head, phi[[j, i]]]];
                if !conn[[i, j]] {
                    b += mask_val;
                }
                out[[i, j]] = b;
            }
        }
        let (pshape, mshape) = (vp.raw_dim(), vm.raw_dim());
        self.push(
            out.into_dyn(),
            vec![bp, bm],
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dp = ArrayD::zeros(pshape.clone());
                let mut dm = ArrayD::zeros(mshape.clone());
                {
                    let mut dp2 = dp.view_mut().into_dimensionality::<Ix2>().unwrap();
                    let mut dm2 = dm.view_mut().into_dimensionality::<Ix2>().unwrap();
                    for i in 0..n {
                        for j in 0..n {
                            dp2[[head, phi[[i, j]]]] += g2[[i, j]];
                            dm2[[head, phi[[j, i]]]] += g2[[i, j]];
                        }
                    }
                }
                vec![dp, dm]
            })),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};

    fn tape() -> Tape<f64> {
        Tape::new()
    }

    #[test]
    fn chain_of_elementwise_ops() {
        let t = tape();
        let x = t.leaf1(arr1(&[1.0, -2.0, 3.0]));
        let y = t.sum_all(t.mul(t.add_const(x, 1.0), x)); // Σ x(x+1)
        assert!((t.value(y)[[0]] - (2.0 + 2.0 + 12.0)).abs() < 1e-12);
        let g = t.backward(y);
        // d/dx [x² + x] = 2x + 1
        let gx = g.get(x).unwrap();
        assert_eq!(gx[[0]], 3.0);
        assert_eq!(gx[[1]], -3.0);
        assert_eq!(gx[[2]], 7.0);
    }

    #[test]
    fn matmul_grads_match_manual() {
        let t = tape();
        let a = t.leaf2(arr2(&[[1.0, 2.0], [3.0, 4.0]]));
        let b = t.leaf2(arr2(&[[5.0], [6.0]]));
        let c = t.sum_all(t.matmul(a, b));
        let g = t.backward(c);
        // dc/dA = 1·bᵀ broadcast over rows
        let ga = g.get(a).unwrap();
        assert_eq!(ga[[0, 0]], 5.0);
        assert_eq!(ga[[1, 1]], 6.0);
        let gb = g.get(b).unwrap();
        assert_eq!(gb[[0, 0]], 4.0); // col sums of A
        assert_eq!(gb[[1, 0]], 6.0);
    }

    #[test]
    fn softmax_rows_is_row_stochastic() {
        let t = tape();
        let a = t.leaf2(arr2(&[[0.0, 1.0, -2.0], [100.0, 100.0, 100.0]]));
        let s = t.softmax_rows(a);
        let v = t.value(s);
        for r in 0..2 {
            let sum: f64 = (0..3).map(|c| v[[r, c]]).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_softmax_underflows_to_zero() {
        let t = tape();
        let a = t.leaf2(arr2(&[[0.0, NEG_MASK, 1.0]]));
        let s = t.softmax_rows(a);
        let v = t.value(s);
        assert!(v[[0, 1]] < 1e-30);
        assert!((v[[0, 0]] + v[[0, 2]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gather_rows_accumulates_duplicates() {
        let t = tape();
        let x = t.leaf2(arr2(&[[1.0, 2.0], [3.0, 4.0]]));
        let y = t.sum_all(t.gather_rows(x, &[0, 0, 1]));
        let g = t.backward(y);
        let gx = g.get(x).unwrap();
        assert_eq!(gx[[0, 0]], 2.0);
        assert_eq!(gx[[1, 0]], 1.0);
    }

    #[test]
    fn leaky_clip_matches_contract() {
        let t = tape();
        let x = t.leaf1(arr1(&[-1.0, 300.0, 100.0, -2000.0]));
        let y = t.leaky_clip(x, 0.2, 256.0);
        let v = t.value(y);
        assert_eq!(v[[0]], -0.2);
        assert_eq!(v[[1]], 256.0);
        assert_eq!(v[[2]], 100.0);
        assert_eq!(v[[3]], -256.0); // 0.2·(−2000) = −400 clamps
        let g = t.backward(t.sum_all(y));
        let gx = g.get(x).unwrap();
        assert_eq!(gx[[0]], 0.2);
        assert_eq!(gx[[1]], 0.0);
        assert_eq!(gx[[2]], 1.0);
        assert_eq!(gx[[3]], 0.0);
    }

    #[test]
    fn compose_rows_scatters_gradients() {
        let t = tape();
        let a = t.leaf2(arr2(&[[1.0, 1.0], [2.0, 2.0]]));
        let b = t.leaf2(arr2(&[[5.0, 5.0]]));
        let out = t.compose_rows(&[(a, 1), (b, 0), (a, 1)]);
        assert_eq!(t.value(out)[[0, 0]], 2.0);
        assert_eq!(t.value(out)[[1, 0]], 5.0);
        let g = t.backward(t.sum_all(out));
        assert_eq!(g.get(a).unwrap()[[1, 0]], 2.0);
        assert_eq!(g.get(a).unwrap()[[0, 0]], 0.0);
        assert_eq!(g.get(b).unwrap()[[0, 1]], 1.0);
    }
}
