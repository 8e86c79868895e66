//! Minimal reverse-mode autodiff tape over f64 vectors.
//!
//! The variational objective differentiates through a handful of elementwise
//! operations, reductions, denoiser evaluations (via their analytic VJPs),
//! and linear measurement operators (via their adjoints). This tape supports
//! exactly that: nodes hold values, parent indices, and a backward closure
//! mapping the node's cotangent to per-parent cotangents.
//!
//! Binary elementwise ops broadcast a length-1 operand against a length-n
//! one; the corresponding backward pass sums cotangents back down to the
//! scalar side.

use std::cell::RefCell;

use crate::denoiser::Denoiser;
use crate::error::{ensure, Error, Result};
use crate::operators::MeasurementOp;

/// Handle to a tape node. Cheap to copy; only valid for the tape it came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackFn<'a> = Box<dyn Fn(&[f64]) -> Result<Vec<Vec<f64>>> + 'a>;

struct Node<'a> {
    value: Vec<f64>,
    parents: Vec<usize>,
    back: Option<BackFn<'a>>,
}

/// Computation tape; append-only, so node order is a topological order.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: RefCell<Vec<Node<'a>>>,
}

/// Result of a backward sweep: cotangents of every node reached from the
/// output, indexable by [`Var`].
pub struct Gradients {
    adjoints: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`, if `v` influenced the output.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.adjoints.get(v.0).and_then(|g| g.as_deref())
    }
}

fn broadcast_len(a: usize, b: usize) -> Result<usize> {
    if a == b || b == 1 {
        Ok(a)
    } else if a == 1 {
        Ok(b)
    } else {
        Err(Error::ShapeMismatch {
            context: "elementwise op".into(),
            expected: a,
            got: b,
        })
    }
}

fn at(v: &[f64], i: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

/// Sum a cotangent of length `n` down to the operand's length (1 or n).
fn reduce_to(cot: &[f64], len: usize) -> Vec<f64> {
    if len == 1 && cot.len() > 1 {
        vec![cot.iter().sum()]
    } else {
        cot.to_vec()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    fn push(&self, value: Vec<f64>, parents: Vec<usize>, back: Option<BackFn<'a>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            back,
        });
        Var(nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Vec<f64>) -> Var {
        self.push(value, vec![], None)
    }

    /// A non-differentiable input (gradients still flow *through* ops on it,
    /// but nothing upstream exists). Identical storage to a leaf; the name
    /// records intent at call sites.
    pub fn constant(&self, value: Vec<f64>) -> Var {
        self.push(value, vec![], None)
    }

    pub fn value(&self, v: Var) -> Vec<f64> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn len_of(&self, v: Var) -> usize {
        self.nodes.borrow()[v.0].value.len()
    }

    fn binary(
        &self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        df: impl Fn(f64, f64) -> (f64, f64) + 'a,
    ) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let n = broadcast_len(av.len(), bv.len())?;
        let out: Vec<f64> = (0..n).map(|i| f(at(&av, i), at(&bv, i))).collect();
        let (la, lb) = (av.len(), bv.len());
        let back: BackFn<'a> = Box::new(move |cot: &[f64]| {
            let mut ga = vec![0.0; cot.len()];
            let mut gb = vec![0.0; cot.len()];
            for i in 0..cot.len() {
                let (da, db) = df(at(&av, i), at(&bv, i));
                ga[i] = cot[i] * da;
                gb[i] = cot[i] * db;
            }
            Ok(vec![reduce_to(&ga, la), reduce_to(&gb, lb)])
        });
        Ok(self.push(out, vec![a.0, b.0], Some(back)))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, |_, _| (1.0, 1.0))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, |_, _| (1.0, -1.0))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, |x, y| (y, x))
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64 + 'a) -> Var {
        let av = self.value(a);
        let out: Vec<f64> = av.iter().map(|&x| f(x)).collect();
        let back: BackFn<'a> = Box::new(move |cot: &[f64]| {
            Ok(vec![cot
                .iter()
                .zip(&av)
                .map(|(c, &x)| c * df(x))
                .collect()])
        });
        self.push(out, vec![a.0], Some(back))
    }

    /// k·a for a plain scalar k.
    pub fn scale(&self, a: Var, k: f64) -> Var {
        self.unary(a, move |x| k * x, move |_| k)
    }

    /// a + k elementwise for a plain scalar k.
    pub fn offset(&self, a: Var, k: f64) -> Var {
        self.unary(a, move |x| x + k, |_| 1.0)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, f64::exp, f64::exp)
    }

    pub fn ln(&self, a: Var) -> Var {
        self.unary(a, f64::ln, |x| 1.0 / x)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let s = |x: f64| 1.0 / (1.0 + (-x).exp());
        self.unary(a, s, move |x| {
            let v = s(x);
            v * (1.0 - v)
        })
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x| 2.0 * x)
    }

    /// Elementwise absolute value (subgradient 0 at the kink).
    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, f64::abs, |x| {
            if x == 0.0 {
                0.0
            } else {
                x.signum()
            }
        })
    }

    /// Sum all entries into a scalar node.
    pub fn sum(&self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.len();
        let total: f64 = av.iter().sum();
        let back: BackFn<'a> = Box::new(move |cot: &[f64]| Ok(vec![vec![cot[0]; n]]));
        self.push(vec![total], vec![a.0], Some(back))
    }

    /// Inner product of two same-length vectors, as a scalar node.
    pub fn dot(&self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        ensure!(
            av.len() == bv.len(),
            "dot of mismatched lengths {} and {}",
            av.len(),
            bv.len()
        );
        let total: f64 = av.iter().zip(&bv).map(|(x, y)| x * y).sum();
        let back: BackFn<'a> = Box::new(move |cot: &[f64]| {
            let c = cot[0];
            Ok(vec![
                bv.iter().map(|y| c * y).collect(),
                av.iter().map(|x| c * x).collect(),
            ])
        });
        Ok(self.push(vec![total], vec![a.0, b.0], Some(back)))
    }

    /// Denoiser evaluation ε̂(z, t); backward uses the denoiser's VJP.
    pub fn denoiser_eps(&self, denoiser: &'a dyn Denoiser, z: Var, t: f64) -> Result<Var> {
        let zv = self.value(z);
        let out = denoiser.eps_hat(&zv, t)?;
        let back: BackFn<'a> =
            Box::new(move |cot: &[f64]| Ok(vec![denoiser.eps_vjp(&zv, t, cot)?]));
        Ok(self.push(out, vec![z.0], Some(back)))
    }

    /// Measurement operator f(x); backward uses the adjoint map.
    pub fn apply_op(&self, op: &'a MeasurementOp, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.len();
        let out = op.apply(&xv)?;
        let back: BackFn<'a> = Box::new(move |cot: &[f64]| Ok(vec![op.adjoint(cot, n)?]));
        Ok(self.push(out, vec![x.0], Some(back)))
    }

    /// Reverse sweep from a scalar output node.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        ensure!(
            nodes[out.0].value.len() == 1,
            "backward requires a scalar output, got length {}",
            nodes[out.0].value.len()
        );
        let mut adjoints: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        adjoints[out.0] = Some(vec![1.0]);
        for i in (0..=out.0).rev() {
            let Some(cot) = adjoints[i].clone() else {
                continue;
            };
            let node = &nodes[i];
            let Some(back) = &node.back else {
                continue;
            };
            let partials = back(&cot)?;
            ensure!(
                partials.len() == node.parents.len(),
                "backward closure returned {} partials for {} parents",
                partials.len(),
                node.parents.len()
            );
            for (p, grad) in node.parents.iter().zip(partials) {
                match &mut adjoints[*p] {
                    Some(acc) => {
                        ensure!(
                            acc.len() == grad.len(),
                            "cotangent length mismatch at node {p}"
                        );
                        for (a, g) in acc.iter_mut().zip(&grad) {
                            *a += g;
                        }
                    }
                    slot => *slot = Some(grad),
                }
            }
        }
        Ok(Gradients { adjoints })
    }
}
