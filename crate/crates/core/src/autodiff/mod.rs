//! Reverse-mode automatic differentiation on dense tensors.
//!
//! A [`Graph`] records every operation of one forward pass in topological
//! order; [`Graph::backward`] walks the record once in reverse and
//! accumulates gradients into the `requires_grad` leaves. Graphs are
//! dynamic: build one per forward/backward episode and drop it.

mod ops3d;

pub use ops3d::Padding;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Context handed to a node's vector-Jacobian product.
pub(crate) struct VjpCtx<'a, T> {
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    pub grad: &'a Tensor<T>,
}

type VjpFn<T> = Box<dyn Fn(&VjpCtx<T>) -> Vec<Tensor<T>>>;

struct Node<T: Scalar> {
    value: Tensor<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
    parents: Vec<Var>,
    vjp: Option<VjpFn<T>>,
}

/// Recorded computation of one forward pass.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// Insert a trainable leaf; `backward` accumulates into its grad.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true, vec![], None)
    }

    /// Insert a non-trainable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, vec![], None)
    }

    pub(crate) fn push_op(&mut self, value: Tensor<T>, parents: Vec<Var>, vjp: VjpFn<T>) -> Var {
        self.push(value, false, parents, Some(vjp))
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        requires_grad: bool,
        parents: Vec<Var>,
        vjp: Option<VjpFn<T>>,
    ) -> Var {
        debug_assert!(parents.iter().all(|p| p.0 < self.nodes.len()));
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            parents,
            vjp,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn clear_grad(&mut self, v: Var) {
        self.nodes[v.0].grad = None;
    }

    /// Reverse sweep from a scalar loss. Repeated calls accumulate into
    /// leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut scratch: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        scratch[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = scratch[idx].take() else {
                continue;
            };
            let contribs = {
                let node = &self.nodes[idx];
                node.vjp.as_ref().map(|vjp| {
                    let inputs: Vec<&Tensor<T>> =
                        node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
                    let ctx = VjpCtx {
                        inputs,
                        output: &node.value,
                        grad: &g,
                    };
                    (node.parents.clone(), vjp(&ctx))
                })
            };
            if let Some((parents, grads)) = contribs {
                debug_assert_eq!(parents.len(), grads.len());
                for (p, pg) in parents.into_iter().zip(grads) {
                    match &mut scratch[p.0] {
                        Some(acc) => acc.add_assign(&pg),
                        slot => *slot = Some(pg),
                    }
                }
            }
            let node = &mut self.nodes[idx];
            if node.requires_grad {
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    // ---- elementwise and reduction ops ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let mut out = va.clone();
        out.add_assign(vb);
        self.push_op(
            out,
            vec![a, b],
            Box::new(|ctx| vec![ctx.grad.clone(), ctx.grad.clone()]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x - y)
            .collect();
        let out = Tensor::from_vec(va.shape(), data).unwrap();
        self.push_op(
            out,
            vec![a, b],
            Box::new(|ctx| {
                let mut neg = ctx.grad.clone();
                neg.data_mut().iter_mut().for_each(|v| *v = -*v);
                vec![ctx.grad.clone(), neg]
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::from_vec(va.shape(), data).unwrap();
        self.push_op(
            out,
            vec![a, b],
            Box::new(|ctx| {
                let ga = elementwise_product(ctx.grad, ctx.inputs[1]);
                let gb = elementwise_product(ctx.grad, ctx.inputs[0]);
                vec![ga, gb]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let data = self.value(a).data().iter().map(|&x| x * c).collect();
        let out = Tensor::from_vec(self.value(a).shape(), data).unwrap();
        self.push_op(
            out,
            vec![a],
            Box::new(move |ctx| {
                let mut g = ctx.grad.clone();
                g.data_mut().iter_mut().for_each(|v| *v = *v * c);
                vec![g]
            }),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let out = Tensor::from_vec(self.value(a).shape(), data).unwrap();
        self.push_op(
            out,
            vec![a],
            Box::new(|ctx| {
                let data = ctx
                    .inputs[0]
                    .data()
                    .iter()
                    .zip(ctx.grad.data())
                    .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                vec![Tensor::from_vec(ctx.inputs[0].shape(), data).unwrap()]
            }),
        )
    }

    /// Sum of all elements, as a 0-d tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push_op(
            out,
            vec![a],
            Box::new(|ctx| vec![Tensor::full(ctx.inputs[0].shape(), ctx.grad.item())]),
        )
    }

    /// Elementwise sum of several same-shape tensors.
    pub fn add_n(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty(), "add_n of zero tensors");
        let mut out = self.value(vars[0]).clone();
        for v in &vars[1..] {
            out.add_assign(self.value(*v));
        }
        let n = vars.len();
        self.push_op(
            out,
            vars.to_vec(),
            Box::new(move |ctx| (0..n).map(|_| ctx.grad.clone()).collect()),
        )
    }

    /// Multiply each (sample, channel) slice of a 5-d tensor by a fixed
    /// factor. Used for spatial dropout masks; the factors are constants.
    pub fn scale_channels(&mut self, a: Var, factors: Vec<T>) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape().len(), 5, "scale_channels expects 5-d input");
        let (n, c) = (va.shape()[0], va.shape()[1]);
        assert_eq!(factors.len(), n * c, "one factor per (sample, channel)");
        let spatial: usize = va.shape()[2..].iter().product();
        let mut out = va.clone();
        apply_channel_factors(&mut out, &factors, spatial);
        self.push_op(
            out,
            vec![a],
            Box::new(move |ctx| {
                let mut g = ctx.grad.clone();
                apply_channel_factors(&mut g, &factors, spatial);
                vec![g]
            }),
        )
    }
}

fn apply_channel_factors<T: Scalar>(t: &mut Tensor<T>, factors: &[T], spatial: usize) {
    for (slice, &f) in t.data_mut().chunks_mut(spatial).zip(factors.iter()) {
        slice.iter_mut().for_each(|v| *v = *v * f);
    }
}

fn elementwise_product<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x * y)
        .collect();
    Tensor::from_vec(a.shape(), data).unwrap()
}

/// Central-difference gradient estimate of a tensor-to-scalar function.
///
/// Independent of the reverse-mode path; serves as the gradient oracle.
pub fn finite_diff_grad<T: Scalar>(
    f: impl Fn(&Tensor<T>) -> T,
    x: &Tensor<T>,
    step: T,
) -> Tensor<T> {
    assert!(step > T::zero(), "finite-difference step must be positive");
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - step;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (fp - fm) / (step + step);
    }
    grad
}

/// Componentwise relative error between an analytic gradient and an oracle.
pub fn max_rel_error<T: Scalar>(analytic: &Tensor<T>, oracle: &Tensor<T>) -> f64 {
    assert_eq!(analytic.shape(), oracle.shape());
    let mut worst = 0.0f64;
    for (&a, &b) in analytic.data().iter().zip(oracle.data()) {
        let a = crate::scalar::to_f64(a);
        let b = crate::scalar::to_f64(b);
        let denom = a.abs().max(b.abs()).max(1e-6);
        worst = worst.max((a - b).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_grad_is_2x() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = g.mul(x, x);
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn unused_leaf_has_no_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let y = g.leaf(Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(g.grad(y).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_twice_doubles_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(&[2], vec![1.0, -1.5]).unwrap());
        let sq = g.mul(x, x);
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        let once: Vec<f64> = g.grad(x).unwrap().data().to_vec();
        g.backward(loss).unwrap();
        let twice: Vec<f64> = g.grad(x).unwrap().data().to_vec();
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn finite_diff_on_linear_is_ones() {
        let x = Tensor::from_vec(&[4], vec![0.3, -1.0, 2.0, 0.0]).unwrap();
        let fd = finite_diff_grad(|t: &Tensor<f64>| t.sum(), &x, 1e-5);
        for &v in fd.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn finite_diff_on_quadratic() {
        let x = Tensor::from_vec(&[1], vec![3.0]).unwrap();
        let fd = finite_diff_grad(|t: &Tensor<f64>| t.data()[0] * t.data()[0], &x, 1e-5);
        assert!((fd.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn composite_chain_matches_finite_differences() {
        // relu(x*x) summed, then scaled: a 3-op chain.
        let x0 = Tensor::from_vec(&[5], vec![0.7, -1.2, 0.4, 1.9, -0.3]).unwrap();
        let run = |t: &Tensor<f64>| {
            let mut g = Graph::<f64>::new();
            let x = g.leaf(t.clone());
            let sq = g.mul(x, x);
            let r = g.relu(sq);
            let s = g.sum(r);
            let loss = g.scale(s, 0.5);
            (g, x, loss)
        };
        let (mut g, x, loss) = run(&x0);
        g.backward(loss).unwrap();
        let fd = finite_diff_grad(
            |t| {
                let (_, _, l) = {
                    let (g2, _, l2) = run(t);
                    (0, 0, g2.value(l2).item())
                };
                l
            },
            &x0,
            1e-5,
        );
        assert!(max_rel_error(g.grad(x).unwrap(), &fd) <= 1e-4);
    }
}
