//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles together with
//! a closure mapping the output gradient to gradients for each parent. Tapes
//! are cheap and single-threaded; build one per forward pass.

use std::cell::RefCell;
use std::rc::Rc;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Scalar> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    needs_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    record: bool,
}

/// Handle to a value recorded on a tape.
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Scalar> Copy for Var<'_, T> {}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// Tape that records backward closures.
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), record: true }
    }

    /// Tape for pure inference: values are computed, nothing is retained for backward.
    pub fn inference() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), record: false }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, parents: Vec<usize>, backward: Option<BackwardFn<T>>, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), parents, backward, needs_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Vec::new(), None, self.record)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Vec::new(), None, false)
    }

    /// Records an operation. `backward` receives the output gradient and returns one
    /// optional gradient per parent, in order.
    pub fn op<F>(&self, value: Tensor<T>, parents: &[Var<'_, T>], backward: F) -> Var<'_, T>
    where
        F: Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let needs_grad = self.record && parents.iter().any(|p| self.needs_grad(p.id));
        let ids = parents.iter().map(|p| p.id).collect();
        if needs_grad {
            self.push(value, ids, Some(Box::new(backward)), true)
        } else {
            self.push(value, ids, None, false)
        }
    }

    fn needs_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Back-propagates from a single-element output. Only leaf gradients are retained.
    pub fn backward(&self, output: Var<'_, T>) -> Grads<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[output.id].value.len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[output.id].needs_grad {
            return Grads { grads };
        }
        grads[output.id] = Some(Tensor::full(nodes[output.id].value.shape(), T::one()));
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else { continue };
            let Some(g) = grads[id].take() else { continue };
            let parent_grads = backward(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[pid].needs_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[pid].value.shape(), "gradient shape for node {pid}");
                match &mut grads[pid] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Grads { grads }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Grads<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of its shape if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var<'_, T>) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn dims3(&self) -> (usize, usize, usize) {
        self.tape.nodes.borrow()[self.id].value.dims3()
    }

    pub fn needs_grad(&self) -> bool {
        self.tape.needs_grad(self.id)
    }

    /// Scalar value of a single-element variable.
    pub fn item(&self) -> T {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on a tensor of shape {:?}", v.shape());
        v.data()[0]
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.constant((*self.value()).clone())
    }

    pub fn add(&self, other: Var<'t, T>) -> Var<'t, T> {
        let v = self.value().add(&other.value());
        self.tape.op(v, &[*self, other], |g| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(&self, other: Var<'t, T>) -> Var<'t, T> {
        let v = self.value().sub(&other.value());
        self.tape.op(v, &[*self, other], |g| vec![Some(g.clone()), Some(g.map(|x| -x))])
    }

    pub fn mul(&self, other: Var<'t, T>) -> Var<'t, T> {
        let (a, b) = (self.value(), other.value());
        let v = a.mul(&b);
        self.tape.op(v, &[*self, other], move |g| vec![Some(g.mul(&b)), Some(g.mul(&a))])
    }

    pub fn scale(&self, s: f64) -> Var<'t, T> {
        let s = T::from_f64c(s);
        let v = self.value().scale(s);
        self.tape.op(v, &[*self], move |g| vec![Some(g.scale(s))])
    }

    pub fn add_scalar(&self, s: f64) -> Var<'t, T> {
        let s = T::from_f64c(s);
        let v = self.value().map(|x| x + s);
        self.tape.op(v, &[*self], |g| vec![Some(g.clone())])
    }

    pub fn square(&self) -> Var<'t, T> {
        let a = self.value();
        let v = a.map(|x| x * x);
        let two = T::from_f64c(2.0);
        self.tape.op(v, &[*self], move |g| vec![Some(g.zip_map(&a, |g, x| two * g * x))])
    }

    pub fn sum(&self) -> Var<'t, T> {
        let a = self.value();
        let shape = a.shape().to_vec();
        self.tape.op(Tensor::scalar(a.sum()), &[*self], move |g| vec![Some(Tensor::full(&shape, g.data()[0]))])
    }

    pub fn mean(&self) -> Var<'t, T> {
        let n = self.value().len().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Mean squared difference over all elements.
    pub fn mse(&self, other: Var<'t, T>) -> Var<'t, T> {
        self.sub(other).square().mean()
    }

    /// Multiplies every element by a single-element variable.
    pub fn mul_scalar_var(&self, s: Var<'t, T>) -> Var<'t, T> {
        let (a, sv) = (self.value(), s.value());
        let k = sv.data()[0];
        let v = a.scale(k);
        self.tape.op(v, &[*self, s], move |g| vec![Some(g.scale(k)), Some(Tensor::scalar(g.dot(&a)))])
    }

    /// Elementwise map with a known derivative, `f` and `df` evaluated on the input.
    pub fn unary(&self, f: impl Fn(T) -> T, df: impl Fn(T) -> T + 'static) -> Var<'t, T> {
        let a = self.value();
        let v = a.map(f);
        self.tape.op(v, &[*self], move |g| vec![Some(g.zip_map(&a, |g, x| g * df(x)))])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Var<'t, T> {
        self.unary(|x| gelu(x.to_f64c()).0, |x| gelu(x.to_f64c()).1)
    }

    pub fn softplus(&self) -> Var<'t, T> {
        self.unary(
            |x| {
                let x = x.to_f64c();
                T::from_f64c(x.max(0.0) + (-x.abs()).exp().ln_1p())
            },
            |x| T::from_f64c(sigmoid(x.to_f64c())),
        )
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        self.unary(
            |x| T::from_f64c(sigmoid(x.to_f64c())),
            |x| {
                let s = sigmoid(x.to_f64c());
                T::from_f64c(s * (1.0 - s))
            },
        )
    }

    /// `max(x, floor)`; the gradient is blocked where the floor is active.
    pub fn clamp_min(&self, floor: f64) -> Var<'t, T> {
        let f = T::from_f64c(floor);
        self.unary(move |x| x.max(f), move |x| if x > f { T::one() } else { T::zero() })
    }

    /// Forward value `round(x)` (ties away from zero), identity gradient.
    pub fn round_ste(&self) -> Var<'t, T> {
        let v = self.value().map(|x| x.round());
        self.tape.op(v, &[*self], |g| vec![Some(g.clone())])
    }

    /// Adds a constant tensor (no gradient to the constant).
    pub fn add_const(&self, c: &Tensor<T>) -> Var<'t, T> {
        let v = self.value().add(c);
        self.tape.op(v, &[*self], |g| vec![Some(g.clone())])
    }

    /// Same data under a new shape.
    pub fn reshape_var(&self, shape: &[usize]) -> Var<'t, T> {
        let a = self.value();
        let old = a.shape().to_vec();
        let v = (*a).clone().reshape(shape).expect("reshape_var element count");
        self.tape.op(v, &[*self], move |g| vec![Some(g.clone().reshape(&old).unwrap())])
    }

    /// Elements `start..start + len` of the flattened tensor, as a vector.
    pub fn narrow_flat(&self, start: usize, len: usize) -> Var<'t, T> {
        let a = self.value();
        let n = a.len();
        let v = Tensor::from_parts(vec![len], a.data()[start..start + len].to_vec());
        let shape = a.shape().to_vec();
        self.tape.op(v, &[*self], move |g| {
            let mut full = vec![T::zero(); n];
            full[start..start + len].copy_from_slice(g.data());
            vec![Some(Tensor::from_parts(shape.clone(), full))]
        })
    }

    pub fn narrow_channels(&self, start: usize, len: usize) -> Var<'t, T> {
        let a = self.value();
        let (c, h, w) = a.dims3();
        let v = a.narrow_channels(start, len);
        self.tape.op(v, &[*self], move |g| {
            let mut full = Tensor::zeros(&[c, h, w]);
            full.data_mut()[start * h * w..(start + len) * h * w].copy_from_slice(g.data());
            vec![Some(full)]
        })
    }

    pub fn concat_channels(parts: &[Var<'t, T>]) -> Var<'t, T> {
        let tape = parts[0].tape;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
        let v = Tensor::concat_channels(&refs).expect("concat_channels spatial mismatch");
        let sizes: Vec<usize> = values.iter().map(|v| v.dims3().0).collect();
        tape.op(v, parts, move |g| {
            let mut start = 0;
            sizes
                .iter()
                .map(|&n| {
                    let part = g.narrow_channels(start, n);
                    start += n;
                    Some(part)
                })
                .collect()
        })
    }

    /// Multiplies channel `c` of a `[C, H, W]` tensor by element `c` of `scale`.
    pub fn mul_channels(&self, scale: Var<'t, T>) -> Var<'t, T> {
        let a = self.value();
        let s = scale.value();
        let (c, h, w) = a.dims3();
        assert_eq!(s.len(), c, "channel scale length");
        let mut v = (*a).clone();
        for (ch, plane) in v.data_mut().chunks_mut(h * w).enumerate() {
            let k = s.data()[ch];
            plane.iter_mut().for_each(|x| *x *= k);
        }
        let sshape = s.shape().to_vec();
        self.tape.op(v, &[*self, scale], move |g| {
            let mut dx = g.clone();
            let mut ds = Vec::with_capacity(c);
            for (ch, (gp, xp)) in dx.data_mut().chunks_mut(h * w).zip(a.data().chunks(h * w)).enumerate() {
                ds.push(gp.iter().zip(xp).fold(T::zero(), |acc, (&g, &x)| acc + g * x));
                let k = s.data()[ch];
                gp.iter_mut().for_each(|g| *g *= k);
            }
            vec![Some(dx), Some(Tensor::from_parts(sshape.clone(), ds))]
        })
    }

    /// Adds a `[C]` vector to every pixel of a `[C, H, W]` tensor.
    pub fn add_channel_bias(&self, bias: Var<'t, T>) -> Var<'t, T> {
        let a = self.value();
        let b = bias.value();
        let (c, h, w) = a.dims3();
        assert_eq!(b.len(), c, "channel bias length");
        let mut v = (*a).clone();
        for (ch, plane) in v.data_mut().chunks_mut(h * w).enumerate() {
            let bc = b.data()[ch];
            plane.iter_mut().for_each(|x| *x += bc);
        }
        let bshape = b.shape().to_vec();
        self.tape.op(v, &[*self, bias], move |g| {
            let db: Vec<T> = g.data().chunks(h * w).map(|p| p.iter().fold(T::zero(), |s, &x| s + x)).collect();
            vec![Some(g.clone()), Some(Tensor::from_parts(bshape.clone(), db))]
        })
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// GELU (tanh form) value and derivative.
pub(crate) fn gelu<T: Scalar>(x: f64) -> (T, T) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (T::from_f64c(y), T::from_f64c(dy))
}
