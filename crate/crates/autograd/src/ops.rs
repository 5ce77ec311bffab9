//! Elementwise, reduction and shape operations.

use std::ops::{Add, Div, Mul, Neg, Sub};

use ndarray::{ArrayD, Axis, IxDyn, Slice, Zip};

use crate::{Scalar, Var};

/// Sum `grad` down to `shape`, undoing numpy-style broadcasting.
pub(crate) fn unbroadcast<T: Scalar>(grad: ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    if grad.shape() == shape {
        return grad;
    }
    let mut g = grad;
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (axis, &dim) in shape.iter().enumerate() {
        if dim == 1 && g.shape()[axis] != 1 {
            g = g.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    g
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            panic!("shapes {a:?} and {b:?} do not broadcast")
        };
    }
    out
}

fn broadcast_to<T: Scalar>(x: &ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    x.broadcast(IxDyn(shape))
        .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", x.shape(), shape))
        .to_owned()
}

impl<T: Scalar> Var<T> {
    fn unary(
        &self,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var<T> {
        let value = self.value().mapv(f);
        let x = self.clone();
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |out, g| {
                let mut gx = g.clone();
                Zip::from(&mut gx)
                    .and(x.value())
                    .and(out)
                    .for_each(|gx, &xv, &ov| *gx = *gx * df(xv, ov));
                vec![Some(gx)]
            }),
        )
    }

    pub fn add(&self, other: &Var<T>) -> Var<T> {
        let shape = broadcast_shape(self.shape(), other.shape());
        let value = if self.shape() == other.shape() {
            self.value() + other.value()
        } else {
            &broadcast_to(self.value(), &shape) + &broadcast_to(other.value(), &shape)
        };
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(move |_, g| {
                vec![
                    Some(unbroadcast(g.clone(), &sa)),
                    Some(unbroadcast(g.clone(), &sb)),
                ]
            }),
        )
    }

    pub fn sub(&self, other: &Var<T>) -> Var<T> {
        let shape = broadcast_shape(self.shape(), other.shape());
        let value = if self.shape() == other.shape() {
            self.value() - other.value()
        } else {
            &broadcast_to(self.value(), &shape) - &broadcast_to(other.value(), &shape)
        };
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(move |_, g| {
                vec![
                    Some(unbroadcast(g.clone(), &sa)),
                    Some(unbroadcast(g.mapv(|v| -v), &sb)),
                ]
            }),
        )
    }

    pub fn mul(&self, other: &Var<T>) -> Var<T> {
        let shape = broadcast_shape(self.shape(), other.shape());
        let a = broadcast_to(self.value(), &shape);
        let b = broadcast_to(other.value(), &shape);
        let value = &a * &b;
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        let (need_a, need_b) = (self.requires_grad(), other.requires_grad());
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(move |_, g| {
                vec![
                    need_a.then(|| unbroadcast(g * &b, &sa)),
                    need_b.then(|| unbroadcast(g * &a, &sb)),
                ]
            }),
        )
    }

    pub fn div(&self, other: &Var<T>) -> Var<T> {
        let shape = broadcast_shape(self.shape(), other.shape());
        let a = broadcast_to(self.value(), &shape);
        let b = broadcast_to(other.value(), &shape);
        let value = &a / &b;
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        let (need_a, need_b) = (self.requires_grad(), other.requires_grad());
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(move |out, g| {
                vec![
                    need_a.then(|| unbroadcast(g / &b, &sa)),
                    need_b.then(|| {
                        let mut gb = g.clone();
                        Zip::from(&mut gb)
                            .and(out)
                            .and(&b)
                            .for_each(|gb, &o, &bv| *gb = -*gb * o / bv);
                        unbroadcast(gb, &sb)
                    }),
                ]
            }),
        )
    }

    /// `a * x + b` with scalar constants.
    pub fn affine(&self, a: T, b: T) -> Var<T> {
        self.unary(move |x| a * x + b, move |_, _| a)
    }

    pub fn scale(&self, a: T) -> Var<T> {
        self.affine(a, T::zero())
    }

    pub fn add_scalar(&self, b: T) -> Var<T> {
        self.affine(T::one(), b)
    }

    /// `c - x`
    pub fn rsub_scalar(&self, c: T) -> Var<T> {
        self.affine(-T::one(), c)
    }

    pub fn neg(&self) -> Var<T> {
        self.scale(-T::one())
    }

    pub fn exp(&self) -> Var<T> {
        self.unary(|x| x.exp(), |_, o| o)
    }

    pub fn ln(&self) -> Var<T> {
        self.unary(|x| x.ln(), |x, _| T::one() / x)
    }

    pub fn square(&self) -> Var<T> {
        let two = T::from_f64_lossy(2.0);
        self.unary(|x| x * x, move |x, _| two * x)
    }

    pub fn abs(&self) -> Var<T> {
        self.unary(
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn tanh(&self) -> Var<T> {
        self.unary(|x| x.tanh(), |_, o| T::one() - o * o)
    }

    pub fn sigmoid(&self) -> Var<T> {
        self.unary(sigmoid, |_, o| o * (T::one() - o))
    }

    /// `ln(1 + exp(x))`, evaluated without overflow.
    pub fn softplus(&self) -> Var<T> {
        self.unary(
            |x| x.max(T::zero()) + (-x.abs()).exp().ln_1p(),
            |x, _| sigmoid(x),
        )
    }

    pub fn elu(&self) -> Var<T> {
        self.unary(
            |x| if x > T::zero() { x } else { x.exp_m1() },
            |x, o| if x > T::zero() { T::one() } else { o + T::one() },
        )
    }

    pub fn leaky_relu(&self, slope: T) -> Var<T> {
        self.unary(
            move |x| if x > T::zero() { x } else { slope * x },
            move |x, _| if x > T::zero() { T::one() } else { slope },
        )
    }

    /// Clamp into `[lo, hi]`; the gradient is passed only strictly inside.
    pub fn clamp(&self, lo: T, hi: T) -> Var<T> {
        self.unary(
            move |x| x.max(lo).min(hi),
            move |x, _| if x > lo && x < hi { T::one() } else { T::zero() },
        )
    }

    pub fn sum(&self) -> Var<T> {
        let value = ArrayD::from_elem(IxDyn(&[]), self.value().sum());
        let dim = self.value().raw_dim();
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |_, g| {
                let g0 = *g.iter().next().expect("scalar grad");
                vec![Some(ArrayD::from_elem(dim.clone(), g0))]
            }),
        )
    }

    pub fn mean(&self) -> Var<T> {
        let n = T::from_usize(self.len()).expect("length fits");
        self.sum().scale(T::one() / n)
    }

    /// Sum over `axes`, keeping them as size-1 dimensions.
    pub fn sum_axes(&self, axes: &[usize]) -> Var<T> {
        let mut value = self.value().clone();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        for &ax in sorted.iter() {
            value = value.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
        let shape = self.shape().to_vec();
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |_, g| vec![Some(broadcast_to(g, &shape))]),
        )
    }

    /// Sum over every axis except the leading batch axis; result shape `(N,)`.
    pub fn sum_per_sample(&self) -> Var<T> {
        let n = self.shape()[0];
        let axes: Vec<usize> = (1..self.ndim()).collect();
        self.sum_axes(&axes).reshape(&[n])
    }

    pub fn mean_per_sample(&self) -> Var<T> {
        let per = self.len() / self.shape()[0];
        let inv = T::one() / T::from_usize(per).expect("length fits");
        self.sum_per_sample().scale(inv)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<T> {
        let value = self
            .value()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|e| panic!("reshape {:?} -> {:?}: {e}", self.shape(), shape));
        let orig = self.shape().to_vec();
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |_, g| {
                let g = g
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(&orig))
                    .expect("gradient reshape");
                vec![Some(g)]
            }),
        )
    }

    /// Sub-range `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var<T> {
        let value = self
            .value()
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        let full = self.value().raw_dim();
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut gx = ArrayD::zeros(full.clone());
                gx.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                    .assign(g);
                vec![Some(gx)]
            }),
        )
    }

    pub fn concat(parts: &[Var<T>], axis: usize) -> Var<T> {
        let views: Vec<_> = parts.iter().map(|p| p.value().view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Var::from_op(
            value,
            parts.to_vec(),
            Box::new(move |_, g| {
                let mut start = 0;
                sizes
                    .iter()
                    .map(|&len| {
                        let piece = g
                            .slice_axis(Axis(axis), Slice::from(start..start + len))
                            .to_owned();
                        start += len;
                        Some(piece)
                    })
                    .collect()
            }),
        )
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

macro_rules! binop {
    ($tr:ident, $method:ident) => {
        impl<T: Scalar> $tr<&Var<T>> for &Var<T> {
            type Output = Var<T>;
            fn $method(self, rhs: &Var<T>) -> Var<T> {
                Var::$method(self, rhs)
            }
        }
    };
}

binop!(Add, add);
binop!(Sub, sub);
binop!(Mul, mul);
binop!(Div, div);

impl<T: Scalar> Neg for &Var<T> {
    type Output = Var<T>;
    fn neg(self) -> Var<T> {
        Var::neg(self)
    }
}
