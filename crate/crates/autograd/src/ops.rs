//! Elementwise, reduction, shape and matrix operations.

use std::rc::Rc;

use ndarray::{concatenate, linalg::general_mat_mul, ArrayD, Axis, Ix2, IxDyn, Slice};

use crate::graph::Var;
use crate::real::Real;

/// Sum `g` down to `shape`, undoing numpy-style broadcasting.
pub(crate) fn sum_to_shape<F: Real>(g: ArrayD<F>, shape: &[usize]) -> ArrayD<F> {
    if g.shape() == shape {
        return g;
    }
    let mut g = g;
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (axis, &dim) in shape.iter().enumerate() {
        if dim == 1 && g.shape()[axis] != 1 {
            g = g.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    debug_assert_eq!(g.shape(), shape);
    g
}

/// Row-major copy with the given shape.
pub(crate) fn reshaped<F: Real>(a: &ArrayD<F>, shape: &[usize]) -> ArrayD<F> {
    let data: Vec<F> = match a.as_slice() {
        Some(s) => s.to_vec(),
        None => a.iter().copied().collect(),
    };
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("reshape: element count mismatch")
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| {
            let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
            let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
            assert!(
                da == db || da == 1 || db == 1,
                "incompatible broadcast shapes {a:?} and {b:?}"
            );
            da.max(db)
        })
        .collect()
}

fn broadcast_to<F: Real>(a: &ArrayD<F>, shape: &[usize]) -> ArrayD<F> {
    a.broadcast(IxDyn(shape))
        .unwrap_or_else(|| panic!("cannot broadcast {:?} to {shape:?}", a.shape()))
        .to_owned()
}

impl<'g, F: Real> Var<'g, F> {
    fn binary(
        self,
        other: Var<'g, F>,
        value: ArrayD<F>,
        backward: impl Fn(&ArrayD<F>, &ArrayD<F>, &ArrayD<F>, &[bool]) -> (Option<ArrayD<F>>, Option<ArrayD<F>>)
            + 'static,
    ) -> Var<'g, F> {
        let a = self.value();
        let b = other.value();
        self.graph.push_op(
            value,
            &[self.id, other.id],
            Box::new(move |g, needs| {
                let (ga, gb) = backward(g, &a, &b, needs);
                vec![
                    ga.map(|x| sum_to_shape(x, a.shape())),
                    gb.map(|x| sum_to_shape(x, b.shape())),
                ]
            }),
        )
    }

    fn full_operands(&self, other: &Var<'g, F>) -> (ArrayD<F>, ArrayD<F>) {
        let a = self.value();
        let b = other.value();
        let shape = broadcast_shape(a.shape(), b.shape());
        (broadcast_to(&a, &shape), broadcast_to(&b, &shape))
    }

    pub fn add(self, other: Var<'g, F>) -> Var<'g, F> {
        let (a, b) = self.full_operands(&other);
        self.binary(other, a + b, |g, _, _, _| (Some(g.clone()), Some(g.clone())))
    }

    pub fn sub(self, other: Var<'g, F>) -> Var<'g, F> {
        let (a, b) = self.full_operands(&other);
        self.binary(other, a - b, |g, _, _, _| (Some(g.clone()), Some(g.mapv(|v| -v))))
    }

    pub fn mul(self, other: Var<'g, F>) -> Var<'g, F> {
        let (a, b) = self.full_operands(&other);
        self.binary(other, a * b, |g, a, b, needs| {
            (
                needs[0].then(|| g * &b.broadcast(g.raw_dim()).unwrap()),
                needs[1].then(|| g * &a.broadcast(g.raw_dim()).unwrap()),
            )
        })
    }

    pub fn div(self, other: Var<'g, F>) -> Var<'g, F> {
        let (a, b) = self.full_operands(&other);
        self.binary(other, a / b, |g, a, b, needs| {
            let bb = b.broadcast(g.raw_dim()).unwrap();
            (
                needs[0].then(|| g / &bb),
                needs[1].then(|| {
                    let ab = a.broadcast(g.raw_dim()).unwrap();
                    let mut out = g * &ab;
                    out.zip_mut_with(&bb, |o, &b| *o = -*o / (b * b));
                    out
                }),
            )
        })
    }

    fn unary(
        self,
        forward: impl Fn(F) -> F,
        derivative: impl Fn(F, F) -> F + 'static,
    ) -> Var<'g, F> {
        let x = self.value();
        let y = x.mapv(forward);
        let y_saved = y.clone();
        self.graph.push_op(
            y,
            &[self.id],
            Box::new(move |g, _| {
                let mut out = g.clone();
                ndarray::Zip::from(&mut out)
                    .and(&*x)
                    .and(&y_saved)
                    .for_each(|o, &xv, &yv| *o *= derivative(xv, yv));
                vec![Some(out)]
            }),
        )
    }

    pub fn scale(self, factor: F) -> Var<'g, F> {
        self.unary(move |x| x * factor, move |_, _| factor)
    }

    pub fn add_scalar(self, c: F) -> Var<'g, F> {
        self.unary(move |x| x + c, |_, _| F::one())
    }

    pub fn neg(self) -> Var<'g, F> {
        self.scale(-F::one())
    }

    pub fn square(self) -> Var<'g, F> {
        let two = F::from_f64(2.0);
        self.unary(|x| x * x, move |x, _| two * x)
    }

    pub fn sqrt(self) -> Var<'g, F> {
        let half = F::from_f64(0.5);
        self.unary(|x| x.sqrt(), move |_, y| half / y)
    }

    /// `x^-1/2`
    pub fn rsqrt(self) -> Var<'g, F> {
        let half = F::from_f64(-0.5);
        self.unary(|x| x.sqrt().recip(), move |x, y| half * y / x)
    }

    pub fn tanh(self) -> Var<'g, F> {
        self.unary(|x| x.tanh(), |_, y| F::one() - y * y)
    }

    pub fn relu(self) -> Var<'g, F> {
        self.unary(
            |x| if x > F::zero() { x } else { F::zero() },
            |x, _| if x > F::zero() { F::one() } else { F::zero() },
        )
    }

    pub fn leaky_relu(self, slope: F) -> Var<'g, F> {
        self.unary(
            move |x| if x > F::zero() { x } else { x * slope },
            move |x, _| if x > F::zero() { F::one() } else { slope },
        )
    }

    /// Sum of all elements, shape `[]`.
    pub fn sum(self) -> Var<'g, F> {
        let x = self.value();
        let shape = x.raw_dim();
        let total = x.sum();
        self.graph.push_op(
            ArrayD::from_elem(IxDyn(&[]), total),
            &[self.id],
            Box::new(move |g, _| {
                let gv = *g.iter().next().unwrap();
                vec![Some(ArrayD::from_elem(shape.clone(), gv))]
            }),
        )
    }

    pub fn mean(self) -> Var<'g, F> {
        let n = self.value().len();
        self.sum().scale(F::one() / F::from_f64(n as f64))
    }

    /// Sum over `axes`, keeping them as size-1 dimensions.
    pub fn sum_axes(self, axes: &[usize]) -> Var<'g, F> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let mut out = (*x).clone();
        for &ax in axes {
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
        self.graph.push_op(
            out,
            &[self.id],
            Box::new(move |g, _| vec![Some(broadcast_to(g, &in_shape))]),
        )
    }

    pub fn mean_axes(self, axes: &[usize]) -> Var<'g, F> {
        let shape = self.shape();
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        self.sum_axes(axes).scale(F::one() / F::from_f64(count as f64))
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g, F> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let out = reshaped(&x, shape);
        self.graph.push_op(
            out,
            &[self.id],
            Box::new(move |g, _| vec![Some(reshaped(g, &in_shape))]),
        )
    }

    /// Axis permutation; `perm[i]` is the source axis of output axis `i`.
    pub fn permute(self, perm: &[usize]) -> Var<'g, F> {
        let x = self.value();
        let out = x
            .view()
            .permuted_axes(IxDyn(perm))
            .as_standard_layout()
            .into_owned();
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        self.graph.push_op(
            out,
            &[self.id],
            Box::new(move |g, _| {
                vec![Some(
                    g.view()
                        .permuted_axes(IxDyn(&inverse))
                        .as_standard_layout()
                        .into_owned(),
                )]
            }),
        )
    }

    /// Contiguous range `[start, end)` along `axis`.
    pub fn slice_axis(self, axis: usize, start: usize, end: usize) -> Var<'g, F> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let out = x
            .slice_axis(Axis(axis), Slice::from(start..end))
            .to_owned();
        self.graph.push_op(
            out,
            &[self.id],
            Box::new(move |g, _| {
                let mut full = ArrayD::zeros(IxDyn(&in_shape));
                full.slice_axis_mut(Axis(axis), Slice::from(start..end))
                    .assign(g);
                vec![Some(full)]
            }),
        )
    }

    /// `[m, k] x [k, n]`, or batched `[b, m, k] x [b, k, n]`.
    pub fn matmul(self, other: Var<'g, F>) -> Var<'g, F> {
        let a = self.value();
        let b = other.value();
        match (a.ndim(), b.ndim()) {
            (2, 2) => {
                let a2 = a.view().into_dimensionality::<Ix2>().unwrap();
                let b2 = b.view().into_dimensionality::<Ix2>().unwrap();
                let out = a2.dot(&b2).into_dyn();
                self.graph.push_op(
                    out,
                    &[self.id, other.id],
                    Box::new(move |g, needs| {
                        let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                        let a2 = a.view().into_dimensionality::<Ix2>().unwrap();
                        let b2 = b.view().into_dimensionality::<Ix2>().unwrap();
                        vec![
                            needs[0].then(|| g2.dot(&b2.t()).into_dyn()),
                            needs[1].then(|| a2.t().dot(&g2).into_dyn()),
                        ]
                    }),
                )
            }
            (3, 3) => {
                let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
                let n = b.shape()[2];
                assert_eq!(b.shape()[0], bs, "batched matmul: batch mismatch");
                assert_eq!(b.shape()[1], k, "batched matmul: inner dim mismatch");
                let mut out = ArrayD::zeros(IxDyn(&[bs, m, n]));
                for i in 0..bs {
                    let ai = a.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
                    let bi = b.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
                    let mut oi = out
                        .index_axis_mut(Axis(0), i)
                        .into_dimensionality::<Ix2>()
                        .unwrap();
                    general_mat_mul(F::one(), &ai, &bi, F::zero(), &mut oi);
                }
                self.graph.push_op(
                    out,
                    &[self.id, other.id],
                    Box::new(move |g, needs| {
                        let mut ga = needs[0].then(|| ArrayD::zeros(a.raw_dim()));
                        let mut gb = needs[1].then(|| ArrayD::zeros(b.raw_dim()));
                        for i in 0..bs {
                            let gi = g.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
                            if let Some(ga) = ga.as_mut() {
                                let bi = b.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
                                let mut t = ga.index_axis_mut(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
                                general_mat_mul(F::one(), &gi, &bi.t(), F::zero(), &mut t);
                            }
                            if let Some(gb) = gb.as_mut() {
                                let ai = a.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
                                let mut t = gb.index_axis_mut(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
                                general_mat_mul(F::one(), &ai.t(), &gi, F::zero(), &mut t);
                            }
                        }
                        vec![ga, gb]
                    }),
                )
            }
            (da, db) => panic!("matmul supports 2-D or batched 3-D operands, got {da}-D and {db}-D"),
        }
    }
}

/// Concatenate along `axis`.
pub fn concat<'g, F: Real>(vars: &[Var<'g, F>], axis: usize) -> Var<'g, F> {
    assert!(!vars.is_empty(), "concat of zero tensors");
    let graph = vars[0].graph;
    let values: Vec<Rc<ArrayD<F>>> = vars.iter().map(|v| v.value()).collect();
    let views: Vec<_> = values.iter().map(|v| v.view()).collect();
    let out = concatenate(Axis(axis), &views).expect("concat: incompatible shapes");
    let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    let ids: Vec<usize> = vars.iter().map(|v| v.id).collect();
    graph.push_op(
        out,
        &ids,
        Box::new(move |g, needs| {
            let mut start = 0;
            sizes
                .iter()
                .zip(needs)
                .map(|(&len, &need)| {
                    let part = need.then(|| {
                        g.slice_axis(Axis(axis), Slice::from(start..start + len))
                            .to_owned()
                    });
                    start += len;
                    part
                })
                .collect()
        }),
    )
}

/// Stack equally-shaped tensors along a new leading axis.
pub fn stack<'g, F: Real>(vars: &[Var<'g, F>]) -> Var<'g, F> {
    let expanded: Vec<Var<'g, F>> = vars
        .iter()
        .map(|v| {
            let mut shape = vec![1];
            shape.extend(v.shape());
            v.reshape(&shape)
        })
        .collect();
    concat(&expanded, 0)
}
