//! NHWC convolution and resampling.
//!
//! Kernels use the `[k, k, C_in, C_out]` layout. A kernel may also carry a
//! leading batch axis (`[N, k, k, C_in, C_out]`), in which case sample `n` of
//! the input is convolved with its own kernel. Generator weights modulated
//! per image take that path.

use ndarray::{linalg::general_mat_mul, ArrayD, ArrayView2, ArrayViewMut2, IxDyn};

use crate::graph::Var;
use crate::real::Real;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    h: usize,
    w: usize,
    c_in: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl Geometry {
    fn patch_len(&self) -> usize {
        self.k * self.k * self.c_in
    }

    fn rows_per_sample(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Unfold patches of sample `n` into `cols` (`rows_per_sample x patch_len`).
fn im2col<F: Real>(x: &[F], geo: &Geometry, n: usize, cols: &mut [F]) {
    let Geometry { h, w, c_in, k, stride, pad, h_out, w_out, .. } = *geo;
    let patch = geo.patch_len();
    let sample = &x[n * h * w * c_in..(n + 1) * h * w * c_in];
    for oy in 0..h_out {
        for ox in 0..w_out {
            let row = &mut cols[(oy * w_out + ox) * patch..(oy * w_out + ox + 1) * patch];
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    let dst = &mut row[(ky * k + kx) * c_in..(ky * k + kx + 1) * c_in];
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                        dst.fill(F::zero());
                    } else {
                        let src = (iy as usize * w + ix as usize) * c_in;
                        dst.copy_from_slice(&sample[src..src + c_in]);
                    }
                }
            }
        }
    }
}

/// Scatter-add patch gradients of sample `n` back onto `dx`.
fn col2im<F: Real>(dcols: &[F], geo: &Geometry, n: usize, dx: &mut [F]) {
    let Geometry { h, w, c_in, k, stride, pad, h_out, w_out, .. } = *geo;
    let patch = geo.patch_len();
    let sample = &mut dx[n * h * w * c_in..(n + 1) * h * w * c_in];
    for oy in 0..h_out {
        for ox in 0..w_out {
            let row = &dcols[(oy * w_out + ox) * patch..(oy * w_out + ox + 1) * patch];
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = &row[(ky * k + kx) * c_in..(ky * k + kx + 1) * c_in];
                    let dst = (iy as usize * w + ix as usize) * c_in;
                    for (d, &s) in sample[dst..dst + c_in].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

fn mat<F>(data: &[F], rows: usize, cols: usize) -> ArrayView2<'_, F> {
    ArrayView2::from_shape((rows, cols), data).expect("matrix view")
}

fn mat_mut<F>(data: &mut [F], rows: usize, cols: usize) -> ArrayViewMut2<'_, F> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("matrix view")
}

fn contiguous<F: Real>(a: &ArrayD<F>) -> Vec<F> {
    match a.as_slice() {
        Some(s) => s.to_vec(),
        None => a.iter().copied().collect(),
    }
}

impl<'g, F: Real> Var<'g, F> {
    /// 2-D convolution of an NHWC input with zero padding.
    pub fn conv2d(self, kernel: Var<'g, F>, stride: usize, padding: usize) -> Var<'g, F> {
        let x = self.value();
        let wt = kernel.value();
        assert_eq!(x.ndim(), 4, "conv2d input must be NHWC, got {:?}", x.shape());
        let per_sample = match wt.ndim() {
            4 => false,
            5 => true,
            d => panic!("conv2d kernel must be 4-D or 5-D, got {d}-D"),
        };
        let ks = if per_sample { &wt.shape()[1..] } else { wt.shape() };
        let (k, c_in, c_out) = (ks[0], ks[2], ks[3]);
        assert_eq!(ks[0], ks[1], "conv2d kernel must be square");
        assert_eq!(x.shape()[3], c_in, "conv2d channel mismatch: input {:?}, kernel {:?}", x.shape(), wt.shape());
        let (n, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if per_sample {
            assert_eq!(wt.shape()[0], n, "per-sample kernel batch mismatch");
        }
        assert!(h + 2 * padding >= k && w + 2 * padding >= k, "conv2d kernel larger than padded input");
        let geo = Geometry {
            h,
            w,
            c_in,
            k,
            stride,
            pad: padding,
            h_out: (h + 2 * padding - k) / stride + 1,
            w_out: (w + 2 * padding - k) / stride + 1,
        };
        let patch = geo.patch_len();
        let rows = geo.rows_per_sample();

        let xs = contiguous(&x);
        let ws = contiguous(&wt);
        let mut cols = vec![F::zero(); n * rows * patch];
        for s in 0..n {
            im2col(&xs, &geo, s, &mut cols[s * rows * patch..(s + 1) * rows * patch]);
        }
        let mut out = vec![F::zero(); n * rows * c_out];
        if per_sample {
            let wlen = patch * c_out;
            for s in 0..n {
                general_mat_mul(
                    F::one(),
                    &mat(&cols[s * rows * patch..(s + 1) * rows * patch], rows, patch),
                    &mat(&ws[s * wlen..(s + 1) * wlen], patch, c_out),
                    F::zero(),
                    &mut mat_mut(&mut out[s * rows * c_out..(s + 1) * rows * c_out], rows, c_out),
                );
            }
        } else {
            general_mat_mul(
                F::one(),
                &mat(&cols, n * rows, patch),
                &mat(&ws, patch, c_out),
                F::zero(),
                &mut mat_mut(&mut out, n * rows, c_out),
            );
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[n, geo.h_out, geo.w_out, c_out]), out).unwrap();

        let kernel_shape = wt.shape().to_vec();
        let saved_cols = kernel.requires_grad().then_some(cols);
        self.graph.push_op(
            out,
            &[self.id, kernel.id],
            Box::new(move |g, needs| {
                let gs = contiguous(g);
                let mut dx = None;
                if needs[0] {
                    let mut dcols = vec![F::zero(); n * rows * patch];
                    if per_sample {
                        let wlen = patch * c_out;
                        for s in 0..n {
                            general_mat_mul(
                                F::one(),
                                &mat(&gs[s * rows * c_out..(s + 1) * rows * c_out], rows, c_out),
                                &mat(&ws[s * wlen..(s + 1) * wlen], patch, c_out).t(),
                                F::zero(),
                                &mut mat_mut(&mut dcols[s * rows * patch..(s + 1) * rows * patch], rows, patch),
                            );
                        }
                    } else {
                        general_mat_mul(
                            F::one(),
                            &mat(&gs, n * rows, c_out),
                            &mat(&ws, patch, c_out).t(),
                            F::zero(),
                            &mut mat_mut(&mut dcols, n * rows, patch),
                        );
                    }
                    let mut dxs = vec![F::zero(); n * h * w * c_in];
                    for s in 0..n {
                        col2im(&dcols[s * rows * patch..(s + 1) * rows * patch], &geo, s, &mut dxs);
                    }
                    dx = Some(ArrayD::from_shape_vec(IxDyn(&[n, h, w, c_in]), dxs).unwrap());
                }
                let mut dw = None;
                if needs[1] {
                    let cols = saved_cols.as_ref().expect("patches saved for kernel gradient");
                    let mut dws = vec![F::zero(); kernel_shape.iter().product()];
                    if per_sample {
                        let wlen = patch * c_out;
                        for s in 0..n {
                            general_mat_mul(
                                F::one(),
                                &mat(&cols[s * rows * patch..(s + 1) * rows * patch], rows, patch).t(),
                                &mat(&gs[s * rows * c_out..(s + 1) * rows * c_out], rows, c_out),
                                F::zero(),
                                &mut mat_mut(&mut dws[s * wlen..(s + 1) * wlen], patch, c_out),
                            );
                        }
                    } else {
                        general_mat_mul(
                            F::one(),
                            &mat(cols, n * rows, patch).t(),
                            &mat(&gs, n * rows, c_out),
                            F::zero(),
                            &mut mat_mut(&mut dws, patch, c_out),
                        );
                    }
                    dw = Some(ArrayD::from_shape_vec(IxDyn(&kernel_shape), dws).unwrap());
                }
                vec![dx, dw]
            }),
        )
    }

    /// Nearest-neighbour 2x upsampling of an NHWC tensor.
    pub fn upsample2x(self) -> Var<'g, F> {
        let x = self.value();
        let (n, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let out = ArrayD::from_shape_fn(IxDyn(&[n, 2 * h, 2 * w, c]), |i| {
            x[[i[0], i[1] / 2, i[2] / 2, i[3]]]
        });
        self.graph.push_op(
            out,
            &[self.id],
            Box::new(move |g, _| {
                let mut dx = ArrayD::zeros(IxDyn(&[n, h, w, c]));
                for ((b, y, xx, ch), &v) in g
                    .indexed_iter()
                    .map(|(i, v)| ((i[0], i[1], i[2], i[3]), v))
                {
                    dx[[b, y / 2, xx / 2, ch]] += v;
                }
                vec![Some(dx)]
            }),
        )
    }

    /// 2x2 average pooling with stride 2 (NHWC, even spatial size).
    pub fn avg_pool2x(self) -> Var<'g, F> {
        let x = self.value();
        let (n, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2x needs even spatial dims");
        let quarter = F::from_f64(0.25);
        let out = ArrayD::from_shape_fn(IxDyn(&[n, h / 2, w / 2, c]), |i| {
            let (b, y, xx, ch) = (i[0], 2 * i[1], 2 * i[2], i[3]);
            (x[[b, y, xx, ch]] + x[[b, y + 1, xx, ch]] + x[[b, y, xx + 1, ch]] + x[[b, y + 1, xx + 1, ch]])
                * quarter
        });
        self.graph.push_op(
            out,
            &[self.id],
            Box::new(move |g, _| {
                let dx = ArrayD::from_shape_fn(IxDyn(&[n, h, w, c]), |i| {
                    g[[i[0], i[1] / 2, i[2] / 2, i[3]]] * quarter
                });
                vec![Some(dx)]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    fn naive_conv(x: &ArrayD<f64>, w: &ArrayD<f64>, stride: usize, pad: usize) -> ArrayD<f64> {
        let (n, h, wd, c_in) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (k, c_out) = (w.shape()[0], w.shape()[3]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = ArrayD::zeros(IxDyn(&[n, ho, wo, c_out]));
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    for co in 0..c_out {
                        let mut acc = 0.0;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                for ci in 0..c_in {
                                    acc += x[[b, iy as usize, ix as usize, ci]] * w[[ky, kx, ci, co]];
                                }
                            }
                        }
                        out[[b, oy, ox, co]] = acc;
                    }
                }
            }
        }
        out
    }

    fn pseudo(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ArrayD::from_shape_fn(IxDyn(shape), |_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        })
    }

    #[test]
    fn conv_matches_direct_loops() {
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 3, 7)] {
            let x = pseudo(&[2, 9, 8, 3], 1);
            let w = pseudo(&[k, k, 3, 5], 2);
            let graph = Graph::new();
            let y = graph.constant(x.clone()).conv2d(graph.constant(w.clone()), stride, pad);
            let expected = naive_conv(&x, &w, stride, pad);
            let got = y.value();
            assert_eq!(got.shape(), expected.shape());
            for (a, b) in got.iter().zip(expected.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn per_sample_kernel_matches_separate_convs() {
        let x = pseudo(&[2, 5, 5, 2], 3);
        let w = pseudo(&[2, 3, 3, 2, 4], 4);
        let graph = Graph::new();
        let y = graph.constant(x.clone()).conv2d(graph.constant(w.clone()), 1, 1).value();
        for s in 0..2 {
            let xs = x.index_axis(ndarray::Axis(0), s).insert_axis(ndarray::Axis(0)).to_owned();
            let ws = w.index_axis(ndarray::Axis(0), s).to_owned();
            let e = naive_conv(&xs, &ws, 1, 1);
            let ys = y.index_axis(ndarray::Axis(0), s);
            for (a, b) in ys.iter().zip(e.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_then_pool_is_identity() {
        let x = pseudo(&[1, 3, 3, 2], 5);
        let graph = Graph::new();
        let y = graph.constant(x.clone()).upsample2x().avg_pool2x().value();
        for (a, b) in y.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
