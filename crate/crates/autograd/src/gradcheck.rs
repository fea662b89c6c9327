//! Central finite differences for checking tape gradients.

use ndarray::ArrayD;

/// Numerical gradient of `f` at `point` by central differences with step `h`.
pub fn central_difference<Func>(f: Func, point: &ArrayD<f64>, h: f64) -> ArrayD<f64>
where
    Func: Fn(&ArrayD<f64>) -> f64,
{
    let mut probe = point.clone();
    let mut grad = ArrayD::zeros(point.raw_dim());
    for (i, g) in grad.iter_mut().enumerate() {
        let original = *point.iter().nth(i).unwrap();
        set_flat(&mut probe, i, original + h);
        let plus = f(&probe);
        set_flat(&mut probe, i, original - h);
        let minus = f(&probe);
        set_flat(&mut probe, i, original);
        *g = (plus - minus) / (2.0 * h);
    }
    grad
}

fn set_flat(a: &mut ArrayD<f64>, i: usize, v: f64) {
    *a.iter_mut().nth(i).unwrap() = v;
}

/// `max |a - b| / max(max |a|, max |b|, floor)`.
pub fn relative_error(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    let diff = analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric.iter())
        .map(|v| v.abs())
        .fold(floor, f64::max);
    diff / scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use ndarray::IxDyn;

    fn sample(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut s = seed;
        ArrayD::from_shape_fn(IxDyn(shape), |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) as f64 / (1u64 << 31) as f64) * 2.0 - 1.0
        })
    }

    fn check(build: impl for<'g> Fn(&'g Graph<f64>, &ArrayD<f64>) -> crate::graph::Var<'g, f64>, x: ArrayD<f64>) {
        let graph = Graph::new();
        let out = build(&graph, &x);
        let grads = graph.backward(out);
        // every builder below creates its leaf first
        let leaf = crate::graph::Var { graph: &graph, id: 0 };
        let analytic = grads.get_or_zeros(leaf);
        let numeric = central_difference(
            |p| {
                let g = Graph::new();
                build(&g, p).item()
            },
            &x,
            1e-5,
        );
        let err = relative_error(&analytic, &numeric, 1e-8);
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn elementwise_chain() {
        check(
            |g, x| {
                let v = g.leaf(x.clone());
                let c = g.constant(sample(&[3, 4], 9));
                v.tanh().mul(c).add(v.square().add_scalar(1.0).sqrt()).div(v.leaky_relu(0.2).add_scalar(3.0)).sum()
            },
            sample(&[3, 4], 1),
        );
    }

    #[test]
    fn conv_and_resampling() {
        check(
            |g, x| {
                let v = g.leaf(x.clone());
                let k = g.constant(sample(&[3, 3, 2, 3], 4));
                v.conv2d(k, 2, 1).upsample2x().avg_pool2x().square().mean()
            },
            sample(&[2, 6, 6, 2], 2),
        );
    }

    #[test]
    fn conv_kernel_gradient_per_sample() {
        check(
            |g, w| {
                let k = g.leaf(w.clone());
                let x = g.constant(sample(&[2, 5, 5, 2], 6));
                x.conv2d(k, 1, 1).tanh().sum()
            },
            sample(&[2, 3, 3, 2, 3], 5),
        );
    }

    #[test]
    fn matmul_reshape_permute_concat() {
        check(
            |g, x| {
                let v = g.leaf(x.clone());
                let w = g.constant(sample(&[6, 4], 7));
                let m = v.reshape(&[2, 6]).matmul(w);
                let b = v.reshape(&[2, 2, 3]).matmul(g.constant(sample(&[2, 3, 2], 8)));
                let cat = crate::ops::concat(&[m, b.reshape(&[2, 4]).permute(&[0, 1])], 1);
                cat.slice_axis(1, 2, 7).rsqrt_safe().sum()
            },
            sample(&[3, 4], 3),
        );
    }

    #[test]
    fn sum_axes_broadcast() {
        check(
            |g, x| {
                let v = g.leaf(x.clone());
                let s = v.sum_axes(&[0, 2]);
                v.mul(s).mean_axes(&[1]).square().sum()
            },
            sample(&[2, 3, 4], 11),
        );
    }

    impl<'g> crate::graph::Var<'g, f64> {
        fn rsqrt_safe(self) -> Self {
            self.square().add_scalar(0.5).rsqrt()
        }
    }
}
