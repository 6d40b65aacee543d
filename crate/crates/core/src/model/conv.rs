use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};

use super::Scalar;

/// 1-D convolution over the frame axis with "same" zero padding.
///
/// Activations are `T × C` (frames × channels). The kernel is stored as
/// `(kernel, in_channels, out_channels)` so each tap is a plain matrix
/// product against a row-shifted view of the input.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d<T> {
    pub weight: Array3<T>,
    pub bias: Array1<T>,
    pub dilation: usize,
}

impl<T: Scalar> Conv1d<T> {
    pub fn zeros(kernel: usize, in_channels: usize, out_channels: usize, dilation: usize) -> Self {
        Self {
            weight: Array3::zeros((kernel, in_channels, out_channels)),
            bias: Array1::zeros(out_channels),
            dilation,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().0
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().2
    }

    /// Half-width of the output's dependence on the input, in frames.
    pub fn radius(&self) -> usize {
        (self.kernel() - 1) / 2 * self.dilation
    }

    /// Row ranges `(out_rows, in_rows)` touched by tap `k` for `frames` frames.
    fn tap_rows(&self, k: usize, frames: usize) -> Option<(std::ops::Range<usize>, std::ops::Range<usize>)> {
        let offset = (k as isize - ((self.kernel() - 1) / 2) as isize) * self.dilation as isize;
        let lo = (-offset).max(0) as usize;
        let hi = (frames as isize - offset.max(0)).max(0) as usize;
        if lo >= hi {
            return None;
        }
        let src_lo = (lo as isize + offset) as usize;
        Some((lo..hi, src_lo..src_lo + (hi - lo)))
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        let frames = x.nrows();
        debug_assert_eq!(x.ncols(), self.in_channels());
        let mut y = Array2::zeros((frames, self.out_channels()));
        y += &self.bias;
        for k in 0..self.kernel() {
            if let Some((out_rows, in_rows)) = self.tap_rows(k, frames) {
                general_mat_mul(
                    T::one(),
                    &x.slice(s![in_rows, ..]),
                    &self.weight.index_axis(Axis(0), k),
                    T::one(),
                    &mut y.slice_mut(s![out_rows, ..]),
                );
            }
        }
        y
    }

    /// Accumulates parameter gradients into `grad` and returns the input
    /// gradient when `need_input_grad` is set.
    pub fn backward(
        &self,
        x: ArrayView2<T>,
        dy: ArrayView2<T>,
        grad: &mut Conv1d<T>,
        need_input_grad: bool,
    ) -> Option<Array2<T>> {
        let frames = x.nrows();
        grad.bias += &dy.sum_axis(Axis(0));
        let mut dx = need_input_grad.then(|| Array2::zeros(x.raw_dim()));
        for k in 0..self.kernel() {
            let Some((out_rows, in_rows)) = self.tap_rows(k, frames) else {
                continue;
            };
            let dy_k = dy.slice(s![out_rows, ..]);
            let x_k = x.slice(s![in_rows.clone(), ..]);
            general_mat_mul(
                T::one(),
                &x_k.t(),
                &dy_k,
                T::one(),
                &mut grad.weight.index_axis_mut(Axis(0), k),
            );
            if let Some(dx) = dx.as_mut() {
                general_mat_mul(
                    T::one(),
                    &dy_k,
                    &self.weight.index_axis(Axis(0), k).t(),
                    T::one(),
                    &mut dx.slice_mut(s![in_rows, ..]),
                );
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    /// Direct summation over taps, independent of the shifted-GEMM path.
    fn naive(conv: &Conv1d<f64>, x: &Array2<f64>) -> Array2<f64> {
        let (frames, cin) = x.dim();
        let kernel = conv.kernel();
        let half = (kernel - 1) / 2;
        Array2::from_shape_fn((frames, conv.out_channels()), |(t, o)| {
            let mut acc = conv.bias[o];
            for k in 0..kernel {
                let src = t as isize + (k as isize - half as isize) * conv.dilation as isize;
                if src < 0 || src >= frames as isize {
                    continue;
                }
                for c in 0..cin {
                    acc += x[[src as usize, c]] * conv.weight[[k, c, o]];
                }
            }
            acc
        })
    }

    fn sample_conv(kernel: usize, cin: usize, cout: usize, dilation: usize) -> Conv1d<f64> {
        let mut conv = Conv1d::zeros(kernel, cin, cout, dilation);
        conv.weight = Array::from_shape_fn((kernel, cin, cout), |(k, c, o)| {
            ((k * 31 + c * 7 + o * 3) % 11) as f64 / 11.0 - 0.5
        });
        conv.bias = Array::from_shape_fn(cout, |o| o as f64 * 0.1);
        conv
    }

    #[test]
    fn forward_matches_naive() {
        let x = Array2::from_shape_fn((9, 4), |(t, c)| ((t * 5 + c * 3) % 7) as f64 - 3.0);
        for (kernel, dilation) in [(1, 1), (3, 1), (7, 1), (3, 3), (11, 5)] {
            let conv = sample_conv(kernel, 4, 5, dilation);
            let y = conv.forward(x.view());
            let z = naive(&conv, &x);
            for (a, b) in y.iter().zip(&z) {
                assert!((a - b).abs() < 1e-12, "k{kernel} d{dilation}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_difference() {
        let x = Array2::from_shape_fn((6, 3), |(t, c)| ((t * 3 + c) % 5) as f64 * 0.3 - 0.6);
        let conv = sample_conv(3, 3, 2, 2);
        // scalar objective: Σ y ⊙ r with fixed r
        let r = Array2::from_shape_fn((6, 2), |(t, o)| (t as f64 - 2.0) * 0.5 + o as f64);
        let mut grad = Conv1d::zeros(3, 3, 2, 2);
        let dx = conv.backward(x.view(), r.view(), &mut grad, true).unwrap();
        let objective = |c: &Conv1d<f64>, x: &Array2<f64>| (&c.forward(x.view()) * &r).sum();
        let h = 1e-6;
        for idx in [[0, 0, 0], [1, 2, 1], [2, 1, 0]] {
            let mut p = conv.clone();
            p.weight[idx] += h;
            let mut m = conv.clone();
            m.weight[idx] -= h;
            let fd = (objective(&p, &x) - objective(&m, &x)) / (2.0 * h);
            assert!((fd - grad.weight[idx]).abs() < 1e-6);
        }
        let fd = {
            let mut p = conv.clone();
            p.bias[1] += h;
            let mut m = conv.clone();
            m.bias[1] -= h;
            (objective(&p, &x) - objective(&m, &x)) / (2.0 * h)
        };
        assert!((fd - grad.bias[1]).abs() < 1e-6);
        for idx in [[0, 0], [3, 2], [5, 1]] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (objective(&conv, &xp) - objective(&conv, &xm)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-6);
        }
    }

    #[test]
    fn dilation_wider_than_input() {
        let conv = sample_conv(3, 2, 2, 10);
        let x = Array2::from_elem((4, 2), 1.0);
        let y = conv.forward(x.view());
        for (a, b) in y.iter().zip(&naive(&conv, &x)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
