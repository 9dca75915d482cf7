use ndarray::{Array1, Array2, Axis, Zip};

use crate::scalar::{gelu, gelu_grad, Scalar};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub(crate) struct LayerNormCache<T> {
    pub xhat: Array2<T>,
    pub inv_std: Array1<T>,
}

/// Row-wise LayerNorm with biased variance.
pub(crate) fn layer_norm<T: Scalar>(
    x: &Array2<T>,
    gain: &Array1<T>,
    bias: &Array1<T>,
) -> (Array2<T>, LayerNormCache<T>) {
    let (n, width) = x.dim();
    let w = T::lit(width as f64);
    let eps = T::lit(LAYER_NORM_EPS);
    let mut xhat = Array2::zeros((n, width));
    let mut inv_std = Array1::zeros(n);
    for (r, row) in x.outer_iter().enumerate() {
        let mean = row.sum() / w;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / w;
        let inv = T::one() / (var + eps).sqrt();
        inv_std[r] = inv;
        for (c, &v) in row.iter().enumerate() {
            xhat[[r, c]] = (v - mean) * inv;
        }
    }
    let mut y = xhat.clone();
    for mut row in y.outer_iter_mut() {
        Zip::from(&mut row)
            .and(gain)
            .and(bias)
            .for_each(|y, &g, &b| *y = *y * g + b);
    }
    (y, LayerNormCache { xhat, inv_std })
}

pub(crate) fn layer_norm_backward<T: Scalar>(
    dy: &Array2<T>,
    gain: &Array1<T>,
    cache: &LayerNormCache<T>,
    d_gain: &mut Array1<T>,
    d_bias: &mut Array1<T>,
) -> Array2<T> {
    let (n, width) = dy.dim();
    let w = T::lit(width as f64);
    let mut dx = Array2::zeros((n, width));
    for r in 0..n {
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for c in 0..width {
            let g = dy[[r, c]];
            let xh = cache.xhat[[r, c]];
            d_gain[c] += g * xh;
            d_bias[c] += g;
            let dxh = g * gain[c];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xh;
        }
        let inv = cache.inv_std[r];
        for c in 0..width {
            let dxh = dy[[r, c]] * gain[c];
            dx[[r, c]] = inv / w * (w * dxh - sum_dxhat - cache.xhat[[r, c]] * sum_dxhat_xhat);
        }
    }
    dx
}

/// In-place, numerically stable row softmax.
pub(crate) fn softmax_rows<T: Scalar>(s: &mut Array2<T>) {
    for mut row in s.outer_iter_mut() {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// `dS = A * (dA - rowsum(dA * A))`.
pub(crate) fn softmax_rows_backward<T: Scalar>(a: &Array2<T>, da: &Array2<T>) -> Array2<T> {
    let dot = (da * a).sum_axis(Axis(1));
    let mut ds = da.clone();
    for (r, mut row) in ds.outer_iter_mut().enumerate() {
        row.mapv_inplace(|v| v - dot[r]);
    }
    ds * a
}

pub(crate) fn gelu_map<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    x.mapv(gelu)
}

/// `dy * gelu'(x)`.
pub(crate) fn gelu_backward<T: Scalar>(x: &Array2<T>, dy: &Array2<T>) -> Array2<T> {
    let mut out = dy.clone();
    Zip::from(&mut out)
        .and(x)
        .for_each(|o, &v| *o *= gelu_grad(v));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn layer_norm_normalizes_rows() {
        let x = array![[1.0f64, 2.0, 3.0, 4.0], [-1.0, 0.0, 0.5, 9.0]];
        let (y, _) = layer_norm(&x, &Array1::ones(4), &Array1::zeros(4));
        for row in y.outer_iter() {
            assert!(row.sum().abs() < 1e-12);
            let var = row.iter().map(|v| v * v).sum::<f64>() / 4.0;
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let x = array![[0.3f64, -1.2, 2.0], [0.9, 0.1, -0.4]];
        let gain = array![1.3, -0.7, 0.5];
        let bias = array![0.1, 0.2, -0.3];
        let weights = array![[0.5, -1.0, 2.0], [1.5, 0.25, -0.75]];
        let loss = |x: &Array2<f64>| (&layer_norm(x, &gain, &bias).0 * &weights).sum();
        let (_, cache) = layer_norm(&x, &gain, &bias);
        let mut dg = Array1::zeros(3);
        let mut db = Array1::zeros(3);
        let dx = layer_norm_backward(&weights, &gain, &cache, &mut dg, &mut db);
        let h = 1e-6;
        for idx in [[0, 0], [0, 2], [1, 1]] {
            let mut p = x.clone();
            p[idx] += h;
            let mut m = x.clone();
            m[idx] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-8, "{idx:?}: {fd} vs {}", dx[idx]);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut s = array![[1.0f64, 2.0, 3.0], [1000.0, 1000.0, -1e9]];
        softmax_rows(&mut s);
        for row in s.outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-15);
        }
        assert!(s[[1, 2]] < 1e-300);
    }
}
