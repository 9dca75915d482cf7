use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};

use super::ops::{gelu_backward, gelu_map, layer_norm, layer_norm_backward, LayerNormCache};
use super::{HeadParams, ModelParams};
use crate::scalar::Scalar;

/// Relation targeted by the pair head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairTarget {
    Spd,
    Edge,
    Dist,
}

impl PairTarget {
    pub(crate) fn weights<T>(self, head: &HeadParams<T>) -> &Array2<T> {
        match self {
            PairTarget::Spd => &head.spd,
            PairTarget::Edge => &head.edge,
            PairTarget::Dist => &head.dist,
        }
    }

    pub(crate) fn weights_mut<T>(self, head: &mut HeadParams<T>) -> &mut Array2<T> {
        match self {
            PairTarget::Spd => &mut head.spd,
            PairTarget::Edge => &mut head.edge,
            PairTarget::Dist => &mut head.dist,
        }
    }
}

/// `G(W x) = LayerNorm(GELU(W x))` for one side of the outer product.
#[derive(Debug, Clone)]
pub(crate) struct SideCache<T> {
    pre: Array2<T>,
    ln: LayerNormCache<T>,
    pub out: Array2<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct PairFeatures<T> {
    pub left: SideCache<T>,
    pub right: SideCache<T>,
}

fn side_forward<T: Scalar>(x: &Array2<T>, w: &Array2<T>, head: &HeadParams<T>) -> SideCache<T> {
    let pre = x.dot(&w.t());
    let act = gelu_map(&pre);
    let (out, ln) = layer_norm(&act, &head.ln_gain, &head.ln_bias);
    SideCache { pre, ln, out }
}

pub(crate) fn pair_features<T: Scalar>(x: &Array2<T>, head: &HeadParams<T>) -> PairFeatures<T> {
    PairFeatures {
        left: side_forward(x, &head.left, head),
        right: side_forward(x, &head.right, head),
    }
}

fn class_matrix<T: Scalar>(w: &Array2<T>, class: usize, m: usize) -> ArrayView2<'_, T> {
    w.row(class)
        .into_shape_with_order((m, m))
        .expect("head row has m*m entries")
}

/// `Z[i, j, c] = G_l(x_i)^T W_c G_r(x_j)`, i.e. `W_head . Flatten(G_l(x_i) (x) G_r(x_j))`.
pub(crate) fn pair_logits<T: Scalar>(features: &PairFeatures<T>, w: &Array2<T>) -> Array3<T> {
    let hl = &features.left.out;
    let hr = &features.right.out;
    let (n, m) = hl.dim();
    let classes = w.nrows();
    let mut z = Array3::zeros((n, n, classes));
    for c in 0..classes {
        let zc = hl.dot(&class_matrix(w, c, m)).dot(&hr.t());
        z.index_axis_mut(Axis(2), c).assign(&zc);
    }
    z
}

/// Accumulates `dW_head` and the gradients of both sides' outputs.
pub(crate) fn pair_logits_backward<T: Scalar>(
    features: &PairFeatures<T>,
    w: &Array2<T>,
    dz: &Array3<T>,
    dw: &mut Array2<T>,
    d_left: &mut Array2<T>,
    d_right: &mut Array2<T>,
) {
    let hl = &features.left.out;
    let hr = &features.right.out;
    let m = hl.ncols();
    for c in 0..w.nrows() {
        let dzc = dz.index_axis(Axis(2), c);
        let wc = class_matrix(w, c, m);
        let dz_hr = dzc.dot(hr);
        let dwc = hl.t().dot(&dz_hr);
        let flat = dwc.into_shape_with_order(m * m).expect("m*m");
        let mut row = dw.row_mut(c);
        row += &flat;
        *d_left += &dz_hr.dot(&wc.t());
        *d_right += &dzc.t().dot(hl).dot(&wc);
    }
}

/// Backward through both `G(W x)` sides; returns `dL/dx`.
pub(crate) fn pair_features_backward<T: Scalar>(
    x: &Array2<T>,
    features: &PairFeatures<T>,
    head: &HeadParams<T>,
    d_left: &Array2<T>,
    d_right: &Array2<T>,
    grads: &mut HeadParams<T>,
) -> Array2<T> {
    let mut dx = Array2::zeros(x.dim());
    for (side, d_out, is_left) in [
        (&features.left, d_left, true),
        (&features.right, d_right, false),
    ] {
        let d_act = layer_norm_backward(
            d_out,
            &head.ln_gain,
            &side.ln,
            &mut grads.ln_gain,
            &mut grads.ln_bias,
        );
        let d_pre = gelu_backward(&side.pre, &d_act);
        let (w, dw) = if is_left {
            (&head.left, &mut grads.left)
        } else {
            (&head.right, &mut grads.right)
        };
        *dw += &d_pre.t().dot(x);
        dx += &d_pre.dot(w);
    }
    dx
}

/// Pair predictions `n x n x c` for one target.
pub fn outer_product_head<T: Scalar>(
    x: &Array2<T>,
    target: PairTarget,
    params: &ModelParams<T>,
) -> Array3<T> {
    let features = pair_features(x, &params.head);
    pair_logits(&features, target.weights(&params.head))
}

/// Per-atom 3-vector prediction of the injected coordinate noise.
pub fn noise_head<T: Scalar>(x: &Array2<T>, params: &ModelParams<T>) -> Array2<T> {
    x.dot(&params.noise)
}

/// Mean over atom rows.
pub fn readout<T: Scalar>(x: &Array2<T>) -> Array1<T> {
    let n = T::lit(x.nrows() as f64);
    x.sum_axis(Axis(0)) / n
}
