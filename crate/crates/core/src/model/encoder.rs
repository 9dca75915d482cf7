use ndarray::{s, Array2};

use super::ops::{
    gelu_backward, gelu_map, layer_norm, layer_norm_backward, softmax_rows, softmax_rows_backward,
    LayerNormCache,
};
use super::{LayerParams, ModelConfig, ModelError, ModelParams};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub(crate) struct LayerCache<T> {
    x: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    attn: Vec<Array2<T>>,
    concat: Array2<T>,
    ln1: LayerNormCache<T>,
    mid: Array2<T>,
    ffn_pre: Array2<T>,
    ffn_act: Array2<T>,
    ln2: LayerNormCache<T>,
}

/// Intermediates of one encoder pass, kept for the backward sweep.
#[derive(Debug, Clone)]
pub struct EncoderCache<T> {
    pub(crate) layers: Vec<LayerCache<T>>,
}

impl<T: Scalar> EncoderCache<T> {
    /// Softmax probabilities of `head` in `layer`, `n x n`.
    pub fn attention(&self, layer: usize, head: usize) -> &Array2<T> {
        &self.layers[layer].attn[head]
    }
}

fn check_finite<T: Scalar>(a: &Array2<T>, what: &'static str) -> Result<(), ModelError> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ModelError::NonFinite(what))
    }
}

fn layer_forward<T: Scalar>(
    x: &Array2<T>,
    bias: &Array2<T>,
    p: &LayerParams<T>,
    config: &ModelConfig,
) -> (Array2<T>, LayerCache<T>) {
    let n = x.nrows();
    let dh = config.head_width();
    let scale = T::lit(1.0 / (config.hidden as f64).sqrt());
    let q = x.dot(&p.wq);
    let k = x.dot(&p.wk);
    let v = x.dot(&p.wv);
    let mut concat = Array2::zeros((n, config.hidden));
    let mut attn = Vec::with_capacity(config.heads);
    for h in 0..config.heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale + bias;
        softmax_rows(&mut scores);
        concat.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        attn.push(scores);
    }
    let resid1 = x + &concat.dot(&p.wo);
    let (mid, ln1) = layer_norm(&resid1, &p.ln1_gain, &p.ln1_bias);
    let ffn_pre = mid.dot(&p.ffn_in);
    let ffn_act = gelu_map(&ffn_pre);
    let resid2 = &mid + &ffn_act.dot(&p.ffn_out);
    let (out, ln2) = layer_norm(&resid2, &p.ln2_gain, &p.ln2_bias);
    let cache = LayerCache {
        x: x.clone(),
        q,
        k,
        v,
        attn,
        concat,
        ln1,
        mid,
        ffn_pre,
        ffn_act,
        ln2,
    };
    (out, cache)
}

/// Returns `dL/dx` and adds `dL/dbias` into `d_bias`.
fn layer_backward<T: Scalar>(
    d_out: &Array2<T>,
    c: &LayerCache<T>,
    p: &LayerParams<T>,
    g: &mut LayerParams<T>,
    d_bias: &mut Array2<T>,
    config: &ModelConfig,
) -> Array2<T> {
    let dh = config.head_width();
    let scale = T::lit(1.0 / (config.hidden as f64).sqrt());

    let d_resid2 =
        layer_norm_backward(d_out, &p.ln2_gain, &c.ln2, &mut g.ln2_gain, &mut g.ln2_bias);
    g.ffn_out += &c.ffn_act.t().dot(&d_resid2);
    let d_act = d_resid2.dot(&p.ffn_out.t());
    let d_pre = gelu_backward(&c.ffn_pre, &d_act);
    g.ffn_in += &c.mid.t().dot(&d_pre);
    let d_mid = d_resid2 + d_pre.dot(&p.ffn_in.t());

    let d_resid1 = layer_norm_backward(
        &d_mid,
        &p.ln1_gain,
        &c.ln1,
        &mut g.ln1_gain,
        &mut g.ln1_bias,
    );
    g.wo += &c.concat.t().dot(&d_resid1);
    let d_concat = d_resid1.dot(&p.wo.t());

    let n = c.x.nrows();
    let mut dq = Array2::zeros((n, config.hidden));
    let mut dk = Array2::zeros((n, config.hidden));
    let mut dv = Array2::zeros((n, config.hidden));
    for h in 0..config.heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let a = &c.attn[h];
        let d_head = d_concat.slice(cols);
        let da = d_head.dot(&c.v.slice(cols).t());
        dv.slice_mut(cols).assign(&a.t().dot(&d_head));
        let ds = softmax_rows_backward(a, &da);
        *d_bias += &ds;
        dq.slice_mut(cols)
            .assign(&(ds.dot(&c.k.slice(cols)) * scale));
        dk.slice_mut(cols)
            .assign(&(ds.t().dot(&c.q.slice(cols)) * scale));
    }
    g.wq += &c.x.t().dot(&dq);
    g.wk += &c.x.t().dot(&dk);
    g.wv += &c.x.t().dot(&dv);
    d_resid1 + dq.dot(&p.wq.t()) + dk.dot(&p.wk.t()) + dv.dot(&p.wv.t())
}

/// Runs every block on `x` with the same additive bias in every head.
pub fn encoder_forward_cached<T: Scalar>(
    x: &Array2<T>,
    bias: &Array2<T>,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<(Array2<T>, EncoderCache<T>), ModelError> {
    let n = x.nrows();
    if x.ncols() != config.hidden || bias.dim() != (n, n) {
        return Err(ModelError::Config(format!(
            "encoder input {:?} with bias {:?} does not match hidden width {}",
            x.dim(),
            bias.dim(),
            config.hidden
        )));
    }
    check_finite(x, "encoder input")?;
    check_finite(bias, "attention bias")?;
    let mut h = x.clone();
    let mut layers = Vec::with_capacity(params.layers.len());
    for p in &params.layers {
        let (out, cache) = layer_forward(&h, bias, p, config);
        layers.push(cache);
        h = out;
    }
    Ok((h, EncoderCache { layers }))
}

pub fn encoder_forward<T: Scalar>(
    x: &Array2<T>,
    bias: &Array2<T>,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<Array2<T>, ModelError> {
    encoder_forward_cached(x, bias, params, config).map(|(out, _)| out)
}

/// Backward through the whole stack. Returns `(dL/dx, dL/dbias)`.
pub(crate) fn encoder_backward<T: Scalar>(
    d_out: Array2<T>,
    cache: &EncoderCache<T>,
    params: &ModelParams<T>,
    grads: &mut ModelParams<T>,
    config: &ModelConfig,
) -> (Array2<T>, Array2<T>) {
    let n = d_out.nrows();
    let mut d_bias = Array2::zeros((n, n));
    let mut d = d_out;
    for l in (0..params.layers.len()).rev() {
        d = layer_backward(
            &d,
            &cache.layers[l],
            &params.layers[l],
            &mut grads.layers[l],
            &mut d_bias,
            config,
        );
    }
    (d, d_bias)
}
