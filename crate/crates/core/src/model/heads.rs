use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use super::Parameters;
use crate::numeric::Float;

/// `tanh(h_cls) · W_F`
pub fn function_embedding<T: Float>(h_cls: ArrayView1<'_, T>, params: &Parameters<T>) -> Array1<T> {
    h_cls.mapv(Float::tanh).dot(&params.embedding_head)
}

/// Accumulates the head gradient and returns the gradient for `h_cls`.
pub fn function_embedding_backward<T: Float>(
    h_cls: ArrayView1<'_, T>,
    d_embedding: ArrayView1<'_, T>,
    params: &Parameters<T>,
    grads: &mut Parameters<T>,
) -> Array1<T> {
    let t = h_cls.mapv(Float::tanh);
    for (i, mut row) in grads.embedding_head.outer_iter_mut().enumerate() {
        row.scaled_add(t[i], &d_embedding);
    }
    let mut d_h = params.embedding_head.dot(&d_embedding);
    Zip::from(&mut d_h).and(&t).for_each(|d, &t| *d *= T::one() - t * t);
    d_h
}

/// Vocabulary logits for each row of `hidden`, using the token embedding
/// table as the output projection plus a separate bias.
pub fn lm_logits<T: Float>(hidden: ArrayView2<'_, T>, params: &Parameters<T>) -> Array2<T> {
    let mut logits = hidden.dot(&params.token_emb.t());
    for mut row in logits.outer_iter_mut() {
        row += &params.lm_bias;
    }
    logits
}

/// Accumulates LM-head gradients and returns the gradient for `hidden`.
pub fn lm_logits_backward<T: Float>(
    hidden: ArrayView2<'_, T>,
    d_logits: ArrayView2<'_, T>,
    params: &Parameters<T>,
    grads: &mut Parameters<T>,
) -> Array2<T> {
    ndarray::linalg::general_mat_mul(T::one(), &d_logits.t(), &hidden, T::one(), &mut grads.token_emb);
    grads.lm_bias += &d_logits.sum_axis(Axis(0));
    d_logits.dot(&params.token_emb)
}
