use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, Axis, Zip};
use rayon::prelude::*;

use super::mask::{build_mask, AttentionMask, MaskMode};
use super::{LayerParams, Model, Parameters};
use crate::dataset::PackedSequence;
use crate::error::{Error, Result};
use crate::numeric::{softmax_in_place, Float};
use crate::tokenizer::PAD;

const LN_EPS: f64 = 1e-12;

/// One sequence ready for the encoder. `ids`, `segments` and `mask` share
/// the same length; positions are implicit (`0..len`).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub ids: Vec<u32>,
    pub segments: Vec<u8>,
    pub mask: AttentionMask,
}

impl ModelInput {
    pub fn from_packed(seq: &PackedSequence, mode: MaskMode) -> Result<Self> {
        Self::padded(seq, mode, seq.len())
    }

    /// Appends `PAD` positions up to `total_len`; the mask blocks them.
    pub fn padded(seq: &PackedSequence, mode: MaskMode, total_len: usize) -> Result<Self> {
        let mask = build_mask(seq.prefix_len(), seq.target_len(), total_len, mode)?;
        let mut ids = seq.ids.clone();
        let mut segments = seq.segments.clone();
        ids.resize(total_len, PAD);
        segments.resize(total_len, 0);
        Ok(ModelInput {
            ids,
            segments,
            mask,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone)]
struct LnTrace<T> {
    xhat: Array2<T>,
    inv_std: Array1<T>,
}

/// Activations of one layer kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerTrace<T> {
    input: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    /// Per-head attention probabilities, `n x n` each.
    pub probs: Vec<Array2<T>>,
    context: Array2<T>,
    ln1: LnTrace<T>,
    y1: Array2<T>,
    ffn_pre: Array2<T>,
    ffn_act: Array2<T>,
    ln2: LnTrace<T>,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    ids: Vec<u32>,
    segments: Vec<u8>,
    /// `H^0` followed by every layer output.
    pub hidden_states: Vec<Array2<T>>,
    pub layers: Vec<LayerTrace<T>>,
}

#[derive(Debug, Clone)]
pub struct Forward<T> {
    /// Final hidden states, `n x d`.
    pub hidden: Array2<T>,
    pub trace: Option<ForwardTrace<T>>,
}

impl<T: Float> Forward<T> {
    pub fn cls(&self) -> ArrayView1<'_, T> {
        self.hidden.row(0)
    }

    /// Accumulates into `grads` the parameter gradients of a scalar loss
    /// whose gradient with respect to the final hidden states is `d_hidden`.
    pub fn backward(
        &self,
        model: &Model<T>,
        d_hidden: &Array2<T>,
        grads: &mut Parameters<T>,
    ) -> Result<()> {
        let trace = self.trace.as_ref().ok_or_else(|| {
            Error::Contract("backward needs a trace from a training-mode forward".into())
        })?;
        if d_hidden.dim() != self.hidden.dim() {
            return Err(Error::Contract(format!(
                "upstream gradient shape {:?} != hidden shape {:?}",
                d_hidden.dim(),
                self.hidden.dim()
            )));
        }
        let mut d = d_hidden.clone();
        for (l, layer) in trace.layers.iter().enumerate().rev() {
            d = layer_backward(&model.config, &model.params.layers[l], layer, &d, &mut grads.layers[l]);
        }
        for (i, row) in d.outer_iter().enumerate() {
            let id = trace.ids[i] as usize;
            let seg = trace.segments[i] as usize;
            grads.token_emb.row_mut(id).scaled_add(T::one(), &row);
            grads.position_emb.row_mut(i).scaled_add(T::one(), &row);
            grads.segment_emb.row_mut(seg).scaled_add(T::one(), &row);
        }
        Ok(())
    }
}

fn gelu<T: Float>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + T::from_f64(0.044715) * x * x * x)).tanh())
}

fn gelu_grad<T: Float>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::from_f64(3.0) * a * x * x)
}

fn layer_norm<T: Float>(x: &Array2<T>, gain: &Array1<T>, bias: &Array1<T>) -> (Array2<T>, LnTrace<T>) {
    let d = T::from_f64(x.ncols() as f64);
    let eps = T::from_f64(LN_EPS);
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in xhat.outer_iter_mut().zip(inv_std.iter_mut()) {
        let mean = row.iter().copied().sum::<T>() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<T>() / d;
        *s = T::one() / (var + eps).sqrt();
        let inv = *s;
        row.mapv_inplace(|v| v * inv);
    }
    let mut out = xhat.clone();
    for mut row in out.outer_iter_mut() {
        Zip::from(&mut row).and(gain).and(bias).for_each(|o, &g, &b| *o = *o * g + b);
    }
    (out, LnTrace { xhat, inv_std })
}

fn layer_norm_backward<T: Float>(
    dy: &Array2<T>,
    trace: &LnTrace<T>,
    gain: &Array1<T>,
    d_gain: &mut Array1<T>,
    d_bias: &mut Array1<T>,
) -> Array2<T> {
    let n = T::from_f64(dy.ncols() as f64);
    Zip::from(&mut *d_gain)
        .and(&(dy * &trace.xhat).sum_axis(Axis(0)))
        .for_each(|g, &v| *g += v);
    Zip::from(&mut *d_bias)
        .and(&dy.sum_axis(Axis(0)))
        .for_each(|b, &v| *b += v);
    let mut dx = dy * gain;
    for ((mut row, xhat), &inv) in dx
        .outer_iter_mut()
        .zip(trace.xhat.outer_iter())
        .zip(trace.inv_std.iter())
    {
        let sum = row.iter().copied().sum::<T>();
        let dot = row.iter().zip(xhat.iter()).map(|(&a, &b)| a * b).sum::<T>();
        Zip::from(&mut row)
            .and(&xhat)
            .for_each(|g, &xh| *g = inv / n * (n * *g - sum - xh * dot));
    }
    dx
}

fn add_bias<T: Float>(x: &mut Array2<T>, bias: &Array1<T>) {
    for mut row in x.outer_iter_mut() {
        row += bias;
    }
}

/// `acc += a^T b`
fn acc_at_b<T: Float>(acc: &mut Array2<T>, a: &Array2<T>, b: &Array2<T>) {
    general_mat_mul(T::one(), &a.t(), b, T::one(), acc);
}

fn layer_forward<T: Float>(
    cfg: &super::ModelConfig,
    p: &LayerParams<T>,
    x: &Array2<T>,
    mask: &AttentionMask,
) -> (Array2<T>, LayerTrace<T>) {
    let n = x.nrows();
    let dk = cfg.head_dim();
    let scale = T::one() / T::from_f64(dk as f64).sqrt();
    let q = x.dot(&p.query);
    let k = x.dot(&p.key);
    let v = x.dot(&p.value);
    let mut context = Array2::zeros((n, cfg.hidden));
    let mut probs = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let cols = s![.., h * dk..(h + 1) * dk];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t());
        for (i, mut row) in scores.outer_iter_mut().enumerate() {
            for (j, x) in row.iter_mut().enumerate() {
                *x = *x * scale + mask.bias::<T>(i, j);
            }
            softmax_in_place(row.as_slice_mut().expect("contiguous row"));
        }
        context.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    let mut r1 = context.dot(&p.attn_out);
    r1 += x;
    let (y1, ln1) = layer_norm(&r1, &p.ln1_gain, &p.ln1_bias);
    let mut ffn_pre = y1.dot(&p.ffn_in);
    add_bias(&mut ffn_pre, &p.ffn_in_bias);
    let ffn_act = ffn_pre.mapv(gelu);
    let mut r2 = ffn_act.dot(&p.ffn_out);
    add_bias(&mut r2, &p.ffn_out_bias);
    r2 += &y1;
    let (out, ln2) = layer_norm(&r2, &p.ln2_gain, &p.ln2_bias);
    let trace = LayerTrace {
        input: x.clone(),
        q,
        k,
        v,
        probs,
        context,
        ln1,
        y1,
        ffn_pre,
        ffn_act,
        ln2,
    };
    (out, trace)
}

fn layer_backward<T: Float>(
    cfg: &super::ModelConfig,
    p: &LayerParams<T>,
    t: &LayerTrace<T>,
    d_out: &Array2<T>,
    g: &mut LayerParams<T>,
) -> Array2<T> {
    let dk = cfg.head_dim();
    let scale = T::one() / T::from_f64(dk as f64).sqrt();

    let d_r2 = layer_norm_backward(d_out, &t.ln2, &p.ln2_gain, &mut g.ln2_gain, &mut g.ln2_bias);
    acc_at_b(&mut g.ffn_out, &t.ffn_act, &d_r2);
    g.ffn_out_bias += &d_r2.sum_axis(Axis(0));
    let mut d_pre = d_r2.dot(&p.ffn_out.t());
    Zip::from(&mut d_pre)
        .and(&t.ffn_pre)
        .for_each(|d, &x| *d *= gelu_grad(x));
    acc_at_b(&mut g.ffn_in, &t.y1, &d_pre);
    g.ffn_in_bias += &d_pre.sum_axis(Axis(0));
    let mut d_y1 = d_r2;
    general_mat_mul(T::one(), &d_pre, &p.ffn_in.t(), T::one(), &mut d_y1);

    let d_r1 = layer_norm_backward(&d_y1, &t.ln1, &p.ln1_gain, &mut g.ln1_gain, &mut g.ln1_bias);
    acc_at_b(&mut g.attn_out, &t.context, &d_r1);
    let d_context = d_r1.dot(&p.attn_out.t());

    let mut d_q = Array2::zeros(t.q.dim());
    let mut d_k = Array2::zeros(t.k.dim());
    let mut d_v = Array2::zeros(t.v.dim());
    for (h, probs) in t.probs.iter().enumerate() {
        let cols = s![.., h * dk..(h + 1) * dk];
        let d_ctx = d_context.slice(cols);
        let mut d_scores = d_ctx.dot(&t.v.slice(cols).t());
        d_v.slice_mut(cols).assign(&probs.t().dot(&d_ctx));
        for (mut ds, pr) in d_scores.outer_iter_mut().zip(probs.outer_iter()) {
            let dot = ds.iter().zip(pr.iter()).map(|(&a, &b)| a * b).sum::<T>();
            Zip::from(&mut ds)
                .and(&pr)
                .for_each(|g, &p| *g = p * (*g - dot) * scale);
        }
        d_q.slice_mut(cols).assign(&d_scores.dot(&t.k.slice(cols)));
        d_k.slice_mut(cols).assign(&d_scores.t().dot(&t.q.slice(cols)));
    }
    acc_at_b(&mut g.query, &t.input, &d_q);
    acc_at_b(&mut g.key, &t.input, &d_k);
    acc_at_b(&mut g.value, &t.input, &d_v);

    let mut d_x = d_r1;
    general_mat_mul(T::one(), &d_q, &p.query.t(), T::one(), &mut d_x);
    general_mat_mul(T::one(), &d_k, &p.key.t(), T::one(), &mut d_x);
    general_mat_mul(T::one(), &d_v, &p.value.t(), T::one(), &mut d_x);
    d_x
}

impl<T: Float> Model<T> {
    fn check_input(&self, input: &ModelInput) -> Result<()> {
        let n = input.len();
        if n == 0 || input.segments.len() != n || input.mask.len() != n {
            return Err(Error::Contract(format!(
                "input lengths disagree (ids {}, segments {}, mask {})",
                n,
                input.segments.len(),
                input.mask.len()
            )));
        }
        if n > self.config.max_seq_len {
            return Err(Error::Contract(format!(
                "sequence length {n} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        if let Some(&id) = input.ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::Contract(format!(
                "token id {id} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        if input.segments.iter().any(|&s| s > 1) {
            return Err(Error::Contract("segment ids must be 0 or 1".into()));
        }
        Ok(())
    }

    /// `H^0`: token + position + segment embeddings.
    pub fn embed_input(&self, input: &ModelInput) -> Result<Array2<T>> {
        self.check_input(input)?;
        let p = &self.params;
        let mut h = Array2::zeros((input.len(), self.config.hidden));
        for (i, mut row) in h.outer_iter_mut().enumerate() {
            row.assign(&p.token_emb.row(input.ids[i] as usize));
            row += &p.position_emb.row(i);
            row += &p.segment_emb.row(input.segments[i] as usize);
        }
        Ok(h)
    }

    /// Runs the encoder. With `train` set, the returned value carries the
    /// trace needed by [`Forward::backward`].
    pub fn forward(&self, input: &ModelInput, train: bool) -> Result<Forward<T>> {
        let mut h = self.embed_input(input)?;
        let mut hidden_states = Vec::new();
        let mut layers = Vec::new();
        for (l, p) in self.params.layers.iter().enumerate() {
            let (out, trace) = layer_forward(&self.config, p, &h, &input.mask);
            if out.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("non-finite activation in layer {l}")));
            }
            if train {
                hidden_states.push(h);
                layers.push(trace);
            }
            h = out;
        }
        let trace = train.then(|| {
            hidden_states.push(h.clone());
            ForwardTrace {
                ids: input.ids.clone(),
                segments: input.segments.clone(),
                hidden_states,
                layers,
            }
        });
        Ok(Forward { hidden: h, trace })
    }

    pub fn forward_batch(&self, inputs: &[ModelInput], train: bool) -> Result<Vec<Forward<T>>> {
        inputs.par_iter().map(|x| self.forward(x, train)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny(layers: usize) -> ModelConfig {
        ModelConfig {
            layers,
            heads: 2,
            hidden: 8,
            intermediate: 16,
            max_seq_len: 16,
            vocab_size: 30,
        }
    }

    fn input(ids: &[u32], mode: MaskMode) -> ModelInput {
        let n = ids.len();
        ModelInput {
            ids: ids.to_vec(),
            segments: vec![0; n],
            mask: build_mask(n, 0, n, mode).unwrap(),
        }
    }

    #[test]
    fn zero_layers_is_embedding_sum() {
        let mut m = Model::<f64>::zeros(tiny(0));
        m.params.token_emb[[7, 1]] = 2.0;
        m.params.position_emb[[1, 1]] = 0.5;
        m.params.segment_emb[[0, 1]] = 0.25;
        let f = m.forward(&input(&[5, 7], MaskMode::Bidirectional), false).unwrap();
        assert_eq!(f.hidden[[1, 1]], 2.75);
        assert_eq!(f.hidden[[0, 1]], 0.25);
        assert!(f.trace.is_none());
    }

    #[test]
    fn self_only_row_copies_its_value() {
        let m = Model::<f32>::init(tiny(1), 3).unwrap().cast::<f64>();
        let mut inp = input(&[5, 6, 7], MaskMode::Bidirectional);
        inp.mask = AttentionMask::from_fn(3, |i, j| i != 2 || j == 2);
        let h0 = m.embed_input(&inp).unwrap();
        let (_, t) = layer_forward(&m.config, &m.params.layers[0], &h0, &inp.mask);
        let layer = &m.params.layers[0];
        let got = t.context.row(2).dot(&layer.attn_out);
        let expected = t.v.row(2).dot(&layer.attn_out);
        assert_eq!(got, expected);
    }

    #[test]
    fn rejects_bad_ids() {
        let m = Model::<f32>::init(tiny(1), 1).unwrap();
        let err = m.forward(&input(&[2, 99], MaskMode::Bidirectional), false).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        let too_long: Vec<u32> = vec![5; 17];
        assert!(m.forward(&input(&too_long, MaskMode::Bidirectional), false).is_err());
    }

    #[test]
    fn backward_requires_trace() {
        let m = Model::<f32>::init(tiny(1), 1).unwrap();
        let f = m.forward(&input(&[2, 5, 3], MaskMode::Bidirectional), false).unwrap();
        let mut g = Parameters::zeros(&m.config);
        let err = f.backward(&m, &Array2::zeros(f.hidden.dim()), &mut g).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let m = Model::<f32>::init(tiny(2), 1).unwrap().cast::<f64>();
        let f = m.forward(&input(&[2, 5, 6, 3], MaskMode::Bidirectional), true).unwrap();
        let mut g = Parameters::zeros(&m.config);
        f.backward(&m, &Array2::zeros(f.hidden.dim()), &mut g).unwrap();
        assert_eq!(g, Parameters::zeros(&m.config));
    }

    #[test]
    fn attention_rows_are_distributions() {
        let m = Model::<f32>::init(tiny(2), 9).unwrap();
        let seq = crate::dataset::pack_pair_ids(&[5, 6, 7], &[8, 9], 16).unwrap();
        let inp = ModelInput::padded(&seq, MaskMode::Alg, 12).unwrap();
        let f = m.forward(&inp, true).unwrap();
        for layer in &f.trace.unwrap().layers {
            for p in &layer.probs {
                for (i, row) in p.outer_iter().enumerate() {
                    assert!(row.iter().all(|&x| x >= 0.0));
                    assert!((row.sum() - 1.0).abs() < 1e-5);
                    if i < seq.len() {
                        for (j, &x) in row.iter().enumerate() {
                            if !inp.mask.allowed(i, j) {
                                assert_eq!(x, 0.0);
                            }
                        }
                    }
                }
            }
        }
    }
}
