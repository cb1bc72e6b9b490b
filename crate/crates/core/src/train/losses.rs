//! Loss functions and their gradients.
//!
//! * generation (ALG): next-token cross-entropy over the second function of
//!   a pair, under the prefix-bidirectional / target-causal mask;
//! * similar-function prediction (SFP): in-batch softmax over cosine
//!   similarities, where sample `k`'s positive is sample `k ^ 1`;
//! * masked-token prediction (MLM): cross-entropy on randomly masked
//!   positions under a bidirectional mask.
//!
//! Every loss is a mean over its own terms.

use ndarray::{Array1, Array2, Axis};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::PackedSequence;
use crate::error::{Error, Result};
use crate::model::{
    function_embedding, function_embedding_backward, lm_logits, lm_logits_backward, Forward,
    MaskMode, Model, ModelInput, Parameters,
};
use crate::numeric::{log_sum_exp, softmax_in_place, Float};
use crate::tokenizer::{CLS, MASK, PAD, SEP};

const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport<T> {
    pub alg: Option<T>,
    pub sfp: Option<T>,
    pub mlm: Option<T>,
}

impl<T: Float> LossReport<T> {
    pub fn total(&self) -> T {
        [self.alg, self.sfp, self.mlm].into_iter().flatten().sum()
    }
}

/// Cross-entropy of each logit row against its target; returns the summed
/// loss and `(softmax - onehot) * scale` as the logit gradient.
fn cross_entropy<T: Float>(logits: &Array2<T>, targets: &[u32], scale: T) -> (T, Array2<T>) {
    let mut loss = T::zero();
    let mut grad = logits.clone();
    for ((row, mut g), &t) in logits.outer_iter().zip(grad.outer_iter_mut()).zip(targets) {
        let row = row.as_slice().expect("contiguous logits");
        loss += log_sum_exp(row) - row[t as usize];
        let g = g.as_slice_mut().expect("contiguous gradient");
        softmax_in_place(g);
        g[t as usize] -= T::one();
        g.iter_mut().for_each(|x| *x *= scale);
    }
    (loss, grad)
}

/// Loss and embedding gradient of the in-batch similarity objective for a
/// `b x d` matrix of raw (unnormalized) function embeddings.
pub fn sfp_loss_from_embeddings<T: Float>(emb: &Array2<T>) -> Result<(T, Array2<T>)> {
    let b = emb.nrows();
    if b < 2 || b % 2 != 0 {
        return Err(Error::Contract(format!(
            "similarity batch must be even and >= 2, got {b}"
        )));
    }
    let eps = T::from_f64(NORM_EPS);
    let norms: Array1<T> = emb
        .outer_iter()
        .map(|r| (r.iter().map(|&x| x * x).sum::<T>() + eps).sqrt())
        .collect();
    let unit = emb / &norms.view().insert_axis(Axis(1));
    let mut sim = unit.dot(&unit.t());
    for k in 0..b {
        sim[[k, k]] = T::NEG_SENTINEL;
    }
    let inv_b = T::one() / T::from_f64(b as f64);
    let targets: Vec<u32> = (0..b as u32).map(|k| k ^ 1).collect();
    let (loss, mut d_sim) = cross_entropy(&sim, &targets, inv_b);
    for k in 0..b {
        d_sim[[k, k]] = T::zero();
    }
    let d_unit = (&d_sim + &d_sim.t()).dot(&unit);
    let mut d_emb = d_unit.clone();
    for k in 0..b {
        let u = unit.row(k);
        let proj = u.dot(&d_unit.row(k));
        let mut row = d_emb.row_mut(k);
        row.scaled_add(T::zero() - proj, &u);
        row.mapv_inplace(|x| x / norms[k]);
    }
    let loss = loss * inv_b;
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite similarity loss".into()));
    }
    Ok((loss, d_emb))
}

fn require_pairs(batch: &[PackedSequence]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    if let Some(i) = batch.iter().position(|s| !s.is_pair()) {
        return Err(Error::Contract(format!(
            "sample {i} is a single-function sequence; pair sequences required"
        )));
    }
    Ok(())
}

fn sum_grads<T: Float>(model: &Model<T>, parts: Vec<Parameters<T>>) -> Parameters<T> {
    let mut total = Parameters::zeros(&model.config);
    for p in &parts {
        total.add_assign(p);
    }
    total
}

/// Generation and similarity losses from one forward pass per sample under
/// the generation mask. The CLS state only sees the first function, so the
/// similarity embedding of a pair sample equals the single-function
/// embedding of its first function.
pub fn loss_alg_sfp<T: Float>(
    model: &Model<T>,
    batch: &[PackedSequence],
    alg: bool,
    sfp: bool,
) -> Result<(LossReport<T>, Parameters<T>)> {
    require_pairs(batch)?;
    let inputs = batch
        .iter()
        .map(|s| ModelInput::from_packed(s, MaskMode::Alg))
        .collect::<Result<Vec<_>>>()?;
    let forwards = model.forward_batch(&inputs, true)?;

    let mut report = LossReport::default();
    let mut d_emb: Option<Array2<T>> = None;
    if sfp {
        let mut emb = Array2::zeros((batch.len(), model.config.hidden));
        for (mut row, f) in emb.outer_iter_mut().zip(&forwards) {
            row.assign(&function_embedding(f.cls(), &model.params));
        }
        let (loss, d) = sfp_loss_from_embeddings(&emb)?;
        report.sfp = Some(loss);
        d_emb = Some(d);
    }

    let n_targets: usize = batch.iter().map(|s| s.target_len()).sum();
    let scale = T::one() / T::from_f64(n_targets as f64);
    let per_sample: Vec<(T, Parameters<T>)> = forwards
        .par_iter()
        .zip(batch.par_iter())
        .enumerate()
        .map(|(k, (f, seq))| {
            let mut grads = Parameters::zeros(&model.config);
            let mut d_hidden = Array2::zeros(f.hidden.dim());
            let mut loss = T::zero();
            if alg {
                let p = seq.prefix_len();
                let n = seq.len();
                let rows = f.hidden.slice(ndarray::s![p - 1..n - 1, ..]);
                let logits = lm_logits(rows, &model.params);
                let (l, d_logits) = cross_entropy(&logits, &seq.ids[p..n], scale);
                loss = l;
                let d_rows = lm_logits_backward(rows, d_logits.view(), &model.params, &mut grads);
                d_hidden
                    .slice_mut(ndarray::s![p - 1..n - 1, ..])
                    .assign(&d_rows);
            }
            if let Some(d_emb) = &d_emb {
                let d_cls = function_embedding_backward(
                    f.cls(),
                    d_emb.row(k),
                    &model.params,
                    &mut grads,
                );
                let mut row0 = d_hidden.row_mut(0);
                row0 += &d_cls;
            }
            f.backward(model, &d_hidden, &mut grads)?;
            Ok((loss, grads))
        })
        .collect::<Result<Vec<_>>>()?;

    if alg {
        let sum: T = per_sample.iter().map(|(l, _)| *l).sum();
        report.alg = Some(sum * scale);
    }
    let grads = sum_grads(model, per_sample.into_iter().map(|(_, g)| g).collect());
    Ok((report, grads))
}

pub fn loss_alg<T: Float>(model: &Model<T>, batch: &[PackedSequence]) -> Result<(T, Parameters<T>)> {
    let (r, g) = loss_alg_sfp(model, batch, true, false)?;
    Ok((r.alg.expect("alg computed"), g))
}

pub fn loss_sfp<T: Float>(model: &Model<T>, batch: &[PackedSequence]) -> Result<(T, Parameters<T>)> {
    let (r, g) = loss_alg_sfp(model, batch, false, true)?;
    Ok((r.sfp.expect("sfp computed"), g))
}

/// `round(rate * maskable)` with halves rounded up.
pub fn mask_count(maskable: usize, rate: f64) -> usize {
    (rate * maskable as f64 + 0.5).floor() as usize
}

/// Positions to mask in one sequence: a uniform sample of
/// [`mask_count`] non-special positions, in ascending order.
pub fn select_mlm_positions(ids: &[u32], rate: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let maskable: Vec<usize> = ids
        .iter()
        .enumerate()
        .filter(|(_, &t)| !matches!(t, PAD | CLS | SEP | MASK))
        .map(|(i, _)| i)
        .collect();
    let count = mask_count(maskable.len(), rate).min(maskable.len());
    let mut picked: Vec<usize> = index::sample(rng, maskable.len(), count)
        .into_iter()
        .map(|i| maskable[i])
        .collect();
    picked.sort_unstable();
    picked
}

/// Masked-token loss. Returns `None` when no sequence had anything to mask.
pub fn loss_mlm<T: Float>(
    model: &Model<T>,
    batch: &[PackedSequence],
    mask_rate: f64,
    seed: u64,
) -> Result<(Option<T>, Parameters<T>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = Vec::new();
    for seq in batch {
        let positions = select_mlm_positions(&seq.ids, mask_rate, &mut rng);
        if positions.is_empty() {
            continue;
        }
        let mut input = ModelInput::from_packed(seq, MaskMode::Bidirectional)?;
        let targets: Vec<u32> = positions.iter().map(|&p| seq.ids[p]).collect();
        for &p in &positions {
            input.ids[p] = MASK;
        }
        work.push((input, positions, targets));
    }
    let total: usize = work.iter().map(|(_, p, _)| p.len()).sum();
    if total == 0 {
        return Ok((None, Parameters::zeros(&model.config)));
    }
    let scale = T::one() / T::from_f64(total as f64);
    let per_sample: Vec<(T, Parameters<T>)> = work
        .par_iter()
        .map(|(input, positions, targets)| {
            let f: Forward<T> = model.forward(input, true)?;
            let rows = f.hidden.select(Axis(0), positions);
            let logits = lm_logits(rows.view(), &model.params);
            let (loss, d_logits) = cross_entropy(&logits, targets, scale);
            let mut grads = Parameters::zeros(&model.config);
            let d_rows = lm_logits_backward(rows.view(), d_logits.view(), &model.params, &mut grads);
            let mut d_hidden = Array2::zeros(f.hidden.dim());
            for (r, &p) in positions.iter().enumerate() {
                d_hidden.row_mut(p).assign(&d_rows.row(r));
            }
            f.backward(model, &d_hidden, &mut grads)?;
            Ok((loss, grads))
        })
        .collect::<Result<Vec<_>>>()?;
    let loss: T = per_sample.iter().map(|(l, _)| *l).sum::<T>() * scale;
    let grads = sum_grads(model, per_sample.into_iter().map(|(_, g)| g).collect());
    Ok((Some(loss), grads))
}

/// Sum of every enabled objective and the matching gradient.
pub fn joint_loss<T: Float>(
    model: &Model<T>,
    batch: &[PackedSequence],
    tasks: super::TaskSet,
    mask_rate: f64,
    seed: u64,
) -> Result<(LossReport<T>, Parameters<T>)> {
    let mut report = LossReport::default();
    let mut grads = Parameters::zeros(&model.config);
    if tasks.alg || tasks.sfp {
        let (r, g) = loss_alg_sfp(model, batch, tasks.alg, tasks.sfp)?;
        report.alg = r.alg;
        report.sfp = r.sfp;
        grads = g;
    }
    if tasks.mlm {
        let (l, g) = loss_mlm(model, batch, mask_rate, seed)?;
        report.mlm = l;
        grads.add_assign(&g);
    }
    Ok((report, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::pack_pair_ids;
    use crate::model::ModelConfig;
    use ndarray::array;

    fn tiny() -> ModelConfig {
        ModelConfig {
            layers: 1,
            heads: 2,
            hidden: 8,
            intermediate: 16,
            max_seq_len: 16,
            vocab_size: 24,
        }
    }

    #[test]
    fn sfp_two_samples_is_zero() {
        let emb = array![[0.3, -1.0, 2.0], [5.0, 0.1, -0.4]];
        let (loss, grad) = sfp_loss_from_embeddings(&emb).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn sfp_orthogonal_pairs() {
        let emb = array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]];
        let (loss, _) = sfp_loss_from_embeddings(&emb).unwrap();
        let e = std::f64::consts::E;
        assert!((loss - (-(e / (e + 2.0)).ln())).abs() < 1e-9);
    }

    #[test]
    fn sfp_rejects_odd_batch() {
        assert!(sfp_loss_from_embeddings(&Array2::<f64>::ones((3, 2))).is_err());
    }

    #[test]
    fn sfp_zero_embedding_stays_finite() {
        let emb = array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let (loss, grad) = sfp_loss_from_embeddings(&emb).unwrap();
        assert!(loss.is_finite() && grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn alg_with_zero_logits_is_ln_vocab() {
        let model = Model::<f64>::zeros(tiny());
        for m in [1usize, 4] {
            let seq = pack_pair_ids(&[5, 6], &vec![7; m], 16).unwrap();
            let (loss, _) = loss_alg(&model, &[seq]).unwrap();
            assert!((loss - 24f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn alg_rejects_single_sequences() {
        let model = Model::<f64>::zeros(tiny());
        let single = crate::dataset::pack_single_ids(&[5, 6], 16).unwrap();
        assert!(matches!(loss_alg(&model, &[single]), Err(Error::Contract(_))));
    }

    #[test]
    fn cross_entropy_half_probability() {
        let logits = array![[0.0, 0.0, f64::NEG_INFINITY]];
        let (loss, _) = cross_entropy(&logits, &[1], 1.0);
        assert!((loss - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn mask_rounding() {
        assert_eq!(mask_count(10, 0.15), 2);
        assert_eq!(mask_count(10, 0.14), 1);
        assert_eq!(mask_count(3, 0.15), 0);
        assert_eq!(mask_count(0, 0.15), 0);
    }

    #[test]
    fn mlm_selection_is_seeded_and_skips_specials() {
        let seq = pack_pair_ids(&[5, 6, 7, 8, 9], &[10, 11, 12, 13, 14], 32).unwrap();
        let pick = |s| select_mlm_positions(&seq.ids, 0.15, &mut ChaCha8Rng::seed_from_u64(s));
        assert_eq!(pick(3), pick(3));
        let p = pick(3);
        assert_eq!(p.len(), 2);
        assert!(p.iter().all(|&i| !matches!(seq.ids[i], CLS | SEP)));
    }

    #[test]
    fn mlm_with_zero_logits_is_ln_vocab() {
        let model = Model::<f64>::zeros(tiny());
        let seq = pack_pair_ids(&[5, 6, 7, 8, 9, 10], &[11, 12, 13, 14], 16).unwrap();
        let (loss, _) = loss_mlm(&model, &[seq], 0.15, 1).unwrap();
        assert!((loss.unwrap() - 24f64.ln()).abs() < 1e-12);
        let short = pack_pair_ids(&[5], &[6], 16).unwrap();
        assert!(loss_mlm(&model, &[short], 0.15, 1).unwrap().0.is_none());
    }

    #[test]
    fn joint_without_sfp_is_alg() {
        let model = Model::<f32>::init(tiny(), 2).unwrap().cast::<f64>();
        let batch = vec![
            pack_pair_ids(&[5, 6, 7], &[8, 9], 16).unwrap(),
            pack_pair_ids(&[8, 9], &[5, 6, 7], 16).unwrap(),
        ];
        let tasks = crate::train::TaskSet { alg: true, sfp: false, mlm: false };
        let (r, g) = joint_loss(&model, &batch, tasks, 0.15, 0).unwrap();
        let (l, g2) = loss_alg(&model, &batch).unwrap();
        assert_eq!(r.total(), l);
        assert_eq!(g, g2);
    }
}
