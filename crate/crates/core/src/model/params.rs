use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::numeric::Float;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub query: Array2<T>,
    pub key: Array2<T>,
    pub value: Array2<T>,
    pub attn_out: Array2<T>,
    pub ln1_gain: Array1<T>,
    pub ln1_bias: Array1<T>,
    pub ffn_in: Array2<T>,
    pub ffn_in_bias: Array1<T>,
    pub ffn_out: Array2<T>,
    pub ffn_out_bias: Array1<T>,
    pub ln2_gain: Array1<T>,
    pub ln2_bias: Array1<T>,
}

/// Every learnable tensor. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T> {
    /// `V x d`, also the (transposed) LM output projection.
    pub token_emb: Array2<T>,
    /// `max_seq_len x d`
    pub position_emb: Array2<T>,
    /// `2 x d`
    pub segment_emb: Array2<T>,
    pub layers: Vec<LayerParams<T>>,
    /// `d x d` projection applied after `tanh` to the CLS state.
    pub embedding_head: Array2<T>,
    pub lm_bias: Array1<T>,
}

const INIT_STD: f64 = 0.02;

// Expands `$m!(field)` once per layer tensor, in checkpoint order.
macro_rules! layer_fields {
    ($m:ident) => {
        $m!(query);
        $m!(key);
        $m!(value);
        $m!(attn_out);
        $m!(ln1_gain);
        $m!(ln1_bias);
        $m!(ffn_in);
        $m!(ffn_in_bias);
        $m!(ffn_out);
        $m!(ffn_out_bias);
        $m!(ln2_gain);
        $m!(ln2_bias);
    };
}

impl<T: Float> LayerParams<T> {
    fn zeros(d: usize, inter: usize) -> Self {
        LayerParams {
            query: Array2::zeros((d, d)),
            key: Array2::zeros((d, d)),
            value: Array2::zeros((d, d)),
            attn_out: Array2::zeros((d, d)),
            ln1_gain: Array1::zeros(d),
            ln1_bias: Array1::zeros(d),
            ffn_in: Array2::zeros((d, inter)),
            ffn_in_bias: Array1::zeros(inter),
            ffn_out: Array2::zeros((inter, d)),
            ffn_out_bias: Array1::zeros(d),
            ln2_gain: Array1::zeros(d),
            ln2_bias: Array1::zeros(d),
        }
    }
}

impl<T: Float> Parameters<T> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.hidden;
        Parameters {
            token_emb: Array2::zeros((config.vocab_size, d)),
            position_emb: Array2::zeros((config.max_seq_len, d)),
            segment_emb: Array2::zeros((2, d)),
            layers: (0..config.layers)
                .map(|_| LayerParams::zeros(d, config.intermediate))
                .collect(),
            embedding_head: Array2::zeros((d, d)),
            lm_bias: Array1::zeros(config.vocab_size),
        }
    }

    /// `(name, shape, data)` for every tensor, in checkpoint order.
    pub fn tensors(&self) -> Vec<(String, &[usize], &[T])> {
        let mut out = Vec::new();
        macro_rules! push {
            ($name:expr, $a:expr) => {
                out.push(($name, $a.shape(), $a.as_slice().expect("standard layout")))
            };
        }
        push!("token_emb".to_string(), self.token_emb);
        push!("position_emb".to_string(), self.position_emb);
        push!("segment_emb".to_string(), self.segment_emb);
        for (l, layer) in self.layers.iter().enumerate() {
            macro_rules! field {
                ($f:ident) => {
                    push!(format!("layers.{l}.{}", stringify!($f)), layer.$f)
                };
            }
            layer_fields!(field);
        }
        push!("embedding_head".to_string(), self.embedding_head);
        push!("lm_bias".to_string(), self.lm_bias);
        out
    }

    /// Mutable views of every tensor, in the same order as [`Self::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out = Vec::new();
        macro_rules! push {
            ($name:expr, $a:expr) => {
                out.push(($name, $a.as_slice_mut().expect("standard layout")))
            };
        }
        push!("token_emb".to_string(), self.token_emb);
        push!("position_emb".to_string(), self.position_emb);
        push!("segment_emb".to_string(), self.segment_emb);
        for (l, layer) in self.layers.iter_mut().enumerate() {
            macro_rules! field {
                ($f:ident) => {
                    push!(format!("layers.{l}.{}", stringify!($f)), layer.$f)
                };
            }
            layer_fields!(field);
        }
        push!("embedding_head".to_string(), self.embedding_head);
        push!("lm_bias".to_string(), self.lm_bias);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, _, d)| d.len()).sum()
    }

    pub fn add_assign(&mut self, other: &Parameters<T>) {
        for ((_, dst), (_, _, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, _, d)| d.iter().all(|x| x.is_finite()))
    }

    pub fn cast<U: Float>(&self) -> Parameters<U> {
        let c = |a: &Array2<T>| a.mapv(|x| U::from_f64(x.to_f64()));
        let c1 = |a: &Array1<T>| a.mapv(|x| U::from_f64(x.to_f64()));
        Parameters {
            token_emb: c(&self.token_emb),
            position_emb: c(&self.position_emb),
            segment_emb: c(&self.segment_emb),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    query: c(&l.query),
                    key: c(&l.key),
                    value: c(&l.value),
                    attn_out: c(&l.attn_out),
                    ln1_gain: c1(&l.ln1_gain),
                    ln1_bias: c1(&l.ln1_bias),
                    ffn_in: c(&l.ffn_in),
                    ffn_in_bias: c1(&l.ffn_in_bias),
                    ffn_out: c(&l.ffn_out),
                    ffn_out_bias: c1(&l.ffn_out_bias),
                    ln2_gain: c1(&l.ln2_gain),
                    ln2_bias: c1(&l.ln2_bias),
                })
                .collect(),
            embedding_head: c(&self.embedding_head),
            lm_bias: c1(&self.lm_bias),
        }
    }
}

impl Parameters<f32> {
    /// Matrices and embedding tables from a normal distribution truncated at
    /// two standard deviations; layer-norm gains one, all biases zero.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut p = Parameters::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        for (name, data) in p.tensors_mut() {
            let leaf = name.rsplit('.').next().unwrap_or(&name);
            if leaf.ends_with("_gain") {
                data.fill(1.0);
            } else if !leaf.ends_with("bias") {
                for x in data.iter_mut() {
                    *x = loop {
                        let v: f64 = normal.sample(&mut rng);
                        if v.abs() <= 2.0 * INIT_STD {
                            break v as f32;
                        }
                    };
                }
            }
        }
        p
    }
}
