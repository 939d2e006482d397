//! Seeded toy transformer encoder with a nearest-class-mean task head.
//!
//! Each layer computes `h = LN(x + attn(x))` followed by
//! `LN(h + FFN(h))`, where LN is a per-row standardization without learned
//! affine parameters. The input to a layer's attention (`x`) is the hidden
//! state used as the memoization key.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::tensor::{attention_full, feed_forward, layer_norm_rows, Apm, LayerWeights, Matrix};

const MAGIC: &[u8; 4] = b"MMDL";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: u32,
    pub max_len: usize,
    pub hidden: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub ffn_dim: usize,
    pub num_classes: usize,
    /// Scales Q/K initialization; larger means sharper attention.
    pub attn_gain: f32,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 1000,
            max_len: 128,
            hidden: 64,
            num_heads: 4,
            num_layers: 2,
            ffn_dim: 64,
            num_classes: 8,
            attn_gain: 1.5,
            seed: 7,
        }
    }
}

/// Linear head: `logits = W z + b` over the mean-pooled final hidden state.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    weights: Matrix,
    bias: Vec<f32>,
}

impl Classifier {
    pub fn logits(&self, pooled: &[f32]) -> Vec<f32> {
        (0..self.weights.rows())
            .map(|c| crate::tensor::dot(self.weights.row(c), pooled) + self.bias[c])
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyTransformer {
    config: ModelConfig,
    token_emb: Matrix,
    pos_emb: Matrix,
    layers: Vec<LayerWeights>,
    head: Classifier,
}

/// Per-layer record of one forward pass: the layer input and its APMs.
pub struct LayerTrace {
    pub hidden: Matrix,
    pub apms: Vec<Apm>,
}

pub fn argmax(v: &[f32]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

impl ToyTransformer {
    pub fn new(config: ModelConfig) -> Result<Self> {
        if config.hidden == 0 || config.num_layers == 0 || config.max_len == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let h = config.hidden;
        let token_emb = Matrix::random_normal(config.vocab_size as usize, h, 1.0, &mut rng);
        let pos_emb = Matrix::random_normal(config.max_len, h, 1.0, &mut rng);
        let layers = (0..config.num_layers)
            .map(|_| LayerWeights::random(h, config.ffn_dim, config.num_heads, config.attn_gain, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let head = Classifier {
            weights: Matrix::zeros(config.num_classes, h),
            bias: vec![0.0; config.num_classes],
        };
        Ok(Self {
            config,
            token_emb,
            pos_emb,
            layers,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, i: usize) -> &LayerWeights {
        &self.layers[i]
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    pub fn head(&self) -> &Classifier {
        &self.head
    }

    /// `LN(token + position)` for each token.
    pub fn embed_tokens(&self, seq: &TokenSequence) -> Result<Matrix> {
        let l = seq.tokens.len();
        if l == 0 || l > self.config.max_len {
            return Err(Error::shape(format!(
                "sequence length {l} outside 1..={}",
                self.config.max_len
            )));
        }
        let h = self.config.hidden;
        let mut x = Matrix::zeros(l, h);
        for (i, &t) in seq.tokens.iter().enumerate() {
            if t >= self.config.vocab_size {
                return Err(Error::invalid(format!(
                    "token {t} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
            let row = x.row_mut(i);
            for ((o, a), b) in row.iter_mut().zip(self.token_emb.row(t as usize)).zip(self.pos_emb.row(i)) {
                *o = a + b;
            }
        }
        Ok(layer_norm_rows(&x))
    }

    /// Everything in a layer after attention: residual, normalization and FFN.
    pub fn post_attention(&self, layer: usize, x: &Matrix, attn: &Matrix) -> Result<Matrix> {
        let h = layer_norm_rows(&x.add(attn)?);
        Ok(layer_norm_rows(&feed_forward(&h, &self.layers[layer])?))
    }

    pub fn logits(&self, final_hidden: &Matrix) -> Vec<f32> {
        self.head.logits(&final_hidden.mean_rows())
    }

    /// Plain forward pass returning logits.
    pub fn forward(&self, seq: &TokenSequence) -> Result<Vec<f32>> {
        let mut x = self.embed_tokens(seq)?;
        for i in 0..self.layers.len() {
            let (attn, _) = attention_full(&x, &self.layers[i])?;
            x = self.post_attention(i, &x, &attn)?;
        }
        Ok(self.logits(&x))
    }

    /// Forward pass that also returns every layer's input and APMs.
    pub fn forward_traced(&self, seq: &TokenSequence) -> Result<(Vec<f32>, Vec<LayerTrace>)> {
        let mut x = self.embed_tokens(seq)?;
        let mut trace = Vec::with_capacity(self.layers.len());
        for i in 0..self.layers.len() {
            let (attn, apms) = attention_full(&x, &self.layers[i])?;
            let next = self.post_attention(i, &x, &attn)?;
            trace.push(LayerTrace { hidden: x, apms });
            x = next;
        }
        Ok((self.logits(&x), trace))
    }

    /// Mean-pooled final hidden state without the head.
    pub fn features(&self, seq: &TokenSequence) -> Result<Vec<f32>> {
        let mut x = self.embed_tokens(seq)?;
        for i in 0..self.layers.len() {
            let (attn, _) = attention_full(&x, &self.layers[i])?;
            x = self.post_attention(i, &x, &attn)?;
        }
        Ok(x.mean_rows())
    }

    /// Fits the head as a nearest-class-mean classifier on `corpus`:
    /// `w_c = 2 μ_c`, `b_c = -‖μ_c‖²`. Classes absent from the corpus get a
    /// zero weight and a bias below every fitted class.
    pub fn fit_head(&mut self, corpus: &[TokenSequence]) -> Result<()> {
        let (c, h) = (self.config.num_classes, self.config.hidden);
        let mut sums = vec![vec![0.0f64; h]; c];
        let mut counts = vec![0usize; c];
        for seq in corpus {
            if seq.label >= c {
                return Err(Error::invalid(format!("label {} >= {c} classes", seq.label)));
            }
            let z = self.features(seq)?;
            for (s, v) in sums[seq.label].iter_mut().zip(&z) {
                *s += f64::from(*v);
            }
            counts[seq.label] += 1;
        }
        let mut weights = Matrix::zeros(c, h);
        let mut bias = vec![0.0f32; c];
        for k in 0..c {
            if counts[k] == 0 {
                continue;
            }
            let mu: Vec<f64> = sums[k].iter().map(|s| s / counts[k] as f64).collect();
            for (w, m) in weights.row_mut(k).iter_mut().zip(&mu) {
                *w = (2.0 * m) as f32;
            }
            bias[k] = -mu.iter().map(|m| m * m).sum::<f64>() as f32;
        }
        let floor = (0..c)
            .filter(|&k| counts[k] > 0)
            .map(|k| bias[k])
            .fold(0.0f32, f32::min)
            - 1.0;
        for k in 0..c {
            if counts[k] == 0 {
                bias[k] = floor;
            }
        }
        self.head = Classifier { weights, bias };
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let c = &self.config;
        let mut w = Writer::new(MAGIC, VERSION);
        w.u32(c.vocab_size);
        for v in [c.max_len, c.hidden, c.num_heads, c.num_layers, c.ffn_dim, c.num_classes] {
            w.u32(v as u32);
        }
        w.f32(c.attn_gain);
        w.u64(c.seed);
        w.matrix(&self.token_emb);
        w.matrix(&self.pos_emb);
        for l in &self.layers {
            for m in [&l.w_q, &l.w_k, &l.w_v, &l.w_out, &l.ffn_w1] {
                w.matrix(m);
            }
            w.vec_f32(&l.ffn_b1);
            w.matrix(&l.ffn_w2);
            w.vec_f32(&l.ffn_b2);
        }
        w.matrix(&self.head.weights);
        w.vec_f32(&self.head.bias);
        fs::write(path, w.into_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let mut r = Reader::open(&bytes, path, MAGIC, VERSION)?;
        let vocab_size = r.u32()?;
        let mut dims = [0usize; 6];
        for d in dims.iter_mut() {
            *d = r.u32()? as usize;
        }
        let [max_len, hidden, num_heads, num_layers, ffn_dim, num_classes] = dims;
        let config = ModelConfig {
            vocab_size,
            max_len,
            hidden,
            num_heads,
            num_layers,
            ffn_dim,
            num_classes,
            attn_gain: r.f32()?,
            seed: r.u64()?,
        };
        let token_emb = r.matrix()?;
        let pos_emb = r.matrix()?;
        let mut layers = Vec::with_capacity(num_layers);
        for _ in 0..num_layers {
            let (w_q, w_k, w_v, w_out, ffn_w1) = (r.matrix()?, r.matrix()?, r.matrix()?, r.matrix()?, r.matrix()?);
            let ffn_b1 = r.vec_f32()?;
            let ffn_w2 = r.matrix()?;
            let ffn_b2 = r.vec_f32()?;
            layers.push(LayerWeights::new(w_q, w_k, w_v, w_out, ffn_w1, ffn_b1, ffn_w2, ffn_b2, num_heads)?);
        }
        let head = Classifier {
            weights: r.matrix()?,
            bias: r.vec_f32()?,
        };
        r.finish()?;
        Ok(Self {
            config,
            token_emb,
            pos_emb,
            layers,
            head,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate, CorpusSpec, LabelRule};

    fn small() -> ModelConfig {
        ModelConfig {
            vocab_size: 50,
            max_len: 12,
            hidden: 16,
            num_heads: 2,
            num_layers: 2,
            ffn_dim: 16,
            num_classes: 3,
            attn_gain: 1.5,
            seed: 3,
        }
    }

    fn corpus() -> Vec<TokenSequence> {
        generate(&CorpusSpec {
            vocab_size: 50,
            seq_len: 12,
            num_sequences: 30,
            num_templates: 3,
            mutation_rate: 0.1,
            seed: 5,
            label_rule: LabelRule::TemplateId,
        })
        .unwrap()
    }

    #[test]
    fn seeded_construction_is_deterministic() {
        assert_eq!(ToyTransformer::new(small()).unwrap(), ToyTransformer::new(small()).unwrap());
    }

    #[test]
    fn trace_matches_forward() {
        let m = ToyTransformer::new(small()).unwrap();
        let seq = &corpus()[0];
        let (logits, trace) = m.forward_traced(seq).unwrap();
        assert_eq!(logits, m.forward(seq).unwrap());
        assert_eq!(trace.len(), 2);
        for t in &trace {
            assert_eq!(t.hidden.shape(), (12, 16));
            assert_eq!(t.apms.len(), 2);
        }
    }

    #[test]
    fn head_fits_template_labels() {
        let mut m = ToyTransformer::new(small()).unwrap();
        let c = corpus();
        m.fit_head(&c).unwrap();
        let correct = c
            .iter()
            .filter(|s| argmax(&m.forward(s).unwrap()) == s.label)
            .count();
        assert!(correct as f64 / c.len() as f64 > 0.9);
    }

    #[test]
    fn rejects_out_of_vocab() {
        let m = ToyTransformer::new(small()).unwrap();
        let seq = TokenSequence {
            tokens: vec![60; 4],
            label: 0,
        };
        assert!(m.forward(&seq).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = ToyTransformer::new(small()).unwrap();
        m.fit_head(&corpus()).unwrap();
        let p = dir.path().join("m.mmdl");
        m.save(&p).unwrap();
        assert_eq!(ToyTransformer::load(&p).unwrap(), m);
    }
}
