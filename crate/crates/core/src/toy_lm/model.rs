use serde::{Deserialize, Serialize};

use super::Prefiller;
use crate::activation_io::ActivationTensor;
use crate::error::{Error, Result};
use crate::numerics::{matmul, softmax_in_place, Rng, Tensor};

/// Shape and seed of the toy model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyLmConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub vocab: usize,
    pub max_tokens: usize,
    /// Inner width of the position-wise FFN.
    pub ffn_hidden: usize,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ToyLmConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            hidden: 64,
            heads: 4,
            vocab: 64,
            max_tokens: 128,
            ffn_hidden: 128,
            init_std: 0.02,
            seed: 0,
        }
    }
}

impl ToyLmConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("vocab", self.vocab),
            ("max_tokens", self.max_tokens),
            ("ffn_hidden", self.ffn_hidden),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::config(format!("/toy_lm/{name}"), "must be >= 1"));
            }
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::config(
                "/toy_lm/heads",
                format!("hidden {} not divisible by heads {}", self.hidden, self.heads),
            ));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::config("/toy_lm/init_std", "must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

struct Block {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    w1: Tensor,
    b1: Vec<f64>,
    w2: Tensor,
    b2: Vec<f64>,
}

/// Random-weight causal transformer. Weights are fixed at construction.
pub struct ToyLm {
    config: ToyLmConfig,
    embedding: Tensor,
    blocks: Vec<Block>,
}

/// What a forward pass recorded.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Attention sub-layer output after the output projection, before the
    /// residual add; `L` tensors of `n x d`.
    pub mha: Vec<Tensor>,
    /// FFN sub-layer output before the residual add, when requested.
    pub ffn: Vec<Tensor>,
    /// Post-softmax attention for the requested `(layer, head)`.
    pub attention: Option<Tensor>,
}

fn gaussian(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| std * rng.normal()).collect(),
    )
    .expect("extents validated")
}

/// `n x d` to head-major `heads x n x (d / heads)`.
fn split_heads(t: &Tensor, heads: usize) -> Vec<f64> {
    let d = t.shape()[1];
    let dh = d / heads;
    let mut out = Vec::with_capacity(t.data().len());
    for h in 0..heads {
        for row in t.rows() {
            out.extend_from_slice(&row[h * dh..(h + 1) * dh]);
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

impl ToyLm {
    pub fn new(config: ToyLmConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed);
        let (d, f, std) = (config.hidden, config.ffn_hidden, config.init_std);
        let embedding = gaussian(&mut rng, config.vocab, d, std);
        let blocks = (0..config.layers)
            .map(|_| Block {
                wq: gaussian(&mut rng, d, d, std),
                wk: gaussian(&mut rng, d, d, std),
                wv: gaussian(&mut rng, d, d, std),
                wo: gaussian(&mut rng, d, d, std),
                w1: gaussian(&mut rng, d, f, std),
                b1: vec![0.0; f],
                w2: gaussian(&mut rng, f, d, std),
                b2: vec![0.0; d],
            })
            .collect();
        Ok(Self {
            config,
            embedding,
            blocks,
        })
    }

    pub fn config(&self) -> &ToyLmConfig {
        &self.config
    }

    /// Position-wise FFN of one block applied to every row of `x`.
    pub fn ffn(&self, layer: usize, x: &Tensor) -> Result<Tensor> {
        let b = self
            .blocks
            .get(layer)
            .ok_or_else(|| Error::IndexOutOfRange(format!("layer {layer}")))?;
        let mut hidden = matmul(x, &b.w1)?;
        let f = self.config.ffn_hidden;
        for row in hidden.data_mut().chunks_exact_mut(f) {
            for (h, bias) in row.iter_mut().zip(&b.b1) {
                *h = gelu(*h + bias);
            }
        }
        let mut out = matmul(&hidden, &b.w2)?;
        for row in out.data_mut().chunks_exact_mut(self.config.hidden) {
            for (o, bias) in row.iter_mut().zip(&b.b2) {
                *o += bias;
            }
        }
        Ok(out)
    }

    /// Token embeddings plus sinusoidal positions, `n x d`. The encodings are
    /// scaled by `init_std` so they sit at the same scale as the embeddings.
    pub fn embed(&self, tokens: &[u32]) -> Result<Tensor> {
        let d = self.config.hidden;
        let scale = self.config.init_std;
        let mut x = Vec::with_capacity(tokens.len() * d);
        for (pos, &t) in tokens.iter().enumerate() {
            if t as usize >= self.config.vocab {
                return Err(Error::Vocabulary {
                    token: t,
                    vocab: self.config.vocab,
                });
            }
            let e = self.embedding.row(t as usize);
            for (j, ev) in e.iter().enumerate() {
                let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
                let angle = pos as f64 * freq;
                let pe = if j % 2 == 0 { angle.sin() } else { angle.cos() };
                x.push(ev + scale * pe);
            }
        }
        Tensor::new(vec![tokens.len(), d], x)
    }

    fn check_len(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() || tokens.len() > self.config.max_tokens {
            return Err(Error::Input(format!(
                "sequence length {} outside [1, {}]",
                tokens.len(),
                self.config.max_tokens
            )));
        }
        Ok(())
    }

    /// Full forward pass recording sub-layer outputs.
    ///
    /// The final block's FFN only runs when `capture_ffn` is set, since no
    /// recorded MHA output depends on it.
    pub fn forward(
        &self,
        tokens: &[u32],
        capture_ffn: bool,
        attention_probe: Option<(usize, usize)>,
    ) -> Result<Trace> {
        self.check_len(tokens)?;
        let (n, d, heads) = (tokens.len(), self.config.hidden, self.config.heads);
        let dh = self.config.head_dim();
        if let Some((l, h)) = attention_probe {
            if l >= self.config.layers || h >= heads {
                return Err(Error::IndexOutOfRange(format!(
                    "layer {l} / head {h} for {} layers, {heads} heads",
                    self.config.layers
                )));
            }
        }
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x = self.embed(tokens)?;
        let mut trace = Trace {
            mha: Vec::with_capacity(self.config.layers),
            ffn: Vec::new(),
            attention: None,
        };
        let mut scores = vec![0.0; n];
        for (li, block) in self.blocks.iter().enumerate() {
            let q = matmul(&x, &block.wq)?;
            let k = matmul(&x, &block.wk)?;
            let v = matmul(&x, &block.wv)?;
            let mut ctx = vec![0.0; n * d];
            let probe_head = attention_probe.and_then(|(l, h)| (l == li).then_some(h));
            let mut probe = probe_head.map(|_| vec![0.0; n * n]);
            let (qh, kh, vh) = (split_heads(&q, heads), split_heads(&k, heads), split_heads(&v, heads));
            for h in 0..heads {
                let block = h * n * dh..(h + 1) * n * dh;
                let (qh, kh, vh) = (&qh[block.clone()], &kh[block.clone()], &vh[block]);
                for (i, qi) in qh.chunks_exact(dh).enumerate() {
                    let row = &mut scores[..=i];
                    for (s, kj) in row.iter_mut().zip(kh.chunks_exact(dh)) {
                        *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    softmax_in_place(row);
                    let out = &mut ctx[i * d + h * dh..i * d + (h + 1) * dh];
                    for (&a, vj) in row.iter().zip(vh.chunks_exact(dh)) {
                        for (o, vv) in out.iter_mut().zip(vj) {
                            *o += a * vv;
                        }
                    }
                    if probe_head == Some(h) {
                        if let Some(p) = probe.as_mut() {
                            p[i * n..i * n + i + 1].copy_from_slice(row);
                        }
                    }
                }
            }
            if let Some(p) = probe {
                trace.attention = Some(Tensor::new(vec![n, n], p)?);
            }
            let mha = matmul(&Tensor::new(vec![n, d], ctx)?, &block.wo)?;
            for (xv, mv) in x.data_mut().iter_mut().zip(mha.data()) {
                *xv += mv;
            }
            trace.mha.push(mha);
            if li + 1 == self.config.layers && !capture_ffn {
                break;
            }
            let ffn = self.ffn(li, &x)?;
            for (xv, fv) in x.data_mut().iter_mut().zip(ffn.data()) {
                *xv += fv;
            }
            if capture_ffn {
                trace.ffn.push(ffn);
            }
        }
        Ok(trace)
    }

    /// Post-softmax causal attention matrix of one head.
    pub fn attention_matrix(&self, tokens: &[u32], layer: usize, head: usize) -> Result<Tensor> {
        let trace = self.forward(tokens, false, Some((layer, head)))?;
        Ok(trace.attention.expect("probe requested"))
    }
}

impl Prefiller for ToyLm {
    fn prefill(&self, tokens: &[u32]) -> Result<ActivationTensor> {
        let trace = self.forward(tokens, false, None)?;
        let (n, d) = (tokens.len(), self.config.hidden);
        let mut values = Vec::with_capacity(self.config.layers * n * d);
        for t in &trace.mha {
            values.extend(t.data().iter().map(|&v| v as f32));
        }
        ActivationTensor::new(self.config.layers, n, d, values)
    }

    fn mask_token(&self) -> u32 {
        (self.config.vocab - 1) as u32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ToyLm {
        ToyLm::new(ToyLmConfig {
            layers: 2,
            hidden: 16,
            heads: 4,
            vocab: 10,
            max_tokens: 32,
            ffn_hidden: 32,
            init_std: 0.5,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn shape_and_determinism() {
        let lm = small();
        let toks = [1, 4, 2, 9, 0, 3];
        let a = lm.prefill(&toks).unwrap();
        assert_eq!((a.layers(), a.tokens(), a.dims()), (2, 6, 16));
        let b = small().prefill(&toks).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn rejects_bad_tokens_and_lengths() {
        let lm = small();
        assert!(matches!(lm.prefill(&[10]), Err(Error::Vocabulary { token: 10, .. })));
        assert!(lm.prefill(&[]).is_err());
        assert!(lm.prefill(&[0; 33]).is_err());
        assert!(lm.attention_matrix(&[1, 2], 2, 0).is_err());
        assert!(lm.attention_matrix(&[1, 2], 0, 4).is_err());
    }

    #[test]
    fn attention_is_causal_and_stochastic() {
        let lm = small();
        assert_eq!(lm.attention_matrix(&[5], 1, 2).unwrap().data(), &[1.0]);
        let toks: Vec<u32> = (0..12).map(|i| (i * 7 % 10) as u32).collect();
        for layer in 0..2 {
            for head in 0..4 {
                let a = lm.attention_matrix(&toks, layer, head).unwrap();
                for i in 0..12 {
                    let row = a.row(i);
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    assert!(row[i + 1..].iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut c = ToyLmConfig::default();
        c.heads = 5;
        assert!(matches!(ToyLm::new(c), Err(Error::Config { .. })));
    }
}
