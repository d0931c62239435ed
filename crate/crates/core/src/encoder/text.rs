use rand::Rng;

use super::tokenize::{tokenize, words};
use super::{EncoderConfig, EncoderError, HiddenSequence};
use crate::linalg::{dot, layer_norm, softmax, Matrix};

/// One pre-norm transformer block: multi-head self-attention then a ReLU MLP,
/// each with a residual connection.
#[derive(Debug, Clone, PartialEq)]
pub struct TextBlock {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextWeights {
    /// `vocab × d`
    pub embedding: Matrix,
    /// `1 × d`
    pub cls: Matrix,
    pub blocks: Vec<TextBlock>,
}

fn sinusoidal(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = pos as f64 * freq;
            if i % 2 == 0 { a.sin() } else { a.cos() }
        })
        .collect()
}

impl TextWeights {
    pub(super) fn init<R: Rng>(cfg: &EncoderConfig, bound: f64, rng: &mut R) -> Self {
        let d = cfg.d;
        let embedding = Matrix::uniform(cfg.vocab, d, bound, rng);
        let cls = Matrix::uniform(1, d, bound, rng);
        let blocks = (0..cfg.layers)
            .map(|_| TextBlock {
                wq: Matrix::uniform(d, d, bound, rng),
                wk: Matrix::uniform(d, d, bound, rng),
                wv: Matrix::uniform(d, d, bound, rng),
                wo: Matrix::uniform(d, d, bound, rng),
                w1: Matrix::uniform(2 * d, d, bound, rng),
                b1: Matrix::zeros(1, 2 * d),
                w2: Matrix::uniform(d, 2 * d, bound, rng),
                b2: Matrix::zeros(1, d),
            })
            .collect();
        Self { embedding, cls, blocks }
    }

    fn embed(&self, text: &str, cfg: &EncoderConfig) -> Result<(Vec<Vec<f64>>, usize), EncoderError> {
        let ids = tokenize(text, cfg.vocab, cfg.max_len)?;
        let source_len = words(text).len();
        let d = cfg.d;
        let mut xs = Vec::with_capacity(ids.len() + 1);
        let mut first = self.cls.row(0).to_vec();
        for (a, p) in first.iter_mut().zip(sinusoidal(0, d)) {
            *a += p;
        }
        xs.push(first);
        for (i, &id) in ids.iter().enumerate() {
            let mut v = self.embedding.row(id as usize).to_vec();
            for (a, p) in v.iter_mut().zip(sinusoidal(i + 1, d)) {
                *a += p;
            }
            xs.push(v);
        }
        Ok((xs, source_len))
    }

    /// Runs the block stack; `maps` collects one attention matrix per head per layer.
    fn forward(&self, mut xs: Vec<Vec<f64>>, heads: usize, mut maps: Option<&mut Vec<Matrix>>) -> Vec<Vec<f64>> {
        let n = xs.len();
        let d = xs[0].len();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for b in &self.blocks {
            let normed: Vec<Vec<f64>> = xs.iter().map(|x| layer_norm(x)).collect();
            let q: Vec<Vec<f64>> = normed.iter().map(|x| b.wq.matvec(x)).collect();
            let k: Vec<Vec<f64>> = normed.iter().map(|x| b.wk.matvec(x)).collect();
            let v: Vec<Vec<f64>> = normed.iter().map(|x| b.wv.matvec(x)).collect();
            let mut ctx = vec![vec![0.0; d]; n];
            for h in 0..heads {
                let r = h * dh..(h + 1) * dh;
                let mut map = Matrix::zeros(n, n);
                for i in 0..n {
                    let scores: Vec<f64> =
                        (0..n).map(|j| dot(&q[i][r.clone()], &k[j][r.clone()]) * scale).collect();
                    let w = softmax(&scores);
                    for (j, wj) in w.iter().enumerate() {
                        map.set(i, j, *wj);
                        for (c, vv) in ctx[i][r.clone()].iter_mut().zip(&v[j][r.clone()]) {
                            *c += wj * vv;
                        }
                    }
                }
                if let Some(m) = maps.as_deref_mut() {
                    m.push(map);
                }
            }
            for (x, c) in xs.iter_mut().zip(&ctx) {
                for (a, o) in x.iter_mut().zip(b.wo.matvec(c)) {
                    *a += o;
                }
            }
            for x in xs.iter_mut() {
                let h: Vec<f64> = b
                    .w1
                    .matvec(&layer_norm(x))
                    .iter()
                    .zip(b.b1.row(0))
                    .map(|(a, bias)| (a + bias).max(0.0))
                    .collect();
                for ((a, o), bias) in x.iter_mut().zip(b.w2.matvec(&h)).zip(b.b2.row(0)) {
                    *a += o + bias;
                }
            }
        }
        xs
    }

    pub(super) fn encode(&self, text: &str, cfg: &EncoderConfig) -> Result<HiddenSequence, EncoderError> {
        let (xs, source_len) = self.embed(text, cfg)?;
        let mut out = self.forward(xs, cfg.heads, None);
        let tokens = out.split_off(1);
        let cls = out.pop().expect("cls row");
        Ok(HiddenSequence { cls, tokens, source_len })
    }

    /// Self-attention weight matrices of every head in every layer.
    pub fn attention_maps(&self, text: &str, cfg: &EncoderConfig) -> Result<Vec<Matrix>, EncoderError> {
        let (xs, _) = self.embed(text, cfg)?;
        let mut maps = Vec::new();
        self.forward(xs, cfg.heads, Some(&mut maps));
        Ok(maps)
    }

    pub(super) fn tensors<'a>(&'a self, out: &mut Vec<(String, &'a Matrix)>) {
        out.push(("encoder.embedding".into(), &self.embedding));
        out.push(("encoder.cls".into(), &self.cls));
        for (i, b) in self.blocks.iter().enumerate() {
            for (n, m) in [
                ("wq", &b.wq), ("wk", &b.wk), ("wv", &b.wv), ("wo", &b.wo),
                ("w1", &b.w1), ("b1", &b.b1), ("w2", &b.w2), ("b2", &b.b2),
            ] {
                out.push((format!("encoder.block{i}.{n}"), m));
            }
        }
    }

    pub(super) fn tensors_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Matrix)>) {
        out.push(("encoder.embedding".into(), &mut self.embedding));
        out.push(("encoder.cls".into(), &mut self.cls));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let TextBlock { wq, wk, wv, wo, w1, b1, w2, b2 } = b;
            for (n, m) in [
                ("wq", wq), ("wk", wk), ("wv", wv), ("wo", wo),
                ("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2),
            ] {
                out.push((format!("encoder.block{i}.{n}"), m));
            }
        }
    }
}
