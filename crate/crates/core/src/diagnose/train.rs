//! Supervised training of the fusion layer and head with dynamic masking.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{bce_loss, head_forward, Checkpoint, DiagnoseError, Model, LABELS};
use crate::casemodel::{apply_preprocess, CaseRecord, LabelSet, OutlierPolicy, SubtypeLabel};
use crate::encoder::{EncoderMode, HiddenSequence};
use crate::fusion::{build_concat, fuse_backward_with, mask_selection, MaskSpec, MASK_MAX};
use crate::linalg::{dot, softmax, Matrix};
use crate::retrieval::{retrieve_vector, CaseBase};

/// Settings of the large-scale language-model stage that this trainer does
/// not run. Kept so configs and checkpoints record them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmStageSettings {
    pub pretrain_batch_size: usize,
    pub pretrain_learning_rate: f64,
    pub token_block_size: usize,
    pub warmup_steps: usize,
    pub lora_alpha: f64,
    pub lora_rank: usize,
}

impl Default for LlmStageSettings {
    fn default() -> Self {
        Self {
            pretrain_batch_size: 64,
            pretrain_learning_rate: 1e-4,
            token_block_size: 2048,
            warmup_steps: 1000,
            lora_alpha: 32.0,
            lora_rank: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub mask_max: usize,
    /// Auxiliary cases per example; 0 trains a retrieval-free head.
    pub k: usize,
    pub seed: u64,
    /// Also train the structured encoder's summary projection.
    pub unfreeze_encoder: bool,
    /// Also train the reranker matrix, with a listwise auxiliary loss.
    pub unfreeze_reranker: bool,
    /// Candidates scored by the reranker auxiliary loss.
    pub rerank_pool: usize,
    pub rerank_temperature: f64,
    pub llm_stage: LlmStageSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 4,
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            mask_max: MASK_MAX,
            k: crate::retrieval::DEFAULT_K,
            seed: 42,
            unfreeze_encoder: false,
            unfreeze_reranker: false,
            rerank_pool: 20,
            rerank_temperature: 0.1,
            llm_stage: LlmStageSettings::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DiagnoseError> {
        let bad = |m: String| Err(DiagnoseError::BadConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)".into());
        }
        if self.mask_max > MASK_MAX {
            return bad(format!("mask_max must be at most {MASK_MAX}"));
        }
        if !(self.rerank_temperature > 0.0) {
            return bad("rerank_temperature must be positive".into());
        }
        Ok(())
    }
}

/// Gradients keyed by tensor name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Grads(pub BTreeMap<String, Matrix>);

impl Grads {
    fn zeros(model: &Model, names: &[String]) -> Self {
        let mut g = BTreeMap::new();
        for (name, m) in model.tensors() {
            if names.contains(&name) {
                g.insert(name, Matrix::zeros(m.rows(), m.cols()));
            }
        }
        Self(g)
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.0.get(name)
    }

    fn add(&mut self, name: &str, m: &Matrix) {
        if let Some(g) = self.0.get_mut(name) {
            g.add_assign(m);
        }
    }

    fn entry(&mut self, name: &str) -> Option<&mut Matrix> {
        self.0.get_mut(name)
    }

    fn scale(&mut self, s: f64) {
        self.0.values_mut().for_each(|m| m.scale(s));
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone, Default)]
pub struct AdamW {
    step: u64,
    moments: BTreeMap<String, (Matrix, Matrix)>,
}

impl AdamW {
    pub fn step(&mut self, model: &mut Model, grads: &Grads, cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
        for (name, param) in model.tensors_mut() {
            let Some(g) = grads.get(&name) else { continue };
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (Matrix::zeros(g.rows(), g.cols()), Matrix::zeros(g.rows(), g.cols())));
            let p = param.as_mut_slice();
            let (m, v) = (m.as_mut_slice(), v.as_mut_slice());
            for (i, &gi) in g.as_slice().iter().enumerate() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
                p[i] -= cfg.learning_rate * (update + cfg.weight_decay * p[i]);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean loss over the epoch's (masked) training passes.
    pub train_loss: f64,
    /// Mean unmasked validation loss after the epoch; `None` without a validation split.
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Unmasked training loss before the first update.
    pub initial_train_loss: f64,
    /// Unmasked training loss after the last update.
    pub final_train_loss: f64,
    pub epochs: Vec<EpochLog>,
}

/// Encoder output plus, in structured mode, the feature vector and the
/// diagnosis shift it was built from.
struct Encoded {
    seq: HiddenSequence,
    x: Option<Vec<f64>>,
    shift: Option<Vec<f64>>,
}

fn encode(model: &Model, record: &CaseRecord, reference: bool) -> Result<Encoded, DiagnoseError> {
    let seq = if reference { model.encode_reference(record)? } else { model.encode_query(record)? };
    let (x, shift) = match (&model.stats, &model.encoder.structured) {
        (Some(stats), Some(w)) => (
            Some(apply_preprocess(&record.case, stats, OutlierPolicy::Clip)?),
            reference.then(|| w.label_shift(record.labels)),
        ),
        _ => (None, None),
    };
    Ok(Encoded { seq, x, shift })
}

fn projection(model: &Model) -> &Matrix {
    &model.encoder.structured.as_ref().expect("structured encoder").projection
}

fn trainable_names(model: &Model, k: usize, unfreeze_encoder: bool, unfreeze_reranker: bool) -> Vec<String> {
    let mut names = vec!["head.w".to_string(), "head.b".to_string()];
    if k > 0 {
        names.extend(model.fusion.tensors().into_iter().map(|(n, _)| n));
        if unfreeze_reranker {
            names.push("reranker.m".into());
        }
    }
    if unfreeze_encoder {
        names.push("encoder.projection".into());
    }
    names
}

/// Forward, loss and (optionally) accumulated gradients for one example.
fn forward_backward(
    model: &Model,
    target: &Encoded,
    refs: &[&Encoded],
    masked: &[usize],
    gold: LabelSet,
    unfreeze_encoder: bool,
    grads: Option<&mut Grads>,
) -> Result<f64, DiagnoseError> {
    let fresh_cls = |e: &Encoded| -> Vec<f64> {
        match (&e.x, unfreeze_encoder) {
            (Some(x), true) => {
                let mut cls = projection(model).matvec(x);
                if let Some(shift) = &e.shift {
                    cls.iter_mut().zip(shift).for_each(|(a, b)| *a += b);
                }
                cls
            }
            _ => e.seq.cls.clone(),
        }
    };
    let t = fresh_cls(target);
    let concat = if refs.is_empty() {
        None
    } else if unfreeze_encoder {
        let seqs: Vec<HiddenSequence> =
            refs.iter().map(|e| HiddenSequence { cls: fresh_cls(e), ..e.seq.clone() }).collect();
        Some(build_concat(&seqs.iter().collect::<Vec<_>>())?)
    } else {
        Some(build_concat(&refs.iter().map(|e| &e.seq).collect::<Vec<_>>())?)
    };
    let concat = concat.map(|mut c| {
        c.mask_cases(masked);
        c
    });
    let f = head_forward(model, &t, concat.as_ref())?;
    let loss = bce_loss(&f.scores, gold);
    let Some(grads) = grads else { return Ok(loss) };

    let mut d_logits = [0.0; LABELS];
    for (i, l) in SubtypeLabel::ALL.into_iter().enumerate() {
        let p = f.scores[i];
        let y = if gold.contains(l) { 1.0 } else { 0.0 };
        // the clamp in the loss is flat outside [1e-7, 1 - 1e-7]
        d_logits[i] = if (1e-7..=1.0 - 1e-7).contains(&p) { (p - y) / LABELS as f64 } else { 0.0 };
    }
    if let Some(g) = grads.entry("head.w") {
        g.add_outer(1.0, &d_logits, &f.input);
    }
    if let Some(g) = grads.entry("head.b") {
        for (i, d) in d_logits.iter().enumerate() {
            g.set(0, i, g.get(0, i) + d);
        }
    }
    let d_input = model.head.w.matvec_t(&d_logits);
    let d_k = model.fusion.d_k();
    let d_fusion = &d_input[..d_k];
    let mut d_t = d_input[d_k..].to_vec();
    let mut d_rows = None;
    if let Some(c) = concat.as_ref().filter(|c| c.active_rows() > 0) {
        let fg = fuse_backward_with(&t, Some(c), &model.fusion, d_fusion, unfreeze_encoder)?;
        grads.add("fusion.w_q", &fg.w_q);
        grads.add("fusion.w_k", &fg.w_k);
        if let Some(v) = &fg.w_v {
            grads.add("fusion.w_v", v);
        }
        for (a, b) in d_t.iter_mut().zip(&fg.t_cls) {
            *a += b;
        }
        d_rows = fg.rows;
    }
    if unfreeze_encoder {
        let g = grads.entry("encoder.projection").expect("projection is trainable");
        g.add_outer(1.0, &d_t, target.x.as_ref().expect("structured features"));
        if let (Some(rows), Some(c)) = (d_rows, concat.as_ref()) {
            for (e, block) in refs.iter().zip(&c.boundaries) {
                g.add_outer(1.0, &rows[block.start], e.x.as_ref().expect("structured features"));
            }
        }
    }
    Ok(loss)
}

/// Loss of one example with `refs` as its auxiliary cases and the listed
/// case blocks masked.
pub fn example_loss(
    model: &Model,
    target: &CaseRecord,
    refs: &[&CaseRecord],
    masked: &[usize],
) -> Result<f64, DiagnoseError> {
    let t = encode(model, target, false)?;
    let r = refs.iter().map(|r| encode(model, r, true)).collect::<Result<Vec<_>, _>>()?;
    forward_backward(model, &t, &r.iter().collect::<Vec<_>>(), masked, target.labels, false, None)
}

/// [`example_loss`] plus its gradient with respect to every trainable
/// tensor (head, fusion and, if `unfreeze_encoder`, the structured projection).
pub fn example_loss_grads(
    model: &Model,
    target: &CaseRecord,
    refs: &[&CaseRecord],
    masked: &[usize],
    unfreeze_encoder: bool,
) -> Result<(f64, Grads), DiagnoseError> {
    if unfreeze_encoder && model.encoder.structured.is_none() {
        return Err(DiagnoseError::BadConfig("only the structured encoder can be unfrozen".into()));
    }
    let t = encode(model, target, false)?;
    let r = refs.iter().map(|r| encode(model, r, true)).collect::<Result<Vec<_>, _>>()?;
    let k = usize::from(!refs.is_empty());
    let mut grads = Grads::zeros(model, &trainable_names(model, k, unfreeze_encoder, false));
    let loss = forward_backward(
        model,
        &t,
        &r.iter().collect::<Vec<_>>(),
        masked,
        target.labels,
        unfreeze_encoder,
        Some(&mut grads),
    )?;
    Ok((loss, grads))
}

/// Listwise reranker objective: cross-entropy between the softmax of
/// `qᵀ M c / τ` over the candidates and the normalised `relevance`.
/// Returns zero loss and gradient when no candidate is relevant.
pub fn rerank_aux_loss_grads(
    m: &Matrix,
    query: &[f64],
    candidates: &[Vec<f64>],
    relevance: &[f64],
    temperature: f64,
) -> (f64, Matrix) {
    let mut grad = Matrix::zeros(m.rows(), m.cols());
    let total: f64 = relevance.iter().sum();
    if candidates.is_empty() || !(total > 0.0) {
        return (0.0, grad);
    }
    let mq = m.matvec_t(query);
    let scores: Vec<f64> = candidates.iter().map(|c| dot(&mq, c) / temperature).collect();
    let p = softmax(&scores);
    let mut loss = 0.0;
    for ((c, pc), rel) in candidates.iter().zip(&p).zip(relevance) {
        let t = rel / total;
        if t > 0.0 {
            loss -= t * pc.ln();
        }
        grad.add_outer((pc - t) / temperature, query, c);
    }
    (loss, grad)
}

fn jaccard(a: LabelSet, b: LabelSet) -> f64 {
    let u = a.union(b).len();
    if u == 0 {
        0.0
    } else {
        a.intersection(b).len() as f64 / u as f64
    }
}

struct Example<'a> {
    record: &'a CaseRecord,
    enc: Encoded,
    query: Vec<f64>,
    neighbours: Vec<String>,
}

fn neighbour_ids(model: &Model, query: &[f64], id: &str, base: &CaseBase, k: usize) -> Result<Vec<String>, DiagnoseError> {
    if k == 0 || base.is_empty() {
        return Ok(vec![]);
    }
    match retrieve_vector(query, Some(id), &base.index, &model.reranker, k, model.config.n1) {
        Ok(r) => Ok(r.items.into_iter().map(|c| c.id).collect()),
        Err(crate::retrieval::RetrievalError::EmptyIndex) => Ok(vec![]),
        Err(e) => Err(e.into()),
    }
}

fn prepare<'a>(model: &Model, split: &'a [CaseRecord], base: &CaseBase, k: usize) -> Result<Vec<Example<'a>>, DiagnoseError> {
    split
        .iter()
        .map(|r| {
            let enc = encode(model, r, false)?;
            let query = crate::encoder::normalize_cls(&enc.seq.cls).vector;
            let neighbours = neighbour_ids(model, &query, r.id(), base, k)?;
            Ok(Example { record: r, enc, query, neighbours })
        })
        .collect()
}

fn mean_loss(
    model: &Model,
    examples: &[Example],
    cache: &HashMap<String, Encoded>,
    unfreeze_encoder: bool,
) -> Result<f64, DiagnoseError> {
    let mut sum = 0.0;
    for ex in examples {
        let refs: Vec<&Encoded> = ex.neighbours.iter().map(|id| &cache[id]).collect();
        sum += forward_backward(model, &ex.enc, &refs, &[], ex.record.labels, unfreeze_encoder, None)?;
    }
    Ok(sum / examples.len() as f64)
}

/// Train `model` on `train_split`, retrieving auxiliary cases from `base`
/// (normally built over the same split).
///
/// Neighbour sets are computed once with the initial encoder. When the
/// encoder projection is unfrozen, rebuild the index from the returned
/// checkpoint before serving.
pub fn train(
    train_split: &[CaseRecord],
    val_split: &[CaseRecord],
    cfg: &TrainConfig,
    mut model: Model,
    base: &CaseBase,
) -> Result<(Checkpoint, TrainLog), DiagnoseError> {
    cfg.validate()?;
    if train_split.is_empty() {
        return Err(DiagnoseError::EmptyTrainSplit);
    }
    if cfg.unfreeze_encoder && model.config.encoder.mode != EncoderMode::Structured {
        return Err(DiagnoseError::BadConfig("only the structured encoder can be unfrozen".into()));
    }
    model.config.k = cfg.k;
    model.reranker.trainable = cfg.unfreeze_reranker && cfg.k > 0;
    let names = trainable_names(&model, cfg.k, cfg.unfreeze_encoder, model.reranker.trainable);

    let mut train_ex = prepare(&model, train_split, base, cfg.k)?;
    let val_ex = prepare(&model, val_split, base, cfg.k)?;
    let mut cache: HashMap<String, Encoded> = HashMap::new();
    if cfg.k > 0 {
        for r in base.records() {
            cache.insert(r.id().to_string(), encode(&model, r, true)?);
        }
    }

    let initial_train_loss = mean_loss(&model, &train_ex, &cache, cfg.unfreeze_encoder)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::default();
    let mut order: Vec<usize> = (0..train_ex.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        if model.reranker.trainable && epoch > 1 {
            for ex in train_ex.iter_mut() {
                ex.neighbours = neighbour_ids(&model, &ex.query, ex.record.id(), base, cfg.k)?;
            }
        }
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Grads::zeros(&model, &names);
            for &i in batch {
                let ex = &train_ex[i];
                let refs: Vec<&Encoded> = ex.neighbours.iter().map(|id| &cache[id]).collect();
                let m = rng.random_range(0..=cfg.mask_max.min(refs.len()));
                let masked = mask_selection(refs.len(), MaskSpec { m, seed: rng.random() });
                epoch_loss += forward_backward(
                    &model,
                    &ex.enc,
                    &refs,
                    &masked,
                    ex.record.labels,
                    cfg.unfreeze_encoder,
                    Some(&mut grads),
                )?;
                if model.reranker.trainable {
                    let pool = base.index.search(&ex.query, cfg.rerank_pool + 1)?;
                    let pool: Vec<_> = pool.into_iter().filter(|c| c.id != ex.record.id()).take(cfg.rerank_pool).collect();
                    let vecs: Vec<Vec<f64>> = pool.iter().map(|c| base.index.vector(&c.id).expect("indexed")).collect();
                    let rel: Vec<f64> = pool
                        .iter()
                        .map(|c| jaccard(ex.record.labels, base.index.get(&c.id).expect("indexed").labels))
                        .collect();
                    let (_, g) = rerank_aux_loss_grads(&model.reranker.m, &ex.query, &vecs, &rel, cfg.rerank_temperature);
                    grads.add("reranker.m", &g);
                }
            }
            grads.scale(1.0 / batch.len() as f64);
            opt.step(&mut model, &grads, cfg);
        }
        let val_loss = if val_ex.is_empty() {
            None
        } else {
            Some(mean_loss(&model, &val_ex, &cache, cfg.unfreeze_encoder)?)
        };
        let train_loss = epoch_loss / train_ex.len() as f64;
        log::info!("epoch {epoch}: train loss {train_loss:.5}, val loss {val_loss:?}");
        epochs.push(EpochLog { epoch, train_loss, val_loss });
    }
    let final_train_loss = mean_loss(&model, &train_ex, &cache, cfg.unfreeze_encoder)?;
    Ok((Checkpoint { model, train: cfg.clone() }, TrainLog { initial_train_loss, final_train_loss, epochs }))
}
