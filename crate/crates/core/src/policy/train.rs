//! Loss, gradients and optimization for the neural policy.
//!
//! One training step runs three decoder stages on top of one encoder pass:
//!
//! 1. initial deletion on `y0` (TM examples only);
//! 2. placeholder prediction on `y0'` and token prediction on `y0'` with
//!    the oracle placeholders inserted;
//! 3. final deletion on the sequence filled with the model's own argmax
//!    tokens, labelled against the oracle fills.
//!
//! With self-predicted deletions, `y0'` drops the union of the reference
//! deletions and the deletions predicted in stage 1.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{gap_rows, interior_rows, plh_rows, token_mask, Model};
use super::tensor::{cross_entropy, Scalar};
use super::PolicyError;
use crate::corpus::{TokenId, BOS_ID, EOS_ID, PLH_ID};
use crate::edit_calculus::{
    apply_delete, apply_placeholders, fill_tokens, make_final_del_targets, oracle_insertion_labels, RollInExample,
};
use crate::rng::{self, streams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossOptions {
    pub final_del: bool,
    pub self_pred: bool,
    /// Weights of the init-del, placeholder, token and final-del terms.
    pub weights: [f64; 4],
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            final_del: true,
            self_pred: true,
            weights: [1.0; 4],
        }
    }
}

/// Per-task mean cross-entropies.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskLosses {
    pub del: f64,
    pub plh: f64,
    pub tok: f64,
    pub final_del: f64,
}

impl TaskLosses {
    pub fn weighted(&self, w: &[f64; 4]) -> f64 {
        w[0] * self.del + w[1] * self.plh + w[2] * self.tok + w[3] * self.final_del
    }
}

/// Argmax-dependent choices made during a step. Freezing them makes the loss
/// a smooth function of the parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Decisions {
    /// Model-predicted initial deletions per example (TM examples with self-prediction).
    pub predicted_deletions: Vec<Option<Vec<bool>>>,
    /// Model fills per example, when the example reached the token stage.
    pub fills: Vec<Option<Vec<TokenId>>>,
}

#[derive(Debug, Clone)]
pub struct LossGrad<T> {
    pub losses: TaskLosses,
    pub total: f64,
    pub grads: Vec<T>,
    pub decisions: Decisions,
    /// Hash of every ReLU on/off state in the forward pass. The loss is
    /// smooth between two parameter vectors sharing a signature.
    pub activation_signature: u64,
}

fn wrap(v: &[TokenId]) -> Vec<TokenId> {
    let mut t = Vec::with_capacity(v.len() + 2);
    t.push(BOS_ID);
    t.extend_from_slice(v);
    t.push(EOS_ID);
    t
}

fn argmax_row<T: Scalar>(row: &[T], mask: Option<&[bool]>) -> usize {
    let mut best = None;
    for (j, &v) in row.iter().enumerate() {
        if mask.is_some_and(|m| m[j]) {
            continue;
        }
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((j, v)),
        }
    }
    best.map_or(0, |(j, _)| j)
}

/// Mean loss of a group of rows and its scaled gradient.
struct Head<T> {
    grad: Vec<T>,
    sum: f64,
    count: usize,
}

fn ce_rows<T: Scalar>(logits: &[T], width: usize, targets: &[usize], mask: Option<&[bool]>, weight: f64, total: usize) -> Head<T> {
    let mut grad = vec![T::zero(); logits.len()];
    let mut sum = 0.0;
    let scale = if total == 0 { T::zero() } else { T::c(weight / total as f64) };
    for (i, &y) in targets.iter().enumerate() {
        sum += cross_entropy(&logits[i * width..(i + 1) * width], y, mask, scale, &mut grad[i * width..(i + 1) * width]);
    }
    Head {
        grad,
        sum,
        count: targets.len(),
    }
}

fn mean(sum: f64, count: usize) -> f64 {
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Insertion-stage inputs of one example.
struct Insertion {
    y0_prime: Vec<TokenId>,
    counts: Vec<usize>,
    fills: Vec<TokenId>,
}

/// Loss and gradient of a batch. With `frozen`, argmax decisions are taken
/// from it instead of the current parameters.
pub fn loss_and_grad<T: Scalar>(
    model: &Model<T>,
    batch: &[RollInExample],
    opts: &LossOptions,
    frozen: Option<&Decisions>,
) -> Result<LossGrad<T>, PolicyError> {
    let k_max = model.cfg.k_max;
    let w = opts.weights;
    let enc_inputs: Vec<&[TokenId]> = batch.iter().map(|e| e.encoder_input.as_slice()).collect();
    let enc = model.encode(&enc_inputs)?;
    let mut sig = std::collections::hash_map::DefaultHasher::new();
    enc.hash_activations(&mut sig);
    let mut grads = vec![T::zero(); model.num_params()];
    let mut d_enc = vec![T::zero(); enc.states.len()];
    let mut decisions = Decisions {
        predicted_deletions: vec![None; batch.len()],
        fills: vec![None; batch.len()],
    };

    // Stage 1: initial deletion.
    let tm_idx: Vec<usize> = (0..batch.len()).filter(|&i| batch[i].is_tm()).collect();
    let a_targets: Vec<Vec<TokenId>> = tm_idx.iter().map(|&i| wrap(&batch[i].y0)).collect();
    let mut del_loss = (0.0, 0usize);
    if !tm_idx.is_empty() {
        let refs: Vec<&[TokenId]> = a_targets.iter().map(Vec::as_slice).collect();
        let dec = model.decode(&enc, &refs, &tm_idx)?;
        dec.hash_activations(&mut sig);
        let rows_per = interior_rows(&dec.segs);
        let rows: Vec<usize> = rows_per.iter().flatten().copied().collect();
        let labels: Vec<usize> = tm_idx
            .iter()
            .flat_map(|&i| batch[i].init_del_targets.as_ref().expect("TM example").iter().map(|&d| usize::from(d)))
            .collect();
        let logits = model.del_logits(&dec.states, &rows);
        let head = ce_rows(&logits, 2, &labels, None, w[0], rows.len());
        del_loss = (head.sum, head.count);
        if opts.self_pred {
            let mut r = 0;
            for (slot, &i) in tm_idx.iter().enumerate() {
                let n = rows_per[slot].len();
                let pred = match frozen {
                    Some(f) => f.predicted_deletions[i].clone().unwrap_or_else(|| vec![false; n]),
                    None => (r..r + n).map(|k| argmax_row(&logits[2 * k..2 * k + 2], None) == 1).collect(),
                };
                decisions.predicted_deletions[i] = Some(pred);
                r += n;
            }
        }
        let mut d_states = vec![T::zero(); dec.states.len()];
        model.del_backward(&dec.states, &rows, &head.grad, &mut grads, &mut d_states);
        model.decode_backward(&enc, &dec, &d_states, &mut grads, &mut d_enc);
    }

    // Reduced targets and insertion labels.
    let mut insertions: Vec<Option<Insertion>> = Vec::with_capacity(batch.len());
    for (i, ex) in batch.iter().enumerate() {
        let ins = match (&ex.init_del_targets, &decisions.predicted_deletions[i]) {
            (Some(reference), Some(pred)) => {
                let flags: Vec<bool> = reference.iter().zip(pred).map(|(&a, &b)| a || b).collect();
                let y0_prime = apply_delete(&ex.y0, &flags)?;
                let labels = oracle_insertion_labels(&y0_prime, &ex.reference())?;
                (labels.counts.iter().all(|&c| c <= k_max)).then_some(Insertion {
                    y0_prime,
                    counts: labels.counts,
                    fills: labels.fills,
                })
            }
            _ => (ex.plh_targets.iter().all(|&c| c <= k_max)).then(|| Insertion {
                y0_prime: ex.y0_prime.clone(),
                counts: ex.plh_targets.clone(),
                fills: ex.tok_targets.clone(),
            }),
        };
        insertions.push(ins);
    }

    // Stage 2: placeholders and tokens, packed as two targets per example.
    let ins_idx: Vec<usize> = (0..batch.len()).filter(|&i| insertions[i].is_some()).collect();
    let mut b_targets: Vec<Vec<TokenId>> = Vec::with_capacity(2 * ins_idx.len());
    let mut b_enc = Vec::with_capacity(2 * ins_idx.len());
    let mut with_plh: Vec<Vec<TokenId>> = Vec::with_capacity(ins_idx.len());
    for &i in &ins_idx {
        let ins = insertions[i].as_ref().expect("filtered");
        let wp = apply_placeholders(&ins.y0_prime, &ins.counts, &PLH_ID)?;
        b_targets.push(wrap(&ins.y0_prime));
        b_targets.push(wrap(&wp));
        b_enc.extend([i, i]);
        with_plh.push(wp);
    }
    let mut plh_loss = (0.0, 0usize);
    let mut tok_loss = (0.0, 0usize);
    let mut filled: Vec<(usize, Vec<TokenId>, Vec<bool>)> = Vec::new();
    if !ins_idx.is_empty() {
        let refs: Vec<&[TokenId]> = b_targets.iter().map(Vec::as_slice).collect();
        let dec = model.decode(&enc, &refs, &b_enc)?;
        dec.hash_activations(&mut sig);
        let gaps_per = gap_rows(&dec.segs);
        let plh_per = plh_rows(dec.tokens(), &dec.segs);
        let mut gaps = Vec::new();
        let mut gap_labels = Vec::new();
        let mut tok_rows = Vec::new();
        let mut tok_labels = Vec::new();
        for (slot, &i) in ins_idx.iter().enumerate() {
            let ins = insertions[i].as_ref().expect("filtered");
            gaps.extend_from_slice(&gaps_per[2 * slot]);
            gap_labels.extend_from_slice(&ins.counts);
            tok_rows.extend_from_slice(&plh_per[2 * slot + 1]);
            tok_labels.extend(ins.fills.iter().map(|&t| t as usize));
        }
        let plh_logits = model.plh_logits(&dec.states, &gaps);
        let plh_head = ce_rows(&plh_logits, k_max + 1, &gap_labels, None, w[1], gaps.len());
        plh_loss = (plh_head.sum, plh_head.count);

        let vocab = model.cfg.vocab;
        let mask = token_mask(vocab);
        let tok_logits = model.tok_logits(&dec.states, &tok_rows);
        let tok_head = ce_rows(&tok_logits, vocab, &tok_labels, Some(&mask), w[2], tok_rows.len());
        tok_loss = (tok_head.sum, tok_head.count);

        let mut r = 0;
        for (slot, &i) in ins_idx.iter().enumerate() {
            let ins = insertions[i].as_ref().expect("filtered");
            let n = ins.fills.len();
            let pred: Vec<TokenId> = match frozen {
                Some(f) => f.fills[i].clone().unwrap_or_else(|| ins.fills.clone()),
                None => (r..r + n)
                    .map(|k| argmax_row(&tok_logits[k * vocab..(k + 1) * vocab], Some(&mask)) as TokenId)
                    .collect(),
            };
            r += n;
            let targets = make_final_del_targets(&with_plh[slot], &PLH_ID, &pred, &ins.fills)?;
            let y = fill_tokens(&with_plh[slot], &pred, &PLH_ID)?;
            decisions.fills[i] = Some(pred);
            filled.push((i, y, targets));
        }

        let mut d_states = vec![T::zero(); dec.states.len()];
        model.plh_backward(&dec.states, &gaps, &plh_head.grad, &mut grads, &mut d_states);
        model.tok_backward(&dec.states, &tok_rows, &tok_head.grad, &mut grads, &mut d_states);
        model.decode_backward(&enc, &dec, &d_states, &mut grads, &mut d_enc);
    }

    // Stage 3: final deletion on the model-filled sequences.
    let mut fdel_loss = (0.0, 0usize);
    if opts.final_del && !filled.is_empty() {
        let c_targets: Vec<Vec<TokenId>> = filled.iter().map(|(_, y, _)| wrap(y)).collect();
        let c_enc: Vec<usize> = filled.iter().map(|(i, _, _)| *i).collect();
        let refs: Vec<&[TokenId]> = c_targets.iter().map(Vec::as_slice).collect();
        let dec = model.decode(&enc, &refs, &c_enc)?;
        dec.hash_activations(&mut sig);
        let rows: Vec<usize> = interior_rows(&dec.segs).into_iter().flatten().collect();
        let labels: Vec<usize> = filled.iter().flat_map(|(_, _, t)| t.iter().map(|&d| usize::from(d))).collect();
        let logits = model.del_logits(&dec.states, &rows);
        let head = ce_rows(&logits, 2, &labels, None, w[3], rows.len());
        fdel_loss = (head.sum, head.count);
        let mut d_states = vec![T::zero(); dec.states.len()];
        model.del_backward(&dec.states, &rows, &head.grad, &mut grads, &mut d_states);
        model.decode_backward(&enc, &dec, &d_states, &mut grads, &mut d_enc);
    }

    model.encode_backward(&enc, &d_enc, &mut grads);
    let losses = TaskLosses {
        del: mean(del_loss.0, del_loss.1),
        plh: mean(plh_loss.0, plh_loss.1),
        tok: mean(tok_loss.0, tok_loss.1),
        final_del: mean(fdel_loss.0, fdel_loss.1),
    };
    Ok(LossGrad {
        total: losses.weighted(&w),
        losses,
        grads,
        decisions,
        activation_signature: std::hash::Hasher::finish(&sig),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            warmup: 500,
        }
    }
}

impl AdamConfig {
    /// Linear warm-up to `lr`, then inverse-square-root decay. `step` is 1-based.
    pub fn lr_at(&self, step: usize) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup.max(1) as f64;
        self.lr * (s / w).min((w / s).sqrt())
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    m: Vec<T>,
    v: Vec<T>,
    t: usize,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, n: usize) -> Self {
        Self {
            cfg,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
        }
    }

    /// Apply one update; returns the learning rate used.
    pub fn update(&mut self, params: &mut [T], grads: &[T]) -> f64 {
        self.t += 1;
        let lr = self.cfg.lr_at(self.t);
        let (b1, b2) = (T::c(self.cfg.beta1), T::c(self.cfg.beta2));
        let c1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        let step = T::c(lr * c2.sqrt() / c1);
        let eps = T::c(self.cfg.eps * c2.sqrt());
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
            params[i] = params[i] - step * self.m[i] / (self.v[i].sqrt() + eps);
        }
        lr
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub loss: LossOptions,
    pub seed: u64,
}

/// One logged step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub losses: TaskLosses,
    pub total: f64,
    pub lr: f64,
}

/// Mini-batch training over a fixed example list, epoch-shuffled from the
/// train-order stream.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub model: Model<T>,
    opt: Adam<T>,
    cfg: TrainConfig,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    step: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, cfg: TrainConfig) -> Result<Self, PolicyError> {
        if cfg.batch_size == 0 {
            return Err(PolicyError::Config("batch size must be positive".into()));
        }
        let n = model.num_params();
        Ok(Self {
            model,
            opt: Adam::new(cfg.adam, n),
            cfg,
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
            step: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.cfg.batch_size);
        while out.len() < self.cfg.batch_size.min(n) {
            if self.cursor >= self.order.len() {
                self.order = (0..n).collect();
                self.order.shuffle(&mut rng::indexed_stream(self.cfg.seed, streams::TRAIN_ORDER, self.epoch));
                self.epoch += 1;
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    pub fn train_step(&mut self, data: &[RollInExample]) -> Result<StepRecord, PolicyError> {
        if data.is_empty() {
            return Err(PolicyError::Config("no training examples".into()));
        }
        let idx = self.next_batch(data.len());
        let batch: Vec<RollInExample> = idx.iter().map(|&i| data[i].clone()).collect();
        let out = loss_and_grad(&self.model, &batch, &self.cfg.loss, None)?;
        let lr = self.opt.update(&mut self.model.params, &out.grads);
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            losses: out.losses,
            total: out.total,
            lr,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edit_calculus::{make_tm_example, make_vanilla_example, ExampleConfig};
    use crate::policy::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab: 16,
            d_model: 8,
            heads: 2,
            ff: 12,
            enc_layers: 1,
            dec_layers: 1,
            k_max: 6,
        }
    }

    fn batch() -> Vec<RollInExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ec = ExampleConfig {
            self_pred: false,
            k_max: 6,
            ..Default::default()
        };
        vec![
            make_tm_example(&[6, 7, 8], &[9, 10, 11, 12], &[9, 13, 11], &ec, &mut rng, None).unwrap(),
            make_vanilla_example(&[7, 8], &[10, 14, 15], 6, &mut rng).unwrap(),
        ]
    }

    #[test]
    fn schedule_shape() {
        let a = AdamConfig {
            lr: 1.0,
            warmup: 4,
            ..Default::default()
        };
        assert_eq!(a.lr_at(2), 0.5);
        assert_eq!(a.lr_at(4), 1.0);
        assert_eq!(a.lr_at(16), 0.5);
    }

    #[test]
    fn losses_are_positive_and_training_reduces_them() {
        let model = Model::<f64>::new(cfg(), 3).unwrap();
        let data = batch();
        let mut tr = Trainer::new(
            model,
            TrainConfig {
                batch_size: 2,
                adam: AdamConfig {
                    lr: 1e-2,
                    warmup: 1,
                    ..Default::default()
                },
                loss: LossOptions::default(),
                seed: 1,
            },
        )
        .unwrap();
        let first = tr.train_step(&data).unwrap();
        assert!(first.losses.del > 0.0 && first.losses.plh > 0.0 && first.losses.tok > 0.0);
        let mut last = first;
        for _ in 0..60 {
            last = tr.train_step(&data).unwrap();
        }
        assert!(last.total < first.total * 0.5, "{} -> {}", first.total, last.total);
    }

    #[test]
    fn frozen_decisions_reproduce_loss() {
        let model = Model::<f64>::new(cfg(), 8).unwrap();
        let data = batch();
        let opts = LossOptions::default();
        let a = loss_and_grad(&model, &data, &opts, None).unwrap();
        let b = loss_and_grad(&model, &data, &opts, Some(&a.decisions)).unwrap();
        assert_eq!(a.total, b.total);
        assert_eq!(a.grads, b.grads);
    }

    #[test]
    fn disabling_final_del_zeroes_its_loss() {
        let model = Model::<f64>::new(cfg(), 8).unwrap();
        let opts = LossOptions {
            final_del: false,
            ..Default::default()
        };
        let out = loss_and_grad(&model, &batch(), &opts, None).unwrap();
        assert_eq!(out.losses.final_del, 0.0);
        assert!(out.losses.tok > 0.0);
    }
}
