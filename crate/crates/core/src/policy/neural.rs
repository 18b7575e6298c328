//! The trained model as an edit policy.

use std::cell::RefCell;

use super::checkpoint::ModelFlags;
use super::model::{gap_rows, interior_rows, plh_rows, token_mask, Decoded, Encoded, Model};
use super::tensor::softmax_in_place;
use super::{interior, EditPolicy, PolicyError, PolicySession};
use crate::corpus::{TokenId, BOS_ID, EOS_ID};
use crate::edit_calculus::DeletionPredictor;

#[derive(Debug, Clone)]
pub struct NeuralPolicy {
    pub model: Model<f32>,
    pub flags: ModelFlags,
    mask: Vec<bool>,
}

impl NeuralPolicy {
    pub fn new(model: Model<f32>, flags: ModelFlags) -> Self {
        let mask = token_mask(model.cfg.vocab);
        Self { model, flags, mask }
    }

    fn softmax_rows(logits: &[f32], width: usize, mask: Option<&[bool]>) -> Vec<Vec<f64>> {
        logits
            .chunks_exact(width)
            .map(|row| {
                let mut r: Vec<f64> = row.iter().map(|&v| f64::from(v)).collect();
                softmax_in_place(&mut r, mask);
                r
            })
            .collect()
    }
}

struct NeuralSession<'a> {
    policy: &'a NeuralPolicy,
    enc: Encoded<f32>,
    last: RefCell<Option<(Vec<TokenId>, Decoded<f32>)>>,
}

impl NeuralSession<'_> {
    fn decoded(&self, target: &[TokenId]) -> Result<std::cell::Ref<'_, Decoded<f32>>, PolicyError> {
        interior(target)?;
        let hit = matches!(&*self.last.borrow(), Some((t, _)) if t == target);
        if !hit {
            let dec = self.policy.model.decode(&self.enc, &[target], &[0])?;
            *self.last.borrow_mut() = Some((target.to_vec(), dec));
        }
        Ok(std::cell::Ref::map(self.last.borrow(), |l| &l.as_ref().expect("just filled").1))
    }
}

impl PolicySession for NeuralSession<'_> {
    fn delete(&mut self, target: &[TokenId]) -> Result<Vec<f64>, PolicyError> {
        let dec = self.decoded(target)?;
        let rows = interior_rows(&dec.segs).remove(0);
        let logits = self.policy.model.del_logits(&dec.states, &rows);
        Ok(NeuralPolicy::softmax_rows(&logits, 2, None).into_iter().map(|p| p[1]).collect())
    }

    fn placeholders(&mut self, target: &[TokenId]) -> Result<Vec<Vec<f64>>, PolicyError> {
        let dec = self.decoded(target)?;
        let gaps = gap_rows(&dec.segs).remove(0);
        let logits = self.policy.model.plh_logits(&dec.states, &gaps);
        Ok(NeuralPolicy::softmax_rows(&logits, self.policy.model.cfg.k_max + 1, None))
    }

    fn tokens(&mut self, target: &[TokenId]) -> Result<Vec<Vec<f64>>, PolicyError> {
        let dec = self.decoded(target)?;
        let rows = plh_rows(dec.tokens(), &dec.segs).remove(0);
        let logits = self.policy.model.tok_logits(&dec.states, &rows);
        Ok(NeuralPolicy::softmax_rows(&logits, self.policy.model.cfg.vocab, Some(&self.policy.mask)))
    }

    fn sequence_score(&mut self, target: &[TokenId]) -> Result<f64, PolicyError> {
        let dec = self.decoded(target)?;
        let rows = interior_rows(&dec.segs).remove(0);
        if rows.is_empty() {
            // no token evidence, ranks below any scored sequence
            return Ok(f64::NEG_INFINITY);
        }
        let v = self.policy.model.cfg.vocab;
        let logits = self.policy.model.tok_logits(&dec.states, &rows);
        let dists = NeuralPolicy::softmax_rows(&logits, v, Some(&self.policy.mask));
        let total: f64 = rows
            .iter()
            .zip(&dists)
            .map(|(&r, d)| d[dec.tokens()[r] as usize].max(f64::MIN_POSITIVE).ln())
            .sum();
        Ok(total / rows.len() as f64)
    }
}

impl EditPolicy for NeuralPolicy {
    fn name(&self) -> &str {
        "neural"
    }

    fn k_max(&self) -> usize {
        self.model.cfg.k_max
    }

    fn session<'a>(
        &'a self,
        encoder_input: &[TokenId],
        _reference: Option<&[TokenId]>,
    ) -> Result<Box<dyn PolicySession + 'a>, PolicyError> {
        let enc = self.model.encode(&[encoder_input])?;
        Ok(Box::new(NeuralSession {
            policy: self,
            enc,
            last: RefCell::new(None),
        }))
    }
}

impl DeletionPredictor for NeuralPolicy {
    fn predict_deletions(&self, encoder_input: &[TokenId], y: &[TokenId]) -> Vec<bool> {
        let mut target = vec![BOS_ID];
        target.extend_from_slice(y);
        target.push(EOS_ID);
        self.session(encoder_input, None)
            .and_then(|mut s| s.delete(&target))
            .map(|p| p.into_iter().map(|p| p > 0.5).collect())
            .unwrap_or_else(|_| vec![false; y.len()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::PLH_ID;
    use crate::policy::model::ModelConfig;

    fn policy() -> NeuralPolicy {
        let cfg = ModelConfig {
            vocab: 14,
            d_model: 8,
            heads: 2,
            ff: 8,
            enc_layers: 1,
            dec_layers: 1,
            k_max: 5,
        };
        NeuralPolicy::new(Model::new(cfg, 2).unwrap(), ModelFlags::default())
    }

    #[test]
    fn distributions_are_normalized() {
        let p = policy();
        let mut s = p.session(&[6, 7, 8], None).unwrap();
        let out = s.forward(&[BOS_ID, 9, PLH_ID, 10, EOS_ID]).unwrap();
        assert_eq!(out.delete_scores.len(), 3);
        assert_eq!(out.plh_scores.len(), 4);
        assert_eq!(out.tok_scores.len(), 1);
        for d in out.plh_scores.iter().chain(&out.tok_scores) {
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        for id in [0usize, 1, 2, 4, 5] {
            assert_eq!(out.tok_scores[0][id], 0.0);
        }
        assert!(out.delete_scores.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn deletion_head_shared_across_calls() {
        let p = policy();
        let mut s = p.session(&[6, 7], None).unwrap();
        let t = [BOS_ID, 9, 10, EOS_ID];
        let a = s.delete(&t).unwrap();
        let b = s.delete(&t).unwrap();
        assert_eq!(a, b);
        assert_eq!(p.predict_deletions(&[6, 7], &[9, 10]), a.iter().map(|&x| x > 0.5).collect::<Vec<_>>());
    }
}
