//! Flat `key = value` run configuration with dotted keys.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tmlevt::decoder::InitMode;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    pub corpus: Option<String>,
    pub index: Option<String>,
    pub checkpoint: Option<String>,
    pub out_dir: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    pub k: usize,
    pub sim_min: f64,
    pub sim_max: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub high: usize,
    pub mid: usize,
    pub heldout: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Training {
    pub p_tm: f64,
    pub src_tm: bool,
    pub tgt_tm: bool,
    pub final_del: bool,
    pub self_pred: bool,
    /// Roll-in sampling passes over the training records.
    pub rounds: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub weights: [f64; 4],
    /// Write a loss line every this many steps.
    pub log_every: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelHyper {
    pub d_model: usize,
    pub heads: usize,
    pub ff: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub k_max: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decode {
    pub max_iter: usize,
    pub init_mode: InitMode,
    pub loop_detection: bool,
    /// Feed the best TM match to the model at all.
    pub use_tm: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalCfg {
    pub bucket_start: f64,
    pub bucket_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub deterministic: bool,
    pub threads: Option<usize>,
    pub paths: Paths,
    pub retrieval: Retrieval,
    pub split: Split,
    pub vocab_max_size: usize,
    pub training: Training,
    pub model: ModelHyper,
    pub decode: Decode,
    pub eval: EvalCfg,
    pub synth_n: usize,
    pub synth_grammar: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            deterministic: false,
            threads: None,
            paths: Paths {
                corpus: None,
                index: None,
                checkpoint: None,
                out_dir: None,
            },
            retrieval: Retrieval {
                k: 3,
                sim_min: 0.4,
                sim_max: 1.0,
                n: 3,
            },
            split: Split {
                high: 200,
                mid: 200,
                heldout: 200,
            },
            vocab_max_size: 512,
            training: Training {
                p_tm: 0.5,
                src_tm: true,
                tgt_tm: true,
                final_del: true,
                self_pred: true,
                rounds: 4,
                steps: 3000,
                batch_size: 32,
                lr: 1e-3,
                warmup: 300,
                weights: [1.0; 4],
                log_every: 1,
            },
            model: ModelHyper {
                d_model: 64,
                heads: 2,
                ff: 128,
                enc_layers: 2,
                dec_layers: 2,
                k_max: 64,
            },
            decode: Decode {
                max_iter: 10,
                init_mode: InitMode::Tm,
                loop_detection: true,
                use_tm: true,
            },
            eval: EvalCfg {
                bucket_start: 0.3,
                bucket_width: 0.1,
            },
            synth_n: 5000,
            synth_grammar: None,
        }
    }
}

fn bad(key: &str, value: &str, why: &str) -> CliError {
    CliError::Config(format!("{key} = {value}: {why}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value.parse().map_err(|_| bad(key, value, "not a number"))
}

fn flag(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(bad(key, value, "expected true or false")),
    }
}

fn path(value: &str) -> Option<String> {
    (!value.is_empty()).then(|| value.to_string())
}

impl RunConfig {
    /// Set one dotted key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = num(key, v)?,
            "deterministic" => self.deterministic = flag(key, v)?,
            "threads" => self.threads = Some(num(key, v)?),
            "paths.corpus" => self.paths.corpus = path(v),
            "paths.index" => self.paths.index = path(v),
            "paths.checkpoint" => self.paths.checkpoint = path(v),
            "paths.out_dir" => self.paths.out_dir = path(v),
            "retrieval.k" => self.retrieval.k = num(key, v)?,
            "retrieval.sim_min" => self.retrieval.sim_min = num(key, v)?,
            "retrieval.sim_max" => self.retrieval.sim_max = num(key, v)?,
            "retrieval.n" => self.retrieval.n = num(key, v)?,
            "split.high" => self.split.high = num(key, v)?,
            "split.mid" => self.split.mid = num(key, v)?,
            "split.heldout" => self.split.heldout = num(key, v)?,
            "vocab.max_size" => self.vocab_max_size = num(key, v)?,
            "training.p_tm" => self.training.p_tm = num(key, v)?,
            "training.src_tm" => self.training.src_tm = flag(key, v)?,
            "training.tgt_tm" => self.training.tgt_tm = flag(key, v)?,
            "training.final_del" => self.training.final_del = flag(key, v)?,
            "training.self_pred" => self.training.self_pred = flag(key, v)?,
            "training.rounds" => self.training.rounds = num(key, v)?,
            "training.steps" => self.training.steps = num(key, v)?,
            "training.batch_size" => self.training.batch_size = num(key, v)?,
            "training.lr" => self.training.lr = num(key, v)?,
            "training.warmup" => self.training.warmup = num(key, v)?,
            "training.log_every" => self.training.log_every = num(key, v)?,
            "training.weights" => {
                let w: Vec<f64> = v.split(',').map(|x| num(key, x.trim())).collect::<Result<_, _>>()?;
                self.training.weights = w.try_into().map_err(|_| bad(key, v, "expected four comma-separated weights"))?;
            }
            "model.d_model" => self.model.d_model = num(key, v)?,
            "model.heads" => self.model.heads = num(key, v)?,
            "model.ff" => self.model.ff = num(key, v)?,
            "model.enc_layers" => self.model.enc_layers = num(key, v)?,
            "model.dec_layers" => self.model.dec_layers = num(key, v)?,
            "model.k_max" => self.model.k_max = num(key, v)?,
            "decode.max_iter" => self.decode.max_iter = num(key, v)?,
            "decode.init_mode" => {
                self.decode.init_mode = InitMode::parse(v).ok_or_else(|| bad(key, v, "unknown init mode"))?
            }
            "decode.loop_detection" => self.decode.loop_detection = flag(key, v)?,
            "decode.use_tm" => self.decode.use_tm = flag(key, v)?,
            "eval.bucket_start" => self.eval.bucket_start = num(key, v)?,
            "eval.bucket_width" => self.eval.bucket_width = num(key, v)?,
            "synth.n" => self.synth_n = num(key, v)?,
            "synth.grammar" => self.synth_grammar = path(v),
            other => return Err(CliError::Config(format!("unknown key {other}"))),
        }
        Ok(())
    }

    /// Apply `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", no + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Defaults, then the optional file, then `key=value` overrides in order.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        if let Some(p) = file {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            cfg.apply_text(&text)?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override {o}: expected key=value")))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(CliError::Config(format!("{name} must lie in [0, 1], got {p}")))
            }
        };
        prob("training.p_tm", self.training.p_tm)?;
        prob("retrieval.sim_min", self.retrieval.sim_min)?;
        let checks = [
            (self.retrieval.k >= 1, "retrieval.k must be at least 1"),
            (self.retrieval.n >= 1, "retrieval.n must be at least 1"),
            (self.decode.max_iter >= 1, "decode.max_iter must be at least 1"),
            (self.training.batch_size >= 1, "training.batch_size must be at least 1"),
            (self.training.log_every >= 1, "training.log_every must be at least 1"),
            (self.retrieval.sim_max > self.retrieval.sim_min, "retrieval.sim_max must exceed sim_min"),
            (
                self.eval.bucket_width > 0.0 && (0.0..1.0).contains(&self.eval.bucket_start),
                "eval buckets need 0 <= start < 1 and a positive width",
            ),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(CliError::Config(msg.to_string()));
            }
        }
        Ok(())
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
