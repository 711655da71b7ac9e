//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown or repeated keys are
//! rejected. Placement lists are comma-separated layer indices. Keys whose
//! defaults depend on other keys (`pruner_layers`, `adapter_layers`, `d_p`,
//! `d_b`) are resolved after the whole file is read, so [`RunConfig::to_text`]
//! always writes concrete values and re-parses to an equal config.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::adapter::AdapterConfig;
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::harness::{PretrainConfig, TaskConfig, TrainConfig};
use crate::objectives::{LossWeights, Schedules};
use crate::pruner::PrunerConfig;
use crate::rcp::{default_adapter_layers, default_pruner_layers, RcpConfig, Variant};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub backbone_seed: u64,
    pub output_dir: String,

    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,

    pub n_system: usize,
    pub n_vision: usize,
    pub n_question: usize,
    pub n_answer: usize,
    pub n_types: usize,
    pub n_values: usize,
    pub n_noise: usize,
    pub k_informative: usize,

    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,

    pub variant: Variant,
    pub target_retention: f64,
    pub pruner_layers: Vec<usize>,
    pub adapter_layers: Vec<usize>,
    pub n_queries: usize,
    pub d_p: usize,
    pub d_b: usize,
    pub query_dropout: f64,
    pub bias_init: f64,
    pub alpha_init: f64,

    pub train_examples: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_floor: f64,
    pub grad_clip: f64,
    pub lambda_task: f64,
    pub lambda_repair: f64,
    pub lambda_sparse: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    pub r_anneal_frac: f64,

    pub eval_examples: usize,
    pub bytes_per_element: usize,
}

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "seed",
    "backbone_seed",
    "output_dir",
    "n_layers",
    "d_model",
    "n_heads",
    "d_ff",
    "n_system",
    "n_vision",
    "n_question",
    "n_answer",
    "n_types",
    "n_values",
    "n_noise",
    "k_informative",
    "pretrain_steps",
    "pretrain_batch",
    "pretrain_lr",
    "variant",
    "target_retention",
    "pruner_layers",
    "adapter_layers",
    "n_queries",
    "d_p",
    "d_b",
    "query_dropout",
    "bias_init",
    "alpha_init",
    "train_examples",
    "batch_size",
    "lr",
    "lr_floor",
    "grad_clip",
    "lambda_task",
    "lambda_repair",
    "lambda_sparse",
    "tau_start",
    "tau_end",
    "r_anneal_frac",
    "eval_examples",
    "bytes_per_element",
];

const DERIVED: &[&str] = &["pruner_layers", "adapter_layers", "d_p", "d_b"];

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = Self {
            seed: 1,
            backbone_seed: 1,
            output_dir: "run".into(),
            n_layers: 8,
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            n_system: 1,
            n_vision: 36,
            n_question: 2,
            n_answer: 2,
            n_types: 3,
            n_values: 6,
            n_noise: 8,
            k_informative: 9,
            pretrain_steps: 1000,
            pretrain_batch: 24,
            pretrain_lr: 3e-3,
            variant: Variant::Full,
            target_retention: 0.11,
            pruner_layers: Vec::new(),
            adapter_layers: Vec::new(),
            n_queries: 16,
            d_p: 0,
            d_b: 0,
            query_dropout: 0.2,
            bias_init: 2.0,
            alpha_init: 1.0,
            train_examples: 10_000,
            batch_size: 24,
            lr: 0.02,
            lr_floor: 0.1,
            grad_clip: 1.0,
            lambda_task: 1.5,
            lambda_repair: 40.0,
            lambda_sparse: 200.0,
            tau_start: 1.5,
            tau_end: 0.2,
            r_anneal_frac: 0.3,
            eval_examples: 1000,
            bytes_per_element: 8,
        };
        c.resolve(&HashSet::new());
        c
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(key, format!("cannot parse {v:?}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    fn resolve(&mut self, given: &HashSet<String>) {
        if !given.contains("pruner_layers") {
            self.pruner_layers = default_pruner_layers(self.n_layers, self.target_retention);
        }
        if !given.contains("adapter_layers") {
            self.adapter_layers = default_adapter_layers(self.n_layers);
        }
        if !given.contains("d_p") {
            self.d_p = PrunerConfig::for_width(self.d_model).d_p;
        }
        if !given.contains("d_b") {
            self.d_b = AdapterConfig::for_width(self.d_model).d_b;
        }
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "backbone_seed" => self.backbone_seed = parse_num(key, v)?,
            "output_dir" => self.output_dir = v.to_string(),
            "n_layers" => self.n_layers = parse_num(key, v)?,
            "d_model" => self.d_model = parse_num(key, v)?,
            "n_heads" => self.n_heads = parse_num(key, v)?,
            "d_ff" => self.d_ff = parse_num(key, v)?,
            "n_system" => self.n_system = parse_num(key, v)?,
            "n_vision" => self.n_vision = parse_num(key, v)?,
            "n_question" => self.n_question = parse_num(key, v)?,
            "n_answer" => self.n_answer = parse_num(key, v)?,
            "n_types" => self.n_types = parse_num(key, v)?,
            "n_values" => self.n_values = parse_num(key, v)?,
            "n_noise" => self.n_noise = parse_num(key, v)?,
            "k_informative" => self.k_informative = parse_num(key, v)?,
            "pretrain_steps" => self.pretrain_steps = parse_num(key, v)?,
            "pretrain_batch" => self.pretrain_batch = parse_num(key, v)?,
            "pretrain_lr" => self.pretrain_lr = parse_num(key, v)?,
            "variant" => self.variant = Variant::parse(v)?,
            "target_retention" => self.target_retention = parse_num(key, v)?,
            "pruner_layers" => self.pruner_layers = parse_list(key, v)?,
            "adapter_layers" => self.adapter_layers = parse_list(key, v)?,
            "n_queries" => self.n_queries = parse_num(key, v)?,
            "d_p" => self.d_p = parse_num(key, v)?,
            "d_b" => self.d_b = parse_num(key, v)?,
            "query_dropout" => self.query_dropout = parse_num(key, v)?,
            "bias_init" => self.bias_init = parse_num(key, v)?,
            "alpha_init" => self.alpha_init = parse_num(key, v)?,
            "train_examples" => self.train_examples = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "lr_floor" => self.lr_floor = parse_num(key, v)?,
            "grad_clip" => self.grad_clip = parse_num(key, v)?,
            "lambda_task" => self.lambda_task = parse_num(key, v)?,
            "lambda_repair" => self.lambda_repair = parse_num(key, v)?,
            "lambda_sparse" => self.lambda_sparse = parse_num(key, v)?,
            "tau_start" => self.tau_start = parse_num(key, v)?,
            "tau_end" => self.tau_end = parse_num(key, v)?,
            "r_anneal_frac" => self.r_anneal_frac = parse_num(key, v)?,
            "eval_examples" => self.eval_examples = parse_num(key, v)?,
            "bytes_per_element" => self.bytes_per_element = parse_num(key, v)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults, then fills derived keys.
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with(text, &[])
    }

    /// Like [`RunConfig::parse`], with `overrides` applied after the file.
    pub fn parse_with(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut c = Self::default();
        let mut seen = HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", n + 1), "expected key = value"))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::config(k, "repeated key"));
            }
            c.set(k, v.trim())?;
        }
        for (k, v) in overrides {
            c.set(k, v)?;
            seen.insert(k.clone());
        }
        let derived: HashSet<String> = seen.into_iter().filter(|k| DERIVED.contains(&k.as_str())).collect();
        c.resolve(&derived);
        c.validate()?;
        Ok(c)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "backbone_seed" => self.backbone_seed.to_string(),
            "output_dir" => self.output_dir.clone(),
            "n_layers" => self.n_layers.to_string(),
            "d_model" => self.d_model.to_string(),
            "n_heads" => self.n_heads.to_string(),
            "d_ff" => self.d_ff.to_string(),
            "n_system" => self.n_system.to_string(),
            "n_vision" => self.n_vision.to_string(),
            "n_question" => self.n_question.to_string(),
            "n_answer" => self.n_answer.to_string(),
            "n_types" => self.n_types.to_string(),
            "n_values" => self.n_values.to_string(),
            "n_noise" => self.n_noise.to_string(),
            "k_informative" => self.k_informative.to_string(),
            "pretrain_steps" => self.pretrain_steps.to_string(),
            "pretrain_batch" => self.pretrain_batch.to_string(),
            "pretrain_lr" => self.pretrain_lr.to_string(),
            "variant" => self.variant.name().to_string(),
            "target_retention" => self.target_retention.to_string(),
            "pruner_layers" => join(&self.pruner_layers),
            "adapter_layers" => join(&self.adapter_layers),
            "n_queries" => self.n_queries.to_string(),
            "d_p" => self.d_p.to_string(),
            "d_b" => self.d_b.to_string(),
            "query_dropout" => self.query_dropout.to_string(),
            "bias_init" => self.bias_init.to_string(),
            "alpha_init" => self.alpha_init.to_string(),
            "train_examples" => self.train_examples.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr" => self.lr.to_string(),
            "lr_floor" => self.lr_floor.to_string(),
            "grad_clip" => self.grad_clip.to_string(),
            "lambda_task" => self.lambda_task.to_string(),
            "lambda_repair" => self.lambda_repair.to_string(),
            "lambda_sparse" => self.lambda_sparse.to_string(),
            "tau_start" => self.tau_start.to_string(),
            "tau_end" => self.tau_end.to_string(),
            "r_anneal_frac" => self.r_anneal_frac.to_string(),
            "eval_examples" => self.eval_examples.to_string(),
            "bytes_per_element" => self.bytes_per_element.to_string(),
            _ => return None,
        })
    }

    /// Fully resolved config, one key per line in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("listed key"));
        }
        s
    }

    pub fn backbone(&self) -> BackboneConfig {
        self.task().backbone_config(self.n_layers, self.d_model, self.n_heads, self.d_ff)
    }

    pub fn task(&self) -> TaskConfig {
        TaskConfig {
            n_system: self.n_system,
            n_vision: self.n_vision,
            n_question: self.n_question,
            n_answer: self.n_answer,
            n_types: self.n_types,
            n_values: self.n_values,
            n_noise: self.n_noise,
            k_informative: self.k_informative,
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.pretrain_steps,
            batch_size: self.pretrain_batch,
            lr: self.pretrain_lr,
            seed: self.backbone_seed,
        }
    }

    pub fn rcp(&self) -> RcpConfig {
        RcpConfig {
            pruner_layers: self.pruner_layers.clone(),
            adapter_layers: self.adapter_layers.clone(),
            pruner: PrunerConfig {
                n_queries: self.n_queries,
                d_p: self.d_p,
                bias_init: self.bias_init,
                query_dropout: self.query_dropout,
            },
            adapter: AdapterConfig {
                d_b: self.d_b,
                alpha_init: self.alpha_init,
            },
            variant: self.variant,
        }
    }

    pub fn train(&self) -> TrainConfig {
        let mut t = TrainConfig::one_epoch(self.train_examples, self.batch_size, self.target_retention, self.lr, self.seed);
        t.weights = LossWeights {
            task: self.lambda_task,
            repair: self.lambda_repair,
            sparse: self.lambda_sparse,
        };
        t.schedules = Schedules {
            tau_start: self.tau_start,
            tau_end: self.tau_end,
            r_anneal_frac: self.r_anneal_frac,
            lr_floor: self.lr_floor,
            ..t.schedules
        };
        t.grad_clip = self.grad_clip;
        t
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone().validate()?;
        self.task().validate()?;
        self.rcp().validate(self.n_layers)?;
        if self.pretrain_batch == 0 {
            return Err(Error::config("pretrain_batch", "must be positive"));
        }
        if self.train_examples == 0 {
            return Err(Error::config("train_examples", "must be positive"));
        }
        if self.bytes_per_element == 0 {
            return Err(Error::config("bytes_per_element", "must be positive"));
        }
        self.train().validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_placements() {
        let c = RunConfig::default();
        assert_eq!(c.pruner_layers, vec![0, 3, 6]);
        assert_eq!(c.adapter_layers, vec![5, 7]);
        assert_eq!((c.d_p, c.d_b), (16, 8));
        assert_eq!(c.train().steps, 417);
    }

    #[test]
    fn echo_round_trips() {
        let c = RunConfig::parse("target_retention = 0.33\nseed=7 # trailing\n\nvariant = topk\n").unwrap();
        assert_eq!(c.pruner_layers, vec![1, 3, 6]);
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn unknown_and_repeated_keys_are_rejected() {
        let e = RunConfig::parse("colour = blue").unwrap_err().to_string();
        assert!(e.contains("colour"), "{e}");
        assert!(RunConfig::parse("seed=1\nseed=2").is_err());
    }

    #[test]
    fn indivisible_heads_name_the_key() {
        let e = RunConfig::parse("d_model = 30").unwrap_err().to_string();
        assert!(e.contains("d_model"), "{e}");
    }
}
