//! The Dyck experiment end to end: splits, training of a pushdown and a
//! base model under one configuration, and the evaluation suite.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decode::{best_parse, BeamConfig, BeamMode};
use crate::dyck::{
    build_depth_gen_split, build_longrange_split, dyck_gold_tree, longrange_max_len, sample_dyck,
    DyckError, DyckSpec, DyckString, LongRangeItem,
};
use crate::eval::{
    closing_accuracy, depth_items, longrange_items, unlabeled_f1, ClosingReport, F1Result, TapeMode,
};
use crate::model::{Mode, ModelConfig, ModelError, PushdownModel};
use crate::train::{train, validate, Schedule, TrainConfig, TrainError, TrainOutputs, TrainReport};
use crate::treebank::Sequence;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Dyck(#[from] DyckError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DyckExperiment {
    /// Training distribution; validation and test share it.
    pub spec: DyckSpec,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    pub depth_range: (usize, usize),
    pub depth_count: usize,
    pub longrange_targets: Vec<usize>,
    pub longrange_count: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub ff_mult: usize,
    /// Rows in the depth embedding tables (deeper values clamp).
    pub table_depth: usize,
    pub train: TrainConfig,
}

impl Default for DyckExperiment {
    /// Dyck with 8 bracket types and depth 6, 6-layer models. Training
    /// strings are at most 40 tokens, so every long-range target lies beyond
    /// any distance seen in training.
    fn default() -> Self {
        Self {
            spec: DyckSpec {
                num_types: 8,
                max_depth: 6,
                open_prob: 0.49,
                min_len: 4,
                max_len: 40,
                seed: 1,
            },
            train_count: 20_000,
            val_count: 500,
            test_count: 200,
            depth_range: (8, 12),
            depth_count: 200,
            longrange_targets: vec![40, 44, 48],
            longrange_count: 100,
            layers: 6,
            heads: 4,
            d_model: 32,
            ff_mult: 2,
            table_depth: 32,
            train: TrainConfig {
                batch_size: 32,
                steps: 1500,
                warmup: 100,
                lr: 2e-3,
                schedule: Schedule::Cosine,
                eval_every: 250,
                ..TrainConfig::default()
            },
        }
    }
}

pub struct DyckData {
    pub train: Vec<DyckString>,
    pub val: Vec<DyckString>,
    pub test: Vec<DyckString>,
    pub depth_gen: Vec<DyckString>,
    pub longrange: Vec<LongRangeItem>,
}

impl DyckData {
    pub fn sequences(strings: &[DyckString]) -> Vec<Sequence> {
        strings.iter().map(DyckString::to_sequence).collect()
    }
}

impl DyckExperiment {
    pub fn vocab_size(&self) -> usize {
        2 + 2 * self.spec.num_types
    }

    /// All splits, derived from `spec.seed`. Held-out sets skip strings
    /// that occur in training.
    pub fn build_data(&self) -> Result<DyckData, ExperimentError> {
        let seed = self.spec.seed;
        let with_seed = |s: u64| DyckSpec {
            seed: s,
            ..self.spec.clone()
        };
        let train = sample_dyck(&with_seed(seed), self.train_count)?;
        let seen: HashSet<u64> = train.iter().map(DyckString::hash64).collect();
        let held_out = |s: u64, n: usize| -> Result<Vec<DyckString>, DyckError> {
            let mut out = sample_dyck(&with_seed(s), n * 2)?;
            out.retain(|x| !seen.contains(&x.hash64()));
            out.truncate(n);
            Ok(out)
        };
        let val = held_out(seed.wrapping_add(1), self.val_count)?;
        let test = held_out(seed.wrapping_add(2), self.test_count)?;
        let (lo, hi) = self.depth_range;
        let depth_gen =
            build_depth_gen_split(&self.spec, lo..=hi, self.depth_count, seed.wrapping_add(3))?;
        let longrange = build_longrange_split(
            &self.spec,
            &self.longrange_targets,
            self.longrange_count,
            seed.wrapping_add(4),
            &seen,
        )?;
        Ok(DyckData {
            train,
            val,
            test,
            depth_gen,
            longrange,
        })
    }

    /// Sequence length (with ROOT and EOS) the models must accept, covering
    /// the longest long-range string.
    pub fn max_positions(&self) -> usize {
        self.spec
            .max_len
            .max(longrange_max_len(&self.spec, &self.longrange_targets))
            + 2
    }

    pub fn model_config(&self, mode: Mode) -> ModelConfig {
        let mut c = ModelConfig::pushdown(
            self.layers,
            self.heads,
            self.d_model,
            self.vocab_size(),
            self.max_positions(),
            self.table_depth,
        );
        c.ff_mult = self.ff_mult;
        c.with_mode(mode)
    }

    /// Trains one model from scratch; `seed` drives both the initialization
    /// and the batch order.
    pub fn train_model(
        &self,
        data: &DyckData,
        mode: Mode,
        seed: u64,
        out: &TrainOutputs,
    ) -> Result<(PushdownModel, TrainReport), ExperimentError> {
        let mut model = PushdownModel::new(self.model_config(mode), seed)?;
        let cfg = TrainConfig {
            seed,
            ..self.train.clone()
        };
        let report = train(
            &mut model,
            &DyckData::sequences(&data.train),
            &DyckData::sequences(&data.val),
            &cfg,
            out,
        )?;
        Ok((model, report))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DyckScores {
    pub depth_gen: ClosingReport,
    pub longrange: ClosingReport,
    pub val_perplexity: f64,
}

/// Closing accuracy on both generalization splits plus validation
/// perplexity.
pub fn score_model(
    model: &PushdownModel,
    exp: &DyckExperiment,
    data: &DyckData,
    mode: TapeMode,
) -> Result<DyckScores, ExperimentError> {
    let k = exp.spec.num_types;
    let (depth_gen, _) = closing_accuracy(model, "depth", &depth_items(&data.depth_gen), k, mode)?;
    let (longrange, _) = closing_accuracy(
        model,
        "longrange",
        &longrange_items(&data.longrange),
        k,
        mode,
    )?;
    let val_perplexity =
        validate(model, &DyckData::sequences(&data.val), exp.train.batch_size)?.perplexity;
    Ok(DyckScores {
        depth_gen,
        longrange,
        val_perplexity,
    })
}

/// Micro-averaged unlabeled F1 of beam parses against gold Dyck trees.
pub fn parse_f1(
    model: &PushdownModel,
    strings: &[DyckString],
    width: usize,
) -> Result<F1Result, ExperimentError> {
    let cfg = BeamConfig {
        mode: BeamMode::Parse,
        ..BeamConfig::width(width)
    };
    let mut total = F1Result::default();
    for s in strings {
        let pred = best_parse(model, &s.ids(), &cfg)?;
        total.add(unlabeled_f1(&pred, &dyck_gold_tree(s)));
    }
    Ok(total)
}

/// Writes `metrics.csv` and `best.ckpt` under `dir` when given.
pub fn outputs_in(dir: Option<&Path>, verbose: bool) -> TrainOutputs {
    TrainOutputs {
        metrics_csv: dir.map(|d| d.join("metrics.csv")),
        best_checkpoint: dir.map(|d| d.join("best.ckpt")),
        last_checkpoint: dir.map(|d| d.join("last.ckpt")),
        diagnostic: dir.map(|d| d.join("diagnostic.json")),
        vocab: None,
        verbose,
    }
}
