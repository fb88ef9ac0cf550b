//! Shared fixtures for the acceptance suite. Each pretrained model is built
//! once per test binary and reused.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use tailrec::dataset::{
    build_sequences, extract_context_sets, partition_head_tail, split_leave_one_out, Catalog, ContextSet,
    Interaction, LeaveOneOutSplit, NegativePopularity, NegativeSampler, PopularityPartition,
};
use tailrec::eval::{build_cases, EvalCase, Target};
use tailrec::model::{ModelConfig, RecModel, Variant};
use tailrec::pretrain::{pretrain, PretrainConfig};
use tailrec::synthetic::{generate, SyntheticConfig};
use tailrec::tailinfer::{train_inference_function, window_sizes, InferenceConfig, InferenceFunction, TrainReport};

pub const TAU: f64 = 0.5;
pub const DIM: usize = 32;
pub const MODEL_SEED: u64 = 1;
pub const EVAL_SEED: u64 = 1;

/// Write one result line straight to the process stdout so it shows up
/// even when the harness captures test output.
pub fn verdict(criterion: &str, pass: bool, detail: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "[{}] {criterion}: {detail}", if pass { "PASS" } else { "FAIL" });
    let _ = out.flush();
}

pub struct Bench {
    pub interactions: Vec<Interaction>,
    pub catalog: Catalog,
    pub split: LeaveOneOutSplit,
    pub partition: PopularityPartition,
    pub val: Vec<EvalCase>,
    pub test: Vec<EvalCase>,
}

impl Bench {
    pub fn from_interactions(interactions: Vec<Interaction>) -> Self {
        let (mut catalog, seqs) = build_sequences(&interactions, 5).unwrap();
        let split = split_leave_one_out(&mut catalog, &seqs).unwrap();
        let partition = partition_head_tail(&catalog.train_popularity, TAU).unwrap();
        let sampler = NegativeSampler::new(&catalog, &split, NegativePopularity::Global);
        let val = build_cases(&split, &sampler, 100, 50, Target::Valid, EVAL_SEED).unwrap();
        let test = build_cases(&split, &sampler, 100, 50, Target::Test, EVAL_SEED).unwrap();
        Self { interactions, catalog, split, partition, val, test }
    }

    pub fn sets(&self, model: &RecModel, items: &[usize]) -> BTreeMap<usize, ContextSet> {
        let (l, r) = window_sizes(model.config());
        extract_context_sets(&self.split, items, l, r)
    }
}

/// The default synthetic long-tail corpus: 2,000 users, 500 items, Zipf
/// exponent 1.2, planted cluster-to-cluster transitions.
pub fn bench() -> &'static Bench {
    static B: OnceLock<Bench> = OnceLock::new();
    B.get_or_init(|| Bench::from_interactions(generate(&SyntheticConfig::default()).unwrap().interactions))
}

pub fn model_config(variant: Variant) -> ModelConfig {
    let mut mc = ModelConfig::new(variant, DIM, 50);
    mc.heads = 2;
    mc
}

pub fn pretrain_config(variant: Variant) -> PretrainConfig {
    let epochs = match variant {
        Variant::Gru => 40,
        Variant::Transformer => 60,
    };
    PretrainConfig { epochs, learning_rate: 5e-3, ..Default::default() }
}

pub fn train_recommender(bench: &Bench, variant: Variant) -> RecModel {
    let model = RecModel::new(model_config(variant), bench.catalog.len(), MODEL_SEED).unwrap();
    pretrain(model, &bench.split, &bench.val, &pretrain_config(variant), |_, _| {}).unwrap().0
}

pub struct Trained {
    pub model: RecModel,
    pub pretrain_time: Duration,
}

pub fn pretrained(variant: Variant) -> &'static Trained {
    static GRU: OnceLock<Trained> = OnceLock::new();
    static TRF: OnceLock<Trained> = OnceLock::new();
    let cell = match variant {
        Variant::Gru => &GRU,
        Variant::Transformer => &TRF,
    };
    cell.get_or_init(|| {
        let t0 = Instant::now();
        let model = train_recommender(bench(), variant);
        Trained { model, pretrain_time: t0.elapsed() }
    })
}

pub struct Fitted {
    pub f: InferenceFunction,
    pub report: TrainReport,
    pub time: Duration,
}

pub fn fit(model: &RecModel, bench: &Bench, cfg: &InferenceConfig, targets: &[usize]) -> Fitted {
    let t0 = Instant::now();
    let sets = bench.sets(model, targets);
    let (f, report) = train_inference_function(model, &sets, targets, cfg).unwrap();
    Fitted { f, report, time: t0.elapsed() }
}

/// Inference function with the default settings, fitted on every head item.
pub fn default_inference(variant: Variant) -> &'static Fitted {
    static GRU: OnceLock<Fitted> = OnceLock::new();
    static TRF: OnceLock<Fitted> = OnceLock::new();
    let cell = match variant {
        Variant::Gru => &GRU,
        Variant::Transformer => &TRF,
    };
    cell.get_or_init(|| {
        let b = bench();
        fit(&pretrained(variant).model, b, &InferenceConfig::default(), &b.partition.head_items())
    })
}
