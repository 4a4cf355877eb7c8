#![allow(dead_code)]

use plus_autodiff::{Distribution, Scalar, Tape, Tensor, Var};
use plus_core::config::{ModelConfig, Precision, RunConfig};
use plus_core::dataset::plan_dataset;
use plus_core::encoders::EncoderConfig;
use plus_core::hda::HdaConfig;
use plus_core::model::Model;
use plus_core::phantom::{generate_case, GeneratorSpec, PatientCase};
use plus_core::pipeline::{prepare_case, priors_for, PreparedCase};

pub fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

pub fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::random(shape, seed, Distribution::Uniform { low: -1.0, high: 1.0 }).unwrap()
}

/// Contracts `y` against fixed random weights so every entry matters.
pub fn probe<T: Scalar>(tape: &Tape<T>, y: Var, seed: u64) -> plus_autodiff::Result<Var> {
    let shape = tape.shape(y);
    let w = tape.constant(rand_t(&shape, seed ^ 0x5eed).cast());
    tape.sum_all(tape.mul(y, w)?)
}

/// A model small enough for gradient checks and quick training runs.
pub fn tiny_model(dim: usize) -> ModelConfig {
    ModelConfig {
        dim,
        heads: 2,
        encoder: EncoderConfig {
            widths: vec![4, dim],
            strides: vec![2, 2],
            liver_grid: [16, 16, 8],
            roi: [16, 16, 4],
            lesion_tokens: [2, 2, 1],
        },
        hda: HdaConfig { grids: vec![[1, 1, 1], [2, 2, 1], [4, 4, 2]], ..Default::default() },
        ..Default::default()
    }
}

pub fn tiny_run(precision: Precision) -> RunConfig {
    let mut cfg = RunConfig { model: tiny_model(8), precision, ..Default::default() };
    cfg.optimizer.epochs = 1;
    cfg.optimizer.base_lr = 1e-3;
    cfg
}

/// Smaller phantoms with the default class structure.
pub fn small_spec() -> GeneratorSpec {
    GeneratorSpec { dims: [64, 64, 32], lesion_radius: [4.0, 6.0], ..Default::default() }
}

pub fn cases(spec: &GeneratorSpec, n: usize, seed: u64) -> Vec<(&'static str, PatientCase)> {
    plan_dataset(n, seed, spec)
        .into_iter()
        .map(|(split, s)| (split, generate_case(s, spec).unwrap()))
        .collect()
}

/// Prepared train/val/test cases generated in memory.
pub struct Splits<T> {
    pub train: Vec<PreparedCase<T>>,
    pub val: Vec<PreparedCase<T>>,
    pub test: Vec<PreparedCase<T>>,
}

pub fn prepared_splits<T: Scalar>(model: &Model, cfg: &RunConfig, spec: &GeneratorSpec, n: usize, seed: u64) -> Splits<T> {
    let mut out = Splits { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for (split, s) in plan_dataset(n, seed, spec) {
        let case = generate_case(s, spec).unwrap();
        let prior_seed = if split == "train" { cfg.seeds.train_priors } else { cfg.seeds.eval_priors };
        let priors = priors_for(&case, cfg, prior_seed).unwrap();
        let prepared = prepare_case(model, cfg, &case, &priors).unwrap();
        match split {
            "train" => out.train.push(prepared),
            "val" => out.val.push(prepared),
            _ => out.test.push(prepared),
        }
    }
    out
}
