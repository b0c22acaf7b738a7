//! Self-contained invariant suites behind `lora-lego verify`.
//!
//! Output contains no timings so the transcript is identical for a given seed.

use std::fmt;

use anyhow::Result;

use lora_lego::harness::variance_sweep;
use lora_lego::merge::{ensemble_merge, lego_merge, prune_lora};
use lora_lego::msu::{adapter_delta, delta_weight, ensure_folded, permute_layer};
use lora_lego::{LoraAdapter, Matrix, MergeOptions, Permutation, Rng};

use crate::{load, max_delta_diff, permuted_adapter, random_layer, VerifyArgs};

/// Marker error: a suite failed and its line has already been printed.
#[derive(Debug)]
pub struct Failed;

impl fmt::Display for Failed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("verification failed")
    }
}

impl std::error::Error for Failed {}

struct Failure {
    seed: u64,
    detail: String,
}

type SuiteResult = std::result::Result<String, Failure>;
type Suite = (&'static str, fn(u64) -> SuiteResult);

fn instance_seed(seed: u64, suite: u64, i: u64) -> u64 {
    Rng::derive(seed, (suite << 32) | i).next_u64()
}

fn fail(seed: u64, detail: impl Into<String>) -> Failure {
    Failure { seed, detail: detail.into() }
}

fn permutation_suite(seed: u64) -> SuiteResult {
    let mut worst = 0.0f64;
    for i in 0..200 {
        let s = instance_seed(seed, 1, i);
        let mut rng = Rng::new(s);
        let (d_in, d_out, r) = (1 + rng.below(32), 1 + rng.below(32), 1 + rng.below(12));
        let layer = random_layer(&mut rng, d_in, d_out, r);
        let permuted = permute_layer(&layer, &Permutation::random(r, &mut rng)).map_err(|e| fail(s, e.to_string()))?;
        let diff = delta_weight(&permuted, 1.0).max_abs_diff(&delta_weight(&layer, 1.0)).map_err(|e| fail(s, e.to_string()))?;
        if diff >= 1e-12 {
            return Err(fail(s, format!("max |dW' - dW| = {diff:e}")));
        }
        worst = worst.max(diff);
    }
    Ok(format!("200 instances, worst {worst:.1e}"))
}

fn concat_suite(seed: u64) -> SuiteResult {
    let mut worst = 0.0f64;
    for i in 0..100 {
        let s = instance_seed(seed, 2, i);
        let mut rng = Rng::new(s);
        let n = 2 + rng.below(4);
        let (d_in, d_out) = (1 + rng.below(24), 1 + rng.below(24));
        let adapters: Vec<LoraAdapter> = (0..n)
            .map(|j| {
                let r = 1 + rng.below(8);
                let layers = [(PATH.to_string(), random_layer(&mut rng, d_in, d_out, r))].into();
                LoraAdapter::new(format!("a{j}"), layers, 1.0 + rng.uniform() * 15.0, r).expect("valid adapter")
            })
            .collect();
        let merged = ensemble_merge(&adapters).map_err(|e| fail(s, e.to_string()))?;
        let mut mean = Matrix::zeros(d_out, d_in);
        for a in &adapters {
            mean = mean.add(&adapter_delta(a, PATH).unwrap().scale(1.0 / n as f64)).expect("same shape");
        }
        let diff = adapter_delta(&merged, PATH).unwrap().max_abs_diff(&mean).expect("same shape");
        if diff >= 1e-12 {
            return Err(fail(s, format!("ensemble differs from mean dW by {diff:e}")));
        }
        worst = worst.max(diff);
    }
    Ok(format!("100 pools, worst {worst:.1e}"))
}

const PATH: &str = "layer";

fn self_merge_on(adapter: &LoraAdapter, s: u64) -> std::result::Result<f64, Failure> {
    let opts = MergeOptions::default().with_k(adapter.rank).with_seed(s);
    let folded = ensure_folded(adapter);
    let (merged, _) = lego_merge(std::slice::from_ref(adapter), &opts).map_err(|e| fail(s, e.to_string()))?;
    let (pruned, _) = prune_lora(adapter, adapter.rank, &opts).map_err(|e| fail(s, e.to_string()))?;
    let scale = adapter
        .layers
        .keys()
        .filter_map(|p| adapter_delta(&folded, p))
        .map(|d| d.max_abs())
        .fold(1.0, f64::max);
    let diff = max_delta_diff(&folded, &merged).max(max_delta_diff(&folded, &pruned));
    if diff >= 1e-9 * scale {
        return Err(fail(s, format!("self-merge changed dW by {diff:e}")));
    }
    Ok(diff)
}

fn self_merge_suite(seed: u64) -> SuiteResult {
    let mut worst = 0.0f64;
    for i in 0..20 {
        let s = instance_seed(seed, 3, i);
        let mut rng = Rng::new(s);
        let layers = [(PATH.to_string(), random_layer(&mut rng, 32, 32, 8))].into();
        let adapter = LoraAdapter::new("self", layers, 1.0 + rng.uniform() * 31.0, 8).expect("valid adapter");
        worst = worst.max(self_merge_on(&adapter, s)?);
    }
    Ok(format!("20 adapters, worst {worst:.1e}"))
}

fn variance_suite(seed: u64) -> SuiteResult {
    let s = instance_seed(seed, 4, 0);
    let report = variance_sweep(64, 8, &[8, 16, 32], 25, &mut Rng::new(s)).map_err(|e| fail(s, e.to_string()))?;
    let ks = report.column_f64("k");
    let raw = report.column_f64("raw_over_k");
    let scaled = report.column_f64("scaled_over_r");
    for i in 0..ks.len() {
        if (raw[i] - 1.0).abs() > 0.1 {
            return Err(fail(s, format!("k={}: raw variance / k = {:.4}", ks[i], raw[i])));
        }
        if (scaled[i] - 1.0).abs() > 0.1 {
            return Err(fail(s, format!("k={}: scaled variance / r = {:.4}", ks[i], scaled[i])));
        }
    }
    let summary: Vec<String> = ks.iter().zip(&scaled).map(|(k, v)| format!("k={k} scaled/r={v:.3}")).collect();
    Ok(summary.join(", "))
}

fn adapter_suite(adapter: &LoraAdapter, seed: u64) -> SuiteResult {
    let s = instance_seed(seed, 5, 0);
    let permuted = permuted_adapter(adapter, &mut Rng::new(s)).map_err(|e| fail(s, e.to_string()))?;
    let scale = adapter
        .layers
        .keys()
        .filter_map(|p| adapter_delta(adapter, p))
        .map(|d| d.max_abs())
        .fold(1.0, f64::max);
    let perm_diff = max_delta_diff(adapter, &permuted);
    if perm_diff >= 1e-12 * scale {
        return Err(fail(s, format!("permuting ranks changed dW by {perm_diff:e}")));
    }
    let merge_diff = self_merge_on(adapter, s)?;
    Ok(format!("{} layers, permutation {perm_diff:.1e}, self-merge {merge_diff:.1e}", adapter.layers.len()))
}

pub fn cmd_verify(args: &VerifyArgs) -> Result<()> {
    let suites: [Suite; 4] = [
        ("permutation-invariance", permutation_suite),
        ("concat-summation", concat_suite),
        ("self-merge", self_merge_suite),
        ("variance", variance_suite),
    ];
    let mut results: Vec<(String, SuiteResult)> =
        suites.iter().map(|(name, suite)| (name.to_string(), suite(args.seed))).collect();
    if let Some(path) = &args.adapter {
        let adapter = load(path, false)?;
        results.push((format!("adapter {}", adapter.name), adapter_suite(&adapter, args.seed)));
    }
    println!("verify seed {}", args.seed);
    let mut failed = 0;
    for (name, result) in &results {
        match result {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(f) => {
                failed += 1;
                println!("FAIL {name}: {} (instance seed {})", f.detail, f.seed);
            }
        }
    }
    println!("{} of {} suites passed", results.len() - failed, results.len());
    if failed > 0 {
        return Err(Failed.into());
    }
    Ok(())
}
