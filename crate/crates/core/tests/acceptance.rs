//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! Run with `cargo test -p lora-lego --test acceptance`.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use lora_lego::adapter::{load_adapter, save_adapter, SaveDtype, WEIGHTS_FILE};
use lora_lego::cluster::{brute_force_cluster, kmeans};
use lora_lego::harness::{conflict_experiment, gen_synthetic_adapter, misalignment_errors, norm_decay_report, variance_sweep, Init};
use lora_lego::merge::{ensemble_merge, lego_merge, prune_lora, weight_average};
use lora_lego::msu::{adapter_delta, delta_weight, permute_layer};
use lora_lego::{Error, KmeansConfig, LoraAdapter, LoraLayer, Matrix, MergeOptions, Permutation, Rng};

type Outcome = Result<String, String>;

struct Criterion {
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn main() -> ExitCode {
    let criteria = [
        Criterion { name: "permutation invariance", budget: secs(5), run: permutation_invariance },
        Criterion { name: "concatenation equals summation", budget: secs(5), run: concat_summation },
        Criterion { name: "self-merge identity", budget: secs(30), run: self_merge_identity },
        Criterion { name: "misalignment fix", budget: secs(60), run: misalignment_fix },
        Criterion { name: "output reweighting variance", budget: secs(60), run: variance_equalization },
        Criterion { name: "norm decay", budget: secs(30), run: norm_decay },
        Criterion { name: "clustering oracle", budget: secs(30), run: clustering_oracle },
        Criterion { name: "knowledge conflict", budget: secs(30), run: knowledge_conflict },
        Criterion { name: "heterogeneous ranks", budget: secs(5), run: heterogeneous_ranks },
        Criterion { name: "file round trip", budget: secs(10), run: file_round_trip },
    ];
    let mut failed = 0;
    for (i, c) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = (c.run)();
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > c.budget => Err(format!("{detail}; over budget ({:.1}s)", c.budget.as_secs_f64())),
            other => other,
        };
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {:>2} {:<32} {:>7.2}s  {detail}", i + 1, c.name, elapsed.as_secs_f64());
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: Error) -> String {
    e.to_string()
}

fn random_adapter(rng: &mut Rng, d_in: usize, d_out: usize, r: usize) -> LoraAdapter {
    gen_synthetic_adapter(d_in, d_out, r, rng, Init::Gaussian).expect("valid dims")
}

fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

fn permutation_invariance() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..1000u64 {
        let mut rng = Rng::new(seed);
        let (d_in, d_out, r) = (dim(&mut rng, 1, 32), dim(&mut rng, 1, 32), dim(&mut rng, 1, 12));
        let layer = LoraLayer::new(Matrix::gaussian(r, d_in, &mut rng), Matrix::gaussian(d_out, r, &mut rng)).map_err(err)?;
        let p = Permutation::random(r, &mut rng);
        let permuted = permute_layer(&layer, &p).map_err(err)?;
        let diff = delta_weight(&permuted, 1.0).max_abs_diff(&delta_weight(&layer, 1.0)).map_err(err)?;
        check(diff < 1e-12, || format!("seed {seed}: max diff {diff:e}"))?;
        worst = worst.max(diff);
    }
    Ok(format!("1000 instances, worst {worst:.1e}"))
}

fn concat_summation() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..500u64 {
        let mut rng = Rng::new(10_000 + seed);
        let n = dim(&mut rng, 2, 5);
        let (d_in, d_out) = (dim(&mut rng, 1, 24), dim(&mut rng, 1, 24));
        let adapters: Vec<LoraAdapter> = (0..n)
            .map(|j| {
                let r = dim(&mut rng, 1, 8);
                let mut a = random_adapter(&mut rng, d_in, d_out, r);
                a.name = format!("a{j}");
                a.alpha = 0.5 + rng.uniform() * 16.0;
                a
            })
            .collect();
        let merged = ensemble_merge(&adapters).map_err(err)?;
        let path = lora_lego::harness::SYNTHETIC_LAYER;
        let mut mean = Matrix::zeros(d_out, d_in);
        for a in &adapters {
            mean = mean.add(&adapter_delta(a, path).unwrap().scale(1.0 / n as f64)).map_err(err)?;
        }
        let diff = adapter_delta(&merged, path).unwrap().max_abs_diff(&mean).map_err(err)?;
        check(diff < 1e-12, || format!("seed {seed}: max diff {diff:e}"))?;
        worst = worst.max(diff);
    }
    Ok(format!("500 pools, worst {worst:.1e}"))
}

fn self_merge_identity() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = Rng::new(20_000 + seed);
        let mut adapter = random_adapter(&mut rng, 64, 64, 8);
        adapter.alpha = 1.0 + rng.uniform() * 31.0;
        let truth = adapter_delta(&adapter, lora_lego::harness::SYNTHETIC_LAYER).unwrap();
        let opts = MergeOptions::default().with_k(8).with_seed(seed);
        let (merged, _) = lego_merge(std::slice::from_ref(&adapter), &opts).map_err(err)?;
        let (pruned, _) = prune_lora(&adapter, 8, &opts).map_err(err)?;
        for (what, out) in [("merge", &merged), ("prune", &pruned)] {
            let diff = adapter_delta(out, lora_lego::harness::SYNTHETIC_LAYER)
                .unwrap()
                .max_abs_diff(&truth)
                .map_err(err)?;
            check(diff < 1e-9, || format!("seed {seed} {what}: max diff {diff:e}"))?;
            worst = worst.max(diff);
        }
    }
    Ok(format!("100 adapters, worst {worst:.1e}"))
}

fn misalignment_fix() -> Outcome {
    let mut avg_bad = 0;
    let mut worst_lego = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = Rng::new(30_000 + seed);
        let adapter = random_adapter(&mut rng, 64, 64, 8);
        let perms = adapter
            .layers
            .keys()
            .map(|p| (p.clone(), Permutation::random_non_identity(8, &mut rng)))
            .collect::<BTreeMap<_, _>>();
        let errors = misalignment_errors(&adapter, &perms, seed).map_err(err)?;
        for e in errors.values() {
            if e.e_avg > 0.05 {
                avg_bad += 1;
            }
            check(e.e_lego < 1e-9, || format!("seed {seed}: lego error {:e}", e.e_lego))?;
            worst_lego = worst_lego.max(e.e_lego);
        }
    }
    check(avg_bad >= 95, || format!("averaging exceeded 0.05 in only {avg_bad}/100 seeds"))?;
    Ok(format!("averaging > 0.05 in {avg_bad}/100, lego worst {worst_lego:.1e}"))
}

fn variance_equalization() -> Outcome {
    let (p, r) = (64, 8);
    let report = variance_sweep(p, r, &[8, 16, 32], 30, &mut Rng::new(40_000)).map_err(err)?;
    let ks = report.column_f64("k");
    let raw = report.column_f64("raw_over_k");
    let scaled = report.column_f64("scaled_over_r");
    let samples = report.column_f64("samples");
    let mut parts = Vec::new();
    for i in 0..ks.len() {
        check(samples[i] >= 1e5, || format!("k={}: only {} samples", ks[i], samples[i]))?;
        check((raw[i] - 1.0).abs() <= 0.1, || format!("k={}: raw variance / k = {:.4}", ks[i], raw[i]))?;
        check((scaled[i] - 1.0).abs() <= 0.1, || format!("k={}: scaled variance / r = {:.4}", ks[i], scaled[i]))?;
        parts.push(format!("k={} raw/k={:.3} scaled/r={:.3}", ks[i], raw[i], scaled[i]));
    }
    Ok(parts.join(", "))
}

fn norm_decay() -> Outcome {
    let mut clusters = 0;
    let mut worst_inf = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = Rng::new(50_000 + seed);
        let n = dim(&mut rng, 2, 4);
        let (d_in, d_out, r) = (dim(&mut rng, 2, 32), dim(&mut rng, 2, 32), dim(&mut rng, 1, 8));
        let adapters: Vec<LoraAdapter> = (0..n)
            .map(|j| {
                let mut a = random_adapter(&mut rng, d_in, d_out, r);
                a.name = format!("a{j}");
                a
            })
            .collect();
        let k = dim(&mut rng, 1, n * r);
        let report = norm_decay_report(&adapters, k, &mut rng).map_err(|e| format!("seed {seed}: {e}"))?;
        let holds = report.column("l2_holds").unwrap();
        check(holds.iter().all(|c| c.as_bool() == Some(true)), || format!("seed {seed}: L2 inequality violated"))?;
        let (got, want) = (report.column_f64("reweighted_inf"), report.column_f64("mean_member_inf"));
        for (g, w) in got.iter().zip(&want) {
            let diff = (g - w).abs();
            check(diff <= 1e-12, || format!("seed {seed}: reweighted inf-norm off by {diff:e}"))?;
            worst_inf = worst_inf.max(diff);
        }
        clusters += got.len();
    }
    Ok(format!("{clusters} clusters, inf-norm worst {worst_inf:.1e}"))
}

fn clustering_oracle() -> Outcome {
    let mut worst = 1.0f64;
    for seed in 0..50u64 {
        let mut rng = Rng::new(60_000 + seed);
        let n = dim(&mut rng, 1, 8);
        let k = dim(&mut rng, 1, 3.min(n));
        let d = dim(&mut rng, 1, 4);
        let points: Vec<Vec<f64>> = (0..n).map(|_| rng.sample_gaussian(d)).collect();
        let cfg = KmeansConfig::new(k).with_seed(seed).with_n_init(20);
        let km = kmeans(&points, &cfg).map_err(err)?;
        let bf = brute_force_cluster(&points, k).map_err(err)?;
        check(km.inertia <= 1.001 * bf.inertia + 1e-12, || {
            format!("seed {seed}: kmeans {} vs optimum {}", km.inertia, bf.inertia)
        })?;
        if bf.inertia > 0.0 {
            worst = worst.max(km.inertia / bf.inertia);
        }
    }
    Ok(format!("50 instances, worst ratio {worst:.6}"))
}

fn knowledge_conflict() -> Outcome {
    let mut worst_lego = 0.0f64;
    let mut best_avg = f64::INFINITY;
    for seed in 0..50u64 {
        let mut rng = Rng::new(70_000 + seed);
        let report = conflict_experiment(32, 24, 6, &mut rng).map_err(err)?;
        let methods = report.column("method").unwrap();
        let idx = |m: &str| methods.iter().position(|c| matches!(c, lora_lego::harness::Cell::Text(t) if t == m)).unwrap();
        let (ea, eb) = (report.column_f64("e_task_a"), report.column_f64("e_task_b"));
        let (l, a) = (idx("lego"), idx("average"));
        check(ea[l] < 1e-9 && eb[l] < 1e-9, || format!("seed {seed}: lego errors {:e}, {:e}", ea[l], eb[l]))?;
        check(ea[a] > 0.05 && eb[a] > 0.05, || format!("seed {seed}: averaging errors {}, {}", ea[a], eb[a]))?;
        worst_lego = worst_lego.max(ea[l]).max(eb[l]);
        best_avg = best_avg.min(ea[a]).min(eb[a]);
    }
    Ok(format!("50 seeds, lego worst {worst_lego:.1e}, averaging least {best_avg:.3}"))
}

fn heterogeneous_ranks() -> Outcome {
    let mut rng = Rng::new(80_000);
    let mut a = random_adapter(&mut rng, 32, 48, 6);
    a.name = "r6".into();
    let mut b = random_adapter(&mut rng, 32, 48, 16);
    b.name = "r16".into();
    b.alpha = 32.0;
    let pair = [a, b];
    for k in 1..=22 {
        let (merged, _) = lego_merge(&pair, &MergeOptions::default().with_k(k).with_seed(k as u64))
            .map_err(|e| format!("k={k}: {e}"))?;
        merged.validate().map_err(|e| format!("k={k}: {e}"))?;
        let layer = &merged.layers[lora_lego::harness::SYNTHETIC_LAYER];
        check(merged.rank == k && layer.rank() == k && layer.dims() == (32, 48), || {
            format!("k={k}: merged rank {} dims {:?}", merged.rank, layer.dims())
        })?;
    }
    match weight_average(&pair) {
        Err(Error::RankMismatch(msg)) if msg.contains('6') && msg.contains("16") => {}
        other => return Err(format!("weight_average should fail with a rank mismatch, got {other:?}")),
    }
    Ok("k = 1..22 valid, averaging rejected".into())
}

fn file_round_trip() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for seed in 0..100u64 {
        let mut rng = Rng::new(90_000 + seed);
        let n_layers = dim(&mut rng, 1, 3);
        let paths: Vec<String> = (0..n_layers).map(|i| format!("model.layers.{i}.self_attn.q_proj")).collect();
        let refs: Vec<&str> = paths.iter().map(String::as_str).collect();
        let (d_in, d_out, r) = (dim(&mut rng, 1, 48), dim(&mut rng, 1, 48), dim(&mut rng, 1, 8));
        let mut adapter: LoraAdapter =
            lora_lego::harness::gen_synthetic_adapter_layers(&refs, d_in, d_out, r, &mut rng, Init::Gaussian).map_err(err)?;
        adapter.alpha = 1.0 + rng.below(64) as f64;
        adapter.target_modules = vec!["q_proj".into()];

        let first = dir.path().join(format!("{seed}-a"));
        let second = dir.path().join(format!("{seed}-b"));
        save_adapter(&adapter, &first, SaveDtype::F32).map_err(err)?;
        let loaded: LoraAdapter = load_adapter(&first).map_err(err)?;
        check(loaded.rank == adapter.rank && loaded.alpha == adapter.alpha, || format!("seed {seed}: config changed"))?;
        for (path, layer) in &adapter.layers {
            let got = loaded.layers.get(path).ok_or_else(|| format!("seed {seed}: lost layer {path}"))?;
            for (want, have) in [(&layer.a, &got.a), (&layer.b, &got.b)] {
                for (w, h) in want.data().iter().zip(have.data()) {
                    let bound = w.abs() * f32::EPSILON as f64 / 2.0;
                    check((w - h).abs() <= bound, || format!("seed {seed}: {w} loaded as {h}"))?;
                }
            }
        }
        save_adapter(&loaded, &second, SaveDtype::F32).map_err(err)?;
        let (x, y) = (std::fs::read(first.join(WEIGHTS_FILE)), std::fs::read(second.join(WEIGHTS_FILE)));
        check(x.map_err(|e| e.to_string())? == y.map_err(|e| e.to_string())?, || {
            format!("seed {seed}: re-saved tensors differ")
        })?;
    }
    Ok("100 adapters, f32 rounding bound held, re-save identical".into())
}
