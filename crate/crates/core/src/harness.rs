//! Synthetic adapters and tasks, a least-squares LoRA fitter, and the
//! experiment runners behind `lora-lego bench`.
//!
//! Every runner takes its randomness from the caller's [`Rng`] and returns an
//! [`ExperimentReport`] whose rows are reproducible for a fixed seed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::adapter::{LoraAdapter, LoraLayer};
use crate::cluster::{kmeans, KmeansConfig};
use crate::error::{Error, Result};
use crate::merge::{lego_merge, output_reweight_factor, prune_lora, weight_average, MergeOptions};
use crate::msu::{adapter_delta, assemble_layer, delta_weight, ensure_folded, extract_msus, permute_layer, Msu, MsuSource};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Matrix, Permutation};

/// Layer path used by single-layer synthetic adapters.
pub const SYNTHETIC_LAYER: &str = "synthetic.0";

const FIT_INIT_SEED: u64 = 0x05EE_DF17;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Every entry of A and B drawn from N(0, 1).
    Gaussian,
    /// Rank `i` is prototype `i % prototypes` plus `noise · N(0, 1)` per entry.
    Structured { prototypes: usize, noise: f64 },
}

/// Rank-`r` single-layer adapter with `alpha == r` (unit forward scale).
pub fn gen_synthetic_adapter<T: Scalar>(
    d_in: usize,
    d_out: usize,
    r: usize,
    rng: &mut Rng,
    init: Init,
) -> Result<LoraAdapter<T>> {
    gen_synthetic_adapter_layers(&[SYNTHETIC_LAYER], d_in, d_out, r, rng, init)
}

pub fn gen_synthetic_adapter_layers<T: Scalar>(
    paths: &[&str],
    d_in: usize,
    d_out: usize,
    r: usize,
    rng: &mut Rng,
    init: Init,
) -> Result<LoraAdapter<T>> {
    if r == 0 || d_in == 0 || d_out == 0 {
        return Err(Error::Domain(format!("synthetic adapter needs r, d_in, d_out >= 1 (got {r}, {d_in}, {d_out})")));
    }
    let mut layers = BTreeMap::new();
    for path in paths {
        let layer = match init {
            Init::Gaussian => LoraLayer::new(Matrix::gaussian(r, d_in, rng), Matrix::gaussian(d_out, r, rng))?,
            Init::Structured { prototypes, noise } => {
                if prototypes == 0 || prototypes > r {
                    return Err(Error::Domain(format!("{prototypes} prototypes for rank {r}")));
                }
                let protos: Vec<Vec<T>> = (0..prototypes).map(|_| rng.sample_gaussian(d_in + d_out)).collect();
                let msus = (0..r)
                    .map(|i| {
                        let s: Vec<T> = protos[i % prototypes]
                            .iter()
                            .map(|&v| v + T::lit(noise) * rng.gaussian::<T>())
                            .collect();
                        let src = MsuSource { adapter: "synthetic".into(), layer: path.to_string(), rank_index: i };
                        Msu::from_combined(&s, d_in, src)
                    })
                    .collect::<Result<Vec<_>>>()?;
                assemble_layer(&msus)?
            }
        };
        layers.insert(path.to_string(), layer);
    }
    LoraAdapter::new("synthetic", layers, T::from_count(r), r)
}

/// Prototype index of each rank of a structured adapter.
pub fn structured_labels(r: usize, prototypes: usize) -> Vec<usize> {
    (0..r).map(|i| i % prototypes).collect()
}

#[derive(Debug, Clone)]
pub struct Probe<T> {
    pub x: Vec<T>,
    pub y: Vec<T>,
}

/// Linear task `y = (W₀ + ΔW*)·x` with a fixed probe set.
#[derive(Debug, Clone)]
pub struct SyntheticTask<T> {
    pub base: Matrix<T>,
    pub target_delta: Matrix<T>,
    pub probes: Vec<Probe<T>>,
    /// Factors that generated `target_delta`, when known; used to warm-start fits.
    pub generator: Option<LoraLayer<T>>,
}

impl<T: Scalar> SyntheticTask<T> {
    pub fn new(base: Matrix<T>, target_delta: Matrix<T>, n_probes: usize, rng: &mut Rng) -> Result<Self> {
        if base.shape() != target_delta.shape() {
            return Err(Error::dim("SyntheticTask::new", format!("{:?} vs {:?}", base.shape(), target_delta.shape())));
        }
        let full = base.add(&target_delta)?;
        let probes = (0..n_probes)
            .map(|_| {
                let x: Vec<T> = rng.sample_gaussian(base.cols());
                let y = full.matvec(&x)?;
                Ok(Probe { x, y })
            })
            .collect::<Result<_>>()?;
        Ok(Self { base, target_delta, probes, generator: None })
    }

    /// Task whose target is `B·A` of `layer`, over a Gaussian base.
    pub fn from_layer(layer: &LoraLayer<T>, n_probes: usize, rng: &mut Rng) -> Result<Self> {
        let base = Matrix::gaussian(layer.d_out(), layer.d_in(), rng);
        let mut task = Self::new(base, delta_weight(layer, T::one()), n_probes, rng)?;
        task.generator = Some(layer.clone());
        Ok(task)
    }

    pub fn d_in(&self) -> usize {
        self.base.cols()
    }

    pub fn d_out(&self) -> usize {
        self.base.rows()
    }
}

/// `W₀x + (alpha / rank)·B·A·x` for a single-layer adapter.
pub fn forward<T: Scalar>(task: &SyntheticTask<T>, adapter: &LoraAdapter<T>, x: &[T]) -> Result<Vec<T>> {
    if adapter.layers.len() != 1 {
        return Err(Error::Domain(format!("forward expects a single-layer adapter, got {} layers", adapter.layers.len())));
    }
    let layer = adapter.layers.values().next().unwrap();
    if layer.dims() != (task.d_in(), task.d_out()) {
        return Err(Error::dim(
            "forward",
            format!("adapter dims {:?} vs task dims {:?}", layer.dims(), (task.d_in(), task.d_out())),
        ));
    }
    let base = task.base.matvec(x)?;
    let ax = layer.a.matvec(x)?;
    let bax = layer.b.matvec(&ax)?;
    let s = adapter.scale();
    Ok(base.iter().zip(&bax).map(|(&y, &d)| y + s * d).collect())
}

/// `‖ŷ − y‖ / ‖y − W₀x‖` over the probe set: error relative to the size of the
/// task-specific part of the output.
pub fn probe_relative_error<T: Scalar>(task: &SyntheticTask<T>, adapter: &LoraAdapter<T>) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for probe in &task.probes {
        let pred = forward(task, adapter, &probe.x)?;
        let base = task.base.matvec(&probe.x)?;
        for ((p, y), b) in pred.iter().zip(&probe.y).zip(&base) {
            num += (*p - *y).as_f64().powi(2);
            den += (*y - *b).as_f64().powi(2);
        }
    }
    Ok(if den == 0.0 { num.sqrt() } else { (num / den).sqrt() })
}

#[derive(Debug, Clone)]
pub struct FitResult<T> {
    pub layer: LoraLayer<T>,
    /// `‖target − B·A‖_F / ‖target‖_F` (absolute when the target is zero).
    pub residual: f64,
    pub iterations: usize,
    /// False when `max_iters` ran out before the improvement fell below `tol`.
    pub converged: bool,
}

/// Alternating least squares for `min ‖target − B·A‖_F` with rank `r`,
/// starting from a fixed-seed Gaussian A.
pub fn fit_lora_to_target<T: Scalar>(target: &Matrix<T>, r: usize, tol: f64, max_iters: usize) -> Result<FitResult<T>> {
    if r == 0 || r > target.rows().min(target.cols()) {
        return Err(Error::Domain(format!(
            "fit rank {r} must be in [1, {}]",
            target.rows().min(target.cols())
        )));
    }
    let init = Matrix::gaussian(r, target.cols(), &mut Rng::new(FIT_INIT_SEED));
    fit_lora_from(target, init, tol, max_iters)
}

/// Alternating least squares from a given A. A tiny ridge term keeps the
/// normal equations solvable when factors are rank deficient.
pub fn fit_lora_from<T: Scalar>(target: &Matrix<T>, init_a: Matrix<T>, tol: f64, max_iters: usize) -> Result<FitResult<T>> {
    let r = init_a.rows();
    if init_a.cols() != target.cols() {
        return Err(Error::dim("fit_lora_from", "initial A does not match target columns"));
    }
    let target_norm = target.frobenius_norm().as_f64();
    if target_norm == 0.0 {
        let layer = LoraLayer::new(init_a, Matrix::zeros(target.rows(), r))?;
        return Ok(FitResult { layer, residual: 0.0, iterations: 1, converged: true });
    }
    let rel = |layer: &LoraLayer<T>| -> Result<f64> {
        Ok(target.sub(&delta_weight(layer, T::one()))?.frobenius_norm().as_f64() / target_norm)
    };
    let ridge = |gram: &Matrix<T>| -> Matrix<T> {
        let trace: T = (0..r).map(|i| gram.get(i, i)).sum();
        let lambda = T::lit(1e-13) * (trace / T::from_count(r)).max(T::min_positive_value());
        let mut g = gram.clone();
        for i in 0..r {
            g.set(i, i, g.get(i, i) + lambda);
        }
        g
    };

    let mut a = init_a;
    let mut best: Option<(f64, LoraLayer<T>)> = None;
    let mut prev = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters {
        iterations += 1;
        // B = T Aᵀ (A Aᵀ)⁻¹, solved as (A Aᵀ) Bᵀ = A Tᵀ
        let gram_a = ridge(&a.matmul(&a.transpose())?);
        let b = gram_a.solve(&a.matmul(&target.transpose())?)?.transpose();
        // A = (BᵀB)⁻¹ Bᵀ T
        let gram_b = ridge(&b.transpose().matmul(&b)?);
        a = gram_b.solve(&b.transpose().matmul(target)?)?;
        let layer = LoraLayer::new(a.clone(), b)?;
        let res = rel(&layer)?;
        if best.as_ref().is_none_or(|(r, _)| res < *r) {
            best = Some((res, layer));
        }
        if res < 1e-14 || (prev.is_finite() && (prev - res) <= tol * prev) {
            converged = true;
            break;
        }
        prev = res;
    }
    let (residual, layer) = best.expect("at least one iteration");
    Ok(FitResult { layer, residual, iterations, converged })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Text(String),
    Bool(bool),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Float(v) => v.to_string(),
            Cell::Text(s) => s.clone(),
            Cell::Bool(b) => b.to_string(),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Int(v) => Some(*v as f64),
            Cell::Float(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Cell::Bool(b) => Some(*b),
            _ => None,
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}
impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}
impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Bool(v)
    }
}
impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}
impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub id: String,
    pub parameters: BTreeMap<String, Value>,
    pub seed: u64,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl ExperimentReport {
    fn new(id: &str, seed: u64, columns: &[&str]) -> Self {
        Self {
            id: id.to_string(),
            parameters: BTreeMap::new(),
            seed,
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn param(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.parameters.insert(key.to_string(), value.into());
        self
    }

    fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<&Cell>> {
        let idx = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| &r[idx]).collect())
    }

    pub fn column_f64(&self, name: &str) -> Vec<f64> {
        self.column(name)
            .map(|c| c.into_iter().filter_map(Cell::as_f64).collect())
            .unwrap_or_default()
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns).expect("in-memory write");
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::render)).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }

    /// Parameters, seed and version; rows live in the CSV.
    pub fn sidecar_json(&self) -> String {
        let sidecar = serde_json::json!({
            "id": self.id,
            "parameters": self.parameters,
            "seed": self.seed,
            "version": crate_version(),
            "columns": self.columns,
            "rows": self.rows.len(),
        });
        serde_json::to_string_pretty(&sidecar).expect("sidecar serializes")
    }

    /// Writes `<prefix>.csv` and `<prefix>.json`; returns both paths.
    pub fn write(&self, prefix: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
        let prefix = prefix.as_ref();
        if let Some(parent) = prefix.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let csv_path = prefix.with_extension("csv");
        let json_path = prefix.with_extension("json");
        std::fs::write(&csv_path, self.to_csv()).map_err(|e| Error::io(&csv_path, e))?;
        std::fs::write(&json_path, self.sidecar_json() + "\n").map_err(|e| Error::io(&json_path, e))?;
        Ok((csv_path, json_path))
    }
}

pub fn crate_version() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

fn relative_frobenius<T: Scalar>(got: &Matrix<T>, want: &Matrix<T>) -> Result<f64> {
    let den = want.frobenius_norm().as_f64();
    let num = got.sub(want)?.frobenius_norm().as_f64();
    Ok(if den == 0.0 { num } else { num / den })
}

/// Per-layer errors of naive averaging and of the clustering merge when an
/// adapter is merged with a row-permuted copy of itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MisalignmentErrors {
    pub e_avg: f64,
    pub e_lego: f64,
}

pub fn misalignment_errors<T: Scalar>(
    adapter: &LoraAdapter<T>,
    perms: &BTreeMap<String, Permutation>,
    seed: u64,
) -> Result<BTreeMap<String, MisalignmentErrors>> {
    let folded = ensure_folded(adapter);
    let mut twin = folded.clone();
    twin.name = format!("{}-permuted", adapter.name);
    for (path, layer) in twin.layers.iter_mut() {
        let p = perms
            .get(path)
            .ok_or_else(|| Error::Domain(format!("no permutation for layer {path}")))?;
        *layer = permute_layer(layer, p)?;
    }
    let pair = [folded.clone(), twin];
    let avg = weight_average(&pair)?;
    let opts = MergeOptions::default().with_k(adapter.rank).with_seed(seed);
    let (lego, _) = lego_merge(&pair, &opts)?;
    folded
        .layers
        .keys()
        .map(|path| {
            let truth = adapter_delta(&folded, path).unwrap();
            let e_avg = relative_frobenius(&adapter_delta(&avg, path).unwrap(), &truth)?;
            let e_lego = relative_frobenius(&adapter_delta(&lego, path).unwrap(), &truth)?;
            Ok((path.clone(), MisalignmentErrors { e_avg, e_lego }))
        })
        .collect()
}

/// Merges `adapter` with a copy whose layers are permuted by random
/// non-identity permutations; reports both errors per layer.
pub fn misalignment_experiment<T: Scalar>(adapter: &LoraAdapter<T>, rng: &mut Rng) -> Result<ExperimentReport> {
    if adapter.rank < 2 {
        return Err(Error::Domain("misalignment needs rank >= 2".into()));
    }
    let seed = rng.next_u64();
    let perms: BTreeMap<String, Permutation> = adapter
        .layers
        .keys()
        .map(|p| (p.clone(), Permutation::random_non_identity(adapter.rank, rng)))
        .collect();
    let errors = misalignment_errors(adapter, &perms, seed)?;
    let mut report = ExperimentReport::new("misalignment", seed, &["layer", "e_avg", "e_lego"])
        .param("rank", adapter.rank)
        .param("adapter", adapter.name.clone());
    for (path, e) in errors {
        report.push(vec![path.into(), e.e_avg.into(), e.e_lego.into()]);
    }
    Ok(report)
}

/// Repeats the misalignment experiment on fresh Gaussian adapters.
pub fn misalignment_trials(d: usize, r: usize, trials: usize, rng: &mut Rng) -> Result<ExperimentReport> {
    let seed = rng.next_u64();
    let mut report = ExperimentReport::new("misalignment", seed, &["trial", "e_avg", "e_lego"])
        .param("d", d)
        .param("r", r)
        .param("trials", trials);
    for trial in 0..trials {
        let mut trial_rng = Rng::derive(seed, trial as u64);
        let adapter: LoraAdapter<T64> = gen_synthetic_adapter(d, d, r, &mut trial_rng, Init::Gaussian)?;
        let single = misalignment_experiment(&adapter, &mut trial_rng)?;
        let row = &single.rows[0];
        report.push(vec![trial.into(), row[1].clone(), row[2].clone()]);
    }
    Ok(report)
}

type T64 = f64;

/// Empirical entry variance of `A·B` (A `p×k`, B `k×p`, N(0,1) entries) and of
/// the same product scaled by `sqrt(r/k)`.
pub fn variance_sweep(p: usize, r: usize, ks: &[usize], trials: usize, rng: &mut Rng) -> Result<ExperimentReport> {
    if trials * p * p < 100_000 {
        return Err(Error::Domain(format!(
            "{trials} trials of {p}x{p} give {} samples; need at least 100000",
            trials * p * p
        )));
    }
    if r == 0 || ks.contains(&0) {
        return Err(Error::Domain("ranks must be positive".into()));
    }
    let seed = rng.next_u64();
    let mut report = ExperimentReport::new(
        "variance",
        seed,
        &["k", "samples", "raw_variance", "scaled_variance", "raw_over_k", "scaled_over_r"],
    )
    .param("p", p)
    .param("r", r)
    .param("trials", trials)
    .param("ks", ks.to_vec());
    for (ki, &k) in ks.iter().enumerate() {
        let factor: f64 = output_reweight_factor(r as f64, k);
        let mut raw: Vec<f64> = Vec::with_capacity(trials * p * p);
        for trial in 0..trials {
            let mut t_rng = Rng::derive(seed, (ki * trials + trial) as u64);
            let a = Matrix::<f64>::gaussian(p, k, &mut t_rng);
            let b = Matrix::<f64>::gaussian(k, p, &mut t_rng);
            raw.extend_from_slice(a.matmul(&b)?.data());
        }
        let scaled: Vec<f64> = raw.iter().map(|v| v * factor).collect();
        let (vr, vs) = (sample_variance(&raw), sample_variance(&scaled));
        report.push(vec![
            k.into(),
            raw.len().into(),
            vr.into(),
            vs.into(),
            (vr / k as f64).into(),
            (vs / r as f64).into(),
        ]);
    }
    Ok(report)
}

pub fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Absolute slack on the centroid-norm inequality.
pub const NORM_DECAY_TOL: f64 = 1e-12;

/// Clusters the pooled MSUs into `k` groups and reports, per cluster, the
/// centroid norm against the mean member norm (L2 and infinity) and the
/// infinity norm after parameter reweighting. Fails if any centroid's L2
/// norm exceeds its members' mean L2 norm.
pub fn norm_decay_report<T: Scalar>(adapters: &[LoraAdapter<T>], k: usize, rng: &mut Rng) -> Result<ExperimentReport> {
    if adapters.len() < 2 {
        return Err(Error::Domain("norm decay needs at least two adapters".into()));
    }
    let seed = rng.next_u64();
    let opts = MergeOptions::default().with_k(k).with_seed(seed);
    let (_, merge_report) = lego_merge(adapters, &opts)?;
    let mut report = ExperimentReport::new(
        "norm-decay",
        seed,
        &[
            "layer",
            "cluster",
            "size",
            "centroid_l2",
            "mean_member_l2",
            "centroid_inf",
            "mean_member_inf",
            "reweighted_inf",
            "l2_holds",
        ],
    )
    .param("k", k)
    .param("adapters", adapters.len());
    let mut violations = Vec::new();
    for layer in &merge_report.layers {
        for (cid, c) in layer.clusters.iter().enumerate() {
            let holds = c.centroid_l2_norm <= c.mean_member_l2_norm + NORM_DECAY_TOL;
            if !holds {
                violations.push(format!("{}#{cid}", layer.layer));
            }
            report.push(vec![
                layer.layer.clone().into(),
                cid.into(),
                c.size.into(),
                c.centroid_l2_norm.into(),
                c.mean_member_l2_norm.into(),
                c.centroid_inf_norm.into(),
                c.mean_member_inf_norm.into(),
                c.reweighted_inf_norm.into(),
                holds.into(),
            ]);
        }
    }
    if !violations.is_empty() {
        return Err(Error::Invariant(format!(
            "centroid L2 norm exceeds mean member norm in clusters {}",
            violations.join(", ")
        )));
    }
    Ok(report)
}

/// `⌈f·r⌉`, tolerant of `f·r` landing a rounding error above an integer.
pub fn keep_rank(fraction: f64, r: usize) -> usize {
    let x = fraction * r as f64;
    ((x - 1e-9).ceil().max(1.0) as usize).min(r)
}

/// Fits a rank-`r` adapter to the task, prunes it to `⌈f·r⌉` for each
/// fraction, and reports the probe-set relative output error.
///
/// When the task carries its generating factors (of rank `r`) the fit is
/// warm-started from them; otherwise from a fixed Gaussian.
pub fn pruning_curve<T: Scalar>(
    task: &SyntheticTask<T>,
    r: usize,
    fractions: &[f64],
    rng: &mut Rng,
) -> Result<ExperimentReport> {
    if let Some(&bad) = fractions.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
        return Err(Error::Domain(format!("keep fraction {bad} outside (0, 1]")));
    }
    let fit = match &task.generator {
        Some(g) if g.rank() == r => fit_lora_from(&task.target_delta, g.a.clone(), 1e-10, 50)?,
        _ => fit_lora_to_target(&task.target_delta, r, 1e-10, 500)?,
    };
    let fitted = LoraAdapter::new(
        "fit",
        BTreeMap::from([(SYNTHETIC_LAYER.to_string(), fit.layer)]),
        T::from_count(r),
        r,
    )?;
    let unpruned = probe_relative_error(task, &fitted)?;
    let seed = rng.next_u64();
    let mut report = ExperimentReport::new("pruning-curve", seed, &["fraction", "k", "rel_error", "unpruned_rel_error"])
        .param("r", r)
        .param("fractions", fractions.to_vec())
        .param("fit_residual", fit.residual)
        .param("fit_converged", fit.converged);
    for &f in fractions {
        let k = keep_rank(f, r);
        let opts = MergeOptions::default().with_seed(seed);
        let (pruned, _) = prune_lora(&fitted, k, &opts)?;
        report.push(vec![f.into(), k.into(), probe_relative_error(task, &pruned)?.into(), unpruned.into()]);
    }
    Ok(report)
}

/// Two adapters share `r − 1` MSUs and differ in one. Compares how averaging,
/// plain concatenation and the clustering merge with `k = r + 1` treat the
/// two task-specific MSUs.
pub fn conflict_experiment(d_in: usize, d_out: usize, r: usize, rng: &mut Rng) -> Result<ExperimentReport> {
    if r < 2 {
        return Err(Error::Domain("conflict experiment needs r >= 2".into()));
    }
    let seed = rng.next_u64();
    let (first, second, specific) = conflict_pair(d_in, d_out, r, rng)?;
    let pair = [first, second];

    let mut report = ExperimentReport::new(
        "conflict",
        seed,
        &["method", "rank", "e_task_a", "e_task_b", "e_shared"],
    )
    .param("d_in", d_in)
    .param("d_out", d_out)
    .param("r", r);

    let avg = weight_average(&pair)?;
    let concat = crate::merge::ensemble_merge(&pair)?;
    let (lego, lego_report) = lego_merge(&pair, &MergeOptions::default().with_k(r + 1).with_seed(seed))?;
    let lego_factor = lego_report.layers[0].output_factor;
    let shared_truth = shared_delta(&pair[0], r - 1);
    // (method, merged, factor on each MSU, copies of the shared block)
    for (name, merged, factor, copies) in [
        ("average", &avg, 1.0, 1.0),
        // undo the 1/2 ensemble weight; both copies of the shared block survive
        ("concat", &concat, 0.5, 2.0),
        ("lego", &lego, lego_factor, 1.0),
    ] {
        let layer = &merged.layers[SYNTHETIC_LAYER];
        let ea = contribution_error(layer, &specific[0], factor)?;
        let eb = contribution_error(layer, &specific[1], factor)?;
        let es = shared_error(layer, &shared_truth.scale(copies), &specific, factor)?;
        report.push(vec![name.into(), merged.rank.into(), ea.into(), eb.into(), es.into()]);
    }
    Ok(report)
}

/// Two adapters plus the rank-1 update that only each one has.
pub type ConflictPair = (LoraAdapter<f64>, LoraAdapter<f64>, [Matrix<f64>; 2]);

/// Builds the two adapters and returns their distinct rank-1 contributions.
pub fn conflict_pair(
    d_in: usize,
    d_out: usize,
    r: usize,
    rng: &mut Rng,
) -> Result<ConflictPair> {
    let shared: LoraAdapter<f64> = gen_synthetic_adapter(d_in, d_out, r - 1, rng, Init::Gaussian)?;
    let shared_msus = extract_msus(&shared.layers[SYNTHETIC_LAYER], "shared", SYNTHETIC_LAYER);
    let mut build = |name: &str| -> Result<(LoraAdapter<f64>, Matrix<f64>)> {
        let s: Vec<f64> = rng.sample_gaussian(d_in + d_out);
        let src = MsuSource { adapter: name.into(), layer: SYNTHETIC_LAYER.into(), rank_index: r - 1 };
        let own = Msu::from_combined(&s, d_in, src)?;
        let contribution = delta_weight(&assemble_layer(std::slice::from_ref(&own))?, 1.0);
        let mut msus = shared_msus.clone();
        msus.push(own);
        let layer = assemble_layer(&msus)?;
        let adapter = LoraAdapter::new(name, BTreeMap::from([(SYNTHETIC_LAYER.to_string(), layer)]), r as f64, r)?;
        Ok((adapter, contribution))
    };
    let (a, ca) = build("task-a")?;
    let (b, cb) = build("task-b")?;
    Ok((a, b, [ca, cb]))
}

fn rank_one_terms<T: Scalar>(layer: &LoraLayer<T>, factor: f64) -> Vec<Matrix<T>> {
    extract_msus(layer, "", "")
        .iter()
        .map(|m| {
            let l = assemble_layer(std::slice::from_ref(m)).expect("single MSU assembles");
            delta_weight(&l, T::lit(1.0 / factor))
        })
        .collect()
}

/// Smallest relative error between `truth` and any rank-1 term of `layer`
/// (after dividing out `factor`).
fn contribution_error<T: Scalar>(layer: &LoraLayer<T>, truth: &Matrix<T>, factor: f64) -> Result<f64> {
    rank_one_terms(layer, factor)
        .iter()
        .map(|t| relative_frobenius(t, truth))
        .try_fold(f64::INFINITY, |m, e| e.map(|e| m.min(e)))
}

fn shared_delta(adapter: &LoraAdapter<f64>, n_shared: usize) -> Matrix<f64> {
    let msus = extract_msus(&adapter.layers[SYNTHETIC_LAYER], "", "");
    delta_weight(&assemble_layer(&msus[..n_shared]).expect("shared prefix assembles"), 1.0)
}

/// Error of the merged update with the task-specific terms matched and removed,
/// against the shared part.
fn shared_error<T: Scalar>(layer: &LoraLayer<T>, shared: &Matrix<f64>, specific: &[Matrix<f64>; 2], factor: f64) -> Result<f64> {
    let terms: Vec<Matrix<f64>> = rank_one_terms(layer, factor)
        .into_iter()
        .map(|t| Matrix::new(t.rows(), t.cols(), t.data().iter().map(|v| v.as_f64()).collect()).unwrap())
        .collect();
    let mut used = vec![false; terms.len()];
    for s in specific {
        let best = terms
            .iter()
            .enumerate()
            .filter(|(i, _)| !used[*i])
            .map(|(i, t)| (i, relative_frobenius(t, s).unwrap_or(f64::INFINITY)))
            .min_by(|x, y| x.1.partial_cmp(&y.1).unwrap());
        if let Some((i, e)) = best {
            if e < 1e-6 {
                used[i] = true;
            }
        }
    }
    let mut rest = Matrix::zeros(shared.rows(), shared.cols());
    for (t, u) in terms.iter().zip(&used) {
        if !u {
            rest = rest.add(t)?;
        }
    }
    relative_frobenius(&rest, shared)
}

/// Norm-decay rows for `trials` independent merges of `n_adapters` Gaussian
/// adapters, tagged by trial.
pub fn norm_decay_trials(
    d: usize,
    r: usize,
    n_adapters: usize,
    k: usize,
    trials: usize,
    rng: &mut Rng,
) -> Result<ExperimentReport> {
    let seed = rng.next_u64();
    let mut out: Option<ExperimentReport> = None;
    for trial in 0..trials {
        let mut t_rng = Rng::derive(seed, trial as u64);
        let adapters = (0..n_adapters)
            .map(|j| {
                let mut a: LoraAdapter<f64> = gen_synthetic_adapter(d, d, r, &mut t_rng, Init::Gaussian)?;
                a.name = format!("a{j}");
                Ok(a)
            })
            .collect::<Result<Vec<_>>>()?;
        let single = norm_decay_report(&adapters, k, &mut t_rng)?;
        let report = out.get_or_insert_with(|| {
            let mut columns = vec!["trial"];
            columns.extend(single.columns.iter().map(String::as_str));
            ExperimentReport::new("norm-decay", seed, &columns)
                .param("d", d)
                .param("r", r)
                .param("adapters", n_adapters)
                .param("k", k)
                .param("trials", trials)
        });
        for row in single.rows {
            let mut tagged = vec![Cell::from(trial)];
            tagged.extend(row);
            report.push(tagged);
        }
    }
    out.ok_or_else(|| Error::Domain("norm decay needs at least one trial".into()))
}

/// Conflict rows for `trials` independent adapter pairs, tagged by trial.
pub fn conflict_trials(d: usize, r: usize, trials: usize, rng: &mut Rng) -> Result<ExperimentReport> {
    let seed = rng.next_u64();
    let mut report = ExperimentReport::new("conflict", seed, &["trial", "method", "rank", "e_task_a", "e_task_b", "e_shared"])
        .param("d", d)
        .param("r", r)
        .param("trials", trials);
    for trial in 0..trials {
        let single = conflict_experiment(d, d, r, &mut Rng::derive(seed, trial as u64))?;
        for row in single.rows {
            let mut tagged = vec![Cell::from(trial)];
            tagged.extend(row);
            report.push(tagged);
        }
    }
    Ok(report)
}

/// Pruning curve on a target built from `prototypes` duplicated MSUs of rank `r`.
pub fn structured_pruning_curve(
    d: usize,
    r: usize,
    prototypes: usize,
    fractions: &[f64],
    rng: &mut Rng,
) -> Result<ExperimentReport> {
    let init = Init::Structured { prototypes, noise: 0.0 };
    let generator: LoraAdapter<f64> = gen_synthetic_adapter(d, d, r, rng, init)?;
    let task = SyntheticTask::from_layer(&generator.layers[SYNTHETIC_LAYER], 32, rng)?;
    let report = pruning_curve(&task, r, fractions, rng)?;
    Ok(report.param("d", d).param("prototypes", prototypes))
}

/// Fraction of pairs of points on which two labelings agree about
/// "same cluster" (1.0 means identical partitions up to relabeling).
pub fn partition_agreement(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let mut agree = 0usize;
    let mut total = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            total += 1;
            if (a[i] == a[j]) == (b[i] == b[j]) {
                agree += 1;
            }
        }
    }
    agree as f64 / total as f64
}

/// Clusters the MSUs of a structured adapter into `k` groups.
pub fn cluster_adapter_msus<T: Scalar>(adapter: &LoraAdapter<T>, path: &str, k: usize, seed: u64) -> Result<Vec<usize>> {
    let layer = adapter
        .layers
        .get(path)
        .ok_or_else(|| Error::MissingLayer { layer: path.into(), adapter: adapter.name.clone() })?;
    let points: Vec<Vec<T>> = extract_msus(layer, &adapter.name, path).iter().map(Msu::combined).collect();
    Ok(kmeans(&points, &KmeansConfig::new(k).with_seed(seed))?.assignments)
}
