//! Adapter merging: rank-wise clustering merge with dual reweighting, the
//! element-wise baselines, and single-adapter pruning.
//!
//! Every routine folds `alpha / rank` into B first, and every output is
//! written with `alpha == rank`, so a standard loader applies unit scale.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::Serialize;

use crate::adapter::{merged_target_modules, LoraAdapter, LoraLayer};
use crate::cluster::{kmeans, KmeansConfig};
use crate::error::{Error, Result};
use crate::msu::{assemble_layer, concat_layers, ensure_folded, Msu, MsuPool, MsuSource};
use crate::rng::{mix64, stable_hash};
use crate::scalar::Scalar;
use crate::tensor::{inf_norm, l2_norm, Matrix};

/// How the merged rank is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KPolicy {
    Explicit(usize),
    /// `round(multiple × mean input rank)`, clamped to the pool size.
    RankMultiple(f64),
}

impl Default for KPolicy {
    fn default() -> Self {
        KPolicy::RankMultiple(2.0)
    }
}

impl std::str::FromStr for KPolicy {
    type Err = Error;

    /// Accepts an integer (`"12"`) or a rank multiple (`"2r"`, `"0.5r"`, `"r"`).
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(m) = s.strip_suffix('r') {
            let multiple = if m.is_empty() { 1.0 } else {
                m.parse::<f64>().map_err(|_| Error::Config(format!("bad k spec {s:?}")))?
            };
            if !(multiple > 0.0) || !multiple.is_finite() {
                return Err(Error::Config(format!("k multiple must be positive, got {s:?}")));
            }
            return Ok(KPolicy::RankMultiple(multiple));
        }
        let k = s.parse::<usize>().map_err(|_| Error::Config(format!("bad k spec {s:?}")))?;
        Ok(KPolicy::Explicit(k))
    }
}

#[derive(Debug, Clone)]
pub struct MergeOptions<T> {
    pub k_policy: KPolicy,
    pub param_reweight: bool,
    pub output_reweight: bool,
    /// Template for per-layer clustering; `k` and `seed` are overridden.
    pub kmeans: KmeansConfig<T>,
    pub seed: u64,
    /// Merge layers present in only some adapters instead of failing.
    pub union: bool,
    pub name: String,
}

impl<T: Scalar> Default for MergeOptions<T> {
    fn default() -> Self {
        Self {
            k_policy: KPolicy::default(),
            param_reweight: true,
            output_reweight: true,
            kmeans: KmeansConfig::new(1),
            seed: 0,
            union: false,
            name: "merged".into(),
        }
    }
}

impl<T: Scalar> MergeOptions<T> {
    pub fn with_k(mut self, k: usize) -> Self {
        self.k_policy = KPolicy::Explicit(k);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn reweighting(mut self, param: bool, output: bool) -> Self {
        self.param_reweight = param;
        self.output_reweight = output;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterReport {
    pub size: usize,
    /// Member count per source adapter.
    pub composition: BTreeMap<String, usize>,
    pub members: Vec<MsuSource>,
    pub mean_member_inf_norm: f64,
    pub centroid_inf_norm: f64,
    pub mean_member_l2_norm: f64,
    pub centroid_l2_norm: f64,
    /// Parameter reweighting factor applied to this centroid (1 when off).
    pub scale: f64,
    pub reweighted_inf_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerReport {
    pub layer: String,
    pub d_in: usize,
    pub d_out: usize,
    pub pool_size: usize,
    pub k: usize,
    pub r_ref: f64,
    pub inertia: f64,
    pub iterations: usize,
    pub output_factor: f64,
    pub clusters: Vec<ClusterReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct MergeReport {
    pub layers: Vec<LayerReport>,
}

impl MergeReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Rescales `centroid` so its infinity norm equals the mean infinity norm of
/// `members`. A zero centroid is returned unchanged. Returns the vector and
/// the applied scale.
pub fn parameter_reweight<T: Scalar>(centroid: &[T], members: &[Vec<T>]) -> Result<(Vec<T>, T)> {
    if members.is_empty() {
        return Err(Error::Domain("parameter reweight with no members".into()));
    }
    let c_norm = inf_norm(centroid)?;
    if c_norm == T::zero() {
        return Ok((centroid.to_vec(), T::one()));
    }
    let mut sum = T::zero();
    for m in members {
        sum += inf_norm(m)?;
    }
    let mean = sum / T::from_count(members.len());
    let scale = mean / c_norm;
    Ok((centroid.iter().map(|&v| v * scale).collect(), scale))
}

/// `sqrt(r_ref / k)`.
pub fn output_reweight_factor<T: Scalar>(r_ref: T, k: usize) -> T {
    (r_ref / T::from_count(k)).sqrt()
}

fn resolve_k(policy: KPolicy, mean_rank: f64, pool: usize, layer: &str) -> Result<usize> {
    match policy {
        KPolicy::Explicit(k) if (1..=pool).contains(&k) => Ok(k),
        KPolicy::Explicit(k) => Err(Error::KOutOfRange { k, max: pool, layer: layer.to_string() }),
        KPolicy::RankMultiple(m) => Ok(((m * mean_rank).round() as usize).clamp(1, pool)),
    }
}

struct LayerPlan<'a, T> {
    path: &'a str,
    pool: MsuPool<T>,
    r_ref: f64,
}

/// Merges adapters by pooling their MSUs per layer, clustering the pool into
/// `k` groups, and using the reweighted centroids as the merged MSUs.
///
/// `k` is resolved once for the whole adapter so every merged layer shares
/// one rank. Layer merges run in parallel; each layer's clustering seed
/// depends only on `opts.seed` and the layer path.
pub fn lego_merge<T: Scalar>(
    adapters: &[LoraAdapter<T>],
    opts: &MergeOptions<T>,
) -> Result<(LoraAdapter<T>, MergeReport)> {
    if adapters.is_empty() {
        return Err(Error::Domain("nothing to merge".into()));
    }
    let folded: Vec<LoraAdapter<T>> = adapters.iter().map(ensure_folded).collect();
    let paths: BTreeSet<&str> =
        folded.iter().flat_map(|a| a.layers.keys().map(String::as_str)).collect();
    if paths.is_empty() {
        return Err(Error::Domain("adapters contain no layers".into()));
    }

    let mut plans = Vec::with_capacity(paths.len());
    for path in paths {
        if !opts.union {
            if let Some(missing) = folded.iter().find(|a| !a.layers.contains_key(path)) {
                return Err(Error::MissingLayer {
                    layer: path.to_string(),
                    adapter: missing.name.clone(),
                });
            }
        }
        let pool = MsuPool::gather(path, &folded)?;
        let present: Vec<usize> =
            folded.iter().filter_map(|a| a.layers.get(path).map(LoraLayer::rank)).collect();
        let r_ref = present.iter().sum::<usize>() as f64 / present.len() as f64;
        plans.push(LayerPlan { path, pool, r_ref });
    }

    let mean_rank = folded.iter().map(|a| a.rank).sum::<usize>() as f64 / folded.len() as f64;
    let min_pool = plans.iter().map(|p| p.pool.len()).min().expect("at least one layer");
    let k = match opts.k_policy {
        KPolicy::Explicit(_) => {
            for plan in &plans {
                resolve_k(opts.k_policy, mean_rank, plan.pool.len(), plan.path)?;
            }
            resolve_k(opts.k_policy, mean_rank, min_pool, "")?
        }
        KPolicy::RankMultiple(_) => resolve_k(opts.k_policy, mean_rank, min_pool, "")?,
    };

    let merged: Vec<(String, LoraLayer<T>, LayerReport)> = plans
        .par_iter()
        .map(|plan| merge_layer(plan, k, opts))
        .collect::<Result<_>>()?;

    let mut layers = BTreeMap::new();
    let mut report = MergeReport::default();
    for (path, layer, layer_report) in merged {
        layers.insert(path, layer);
        report.layers.push(layer_report);
    }
    let mut out = LoraAdapter::new(opts.name.clone(), layers, T::from_count(k), k)?;
    out.scaling_folded = true;
    out.target_modules = merged_target_modules(adapters);
    out.extra_config = adapters[0].extra_config.clone();
    Ok((out, report))
}

fn layer_seed(seed: u64, path: &str) -> u64 {
    mix64(seed ^ stable_hash(path))
}

fn merge_layer<T: Scalar>(
    plan: &LayerPlan<'_, T>,
    k: usize,
    opts: &MergeOptions<T>,
) -> Result<(String, LoraLayer<T>, LayerReport)> {
    // Canonical point order so the result does not depend on input order.
    let raw = plan.pool.points();
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&i, &j| {
        let (si, sj) = (&plan.pool.msus[i].source, &plan.pool.msus[j].source);
        raw[i]
            .iter()
            .zip(&raw[j])
            .map(|(x, y)| x.partial_cmp(y).expect("finite MSU entries"))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
            .then_with(|| (&si.adapter, si.rank_index).cmp(&(&sj.adapter, sj.rank_index)))
    });
    let points: Vec<Vec<T>> = order.iter().map(|&i| raw[i].clone()).collect();
    let sources: Vec<&MsuSource> = order.iter().map(|&i| &plan.pool.msus[i].source).collect();
    let mut cfg = opts.kmeans.clone();
    cfg.k = k;
    cfg.seed = layer_seed(opts.seed, plan.path);
    let clusters = kmeans(&points, &cfg)?;

    let factor = if opts.output_reweight {
        output_reweight_factor(T::lit(plan.r_ref), k)
    } else {
        T::one()
    };
    let d_in = plan.pool.d_in;
    let mut msus = Vec::with_capacity(k);
    let mut cluster_reports = Vec::with_capacity(k);
    for (cid, member_idx) in clusters.members().into_iter().enumerate() {
        let centroid = &clusters.centroids[cid];
        let members: Vec<Vec<T>> = member_idx.iter().map(|&i| points[i].clone()).collect();
        let (reweighted, scale) = if opts.param_reweight {
            parameter_reweight(centroid, &members)?
        } else {
            (centroid.clone(), T::one())
        };
        let n = members.len() as f64;
        let mut composition = BTreeMap::new();
        for &i in &member_idx {
            *composition.entry(sources[i].adapter.clone()).or_insert(0) += 1;
        }
        cluster_reports.push(ClusterReport {
            size: members.len(),
            composition,
            members: member_idx.iter().map(|&i| sources[i].clone()).collect(),
            mean_member_inf_norm: members.iter().map(|m| inf_norm(m).unwrap().as_f64()).sum::<f64>() / n,
            centroid_inf_norm: inf_norm(centroid)?.as_f64(),
            mean_member_l2_norm: members.iter().map(|m| l2_norm(m).as_f64()).sum::<f64>() / n,
            centroid_l2_norm: l2_norm(centroid).as_f64(),
            scale: scale.as_f64(),
            reweighted_inf_norm: inf_norm(&reweighted)?.as_f64(),
        });
        let source = MsuSource { adapter: opts.name.clone(), layer: plan.path.to_string(), rank_index: cid };
        let mut msu = Msu::from_combined(&reweighted, d_in, source)?;
        msu.b.iter_mut().for_each(|v| *v *= factor);
        msus.push(msu);
    }
    let layer = assemble_layer(&msus)?;
    let report = LayerReport {
        layer: plan.path.to_string(),
        d_in,
        d_out: plan.pool.d_out,
        pool_size: plan.pool.len(),
        k,
        r_ref: plan.r_ref,
        inertia: clusters.inertia.as_f64(),
        iterations: clusters.iterations_run,
        output_factor: factor.as_f64(),
        clusters: cluster_reports,
    };
    Ok((plan.path.to_string(), layer, report))
}

/// Reduces one adapter to rank `k` by clustering its own MSUs.
pub fn prune_lora<T: Scalar>(
    adapter: &LoraAdapter<T>,
    k: usize,
    opts: &MergeOptions<T>,
) -> Result<(LoraAdapter<T>, MergeReport)> {
    if k == 0 || k > adapter.rank {
        return Err(Error::KOutOfRange { k, max: adapter.rank, layer: "<all>".into() });
    }
    let mut opts = opts.clone();
    opts.k_policy = KPolicy::Explicit(k);
    if opts.name == "merged" {
        opts.name = format!("{}-pruned", adapter.name);
    }
    lego_merge(std::slice::from_ref(adapter), &opts)
}

/// Folds every adapter and checks they share rank and per-layer shapes.
fn aligned_inputs<T: Scalar>(adapters: &[LoraAdapter<T>]) -> Result<Vec<LoraAdapter<T>>> {
    let first = adapters.first().ok_or_else(|| Error::Domain("nothing to merge".into()))?;
    if adapters.iter().any(|a| a.rank != first.rank) {
        let ranks: Vec<String> = adapters.iter().map(|a| format!("{}={}", a.name, a.rank)).collect();
        return Err(Error::RankMismatch(ranks.join(", ")));
    }
    check_same_layers(adapters)?;
    for path in first.layers.keys() {
        let dims = first.layers[path].dims();
        if let Some(bad) = adapters.iter().find(|a| a.layers[path].dims() != dims) {
            return Err(Error::LayerShapeConflict {
                layer: path.clone(),
                detail: format!(
                    "{} has {dims:?} but {} has {:?}",
                    first.name,
                    bad.name,
                    bad.layers[path].dims()
                ),
            });
        }
    }
    Ok(adapters.iter().map(ensure_folded).collect())
}

fn check_same_layers<T>(adapters: &[LoraAdapter<T>]) -> Result<()> {
    let all: BTreeSet<&String> = adapters.iter().flat_map(|a| a.layers.keys()).collect();
    for adapter in adapters {
        if let Some(missing) = all.iter().find(|p| !adapter.layers.contains_key(**p)) {
            return Err(Error::MissingLayer { layer: (*missing).clone(), adapter: adapter.name.clone() });
        }
    }
    Ok(())
}

fn elementwise<T: Scalar>(
    adapters: &[LoraAdapter<T>],
    name: &str,
    f: impl Fn(&[&Matrix<T>]) -> Result<Matrix<T>>,
) -> Result<LoraAdapter<T>> {
    let folded = aligned_inputs(adapters)?;
    let rank = folded[0].rank;
    let mut layers = BTreeMap::new();
    for path in folded[0].layers.keys() {
        let a_parts: Vec<&Matrix<T>> = folded.iter().map(|ad| &ad.layers[path].a).collect();
        let b_parts: Vec<&Matrix<T>> = folded.iter().map(|ad| &ad.layers[path].b).collect();
        layers.insert(path.clone(), LoraLayer::new(f(&a_parts)?, f(&b_parts)?)?);
    }
    let mut out = LoraAdapter::new(name, layers, T::from_count(rank), rank)?;
    out.scaling_folded = true;
    out.target_modules = merged_target_modules(adapters);
    out.extra_config = adapters[0].extra_config.clone();
    Ok(out)
}

/// `A' = p Σ Aᵢ`, `B' = p Σ Bᵢ` on scaling-folded factors.
pub fn task_arithmetic<T: Scalar>(adapters: &[LoraAdapter<T>], p: T) -> Result<LoraAdapter<T>> {
    elementwise(adapters, "task-arithmetic", |parts| {
        let mut sum = parts[0].clone();
        for m in &parts[1..] {
            sum = sum.add(m)?;
        }
        Ok(sum.scale(p))
    })
}

/// Element-wise mean of the factors; identical to `task_arithmetic(·, 1/n)`.
pub fn weight_average<T: Scalar>(adapters: &[LoraAdapter<T>]) -> Result<LoraAdapter<T>> {
    let p = T::one() / T::from_count(adapters.len().max(1));
    let mut out = task_arithmetic(adapters, p)?;
    out.name = "average".into();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TiesOptions<T> {
    /// Fraction of entries kept per matrix, in `(0, 1]`.
    pub density: T,
    pub merge_scale: T,
}

impl<T: Scalar> Default for TiesOptions<T> {
    fn default() -> Self {
        Self { density: T::lit(0.5), merge_scale: T::one() }
    }
}

/// Trim → elect sign → disjoint mean, applied to each factor matrix.
pub fn ties_merge<T: Scalar>(adapters: &[LoraAdapter<T>], opts: TiesOptions<T>) -> Result<LoraAdapter<T>> {
    if !(opts.density > T::zero() && opts.density <= T::one()) {
        return Err(Error::Config(format!("ties density must be in (0, 1], got {}", opts.density)));
    }
    elementwise(adapters, "ties", |parts| {
        let values: Vec<&[T]> = parts.iter().map(|m| m.data()).collect();
        let merged = ties_vectors(&values, opts)?;
        Matrix::new(parts[0].rows(), parts[0].cols(), merged)
    })
}

/// Top-⌈density·n⌉ by magnitude per input (ties broken by lower index).
fn trim<T: Scalar>(v: &[T], density: T) -> Vec<T> {
    let n = v.len();
    let keep = (density * T::from_count(n)).ceil().to_usize().unwrap_or(n).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| v[j].abs().partial_cmp(&v[i].abs()).unwrap().then(i.cmp(&j)));
    let mut out = vec![T::zero(); n];
    for &i in &order[..keep] {
        out[i] = v[i];
    }
    out
}

pub(crate) fn ties_vectors<T: Scalar>(inputs: &[&[T]], opts: TiesOptions<T>) -> Result<Vec<T>> {
    let n = inputs.first().map_or(0, |v| v.len());
    if inputs.iter().any(|v| v.len() != n) {
        return Err(Error::dim("ties_merge", "inputs differ in length"));
    }
    let trimmed: Vec<Vec<T>> = inputs.iter().map(|v| trim(v, opts.density)).collect();
    Ok((0..n)
        .map(|i| {
            let total: T = trimmed.iter().map(|t| t[i]).sum();
            if total == T::zero() {
                return T::zero();
            }
            let sign = total.signum();
            let agreeing: Vec<T> =
                trimmed.iter().map(|t| t[i]).filter(|&v| v != T::zero() && v.signum() == sign).collect();
            if agreeing.is_empty() {
                return T::zero();
            }
            let mean = agreeing.iter().copied().sum::<T>() / T::from_count(agreeing.len());
            mean * opts.merge_scale
        })
        .collect())
}

/// Output ensemble realized as rank-wise concatenation with weights `1/n`;
/// merged rank is the sum of input ranks.
pub fn ensemble_merge<T: Scalar>(adapters: &[LoraAdapter<T>]) -> Result<LoraAdapter<T>> {
    if adapters.is_empty() {
        return Err(Error::Domain("nothing to merge".into()));
    }
    check_same_layers(adapters)?;
    let folded: Vec<LoraAdapter<T>> = adapters.iter().map(ensure_folded).collect();
    let w = T::one() / T::from_count(folded.len());
    let weights = vec![w; folded.len()];
    let mut layers = BTreeMap::new();
    for path in folded[0].layers.keys() {
        let parts: Vec<LoraLayer<T>> = folded.iter().map(|a| a.layers[path].clone()).collect();
        let layer = concat_layers(&parts, &weights).map_err(|e| Error::LayerShapeConflict {
            layer: path.clone(),
            detail: e.to_string(),
        })?;
        layers.insert(path.clone(), layer);
    }
    let rank: usize = folded.iter().map(|a| a.rank).sum();
    let mut out = LoraAdapter::new("ensemble", layers, T::from_count(rank), rank)?;
    out.scaling_folded = true;
    out.target_modules = merged_target_modules(adapters);
    out.extra_config = adapters[0].extra_config.clone();
    Ok(out)
}
