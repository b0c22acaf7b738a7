//! Rank-wise decomposition of LoRA layers.
//!
//! Rank `i` of a layer is the pair (row `i` of A, column `i` of B). Its
//! combined vector `[a, b]` is the unit that gets permuted, pooled and
//! clustered; a layer is fully described by the ordered list of its units.

use serde::Serialize;

use crate::adapter::{LoraAdapter, LoraLayer};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Matrix, Permutation};

/// Where an MSU came from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct MsuSource {
    pub adapter: String,
    pub layer: String,
    pub rank_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Msu<T> {
    /// Row of A, length `d_in`.
    pub a: Vec<T>,
    /// Column of B, length `d_out`.
    pub b: Vec<T>,
    pub source: MsuSource,
}

impl<T: Scalar> Msu<T> {
    /// `[a, b]`, length `d_in + d_out`.
    pub fn combined(&self) -> Vec<T> {
        let mut s = Vec::with_capacity(self.a.len() + self.b.len());
        s.extend_from_slice(&self.a);
        s.extend_from_slice(&self.b);
        s
    }

    /// Splits a combined vector at `d_in`.
    pub fn from_combined(s: &[T], d_in: usize, source: MsuSource) -> Result<Self> {
        if d_in == 0 || d_in >= s.len() {
            return Err(Error::dim(
                "Msu::from_combined",
                format!("cannot split vector of length {} at {d_in}", s.len()),
            ));
        }
        Ok(Self { a: s[..d_in].to_vec(), b: s[d_in..].to_vec(), source })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.a.len(), self.b.len())
    }
}

/// All MSUs for one layer path, pooled across adapters.
#[derive(Debug, Clone)]
pub struct MsuPool<T> {
    pub layer: String,
    pub d_in: usize,
    pub d_out: usize,
    pub msus: Vec<Msu<T>>,
}

impl<T: Scalar> MsuPool<T> {
    /// Pools layer `layer` from every adapter that has it, in input order.
    /// Adapters lacking the layer are skipped; shapes must agree.
    pub fn gather(layer: &str, adapters: &[LoraAdapter<T>]) -> Result<Self> {
        let mut dims: Option<((usize, usize), &str)> = None;
        let mut msus = Vec::new();
        for adapter in adapters {
            let Some(l) = adapter.layers.get(layer) else { continue };
            match dims {
                None => dims = Some((l.dims(), &adapter.name)),
                Some((d, first)) if d != l.dims() => {
                    return Err(Error::LayerShapeConflict {
                        layer: layer.to_string(),
                        detail: format!(
                            "{first} has (d_in, d_out) = {d:?} but {} has {:?}",
                            adapter.name,
                            l.dims()
                        ),
                    })
                }
                Some(_) => {}
            }
            msus.extend(extract_msus(l, &adapter.name, layer));
        }
        let Some(((d_in, d_out), _)) = dims else {
            return Err(Error::MissingLayer { layer: layer.to_string(), adapter: "<all>".into() });
        };
        Ok(Self { layer: layer.to_string(), d_in, d_out, msus })
    }

    pub fn len(&self) -> usize {
        self.msus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.msus.is_empty()
    }

    pub fn points(&self) -> Vec<Vec<T>> {
        self.msus.iter().map(Msu::combined).collect()
    }
}

/// Multiplies every B by `alpha / rank` and resets alpha to rank.
pub fn fold_scaling<T: Scalar>(adapter: &LoraAdapter<T>) -> Result<LoraAdapter<T>> {
    if adapter.scaling_folded {
        return Err(Error::AlreadyFolded(adapter.name.clone()));
    }
    let scale = adapter.scale();
    let mut out = adapter.clone();
    for layer in out.layers.values_mut() {
        layer.b = layer.b.scale(scale);
    }
    out.alpha = T::from_count(adapter.rank);
    out.scaling_folded = true;
    Ok(out)
}

/// `fold_scaling` unless already folded.
pub fn ensure_folded<T: Scalar>(adapter: &LoraAdapter<T>) -> LoraAdapter<T> {
    if adapter.scaling_folded {
        adapter.clone()
    } else {
        fold_scaling(adapter).expect("unfolded adapter folds")
    }
}

pub fn extract_msus<T: Scalar>(layer: &LoraLayer<T>, adapter: &str, path: &str) -> Vec<Msu<T>> {
    (0..layer.rank())
        .map(|i| Msu {
            a: layer.a.row(i).to_vec(),
            b: layer.b.col(i),
            source: MsuSource { adapter: adapter.to_string(), layer: path.to_string(), rank_index: i },
        })
        .collect()
}

/// Stacks a-vectors as rows of A and b-vectors as columns of B.
pub fn assemble_layer<T: Scalar>(msus: &[Msu<T>]) -> Result<LoraLayer<T>> {
    let first = msus
        .first()
        .ok_or_else(|| Error::Domain("cannot assemble a layer from zero MSUs".into()))?;
    let dims = first.dims();
    if let Some(bad) = msus.iter().find(|m| m.dims() != dims) {
        return Err(Error::dim(
            "assemble_layer",
            format!("MSU {:?} has dims {:?}, expected {dims:?}", bad.source, bad.dims()),
        ));
    }
    let a_rows: Vec<Vec<T>> = msus.iter().map(|m| m.a.clone()).collect();
    let b_cols: Vec<Vec<T>> = msus.iter().map(|m| m.b.clone()).collect();
    LoraLayer::new(Matrix::from_rows(&a_rows)?, Matrix::from_cols(&b_cols)?)
}

/// `A' = P·A`, `B' = B·Pᵀ`.
pub fn permute_layer<T: Scalar>(layer: &LoraLayer<T>, p: &Permutation) -> Result<LoraLayer<T>> {
    if p.len() != layer.rank() {
        return Err(Error::dim(
            "permute_layer",
            format!("permutation of length {} on rank {}", p.len(), layer.rank()),
        ));
    }
    Ok(LoraLayer { a: layer.a.apply_row_permutation(p)?, b: layer.b.apply_col_permutation(p)? })
}

/// Stacks layers rank-wise; block `j`'s b-vectors are multiplied by
/// `weights[j]`, so the result's `B·A` is `Σ wⱼ BⱼAⱼ`.
pub fn concat_layers<T: Scalar>(layers: &[LoraLayer<T>], weights: &[T]) -> Result<LoraLayer<T>> {
    if layers.len() != weights.len() {
        return Err(Error::dim(
            "concat_layers",
            format!("{} layers but {} weights", layers.len(), weights.len()),
        ));
    }
    let first = layers.first().ok_or_else(|| Error::Domain("concat of zero layers".into()))?;
    let mut msus = Vec::new();
    for (j, (layer, &w)) in layers.iter().zip(weights).enumerate() {
        if layer.dims() != first.dims() {
            return Err(Error::dim(
                "concat_layers",
                format!("layer {j} has dims {:?}, expected {:?}", layer.dims(), first.dims()),
            ));
        }
        for mut m in extract_msus(layer, "", "") {
            m.b.iter_mut().for_each(|v| *v *= w);
            msus.push(m);
        }
    }
    assemble_layer(&msus)
}

/// `scale · B·A`, shape `d_out x d_in`.
pub fn delta_weight<T: Scalar>(layer: &LoraLayer<T>, scale: T) -> Matrix<T> {
    layer.b.matmul(&layer.a).expect("layer factors conform").scale(scale)
}

/// Effective update of one adapter layer, `(alpha / rank) · B·A`.
pub fn adapter_delta<T: Scalar>(adapter: &LoraAdapter<T>, path: &str) -> Option<Matrix<T>> {
    adapter.layers.get(path).map(|l| delta_weight(l, adapter.scale()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use std::collections::BTreeMap;

    fn random_layer(r: usize, d_in: usize, d_out: usize, rng: &mut Rng) -> LoraLayer<f64> {
        LoraLayer::new(Matrix::gaussian(r, d_in, rng), Matrix::gaussian(d_out, r, rng)).unwrap()
    }

    fn single(layer: LoraLayer<f64>, alpha: f64) -> LoraAdapter<f64> {
        let r = layer.rank();
        LoraAdapter::new("t", BTreeMap::from([("l".to_string(), layer)]), alpha, r).unwrap()
    }

    #[test]
    fn fold_with_unit_factor() {
        let mut rng = Rng::new(1);
        let ad = single(random_layer(4, 3, 3, &mut rng), 4.0);
        let folded = fold_scaling(&ad).unwrap();
        assert_eq!(folded.layers["l"].b, ad.layers["l"].b);
        assert!(folded.scaling_folded);
    }

    #[test]
    fn fold_doubles_b_for_alpha_12_rank_6() {
        let mut rng = Rng::new(2);
        let ad = single(random_layer(6, 5, 4, &mut rng), 12.0);
        let folded = fold_scaling(&ad).unwrap();
        assert_eq!(folded.layers["l"].b, ad.layers["l"].b.scale(2.0));
        assert_eq!(folded.alpha, 6.0);
        assert_eq!(folded.scale(), 1.0);
        let before = adapter_delta(&ad, "l").unwrap();
        let after = adapter_delta(&folded, "l").unwrap();
        assert!(before.max_abs_diff(&after).unwrap() < 1e-12);
    }

    #[test]
    fn double_fold_is_an_error() {
        let mut rng = Rng::new(3);
        let folded = fold_scaling(&single(random_layer(2, 2, 2, &mut rng), 1.0)).unwrap();
        assert!(matches!(fold_scaling(&folded), Err(Error::AlreadyFolded(_))));
    }

    #[test]
    fn extract_reads_rows_and_columns() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let msus = extract_msus(&LoraLayer::new(a, b).unwrap(), "x", "l");
        assert_eq!(msus[0].combined(), vec![1.0, 2.0, 5.0, 7.0]);
        assert_eq!(msus[1].combined(), vec![3.0, 4.0, 6.0, 8.0]);
        assert_eq!(msus[1].source.rank_index, 1);
    }

    #[test]
    fn rank_one_extract() {
        let mut rng = Rng::new(4);
        let l = random_layer(1, 3, 2, &mut rng);
        let msus = extract_msus(&l, "x", "l");
        assert_eq!(msus.len(), 1);
        assert_eq!(msus[0].a, l.a.row(0));
        assert_eq!(msus[0].b, l.b.col(0));
        assert_eq!(assemble_layer(&msus).unwrap().rank(), 1);
    }

    #[test]
    fn extract_assemble_inverse_and_reversal() {
        let mut rng = Rng::new(5);
        let l = random_layer(7, 6, 5, &mut rng);
        let mut msus = extract_msus(&l, "x", "l");
        assert_eq!(assemble_layer(&msus).unwrap(), l);
        msus.reverse();
        let rev = assemble_layer(&msus).unwrap();
        assert!(delta_weight(&rev, 1.0).max_abs_diff(&delta_weight(&l, 1.0)).unwrap() < 1e-12);
    }

    #[test]
    fn assemble_errors() {
        assert!(assemble_layer::<f64>(&[]).is_err());
        let src = MsuSource { adapter: "a".into(), layer: "l".into(), rank_index: 0 };
        let m1 = Msu { a: vec![1.0, 2.0], b: vec![1.0], source: src.clone() };
        let m2 = Msu { a: vec![1.0], b: vec![1.0], source: src };
        assert!(matches!(assemble_layer(&[m1, m2]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn combined_split_round_trip() {
        let src = MsuSource { adapter: "a".into(), layer: "l".into(), rank_index: 3 };
        let m = Msu { a: vec![1.0, 2.0, 3.0], b: vec![4.0, 5.0], source: src.clone() };
        assert_eq!(Msu::from_combined(&m.combined(), 3, src).unwrap(), m);
    }

    #[test]
    fn permute_cases() {
        let mut rng = Rng::new(6);
        let l = random_layer(8, 5, 7, &mut rng);
        assert_eq!(permute_layer(&l, &Permutation::identity(8)).unwrap(), l);
        let p = Permutation::random(8, &mut rng);
        let q = Permutation::random(8, &mut rng);
        let pl = permute_layer(&l, &p).unwrap();
        let diff = delta_weight(&pl, 1.0).max_abs_diff(&delta_weight(&l, 1.0)).unwrap();
        assert!(diff < 1e-12);
        let twice = permute_layer(&pl, &q).unwrap();
        assert_eq!(twice, permute_layer(&l, &p.then(&q).unwrap()).unwrap());
        assert!(permute_layer(&l, &Permutation::identity(3)).is_err());
    }

    #[test]
    fn concat_single_and_pair() {
        let mut rng = Rng::new(7);
        let l1 = random_layer(1, 4, 3, &mut rng);
        let l2 = random_layer(1, 4, 3, &mut rng);
        assert_eq!(concat_layers(std::slice::from_ref(&l1), &[1.0]).unwrap(), l1);
        let c = concat_layers(&[l1.clone(), l2.clone()], &[1.0, 1.0]).unwrap();
        assert_eq!(c.rank(), 2);
        let expected = delta_weight(&l1, 1.0).add(&delta_weight(&l2, 1.0)).unwrap();
        assert!(delta_weight(&c, 1.0).max_abs_diff(&expected).unwrap() < 1e-12);
        let bad = random_layer(1, 5, 3, &mut rng);
        assert!(concat_layers(&[l1.clone(), bad], &[1.0, 1.0]).is_err());
        assert!(concat_layers(&[l1], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn delta_weight_cases() {
        let mut rng = Rng::new(8);
        let a = Matrix::gaussian(2, 3, &mut rng);
        let zero = LoraLayer::new(a, Matrix::zeros(4, 2)).unwrap();
        assert_eq!(delta_weight(&zero, 1.0).max_abs(), 0.0);

        let l = random_layer(1, 3, 2, &mut rng);
        let dw = delta_weight(&l, 1.0);
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(dw.get(i, j), l.b.get(i, 0) * l.a.get(0, j));
            }
        }
        assert_eq!(delta_weight(&l, 2.0), dw.scale(2.0));
    }

    #[test]
    fn pool_gathers_and_checks_shapes() {
        let mut rng = Rng::new(9);
        let a1 = single(random_layer(3, 4, 5, &mut rng), 3.0);
        let mut a2 = single(random_layer(2, 4, 5, &mut rng), 2.0);
        a2.name = "u".into();
        let pool = MsuPool::gather("l", &[a1.clone(), a2]).unwrap();
        assert_eq!(pool.len(), 5);
        assert_eq!((pool.d_in, pool.d_out), (4, 5));
        assert_eq!(pool.msus[3].source.adapter, "u");

        let mut wrong = single(random_layer(2, 3, 5, &mut rng), 2.0);
        wrong.name = "w".into();
        assert!(matches!(
            MsuPool::gather("l", &[a1, wrong]),
            Err(Error::LayerShapeConflict { .. })
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use crate::rng::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(128))]

            #[test]
            fn permutation_invariance(seed in any::<u64>(), r in 1usize..12, d_in in 1usize..10, d_out in 1usize..10) {
                let mut rng = Rng::new(seed);
                let l = random_layer(r, d_in, d_out, &mut rng);
                let p = Permutation::random(r, &mut rng);
                let pl = permute_layer(&l, &p).unwrap();
                let diff = delta_weight(&pl, 1.0).max_abs_diff(&delta_weight(&l, 1.0)).unwrap();
                prop_assert!(diff < 1e-12);
            }

            #[test]
            fn concat_sums_deltas(seed in any::<u64>(), n in 2usize..=5) {
                let mut rng = Rng::new(seed);
                let layers: Vec<_> = (0..n).map(|_| {
                    let r = 1 + rng.below(4);
                    random_layer(r, 6, 5, &mut rng)
                }).collect();
                let weights: Vec<f64> = (0..n).map(|_| rng.gaussian()).collect();
                let c = concat_layers(&layers, &weights).unwrap();
                let mut expected = Matrix::zeros(5, 6);
                for (l, &w) in layers.iter().zip(&weights) {
                    expected = expected.add(&delta_weight(l, w)).unwrap();
                }
                prop_assert!(delta_weight(&c, 1.0).max_abs_diff(&expected).unwrap() < 1e-12);
            }

            #[test]
            fn fold_preserves_forward(seed in any::<u64>(), r in 1usize..8, alpha in 0.5f64..32.0) {
                let mut rng = Rng::new(seed);
                let ad = single(random_layer(r, 4, 6, &mut rng), alpha);
                let folded = fold_scaling(&ad).unwrap();
                let diff = adapter_delta(&ad, "l").unwrap()
                    .max_abs_diff(&adapter_delta(&folded, "l").unwrap()).unwrap();
                prop_assert!(diff < 1e-12);
            }
        }
    }
}
