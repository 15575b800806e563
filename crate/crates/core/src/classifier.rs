//! Image-to-class top-k cosine classifier.
//!
//! Each class pools the descriptors of all its support images. A query
//! descriptor's score against a class is the sum of its `k` largest cosine
//! similarities within that pool; an image's class score sums this over its
//! descriptors.

use ldca_tensor::{top_k_indices, Tape, Tensor, Var};

use crate::descriptors::DescriptorMap;
use crate::error::{LdcaError, Result};

/// Scales each row of an `n × d` matrix to unit length. Zero rows stay zero,
/// so their cosine with anything is 0.
pub fn unit_rows(rows: &[f64], d: usize) -> Vec<f64> {
    let mut out = rows.to_vec();
    for row in out.chunks_mut(d) {
        let norm = row.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|a| *a /= norm);
        }
    }
    out
}

/// All support descriptors of one class, stacked as rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPool {
    pub class: usize,
    /// `[n, D]`
    pub descriptors: Tensor,
    /// Row-normalized copy of `descriptors`.
    pub unit: Tensor,
}

impl ClassPool {
    /// Pool from an `[n, D]` matrix of descriptors.
    pub fn new(class: usize, descriptors: Tensor) -> Result<Self> {
        if descriptors.ndim() != 2 {
            return Err(LdcaError::Input(format!(
                "class pool must be an n×D matrix, got {:?}",
                descriptors.shape()
            )));
        }
        let d = descriptors.shape()[1];
        let unit = Tensor::new(descriptors.shape(), unit_rows(descriptors.data(), d))?;
        Ok(ClassPool {
            class,
            descriptors,
            unit,
        })
    }

    /// Pool of every descriptor of every given support map.
    pub fn from_maps(class: usize, maps: &[&DescriptorMap]) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| LdcaError::Usage(format!("class {class} has no support images")))?;
        let d = first.channels();
        let mut rows = Vec::new();
        for m in maps {
            if m.channels() != d {
                return Err(LdcaError::Input(format!(
                    "support maps of class {class} mix {d} and {} channels",
                    m.channels()
                )));
            }
            rows.extend(m.rows());
        }
        let n = rows.len() / d;
        ClassPool::new(class, Tensor::new(&[n, d], rows)?)
    }

    pub fn len(&self) -> usize {
        self.descriptors.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.descriptors.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassScores {
    pub scores: Vec<f64>,
    /// Index (into the pool list) of the highest score, lowest index on ties.
    pub label: usize,
    pub k: usize,
}

fn check_k(k: usize, pool: &ClassPool) -> Result<()> {
    if k == 0 || k > pool.len() {
        return Err(LdcaError::Config(format!(
            "k = {k} is outside 1..={} for the pool of class {}",
            pool.len(),
            pool.class
        )));
    }
    Ok(())
}

/// The `k` largest cosine similarities between `q` and the pool rows,
/// descending, ties to the lower pool index.
pub fn cosine_topk(q: &[f64], pool: &ClassPool, k: usize) -> Result<Vec<f64>> {
    check_k(k, pool)?;
    if q.len() != pool.dim() {
        return Err(LdcaError::Input(format!(
            "query descriptor has {} values, pool has {}",
            q.len(),
            pool.dim()
        )));
    }
    let qn = unit_rows(q, q.len());
    let sims: Vec<f64> = pool
        .unit
        .data()
        .chunks(pool.dim())
        .map(|row| row.iter().zip(&qn).map(|(a, b)| a * b).sum())
        .collect();
    let mut idx = Vec::new();
    top_k_indices(&sims, k, &mut idx);
    Ok(idx.into_iter().map(|i| sims[i]).collect())
}

/// Row-normalized `M × D` descriptors of a query map.
pub fn query_rows(query: &DescriptorMap) -> Result<Tensor> {
    let d = query.channels();
    Ok(Tensor::new(
        &[query.count(), d],
        unit_rows(&query.rows(), d),
    )?)
}

fn score_unit(
    query_unit: &Tensor,
    pool: &ClassPool,
    k: usize,
    idx: &mut Vec<usize>,
) -> Result<f64> {
    check_k(k, pool)?;
    let sims = query_unit.matmul_t(&pool.unit)?;
    let mut total = 0.0;
    for row in sims.data().chunks(pool.len()) {
        top_k_indices(row, k, idx);
        total += idx.iter().map(|&j| row[j]).sum::<f64>();
    }
    Ok(total)
}

/// `Σ_m Σ_{j≤k} cos(q_m, nn_j(q_m))` over all query descriptors.
pub fn image_to_class_score(query: &DescriptorMap, pool: &ClassPool, k: usize) -> Result<f64> {
    score_unit(&query_rows(query)?, pool, k, &mut Vec::new())
}

/// Scores a query against every class pool and picks the best.
pub fn classify(query: &DescriptorMap, pools: &[ClassPool], k: usize) -> Result<ClassScores> {
    classify_unit(&query_rows(query)?, pools, k)
}

/// As [`classify`] with pre-normalized `[M, D]` query rows.
pub fn classify_unit(query_unit: &Tensor, pools: &[ClassPool], k: usize) -> Result<ClassScores> {
    if pools.is_empty() {
        return Err(LdcaError::Usage(
            "no class pools to classify against".into(),
        ));
    }
    let mut idx = Vec::new();
    let scores = pools
        .iter()
        .map(|p| score_unit(query_unit, p, k, &mut idx))
        .collect::<Result<Vec<_>>>()?;
    Ok(ClassScores {
        label: argmax(&scores),
        scores,
        k,
    })
}

/// Sum of the `k` largest values (`k ≤ values.len()`). The sum does not
/// depend on how ties are broken.
pub fn topk_sum(values: &[f64], k: usize, scratch: &mut Vec<f64>) -> f64 {
    if k == 1 {
        return values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    }
    scratch.clear();
    scratch.extend_from_slice(values);
    if k < scratch.len() {
        scratch.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
    }
    scratch[..k].iter().sum()
}

/// Class scores of several queries at once.
///
/// `queries` is `[Q·M, D]` and `support` `[C·P, D]`, both unit-normalized,
/// with each class's `P` rows consecutive. Returns a `[Q, C]` score table
/// per `k`.
pub fn batch_scores(
    queries: &Tensor,
    support: &Tensor,
    classes: usize,
    m: usize,
    ks: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let rows = support.shape()[0];
    if classes == 0
        || !rows.is_multiple_of(classes)
        || m == 0
        || !queries.shape()[0].is_multiple_of(m)
    {
        return Err(LdcaError::Input(format!(
            "{} support rows over {classes} classes, {} query rows of {m} descriptors",
            rows,
            queries.shape()[0]
        )));
    }
    let p = rows / classes;
    if let Some(k) = ks.iter().find(|&&k| k == 0 || k > p) {
        return Err(LdcaError::Config(format!(
            "k = {k} is outside 1..={p} (class pool size)"
        )));
    }
    let n_queries = queries.shape()[0] / m;
    let sims = queries.matmul_t(support)?;
    let mut tables = vec![vec![0.0; n_queries * classes]; ks.len()];
    let mut scratch = Vec::with_capacity(p);
    for (i, row) in sims.data().chunks(rows).enumerate() {
        let q = i / m;
        for (c, seg) in row.chunks(p).enumerate() {
            for (table, &k) in tables.iter_mut().zip(ks) {
                table[q * classes + c] += topk_sum(seg, k, &mut scratch);
            }
        }
    }
    Ok(tables)
}

/// First index of the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Differentiable class logits for a batch of queries.
///
/// `queries` is `[Q·M, D]`: `M` descriptors per query image, images in order.
/// `support` is `[C·S, D]`: each class contributes `S` consecutive rows.
/// Returns `[Q, C]` logits `score / temperature`; `None` uses `M`.
pub fn episode_logits(
    tape: &mut Tape,
    queries: Var,
    support: Var,
    classes: usize,
    descriptors_per_query: usize,
    k: usize,
    temperature: Option<f64>,
) -> Result<Var> {
    let m = descriptors_per_query;
    let tau = temperature.unwrap_or(m as f64);
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(LdcaError::Config(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    if m == 0 || !tape.shape(queries)[0].is_multiple_of(m) {
        return Err(LdcaError::Input(format!(
            "{} query rows are not a multiple of {m} descriptors",
            tape.shape(queries)[0]
        )));
    }
    let q = tape.normalize_rows(queries)?;
    let s = tape.normalize_rows(support)?;
    let st = tape.transpose(s)?;
    let sims = tape.matmul(q, st)?;
    let per_descriptor = tape.topk_segment_sum(sims, classes, k)?;
    let scores = tape.sum_rows_grouped(per_descriptor, m)?;
    Ok(tape.scale(scores, 1.0 / tau)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(rows: &[&[f64]]) -> ClassPool {
        ClassPool::new(0, Tensor::from_rows(rows)).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let p = pool(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(cosine_topk(&[1.0, 0.0], &p, 1).unwrap(), vec![1.0]);
        let p = pool(&[&[2.0, 0.0]]);
        assert_eq!(cosine_topk(&[1.0, 0.0], &p, 1).unwrap(), vec![1.0]);
    }

    #[test]
    fn k_outside_pool_is_rejected() {
        let p = pool(&[&[1.0, 0.0]]);
        assert!(matches!(
            cosine_topk(&[1.0, 0.0], &p, 2),
            Err(LdcaError::Config(_))
        ));
        assert!(matches!(
            cosine_topk(&[1.0, 0.0], &p, 0),
            Err(LdcaError::Config(_))
        ));
    }

    #[test]
    fn zero_descriptor_has_zero_cosine() {
        let p = pool(&[&[0.0, 0.0], &[-1.0, 0.0]]);
        assert_eq!(cosine_topk(&[1.0, 0.0], &p, 2).unwrap(), vec![0.0, -1.0]);
        assert_eq!(cosine_topk(&[0.0, 0.0], &p, 1).unwrap(), vec![0.0]);
    }

    #[test]
    fn topk_sum_matches_sorting() {
        let v = [0.3, -1.0, 0.9, 0.3, 0.5];
        let mut s = Vec::new();
        assert_eq!(topk_sum(&v, 1, &mut s), 0.9);
        assert!((topk_sum(&v, 3, &mut s) - 1.7).abs() < 1e-15);
        assert!((topk_sum(&v, 5, &mut s) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0]), 0);
    }

    #[test]
    fn classify_needs_pools() {
        let q = DescriptorMap::new(Tensor::ones(&[2, 1, 1])).unwrap();
        assert!(matches!(classify(&q, &[], 1), Err(LdcaError::Usage(_))));
    }
}
