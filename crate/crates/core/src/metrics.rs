//! Disentanglement metrics: Z-diff, SAP, MIG, and block-level MIG.
//!
//! All of them reduce to discrete statistics over (latent, factor) pairs:
//! MIG bins each latent dimension and measures mutual-information gaps; SAP
//! scores single-threshold stump classifiers; Z-diff votes with the argmin of
//! standardized pairwise differences. Everything is deterministic given its
//! seed and invariant to positive per-dimension rescaling of the latents.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::BlockLayout;
use crate::ndgrad::Array;
use crate::rng::{Stream, StreamKind};

/// Ground-truth generative factors for a set of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorTable {
    names: Vec<String>,
    cardinalities: Vec<usize>,
    /// Row-major [n_samples, n_factors].
    values: Vec<usize>,
}

impl FactorTable {
    pub fn new(names: Vec<String>, cardinalities: Vec<usize>, values: Vec<usize>) -> Result<Self> {
        if names.len() != cardinalities.len() {
            return Err(Error::Validation(format!(
                "{} names for {} cardinalities",
                names.len(),
                cardinalities.len()
            )));
        }
        let k = names.len();
        if k == 0 || values.len() % k != 0 {
            return Err(Error::Validation(format!(
                "factor values (len {}) do not tile {} factors",
                values.len(),
                k
            )));
        }
        for (i, &v) in values.iter().enumerate() {
            let card = cardinalities[i % k];
            if v >= card {
                return Err(Error::Validation(format!(
                    "factor value {} out of range {} at entry {}",
                    v, card, i
                )));
            }
        }
        Ok(FactorTable {
            names,
            cardinalities,
            values,
        })
    }

    pub fn num_samples(&self) -> usize {
        self.values.len() / self.names.len()
    }

    pub fn num_factors(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn cardinality(&self, factor: usize) -> usize {
        self.cardinalities[factor]
    }

    pub fn value(&self, sample: usize, factor: usize) -> usize {
        self.values[sample * self.names.len() + factor]
    }

    pub fn column(&self, factor: usize) -> Vec<usize> {
        (0..self.num_samples()).map(|s| self.value(s, factor)).collect()
    }

    /// Empirical entropy of one factor column, in nats.
    pub fn entropy(&self, factor: usize) -> f64 {
        let mut counts = vec![0usize; self.cardinality(factor)];
        for s in 0..self.num_samples() {
            counts[self.value(s, factor)] += 1;
        }
        let n = self.num_samples() as f64;
        counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum()
    }

    /// Rows selected by index, in order.
    pub fn gather(&self, indices: &[usize]) -> Result<FactorTable> {
        let k = self.num_factors();
        let mut values = Vec::with_capacity(indices.len() * k);
        for &i in indices {
            if i >= self.num_samples() {
                return Err(Error::Validation(format!(
                    "sample index {} out of range ({})",
                    i,
                    self.num_samples()
                )));
            }
            values.extend_from_slice(&self.values[i * k..(i + 1) * k]);
        }
        FactorTable::new(self.names.clone(), self.cardinalities.clone(), values)
    }
}

/// The metric suite's JSON output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    /// Z-diff vote accuracy as a percentage in [0, 100].
    pub z_diff_pct: f64,
    pub sap: f64,
    pub mig: f64,
    pub block_mig: f64,
    pub per_factor_mig: Vec<f64>,
    pub per_factor_sap: Vec<f64>,
    pub per_factor_block_mig: Vec<f64>,
    pub factor_names: Vec<String>,
    /// Gaussian-fit KL(q(s^i) ∥ p(s)) per layer (evaluation diagnostic).
    pub per_layer_kl: Vec<f64>,
}

impl ScoreReport {
    pub fn validate(&self) -> Result<()> {
        let unit = [
            ("sap", self.sap),
            ("mig", self.mig),
            ("block_mig", self.block_mig),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Validation(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if !(0.0..=100.0).contains(&self.z_diff_pct) {
            return Err(Error::Validation(format!(
                "z_diff_pct = {} outside [0, 100]",
                self.z_diff_pct
            )));
        }
        Ok(())
    }
}

/// Plug-in mutual information of a joint count table, in nats (0·log 0 ≡ 0).
pub fn mi_discrete(joint_counts: &Array) -> Result<f64> {
    if joint_counts.rank() != 2 {
        return Err(Error::Validation(format!(
            "joint counts must be a matrix, got {:?}",
            joint_counts.shape()
        )));
    }
    if joint_counts.data().iter().any(|&c| c < 0.0) {
        return Err(Error::Validation("negative count in joint table".into()));
    }
    let total: f64 = joint_counts.data().iter().sum();
    if total <= 0.0 {
        return Err(Error::Validation("all-zero joint count table".into()));
    }
    let (rows, cols) = (joint_counts.shape()[0], joint_counts.shape()[1]);
    Ok(mi_from_counts(joint_counts.data(), rows, cols, total))
}

fn mi_from_counts(counts: &[f64], rows: usize, cols: usize, total: f64) -> f64 {
    let mut row_sum = vec![0.0; rows];
    let mut col_sum = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            row_sum[r] += counts[r * cols + c];
            col_sum[c] += counts[r * cols + c];
        }
    }
    let mut mi = 0.0;
    for r in 0..rows {
        for c in 0..cols {
            let j = counts[r * cols + c];
            if j > 0.0 {
                mi += (j / total) * ((j * total) / (row_sum[r] * col_sum[c])).ln();
            }
        }
    }
    mi.max(0.0)
}

/// Discretize one latent column. If there are at most `bins` distinct values
/// each value is its own bin (exact-count mode); otherwise samples are split
/// into `bins` equal-count rank bins. Both modes are invariant to positive
/// affine rescaling. Returns (bin index per sample, number of bins used).
fn discretize_column(values: &[f64], bins: usize) -> (Vec<usize>, usize) {
    let n = values.len();
    let mut distinct: Vec<f64> = values.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() <= bins {
        let assign = values
            .iter()
            .map(|v| distinct.partition_point(|d| d < v))
            .collect();
        return (assign, distinct.len());
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut assign = vec![0usize; n];
    for (rank, &idx) in order.iter().enumerate() {
        assign[idx] = rank * bins / n;
    }
    (assign, bins)
}

fn mi_latent_factor(
    bins_assign: &[usize],
    n_bins: usize,
    factor_col: &[usize],
    cardinality: usize,
) -> f64 {
    let mut counts = vec![0.0; n_bins * cardinality];
    for (&b, &v) in bins_assign.iter().zip(factor_col) {
        counts[b * cardinality + v] += 1.0;
    }
    mi_from_counts(&counts, n_bins, cardinality, bins_assign.len() as f64)
}

#[derive(Clone, Debug)]
pub struct MigScore {
    pub overall: f64,
    pub per_factor: Vec<f64>,
}

fn mig_over_columns(
    columns: &[(Vec<usize>, usize)],
    table: &FactorTable,
) -> Result<MigScore> {
    if columns.is_empty() {
        return Err(Error::Validation("no latent dimensions".into()));
    }
    let mut per_factor = Vec::with_capacity(table.num_factors());
    let mut total = 0.0;
    let mut counted = 0usize;
    for k in 0..table.num_factors() {
        let h = table.entropy(k);
        if h <= 0.0 {
            per_factor.push(0.0);
            continue;
        }
        let col = table.column(k);
        let mut best = 0.0f64;
        let mut second = 0.0f64;
        for (assign, n_bins) in columns {
            let mi = mi_latent_factor(assign, *n_bins, &col, table.cardinality(k));
            if mi > best {
                second = best;
                best = mi;
            } else if mi > second {
                second = mi;
            }
        }
        let gap = ((best - second) / h).clamp(0.0, 1.0);
        per_factor.push(gap);
        total += gap;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::Validation(
            "every factor is constant; MIG undefined".into(),
        ));
    }
    Ok(MigScore {
        overall: total / counted as f64,
        per_factor,
    })
}

fn latent_columns(latents: &Array, bins: usize) -> Result<Vec<(Vec<usize>, usize)>> {
    if latents.rank() != 2 {
        return Err(Error::Validation(format!(
            "latents must be [n, d], got {:?}",
            latents.shape()
        )));
    }
    let (n, d) = (latents.shape()[0], latents.shape()[1]);
    if bins < 2 {
        return Err(Error::Validation(format!("bins must be ≥ 2, got {bins}")));
    }
    if n < bins {
        return Err(Error::Validation(format!(
            "need at least as many samples ({n}) as bins ({bins})"
        )));
    }
    let mut cols = Vec::with_capacity(d);
    let mut scratch = vec![0.0; n];
    for j in 0..d {
        for r in 0..n {
            scratch[r] = latents.data()[r * d + j];
        }
        cols.push(discretize_column(&scratch, bins));
    }
    Ok(cols)
}

/// Mutual information gap over individual latent dimensions.
pub fn mig_detailed(latents: &Array, table: &FactorTable, bins: usize) -> Result<MigScore> {
    if latents.shape()[0] != table.num_samples() {
        return Err(Error::Validation(format!(
            "{} latent rows vs {} factor rows",
            latents.shape()[0],
            table.num_samples()
        )));
    }
    let cols = latent_columns(latents, bins)?;
    mig_over_columns(&cols, table)
}

pub fn mig(latents: &Array, table: &FactorTable, bins: usize) -> Result<f64> {
    Ok(mig_detailed(latents, table, bins)?.overall)
}

/// Diagonal projection s·1/√dim of each feature block and each 2-wide
/// residual sub-block, as a reduced latent matrix.
pub fn block_projections(latents: &Array, layout: &BlockLayout) -> Result<Array> {
    if latents.rank() != 2 || latents.shape()[1] != layout.latent_dim() {
        return Err(Error::Validation(format!(
            "latents {:?} do not match layout width {}",
            latents.shape(),
            layout.latent_dim()
        )));
    }
    let n = latents.shape()[0];
    let d = layout.latent_dim();
    let blocks = layout.traversal_blocks();
    let mut data = Vec::with_capacity(n * blocks);
    for r in 0..n {
        let row = &latents.data()[r * d..(r + 1) * d];
        for b in 0..blocks {
            let (offset, width) = layout.traversal_span(b).expect("in range");
            let sum: f64 = row[offset..offset + width].iter().sum();
            data.push(sum / (width as f64).sqrt());
        }
    }
    Array::new(vec![n, blocks], data)
}

/// MIG computed over block projections instead of raw dimensions.
pub fn block_mig_detailed(
    latents: &Array,
    layout: &BlockLayout,
    table: &FactorTable,
    bins: usize,
) -> Result<MigScore> {
    let projected = block_projections(latents, layout)?;
    mig_detailed(&projected, table, bins)
}

pub fn block_mig(
    latents: &Array,
    layout: &BlockLayout,
    table: &FactorTable,
    bins: usize,
) -> Result<f64> {
    Ok(block_mig_detailed(latents, layout, table, bins)?.overall)
}

#[derive(Clone, Debug)]
pub struct SapScore {
    pub overall: f64,
    pub per_factor: Vec<f64>,
}

/// Best rescaled balanced accuracy of a single-threshold stump predicting
/// `factor_col` from `values`: each side of the threshold predicts one class.
fn best_stump_score(values: &[f64], factor_col: &[usize], cardinality: usize) -> f64 {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));

    let mut class_total = vec![0usize; cardinality];
    for &v in factor_col {
        class_total[v] += 1;
    }
    let k_eff = class_total.iter().filter(|&&c| c > 0).count();
    if k_eff < 2 {
        return 0.0;
    }

    // Sweep thresholds between distinct consecutive values, maintaining
    // left-side class counts. Balanced accuracy of a stump predicting class a
    // left and b right (a ≠ b) is (recallₐ + recall_b)/K over the K classes.
    let k = cardinality as f64;
    let chance = 1.0 / k;
    let mut left = vec![0usize; cardinality];
    let mut best_bacc = chance; // constant predictor baseline
    for (pos, &idx) in order.iter().enumerate() {
        left[factor_col[idx]] += 1;
        if pos + 1 == n {
            break;
        }
        // Threshold only between different values.
        if values[order[pos + 1]] == values[idx] {
            continue;
        }
        let (mut l1, mut l1c, mut l2) = (0.0f64, usize::MAX, 0.0f64);
        let (mut r1, mut r1c, mut r2) = (0.0f64, usize::MAX, 0.0f64);
        for c in 0..cardinality {
            if class_total[c] == 0 {
                continue;
            }
            let lr = left[c] as f64 / class_total[c] as f64;
            let rr = (class_total[c] - left[c]) as f64 / class_total[c] as f64;
            if lr > l1 {
                l2 = l1;
                l1 = lr;
                l1c = c;
            } else if lr > l2 {
                l2 = lr;
            }
            if rr > r1 {
                r2 = r1;
                r1 = rr;
                r1c = c;
            } else if rr > r2 {
                r2 = rr;
            }
        }
        let bacc = if l1c != r1c {
            (l1 + r1) / k
        } else {
            ((l1 + r2) / k).max((l2 + r1) / k)
        };
        best_bacc = best_bacc.max(bacc);
    }
    ((best_bacc - chance) / (1.0 - chance)).clamp(0.0, 1.0)
}

/// SAP: mean over factors of the gap between the two best single-dimension
/// stump scores. Factors with fewer than two observed classes are excluded.
pub fn sap_detailed(latents: &Array, table: &FactorTable) -> Result<SapScore> {
    if latents.rank() != 2 || latents.shape()[0] != table.num_samples() {
        return Err(Error::Validation(format!(
            "latents {:?} vs {} factor rows",
            latents.shape(),
            table.num_samples()
        )));
    }
    let (n, d) = (latents.shape()[0], latents.shape()[1]);
    let mut per_factor = Vec::with_capacity(table.num_factors());
    let mut total = 0.0;
    let mut counted = 0usize;
    let mut column = vec![0.0; n];
    for kf in 0..table.num_factors() {
        let col = table.column(kf);
        let observed = {
            let mut seen = vec![false; table.cardinality(kf)];
            for &v in &col {
                seen[v] = true;
            }
            seen.iter().filter(|&&s| s).count()
        };
        if observed < 2 {
            per_factor.push(0.0);
            continue;
        }
        let mut best = 0.0f64;
        let mut second = 0.0f64;
        for j in 0..d {
            for r in 0..n {
                column[r] = latents.data()[r * d + j];
            }
            let s = best_stump_score(&column, &col, table.cardinality(kf));
            if s > best {
                second = best;
                best = s;
            } else if s > second {
                second = s;
            }
        }
        let gap = (best - second).clamp(0.0, 1.0);
        per_factor.push(gap);
        total += gap;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::Validation(
            "every factor is constant; SAP undefined".into(),
        ));
    }
    Ok(SapScore {
        overall: total / counted as f64,
        per_factor,
    })
}

pub fn sap(latents: &Array, table: &FactorTable) -> Result<f64> {
    Ok(sap_detailed(latents, table)?.overall)
}

/// Z-diff: identify the fixed factor of image pairs from per-dimension
/// absolute latent differences.
///
/// Per vote: fix a random factor, draw `n_pairs` sample pairs agreeing on it,
/// average |z_a − z_b| per dimension (latents standardized by global per-dim
/// std; near-constant dims excluded), and let the argmin dimension vote. A
/// majority-vote classifier is trained on the first half of the votes and
/// scored on the second; the held-out accuracy is returned ×100.
pub fn z_diff(
    latents: &Array,
    table: &FactorTable,
    n_votes: usize,
    n_pairs: usize,
    seed: u64,
) -> Result<f64> {
    if latents.rank() != 2 || latents.shape()[0] != table.num_samples() {
        return Err(Error::Validation(format!(
            "latents {:?} vs {} factor rows",
            latents.shape(),
            table.num_samples()
        )));
    }
    if n_votes < 2 || n_pairs == 0 {
        return Err(Error::Validation(
            "z_diff needs at least 2 votes and 1 pair per vote".into(),
        ));
    }
    let (n, d) = (latents.shape()[0], latents.shape()[1]);

    // Global per-dimension standard deviations; exclude degenerate dims.
    let mut std = vec![0.0; d];
    {
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for j in 0..d {
                mean[j] += latents.data()[r * d + j];
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        for r in 0..n {
            for j in 0..d {
                let v = latents.data()[r * d + j] - mean[j];
                std[j] += v * v;
            }
        }
        for s in std.iter_mut() {
            *s = (*s / n as f64).sqrt();
        }
    }
    let usable: Vec<usize> = (0..d).filter(|&j| std[j] > 1e-12).collect();
    if usable.is_empty() {
        return Err(Error::Validation(
            "all latent dimensions are constant".into(),
        ));
    }

    // Factors eligible for fixing: ≥2 values observed, every group ≥2 rows
    // would be ideal but a single-sample group still allows a (degenerate)
    // identical pair, so only require the factor to vary.
    let mut groups: Vec<Vec<Vec<usize>>> = Vec::with_capacity(table.num_factors());
    for k in 0..table.num_factors() {
        let mut g = vec![Vec::new(); table.cardinality(k)];
        for s in 0..n {
            g[table.value(s, k)].push(s);
        }
        groups.push(g);
    }
    let eligible: Vec<usize> = (0..table.num_factors())
        .filter(|&k| groups[k].iter().filter(|g| !g.is_empty()).count() >= 1)
        .collect();
    if eligible.is_empty() {
        return Err(Error::Validation("no usable factors".into()));
    }

    let mut rng = Stream::derive(seed, StreamKind::Metrics, 0);
    let mut votes: Vec<(usize, usize)> = Vec::with_capacity(n_votes); // (argmin dim, factor)
    let mut diff = vec![0.0; d];
    for _ in 0..n_votes {
        let k = eligible[rng.below(eligible.len())];
        diff.iter_mut().for_each(|v| *v = 0.0);
        for _ in 0..n_pairs {
            let a = rng.below(n);
            let group = &groups[k][table.value(a, k)];
            let b = group[rng.below(group.len())];
            for &j in &usable {
                diff[j] += (latents.data()[a * d + j] - latents.data()[b * d + j]).abs();
            }
        }
        let mut best = usable[0];
        let mut best_v = f64::INFINITY;
        for &j in &usable {
            let v = diff[j] / (n_pairs as f64 * std[j]);
            if v < best_v {
                best_v = v;
                best = j;
            }
        }
        votes.push((best, k));
    }

    // Majority-vote classifier: train on the first half, test on the rest.
    let split = n_votes / 2;
    let mut tally = vec![vec![0usize; table.num_factors()]; d];
    for &(dim, k) in &votes[..split] {
        tally[dim][k] += 1;
    }
    let predict: Vec<Option<usize>> = tally
        .iter()
        .map(|row| {
            let best = row.iter().copied().max().unwrap_or(0);
            if best == 0 {
                None
            } else {
                row.iter().position(|&c| c == best)
            }
        })
        .collect();
    let test = &votes[split..];
    let correct = test
        .iter()
        .filter(|&&(dim, k)| predict[dim] == Some(k))
        .count();
    Ok(100.0 * correct as f64 / test.len() as f64)
}
