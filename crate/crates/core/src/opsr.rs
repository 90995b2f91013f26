//! Outcome-predictive state representations.
//!
//! An OPSR vector lists the expected outcomes a state produces under every
//! open-loop action sequence up to some horizon `k`. Two layouts are offered:
//!
//! * [`OpsrVariant::FullStack`]: for each sequence of exactly `k` actions, the
//!   expected outcomes of all `k` steps, giving `|A|^k * k * d` entries.
//! * [`OpsrVariant::TerminalUpTo`]: for each sequence of length `1..=k`, the
//!   expected outcome of its last step only, giving `d * sum_i |A|^i` entries.
//!   Blocks are ordered by length, and sequences lexicographically inside each.
//!
//! Both induce the same partition of states because a step-`i` outcome of a
//! long sequence is the final-step outcome of its length-`i` prefix.
//!
//! The module also hosts the linear-algebra helpers used on OPSR data: PCA
//! and a Laplacian eigenmap for plotting.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::abstraction::{ClassLabel, StateAbstraction};
use crate::error::{Error, Result};
use crate::mdp::TabularMdp;
use crate::outcomes::{abstraction_with, quantize, FingerprintConfig, OutcomeModel, SequenceWalker, DEFAULT_RESOLUTION};

/// Largest OPSR vector length built without complaint.
pub const OPSR_LENGTH_CAP: u128 = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OpsrVariant {
    FullStack,
    #[default]
    TerminalUpTo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpsrVector {
    pub k: usize,
    pub variant: OpsrVariant,
    pub values: Vec<f64>,
}

impl OpsrVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Expected length of an OPSR vector.
pub fn opsr_length(variant: OpsrVariant, n_actions: usize, dim: usize, k: usize) -> u128 {
    let a = n_actions as u128;
    match variant {
        OpsrVariant::FullStack => a.saturating_pow(k as u32).saturating_mul(k as u128).saturating_mul(dim as u128),
        OpsrVariant::TerminalUpTo => {
            let mut total: u128 = 0;
            let mut pow: u128 = 1;
            for _ in 0..k {
                pow = pow.saturating_mul(a);
                total = total.saturating_add(pow);
            }
            total.saturating_mul(dim as u128)
        }
    }
}

/// Builds OPSR vectors for the states of one task.
pub struct OpsrBuilder<'m> {
    walker: SequenceWalker<'m>,
    k: usize,
    variant: OpsrVariant,
    offsets: Vec<usize>,
}

impl<'m> OpsrBuilder<'m> {
    pub fn new(mdp: &'m TabularMdp, om: &OutcomeModel, k: usize, variant: OpsrVariant) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("OPSR horizon must be at least 1".into()));
        }
        let len = opsr_length(variant, mdp.n_actions(), om.dim(), k);
        if len > OPSR_LENGTH_CAP {
            return Err(Error::CapExceeded { what: "OPSR vector length", size: len, cap: OPSR_LENGTH_CAP });
        }
        // offsets[i] = number of sequences shorter than i + 1
        let mut offsets = Vec::with_capacity(k);
        let mut acc = 0usize;
        let mut pow = 1usize;
        for _ in 0..k {
            offsets.push(acc);
            pow *= mdp.n_actions();
            acc += pow;
        }
        Ok(OpsrBuilder { walker: SequenceWalker::new(mdp, om)?, k, variant, offsets })
    }

    pub fn len(&self) -> usize {
        opsr_length(self.variant, self.walker.mdp().n_actions(), self.walker.dim(), self.k) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn vector(&self, s: usize) -> Result<OpsrVector> {
        self.walker.mdp().check_state(s)?;
        let d = self.walker.dim();
        let na = self.walker.mdp().n_actions();
        let k = self.k;
        let mut values = vec![0.0; self.len()];
        match self.variant {
            OpsrVariant::TerminalUpTo => {
                self.walker.walk(s, k, |len, rank, out| {
                    let base = (self.offsets[len - 1] + rank as usize) * d;
                    values[base..base + d].copy_from_slice(out);
                });
            }
            OpsrVariant::FullStack => {
                // A length-`len` prefix with rank `r` is shared by na^(k-len)
                // full sequences, starting at rank r * na^(k-len).
                self.walker.walk(s, k, |len, rank, out| {
                    if out.iter().all(|&x| x == 0.0) {
                        return;
                    }
                    let span = na.pow((k - len) as u32);
                    let first = rank as usize * span;
                    for full in first..first + span {
                        let base = (full * k + (len - 1)) * d;
                        values[base..base + d].copy_from_slice(out);
                    }
                });
            }
        }
        Ok(OpsrVector { k, variant: self.variant, values })
    }

    /// Vectors of every state, in state order.
    pub fn all(&self) -> Result<Vec<OpsrVector>> {
        (0..self.walker.mdp().n_states()).into_par_iter().map(|s| self.vector(s)).collect()
    }
}

/// Stacked per-step expected outcomes of every sequence of exactly `k` actions.
pub fn opsr_full(mdp: &TabularMdp, om: &OutcomeModel, s: usize, k: usize) -> Result<OpsrVector> {
    OpsrBuilder::new(mdp, om, k, OpsrVariant::FullStack)?.vector(s)
}

/// Final-step expected outcome of every sequence of length `1..=k`.
pub fn opsr_terminal_up_to(mdp: &TabularMdp, om: &OutcomeModel, s: usize, k: usize) -> Result<OpsrVector> {
    OpsrBuilder::new(mdp, om, k, OpsrVariant::TerminalUpTo)?.vector(s)
}

/// Class label of a vector after quantisation at `resolution`.
pub fn quantized_label(values: &[f64], resolution: f64) -> ClassLabel {
    let mut h = Sha256::new();
    for (i, &x) in values.iter().enumerate() {
        let q = quantize(x, resolution);
        if q != 0 {
            h.update((i as u64).to_le_bytes());
            h.update(q.to_le_bytes());
        }
    }
    h.update((values.len() as u64).to_le_bytes());
    ClassLabel(hex::encode(h.finalize()))
}

/// Groups states whose OPSR vectors agree after quantisation.
pub fn opsr_partition(vectors: &[OpsrVector], resolution: f64) -> StateAbstraction {
    StateAbstraction::from_labels(vectors.iter().map(|v| quantized_label(&v.values, resolution)).collect())
}

/// Number of distinct quantised OPSR vectors over the states of several tasks.
pub fn union_opsr_classes(tasks: &[(&TabularMdp, &OutcomeModel)], k: usize, variant: OpsrVariant) -> Result<usize> {
    let mut labels = std::collections::BTreeSet::new();
    for &(mdp, om) in tasks {
        let b = OpsrBuilder::new(mdp, om, k, variant)?;
        for v in b.all()? {
            labels.insert(quantized_label(&v.values, DEFAULT_RESOLUTION));
        }
    }
    Ok(labels.len())
}

/// Number of distinct fingerprint classes over the states of several tasks.
pub fn union_fingerprint_classes(tasks: &[(&TabularMdp, &OutcomeModel)], config: FingerprintConfig) -> Result<usize> {
    Ok(union_fingerprint_labels(tasks, config)?.into_iter().collect::<std::collections::BTreeSet<_>>().len())
}

/// Fingerprint labels of every state of every task, concatenated in task order.
pub fn union_fingerprint_labels(tasks: &[(&TabularMdp, &OutcomeModel)], config: FingerprintConfig) -> Result<Vec<ClassLabel>> {
    let mut labels = Vec::new();
    for &(mdp, om) in tasks {
        let phi = abstraction_with(mdp, om, config)?;
        labels.extend((0..phi.n_states()).map(|s| phi.label_of(s).clone()));
    }
    Ok(labels)
}

/// Smallest horizon whose partition does not change when the horizon grows by
/// one, searching `1..k_max`; returns `k_max` if none is found.
///
/// Partitions are computed jointly over all given tasks, so states of different
/// tasks may share a class.
pub fn finest_horizon_union(tasks: &[(&TabularMdp, &OutcomeModel)], k_max: usize) -> Result<usize> {
    if k_max == 0 {
        return Err(Error::Config("k_max must be at least 1".into()));
    }
    let blocks = |k: usize| -> Result<Vec<usize>> {
        let labels = union_fingerprint_labels(tasks, FingerprintConfig::new(k))?;
        Ok(StateAbstraction::from_labels(labels).canonical_blocks())
    };
    let mut prev = blocks(1)?;
    for k in 1..k_max {
        let next = blocks(k + 1)?;
        if next == prev {
            return Ok(k);
        }
        prev = next;
    }
    Ok(k_max)
}

/// [`finest_horizon_union`] for a single task.
pub fn finest_horizon(mdp: &TabularMdp, om: &OutcomeModel, k_max: usize) -> Result<usize> {
    finest_horizon_union(&[(mdp, om)], k_max)
}

/// Result of [`pca_reduce`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// One row per retained principal direction, unit length.
    pub components: Vec<Vec<f64>>,
    /// Variance along each retained direction, descending.
    pub variances: Vec<f64>,
    pub total_variance: f64,
}

impl Pca {
    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn explained_fraction(&self) -> f64 {
        if self.total_variance == 0.0 {
            1.0
        } else {
            self.variances.iter().sum::<f64>() / self.total_variance
        }
    }

    pub fn project(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.mean.len() {
            return Err(Error::Dimension(format!("row has {} features, PCA expects {}", row.len(), self.mean.len())));
        }
        Ok(self.components.iter().map(|c| c.iter().zip(row).zip(&self.mean).map(|((w, x), m)| w * (x - m)).sum()).collect())
    }
}

/// Makes the first entry with magnitude above `1e-12` positive.
fn fix_sign(v: &mut [f64]) {
    if let Some(&x) = v.iter().find(|x| x.abs() > 1e-12) {
        if x < 0.0 {
            v.iter_mut().for_each(|y| *y = -*y);
        }
    }
}

fn to_matrix(data: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let Some(first) = data.first() else {
        return Err(Error::Config("need at least one row".into()));
    };
    let p = first.len();
    if let Some(bad) = data.iter().find(|r| r.len() != p) {
        return Err(Error::Dimension(format!("ragged rows: {} vs {}", bad.len(), p)));
    }
    Ok(DMatrix::from_fn(data.len(), p, |i, j| data[i][j]))
}

/// Eigen-decomposition sorted by descending eigenvalue.
fn sorted_eigen(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = DMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    (vals, vecs)
}

/// Centred PCA keeping the fewest components whose variance share reaches
/// `variance_fraction`.
///
/// When all rows are identical no component is kept and every reduced row is
/// empty. Variances use the `n - 1` denominator (`n` when there is one row).
pub fn pca_reduce(data: &[Vec<f64>], variance_fraction: f64) -> Result<(Pca, Vec<Vec<f64>>)> {
    if !(variance_fraction > 0.0 && variance_fraction <= 1.0) {
        return Err(Error::Config(format!("variance fraction must lie in (0, 1], got {variance_fraction}")));
    }
    let x = to_matrix(data)?;
    let (n, p) = x.shape();
    let mean: Vec<f64> = (0..p).map(|j| x.column(j).mean()).collect();
    let mut xc = x;
    for j in 0..p {
        let m = mean[j];
        xc.column_mut(j).iter_mut().for_each(|v| *v -= m);
    }
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    // Work in whichever of feature space or sample space is smaller.
    let (vals, dirs): (Vec<f64>, Vec<Vec<f64>>) = if p <= n {
        let (vals, vecs) = sorted_eigen(xc.transpose() * &xc / denom);
        let dirs = (0..p).map(|c| vecs.column(c).iter().copied().collect()).collect();
        (vals, dirs)
    } else {
        let (vals, vecs) = sorted_eigen(&xc * xc.transpose() / denom);
        let dirs = (0..n)
            .map(|c| {
                let v = xc.transpose() * vecs.column(c);
                let norm = v.norm();
                if norm > 0.0 {
                    (v / norm).iter().copied().collect()
                } else {
                    vec![0.0; p]
                }
            })
            .collect();
        (vals, dirs)
    };
    let vals: Vec<f64> = vals.into_iter().map(|v| v.max(0.0)).collect();
    let total: f64 = (0..p).map(|j| xc.column(j).norm_squared() / denom).sum();
    let scale = total.max(1.0);
    let mut components = Vec::new();
    let mut variances = Vec::new();
    if total > 1e-14 * scale {
        let mut acc = 0.0;
        for (v, mut d) in vals.into_iter().zip(dirs) {
            if acc >= variance_fraction * total - 1e-12 * scale || v <= 1e-14 * scale {
                break;
            }
            acc += v;
            fix_sign(&mut d);
            components.push(d);
            variances.push(v);
        }
    }
    let pca = Pca { mean, components, variances, total_variance: total };
    let reduced = data.iter().map(|r| pca.project(r)).collect::<Result<Vec<_>>>()?;
    Ok((pca, reduced))
}

/// Output of [`laplacian_eigenmap`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    /// One row of `out_dims` coordinates per input point.
    pub coords: Vec<Vec<f64>>,
    /// Connected component of each input point in the k-NN graph.
    pub component: Vec<usize>,
    pub n_components: usize,
}

/// Laplacian eigenmap of `points` using a symmetric Euclidean k-NN graph with
/// unit weights and the unnormalised Laplacian.
///
/// Identical points are merged before the graph is built so they embed
/// identically. Each connected component is embedded separately; coordinates
/// beyond what a small component supports are zero.
pub fn laplacian_eigenmap(points: &[Vec<f64>], knn: usize, out_dims: usize) -> Result<Embedding> {
    if knn == 0 {
        return Err(Error::Config("knn must be at least 1".into()));
    }
    if points.len() < out_dims + 2 {
        return Err(Error::Config(format!("{} points cannot give a {out_dims}-dimensional embedding", points.len())));
    }
    to_matrix(points)?;
    let mut unique: Vec<&Vec<f64>> = Vec::new();
    let mut index: BTreeMap<Vec<u64>, usize> = BTreeMap::new();
    let rep: Vec<usize> = points
        .iter()
        .map(|p| {
            let key: Vec<u64> = p.iter().map(|x| x.to_bits()).collect();
            *index.entry(key).or_insert_with(|| {
                unique.push(p);
                unique.len() - 1
            })
        })
        .collect();
    let m = unique.len();
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut adj = vec![vec![false; m]; m];
    let neighbours: Vec<Vec<usize>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<(f64, usize)> = (0..m).filter(|&j| j != i).map(|j| (dist2(unique[i], unique[j]), j)).collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            d.into_iter().take(knn).map(|(_, j)| j).collect()
        })
        .collect();
    for (i, ns) in neighbours.iter().enumerate() {
        for &j in ns {
            adj[i][j] = true;
            adj[j][i] = true;
        }
    }
    let mut comp = vec![usize::MAX; m];
    let mut n_comp = 0;
    for s in 0..m {
        if comp[s] != usize::MAX {
            continue;
        }
        let mut stack = vec![s];
        comp[s] = n_comp;
        while let Some(x) = stack.pop() {
            for y in 0..m {
                if adj[x][y] && comp[y] == usize::MAX {
                    comp[y] = n_comp;
                    stack.push(y);
                }
            }
        }
        n_comp += 1;
    }
    let mut coords_u = vec![vec![0.0; out_dims]; m];
    for c in 0..n_comp {
        let members: Vec<usize> = (0..m).filter(|&i| comp[i] == c).collect();
        let size = members.len();
        let lap = DMatrix::from_fn(size, size, |r, q| {
            let (i, j) = (members[r], members[q]);
            if i == j {
                (0..m).filter(|&k| adj[i][k]).count() as f64
            } else if adj[i][j] {
                -1.0
            } else {
                0.0
            }
        });
        let (_, vecs) = sorted_eigen(lap);
        // Ascending order, skipping the constant eigenvector.
        let usable = size.saturating_sub(1).min(out_dims);
        for dim in 0..usable {
            let col = size - 2 - dim;
            let mut v: Vec<f64> = vecs.column(col).iter().copied().collect();
            fix_sign(&mut v);
            for (r, &i) in members.iter().enumerate() {
                coords_u[i][dim] = v[r];
            }
        }
    }
    Ok(Embedding {
        coords: rep.iter().map(|&u| coords_u[u].clone()).collect(),
        component: rep.iter().map(|&u| comp[u]).collect(),
        n_components: n_comp,
    })
}

/// Writes `state_id,task_id,c0,c1,...` rows with a header.
pub fn write_coordinates_csv<W: Write>(out: &mut W, rows: &[(usize, String, Vec<f64>)]) -> Result<()> {
    let width = rows.first().map_or(0, |r| r.2.len());
    let mut header = String::from("state_id,task_id");
    for c in 0..width {
        header.push_str(&format!(",c{c}"));
    }
    let io = |e| Error::io("<csv>", e);
    writeln!(out, "{header}").map_err(io)?;
    for (s, task, coords) in rows {
        if coords.len() != width {
            return Err(Error::Dimension(format!("row for state {s} has {} coordinates, expected {width}", coords.len())));
        }
        let mut line = format!("{s},{task}");
        for x in coords {
            line.push_str(&format!(",{x}"));
        }
        writeln!(out, "{line}").map_err(io)?;
    }
    Ok(())
}
