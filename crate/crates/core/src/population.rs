//! Statistics over populations of independently trained models: joint
//! covariance of the unrolled MLP weights, stripe scores and the W1/W2
//! cross-correlation.
//!
//! `vec(W)` is always the row-major unrolling.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TinyModel;
use crate::tensor::Tensor;
use crate::train::WeightSnapshot;

pub const SNAPSHOT_EXT: &str = "mimw";
pub const FAILED_SUFFIX: &str = ".failed.json";
/// Largest `p·n` for which the dense `2pn × 2pn` covariance is formed.
pub const MAX_COVARIANCE_PN: usize = 2048;
pub const MIN_STRIPE_MEMBERS: usize = 8;

/// Per-member copies of one block's `W1 [p, n]` and `W2 [n, p]`.
#[derive(Clone, Debug)]
pub struct PopulationMatrix {
    pub layer: usize,
    pub seeds: Vec<u64>,
    pub w1: Vec<Tensor>,
    pub w2: Vec<Tensor>,
    pub config_hash: Option<String>,
    /// Files that failed to parse or failed their CRC.
    pub skipped: usize,
    /// Failure records of diverged runs found alongside the snapshots.
    pub failed: usize,
}

impl PopulationMatrix {
    pub fn new(layer: usize, w1: Vec<Tensor>, w2: Vec<Tensor>) -> Result<Self> {
        if w1.len() != w2.len() {
            return Err(Error::Population(format!("{} W1 members but {} W2 members", w1.len(), w2.len())));
        }
        if w1.len() < 2 {
            return Err(Error::Population(format!("need at least 2 members, got {}", w1.len())));
        }
        let s1 = w1[0].shape().to_vec();
        if s1.len() != 2 {
            return Err(Error::Population(format!("W1 must be a matrix, got shape {s1:?}")));
        }
        let s2 = vec![s1[1], s1[0]];
        for (k, (a, b)) in w1.iter().zip(&w2).enumerate() {
            if a.shape() != &s1[..] || b.shape() != &s2[..] {
                return Err(Error::Population(format!(
                    "member {k} has shapes {:?}/{:?}, expected {s1:?}/{s2:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        let seeds = (0..w1.len() as u64).collect();
        Ok(PopulationMatrix { layer, seeds, w1, w2, config_hash: None, skipped: 0, failed: 0 })
    }

    pub fn k(&self) -> usize {
        self.w1.len()
    }

    /// Hidden width `p`.
    pub fn p(&self) -> usize {
        self.w1[0].shape()[0]
    }

    /// Embedding width `n`.
    pub fn n(&self) -> usize {
        self.w1[0].shape()[1]
    }

    /// `[vec(W1); vec(W2)]` of member `k`.
    pub fn joint_vector(&self, k: usize) -> Vec<f64> {
        let mut v = self.w1[k].data().to_vec();
        v.extend_from_slice(self.w2[k].data());
        v
    }

    fn members(&self, which: Which) -> &[Tensor] {
        match which {
            Which::W1 => &self.w1,
            Which::W2 => &self.w2,
        }
    }
}

fn is_snapshot(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == SNAPSHOT_EXT)
}

/// Reads every snapshot in `dir` and extracts block `layer`. Members are
/// ordered by seed.
pub fn collect(dir: &Path, layer: usize) -> Result<PopulationMatrix> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = Vec::new();
    let mut failed = 0;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if is_snapshot(&path) {
            paths.push(path);
        } else if path.to_string_lossy().ends_with(FAILED_SUFFIX) {
            failed += 1;
        }
    }
    paths.sort();

    let mut snaps = Vec::new();
    let mut skipped = 0;
    for path in &paths {
        match WeightSnapshot::load(path) {
            Ok(s) => snaps.push((path, s)),
            Err(Error::Format { .. }) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    snaps.sort_by_key(|(_, s)| s.seed);
    if let Some((first_path, first)) = snaps.first() {
        if let Some((path, other)) = snaps.iter().find(|(_, s)| s.config_hash != first.config_hash) {
            return Err(Error::Population(format!(
                "mixed config hashes: {} ({}) vs {} ({})",
                first.config_hash,
                first_path.display(),
                other.config_hash,
                path.display()
            )));
        }
    }
    if snaps.len() < 2 {
        return Err(Error::Population(format!(
            "need at least 2 valid snapshots in {}, found {} ({skipped} skipped)",
            dir.display(),
            snaps.len()
        )));
    }

    let (w1n, w2n) = (TinyModel::w1_name(layer), TinyModel::w2_name(layer));
    let mut w1 = Vec::with_capacity(snaps.len());
    let mut w2 = Vec::with_capacity(snaps.len());
    for (path, s) in &snaps {
        let missing = || Error::Population(format!("{} has no MLP layer {layer}", path.display()));
        w1.push(s.get(&w1n).ok_or_else(missing)?.clone());
        w2.push(s.get(&w2n).ok_or_else(missing)?.clone());
    }
    let mut pop = PopulationMatrix::new(layer, w1, w2)?;
    pop.seeds = snaps.iter().map(|(_, s)| s.seed).collect();
    pop.config_hash = Some(snaps[0].1.config_hash.clone());
    pop.skipped = skipped;
    pop.failed = failed;
    Ok(pop)
}

/// Unbiased (`K − 1`) covariance of `[vec(W1); vec(W2)]`, shape `[2pn, 2pn]`.
pub fn covariance(pop: &PopulationMatrix) -> Result<Tensor> {
    let pn = pop.p() * pop.n();
    if pn > MAX_COVARIANCE_PN {
        return Err(Error::Population(format!("dense covariance limited to p·n <= {MAX_COVARIANCE_PN}, got {pn}")));
    }
    let d = 2 * pn;
    let k = pop.k();
    let members: Vec<Vec<f64>> = (0..k).map(|i| pop.joint_vector(i)).collect();
    let mut dev = vec![vec![0.0; d]; k];
    for e in 0..d {
        for (m, x) in centered(members.iter().map(|v| v[e])).into_iter().enumerate() {
            dev[m][e] = x;
        }
    }
    let mut cov = vec![0.0; d * d];
    for c in &dev {
        for i in 0..d {
            let ci = c[i];
            if ci == 0.0 {
                continue;
            }
            let row = &mut cov[i * d..(i + 1) * d];
            for j in i..d {
                row[j] += ci * c[j];
            }
        }
    }
    let denom = (k - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / denom;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    Tensor::new(vec![d, d], cov)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Which {
    W1,
    W2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Rows,
    Columns,
}

/// Deviations from the sample mean, taken relative to the first sample so
/// that a constant sample yields exact zeros.
fn centered(xs: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut d: Vec<f64> = xs.collect();
    let x0 = d[0];
    d.iter_mut().for_each(|x| *x -= x0);
    let m = d.iter().sum::<f64>() / d.len() as f64;
    d.iter_mut().for_each(|x| *x -= m);
    d
}

fn unbiased_var(xs: impl Iterator<Item = f64>) -> f64 {
    let d = centered(xs);
    d.iter().map(|x| x * x).sum::<f64>() / (d.len() - 1) as f64
}

/// Variance ratio measuring how strongly the rows or columns of a matrix
/// move together across the population. For columns of an `r×c` matrix,
/// `r · mean_j Var(colmean_j) / mean_ij Var(W_ij)`; about 1 for independent
/// entries and about `r` for columns that are constant.
pub fn stripe_score(pop: &PopulationMatrix, which: Which, axis: Axis) -> Result<f64> {
    let k = pop.k();
    if k < MIN_STRIPE_MEMBERS {
        return Err(Error::Population(format!("stripe score needs K >= {MIN_STRIPE_MEMBERS}, got {k}")));
    }
    let members = pop.members(which);
    let (r, c) = (members[0].shape()[0], members[0].shape()[1]);
    let s2 = (0..r * c).map(|e| unbiased_var(members.iter().map(move |m| m.data()[e]))).sum::<f64>() / (r * c) as f64;
    if !(s2 > 0.0) {
        return Err(Error::Degenerate(format!("{which:?} entries have zero variance across the population")));
    }
    let (groups, size) = match axis {
        Axis::Columns => (c, r),
        Axis::Rows => (r, c),
    };
    let group_mean = |m: &Tensor, g: usize| -> f64 {
        let d = m.data();
        let sum: f64 = match axis {
            Axis::Columns => (0..r).map(|i| d[i * c + g]).sum(),
            Axis::Rows => d[g * c..(g + 1) * c].iter().sum(),
        };
        sum / size as f64
    };
    let v =
        (0..groups).map(|g| unbiased_var(members.iter().map(move |m| group_mean(m, g)))).sum::<f64>() / groups as f64;
    Ok(size as f64 * v / s2)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossCorrelation {
    pub rho: f64,
    /// Pairs skipped because one side had zero variance.
    pub excluded: usize,
}

/// Mean over `(i, j)` of the Pearson correlation, across members, of
/// `W1[i,j]` and `W2[j,i]`.
pub fn cross_correlation(pop: &PopulationMatrix) -> Result<CrossCorrelation> {
    let k = pop.k();
    if k < MIN_STRIPE_MEMBERS {
        return Err(Error::Population(format!("cross-correlation needs K >= {MIN_STRIPE_MEMBERS}, got {k}")));
    }
    let (p, n) = (pop.p(), pop.n());
    let (mut total, mut used, mut excluded) = (0.0, 0usize, 0usize);
    for i in 0..p {
        for j in 0..n {
            let a = centered(pop.w1.iter().map(|m| m.data()[i * n + j]));
            let b = centered(pop.w2.iter().map(|m| m.data()[j * p + i]));
            let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
            for (x, y) in a.iter().zip(&b) {
                sab += x * y;
                saa += x * x;
                sbb += y * y;
            }
            if saa == 0.0 || sbb == 0.0 {
                excluded += 1;
                continue;
            }
            total += (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0);
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::Degenerate("every W1/W2 entry pair has zero variance".into()));
    }
    Ok(CrossCorrelation { rho: total / used as f64, excluded })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisScores {
    pub rows: f64,
    pub columns: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StripeScores {
    pub w1: AxisScores,
    pub w2: AxisScores,
}

/// Summary written by the analysis command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationStats {
    pub layer: usize,
    pub k: usize,
    pub p: usize,
    pub n: usize,
    pub skipped: usize,
    pub failed: usize,
    pub config_hash: Option<String>,
    pub unrolling: String,
    pub stripe_scores: StripeScores,
    pub rho: f64,
    pub rho_excluded: usize,
    /// Side of the dense covariance, absent when over the size cap.
    pub covariance_dim: Option<usize>,
}

pub fn stripe_scores(pop: &PopulationMatrix) -> Result<StripeScores> {
    let axes = |w| -> Result<AxisScores> {
        Ok(AxisScores { rows: stripe_score(pop, w, Axis::Rows)?, columns: stripe_score(pop, w, Axis::Columns)? })
    };
    Ok(StripeScores { w1: axes(Which::W1)?, w2: axes(Which::W2)? })
}

/// Stripe scores and cross-correlation; the covariance is left to the caller.
pub fn population_stats(pop: &PopulationMatrix) -> Result<PopulationStats> {
    let cc = cross_correlation(pop)?;
    let pn = pop.p() * pop.n();
    Ok(PopulationStats {
        layer: pop.layer,
        k: pop.k(),
        p: pop.p(),
        n: pop.n(),
        skipped: pop.skipped,
        failed: pop.failed,
        config_hash: pop.config_hash.clone(),
        unrolling: "row-major".into(),
        stripe_scores: stripe_scores(pop)?,
        rho: cc.rho,
        rho_excluded: cc.excluded,
        covariance_dim: (pn <= MAX_COVARIANCE_PN).then_some(2 * pn),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSidecar {
    pub rows: usize,
    pub cols: usize,
    /// Start of the `vec(W1)` block, start of `vec(W2)`, end.
    pub block_offsets: [usize; 3],
    pub blocks: [String; 2],
    pub unrolling: String,
}

pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

/// Writes `cov` as CSV, one line per row, with shortest round-trip float
/// formatting, plus a JSON sidecar next to it.
pub fn export_heatmap_data(cov: &Tensor, path: &Path) -> Result<()> {
    let s = cov.shape();
    if s.len() != 2 || s[0] != s[1] || !s[0].is_multiple_of(2) {
        return Err(Error::Shape(format!("expected a square matrix of even side, got {s:?}")));
    }
    let d = s[0];
    let mut csv = String::new();
    for row in cov.data().chunks(d) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        csv.push_str(&line.join(","));
        csv.push('\n');
    }
    fs::write(path, csv).map_err(|e| Error::io(path, e))?;
    let sidecar = HeatmapSidecar {
        rows: d,
        cols: d,
        block_offsets: [0, d / 2, d],
        blocks: ["vec(W1)".into(), "vec(W2)".into()],
        unrolling: "row-major".into(),
    };
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_string_pretty(&sidecar)? + "\n").map_err(|e| Error::io(&side, e))
}

pub fn read_heatmap_csv(path: &Path) -> Result<Tensor> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut data = Vec::new();
    let mut rows = 0;
    for line in text.lines().filter(|l| !l.is_empty()) {
        rows += 1;
        for cell in line.split(',') {
            data.push(cell.parse::<f64>().map_err(|e| Error::format(path, format!("'{cell}': {e}")))?);
        }
    }
    if rows == 0 || data.len() != rows * rows {
        return Err(Error::format(path, format!("{} values in {rows} rows is not square", data.len())));
    }
    Tensor::new(vec![rows, rows], data)
}
