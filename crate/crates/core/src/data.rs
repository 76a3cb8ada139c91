//! Datasets: a seeded synthetic generator, labeled/test splits, the binary
//! feature-pair file format, and grid-shaped stage maps.
//!
//! # Pair file format
//!
//! All integers little-endian.
//!
//! | field        | type        |
//! |--------------|-------------|
//! | magic        | `b"DKPR"`   |
//! | version      | u32 (= 1)   |
//! | n            | u64 (> 0)   |
//! | d            | u64 (> 0)   |
//! | has_labels   | u8 (0 or 1) |
//! | grid_rows    | u32 (0 = no grid) |
//! | grid_cols    | u32         |
//! | features     | n * d f32, row-major |
//! | labels       | n i8 in {-1, +1}, only if `has_labels` |

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};

const PAIR_MAGIC: &[u8; 4] = b"DKPR";
const PAIR_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Option<Vec<f64>>,
    /// `(rows, cols)`; sample `i` sits at row `i / cols`, column `i % cols`.
    pub grid: Option<(usize, usize)>,
}

impl Dataset {
    pub fn new(features: Vec<Vec<f64>>, labels: Option<Vec<f64>>, grid: Option<(usize, usize)>) -> Result<Self> {
        let d = features.first().map_or(0, Vec::len);
        if d == 0 {
            return Err(Error::invalid("dataset needs at least one non-empty feature vector"));
        }
        if let Some(i) = features.iter().position(|f| f.len() != d) {
            return Err(Error::invalid(format!("sample {i} has dimension {}, expected {d}", features[i].len())));
        }
        if let Some(i) = features.iter().position(|f| f.iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid(format!("sample {i} has non-finite features")));
        }
        if let Some(l) = &labels {
            if l.len() != features.len() {
                return Err(Error::invalid(format!("{} labels for {} samples", l.len(), features.len())));
            }
            crate::svm::validate_labels(l)?;
        }
        if let Some((r, c)) = grid {
            if r * c != features.len() {
                return Err(Error::invalid(format!("grid {r}x{c} does not cover {} samples", features.len())));
            }
        }
        Ok(Self { features, labels, grid })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features[0].len()
    }

    pub fn labels(&self) -> Result<&[f64]> {
        self.labels.as_deref().ok_or_else(|| Error::invalid("dataset has no labels"))
    }

    pub fn select_features(&self, idx: &[usize]) -> Vec<Vec<f64>> {
        idx.iter().map(|&i| self.features[i].clone()).collect()
    }

    pub fn select_labels(&self, idx: &[usize]) -> Result<Vec<f64>> {
        let l = self.labels()?;
        Ok(idx.iter().map(|&i| l[i]).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(PAIR_MAGIC);
        w.u32(PAIR_VERSION);
        w.u64(self.len() as u64);
        w.u64(self.dim() as u64);
        w.u8(self.labels.is_some() as u8);
        let (r, c) = self.grid.unwrap_or((0, 0));
        w.u32(r as u32);
        w.u32(c as u32);
        for f in &self.features {
            for &v in f {
                w.f32(v as f32);
            }
        }
        if let Some(l) = &self.labels {
            for &y in l {
                w.i8(if y > 0.0 { 1 } else { -1 });
            }
        }
        w.finish()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader::new(data);
        r.expect_magic(PAIR_MAGIC)?;
        let version = r.u32()?;
        if version != PAIR_VERSION {
            return Err(Error::Version { kind: "pair file", found: version, expected: PAIR_VERSION });
        }
        let at = r.offset();
        let n = r.u64()?;
        if n == 0 {
            return Err(Error::Parse { offset: at, message: "sample count is zero".into() });
        }
        let at = r.offset();
        let d = r.u64()?;
        if d == 0 {
            return Err(Error::Parse { offset: at, message: "dimension is zero".into() });
        }
        let at = r.offset();
        let has_labels = match r.u8()? {
            0 => false,
            1 => true,
            v => return Err(Error::Parse { offset: at, message: format!("has_labels must be 0 or 1, got {v}") }),
        };
        let at = r.offset();
        let rows = r.u32()? as u64;
        let cols = r.u32()? as u64;
        let grid = match (rows, cols) {
            (0, 0) => None,
            (r_, c_) if r_.checked_mul(c_) == Some(n) => Some((r_ as usize, c_ as usize)),
            _ => return Err(Error::Parse { offset: at, message: format!("grid {rows}x{cols} does not cover {n} samples") }),
        };
        let remaining = (data.len() as u64).saturating_sub(r.offset());
        let fits = n.checked_mul(d).and_then(|v| v.checked_mul(4)).is_some_and(|b| b <= remaining);
        if !fits {
            return Err(r.error(format!("truncated payload: {n} x {d} features do not fit")));
        }
        let (n, d) = (n as usize, d as usize);
        let mut features = Vec::with_capacity(n);
        for _ in 0..n {
            let mut f = Vec::with_capacity(d);
            for _ in 0..d {
                let at = r.offset();
                let v = r.f32()?;
                if !v.is_finite() {
                    return Err(Error::Parse { offset: at, message: "non-finite feature value".into() });
                }
                f.push(v as f64);
            }
            features.push(f);
        }
        let labels = if has_labels {
            let mut l = Vec::with_capacity(n);
            for _ in 0..n {
                let at = r.offset();
                l.push(match r.i8()? {
                    1 => 1.0,
                    -1 => -1.0,
                    v => return Err(Error::Parse { offset: at, message: format!("label must be -1 or +1, got {v}") }),
                });
            }
            Some(l)
        } else {
            None
        };
        r.finish()?;
        Ok(Self { features, labels, grid })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

pub fn load_pairs(path: &Path) -> Result<Dataset> {
    Dataset::from_bytes(&fs::read(path)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub dim: usize,
    pub positive_fraction: f64,
    /// Distance between the two class means.
    pub separation: f64,
    pub seed: u64,
}

/// Number of positives for `n` samples: `floor(n * fraction)`, at least one.
pub fn positive_count(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).floor() as usize).max(1)
}

/// Near-square grid: the largest divisor of `n` not above `sqrt(n)` rows.
pub fn default_grid(n: usize) -> (usize, usize) {
    let mut rows = (n as f64).sqrt() as usize;
    while rows > 1 && !n.is_multiple_of(rows) {
        rows -= 1;
    }
    let rows = rows.max(1);
    (rows, n / rows)
}

/// Two unit-variance Gaussian clusters, negatives centered at the origin and
/// positives at `separation / sqrt(d)` along every axis. Values are rounded
/// to `f32` so datasets survive the pair format unchanged.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.n < 10 {
        return Err(Error::invalid(format!("n must be at least 10, got {}", spec.n)));
    }
    if spec.dim == 0 {
        return Err(Error::invalid("dimension must be positive"));
    }
    if !(spec.positive_fraction > 0.0 && spec.positive_fraction < 0.5) {
        return Err(Error::invalid(format!("positive_fraction must lie in (0, 0.5), got {}", spec.positive_fraction)));
    }
    if !(spec.separation > 0.0 && spec.separation.is_finite()) {
        return Err(Error::invalid(format!("separation must be positive, got {}", spec.separation)));
    }
    let n_pos = positive_count(spec.n, spec.positive_fraction);
    let mut order: Vec<usize> = (0..spec.n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let mut labels = vec![-1.0; spec.n];
    for &i in &order[..n_pos] {
        labels[i] = 1.0;
    }
    let offset = spec.separation / (spec.dim as f64).sqrt();
    let features: Vec<Vec<f64>> = (0..spec.n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64 + 1);
            let shift = if labels[i] > 0.0 { offset } else { 0.0 };
            (0..spec.dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    ((z + shift) as f32) as f64
                })
                .collect()
        })
        .collect();
    Dataset::new(features, Some(labels), Some(default_grid(spec.n)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    /// Size of the labeled subset; two thirds train, one third validation.
    pub labeled_count: usize,
    pub seed: u64,
}

/// Disjoint index sets, each sorted ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<Split> {
    let n = dataset.len();
    if spec.labeled_count > n {
        return Err(Error::invalid(format!("labeled count {} exceeds {n} samples", spec.labeled_count)));
    }
    if spec.labeled_count < 2 {
        return Err(Error::invalid("labeled count must be at least 2"));
    }
    dataset.labels()?;
    let mut order: Vec<usize> = (0..n).collect();
    // Distinct stream from the generator's label shuffle.
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(u64::MAX);
    order.shuffle(&mut rng);
    let n_train = spec.labeled_count * 2 / 3;
    let mut train = order[..n_train].to_vec();
    let mut validation = order[n_train..spec.labeled_count].to_vec();
    let mut test = order[spec.labeled_count..].to_vec();
    if test.is_empty() {
        log::warn!("all {n} samples are labeled; the test split is empty");
    }
    train.sort_unstable();
    validation.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, validation, test })
}

/// Gray level for a pattern that consumed `stages` of `num_stages` stages:
/// 255 (lightest) for a stage-1 rejection down to 0 (darkest) for the last
/// stage, in evenly spaced levels.
pub fn stage_gray_level(stages: usize, num_stages: usize, accepted: bool) -> u8 {
    if accepted || num_stages <= 1 {
        return if accepted { 0 } else { 255 };
    }
    let s = stages.clamp(1, num_stages);
    let level = (num_stages - s) as f64 * 255.0 / (num_stages - 1) as f64;
    level.round() as u8
}

/// A rendered stage map: binary PGM (P5) and the companion CSV of raw counts.
#[derive(Debug, Clone, PartialEq)]
pub struct StageMap {
    pub pgm: Vec<u8>,
    pub csv: String,
}

/// `(stages_consumed, accepted)` per sample in dataset order.
pub fn render_stage_map(outcomes: &[(usize, bool)], grid: Option<(usize, usize)>, num_stages: usize) -> Result<StageMap> {
    let (rows, cols) = grid.ok_or_else(|| Error::invalid("stage map requires a grid layout"))?;
    if rows * cols != outcomes.len() {
        return Err(Error::invalid(format!("grid {rows}x{cols} does not match {} outcomes", outcomes.len())));
    }
    let mut pgm = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    let mut csv = String::from("row,col,stages_consumed,accepted\n");
    for (i, &(stages, accepted)) in outcomes.iter().enumerate() {
        pgm.push(stage_gray_level(stages, num_stages, accepted));
        csv.push_str(&format!("{},{},{},{}\n", i / cols, i % cols, stages, accepted as u8));
    }
    Ok(StageMap { pgm, csv })
}

pub fn emit_stage_map(
    outcomes: &[(usize, bool)],
    grid: Option<(usize, usize)>,
    num_stages: usize,
    pgm_path: &Path,
    csv_path: &Path,
) -> Result<()> {
    let map = render_stage_map(outcomes, grid, num_stages)?;
    fs::write(pgm_path, &map.pgm)?;
    fs::write(csv_path, &map.csv)?;
    Ok(())
}
