//! Segmentation evaluation: Dice overlap, Hausdorff distance in
//! millimetres, the Wilcoxon signed-rank test, and the per-structure
//! report.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::volume::{LabelVolume, STRUCTURE_COUNT, STRUCTURE_NAMES};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("hausdorff distance is undefined for empty sets")]
    EmptySet,
    #[error("need at least 5 nonzero differences, got {0}")]
    TooFewPairs(usize),
    #[error("input vectors differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("volumes do not share a grid: {0}")]
    GridMismatch(String),
}

/// Dice similarity coefficient `2|A n B| / (|A| + |B|)` over voxel sets.
///
/// Two empty sets count as perfect agreement (1.0); exactly one empty set
/// scores 0.0.
pub fn dsc(a: &[[usize; 3]], b: &[[usize; 3]]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let set: HashSet<&[usize; 3]> = a.iter().collect();
    let overlap = b.iter().filter(|v| set.contains(*v)).count();
    2.0 * overlap as f64 / (a.len() + b.len()) as f64
}

/// Hausdorff distance in millimetres between two voxel sets, with voxel
/// indices scaled per axis by `spacing` before the Euclidean norm:
/// `max(h(A,B), h(B,A))` with `h(A,B) = max_a min_b ||a-b||`.
///
/// The distance ranges over the full voxel sets and is exact; the inner
/// loop's early exit cannot change the maximum.
pub fn hausdorff(
    a: &[[usize; 3]],
    b: &[[usize; 3]],
    spacing: [f32; 3],
) -> Result<f64, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let scale = [spacing[0] as f64, spacing[1] as f64, spacing[2] as f64];
    let squared = directed_sq(a, b, scale).max(directed_sq(b, a, scale));
    Ok(squared.sqrt())
}

fn directed_sq(a: &[[usize; 3]], b: &[[usize; 3]], scale: [f64; 3]) -> f64 {
    let mut max_sq = 0.0f64;
    for p in a {
        let mut min_sq = f64::INFINITY;
        for q in b {
            let mut d = 0.0;
            for axis in 0..3 {
                let delta = (p[axis] as f64 - q[axis] as f64) * scale[axis];
                d += delta * delta;
            }
            if d < min_sq {
                min_sq = d;
                // A point at least this close cannot raise the maximum.
                if min_sq <= max_sq {
                    break;
                }
            }
        }
        if min_sq > max_sq {
            max_sq = min_sq;
        }
    }
    max_sq
}

/// Two-sided Wilcoxon signed-rank test.
///
/// Zero differences are discarded; absolute differences are ranked with
/// average ranks on ties; the statistic is `W = min(W+, W-)`. The p-value
/// enumerates all sign assignments exactly for n <= 12 and otherwise uses
/// the normal approximation with tie correction.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<(f64, f64), MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch(x.len(), y.len()));
    }
    let diffs: Vec<f64> = x
        .iter()
        .zip(y)
        .map(|(a, b)| a - b)
        .filter(|d| *d != 0.0)
        .collect();
    let n = diffs.len();
    if n < 5 {
        return Err(MetricsError::TooFewPairs(n));
    }

    // Rank |d| ascending, averaging ranks over tied groups.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diffs[i].abs().partial_cmp(&diffs[j].abs()).unwrap());
    let mut ranks = vec![0.0f64; n];
    let mut tie_correction = 0.0f64;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for k in i..=j {
            ranks[order[k]] = avg_rank;
        }
        let t = (j - i + 1) as f64;
        tie_correction += t * t * t - t;
        i = j + 1;
    }

    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let total: f64 = ranks.iter().sum();
    let w = w_plus.min(total - w_plus);

    let p = if n <= 12 {
        // Exact: enumerate every sign assignment and count statistics at
        // least as extreme as the observed one.
        let assignments = 1u64 << n;
        let mut extreme = 0u64;
        for mask in 0..assignments {
            let mut s = 0.0f64;
            for (bit, r) in ranks.iter().enumerate() {
                if mask >> bit & 1 == 1 {
                    s += r;
                }
            }
            if s.min(total - s) <= w + 1e-9 {
                extreme += 1;
            }
        }
        extreme as f64 / assignments as f64
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_correction / 48.0;
        let z = (w - mean + 0.5) / var.sqrt();
        (2.0 * normal_cdf(z)).min(1.0)
    };
    Ok((w, p))
}

/// Standard normal CDF via the Abramowitz-Stegun erf polynomial
/// (absolute error below 1.5e-7).
fn normal_cdf(z: f64) -> f64 {
    let x = z / std::f64::consts::SQRT_2;
    let t = 1.0 / (1.0 + 0.3275911 * x.abs());
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    let erf_abs = 1.0 - poly * (-x * x).exp();
    let erf = if x < 0.0 { -erf_abs } else { erf_abs };
    0.5 * (1.0 + erf)
}

/// Which voxels enter the Hausdorff computation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HdMode {
    /// The full voxel sets (the default).
    FullSets,
    /// Only voxels with at least one face neighbor outside their set.
    Surface,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassReport {
    pub id: u8,
    pub name: String,
    pub dsc: f64,
    /// `None` when either mask is empty for this class.
    pub hd_mm: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StructureReport {
    pub classes: Vec<ClassReport>,
    pub avg_dsc: f64,
    pub std_dsc: f64,
    pub avg_hd: Option<f64>,
    pub std_hd: Option<f64>,
}

impl StructureReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Per-structure DSC and Hausdorff distance of a prediction against the
/// reference, with averages and (population) standard deviations across
/// the 14 classes.
pub fn evaluate(pred: &LabelVolume, gt: &LabelVolume) -> Result<StructureReport, MetricsError> {
    evaluate_with(pred, gt, HdMode::FullSets)
}

pub fn evaluate_with(
    pred: &LabelVolume,
    gt: &LabelVolume,
    hd_mode: HdMode,
) -> Result<StructureReport, MetricsError> {
    if pred.dims() != gt.dims() || pred.header.spacing3() != gt.header.spacing3() {
        return Err(MetricsError::GridMismatch(format!(
            "pred {:?} @ {:?}, gt {:?} @ {:?}",
            pred.dims(),
            pred.header.spacing3(),
            gt.dims(),
            gt.header.spacing3()
        )));
    }
    let spacing = gt.header.spacing3();
    let mut classes = Vec::with_capacity(STRUCTURE_COUNT);
    for class in 1..=STRUCTURE_COUNT as u8 {
        let a = pred.class_voxels(class);
        let b = gt.class_voxels(class);
        let dice = dsc(&a, &b);
        let hd_mm = if a.is_empty() || b.is_empty() {
            None
        } else {
            let value = match hd_mode {
                HdMode::FullSets => hausdorff(&a, &b, spacing)?,
                HdMode::Surface => {
                    hausdorff(&surface_voxels(&a), &surface_voxels(&b), spacing)?
                }
            };
            Some(value)
        };
        classes.push(ClassReport {
            id: class,
            name: STRUCTURE_NAMES[class as usize - 1].to_string(),
            dsc: dice,
            hd_mm,
        });
    }

    let dscs: Vec<f64> = classes.iter().map(|c| c.dsc).collect();
    let hds: Vec<f64> = classes.iter().filter_map(|c| c.hd_mm).collect();
    let (avg_dsc, std_dsc) = mean_std(&dscs);
    let (avg_hd, std_hd) = if hds.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_std(&hds);
        (Some(m), Some(s))
    };
    Ok(StructureReport {
        classes,
        avg_dsc,
        std_dsc,
        avg_hd,
        std_hd,
    })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Voxels of the set with at least one of their six face neighbors outside
/// the set (volume borders count as outside).
fn surface_voxels(set: &[[usize; 3]]) -> Vec<[usize; 3]> {
    let lookup: HashSet<&[usize; 3]> = set.iter().collect();
    set.iter()
        .filter(|&&[x, y, z]| {
            let neighbors = [
                x.checked_sub(1).map(|x| [x, y, z]),
                Some([x + 1, y, z]),
                y.checked_sub(1).map(|y| [x, y, z]),
                Some([x, y + 1, z]),
                z.checked_sub(1).map(|z| [x, y, z]),
                Some([x, y, z + 1]),
            ];
            neighbors
                .into_iter()
                .any(|n| !n.is_some_and(|n| lookup.contains(&n)))
        })
        .copied()
        .collect()
}
