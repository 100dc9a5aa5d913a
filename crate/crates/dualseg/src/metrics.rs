//! Evaluation metrics: Dice score, 95th-percentile symmetric surface
//! Hausdorff distance, paired one-tailed t-test, and result summarization.

use crate::core::SegmentationMask;
use crate::error::{DualsegError, Result};

/// `2|A∩B| / (|A|+|B|)`; 1.0 when both masks are empty, 0.0 when exactly one
/// is empty.
pub fn dice(a: &SegmentationMask, b: &SegmentationMask) -> f64 {
    assert_eq!(a.shape(), b.shape(), "dice requires matching shapes");
    let mut inter = 0usize;
    let mut ca = 0usize;
    let mut cb = 0usize;
    for (&x, &y) in a.grid().data().iter().zip(b.grid().data()) {
        ca += usize::from(x == 1);
        cb += usize::from(y == 1);
        inter += usize::from(x == 1 && y == 1);
    }
    if ca + cb == 0 {
        return 1.0;
    }
    2.0 * inter as f64 / (ca + cb) as f64
}

/// 95th-percentile symmetric surface Hausdorff distance in voxel units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hd95 {
    pub value: f64,
    /// Set when either mask was empty and the volume diagonal was returned.
    pub degenerate: bool,
}

/// Surface voxels under 6-connectivity: foreground voxels with at least one
/// background (or out-of-bounds) face neighbor.
pub fn surface_voxels(mask: &SegmentationMask) -> Vec<[i64; 3]> {
    let (sx, sy, sz) = mask.shape();
    let g = mask.grid();
    let mut out = Vec::new();
    for z in 0..sz {
        for y in 0..sy {
            for x in 0..sx {
                if g.get(x, y, z) != 1 {
                    continue;
                }
                let mut boundary = false;
                let neighbors: [(i64, i64, i64); 6] = [
                    (-1, 0, 0),
                    (1, 0, 0),
                    (0, -1, 0),
                    (0, 1, 0),
                    (0, 0, -1),
                    (0, 0, 1),
                ];
                for (dx, dy, dz) in neighbors {
                    let (nx, ny, nz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                    if nx < 0
                        || ny < 0
                        || nz < 0
                        || nx >= sx as i64
                        || ny >= sy as i64
                        || nz >= sz as i64
                        || g.get(nx as usize, ny as usize, nz as usize) == 0
                    {
                        boundary = true;
                        break;
                    }
                }
                if boundary {
                    out.push([x as i64, y as i64, z as i64]);
                }
            }
        }
    }
    out
}

/// Linear-interpolation percentile of an ascending-sorted slice.
fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    if sorted.len() == 1 {
        return sorted[0];
    }
    let rank = q * (sorted.len() - 1) as f64;
    let k = rank.floor() as usize;
    let frac = rank - k as f64;
    if k + 1 >= sorted.len() {
        sorted[sorted.len() - 1]
    } else {
        sorted[k] + frac * (sorted[k + 1] - sorted[k])
    }
}

/// Directed 95th-percentile distance from each surface point of `from` to
/// the nearest surface point of `to`.
fn directed_hd95(from: &[[i64; 3]], to: &[[i64; 3]]) -> f64 {
    let mut dists: Vec<f64> = from
        .iter()
        .map(|p| {
            let mut best = i64::MAX;
            for q in to {
                let (dx, dy, dz) = (p[0] - q[0], p[1] - q[1], p[2] - q[2]);
                let d2 = dx * dx + dy * dy + dz * dz;
                if d2 < best {
                    best = d2;
                }
            }
            (best as f64).sqrt()
        })
        .collect();
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    percentile_sorted(&dists, 0.95)
}

/// Max of the two directed 95th-percentile surface distances. Either mask
/// empty yields the volume diagonal as a flagged sentinel.
pub fn hd95(a: &SegmentationMask, b: &SegmentationMask) -> Hd95 {
    assert_eq!(a.shape(), b.shape(), "hd95 requires matching shapes");
    let sa = surface_voxels(a);
    let sb = surface_voxels(b);
    if sa.is_empty() || sb.is_empty() {
        let (x, y, z) = a.shape();
        let diag = ((x * x + y * y + z * z) as f64).sqrt();
        return Hd95 {
            value: diag,
            degenerate: true,
        };
    }
    Hd95 {
        value: directed_hd95(&sa, &sb).max(directed_hd95(&sb, &sa)),
        degenerate: false,
    }
}

// ---------------------------------------------------------------------------
// Paired one-tailed t-test.
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TTestResult {
    pub t: f64,
    /// One-tailed p for the alternative `mean(a) > mean(b)`.
    pub p_one_tailed: f64,
    /// Set when the paired differences have zero variance.
    pub zero_variance: bool,
}

/// Classic paired t statistic on `a - b` with sample (n-1) variance.
pub fn paired_t_test(scores_a: &[f64], scores_b: &[f64]) -> Result<TTestResult> {
    if scores_a.len() != scores_b.len() {
        return Err(DualsegError::InvalidInput("paired t-test needs equal lengths".into()));
    }
    let n = scores_a.len();
    if n < 2 {
        return Err(DualsegError::InvalidInput("paired t-test needs n >= 2".into()));
    }
    let d: Vec<f64> = scores_a.iter().zip(scores_b).map(|(a, b)| a - b).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n as f64 - 1.0);
    if var == 0.0 {
        // Degenerate: p collapses to {0, 1} by the sign of the mean shift.
        let (t, p) = if mean > 0.0 {
            (f64::INFINITY, 0.0)
        } else if mean < 0.0 {
            (f64::NEG_INFINITY, 1.0)
        } else {
            (0.0, 0.5)
        };
        return Ok(TTestResult {
            t,
            p_one_tailed: p,
            zero_variance: true,
        });
    }
    let t = mean / (var / n as f64).sqrt();
    let nu = (n - 1) as f64;
    Ok(TTestResult {
        t,
        p_one_tailed: 1.0 - student_t_cdf(t, nu),
        zero_variance: false,
    })
}

/// CDF of Student's t with `nu` degrees of freedom, via the regularized
/// incomplete beta function.
pub fn student_t_cdf(t: f64, nu: f64) -> f64 {
    let x = nu / (nu + t * t);
    let p = 0.5 * betai(0.5 * nu, 0.5, x);
    if t >= 0.0 {
        1.0 - p
    } else {
        p
    }
}

/// Regularized incomplete beta I_x(a, b) by continued fraction.
fn betai(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_bt = libm::lgamma(a + b) - libm::lgamma(a) - libm::lgamma(b)
        + a * libm::log(x)
        + b * libm::log(1.0 - x);
    let bt = libm::exp(ln_bt);
    if x < (a + 1.0) / (a + b + 2.0) {
        bt * betacf(a, b, x) / a
    } else {
        1.0 - bt * betacf(b, a, 1.0 - x) / b
    }
}

fn betacf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_IT: usize = 300;
    const EPS: f64 = 3e-16;
    const FPMIN: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < FPMIN {
        d = FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_IT {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

// ---------------------------------------------------------------------------
// Result aggregation.
// ---------------------------------------------------------------------------

/// Per-method evaluation scores for one table row.
#[derive(Clone, Debug)]
pub struct MethodResult {
    pub method: String,
    pub labeled: usize,
    pub unlabeled: usize,
    pub dsc: Vec<f64>,
    pub hd95: Vec<f64>,
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation (divide by n); 0 for a single value.
pub fn population_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

pub const SUMMARY_SCHEMA: &str =
    "# dualseg-results-v1: method,labeled,unlabeled,dsc_mean,dsc_std,hd95_mean,hd95_std";

/// CSV rows "method,L,U,dsc mean,dsc std,hd95 mean,hd95 std" with a versioned
/// header comment; std is the population convention.
pub fn summarize(results: &[MethodResult]) -> String {
    let mut out = String::new();
    out.push_str(SUMMARY_SCHEMA);
    out.push('\n');
    out.push_str("method,labeled,unlabeled,dsc_mean,dsc_std,hd95_mean,hd95_std\n");
    for r in results {
        assert!(!r.dsc.is_empty(), "method {} has no results", r.method);
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
            r.method,
            r.labeled,
            r.unlabeled,
            mean(&r.dsc),
            population_std(&r.dsc),
            mean(&r.hd95),
            population_std(&r.hd95),
        ));
    }
    out
}
