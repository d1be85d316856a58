//! Space-filling designs of experiments in the unit hypercube: Latin
//! hypercube sampling and centered-L2-discrepancy optimization.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{QrbdoError, Result};

/// A design of experiments in `[0,1]^s` with its centered L2 discrepancy.
#[derive(Debug, Clone)]
pub struct Design {
    pub points: DMatrix<f64>,
    pub discrepancy: f64,
}

/// Plain Latin hypercube: each column's strata `[i/n, (i+1)/n)` each hold
/// exactly one point, jittered uniformly inside the stratum.
pub fn lhs<R: Rng + ?Sized>(n: usize, s: usize, rng: &mut R) -> Design {
    assert!(n >= 1 && s >= 1, "lhs needs n >= 1 and s >= 1");
    let mut points = DMatrix::zeros(n, s);
    let mut perm: Vec<usize> = (0..n).collect();
    for j in 0..s {
        perm.shuffle(rng);
        for i in 0..n {
            points[(i, j)] = (perm[i] as f64 + rng.random::<f64>()) / n as f64;
        }
    }
    let discrepancy = centered_l2_discrepancy(&points).expect("lhs points are in the unit cube");
    Design { points, discrepancy }
}

/// Centered L2 discrepancy (Hickernell's three-term formula), invariant
/// under row permutation.
pub fn centered_l2_discrepancy(points: &DMatrix<f64>) -> Result<f64> {
    let (n, s) = points.shape();
    if points.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return Err(QrbdoError::Domain(
            "discrepancy is defined on points inside the unit cube".into(),
        ));
    }
    let nf = n as f64;
    let mut term2 = 0.0;
    for i in 0..n {
        let mut prod = 1.0;
        for k in 0..s {
            let c = (points[(i, k)] - 0.5).abs();
            prod *= 1.0 + 0.5 * c - 0.5 * c * c;
        }
        term2 += prod;
    }
    let mut term3 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let mut prod = 1.0;
            for k in 0..s {
                let ci = (points[(i, k)] - 0.5).abs();
                let cj = (points[(j, k)] - 0.5).abs();
                let dij = (points[(i, k)] - points[(j, k)]).abs();
                prod *= 1.0 + 0.5 * ci + 0.5 * cj - 0.5 * dij;
            }
            term3 += prod;
        }
    }
    let sq = (13.0 / 12.0_f64).powi(s as i32) - 2.0 / nf * term2 + term3 / (nf * nf);
    Ok(sq.max(0.0).sqrt())
}

/// Discrepancy-optimized Latin hypercube: best of `restarts` random LHS
/// candidates, each improved by column-entry swap hill climbing (swaps
/// preserve the Latin property; worsening swaps are never kept).
pub fn optimize_lhs<R: Rng + ?Sized>(n: usize, s: usize, restarts: usize, rng: &mut R) -> Design {
    optimize_lhs_with(n, s, restarts, 50 * n, rng)
}

/// As [`optimize_lhs`] with an explicit swap budget per restart.
pub fn optimize_lhs_with<R: Rng + ?Sized>(
    n: usize,
    s: usize,
    restarts: usize,
    swaps: usize,
    rng: &mut R,
) -> Design {
    assert!(restarts >= 1, "optimize_lhs needs restarts >= 1");
    let mut best: Option<Design> = None;
    for _ in 0..restarts {
        let mut cand = lhs(n, s, rng);
        if n >= 2 {
            for _ in 0..swaps {
                let j = rng.random_range(0..s);
                let a = rng.random_range(0..n);
                let mut b = rng.random_range(0..n - 1);
                if b >= a {
                    b += 1;
                }
                cand.points.swap((a, j), (b, j));
                let d = centered_l2_discrepancy(&cand.points).expect("swap keeps unit cube");
                if d < cand.discrepancy {
                    cand.discrepancy = d;
                } else {
                    cand.points.swap((a, j), (b, j));
                }
            }
        }
        // Ties resolve to the earliest restart.
        if best.as_ref().map_or(true, |b| cand.discrepancy < b.discrepancy) {
            best = Some(cand);
        }
    }
    best.expect("restarts >= 1")
}
