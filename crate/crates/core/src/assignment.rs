//! Linear assignment.

use crate::error::{Error, Result};
use crate::geometry::{bounds, Vec3};

/// Optimal injective assignment of rows to columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `cols[i]` is the column assigned to row `i`.
    pub cols: Vec<usize>,
    pub total: f64,
}

/// Minimum-cost injective assignment of the `n` rows of `cost` into its `m`
/// columns (`n <= m`). Entries may be `+inf` to forbid a pairing. Uses the
/// shortest augmenting path method with potentials, `O(n^2 m)`.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Assignment> {
    let n = cost.len();
    if n == 0 {
        return Ok(Assignment {
            cols: vec![],
            total: 0.0,
        });
    }
    let m = cost[0].len();
    if cost.iter().any(|r| r.len() != m) {
        return Err(Error::invalid("cost matrix rows have different lengths"));
    }
    if n > m {
        return Err(Error::invalid(format!("cannot assign {n} rows injectively into {m} columns")));
    }
    for (i, row) in cost.iter().enumerate() {
        if row.iter().any(|c| c.is_nan() || *c == f64::NEG_INFINITY) {
            return Err(Error::invalid(format!("cost row {i} contains NaN or -inf")));
        }
        if row.iter().all(|c| c.is_infinite()) {
            return Err(Error::Infeasible(i));
        }
    }

    const INF: f64 = f64::INFINITY;
    // 1-based rows and columns; column 0 is the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![INF; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let c = cost[i0 - 1][j - 1];
                if c.is_finite() {
                    let cur = c - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            if !delta.is_finite() {
                return Err(Error::Infeasible(i - 1));
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut cols = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            cols[p[j] - 1] = j - 1;
        }
    }
    let total = cols.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    Ok(Assignment { cols, total })
}

/// Euclidean distance matrix between two point lists.
pub fn distance_matrix(a: &[Vec3], b: &[Vec3]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|p| b.iter().map(|q| (p - q).norm()).collect())
        .collect()
}

/// Largest set size matched exactly by [`match_point_sets`].
pub const EXACT_MATCH_LIMIT: usize = 512;

/// Bijective pairing of two equal-size point sets minimizing total Euclidean
/// distance. Exact up to [`EXACT_MATCH_LIMIT`] points; larger sets are split
/// recursively at the median of their widest common axis and each half is
/// matched on its own, which keeps large instances tractable.
pub fn match_point_sets(a: &[Vec3], b: &[Vec3]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "point sets differ in size: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let ia: Vec<usize> = (0..a.len()).collect();
    let ib: Vec<usize> = (0..b.len()).collect();
    let mut out = vec![0usize; a.len()];
    match_recursive(a, b, ia, ib, &mut out)?;
    Ok(out)
}

fn match_recursive(a: &[Vec3], b: &[Vec3], mut ia: Vec<usize>, mut ib: Vec<usize>, out: &mut [usize]) -> Result<()> {
    if ia.len() <= EXACT_MATCH_LIMIT {
        let pa: Vec<Vec3> = ia.iter().map(|&i| a[i]).collect();
        let pb: Vec<Vec3> = ib.iter().map(|&i| b[i]).collect();
        let assign = hungarian(&distance_matrix(&pa, &pb))?;
        for (k, &c) in assign.cols.iter().enumerate() {
            out[ia[k]] = ib[c];
        }
        return Ok(());
    }
    let all: Vec<Vec3> = ia.iter().map(|&i| a[i]).chain(ib.iter().map(|&i| b[i])).collect();
    let (lo, hi) = bounds(&all).expect("non-empty");
    let ext = hi - lo;
    let axis = if ext.x >= ext.y && ext.x >= ext.z {
        0
    } else if ext.y >= ext.z {
        1
    } else {
        2
    };
    ia.sort_by(|&i, &j| a[i][axis].total_cmp(&a[j][axis]).then(i.cmp(&j)));
    ib.sort_by(|&i, &j| b[i][axis].total_cmp(&b[j][axis]).then(i.cmp(&j)));
    let half = ia.len() / 2;
    let (a_hi, b_hi) = (ia.split_off(half), ib.split_off(half));
    match_recursive(a, b, ia, ib, out)?;
    match_recursive(a, b, a_hi, b_hi, out)
}
