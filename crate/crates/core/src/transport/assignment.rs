//! Jonker–Volgenant linear assignment for dense square cost matrices.
//!
//! Column reduction, reduction transfer and two passes of augmenting row
//! reduction build a partial assignment with feasible column prices; every
//! remaining free row is then augmented along a shortest alternating path
//! (Dijkstra on reduced costs). With floating-point costs a row reduction pass
//! can keep re-examining the same rows on near-ties, so each pass is capped
//! and leftover rows go to the shortest-path phase, which is exact on its own.

use alloc::vec::Vec;

use crate::matrix::Matrix;

const UNASSIGNED: usize = usize::MAX;
/// Row examinations allowed per reduction pass, as a multiple of `n`.
const ARR_STEPS_PER_ROW: usize = 8;

/// Minimum-cost perfect matching; entry `i` is the column assigned to row `i`.
// The scans below grow `up` while walking `up..n`; the start is read once.
#[allow(clippy::mut_range_bound)]
pub(crate) fn lapjv(cost: &Matrix) -> Vec<usize> {
    let n = cost.rows();
    debug_assert_eq!(n, cost.cols());
    if n <= 1 {
        return alloc::vec![0; n];
    }
    let c = |i: usize, j: usize| cost[(i, j)];

    let mut v = alloc::vec![0.0f64; n];
    let mut rowsol = alloc::vec![UNASSIGNED; n];
    let mut colsol = alloc::vec![UNASSIGNED; n];
    let mut matches = alloc::vec![0usize; n];

    // Column reduction.
    for j in (0..n).rev() {
        let mut min = c(0, j);
        let mut imin = 0;
        for i in 1..n {
            if c(i, j) < min {
                min = c(i, j);
                imin = i;
            }
        }
        v[j] = min;
        matches[imin] += 1;
        if matches[imin] == 1 {
            rowsol[imin] = j;
            colsol[j] = imin;
        } else if v[j] < v[rowsol[imin]] {
            let j1 = rowsol[imin];
            rowsol[imin] = j;
            colsol[j] = imin;
            colsol[j1] = UNASSIGNED;
        } else {
            colsol[j] = UNASSIGNED;
        }
    }

    // Reduction transfer.
    let mut free = Vec::new();
    for i in 0..n {
        match matches[i] {
            0 => free.push(i),
            1 => {
                let j1 = rowsol[i];
                let min = cost
                    .row(i)
                    .iter()
                    .zip(&v)
                    .enumerate()
                    .filter(|&(j, _)| j != j1)
                    .fold(f64::INFINITY, |m, (_, (cij, vj))| m.min(cij - vj));
                if min.is_finite() {
                    v[j1] -= min;
                }
            }
            _ => {}
        }
    }

    // Augmenting row reduction.
    for _ in 0..2 {
        let previous = free.len();
        let mut k = 0;
        let mut kept = 0;
        let mut steps = 0;
        while k < previous {
            let i = free[k];
            k += 1;
            steps += 1;
            let row = cost.row(i);
            let mut umin = row[0] - v[0];
            let mut j1 = 0;
            let mut usubmin = f64::INFINITY;
            let mut j2 = UNASSIGNED;
            for j in 1..n {
                let h = row[j] - v[j];
                if h < usubmin {
                    if h >= umin {
                        usubmin = h;
                        j2 = j;
                    } else {
                        usubmin = umin;
                        umin = h;
                        j2 = j1;
                        j1 = j;
                    }
                }
            }
            let mut i0 = colsol[j1];
            let strict = umin < usubmin;
            if strict {
                v[j1] -= usubmin - umin;
            } else if i0 != UNASSIGNED {
                j1 = j2;
                i0 = colsol[j2];
            }
            rowsol[i] = j1;
            colsol[j1] = i;
            if i0 != UNASSIGNED {
                if strict && steps < ARR_STEPS_PER_ROW * n {
                    k -= 1;
                    free[k] = i0;
                } else {
                    free[kept] = i0;
                    kept += 1;
                }
            }
        }
        free.truncate(kept);
    }

    // Augmentation.
    let mut d = alloc::vec![0.0f64; n];
    let mut pred = alloc::vec![0usize; n];
    let mut collist: Vec<usize> = (0..n).collect();
    for &freerow in &free {
        let row = cost.row(freerow);
        for j in 0..n {
            d[j] = row[j] - v[j];
            pred[j] = freerow;
            collist[j] = j;
        }
        // collist[..low] scanned, collist[low..up] at the current minimum
        // distance, collist[up..] not yet reached at that distance.
        let mut low = 0;
        let mut up = 0;
        let mut last = 0;
        let mut min = 0.0;
        let endofpath = 'search: loop {
            if up == low {
                last = low;
                min = d[collist[up]];
                up += 1;
                for k in up..n {
                    let j = collist[k];
                    let h = d[j];
                    if h <= min {
                        if h < min {
                            up = low;
                            min = h;
                        }
                        collist[k] = collist[up];
                        collist[up] = j;
                        up += 1;
                    }
                }
                for k in low..up {
                    if colsol[collist[k]] == UNASSIGNED {
                        break 'search collist[k];
                    }
                }
            }

            let j1 = collist[low];
            low += 1;
            let i = colsol[j1];
            let row = cost.row(i);
            let h = row[j1] - v[j1] - min;
            for k in up..n {
                let j = collist[k];
                let v2 = row[j] - v[j] - h;
                if v2 < d[j] {
                    pred[j] = i;
                    if v2 == min {
                        if colsol[j] == UNASSIGNED {
                            break 'search j;
                        }
                        collist[k] = collist[up];
                        collist[up] = j;
                        up += 1;
                    }
                    d[j] = v2;
                }
            }
        };

        for &j1 in &collist[..last] {
            v[j1] += d[j1] - min;
        }

        let mut j = endofpath;
        loop {
            let i = pred[j];
            colsol[j] = i;
            let next = rowsol[i];
            rowsol[i] = j;
            if i == freerow {
                break;
            }
            j = next;
        }
    }
    rowsol
}
