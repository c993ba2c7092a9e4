//! Exact Wasserstein-1 transport between discrete measures in R^d with
//! Euclidean ground cost.
//!
//! [`w1_exact`] drops zero-mass atoms and then picks a solver:
//!
//! * both measures uniform with the same support size: Jonker–Volgenant
//!   assignment (an optimal uniform coupling is a permutation);
//! * anything else: primal network simplex on the complete bipartite graph.
//!
//! Both solvers are deterministic. The simplex prices with Dantzig's rule
//! (most negative reduced cost, ties to the smallest `(row, col)`) and ratio
//! ties go to the first blocking cell met when walking the cycle from the
//! entering column, so repeated runs return the identical plan.

mod assignment;
mod simplex;

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::{euclidean, Matrix};

/// Tolerance on the marginals of a returned plan.
pub const FEASIBILITY_TOL: f64 = 1e-7;
/// Tolerance used when comparing optimal costs.
pub const OPTIMALITY_TOL: f64 = 1e-9;
/// Tolerance on the total mass of a [`PointCloud`].
pub const WEIGHT_SUM_TOL: f64 = 1e-9;
/// Largest support accepted by [`brute_force_w1`].
pub const BRUTE_FORCE_MAX_SUPPORT: usize = 8;

/// Weighted empirical measure: `support_size` points in R^dim with
/// nonnegative weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Matrix,
    weights: Vec<f64>,
}

impl PointCloud {
    pub fn new(points: Matrix, weights: Vec<f64>) -> Result<Self> {
        if points.rows() == 0 || points.cols() == 0 {
            return Err(Error::Data(format!(
                "point cloud needs at least one point of dimension >= 1, got {}x{}",
                points.rows(),
                points.cols()
            )));
        }
        if weights.len() != points.rows() {
            return Err(Error::Dimension {
                expected: points.rows(),
                found: weights.len(),
            });
        }
        if !points.is_finite() {
            return Err(Error::Data("non-finite coordinate in point cloud".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Data("weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::Data(format!("weights sum to {total}, expected 1")));
        }
        Ok(Self { points, weights })
    }

    /// Uniform measure on the rows of `points`.
    pub fn uniform(points: Matrix) -> Result<Self> {
        let n = points.rows().max(1);
        let w = 1.0 / n as f64;
        let weights = alloc::vec![w; points.rows()];
        Self::new(points, weights)
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    pub fn points(&self) -> &Matrix {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn point(&self, i: usize) -> &[f64] {
        self.points.row(i)
    }

    /// True when all weights equal `1/len` to within `1e-12`.
    pub fn is_uniform(&self) -> bool {
        let w = 1.0 / self.len() as f64;
        self.weights.iter().all(|x| (x - w).abs() <= 1e-12)
    }

    /// The same measure shifted by `t`.
    pub fn translate(&self, t: &[f64]) -> Result<Self> {
        if t.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                found: t.len(),
            });
        }
        let mut points = self.points.clone();
        for i in 0..points.rows() {
            for (x, dx) in points.row_mut(i).iter_mut().zip(t) {
                *x += dx;
            }
        }
        Ok(Self {
            points,
            weights: self.weights.clone(),
        })
    }

    /// The same measure with every coordinate multiplied by `s`.
    pub fn scale(&self, s: f64) -> Self {
        Self {
            points: self.points.map(|x| x * s),
            weights: self.weights.clone(),
        }
    }
}

/// An optimal coupling and its cost.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    coupling: Matrix,
    cost: f64,
}

impl TransportPlan {
    /// `support_a x support_b` matrix of transported mass.
    pub fn coupling(&self) -> &Matrix {
        &self.coupling
    }

    /// Transport cost, i.e. the Wasserstein-1 distance.
    pub fn cost(&self) -> f64 {
        self.cost
    }

    /// Largest deviation of a row or column sum from the marginal weights.
    pub fn marginal_error(&self, a: &PointCloud, b: &PointCloud) -> f64 {
        let c = &self.coupling;
        let mut err: f64 = 0.0;
        for i in 0..c.rows() {
            let s: f64 = c.row(i).iter().sum();
            err = err.max((s - a.weights()[i]).abs());
        }
        for j in 0..c.cols() {
            let s: f64 = (0..c.rows()).map(|i| c[(i, j)]).sum();
            err = err.max((s - b.weights()[j]).abs());
        }
        err
    }
}

/// Solver selection for [`w1_exact_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Solver {
    /// Assignment for uniform equal-size measures, network simplex otherwise.
    #[default]
    Auto,
    NetworkSimplex,
    /// Only valid for uniform measures of equal support size.
    Assignment,
}

fn check_dims(a: &PointCloud, b: &PointCloud) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    Ok(())
}

/// Pairwise Euclidean distances, entry `(i, j) = |a_i - b_j|`.
pub fn cost_matrix(a: &PointCloud, b: &PointCloud) -> Result<Matrix> {
    check_dims(a, b)?;
    Ok(pairwise_distances(a.points(), b.points()))
}

pub(crate) fn pairwise_distances(a: &Matrix, b: &Matrix) -> Matrix {
    let mut c = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        let ai = a.row(i);
        for j in 0..b.rows() {
            c[(i, j)] = euclidean(ai, b.row(j));
        }
    }
    c
}

/// Exact Wasserstein-1 distance and an optimal coupling.
pub fn w1_exact(a: &PointCloud, b: &PointCloud) -> Result<TransportPlan> {
    w1_exact_with(a, b, Solver::Auto)
}

pub fn w1_exact_with(a: &PointCloud, b: &PointCloud, solver: Solver) -> Result<TransportPlan> {
    let full = cost_matrix(a, b)?;

    let rows: Vec<usize> = (0..a.len()).filter(|&i| a.weights()[i] > 0.0).collect();
    let cols: Vec<usize> = (0..b.len()).filter(|&j| b.weights()[j] > 0.0).collect();
    let uniform_square = rows.len() == cols.len()
        && is_uniform_on(a.weights(), &rows)
        && is_uniform_on(b.weights(), &cols);

    let use_assignment = match solver {
        Solver::Auto => uniform_square,
        Solver::Assignment if uniform_square => true,
        Solver::Assignment => {
            return Err(Error::Domain(
                "assignment solver needs uniform measures of equal support size".into(),
            ))
        }
        Solver::NetworkSimplex => false,
    };

    let mut sub = Matrix::zeros(rows.len(), cols.len());
    for (si, &i) in rows.iter().enumerate() {
        for (sj, &j) in cols.iter().enumerate() {
            sub[(si, sj)] = full[(i, j)];
        }
    }

    let mut coupling = Matrix::zeros(a.len(), b.len());
    if use_assignment {
        let mass = 1.0 / rows.len() as f64;
        for (si, sj) in assignment::lapjv(&sub).into_iter().enumerate() {
            coupling[(rows[si], cols[sj])] = mass;
        }
    } else {
        let supply: Vec<f64> = rows.iter().map(|&i| a.weights()[i]).collect();
        let mut demand: Vec<f64> = cols.iter().map(|&j| b.weights()[j]).collect();
        // Equalize total masses that differ within the weight tolerance.
        let ratio = supply.iter().sum::<f64>() / demand.iter().sum::<f64>();
        demand.iter_mut().for_each(|d| *d *= ratio);
        for (si, sj, flow) in simplex::transport_simplex(&supply, &demand, &sub)? {
            coupling[(rows[si], cols[sj])] = flow;
        }
    }

    let mut cost = 0.0;
    for i in 0..coupling.rows() {
        for j in 0..coupling.cols() {
            let f = coupling[(i, j)];
            if f != 0.0 {
                cost += f * full[(i, j)];
            }
        }
    }
    Ok(TransportPlan { coupling, cost })
}

fn is_uniform_on(weights: &[f64], active: &[usize]) -> bool {
    let w = 1.0 / active.len() as f64;
    active.iter().all(|&i| (weights[i] - w).abs() <= 1e-12)
}

/// W1 between the uniform measures on the rows of `a` and of `b`, which must
/// have the same number of rows and columns.
///
/// This is the solver path [`w1_exact`] takes for uniform equal-size clouds,
/// without materializing the coupling.
pub fn w1_uniform(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(Error::Dimension {
            expected: a.cols(),
            found: b.cols(),
        });
    }
    if a.rows() != b.rows() || a.rows() == 0 {
        return Err(Error::Dimension {
            expected: a.rows(),
            found: b.rows(),
        });
    }
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::Data("non-finite coordinate".into()));
    }
    let cost = pairwise_distances(a, b);
    let perm = assignment::lapjv(&cost);
    let total: f64 = perm.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum();
    Ok(total / a.rows() as f64)
}

/// W1 between two one-dimensional measures by integrating the absolute
/// difference of their distribution functions; `O(n log n)`.
pub fn w1_1d(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    for c in [a, b] {
        if c.dim() != 1 {
            return Err(Error::Dimension {
                expected: 1,
                found: c.dim(),
            });
        }
    }
    let mut events: Vec<(f64, f64)> = Vec::with_capacity(a.len() + b.len());
    events.extend((0..a.len()).map(|i| (a.point(i)[0], a.weights()[i])));
    events.extend((0..b.len()).map(|j| (b.point(j)[0], -b.weights()[j])));
    events.sort_by(|x, y| x.0.total_cmp(&y.0));

    let mut cdf_gap = 0.0;
    let mut total = 0.0;
    for w in events.windows(2) {
        cdf_gap += w[0].1;
        total += cdf_gap.abs() * (w[1].0 - w[0].0);
    }
    Ok(total)
}

/// Test oracle: minimum over all permutation matchings of the mean pair cost.
///
/// Requires uniform weights and equal supports of at most
/// [`BRUTE_FORCE_MAX_SUPPORT`] points.
pub fn brute_force_w1(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    check_dims(a, b)?;
    let n = a.len();
    if n > BRUTE_FORCE_MAX_SUPPORT || b.len() > BRUTE_FORCE_MAX_SUPPORT {
        return Err(Error::Size {
            size: n.max(b.len()),
            limit: BRUTE_FORCE_MAX_SUPPORT,
        });
    }
    if b.len() != n || !a.is_uniform() || !b.is_uniform() {
        return Err(Error::Domain(
            "brute force oracle needs uniform measures of equal support size".into(),
        ));
    }
    let cost = pairwise_distances(a.points(), b.points());
    let eval = |perm: &[usize]| -> f64 { perm.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum() };

    // Heap's algorithm.
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = eval(&perm);
    let mut c = alloc::vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(eval(&perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok(best / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn cloud(rows: &[&[f64]]) -> PointCloud {
        PointCloud::uniform(Matrix::from_rows(rows).unwrap()).unwrap()
    }

    fn random_cloud(rng: &mut impl Rng, n: usize, d: usize) -> PointCloud {
        let data = (0..n * d).map(|_| rng.random::<f64>()).collect();
        PointCloud::uniform(Matrix::new(n, d, data).unwrap()).unwrap()
    }

    fn random_weights(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        let mut w: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.05).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= s);
        w
    }

    #[test]
    fn point_cloud_invariants() {
        let pts = Matrix::from_rows(&[[0.0], [1.0]]).unwrap();
        assert!(PointCloud::new(pts.clone(), alloc::vec![0.5, 0.6]).is_err());
        assert!(PointCloud::new(pts.clone(), alloc::vec![-0.5, 1.5]).is_err());
        assert!(matches!(
            PointCloud::new(pts.clone(), alloc::vec![1.0]),
            Err(Error::Dimension { .. })
        ));
        let bad = Matrix::from_rows(&[[f64::NAN]]).unwrap();
        assert!(matches!(PointCloud::uniform(bad), Err(Error::Data(_))));
        assert!(PointCloud::uniform(Matrix::zeros(0, 1)).is_err());
    }

    #[test]
    fn cost_matrix_examples() {
        let c = cost_matrix(&cloud(&[&[0.0, 0.0]]), &cloud(&[&[3.0, 4.0]])).unwrap();
        assert_eq!(c.as_slice(), &[5.0]);
        let one = cloud(&[&[1.0, 1.0]]);
        assert_eq!(cost_matrix(&one, &one).unwrap().as_slice(), &[0.0]);
        assert!(matches!(
            cost_matrix(&one, &cloud(&[&[1.0]])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn cost_matrix_matches_scalar_loop() {
        let mut rng = stream(11, &[]);
        let a = random_cloud(&mut rng, 4, 3);
        let b = random_cloud(&mut rng, 4, 3);
        let c = cost_matrix(&a, &b).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let mut s = 0.0;
                for k in 0..3 {
                    let d = a.point(i)[k] - b.point(j)[k];
                    s += d * d;
                }
                assert!((c[(i, j)] - s.sqrt()).abs() < 1e-15);
            }
        }
        let self_cost = cost_matrix(&a, &a).unwrap();
        assert_eq!(self_cost, self_cost.transpose());
    }

    #[test]
    fn small_exact_examples() {
        let a = cloud(&[&[0.0], &[1.0]]);
        let b = cloud(&[&[0.5], &[1.5]]);
        assert!((w1_exact(&a, &b).unwrap().cost() - 0.5).abs() < 1e-12);
        assert!((w1_1d(&a, &b).unwrap() - 0.5).abs() < 1e-12);
        // Sorted matching oracle.
        assert!((brute_force_w1(&a, &b).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(w1_exact(&a, &a).unwrap().cost(), 0.0);

        let p = cloud(&[&[0.0, 0.0], &[1.0, 2.0], &[-1.0, 0.5]]);
        let q = p.translate(&[3.0, 4.0]).unwrap();
        assert!((w1_exact(&p, &q).unwrap().cost() - 5.0).abs() < 1e-9);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let a = cloud(&[&[0.0]]);
        let b = cloud(&[&[0.0, 1.0]]);
        assert!(matches!(w1_exact(&a, &b), Err(Error::Dimension { .. })));
        assert!(matches!(w1_1d(&b, &b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn brute_force_limits() {
        let mut rng = stream(3, &[]);
        let big = random_cloud(&mut rng, 9, 2);
        assert!(matches!(
            brute_force_w1(&big, &big),
            Err(Error::Size { size: 9, limit: 8 })
        ));
        let two = cloud(&[&[0.0], &[10.0]]);
        let other = cloud(&[&[9.0], &[1.0]]);
        // min of the two matchings: (0->9, 10->1) = 9, (0->1, 10->9) = 1.
        assert!((brute_force_w1(&two, &other).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn brute_force_below_product_coupling() {
        let mut rng = stream(5, &[]);
        for _ in 0..20 {
            let a = random_cloud(&mut rng, 5, 2);
            let b = random_cloud(&mut rng, 5, 2);
            let c = cost_matrix(&a, &b).unwrap();
            let product: f64 = c.as_slice().iter().sum::<f64>() / 25.0;
            assert!(brute_force_w1(&a, &b).unwrap() <= product + 1e-12);
        }
    }

    #[test]
    fn simplex_matches_assignment_on_uniform() {
        let mut rng = stream(17, &[]);
        for n in 1..=12 {
            let a = random_cloud(&mut rng, n, 3);
            let b = random_cloud(&mut rng, n, 3);
            let x = w1_exact_with(&a, &b, Solver::Assignment).unwrap();
            let y = w1_exact_with(&a, &b, Solver::NetworkSimplex).unwrap();
            assert!((x.cost() - y.cost()).abs() < 1e-10, "n={n}");
            assert!(y.marginal_error(&a, &b) < FEASIBILITY_TOL);
        }
    }

    #[test]
    fn weighted_plans_are_feasible_and_match_1d() {
        let mut rng = stream(23, &[]);
        for _ in 0..100 {
            let n = rng.random_range(1..8);
            let m = rng.random_range(1..8);
            let a = PointCloud::new(random_cloud(&mut rng, n, 1).points().clone(), random_weights(&mut rng, n)).unwrap();
            let b = PointCloud::new(random_cloud(&mut rng, m, 1).points().clone(), random_weights(&mut rng, m)).unwrap();
            let plan = w1_exact(&a, &b).unwrap();
            assert!(plan.marginal_error(&a, &b) < FEASIBILITY_TOL);
            assert!(plan.coupling().as_slice().iter().all(|&f| f >= 0.0));
            assert!((plan.cost() - w1_1d(&a, &b).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_weight_atoms_are_ignored() {
        let a = PointCloud::new(Matrix::column(&[0.0, 100.0, 1.0]), alloc::vec![0.5, 0.0, 0.5]).unwrap();
        let b = cloud(&[&[0.0], &[1.0]]);
        let plan = w1_exact(&a, &b).unwrap();
        assert!(plan.cost().abs() < 1e-12);
        assert_eq!(plan.coupling().row(1), &[0.0, 0.0]);
    }

    #[test]
    fn duplicate_points_are_allowed() {
        let a = cloud(&[&[0.0], &[0.0], &[2.0]]);
        let b = PointCloud::new(Matrix::column(&[0.0, 2.0]), alloc::vec![2.0 / 3.0, 1.0 / 3.0]).unwrap();
        assert!(w1_exact(&a, &b).unwrap().cost().abs() < 1e-12);
    }

    #[test]
    fn deterministic_plans() {
        let mut rng = stream(29, &[]);
        let a = PointCloud::new(random_cloud(&mut rng, 6, 2).points().clone(), random_weights(&mut rng, 6)).unwrap();
        let b = PointCloud::new(random_cloud(&mut rng, 5, 2).points().clone(), random_weights(&mut rng, 5)).unwrap();
        assert_eq!(w1_exact(&a, &b).unwrap(), w1_exact(&a, &b).unwrap());
    }

    #[test]
    fn assignment_solver_requires_uniform() {
        let a = PointCloud::new(Matrix::column(&[0.0, 1.0]), alloc::vec![0.25, 0.75]).unwrap();
        assert!(matches!(
            w1_exact_with(&a, &a, Solver::Assignment),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn w1_uniform_checks_shapes() {
        let a = Matrix::column(&[0.0, 1.0]);
        let b = Matrix::column(&[0.0]);
        assert!(w1_uniform(&a, &b).is_err());
        assert!((w1_uniform(&a, &Matrix::column(&[0.5, 1.5])).unwrap() - 0.5).abs() < 1e-15);
    }
}
