//! Experimental designs and Fisher information matrices.
//!
//! An approximate design is a finite discrete probability distribution over
//! the dose interval (support points plus weights); an exact design allocates
//! integer subject counts. The information matrix of a design is
//!
//! ```text
//! M(xi; theta) = sum_m w_m * grad_eta(x_m, theta) * grad_eta(x_m, theta)^T
//! ```
//!
//! For the Emax model the locally D-optimal design has the closed form
//! `{a, x*(theta2), b}` with equal weights, where
//! `x*(theta2) = [b(a+theta2) + a(b+theta2)] / [(a+theta2) + (b+theta2)]`.
//! [`brute_force_d_optimal`] searches three-point candidates on a grid and
//! re-optimizes the weights, serving as an independent check of that formula.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::model::{DoseInterval, DoseResponseModel, ModelParams};
use crate::numfmt;

const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Approximate design: strictly increasing support points with probability
/// weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl Design {
    /// Builds a design from (dose, weight) pairs. Pairs are sorted by dose;
    /// duplicate doses, negative weights and weight sums away from one are
    /// rejected.
    pub fn new(points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() || points.len() != weights.len() {
            return Err(Error::invalid(
                "design needs equally many points and weights, at least one each",
            ));
        }
        let mut pairs: Vec<(f64, f64)> = points.into_iter().zip(weights).collect();
        for &(x, w) in &pairs {
            if !x.is_finite() || !w.is_finite() || w < 0.0 {
                return Err(Error::invalid(format!(
                    "design entries must be finite with nonnegative weight, got ({x}, {w})"
                )));
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        if pairs.windows(2).any(|p| p[0].0 >= p[1].0) {
            return Err(Error::invalid("design points must be distinct"));
        }
        let sum: f64 = pairs.iter().map(|p| p.1).sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::invalid(format!(
                "design weights must sum to 1, got {sum}"
            )));
        }
        let (points, weights) = pairs.into_iter().unzip();
        Ok(Self { points, weights })
    }

    /// Additionally checks that every support point lies in `interval`.
    pub fn new_in(points: Vec<f64>, weights: Vec<f64>, interval: &DoseInterval) -> Result<Self> {
        let d = Self::new(points, weights)?;
        if let Some(&x) = d.points.iter().find(|&&x| !interval.contains(x)) {
            return Err(Error::invalid(format!(
                "design point {x} outside [{}, {}]",
                interval.a, interval.b
            )));
        }
        Ok(d)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Exact design: integer allocation of `total` subjects to support points.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactDesign {
    points: Vec<f64>,
    counts: Vec<usize>,
    total: usize,
}

impl ExactDesign {
    pub fn new(points: Vec<f64>, counts: Vec<usize>) -> Result<Self> {
        if points.len() != counts.len() {
            return Err(Error::invalid("points and counts must have equal length"));
        }
        if points.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::invalid("exact design points must be strictly increasing"));
        }
        if points.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("exact design points must be finite"));
        }
        let total = counts.iter().sum();
        Ok(Self {
            points,
            counts,
            total,
        })
    }

    /// Design with no observations; used for single-stage reductions.
    pub fn empty() -> Self {
        Self {
            points: Vec::new(),
            counts: Vec::new(),
            total: 0,
        }
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Symmetric positive semidefinite information matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherMatrix(Matrix3<f64>);

impl FisherMatrix {
    /// Validates symmetry (to 1e-12 relative) and positive semidefiniteness
    /// (eigenvalues above `-1e-10 * trace`).
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let scale = m.iter().fold(1.0_f64, |acc, v| acc.max(v.abs()));
        let asym = (m - m.transpose()).abs().max();
        if asym > 1e-12 * scale {
            return Err(Error::invalid(format!(
                "information matrix not symmetric (asymmetry {asym:e})"
            )));
        }
        let sym = Self(m);
        let floor = -1e-10 * m.trace().abs().max(f64::MIN_POSITIVE);
        if sym.min_eigenvalue() < floor {
            return Err(Error::invalid(format!(
                "information matrix not positive semidefinite (min eigenvalue {:e})",
                sym.min_eigenvalue()
            )));
        }
        Ok(sym)
    }

    pub fn entries(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn determinant(&self) -> f64 {
        self.0.determinant()
    }

    pub fn log_det(&self) -> Result<f64> {
        let d = self.determinant();
        if d <= 0.0 {
            return Err(Error::singular(format!("determinant {d:e} is not positive")));
        }
        Ok(d.ln())
    }

    pub fn inverse(&self) -> Result<Matrix3<f64>> {
        self.0
            .try_inverse()
            .ok_or_else(|| Error::singular("information matrix is not invertible".to_string()))
    }

    pub fn eigenvalues(&self) -> Vector3<f64> {
        self.0.symmetric_eigen().eigenvalues
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().min()
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }
}

/// `sum_m c_m * g(x_m) g(x_m)^T` for arbitrary nonnegative coefficients.
pub(crate) fn gradient_outer_sum(
    points: &[f64],
    coeffs: &[f64],
    theta: &ModelParams,
    model: &impl DoseResponseModel,
) -> Result<Matrix3<f64>> {
    let mut m = Matrix3::zeros();
    for (&x, &c) in points.iter().zip(coeffs) {
        if c == 0.0 {
            continue;
        }
        let g = model.gradient(x, theta)?;
        m += (g * g.transpose()) * c;
    }
    Ok(m)
}

/// Information matrix `M(xi; theta)` of an approximate design.
pub fn fisher_matrix(
    design: &Design,
    theta: &ModelParams,
    model: &impl DoseResponseModel,
) -> Result<FisherMatrix> {
    let m = gradient_outer_sum(&design.points, &design.weights, theta, model)?;
    FisherMatrix::from_matrix(m)
}

/// Interior support point of the locally D-optimal Emax design.
pub fn d_optimal_interior_point(theta2: f64, interval: &DoseInterval) -> Result<f64> {
    if !theta2.is_finite() || theta2 <= 0.0 {
        return Err(Error::invalid(format!("theta2 must be positive, got {theta2}")));
    }
    let (a, b) = (interval.a, interval.b);
    Ok((b * (a + theta2) + a * (b + theta2)) / ((a + theta2) + (b + theta2)))
}

/// Locally D-optimal design for the Emax model: equal weights on
/// `{a, x*(theta2), b}`.
pub fn d_optimal_emax(theta2: f64, interval: &DoseInterval) -> Result<Design> {
    let x_star = d_optimal_interior_point(theta2, interval)?;
    debug_assert!(interval.a < x_star && x_star < interval.b);
    let w = 1.0 / 3.0;
    Design::new(vec![interval.a, x_star, interval.b], vec![w, w, w])
}

/// Grid-plus-weight-ascent search for the D-optimal three-point design.
///
/// Enumerates supports `{a, x, b}` with `x` on a uniform interior grid at
/// equal weights, then re-optimizes the weights on the best support by
/// projected gradient ascent of `log det M`. The weights are treated as free
/// so the search is an independent check of the equal-weight closed form.
pub fn brute_force_d_optimal(
    theta: &ModelParams,
    interval: &DoseInterval,
    grid_size: usize,
    model: &impl DoseResponseModel,
) -> Result<Design> {
    let (best_x, _) = best_grid_candidate(theta, interval, grid_size, model)?;
    let support = [interval.a, best_x, interval.b];
    let weights = ascend_weights(&support, theta, model)?;
    Design::new(support.to_vec(), weights.to_vec())
}

/// Largest log-det advantage of any brute-force candidate (grid enumeration
/// plus the weight-optimized best support) over the closed-form design.
/// Nonpositive values certify optimality of the closed form at grid
/// resolution.
pub fn d_optimality_gap(
    theta: &ModelParams,
    interval: &DoseInterval,
    grid_size: usize,
    model: &impl DoseResponseModel,
) -> Result<f64> {
    let reference = fisher_matrix(&d_optimal_emax(theta.theta2, interval)?, theta, model)?
        .log_det()?;
    let (_, best_grid) = best_grid_candidate(theta, interval, grid_size, model)?;
    let refined = brute_force_d_optimal(theta, interval, grid_size, model)?;
    let refined_ld = fisher_matrix(&refined, theta, model)?.log_det()?;
    Ok(best_grid.max(refined_ld) - reference)
}

fn best_grid_candidate(
    theta: &ModelParams,
    interval: &DoseInterval,
    grid_size: usize,
    model: &impl DoseResponseModel,
) -> Result<(f64, f64)> {
    if grid_size < 50 {
        return Err(Error::invalid(format!(
            "grid size must be at least 50, got {grid_size}"
        )));
    }
    let (a, b) = (interval.a, interval.b);
    let g_a = model.gradient(a, theta)?;
    let g_b = model.gradient(b, theta)?;
    let step = (b - a) / grid_size as f64;
    let w = 1.0 / 3.0;
    let mut best: Option<(f64, f64)> = None;
    for k in 1..grid_size {
        let x = a + step * k as f64;
        let g_x = model.gradient(x, theta)?;
        let m = (g_a * g_a.transpose() + g_x * g_x.transpose() + g_b * g_b.transpose()) * w;
        let det = m.determinant();
        if det <= 0.0 {
            continue;
        }
        let ld = det.ln();
        // Strict comparison keeps the lowest-index maximizer.
        if best.map_or(true, |(_, b_ld)| ld > b_ld) {
            best = Some((x, ld));
        }
    }
    best.ok_or_else(|| {
        Error::singular("every candidate design has a singular information matrix".to_string())
    })
}

/// Projected gradient ascent of `log det sum_i w_i g_i g_i^T` over the
/// probability simplex, from a deliberately asymmetric start.
fn ascend_weights(
    support: &[f64; 3],
    theta: &ModelParams,
    model: &impl DoseResponseModel,
) -> Result<[f64; 3]> {
    let grads: Vec<Vector3<f64>> = support
        .iter()
        .map(|&x| model.gradient(x, theta))
        .collect::<Result<_>>()?;

    let info = |w: &[f64; 3]| -> Matrix3<f64> {
        let mut m = Matrix3::zeros();
        for (g, &wi) in grads.iter().zip(w.iter()) {
            m += (g * g.transpose()) * wi;
        }
        m
    };
    let log_det = |w: &[f64; 3]| -> Option<f64> {
        let det = info(w).determinant();
        (det > 0.0).then(|| det.ln())
    };

    let mut w = [0.5, 0.3, 0.2];
    let mut obj = log_det(&w)
        .ok_or_else(|| Error::singular("weight ascent started at a singular design".to_string()))?;

    for _ in 0..500 {
        let inv = info(&w)
            .try_inverse()
            .ok_or_else(|| Error::singular("singular design during weight ascent".to_string()))?;
        let grad = [
            (grads[0].transpose() * inv * grads[0])[(0, 0)],
            (grads[1].transpose() * inv * grads[1])[(0, 0)],
            (grads[2].transpose() * inv * grads[2])[(0, 0)],
        ];

        let mut step = 0.5;
        let mut moved = false;
        while step > 1e-16 {
            let mut trial = [
                w[0] + step * grad[0],
                w[1] + step * grad[1],
                w[2] + step * grad[2],
            ];
            project_onto_simplex(&mut trial);
            if let Some(t_obj) = log_det(&trial) {
                if t_obj > obj {
                    let delta = trial
                        .iter()
                        .zip(w.iter())
                        .map(|(t, o)| (t - o).abs())
                        .fold(0.0_f64, f64::max);
                    w = trial;
                    obj = t_obj;
                    moved = delta > 1e-12;
                    break;
                }
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
    }
    Ok(w)
}

/// Euclidean projection onto the probability simplex.
fn project_onto_simplex(v: &mut [f64; 3]) {
    let mut u = *v;
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut tau = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cum += uj;
        let t = (cum - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            tau = t;
        }
    }
    for x in v.iter_mut() {
        *x = (*x - tau).max(0.0);
    }
}

/// Largest-remainder (Hamilton) apportionment of `n` subjects to the design
/// weights; remainder ties are broken toward the lowest point index.
pub fn apportion(design: &Design, n: usize) -> ExactDesign {
    let m = design.len();
    let mut counts = vec![0usize; m];
    let mut fracs: Vec<(usize, f64)> = Vec::with_capacity(m);
    let mut assigned = 0usize;
    for (i, &w) in design.weights.iter().enumerate() {
        let target = n as f64 * w;
        let floor = target.floor();
        counts[i] = floor as usize;
        assigned += counts[i];
        fracs.push((i, target - floor));
    }
    // Stable sort by descending fractional remainder keeps index order on ties.
    fracs.sort_by(|a, b| b.1.total_cmp(&a.1));
    for &(i, _) in fracs.iter().take(n - assigned) {
        counts[i] += 1;
    }
    ExactDesign {
        points: design.points.clone(),
        counts,
        total: n,
    }
}

/// A design file: either approximate (weights) or exact (counts).
#[derive(Debug, Clone, PartialEq)]
pub enum DesignFile {
    Approximate(Design),
    Exact(ExactDesign),
}

/// Renders an approximate design in the plain-text design format.
pub fn render_design(design: &Design) -> String {
    let mut out = String::from("#design approximate\n");
    for (&x, &w) in design.points.iter().zip(&design.weights) {
        out.push_str(&format!("{},{}\n", numfmt::machine(x), numfmt::machine(w)));
    }
    out
}

/// Renders an exact design in the plain-text design format.
pub fn render_exact_design(design: &ExactDesign) -> String {
    let mut out = format!("#design exact n={}\n", design.total);
    for (&x, &c) in design.points.iter().zip(&design.counts) {
        out.push_str(&format!("{},{c}\n", numfmt::machine(x)));
    }
    out
}

/// Parses the plain-text design format. Comment lines other than the
/// `#design` header are ignored.
pub fn parse_design(text: &str) -> Result<DesignFile> {
    let mut header: Option<(bool, Option<usize>)> = None; // (exact, declared n)
    let mut doses = Vec::new();
    let mut values = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("#design") {
            if header.is_some() {
                return Err(Error::parse("duplicate #design header".to_string()));
            }
            header = Some(parse_design_header(rest.trim())?);
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let (exact, _) = header
            .ok_or_else(|| Error::parse("design data before #design header".to_string()))?;
        let (dose_s, val_s) = line.split_once(',').ok_or_else(|| {
            Error::parse(format!("line {}: expected 'dose,value'", lineno + 1))
        })?;
        let dose: f64 = dose_s
            .trim()
            .parse()
            .map_err(|_| Error::parse(format!("line {}: bad dose '{dose_s}'", lineno + 1)))?;
        let val: f64 = val_s
            .trim()
            .parse()
            .map_err(|_| Error::parse(format!("line {}: bad value '{val_s}'", lineno + 1)))?;
        if exact && (val < 0.0 || val.fract() != 0.0) {
            return Err(Error::parse(format!(
                "line {}: exact design counts must be nonnegative integers",
                lineno + 1
            )));
        }
        doses.push(dose);
        values.push(val);
    }
    match header {
        None => Err(Error::parse("missing #design header".to_string())),
        Some((false, _)) => Ok(DesignFile::Approximate(Design::new(doses, values)?)),
        Some((true, declared)) => {
            let counts: Vec<usize> = values.iter().map(|&v| v as usize).collect();
            let design = ExactDesign::new(doses, counts)?;
            if let Some(n) = declared {
                if n != design.total {
                    return Err(Error::parse(format!(
                        "declared n={n} but counts sum to {}",
                        design.total
                    )));
                }
            }
            Ok(DesignFile::Exact(design))
        }
    }
}

fn parse_design_header(rest: &str) -> Result<(bool, Option<usize>)> {
    let mut tokens = rest.split_whitespace();
    let kind = tokens
        .next()
        .ok_or_else(|| Error::parse("empty #design header".to_string()))?;
    let exact = match kind {
        "approximate" => false,
        "exact" => true,
        other => {
            return Err(Error::parse(format!(
                "design kind must be 'approximate' or 'exact', got '{other}'"
            )))
        }
    };
    let mut declared = None;
    for tok in tokens {
        if let Some(n) = tok.strip_prefix("n=") {
            declared = Some(n.parse().map_err(|_| {
                Error::parse(format!("bad subject count in design header: '{tok}'"))
            })?);
        } else {
            return Err(Error::parse(format!("unexpected design header token '{tok}'")));
        }
    }
    Ok((exact, declared))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Emax;

    fn theta() -> ModelParams {
        ModelParams::new(2.0, 0.467, 25.0).unwrap()
    }

    fn interval() -> DoseInterval {
        DoseInterval::new(0.0, 150.0).unwrap()
    }

    /// Cofactor expansion along the first row; independent of the linear
    /// algebra backend.
    fn det3_cofactor(m: &Matrix3<f64>) -> f64 {
        m[(0, 0)] * (m[(1, 1)] * m[(2, 2)] - m[(1, 2)] * m[(2, 1)])
            - m[(0, 1)] * (m[(1, 0)] * m[(2, 2)] - m[(1, 2)] * m[(2, 0)])
            + m[(0, 2)] * (m[(1, 0)] * m[(2, 1)] - m[(1, 1)] * m[(2, 0)])
    }

    #[test]
    fn one_point_design_gives_rank_one_matrix() {
        let d = Design::new(vec![1.0], vec![1.0]).unwrap();
        let m = fisher_matrix(&d, &theta(), &Emax).unwrap();
        let g = crate::model::emax_gradient(1.0, &theta()).unwrap();
        let expect = g * g.transpose();
        assert!((m.entries() - expect).abs().max() < 1e-15);
        assert!(m.determinant().abs() < 1e-12);
    }

    #[test]
    fn three_point_design_information_is_nonsingular() {
        let w = 1.0 / 3.0;
        let d = Design::new(vec![0.0, 18.75, 150.0], vec![w, w, w]).unwrap();
        let m = fisher_matrix(&d, &theta(), &Emax).unwrap();
        let det = m.determinant();
        assert!(det > 0.0);
        let oracle = det3_cofactor(m.entries());
        assert!(
            (det - oracle).abs() <= 1e-12 * oracle.abs().max(1e-300),
            "det {det:e} vs cofactor {oracle:e}"
        );
    }

    #[test]
    fn fisher_matrix_is_invariant_to_point_order() {
        let w = [0.2, 0.5, 0.3];
        let d1 = Design::new(vec![0.0, 18.75, 150.0], vec![w[0], w[1], w[2]]).unwrap();
        let d2 = Design::new(vec![150.0, 0.0, 18.75], vec![w[2], w[0], w[1]]).unwrap();
        assert_eq!(d1, d2);
        let m1 = fisher_matrix(&d1, &theta(), &Emax).unwrap();
        let m2 = fisher_matrix(&d2, &theta(), &Emax).unwrap();
        assert_eq!(m1.entries(), m2.entries());
    }

    #[test]
    fn fisher_matrix_is_psd_on_assorted_designs() {
        for pts in [vec![0.0, 5.0], vec![1.0, 40.0, 150.0], vec![0.0, 1.0, 2.0, 3.0]] {
            let w = 1.0 / pts.len() as f64;
            let d = Design::new(pts.clone(), vec![w; pts.len()]).unwrap();
            let m = fisher_matrix(&d, &theta(), &Emax).unwrap();
            assert!(m.min_eigenvalue() >= -1e-10 * m.trace());
        }
    }

    #[test]
    fn d_optimal_interior_point_examples() {
        let iv = interval();
        let x = d_optimal_interior_point(25.0, &iv).unwrap();
        assert!((x - 18.75).abs() < 1e-12);

        // With a = 0 the formula reduces to b*theta2 / (b + 2*theta2).
        let x_small = d_optimal_interior_point(0.015, &iv).unwrap();
        let reduced = 150.0 * 0.015 / (150.0 + 2.0 * 0.015);
        assert!((x_small - reduced).abs() < 1e-9);
        assert!((x_small - 0.015).abs() < 1e-4);

        let x_large = d_optimal_interior_point(1e6, &iv).unwrap();
        assert!((x_large - 75.0).abs() < 0.01);
    }

    #[test]
    fn d_optimal_design_has_equal_weights_and_interior_point() {
        let d = d_optimal_emax(25.0, &interval()).unwrap();
        assert_eq!(d.points(), &[0.0, 18.75, 150.0]);
        for &w in d.weights() {
            assert_eq!(w, 1.0 / 3.0);
        }
    }

    #[test]
    fn d_optimal_rejects_nonpositive_theta2() {
        assert!(d_optimal_emax(0.0, &interval()).is_err());
        assert!(d_optimal_emax(-1.0, &interval()).is_err());
    }

    #[test]
    fn interior_point_stays_strictly_inside_over_the_box() {
        let iv = interval();
        let mut t = 0.015;
        while t <= 1500.0 {
            let x = d_optimal_interior_point(t, &iv).unwrap();
            assert!(iv.a < x && x < iv.b, "t={t} x={x}");
            t *= 1.3;
        }
    }

    #[test]
    fn interior_point_is_increasing_and_concave_in_theta2() {
        let iv = interval();
        // Uniform grid: concavity is in theta2 itself.
        let grid: Vec<f64> = (0..=600).map(|k| 0.015 + k as f64 * 2.5).collect();
        let xs: Vec<f64> = grid
            .iter()
            .map(|&t| d_optimal_interior_point(t, &iv).unwrap())
            .collect();
        let d1: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
        assert!(d1.iter().all(|&d| d > 0.0));
        assert!(d1.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn brute_force_agrees_with_closed_form() {
        let iv = interval();
        let th = theta();
        let found = brute_force_d_optimal(&th, &iv, 2000, &Emax).unwrap();
        assert!((found.points()[1] - 18.75).abs() <= 150.0 / 2000.0);
        for &w in found.weights() {
            assert!((w - 1.0 / 3.0).abs() < 1e-3, "weights {:?}", found.weights());
        }
        let sum: f64 = found.weights().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn brute_force_tracks_interior_point_at_other_theta2() {
        let iv = interval();
        let th = ModelParams::new(2.0, 0.467, 50.0).unwrap();
        let found = brute_force_d_optimal(&th, &iv, 800, &Emax).unwrap();
        let expect = d_optimal_interior_point(50.0, &iv).unwrap();
        assert!((found.points()[1] - expect).abs() <= 150.0 / 800.0);
    }

    #[test]
    fn brute_force_reports_singular_information() {
        // Zero maximum effect leaves the theta2 direction uninformative.
        let th = ModelParams::new(2.0, 0.0, 25.0).unwrap();
        match brute_force_d_optimal(&th, &interval(), 100, &Emax) {
            Err(Error::Singular(_)) => {}
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    fn closed_form_is_optimal_against_enumeration() {
        let iv = interval();
        for t2 in [0.015, 1.0, 25.0, 1500.0] {
            let th = ModelParams::new(2.0, 0.467, t2).unwrap();
            let gap = d_optimality_gap(&th, &iv, 400, &Emax).unwrap();
            assert!(gap <= 1e-4, "theta2={t2} gap={gap}");
        }
    }

    #[test]
    fn apportion_examples() {
        let w = 1.0 / 3.0;
        let d = Design::new(vec![0.0, 18.75, 150.0], vec![w, w, w]).unwrap();
        assert_eq!(apportion(&d, 10).counts(), &[4, 3, 3]);
        assert_eq!(apportion(&d, 27).counts(), &[9, 9, 9]);

        let d2 = Design::new(vec![0.0, 18.75, 150.0], vec![0.5, 0.3, 0.2]).unwrap();
        assert_eq!(apportion(&d2, 10).counts(), &[5, 3, 2]);
    }

    #[test]
    fn apportion_counts_stay_within_one_of_targets() {
        let d = Design::new(vec![0.0, 7.0, 80.0, 150.0], vec![0.41, 0.13, 0.4, 0.06]).unwrap();
        for n in [1usize, 9, 10, 97, 1000] {
            let e = apportion(&d, n);
            assert_eq!(e.total(), n);
            for (&c, &w) in e.counts().iter().zip(d.weights()) {
                assert!((c as f64 - n as f64 * w).abs() < 1.0, "n={n} c={c} w={w}");
            }
        }
    }

    #[test]
    fn design_rejects_bad_inputs() {
        assert!(Design::new(vec![], vec![]).is_err());
        assert!(Design::new(vec![1.0, 1.0], vec![0.5, 0.5]).is_err());
        assert!(Design::new(vec![1.0, 2.0], vec![0.7, 0.7]).is_err());
        assert!(Design::new(vec![1.0, 2.0], vec![-0.1, 1.1]).is_err());
        let iv = interval();
        assert!(Design::new_in(vec![0.0, 200.0], vec![0.5, 0.5], &iv).is_err());
    }

    #[test]
    fn design_file_round_trip() {
        let d = d_optimal_emax(25.0, &interval()).unwrap();
        let text = render_design(&d);
        match parse_design(&text).unwrap() {
            DesignFile::Approximate(back) => assert_eq!(back, d),
            _ => panic!("expected approximate design"),
        }

        let e = apportion(&d, 27);
        let text = format!("# provenance comment\n{}", render_exact_design(&e));
        match parse_design(&text).unwrap() {
            DesignFile::Exact(back) => assert_eq!(back, e),
            _ => panic!("expected exact design"),
        }
    }

    #[test]
    fn design_file_parse_errors() {
        assert!(parse_design("1.0,0.5\n").is_err());
        assert!(parse_design("#design approximate\n1.0;0.5\n").is_err());
        assert!(parse_design("#design exact n=5\n1.0,2\n2.0,2\n").is_err());
        assert!(parse_design("#design wedge\n").is_err());
    }
}
