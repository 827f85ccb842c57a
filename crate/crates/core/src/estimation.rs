//! Data generation and maximum-likelihood estimation.
//!
//! Observations at each design point are i.i.d. Gaussian around the model
//! mean, so the likelihood depends on the data only through per-point sample
//! means and counts. The sigma-free kernel
//!
//! ```text
//! K(theta) = sum_i sum_m n_im * (ybar_im - eta(x_im, theta))^2
//! ```
//!
//! is minimized by the MLE regardless of the error variance.
//!
//! For the Emax mean the model is linear in `(theta0, theta1)` once `theta2`
//! is fixed, with regressor `(1, x/(x+theta2))`. [`fit_mle`] exploits this:
//! the linear subproblem is solved exactly from the weighted normal
//! equations and the profiled residual sum of squares is minimized over
//! `theta2` by a log-uniform grid sweep refined with golden-section search.
//! The grid-then-refine schedule guards against multimodal profiles and
//! needs no starting value, which matters when the fit runs inside
//! ten-thousand-replicate Monte Carlo loops.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::design::ExactDesign;
use crate::error::{Error, Result};
use crate::model::{DoseInterval, DoseResponseModel, ModelParams, Theta2Bounds};
use crate::numfmt;

/// Number of log-spaced grid points in the profile sweep.
const PROFILE_GRID: usize = 200;
/// Relative golden-section bracket tolerance.
const PROFILE_TOL: f64 = 1e-8;
/// Relative window within which an estimate counts as sitting on the box edge.
const BOUNDARY_TOL: f64 = 1e-6;

/// Observations of one stage, grouped by design point.
#[derive(Debug, Clone, PartialEq)]
pub struct StageData {
    design: ExactDesign,
    means: Vec<f64>,
    raw: Option<Vec<Vec<f64>>>,
}

impl StageData {
    pub fn new(design: ExactDesign, means: Vec<f64>, raw: Option<Vec<Vec<f64>>>) -> Result<Self> {
        if means.len() != design.len() {
            return Err(Error::invalid("one sample mean per design point required"));
        }
        if let Some(raw) = &raw {
            if raw.len() != design.len() {
                return Err(Error::invalid("one raw group per design point required"));
            }
            for ((ys, &n), &m) in raw.iter().zip(design.counts()).zip(&means) {
                if ys.len() != n {
                    return Err(Error::invalid(format!(
                        "raw group has {} observations, design count is {n}",
                        ys.len()
                    )));
                }
                if n > 0 {
                    let mean = ys.iter().sum::<f64>() / n as f64;
                    if (mean - m).abs() > 1e-12 * (1.0 + m.abs()) {
                        return Err(Error::invalid(format!(
                            "stored mean {m} disagrees with raw mean {mean}"
                        )));
                    }
                }
            }
        }
        Ok(Self { design, means, raw })
    }

    pub fn design(&self) -> &ExactDesign {
        &self.design
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn raw(&self) -> Option<&Vec<Vec<f64>>> {
        self.raw.as_ref()
    }

    /// Pooled (dose, count, mean) triples, skipping empty design points.
    pub fn pooled(&self) -> Vec<PooledPoint> {
        self.design
            .points()
            .iter()
            .zip(self.design.counts())
            .zip(&self.means)
            .filter(|((_, &n), _)| n > 0)
            .map(|((&x, &n), &m)| PooledPoint {
                dose: x,
                count: n,
                mean: m,
            })
            .collect()
    }
}

/// Both stages of a two-stage experiment plus the (known) error standard
/// deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoStageData {
    pub stage1: StageData,
    pub stage2: StageData,
    pub sigma: f64,
}

impl TwoStageData {
    pub fn new(stage1: StageData, stage2: StageData, sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
        }
        if stage1.design.total() == 0 || stage2.design.total() == 0 {
            return Err(Error::invalid("both stages must contain observations"));
        }
        Ok(Self {
            stage1,
            stage2,
            sigma,
        })
    }

    pub fn pooled(&self) -> Vec<PooledPoint> {
        let mut pts = self.stage1.pooled();
        pts.extend(self.stage2.pooled());
        pts
    }
}

/// One pooled observation group: `count` responses averaging `mean` at `dose`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PooledPoint {
    pub dose: f64,
    pub count: usize,
    pub mean: f64,
}

/// Result of a maximum-likelihood fit.
#[derive(Debug, Clone, PartialEq)]
pub struct MleResult {
    pub theta_hat: ModelParams,
    /// Kernel value at the optimum: weighted residual sum of squares of the
    /// per-point means.
    pub rss: f64,
    /// False when the profile optimum sits on the `theta2` box edge.
    pub converged: bool,
    pub boundary: bool,
    pub profile_trace: Option<Vec<(f64, f64)>>,
}

/// Draws `count` observations per design point and records raw values and
/// per-point means. Deterministic for a given random stream.
pub fn simulate_stage(
    design: &ExactDesign,
    theta: &ModelParams,
    sigma: f64,
    rng: &mut impl Rng,
    model: &impl DoseResponseModel,
) -> Result<StageData> {
    simulate_impl(design, theta, sigma, rng, model, true)
}

/// As [`simulate_stage`] but stores only the sufficient statistics (per-point
/// means). The random stream is consumed identically, so means match the raw
/// variant draw for draw.
pub fn simulate_stage_means(
    design: &ExactDesign,
    theta: &ModelParams,
    sigma: f64,
    rng: &mut impl Rng,
    model: &impl DoseResponseModel,
) -> Result<StageData> {
    simulate_impl(design, theta, sigma, rng, model, false)
}

fn simulate_impl(
    design: &ExactDesign,
    theta: &ModelParams,
    sigma: f64,
    rng: &mut impl Rng,
    model: &impl DoseResponseModel,
    keep_raw: bool,
) -> Result<StageData> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    let mut means = Vec::with_capacity(design.len());
    let mut raw = keep_raw.then(|| Vec::with_capacity(design.len()));
    for (&x, &n) in design.points().iter().zip(design.counts()) {
        let eta = model.mean(x, theta)?;
        if n == 0 {
            means.push(0.0);
            if let Some(raw) = raw.as_mut() {
                raw.push(Vec::new());
            }
            continue;
        }
        let mut sum = 0.0;
        let mut group = keep_raw.then(|| Vec::with_capacity(n));
        for _ in 0..n {
            let z: f64 = rng.sample(StandardNormal);
            let y = eta + sigma * z;
            sum += y;
            if let Some(g) = group.as_mut() {
                g.push(y);
            }
        }
        means.push(sum / n as f64);
        if let (Some(raw), Some(g)) = (raw.as_mut(), group) {
            raw.push(g);
        }
    }
    StageData::new(design.clone(), means, raw)
}

/// Sigma-free likelihood kernel over pooled points.
pub fn kernel_points(
    points: &[PooledPoint],
    theta: &ModelParams,
    model: &impl DoseResponseModel,
) -> Result<f64> {
    let mut acc = 0.0;
    for p in points {
        let r = p.mean - model.mean(p.dose, theta)?;
        acc += p.count as f64 * r * r;
    }
    Ok(acc)
}

/// `sum_i sum_m n_im (ybar_im - eta(x_im, theta))^2`; minimizing this kernel
/// maximizes the two-stage likelihood for any sigma.
pub fn neg_log_likelihood_kernel(
    data: &TwoStageData,
    theta: &ModelParams,
    model: &impl DoseResponseModel,
) -> Result<f64> {
    kernel_points(&data.pooled(), theta, model)
}

/// Total score vector `(1/sigma^2) sum_i sum_m n_im (ybar_im - eta) grad_eta`,
/// equal to `-1/(2 sigma^2)` times the kernel gradient.
pub fn score(
    data: &TwoStageData,
    theta: &ModelParams,
    model: &impl DoseResponseModel,
) -> Result<Vector3<f64>> {
    let mut s = Vector3::zeros();
    for p in data.pooled() {
        let r = p.mean - model.mean(p.dose, theta)?;
        s += model.gradient(p.dose, theta)? * (p.count as f64 * r);
    }
    Ok(s / (data.sigma * data.sigma))
}

struct ProfilePoint {
    theta0: f64,
    theta1: f64,
    rss: f64,
}

/// Exact weighted least squares in `(theta0, theta1)` for fixed `theta2`.
/// Returns `None` when the two regressors are numerically collinear.
fn profile_at(points: &[PooledPoint], theta2: f64) -> Option<ProfilePoint> {
    let mut sw = 0.0;
    let mut sg = 0.0;
    let mut sgg = 0.0;
    let mut sy = 0.0;
    let mut sgy = 0.0;
    for p in points {
        let w = p.count as f64;
        let g = p.dose / (p.dose + theta2);
        sw += w;
        sg += w * g;
        sgg += w * g * g;
        sy += w * p.mean;
        sgy += w * g * p.mean;
    }
    let det = sw * sgg - sg * sg;
    if !(det > 1e-13 * sw * sgg.max(f64::MIN_POSITIVE)) {
        return None;
    }
    let theta1 = (sw * sgy - sg * sy) / det;
    let theta0 = (sy - theta1 * sg) / sw;
    let mut rss = 0.0;
    for p in points {
        let g = p.dose / (p.dose + theta2);
        let r = p.mean - theta0 - theta1 * g;
        rss += p.count as f64 * r * r;
    }
    Some(ProfilePoint {
        theta0,
        theta1,
        rss,
    })
}

/// Profiled least-squares MLE over the `theta2` box.
///
/// Needs at least three distinct doses with observations; otherwise the
/// three-parameter model is unidentifiable and the fit reports degenerate
/// data. With `trace` set, the grid sweep is recorded as
/// `(theta2, profiled RSS)` pairs.
pub fn fit_mle(points: &[PooledPoint], bounds: &Theta2Bounds, trace: bool) -> Result<MleResult> {
    let mut doses: Vec<f64> = points.iter().filter(|p| p.count > 0).map(|p| p.dose).collect();
    doses.sort_by(f64::total_cmp);
    doses.dedup();
    if doses.len() < 3 {
        return Err(Error::degenerate(format!(
            "maximum-likelihood fit needs at least 3 distinct doses, got {}",
            doses.len()
        )));
    }

    let log_lo = bounds.min.ln();
    let log_hi = bounds.max.ln();
    let grid: Vec<f64> = (0..PROFILE_GRID)
        .map(|k| {
            if k == 0 {
                bounds.min
            } else if k == PROFILE_GRID - 1 {
                bounds.max
            } else {
                (log_lo + (log_hi - log_lo) * k as f64 / (PROFILE_GRID - 1) as f64).exp()
            }
        })
        .collect();

    let mut trace_out = trace.then(Vec::new);
    let mut best: Option<(f64, f64)> = None; // (theta2, rss), lowest index wins ties
    let mut best_idx = 0usize;
    for (k, &t) in grid.iter().enumerate() {
        let Some(p) = profile_at(points, t) else {
            continue;
        };
        if let Some(tr) = trace_out.as_mut() {
            tr.push((t, p.rss));
        }
        if best.map_or(true, |(_, r)| p.rss < r) {
            best = Some((t, p.rss));
            best_idx = k;
        }
    }
    let (mut best_t, mut best_rss) =
        best.ok_or_else(|| Error::degenerate("profiled subproblem singular everywhere".to_string()))?;

    // Golden-section refinement on the bracket around the best grid point.
    let mut lo = grid[best_idx.saturating_sub(1)];
    let mut hi = grid[(best_idx + 1).min(PROFILE_GRID - 1)];
    let inv_phi = 0.5 * (5.0_f64.sqrt() - 1.0);
    let eval = |t: f64| profile_at(points, t).map_or(f64::INFINITY, |p| p.rss);
    let mut c = hi - inv_phi * (hi - lo);
    let mut d = lo + inv_phi * (hi - lo);
    let mut fc = eval(c);
    let mut fd = eval(d);
    for _ in 0..200 {
        if hi - lo < PROFILE_TOL * (1.0 + 0.5 * (lo + hi)) {
            break;
        }
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - inv_phi * (hi - lo);
            fc = eval(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + inv_phi * (hi - lo);
            fd = eval(d);
        }
        let (t, r) = if fc < fd { (c, fc) } else { (d, fd) };
        if r < best_rss {
            best_rss = r;
            best_t = t;
        }
    }

    let best_t = bounds.clamp(best_t);
    let prof = profile_at(points, best_t)
        .ok_or_else(|| Error::degenerate("profiled subproblem singular at optimum".to_string()))?;
    let boundary = best_t - bounds.min <= BOUNDARY_TOL * (1.0 + bounds.min)
        || bounds.max - best_t <= BOUNDARY_TOL * (1.0 + bounds.max);
    Ok(MleResult {
        theta_hat: ModelParams::with_bounds(prof.theta0, prof.theta1, best_t, bounds)?,
        rss: prof.rss,
        converged: !boundary,
        boundary,
        profile_trace: trace_out,
    })
}

/// Pooled residual variance about the fitted means, for diagnostics. Uses raw
/// observations and `total - 3` degrees of freedom.
pub fn residual_variance(
    stages: &[&StageData],
    theta: &ModelParams,
    model: &impl DoseResponseModel,
) -> Result<Option<f64>> {
    let mut ss = 0.0;
    let mut n = 0usize;
    for stage in stages {
        let Some(raw) = stage.raw() else {
            return Ok(None);
        };
        for (&x, group) in stage.design().points().iter().zip(raw) {
            let eta = model.mean(x, theta)?;
            for &y in group {
                ss += (y - eta) * (y - eta);
                n += 1;
            }
        }
    }
    if n <= 3 {
        return Ok(None);
    }
    Ok(Some(ss / (n - 3) as f64))
}

/// Leading coefficient `b2(theta)` of the `O(1/n1)` bias of the first-stage
/// estimate of `theta2` under the equal-allocation three-point D-optimal
/// design built at guess `theta2_guess`.
pub fn stage1_bias_coefficient(
    theta: &ModelParams,
    theta2_guess: f64,
    interval: &DoseInterval,
    sigma: f64,
) -> Result<f64> {
    let (a, b) = (interval.a, interval.b);
    if theta.theta1 == 0.0 {
        return Err(Error::invalid("bias undefined for zero maximum effect"));
    }
    if theta.theta2 == 0.0 {
        return Err(Error::invalid("bias undefined for zero half-effect dose"));
    }
    if !(theta2_guess.is_finite() && theta2_guess > 0.0) {
        return Err(Error::invalid(format!(
            "theta2 guess must be positive, got {theta2_guess}"
        )));
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    let t = theta.theta2;
    let t0 = theta2_guess;
    let denom = (a - b).powi(4)
        * theta.theta1.powi(2)
        * t.powi(2)
        * (a + t0).powi(2)
        * (b + t0).powi(2);
    let c1 = 3.0 * sigma * sigma * (a + t).powi(2) * (b + t).powi(2);
    let c2 = (2.0 * a * b + (a + b) * t0 + t * (a + b + 2.0 * t0)).powi(2);
    let c3 = 3.0 * a * b * (a + b)
        + (a * a + 10.0 * a * b + b * b) * t0
        + 3.0 * (a + b) * t0 * t0
        + 2.0 * t * (a * a + a * b + b * b + 3.0 * (a + b) * t0 + 3.0 * t0 * t0);
    Ok(c1 * c2 * c3 / denom)
}

/// First-order bias `b2(theta) / n1` of the first-stage estimate of `theta2`.
/// `n1` must be divisible by three (equal allocation over the three support
/// points).
pub fn stage1_bias_theta2(
    theta: &ModelParams,
    theta2_guess: f64,
    interval: &DoseInterval,
    sigma: f64,
    n1: usize,
) -> Result<f64> {
    if n1 == 0 || n1 % 3 != 0 {
        return Err(Error::invalid(format!(
            "n1 must be a positive multiple of 3, got {n1}"
        )));
    }
    Ok(stage1_bias_coefficient(theta, theta2_guess, interval, sigma)? / n1 as f64)
}

/// One observation row of the dataset CSV (`stage,dose,replicate,y`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataRow {
    pub stage: usize,
    pub dose: f64,
    pub replicate: usize,
    pub y: f64,
}

pub const DATASET_HEADER: &str = "stage,dose,replicate,y";

/// Renders dataset rows with the mandatory header.
pub fn render_dataset_csv(rows: &[DataRow]) -> String {
    let mut out = String::from(DATASET_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.stage,
            numfmt::machine(r.dose),
            r.replicate,
            numfmt::machine(r.y)
        ));
    }
    out
}

/// Parses the dataset CSV; comment lines (`#`) before the header are allowed,
/// the header itself is required.
pub fn parse_dataset_csv(text: &str) -> Result<Vec<DataRow>> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
    match lines.next() {
        Some((_, h)) if h.trim() == DATASET_HEADER => {}
        Some((i, h)) => {
            return Err(Error::parse(format!(
                "line {}: expected header '{DATASET_HEADER}', got '{h}'",
                i + 1
            )))
        }
        None => return Err(Error::parse("empty dataset".to_string())),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::parse(format!("line {}: expected 4 fields", i + 1)));
        }
        let stage: usize = fields[0]
            .parse()
            .map_err(|_| Error::parse(format!("line {}: bad stage '{}'", i + 1, fields[0])))?;
        if !(1..=2).contains(&stage) {
            return Err(Error::parse(format!("line {}: stage must be 1 or 2", i + 1)));
        }
        let dose: f64 = fields[1]
            .parse()
            .map_err(|_| Error::parse(format!("line {}: bad dose '{}'", i + 1, fields[1])))?;
        let replicate: usize = fields[2]
            .parse()
            .map_err(|_| Error::parse(format!("line {}: bad replicate '{}'", i + 1, fields[2])))?;
        let y: f64 = fields[3]
            .parse()
            .map_err(|_| Error::parse(format!("line {}: bad response '{}'", i + 1, fields[3])))?;
        if !dose.is_finite() || dose < 0.0 || !y.is_finite() {
            return Err(Error::parse(format!("line {}: non-finite or negative dose", i + 1)));
        }
        rows.push(DataRow {
            stage,
            dose,
            replicate,
            y,
        });
    }
    if rows.is_empty() {
        return Err(Error::parse("dataset contains no observations".to_string()));
    }
    Ok(rows)
}

/// Groups parsed rows into per-stage data (stage 1 first; stage 2 optional).
pub fn group_rows(rows: &[DataRow]) -> Result<(StageData, Option<StageData>)> {
    let stage1 = stage_from_rows(rows.iter().filter(|r| r.stage == 1))?;
    let has2 = rows.iter().any(|r| r.stage == 2);
    let stage2 = if has2 {
        Some(stage_from_rows(rows.iter().filter(|r| r.stage == 2))?)
    } else {
        None
    };
    let stage1 =
        stage1.ok_or_else(|| Error::parse("dataset has no stage-1 observations".to_string()))?;
    Ok((stage1, stage2.flatten()))
}

fn stage_from_rows<'a>(rows: impl Iterator<Item = &'a DataRow>) -> Result<Option<StageData>> {
    let mut by_dose: Vec<(f64, Vec<f64>)> = Vec::new();
    for r in rows {
        match by_dose.iter_mut().find(|(d, _)| *d == r.dose) {
            Some((_, ys)) => ys.push(r.y),
            None => by_dose.push((r.dose, vec![r.y])),
        }
    }
    if by_dose.is_empty() {
        return Ok(None);
    }
    by_dose.sort_by(|a, b| a.0.total_cmp(&b.0));
    let points: Vec<f64> = by_dose.iter().map(|(d, _)| *d).collect();
    let counts: Vec<usize> = by_dose.iter().map(|(_, ys)| ys.len()).collect();
    let means: Vec<f64> = by_dose
        .iter()
        .map(|(_, ys)| ys.iter().sum::<f64>() / ys.len() as f64)
        .collect();
    let raw: Vec<Vec<f64>> = by_dose.into_iter().map(|(_, ys)| ys).collect();
    Ok(Some(StageData::new(
        ExactDesign::new(points, counts)?,
        means,
        Some(raw),
    )?))
}

/// Flattens a stage back into CSV rows.
pub fn stage_to_rows(stage: &StageData, stage_no: usize) -> Result<Vec<DataRow>> {
    let raw = stage
        .raw()
        .ok_or_else(|| Error::invalid("stage holds no raw observations".to_string()))?;
    let mut rows = Vec::new();
    for (&dose, group) in stage.design().points().iter().zip(raw) {
        for (j, &y) in group.iter().enumerate() {
            rows.push(DataRow {
                stage: stage_no,
                dose,
                replicate: j + 1,
                y,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{apportion, d_optimal_emax};
    use crate::model::{Emax, DEFAULT_THETA2_BOUNDS};
    use crate::rng::derive_rng;

    fn theta() -> ModelParams {
        ModelParams::new(2.0, 0.467, 25.0).unwrap()
    }

    fn interval() -> DoseInterval {
        DoseInterval::new(0.0, 150.0).unwrap()
    }

    fn design27() -> ExactDesign {
        apportion(&d_optimal_emax(25.0, &interval()).unwrap(), 27)
    }

    fn noiseless_two_stage(n1: usize, n2: usize) -> TwoStageData {
        let d1 = apportion(&d_optimal_emax(25.0, &interval()).unwrap(), n1);
        let d2 = apportion(&d_optimal_emax(25.0, &interval()).unwrap(), n2);
        let mut rng = derive_rng(7, &[1]);
        let s1 = simulate_stage(&d1, &theta(), 1e-12, &mut rng, &Emax).unwrap();
        let s2 = simulate_stage(&d2, &theta(), 1e-12, &mut rng, &Emax).unwrap();
        TwoStageData::new(s1, s2, 1e-12).unwrap()
    }

    #[test]
    fn degenerate_noise_reproduces_means() {
        let d = design27();
        let mut rng = derive_rng(1, &[2]);
        let s = simulate_stage(&d, &theta(), 1e-12, &mut rng, &Emax).unwrap();
        for (&x, &m) in d.points().iter().zip(s.means()) {
            let eta = crate::model::emax_mean(x, &theta()).unwrap();
            assert!((m - eta).abs() < 1e-9, "x={x}");
        }
    }

    #[test]
    fn same_seed_reproduces_stage() {
        let d = design27();
        let a = simulate_stage(&d, &theta(), 0.3, &mut derive_rng(5, &[9]), &Emax).unwrap();
        let b = simulate_stage(&d, &theta(), 0.3, &mut derive_rng(5, &[9]), &Emax).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn means_only_variant_matches_raw_variant() {
        let d = design27();
        let a = simulate_stage(&d, &theta(), 0.25, &mut derive_rng(11, &[3]), &Emax).unwrap();
        let b = simulate_stage_means(&d, &theta(), 0.25, &mut derive_rng(11, &[3]), &Emax).unwrap();
        assert_eq!(a.means(), b.means());
        assert!(b.raw().is_none());
    }

    #[test]
    fn large_sample_matches_clt_bounds() {
        let d = ExactDesign::new(vec![18.75], vec![100_000]).unwrap();
        let sigma = 0.5;
        let mut rng = derive_rng(2024, &[1]);
        let s = simulate_stage(&d, &theta(), sigma, &mut rng, &Emax).unwrap();
        let eta = crate::model::emax_mean(18.75, &theta()).unwrap();
        let n = 100_000f64;
        assert!((s.means()[0] - eta).abs() < 4.0 * sigma / n.sqrt());
        let raw = &s.raw().unwrap()[0];
        let var = raw.iter().map(|y| (y - s.means()[0]).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var - sigma * sigma).abs() < 0.1 * sigma * sigma);
    }

    #[test]
    fn kernel_is_zero_on_noiseless_truth() {
        let data = noiseless_two_stage(27, 27);
        let k = neg_log_likelihood_kernel(&data, &theta(), &Emax).unwrap();
        assert!(k < 1e-18, "kernel {k}");
    }

    #[test]
    fn kernel_is_location_equivariant_in_theta0() {
        let mut data = noiseless_two_stage(27, 27);
        let k0 = neg_log_likelihood_kernel(&data, &theta(), &Emax).unwrap();
        let c = 3.7;
        for stage in [&mut data.stage1, &mut data.stage2] {
            let shifted: Vec<f64> = stage.means().iter().map(|m| m + c).collect();
            *stage = StageData::new(stage.design().clone(), shifted, None).unwrap();
        }
        let shifted_theta = ModelParams::new(2.0 + c, 0.467, 25.0).unwrap();
        let k1 = neg_log_likelihood_kernel(&data, &shifted_theta, &Emax).unwrap();
        assert!((k0 - k1).abs() < 1e-12);
    }

    #[test]
    fn kernel_matches_hand_expansion() {
        let s1 = StageData::new(
            ExactDesign::new(vec![0.0], vec![2]).unwrap(),
            vec![2.1],
            None,
        )
        .unwrap();
        let s2 = StageData::new(
            ExactDesign::new(vec![25.0], vec![3]).unwrap(),
            vec![2.4],
            None,
        )
        .unwrap();
        let data = TwoStageData::new(s1, s2, 0.5).unwrap();
        let k = neg_log_likelihood_kernel(&data, &theta(), &Emax).unwrap();
        let hand = 2.0 * (2.1f64 - 2.0).powi(2) + 3.0 * (2.4f64 - 2.2335).powi(2);
        assert!((k - hand).abs() < 1e-15);
    }

    #[test]
    fn score_vanishes_on_noiseless_truth() {
        let d1 = design27();
        let means: Vec<f64> = d1
            .points()
            .iter()
            .map(|&x| crate::model::emax_mean(x, &theta()).unwrap())
            .collect();
        let s1 = StageData::new(d1.clone(), means.clone(), None).unwrap();
        let s2 = StageData::new(d1, means, None).unwrap();
        let data = TwoStageData::new(s1, s2, 0.25).unwrap();
        assert_eq!(score(&data, &theta(), &Emax).unwrap(), Vector3::zeros());
    }

    #[test]
    fn score_matches_kernel_finite_differences() {
        let d = design27();
        let mut rng = derive_rng(77, &[4]);
        let s1 = simulate_stage(&d, &theta(), 0.25, &mut rng, &Emax).unwrap();
        let s2 = simulate_stage(&d, &theta(), 0.25, &mut rng, &Emax).unwrap();
        let data = TwoStageData::new(s1, s2, 0.25).unwrap();
        let at = ModelParams::new(2.1, 0.45, 30.0).unwrap();
        let s = score(&data, &at, &Emax).unwrap();
        let v = at.as_vector();
        for j in 0..3 {
            let h = 1e-6 * (1.0 + v[j].abs());
            let mut up = v;
            let mut dn = v;
            up[j] += h;
            dn[j] -= h;
            let f = |p: Vector3<f64>| {
                let th = ModelParams::new(p[0], p[1], p[2]).unwrap();
                neg_log_likelihood_kernel(&data, &th, &Emax).unwrap()
            };
            let fd = -(f(up) - f(dn)) / (2.0 * h) / (2.0 * 0.25 * 0.25);
            let rel = (fd - s[j]).abs() / (1.0 + s[j].abs());
            assert!(rel < 1e-5, "j={j} fd={fd} score={}", s[j]);
        }
    }

    #[test]
    fn score_is_stationary_at_the_fit() {
        let d = design27();
        let mut rng = derive_rng(3, &[8]);
        let s1 = simulate_stage(&d, &theta(), 0.1, &mut rng, &Emax).unwrap();
        let s2 = simulate_stage(&d, &theta(), 0.1, &mut rng, &Emax).unwrap();
        let data = TwoStageData::new(s1, s2, 0.1).unwrap();
        let fit = fit_mle(&data.pooled(), &DEFAULT_THETA2_BOUNDS, false).unwrap();
        assert!(fit.converged);
        let s = score(&data, &fit.theta_hat, &Emax).unwrap();
        for j in 0..3 {
            assert!(s[j].abs() < 1e-6 * (1.0 + fit.rss), "j={j} s={}", s[j]);
        }
    }

    #[test]
    fn noiseless_fit_recovers_truth() {
        let data = noiseless_two_stage(9, 9);
        let fit = fit_mle(&data.pooled(), &DEFAULT_THETA2_BOUNDS, false).unwrap();
        assert!((fit.theta_hat.theta0 - 2.0).abs() < 1e-6);
        assert!((fit.theta_hat.theta1 - 0.467).abs() < 1e-6);
        assert!((fit.theta_hat.theta2 - 25.0).abs() < 1e-6);
        assert!(fit.converged && !fit.boundary);
    }

    #[test]
    fn fit_rss_beats_every_grid_point() {
        let d = design27();
        let mut rng = derive_rng(41, &[6]);
        let s1 = simulate_stage(&d, &theta(), 0.5, &mut rng, &Emax).unwrap();
        let s2 = simulate_stage(&d, &theta(), 0.5, &mut rng, &Emax).unwrap();
        let data = TwoStageData::new(s1, s2, 0.5).unwrap();
        let fit = fit_mle(&data.pooled(), &DEFAULT_THETA2_BOUNDS, true).unwrap();
        for &(_, rss) in fit.profile_trace.as_ref().unwrap() {
            assert!(fit.rss <= rss + 1e-12 * (1.0 + rss));
        }
    }

    #[test]
    fn fit_is_invariant_to_point_order() {
        let d = design27();
        let mut rng = derive_rng(13, &[5]);
        let s1 = simulate_stage(&d, &theta(), 0.3, &mut rng, &Emax).unwrap();
        let s2 = simulate_stage(&d, &theta(), 0.3, &mut rng, &Emax).unwrap();
        let data = TwoStageData::new(s1, s2, 0.3).unwrap();
        let mut pts = data.pooled();
        let fit_a = fit_mle(&pts, &DEFAULT_THETA2_BOUNDS, false).unwrap();
        pts.reverse();
        pts.swap(0, 2);
        let fit_b = fit_mle(&pts, &DEFAULT_THETA2_BOUNDS, false).unwrap();
        assert!((fit_a.theta_hat.theta2 - fit_b.theta_hat.theta2).abs() < 1e-9);
        assert!((fit_a.rss - fit_b.rss).abs() < 1e-9 * (1.0 + fit_a.rss));
    }

    #[test]
    fn fit_rejects_rank_deficient_data() {
        let pts = [
            PooledPoint {
                dose: 10.0,
                count: 5,
                mean: 2.2,
            },
            PooledPoint {
                dose: 20.0,
                count: 5,
                mean: 2.3,
            },
        ];
        match fit_mle(&pts, &DEFAULT_THETA2_BOUNDS, false) {
            Err(Error::Degenerate(_)) => {}
            other => panic!("expected degenerate error, got {other:?}"),
        }
    }

    #[test]
    fn fit_residuals_are_orthogonal_to_regressors() {
        let d = design27();
        let mut rng = derive_rng(23, &[1]);
        let s1 = simulate_stage(&d, &theta(), 0.4, &mut rng, &Emax).unwrap();
        let s2 = simulate_stage(&d, &theta(), 0.4, &mut rng, &Emax).unwrap();
        let data = TwoStageData::new(s1, s2, 0.4).unwrap();
        let pts = data.pooled();
        let fit = fit_mle(&pts, &DEFAULT_THETA2_BOUNDS, false).unwrap();
        let th = fit.theta_hat;
        let mut dot1 = 0.0;
        let mut dotg = 0.0;
        let mut scale = 0.0;
        for p in &pts {
            let g = p.dose / (p.dose + th.theta2);
            let r = p.mean - th.theta0 - th.theta1 * g;
            dot1 += p.count as f64 * r;
            dotg += p.count as f64 * r * g;
            scale += p.count as f64 * p.mean.abs();
        }
        assert!(dot1.abs() < 1e-10 * scale.max(1.0), "dot1 {dot1}");
        assert!(dotg.abs() < 1e-10 * scale.max(1.0), "dotg {dotg}");
    }

    #[test]
    fn bias_coefficient_is_positive_on_grid() {
        let iv = interval();
        for i in 1..=10 {
            for j in 1..=10 {
                for k in 1..=10 {
                    let t2 = 0.015 * (1500.0f64 / 0.015).powf(i as f64 / 10.0);
                    let t0 = 0.015 * (1500.0f64 / 0.015).powf(j as f64 / 10.0);
                    let sigma = 0.05 * k as f64;
                    let th = ModelParams::new(2.0, 0.467, t2).unwrap();
                    let b = stage1_bias_coefficient(&th, t0, &iv, sigma).unwrap();
                    assert!(b > 0.0, "t2={t2} t0={t0} sigma={sigma}");
                }
            }
        }
    }

    #[test]
    fn bias_scales_with_sigma_squared() {
        let iv = interval();
        let th = theta();
        let b1 = stage1_bias_theta2(&th, 25.0, &iv, 0.25, 27).unwrap();
        let b2 = stage1_bias_theta2(&th, 25.0, &iv, 0.5, 27).unwrap();
        assert!((b2 / b1 - 4.0).abs() < 1e-12);
    }

    #[test]
    fn bias_rejects_bad_domains() {
        let iv = interval();
        let th0 = ModelParams::new(2.0, 0.0, 25.0).unwrap();
        assert!(stage1_bias_coefficient(&th0, 25.0, &iv, 0.25).is_err());
        assert!(stage1_bias_theta2(&theta(), 25.0, &iv, 0.25, 28).is_err());
        assert!(stage1_bias_theta2(&theta(), -1.0, &iv, 0.25, 27).is_err());
    }

    #[test]
    fn single_stage_fit_mean_tracks_bias_prediction() {
        // Monte Carlo oracle for the first-order bias at a moderate noise
        // level: 500 fits of n = 297 observations on the D-optimal design.
        let iv = interval();
        let th = theta();
        let design = apportion(&d_optimal_emax(25.0, &iv).unwrap(), 297);
        let predicted = stage1_bias_theta2(&th, 25.0, &iv, 0.1, 297).unwrap();
        let reps = 500;
        let mut estimates = Vec::with_capacity(reps);
        for r in 0..reps {
            let mut rng = derive_rng(991, &[r as u64]);
            let s = simulate_stage_means(&design, &th, 0.1, &mut rng, &Emax).unwrap();
            let fit = fit_mle(&s.pooled(), &DEFAULT_THETA2_BOUNDS, false).unwrap();
            estimates.push(fit.theta_hat.theta2);
        }
        let mean = crate::accum::mean(&estimates);
        let sd = (estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>()
            / (reps as f64 - 1.0))
            .sqrt();
        let se = sd / (reps as f64).sqrt();
        assert!(
            (mean - (25.0 + predicted)).abs() < 3.0 * se,
            "mean {mean}, predicted {}, se {se}",
            25.0 + predicted
        );
    }

    #[test]
    fn dataset_csv_round_trip() {
        let d = design27();
        let mut rng = derive_rng(55, &[2]);
        let s1 = simulate_stage(&d, &theta(), 0.25, &mut rng, &Emax).unwrap();
        let s2 = simulate_stage(&d, &theta(), 0.25, &mut rng, &Emax).unwrap();
        let mut rows = stage_to_rows(&s1, 1).unwrap();
        rows.extend(stage_to_rows(&s2, 2).unwrap());
        let text = render_dataset_csv(&rows);
        let parsed = parse_dataset_csv(&text).unwrap();
        assert_eq!(parsed, rows);
        let (g1, g2) = group_rows(&parsed).unwrap();
        assert_eq!(g1.means(), s1.means());
        assert_eq!(g2.unwrap().means(), s2.means());
    }

    #[test]
    fn dataset_csv_rejects_malformed_input() {
        assert!(parse_dataset_csv("").is_err());
        assert!(parse_dataset_csv("dose,y\n1,2\n").is_err());
        assert!(parse_dataset_csv("stage,dose,replicate,y\n3,1.0,1,2.0\n").is_err());
        assert!(parse_dataset_csv("stage,dose,replicate,y\n1,1.0,1\n").is_err());
        assert!(parse_dataset_csv("stage,dose,replicate,y\n1,x,1,2.0\n").is_err());
    }
}
