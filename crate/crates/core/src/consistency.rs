//! NEES/NIS statistics, χ² acceptance bounds and the scalar tuning costs.

use std::io::Write;

use nalgebra::DVector;
#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kalman::{predict, update, GaussianBelief};
use crate::linalg::mahalanobis_sq;
use crate::lti::DiscreteModel;
use crate::sim::{RngStream, Trajectory, TruthSimulator};

/// Cost reported when the averaged statistic is zero or not finite.
pub const COST_CAP: f64 = 1e6;

pub fn nees(x_true: &DVector<f64>, belief: &GaussianBelief) -> Result<f64> {
    if x_true.len() != belief.dim() {
        return Err(Error::Dimension(format!(
            "true state has length {}, belief has {}",
            x_true.len(),
            belief.dim()
        )));
    }
    mahalanobis_sq(&(x_true - &belief.mean), &belief.cov, "state covariance")
}

pub fn nis(innovation: &DVector<f64>, s: &nalgebra::DMatrix<f64>) -> Result<f64> {
    mahalanobis_sq(innovation, s, "innovation covariance")
}

/// Elementwise mean over runs (rows) at each step (column).
pub fn average_stats(per_run: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = per_run
        .first()
        .ok_or_else(|| Error::invalid("per_run_stats", "need at least one run"))?;
    let steps = first.len();
    let mut sum = vec![0.0; steps];
    for (i, row) in per_run.iter().enumerate() {
        if row.len() != steps {
            return Err(Error::Dimension(format!(
                "run {i} has {} steps, run 0 has {steps}",
                row.len()
            )));
        }
        for (s, v) in sum.iter_mut().zip(row) {
            *s += v;
        }
    }
    let n = per_run.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

/// Regularized lower incomplete gamma `P(a, x)`: power series below `a + 1`,
/// Lentz continued fraction for the upper tail above.
pub fn regularized_gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x.is_infinite() {
        return 1.0;
    }
    let ln_prefix = a * x.ln() - x - libm::lgamma(a);
    if x < a + 1.0 {
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..10_000 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-17 {
                break;
            }
        }
        (sum.ln() + ln_prefix).exp().min(1.0)
    } else {
        const TINY: f64 = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / TINY;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..10_000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < TINY {
                d = TINY;
            }
            c = b + an / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        (1.0 - (ln_prefix + h.ln()).exp()).max(0.0)
    }
}

pub fn chi2_cdf(x: f64, dof: u32) -> f64 {
    regularized_gamma_p(dof as f64 / 2.0, x / 2.0)
}

/// Quantile of χ²(dof) by bisection on the CDF, to 1e-9 absolute or better.
pub fn chi2_inverse_cdf(p: f64, dof: u32) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid("p", format!("probability must lie in (0, 1), got {p}")));
    }
    if dof == 0 {
        return Err(Error::invalid("dof", "degrees of freedom must be positive"));
    }
    let mut lo = 0.0;
    let mut hi = (dof as f64).max(1.0);
    while chi2_cdf(hi, dof) < p {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if chi2_cdf(mid, dof) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 * hi.max(1.0) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Two-sided acceptance region for an N-run average of χ²(dof) statistics:
/// `N·ε̄ ~ χ²(N·dof)` when the filter is consistent.
pub fn chi2_bounds(alpha: f64, n_runs: usize, dof: usize) -> Result<(f64, f64)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid("alpha", format!("must lie in (0, 1), got {alpha}")));
    }
    if n_runs == 0 {
        return Err(Error::invalid("N", "need at least one run"));
    }
    let total = u32::try_from(n_runs * dof).map_err(|_| Error::invalid("N", "too many degrees of freedom"))?;
    let n = n_runs as f64;
    let lower = chi2_inverse_cdf(alpha / 2.0, total)? / n;
    let upper = chi2_inverse_cdf(1.0 - alpha / 2.0, total)? / n;
    Ok((lower, upper))
}

/// `|ln(mean_k ε̄_k / dof)|`: zero for a consistent filter, symmetric in over-
/// and under-confidence on a log scale.
pub fn j_cost(avg_stats: &[f64], dof: usize) -> Result<f64> {
    if dof == 0 {
        return Err(Error::invalid("dof", "degrees of freedom must be positive"));
    }
    if avg_stats.is_empty() {
        return Err(Error::invalid("avg_stats", "need at least one step"));
    }
    let mean = avg_stats.iter().sum::<f64>() / avg_stats.len() as f64;
    let ratio = mean / dof as f64;
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Ok(COST_CAP);
    }
    Ok(ratio.ln().abs().min(COST_CAP))
}

/// Per-step NEES and NIS of one filter pass over one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunStats {
    pub nees: Vec<f64>,
    pub nis: Vec<f64>,
}

/// Runs the filter from `init` over `traj`, recording NEES against the
/// posterior at every step and NIS of every innovation.
pub fn filter_run(filter: &DiscreteModel, init: &GaussianBelief, traj: &Trajectory) -> Result<RunStats> {
    let mut belief = init.clone();
    let mut stats = RunStats {
        nees: Vec::with_capacity(traj.len()),
        nis: Vec::with_capacity(traj.len()),
    };
    for k in 0..traj.len() {
        let pred = predict(&belief, filter, &traj.controls[k])?;
        let upd = update(&pred, filter, &traj.measurements[k])?;
        stats.nis.push(nis(&upd.innovation, &upd.innovation_cov)?);
        stats.nees.push(nees(&traj.states[k], &upd.belief)?);
        belief = upd.belief;
    }
    Ok(stats)
}

/// Averaged consistency statistics of one filter tuning over N runs.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyRecord {
    pub avg_nees: Vec<f64>,
    pub avg_nis: Vec<f64>,
    pub n_runs: usize,
    pub nx: usize,
    pub nz: usize,
    pub alpha: f64,
    pub bounds_nees: (f64, f64),
    pub bounds_nis: (f64, f64),
    pub j_nees: f64,
    pub j_nis: f64,
}

fn fraction_within(values: &[f64], (lo, hi): (f64, f64)) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().filter(|&&v| v >= lo && v <= hi).count() as f64 / values.len() as f64
}

impl ConsistencyRecord {
    pub fn from_runs(runs: &[RunStats], nx: usize, nz: usize, alpha: f64) -> Result<Self> {
        let nees_rows: Vec<Vec<f64>> = runs.iter().map(|r| r.nees.clone()).collect();
        let nis_rows: Vec<Vec<f64>> = runs.iter().map(|r| r.nis.clone()).collect();
        let avg_nees = average_stats(&nees_rows)?;
        let avg_nis = average_stats(&nis_rows)?;
        let n_runs = runs.len();
        Ok(Self {
            j_nees: j_cost(&avg_nees, nx)?,
            j_nis: j_cost(&avg_nis, nz)?,
            bounds_nees: chi2_bounds(alpha, n_runs, nx)?,
            bounds_nis: chi2_bounds(alpha, n_runs, nz)?,
            avg_nees,
            avg_nis,
            n_runs,
            nx,
            nz,
            alpha,
        })
    }

    pub fn nees_fraction_inside(&self) -> f64 {
        fraction_within(&self.avg_nees, self.bounds_nees)
    }

    pub fn nis_fraction_inside(&self) -> f64 {
        fraction_within(&self.avg_nis, self.bounds_nis)
    }

    pub fn nees_fraction_above(&self) -> f64 {
        let hi = self.bounds_nees.1;
        self.avg_nees.iter().filter(|&&v| v > hi).count() as f64 / self.avg_nees.len().max(1) as f64
    }

    /// CSV with columns `k, avg_nees, nees_lo, nees_hi, avg_nis, nis_lo, nis_hi`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        use crate::format_float as ff;
        writeln!(out, "k,avg_nees,nees_lo,nees_hi,avg_nis,nis_lo,nis_hi")?;
        for (k, (e, z)) in self.avg_nees.iter().zip(&self.avg_nis).enumerate() {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                k + 1,
                ff(*e),
                ff(self.bounds_nees.0),
                ff(self.bounds_nees.1),
                ff(*z),
                ff(self.bounds_nis.0),
                ff(self.bounds_nis.1)
            )?;
        }
        Ok(())
    }
}

/// Simulates one truth run per stream, filters each with `filter`, and
/// averages. Runs may execute in parallel; results are merged in stream order.
pub fn monte_carlo(
    truth: &TruthSimulator,
    filter: &DiscreteModel,
    init: &GaussianBelief,
    steps: usize,
    streams: &[RngStream],
    alpha: f64,
) -> Result<ConsistencyRecord> {
    let one = |s: &RngStream| -> Result<RunStats> {
        let traj = truth.run(steps, *s)?;
        filter_run(filter, init, &traj)
    };
    #[cfg(feature = "parallel")]
    let runs: Result<Vec<RunStats>> = streams.par_iter().map(one).collect();
    #[cfg(not(feature = "parallel"))]
    let runs: Result<Vec<RunStats>> = streams.iter().map(one).collect();
    ConsistencyRecord::from_runs(&runs?, filter.state_dim(), filter.meas_dim(), alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::ChiSquared;

    fn belief(mean: &[f64], cov: DMatrix<f64>) -> GaussianBelief {
        GaussianBelief::new(DVector::from_column_slice(mean), cov).unwrap()
    }

    #[test]
    fn nees_examples() {
        let b = belief(&[1.0, 2.0], DMatrix::identity(2, 2));
        assert_eq!(nees(&DVector::from_vec(vec![1.0, 2.0]), &b).unwrap(), 0.0);
        let b = belief(&[0.0, 0.0], DMatrix::identity(2, 2));
        assert_relative_eq!(nees(&DVector::from_vec(vec![1.0, 1.0]), &b).unwrap(), 2.0);
        let b = belief(&[0.0, 0.0], DMatrix::from_diagonal_element(2, 2, 4.0));
        assert_relative_eq!(nees(&DVector::from_vec(vec![2.0, 0.0]), &b).unwrap(), 1.0);
    }

    #[test]
    fn nees_requires_pd() {
        let b = belief(&[0.0], DMatrix::from_element(1, 1, 0.0));
        assert!(matches!(
            nees(&DVector::from_element(1, 1.0), &b),
            Err(Error::NotPositiveDefinite(_))
        ));
    }

    #[test]
    fn nis_examples() {
        let s = DMatrix::identity(1, 1);
        assert_eq!(nis(&DVector::zeros(1), &s).unwrap(), 0.0);
        assert_relative_eq!(nis(&DVector::from_element(1, 3.0), &s).unwrap(), 9.0);
        let s = DMatrix::from_element(1, 1, 2.0);
        assert_relative_eq!(nis(&DVector::from_element(1, 2.0), &s).unwrap(), 2.0);
        assert!(nis(&DVector::from_element(1, 2.0), &DMatrix::from_element(1, 1, -1.0)).is_err());
    }

    #[test]
    fn average_stats_examples() {
        assert_eq!(average_stats(&[vec![1.0, 5.0, 2.0]]).unwrap(), vec![1.0, 5.0, 2.0]);
        assert_eq!(
            average_stats(&[vec![1.0, 3.0], vec![3.0, 1.0]]).unwrap(),
            vec![2.0, 2.0]
        );
        assert!(matches!(
            average_stats(&[vec![1.0], vec![1.0, 2.0]]),
            Err(Error::Dimension(_))
        ));
        assert!(average_stats(&[]).is_err());
    }

    #[test]
    fn average_of_chi2_draws_within_clt_band() {
        let mut rng = RngStream::new(11, 0).generator();
        let dist = ChiSquared::new(2.0).unwrap();
        let runs: Vec<Vec<f64>> = (0..10).map(|_| (0..1000).map(|_| rng.sample(dist)).collect()).collect();
        let avg = average_stats(&runs).unwrap();
        let band = 3.0 * (2.0f64 * 2.0 / 10.0).sqrt();
        let inside = avg.iter().filter(|&&v| (v - 2.0).abs() <= band).count();
        assert!(inside as f64 >= 0.99 * avg.len() as f64, "{inside} of {}", avg.len());
    }

    /// Independent oracle: P(a, x) from the plain power series only, with
    /// ln Γ from statrs, inverted by bisection.
    fn series_inverse(p: f64, dof: u32) -> f64 {
        let a = dof as f64 / 2.0;
        let cdf = |x: f64| -> f64 {
            let y = x / 2.0;
            let mut term = 1.0 / a;
            let mut sum = term;
            let mut k = 1.0;
            while term > sum * 1e-18 {
                term *= y / (a + k);
                sum += term;
                k += 1.0;
            }
            (a * y.ln() - y - statrs::function::gamma::ln_gamma(a) + sum.ln()).exp()
        };
        let (mut lo, mut hi) = (0.0, 500.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn chi2_quantiles_against_series_oracle() {
        for (p, dof, frozen) in [(0.5, 2, 1.38629), (0.95, 2, 5.99146), (0.975, 20, 34.1696)] {
            let got = chi2_inverse_cdf(p, dof).unwrap();
            let oracle = series_inverse(p, dof);
            assert!((got - oracle).abs() <= 1e-9, "p={p} dof={dof}: {got} vs {oracle}");
            assert!((got - frozen).abs() <= 1e-4, "p={p} dof={dof}: {got} vs {frozen}");
        }
        assert_relative_eq!(chi2_inverse_cdf(0.5, 2).unwrap(), 2.0 * 2f64.ln(), epsilon = 1e-9);
    }

    #[test]
    fn chi2_quantiles_against_statrs() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        for dof in [1u32, 2, 3, 7, 20, 100, 1000] {
            let dist = ChiSquared::new(dof as f64).unwrap();
            for p in [0.001, 0.025, 0.3, 0.5, 0.9, 0.975, 0.999] {
                let got = chi2_inverse_cdf(p, dof).unwrap();
                let want = dist.inverse_cdf(p);
                assert!(
                    (got - want).abs() <= 1e-6 * want.max(1.0),
                    "dof={dof} p={p}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn chi2_inverse_rejects_bad_probability() {
        for p in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(chi2_inverse_cdf(p, 2).is_err());
        }
        assert!(chi2_inverse_cdf(0.5, 0).is_err());
    }

    #[test]
    fn chi2_bounds_examples() {
        let (lo, hi) = chi2_bounds(0.05, 1, 2).unwrap();
        assert_relative_eq!(lo, -2.0 * 0.975f64.ln(), epsilon = 1e-9);
        assert_relative_eq!(hi, -2.0 * 0.025f64.ln(), epsilon = 1e-9);
        assert!((lo - 0.0506).abs() < 1e-4 && (hi - 7.378).abs() < 1e-3);

        let (lo, hi) = chi2_bounds(0.05, 10, 2).unwrap();
        assert!((lo - 0.9591).abs() < 1e-4, "{lo}");
        assert!((hi - 3.4170).abs() < 1e-4, "{hi}");

        let (lo, hi) = chi2_bounds(0.999, 4, 2).unwrap();
        assert!(lo < hi);
        assert!(chi2_bounds(0.0, 4, 2).is_err());
        assert!(chi2_bounds(0.05, 0, 2).is_err());
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn j_cost_examples() {
        assert_eq!(j_cost(&[2.0; 10], 2).unwrap(), 0.0);
        assert_relative_eq!(
            j_cost(&[std::f64::consts::E * 3.0; 4], 3).unwrap(),
            1.0,
            epsilon = 1e-15
        );
        assert_relative_eq!(j_cost(&[1.0, 0.5, 1.5], 2).unwrap(), 0.5f64.ln().abs(), epsilon = 1e-15);
        assert_relative_eq!(j_cost(&[1.0; 3], 2).unwrap(), 0.6931, epsilon = 1e-4);
        assert_eq!(j_cost(&[0.0; 5], 2).unwrap(), COST_CAP);
        assert!(j_cost(&[], 2).is_err());
        assert!(j_cost(&[1.0], 0).is_err());
    }

    proptest! {
        #[test]
        fn j_cost_symmetric_in_log_ratio(c in 1e-3f64..1e3, dof in 1usize..6) {
            let over = j_cost(&[c * dof as f64; 7], dof).unwrap();
            let under = j_cost(&[dof as f64 / c; 7], dof).unwrap();
            prop_assert!((over - under).abs() <= 1e-12 * over.max(1.0));
        }

        #[test]
        fn j_cost_invariant_to_time_permutation(mut v in prop::collection::vec(0.01f64..20.0, 1..50), seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            let before = j_cost(&v, 2).unwrap();
            v.shuffle(&mut RngStream::new(seed, 0).generator());
            let after = j_cost(&v, 2).unwrap();
            prop_assert!((before - after).abs() <= 1e-12);
        }
    }

    #[test]
    fn consistency_csv_layout() {
        let runs = vec![
            RunStats {
                nees: vec![1.0, 2.0],
                nis: vec![0.5, 1.5],
            },
            RunStats {
                nees: vec![3.0, 2.0],
                nis: vec![1.5, 0.5],
            },
        ];
        let rec = ConsistencyRecord::from_runs(&runs, 2, 1, 0.05).unwrap();
        assert_eq!(rec.avg_nees, vec![2.0, 2.0]);
        assert_eq!(rec.j_nees, 0.0);
        assert_eq!(rec.j_nis, 0.0);
        let mut buf = Vec::new();
        rec.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "k,avg_nees,nees_lo,nees_hi,avg_nis,nis_lo,nis_hi"
        );
        assert_eq!(lines.count(), 2);
    }
}
