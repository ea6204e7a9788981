//! Expected Improvement and the DIRECT (DIviding RECTangles) global optimizer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::SurrogateModel;

/// Axis-aligned search region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl SearchBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::Dimension(format!(
                "box bounds have lengths {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        if lower.iter().chain(&upper).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("search box"));
        }
        if lower.iter().zip(&upper).any(|(l, u)| l >= u) {
            return Err(Error::invalid("box", "every lower bound must be below its upper bound"));
        }
        Ok(Self { lower, upper })
    }

    pub fn unit(dim: usize) -> Self {
        Self {
            lower: vec![0.0; dim],
            upper: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    /// Maps unit-cube coordinates into the box.
    pub fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(t, (l, h))| (l + t * (h - l)).clamp(*l, *h))
            .collect()
    }

    /// Maps box coordinates onto the unit cube.
    pub fn to_unit(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(v, (l, h))| ((v - l) / (h - l)).clamp(0.0, 1.0))
            .collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, h))| v >= l && v <= h)
    }
}

pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// EI for minimization: `E[max(f_best − Y, 0)]` with `Y ~ N(mu, sigma²)`.
pub fn expected_improvement_from(mu: f64, sigma: f64, f_best: f64) -> f64 {
    if sigma.is_nan() || sigma <= 0.0 {
        return 0.0;
    }
    let gap = f_best - mu;
    let z = gap / sigma;
    (gap * normal_cdf(z) + sigma * normal_pdf(z)).max(0.0)
}

pub fn expected_improvement(q: &[f64], model: &SurrogateModel, f_best: f64) -> f64 {
    let (mu, var) = model.predict(q);
    expected_improvement_from(mu, var.sqrt(), f_best)
}

/// A hyper-rectangle of the unit cube; side `i` has length `3^-levels[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rectangle {
    pub center: Vec<f64>,
    pub levels: Vec<u32>,
    pub value: f64,
}

impl Rectangle {
    pub fn side_lengths(&self) -> Vec<f64> {
        self.levels.iter().map(|&l| 3f64.powi(-(l as i32))).collect()
    }

    /// Half the diagonal. Levels are sorted first so rectangles of the same
    /// shape get bit-identical diameters.
    fn diameter(&self) -> f64 {
        let mut levels = self.levels.clone();
        levels.sort_unstable();
        0.5 * levels.iter().map(|&l| 9f64.powi(-(l as i32))).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectOptions {
    pub budget: usize,
    /// Balance parameter in the potential-optimality test.
    pub epsilon: f64,
    pub stall_iterations: usize,
    pub stall_tolerance: f64,
}

impl Default for DirectOptions {
    fn default() -> Self {
        Self {
            budget: 200,
            epsilon: 1e-4,
            stall_iterations: 20,
            stall_tolerance: 1e-12,
        }
    }
}

impl DirectOptions {
    pub fn with_budget(budget: usize) -> Self {
        Self {
            budget,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
    pub iterations: usize,
}

const NON_FINITE_PENALTY: f64 = 1e12;

/// Minimizes `objective` over `bounds` with DIRECT. The objective is called
/// only at points inside the box; non-finite values count as `1e12`.
pub fn direct_optimize<F>(mut objective: F, bounds: &SearchBox, opts: DirectOptions) -> Result<DirectResult>
where
    F: FnMut(&[f64]) -> f64,
{
    if opts.budget == 0 {
        return Err(Error::invalid("budget", "need at least one evaluation"));
    }
    let dim = bounds.dim();
    let mut eval = |u: &[f64]| {
        let v = objective(&bounds.from_unit(u));
        if v.is_finite() {
            v
        } else {
            NON_FINITE_PENALTY
        }
    };

    let center = vec![0.5; dim];
    let first = eval(&center);
    let mut rects = vec![Rectangle {
        center,
        levels: vec![0; dim],
        value: first,
    }];
    let mut best = 0usize;
    let mut iterations = 0;
    let mut stalled = 0;

    'outer: loop {
        if evaluations_left(opts.budget, &rects) < 2 {
            break;
        }
        iterations += 1;
        let before = rects[best].value;
        let selected = potentially_optimal(&rects, best, opts.epsilon);
        for idx in selected {
            let min_level = *rects[idx].levels.iter().min().expect("non-empty");
            let long_dims: Vec<usize> = (0..dim).filter(|&i| rects[idx].levels[i] == min_level).collect();
            let affordable = evaluations_left(opts.budget, &rects) / 2;
            if affordable == 0 {
                break 'outer;
            }
            let dims = &long_dims[..long_dims.len().min(affordable)];
            let delta = 3f64.powi(-(min_level as i32 + 1));

            let mut samples = Vec::with_capacity(dims.len());
            for &i in dims {
                let mut plus = rects[idx].center.clone();
                plus[i] += delta;
                let mut minus = rects[idx].center.clone();
                minus[i] -= delta;
                let fp = eval(&plus);
                let fm = eval(&minus);
                samples.push((i, plus, fp, minus, fm));
            }
            // Split first along the dimension with the best sample so it
            // ends up in the largest child.
            samples.sort_by(|a, b| a.2.min(a.4).total_cmp(&b.2.min(b.4)).then(a.0.cmp(&b.0)));
            for (i, plus, fp, minus, fm) in samples {
                rects[idx].levels[i] += 1;
                let levels = rects[idx].levels.clone();
                rects.push(Rectangle {
                    center: plus,
                    levels: levels.clone(),
                    value: fp,
                });
                rects.push(Rectangle {
                    center: minus,
                    levels,
                    value: fm,
                });
            }
            best = argmin(&rects);
        }

        let after = rects[best].value;
        if before - after < opts.stall_tolerance {
            stalled += 1;
            if stalled >= opts.stall_iterations {
                break;
            }
        } else {
            stalled = 0;
        }
    }

    let winner = &rects[best];
    Ok(DirectResult {
        x: bounds.from_unit(&winner.center),
        value: winner.value,
        evaluations: count_evals(&rects),
        iterations,
    })
}

// Every rectangle corresponds to exactly one evaluation at its center.
fn count_evals(rects: &[Rectangle]) -> usize {
    rects.len()
}

fn evaluations_left(budget: usize, rects: &[Rectangle]) -> usize {
    budget.saturating_sub(count_evals(rects))
}

fn argmin(rects: &[Rectangle]) -> usize {
    let mut best = 0;
    for (i, r) in rects.iter().enumerate() {
        if r.value < rects[best].value {
            best = i;
        }
    }
    best
}

/// Indices of the potentially optimal rectangles: for each distinct diameter
/// the lowest-valued rectangle, kept if some Lipschitz constant `K > 0` makes
/// it the best lower bound and improves on the incumbent by `ε|f_min|`.
fn potentially_optimal(rects: &[Rectangle], best: usize, epsilon: f64) -> Vec<usize> {
    let f_min = rects[best].value;
    let mut groups: Vec<(f64, usize)> = Vec::new();
    for (i, r) in rects.iter().enumerate() {
        let d = r.diameter();
        match groups.iter_mut().find(|(gd, _)| *gd == d) {
            Some(slot) => {
                if r.value < rects[slot.1].value {
                    slot.1 = i;
                }
            }
            None => groups.push((d, i)),
        }
    }
    groups.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut chosen = Vec::new();
    for (j, &(dj, idx)) in groups.iter().enumerate() {
        let fj = rects[idx].value;
        let mut k_low: f64 = 0.0;
        for &(di, ii) in &groups[..j] {
            k_low = k_low.max((fj - rects[ii].value) / (dj - di));
        }
        let mut k_high = f64::INFINITY;
        for &(di, ii) in &groups[j + 1..] {
            k_high = k_high.min((rects[ii].value - fj) / (di - dj));
        }
        if k_high <= 0.0 || k_low > k_high {
            continue;
        }
        if k_high.is_finite() && fj - k_high * dj > f_min - epsilon * f_min.abs() {
            continue;
        }
        chosen.push(idx);
    }
    chosen
}
