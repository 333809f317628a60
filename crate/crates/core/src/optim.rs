//! Small dense optimizers: box-bounded Levenberg-Marquardt for
//! least-squares curve fits and a box-bounded Nelder-Mead simplex for
//! derivative-free cost minimisation.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy)]
pub struct StopRule {
    /// Stop once the largest relative parameter change drops below this.
    pub rel_step: f64,
    pub max_iter: usize,
}

impl Default for StopRule {
    fn default() -> Self {
        StopRule {
            rel_step: 1e-10,
            max_iter: 500,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmResult {
    pub params: Vec<f64>,
    /// Sum of squared residuals at `params`.
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn clamp_into(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for ((v, &lo), &hi) in x.iter_mut().zip(lower).zip(upper) {
        *v = v.clamp(lo, hi);
    }
}

/// Levenberg-Marquardt with Marquardt diagonal scaling; steps are projected
/// onto `[lower, upper]`.
///
/// `residuals(x, r)` fills `r`; `jacobian(x, j)` fills the `m x n` matrix of
/// partial derivatives of the residuals.
pub fn levenberg_marquardt(
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    m: usize,
    residuals: impl Fn(&[f64], &mut [f64]),
    jacobian: impl Fn(&[f64], &mut DMatrix<f64>),
    stop: StopRule,
) -> LmResult {
    let n = x0.len();
    let mut x = x0.to_vec();
    clamp_into(&mut x, lower, upper);
    let mut r = vec![0.0; m];
    let mut r_trial = vec![0.0; m];
    let mut jac = DMatrix::zeros(m, n);
    let sq = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>();

    residuals(&x, &mut r);
    let mut cost = sq(&r);
    let mut mu = 1e-3;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < stop.max_iter {
        iterations += 1;
        if cost == 0.0 {
            converged = true;
            break;
        }
        jacobian(&x, &mut jac);
        let rv = DVector::from_column_slice(&r);
        let jtj = jac.transpose() * &jac;
        let g = jac.transpose() * rv;

        let mut accepted = false;
        while mu < 1e16 {
            let mut a = jtj.clone();
            for i in 0..n {
                a[(i, i)] += mu * jtj[(i, i)].max(1e-300);
            }
            let Some(step) = a.lu().solve(&(-&g)) else {
                mu *= 4.0;
                continue;
            };
            let mut trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            clamp_into(&mut trial, lower, upper);
            residuals(&trial, &mut r_trial);
            let trial_cost = sq(&r_trial);
            if trial_cost.is_finite() && trial_cost <= cost {
                let rel = x
                    .iter()
                    .zip(trial.iter())
                    .map(|(a, b)| (b - a).abs() / a.abs().max(b.abs()).max(1e-300))
                    .fold(0.0, f64::max);
                x = trial;
                std::mem::swap(&mut r, &mut r_trial);
                cost = trial_cost;
                mu = (mu / 3.0).max(1e-15);
                accepted = true;
                if rel < stop.rel_step {
                    converged = true;
                }
                break;
            }
            mu *= 4.0;
        }
        if !accepted {
            // no descent direction left at machine precision
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }

    LmResult {
        params: x,
        cost,
        iterations,
        converged,
    }
}

#[derive(Debug, Clone)]
pub struct SimplexResult {
    pub params: Vec<f64>,
    pub cost: f64,
    pub evaluations: usize,
    /// Best cost after each iteration; non-increasing.
    pub history: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct SimplexOptions {
    /// Initial edge length as a fraction of each parameter's box width.
    pub initial_step: f64,
    /// Stop when the simplex spread (relative to box width) and the cost
    /// spread both fall below these.
    pub x_tol: f64,
    pub f_tol: f64,
    pub max_evals: usize,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        SimplexOptions {
            initial_step: 0.05,
            x_tol: 1e-10,
            f_tol: 1e-18,
            max_evals: 40_000,
        }
    }
}

/// Nelder-Mead on the box `[lower, upper]`; trial points are clamped into
/// the box. Bounds with `lower == upper` are held fixed.
pub fn nelder_mead(
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    f: impl Fn(&[f64]) -> f64,
    opts: SimplexOptions,
) -> SimplexResult {
    let free: Vec<usize> = (0..x0.len()).filter(|&i| upper[i] > lower[i]).collect();
    let width: Vec<f64> = free.iter().map(|&i| upper[i] - lower[i]).collect();
    let mut base = x0.to_vec();
    clamp_into(&mut base, lower, upper);

    // optimize over the free coordinates, normalized by box width
    let to_full = |u: &[f64]| {
        let mut x = base.clone();
        for (k, &i) in free.iter().enumerate() {
            x[i] = (lower[i] + u[k] * width[k]).clamp(lower[i], upper[i]);
        }
        x
    };
    let n = free.len();
    let evaluations = std::cell::Cell::new(0usize);
    let eval = |u: &[f64]| {
        evaluations.set(evaluations.get() + 1);
        let v = f(&to_full(u));
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };

    let u0: Vec<f64> = free
        .iter()
        .enumerate()
        .map(|(k, &i)| (base[i] - lower[i]) / width[k])
        .collect();
    if n == 0 {
        let c = eval(&u0);
        return SimplexResult {
            params: base,
            cost: c,
            evaluations: evaluations.get(),
            history: vec![c],
        };
    }

    let mut simplex: Vec<Vec<f64>> = vec![u0.clone()];
    for k in 0..n {
        let mut v = u0.clone();
        // step inward if the start sits on the upper face
        v[k] = if v[k] + opts.initial_step <= 1.0 {
            v[k] + opts.initial_step
        } else {
            v[k] - opts.initial_step
        };
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| eval(v)).collect();
    let clamp_u = |v: &mut Vec<f64>| v.iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0));
    let mut history = Vec::new();

    loop {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();
        history.push(values[0]);

        let spread_x = simplex[1..]
            .iter()
            .flat_map(|v| v.iter().zip(simplex[0].iter()).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        let spread_f = (values[n] - values[0]).abs();
        if (spread_x < opts.x_tol && spread_f <= opts.f_tol.max(1e-15 * values[0].abs()))
            || evaluations.get() >= opts.max_evals
            || values[0] == 0.0
        {
            break;
        }

        let centroid: Vec<f64> = (0..n)
            .map(|k| simplex[..n].iter().map(|v| v[k]).sum::<f64>() / n as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            let mut p: Vec<f64> = centroid
                .iter()
                .zip(simplex[n].iter())
                .map(|(c, w)| c + t * (w - c))
                .collect();
            clamp_u(&mut p);
            p
        };

        let xr = along(-1.0);
        let fr = eval(&xr);
        if fr < values[0] {
            let xe = along(-2.0);
            let fe = eval(&xe);
            if fe < fr {
                simplex[n] = xe;
                values[n] = fe;
            } else {
                simplex[n] = xr;
                values[n] = fr;
            }
        } else if fr < values[n - 1] {
            simplex[n] = xr;
            values[n] = fr;
        } else {
            let (xc, fc) = if fr < values[n] {
                let p = along(-0.5);
                let v = eval(&p);
                (p, v)
            } else {
                let p = along(0.5);
                let v = eval(&p);
                (p, v)
            };
            if fc < values[n].min(fr) {
                simplex[n] = xc;
                values[n] = fc;
            } else {
                for i in 1..=n {
                    let mut p: Vec<f64> = simplex[0]
                        .iter()
                        .zip(simplex[i].iter())
                        .map(|(b, v)| b + 0.5 * (v - b))
                        .collect();
                    clamp_u(&mut p);
                    values[i] = eval(&p);
                    simplex[i] = p;
                }
            }
        }
    }

    SimplexResult {
        params: to_full(&simplex[0]),
        cost: values[0],
        evaluations: evaluations.get(),
        history,
    }
}
