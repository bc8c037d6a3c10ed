//! Derivative-free simplex search and a BFGS quasi-Newton refiner driven by
//! central finite-difference gradients.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub iters: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct SimplexOptions {
    /// Stop when `f_worst - f_best <= ftol`.
    pub ftol: f64,
    pub max_evals: usize,
    /// Initial vertex offset is `spread * (1 + |x_j|)` along coordinate `j`.
    pub spread: f64,
}

impl SimplexOptions {
    pub fn for_dim(n: usize) -> Self {
        SimplexOptions { ftol: 1e-10, max_evals: 2000 * n.max(1), spread: 0.05 }
    }
}

/// Nelder-Mead with standard coefficients (reflection 1, expansion 2,
/// contraction 1/2, shrink 1/2).
pub fn nelder_mead<F: Fn(&[f64]) -> f64>(f: F, x0: &[f64], opts: SimplexOptions) -> Minimum {
    let n = x0.len();
    let mut evals = 0usize;
    let eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    if n == 0 {
        let fx = eval(x0, &mut evals);
        return Minimum { x: vec![], f: fx, evals, iters: 0, converged: true };
    }

    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    simplex.push(x0.to_vec());
    for j in 0..n {
        let mut v = x0.to_vec();
        v[j] += opts.spread * (1.0 + x0[j].abs());
        simplex.push(v);
    }
    let mut fv: Vec<f64> = simplex.iter().map(|v| eval(v, &mut evals)).collect();
    let mut order: Vec<usize> = (0..=n).collect();
    let mut iters = 0usize;
    let mut converged = false;

    let mut centroid = vec![0.0; n];
    let mut trial = vec![0.0; n];
    let mut trial2 = vec![0.0; n];

    loop {
        order.sort_by(|&a, &b| fv[a].total_cmp(&fv[b]));
        let (best, worst, second) = (order[0], order[n], order[n - 1]);
        if fv[worst] - fv[best] <= opts.ftol {
            converged = true;
            break;
        }
        if evals >= opts.max_evals {
            break;
        }
        iters += 1;

        centroid.iter_mut().for_each(|c| *c = 0.0);
        for &idx in &order[..n] {
            for (c, x) in centroid.iter_mut().zip(&simplex[idx]) {
                *c += x;
            }
        }
        centroid.iter_mut().for_each(|c| *c /= n as f64);

        let along = |t: f64, out: &mut Vec<f64>, worst_pt: &[f64]| {
            for j in 0..n {
                out[j] = centroid[j] + t * (centroid[j] - worst_pt[j]);
            }
        };

        along(1.0, &mut trial, &simplex[worst]);
        let fr = eval(&trial, &mut evals);
        if fr < fv[best] {
            along(2.0, &mut trial2, &simplex[worst]);
            let fe = eval(&trial2, &mut evals);
            if fe < fr {
                simplex[worst].copy_from_slice(&trial2);
                fv[worst] = fe;
            } else {
                simplex[worst].copy_from_slice(&trial);
                fv[worst] = fr;
            }
            continue;
        }
        if fr < fv[second] {
            simplex[worst].copy_from_slice(&trial);
            fv[worst] = fr;
            continue;
        }
        let (t, reference) = if fr < fv[worst] { (0.5, fr) } else { (-0.5, fv[worst]) };
        along(t, &mut trial2, &simplex[worst]);
        let fc = eval(&trial2, &mut evals);
        if fc < reference {
            simplex[worst].copy_from_slice(&trial2);
            fv[worst] = fc;
            continue;
        }
        // shrink toward the best vertex
        let best_pt = simplex[best].clone();
        for &idx in &order[1..] {
            for j in 0..n {
                simplex[idx][j] = best_pt[j] + 0.5 * (simplex[idx][j] - best_pt[j]);
            }
            fv[idx] = eval(&simplex[idx], &mut evals);
        }
    }
    let best = (0..=n).min_by(|&a, &b| fv[a].total_cmp(&fv[b])).unwrap();
    Minimum { x: simplex[best].clone(), f: fv[best], evals, iters, converged }
}

/// Central-difference gradient with per-coordinate step `rel * (1 + |x_j|)`.
pub fn central_gradient<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64], rel: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|j| {
            let h = rel * (1.0 + x[j].abs());
            let orig = xp[j];
            xp[j] = orig + h;
            let fp = f(&xp);
            xp[j] = orig - h;
            let fm = f(&xp);
            xp[j] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct QuasiNewtonOptions {
    /// Converged when `max |g_j| <= gtol * (1 + |f|)`.
    pub gtol: f64,
    pub max_iter: usize,
    pub fd_rel_step: f64,
}

impl Default for QuasiNewtonOptions {
    fn default() -> Self {
        QuasiNewtonOptions { gtol: 1e-8, max_iter: 500, fd_rel_step: 1e-6 }
    }
}

/// BFGS with Armijo backtracking. `inv_hessian0` seeds the inverse-Hessian
/// approximation (identity when `None`).
pub fn bfgs<F: Fn(&[f64]) -> f64>(
    f: F,
    x0: &[f64],
    inv_hessian0: Option<DMatrix<f64>>,
    opts: QuasiNewtonOptions,
) -> Minimum {
    let n = x0.len();
    let mut evals = 0usize;
    let mut x = DVector::from_column_slice(x0);
    let mut fx = f(x.as_slice());
    evals += 1;
    if n == 0 {
        return Minimum { x: vec![], f: fx, evals, iters: 0, converged: true };
    }
    let mut h = inv_hessian0.unwrap_or_else(|| DMatrix::identity(n, n));
    let mut g = DVector::from_vec(central_gradient(&f, x.as_slice(), opts.fd_rel_step));
    evals += 2 * n;
    let grad_ok = |g: &DVector<f64>, fx: f64| g.amax() <= opts.gtol * (1.0 + fx.abs());

    let mut iters = 0;
    let mut converged = grad_ok(&g, fx);
    while !converged && iters < opts.max_iter {
        iters += 1;
        let mut dir = -(&h * &g);
        let mut slope = g.dot(&dir);
        if !(slope < 0.0) {
            // not a descent direction; restart from steepest descent
            h = DMatrix::identity(n, n);
            dir = -g.clone();
            slope = g.dot(&dir);
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xn = &x + t * &dir;
            let fnew = f(xn.as_slice());
            evals += 1;
            if fnew.is_finite() && fnew <= fx + 1e-4 * t * slope {
                accepted = Some((xn, fnew));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fnew)) = accepted else {
            break;
        };
        let gn = DVector::from_vec(central_gradient(&f, xn.as_slice(), opts.fd_rel_step));
        evals += 2 * n;
        let s = &xn - &x;
        let yv = &gn - &g;
        let sy = s.dot(&yv);
        if sy > 1e-12 * s.norm() * yv.norm() && sy > 0.0 {
            let rho = 1.0 / sy;
            let hy = &h * &yv;
            let yhy = yv.dot(&hy);
            // H' = H + (1 + rho y'Hy) rho s s' - rho (H y s' + s y' H)
            h += (1.0 + rho * yhy) * rho * (&s * s.transpose())
                - rho * (&hy * s.transpose() + &s * hy.transpose());
        }
        let stalled = fx - fnew <= f64::EPSILON * fx.abs() && s.amax() <= f64::EPSILON * (1.0 + x.amax());
        x = xn;
        fx = fnew;
        g = gn;
        converged = grad_ok(&g, fx);
        if stalled {
            break;
        }
    }
    Minimum { x: x.as_slice().to_vec(), f: fx, evals, iters, converged }
}
