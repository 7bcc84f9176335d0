//! Bound-constrained derivative-free minimization.
//!
//! A trust-region method on quadratic models that interpolate the objective
//! on a sample set of between `2n+1` and `(n+1)(n+2)/2` points. Where the
//! interpolation conditions leave the Hessian underdetermined, the model with
//! the least Frobenius norm of the Hessian is used. A second, coarser radius
//! `rho` controls sample-set geometry and termination, as in Powell's methods.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DfoError {
    #[error("objective returned a non-finite value at {0:?}")]
    NonFiniteObjective(Vec<f64>),
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DfoOptions {
    pub rho_begin: f64,
    pub rho_end: f64,
    pub max_evals: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DfoResult {
    pub x: Vec<f64>,
    pub fx: f64,
    pub evals: usize,
    /// Every point that became the new incumbent, in order.
    pub accepted: Vec<Vec<f64>>,
}

struct Problem<'a, F> {
    f: F,
    lower: &'a [f64],
    upper: &'a [f64],
    evals: usize,
    max_evals: usize,
}

impl<F: FnMut(&[f64]) -> f64> Problem<'_, F> {
    fn eval(&mut self, x: &DVector<f64>) -> Result<f64, DfoError> {
        self.evals += 1;
        let v = (self.f)(x.as_slice());
        if v.is_finite() {
            Ok(v)
        } else {
            Err(DfoError::NonFiniteObjective(x.as_slice().to_vec()))
        }
    }

    fn clip(&self, x: &mut DVector<f64>) {
        for i in 0..x.len() {
            x[i] = x[i].clamp(self.lower[i], self.upper[i]);
        }
    }

    fn exhausted(&self) -> bool {
        self.evals >= self.max_evals
    }
}

/// Quadratic model `c + gᵀs + ½ sᵀHs` around the incumbent.
struct Model {
    g: DVector<f64>,
    h: DMatrix<f64>,
}

impl Model {
    fn decrease(&self, s: &DVector<f64>) -> f64 {
        -(self.g.dot(s) + 0.5 * s.dot(&(&self.h * s)))
    }
}

/// Solves the minimum-Frobenius-norm interpolation system for right-hand side
/// `rhs` (one value per point). Offsets are scaled by `sigma` for conditioning.
fn mfn_solve(ys: &[DVector<f64>], rhs: &[f64]) -> Option<(f64, Model)> {
    let m = ys.len();
    let n = ys[0].len();
    let sigma = ys.iter().map(|y| y.norm()).fold(0.0, f64::max);
    if sigma == 0.0 {
        return None;
    }
    let zs: Vec<DVector<f64>> = ys.iter().map(|y| y / sigma).collect();
    let dim = m + n + 1;
    let mut w = DMatrix::zeros(dim, dim);
    for i in 0..m {
        for j in 0..m {
            w[(i, j)] = 0.5 * zs[i].dot(&zs[j]).powi(2);
        }
        w[(i, m)] = 1.0;
        w[(m, i)] = 1.0;
        for k in 0..n {
            w[(i, m + 1 + k)] = zs[i][k];
            w[(m + 1 + k, i)] = zs[i][k];
        }
    }
    let mut b = DVector::zeros(dim);
    for i in 0..m {
        b[i] = rhs[i];
    }
    let sol = w.lu().solve(&b)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut h = DMatrix::zeros(n, n);
    for i in 0..m {
        h += &zs[i] * zs[i].transpose() * sol[i];
    }
    let g = sol.rows(m + 1, n).into_owned() / sigma;
    Some((
        sol[m],
        Model {
            g,
            h: h / (sigma * sigma),
        },
    ))
}

/// Minimizer of the model in the ball `‖s‖ ≤ delta` (Moré-Sorensen via eigendecomposition).
fn ball_step(model: &Model, delta: f64) -> DVector<f64> {
    let n = model.g.len();
    let eig = SymmetricEigen::new(model.h.clone());
    let q = &eig.eigenvectors;
    let lam = &eig.eigenvalues;
    let gq = q.transpose() * &model.g;
    let lmin = lam.iter().cloned().fold(f64::INFINITY, f64::min);
    let lmax = lam.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let step_norm = |mu: f64| -> f64 {
        (0..n)
            .map(|i| {
                let d = lam[i] + mu;
                if d > 0.0 {
                    (gq[i] / d).powi(2)
                } else {
                    f64::INFINITY
                }
            })
            .sum::<f64>()
            .sqrt()
    };
    let build = |mu: f64| -> DVector<f64> {
        let coeffs = DVector::from_iterator(n, (0..n).map(|i| -gq[i] / (lam[i] + mu)));
        q * coeffs
    };
    if lmin > 0.0 && step_norm(0.0) <= delta {
        return build(0.0);
    }
    let floor = (-lmin).max(0.0);
    let scale = lmax.abs().max(lmin.abs()).max(1e-300);
    let eps = 1e-12 * scale;
    let mut lo = floor + eps;
    if step_norm(lo) <= delta {
        // hard case: move along the most negative curvature direction to the boundary
        let mut s = build(lo);
        let imin = (0..n).min_by(|&a, &b| lam[a].total_cmp(&lam[b])).unwrap();
        let v = q.column(imin).into_owned();
        let sv = s.dot(&v);
        let ss = s.norm_squared();
        let tau = -sv + (sv * sv + (delta * delta - ss).max(0.0)).sqrt();
        s += v * tau;
        return s;
    }
    let mut hi = floor + model.g.norm() / delta + scale;
    while step_norm(hi) > delta {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if step_norm(mid) > delta {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * hi {
            break;
        }
    }
    build(hi)
}

/// Model step from `x` within the trust region and the box.
fn tr_step<F: FnMut(&[f64]) -> f64>(p: &Problem<'_, F>, model: &Model, x: &DVector<f64>, delta: f64) -> DVector<f64> {
    let n = x.len();
    let mut best = DVector::zeros(n);
    let mut best_dec = 0.0;
    let mut consider = |s: DVector<f64>| {
        let mut y = x + &s;
        p.clip(&mut y);
        let s = y - x;
        let dec = model.decrease(&s);
        if dec > best_dec {
            best_dec = dec;
            best = s;
        }
    };
    consider(ball_step(model, delta));
    // projected steepest descent, active bounds removed
    let mut d = -&model.g;
    for i in 0..n {
        if (x[i] <= p.lower[i] && d[i] < 0.0) || (x[i] >= p.upper[i] && d[i] > 0.0) {
            d[i] = 0.0;
        }
    }
    let dn = d.norm();
    if dn > 0.0 {
        let curv = d.dot(&(&model.h * &d));
        let gd = -model.g.dot(&d);
        let mut t = delta / dn;
        if curv > 0.0 {
            t = t.min(gd / curv);
        }
        consider(d * t);
    }
    best
}

/// Minimizes `f` over the box `[lower, upper]` starting at `x0`.
pub fn minimize_df<F>(
    f: F,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    opts: &DfoOptions,
) -> Result<DfoResult, DfoError>
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    if n == 0 || lower.len() != n || upper.len() != n {
        return Err(DfoError::InvalidProblem("dimension mismatch".into()));
    }
    if !(opts.rho_begin > 0.0 && opts.rho_end > 0.0 && opts.rho_end <= opts.rho_begin) {
        return Err(DfoError::InvalidProblem("need 0 < rho_end <= rho_begin".into()));
    }
    if (0..n).any(|i| !(lower[i] <= x0[i] && x0[i] <= upper[i])) {
        return Err(DfoError::InvalidProblem("x0 outside bounds".into()));
    }
    let mut p = Problem {
        f,
        lower,
        upper,
        evals: 0,
        max_evals: opts.max_evals.max(1),
    };
    let max_points = (n + 1) * (n + 2) / 2;
    let x0 = DVector::from_column_slice(x0);
    let f0 = p.eval(&x0)?;
    let mut pts: Vec<DVector<f64>> = vec![x0.clone()];
    let mut fs: Vec<f64> = vec![f0];
    let mut best = 0usize;
    let mut accepted = Vec::new();
    let mut rho = opts.rho_begin;
    let mut delta = rho;

    let done = |p: &Problem<'_, F>, pts: &[DVector<f64>], fs: &[f64], best: usize, accepted: Vec<Vec<f64>>| DfoResult {
        x: pts[best].as_slice().to_vec(),
        fx: fs[best],
        evals: p.evals,
        accepted,
    };

    // initial stencil: ±rho along each axis, reflected at the bounds
    macro_rules! seed_stencil {
        ($radius:expr) => {{
            let c = pts[best].clone();
            let fc = fs[best];
            pts.clear();
            fs.clear();
            pts.push(c.clone());
            fs.push(fc);
            best = 0;
            'outer: for i in 0..n {
                for sign in [1.0, -1.0] {
                    if p.exhausted() {
                        break 'outer;
                    }
                    let mut y = c.clone();
                    y[i] += sign * $radius;
                    if y[i] > upper[i] || y[i] < lower[i] {
                        y[i] = c[i] - 2.0 * sign * $radius;
                    }
                    p.clip(&mut y);
                    if pts.iter().any(|q| (q - &y).norm() < 1e-12 * $radius) {
                        continue;
                    }
                    let fy = p.eval(&y)?;
                    pts.push(y);
                    fs.push(fy);
                    if fy < fs[best] {
                        best = pts.len() - 1;
                        accepted.push(pts[best].as_slice().to_vec());
                    }
                }
            }
        }};
    }
    seed_stencil!(rho);

    let shrink = |rho: f64| -> f64 {
        let r_end = opts.rho_end;
        if rho > 250.0 * r_end {
            0.1 * rho
        } else if rho > 16.0 * r_end {
            (rho * r_end).sqrt()
        } else {
            r_end
        }
    };

    while !p.exhausted() {
        let xb = pts[best].clone();
        let fb = fs[best];
        let ys: Vec<DVector<f64>> = pts.iter().map(|q| q - &xb).collect();
        let rhs: Vec<f64> = fs.iter().map(|v| v - fb).collect();
        let Some((_, model)) = (pts.len() > n).then(|| mfn_solve(&ys, &rhs)).flatten() else {
            let before = p.evals;
            seed_stencil!(rho);
            if p.evals == before {
                if rho <= opts.rho_end {
                    break;
                }
                let r = shrink(rho);
                delta = (0.5 * rho).max(r);
                rho = r;
            }
            continue;
        };
        let s = tr_step(&p, &model, &xb, delta);
        let snorm = s.norm();
        let far = (0..pts.len())
            .filter(|&i| i != best)
            .max_by(|&a, &b| ys[a].norm().total_cmp(&ys[b].norm()));
        let far_dist = far.map(|i| ys[i].norm()).unwrap_or(0.0);

        if snorm < 0.5 * rho || model.decrease(&s) <= 0.0 {
            if far_dist > 2.0 * delta.max(rho)
                && improve_geometry(&mut p, &mut pts, &mut fs, &mut best, &mut accepted, far.unwrap(), rho)?
            {
                continue;
            }
            if rho <= opts.rho_end {
                break;
            }
            let r = shrink(rho);
            delta = (0.5 * rho).max(r);
            rho = r;
            continue;
        }

        let xn = &xb + &s;
        let fnew = p.eval(&xn)?;
        let pred = model.decrease(&s);
        let ratio = (fb - fnew) / pred;
        delta = if ratio <= 0.1 {
            (0.5 * delta).min(snorm)
        } else if ratio <= 0.7 {
            (0.5 * delta).max(snorm)
        } else {
            (0.5 * delta).max(2.0 * snorm)
        };
        if delta <= 1.5 * rho {
            delta = rho;
        }

        // insert the new point, dropping the farthest one when the set is full
        let newest = if pts.len() < max_points {
            pts.push(xn);
            fs.push(fnew);
            pts.len() - 1
        } else {
            let drop = far.unwrap();
            pts[drop] = xn;
            fs[drop] = fnew;
            drop
        };
        if fnew < fb {
            best = newest;
            accepted.push(pts[best].as_slice().to_vec());
        }

        if ratio < 0.1 {
            let ys_new: Vec<f64> = pts.iter().map(|q| (q - &pts[best]).norm()).collect();
            let far2 = (0..pts.len())
                .filter(|&i| i != best)
                .max_by(|&a, &b| ys_new[a].total_cmp(&ys_new[b]));
            if let Some(i) = far2 {
                if ys_new[i] > 2.0 * delta
                    && !p.exhausted()
                    && improve_geometry(&mut p, &mut pts, &mut fs, &mut best, &mut accepted, i, delta)?
                {
                    continue;
                }
            }
            if delta <= rho && snorm <= rho * 1.0001 {
                if rho <= opts.rho_end {
                    break;
                }
                let r = shrink(rho);
                delta = (0.5 * rho).max(r);
                rho = r;
            }
        }
    }
    Ok(done(&p, &pts, &fs, best, accepted))
}

/// Replaces point `drop` by a point at distance `radius` from the incumbent
/// chosen to make the sample set well poised (large Lagrange-function value).
/// Returns `false` when no admissible point exists.
fn improve_geometry<F: FnMut(&[f64]) -> f64>(
    p: &mut Problem<'_, F>,
    pts: &mut [DVector<f64>],
    fs: &mut [f64],
    best: &mut usize,
    accepted: &mut Vec<Vec<f64>>,
    drop: usize,
    radius: f64,
) -> Result<bool, DfoError> {
    let n = pts[0].len();
    let xb = pts[*best].clone();
    let ys: Vec<DVector<f64>> = pts.iter().map(|q| q - &xb).collect();
    let mut e = vec![0.0; pts.len()];
    e[drop] = 1.0;
    let mut cands: Vec<DVector<f64>> = Vec::new();
    let lag = mfn_solve(&ys, &e);
    if let Some((_, l)) = &lag {
        if l.g.norm() > 0.0 {
            let d = &l.g / l.g.norm() * radius;
            cands.push(d.clone());
            cands.push(-d);
        }
    }
    for i in 0..n {
        let mut d = DVector::zeros(n);
        d[i] = radius;
        cands.push(d.clone());
        cands.push(-d);
    }
    let value = |d: &DVector<f64>| -> f64 {
        match &lag {
            Some((c, l)) => (c + l.g.dot(d) + 0.5 * d.dot(&(&l.h * d))).abs(),
            None => 0.0,
        }
    };
    let mut chosen: Option<(f64, DVector<f64>)> = None;
    for d in cands {
        let mut y = &xb + &d;
        p.clip(&mut y);
        if pts.iter().enumerate().any(|(i, q)| i != drop && (q - &y).norm() < 1e-3 * radius) {
            continue;
        }
        let v = value(&(&y - &xb));
        if chosen.as_ref().map(|(bv, _)| v > *bv).unwrap_or(true) {
            chosen = Some((v, y));
        }
    }
    let Some((_, y)) = chosen else {
        return Ok(false);
    };
    let fy = p.eval(&y)?;
    pts[drop] = y;
    fs[drop] = fy;
    if fy < fs[*best] {
        *best = drop;
        accepted.push(pts[drop].as_slice().to_vec());
    }
    Ok(true)
}
