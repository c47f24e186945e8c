//! Limited-memory BFGS with a weak-Wolfe bisection line search.
//!
//! The merit closure returns `None` for points where the model cannot be
//! evaluated (non-finite values, failed construction); the line search
//! treats those as infinitely bad and backs off.

use nalgebra::DVector;
use std::collections::VecDeque;

const C1: f64 = 1e-4;
const C2: f64 = 0.9;
const MAX_LINE_STEPS: usize = 60;

pub struct MinimizeResult {
    pub x: DVector<f64>,
    pub f: f64,
    pub g: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
}

struct Accepted {
    alpha: f64,
    f: f64,
    g: DVector<f64>,
}

fn line_search<F>(
    fg: &mut F,
    x0: &DVector<f64>,
    f0: f64,
    d: &DVector<f64>,
    dg0: f64,
    alpha_init: f64,
) -> Option<Accepted>
where
    F: FnMut(&DVector<f64>) -> Option<(f64, DVector<f64>)>,
{
    let mut lo = 0.0;
    let mut hi = f64::INFINITY;
    let mut alpha = alpha_init;
    let mut best: Option<Accepted> = None;
    for _ in 0..MAX_LINE_STEPS {
        let x = x0 + d * alpha;
        match fg(&x) {
            None => hi = alpha,
            Some((fa, ga)) => {
                if fa > f0 + C1 * alpha * dg0 {
                    hi = alpha;
                } else {
                    let dga = ga.dot(d);
                    let acc = Accepted { alpha, f: fa, g: ga };
                    if dga < C2 * dg0 {
                        lo = alpha;
                        best = Some(acc);
                    } else {
                        return Some(acc);
                    }
                }
            }
        }
        alpha = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * alpha };
        if hi - lo < 1e-16 * (1.0 + lo) {
            break;
        }
    }
    // curvature never satisfied inside the bracket; the best Armijo point
    // still makes progress
    best
}

/// Minimizes `fg` from `x0` until the gradient infinity norm drops below
/// `gtol` or the budget runs out.
pub fn minimize<F>(
    mut fg: F,
    x0: DVector<f64>,
    gtol: f64,
    max_iter: usize,
    memory: usize,
) -> Option<MinimizeResult>
where
    F: FnMut(&DVector<f64>) -> Option<(f64, DVector<f64>)>,
{
    let (mut f, mut g) = fg(&x0)?;
    let mut x = x0;
    let mut pairs: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::new();
    let mut gamma = 1.0;
    let mut stall = 0;

    for iter in 0..max_iter {
        let g_inf = g.amax();
        if g_inf <= gtol {
            return Some(MinimizeResult {
                x,
                f,
                g,
                iterations: iter,
                converged: true,
            });
        }

        // two-loop recursion
        let mut d = -g.clone();
        let mut alphas = Vec::with_capacity(pairs.len());
        for (s, y, rho) in pairs.iter().rev() {
            let a = rho * s.dot(&d);
            d -= y * a;
            alphas.push(a);
        }
        d *= gamma;
        for ((s, y, rho), a) in pairs.iter().zip(alphas.into_iter().rev()) {
            let b = rho * y.dot(&d);
            d += s * (a - b);
        }

        let mut dg0 = g.dot(&d);
        if dg0 >= 0.0 {
            // fall back to steepest descent if curvature info went bad
            d = -g.clone();
            dg0 = g.dot(&d);
            pairs.clear();
            gamma = 1.0;
        }

        let alpha_init = if pairs.is_empty() { (1.0 / g_inf).min(1.0) } else { 1.0 };
        let Some(acc) = line_search(&mut fg, &x, f, &d, dg0, alpha_init) else {
            return Some(MinimizeResult {
                x,
                f,
                g,
                iterations: iter,
                converged: false,
            });
        };

        let s = &d * acc.alpha;
        let y = &acc.g - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            gamma = sy / y.norm_squared();
            pairs.push_back((s, y, 1.0 / sy));
            if pairs.len() > memory {
                pairs.pop_front();
            }
        }

        if (f - acc.f).abs() <= 1e-16 * (1.0 + f.abs()) {
            stall += 1;
        } else {
            stall = 0;
        }
        x += &d * acc.alpha;
        f = acc.f;
        g = acc.g;
        if stall >= 3 {
            return Some(MinimizeResult {
                x,
                f,
                g,
                iterations: iter + 1,
                converged: false,
            });
        }
    }
    let converged = g.amax() <= gtol;
    Some(MinimizeResult {
        x,
        f,
        g,
        iterations: max_iter,
        converged,
    })
}
