//! Unconstrained quasi-Newton minimization (BFGS with backtracking line search).

/// Stopping rules for [`minimize`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfgsConfig {
    pub max_iter: usize,
    /// Convergence when the infinity norm of the gradient drops below this.
    pub grad_tol: f64,
}

impl Default for BfgsConfig {
    fn default() -> Self {
        Self { max_iter: 500, grad_tol: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimizes `f`, which returns the objective and writes the gradient into
/// its second argument.  Returns the best iterate found.
pub fn minimize<F>(mut f: F, x0: &[f64], cfg: &BfgsConfig) -> BfgsResult
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    if !fx.is_finite() {
        return BfgsResult { x, value: fx, grad_norm: f64::INFINITY, iterations: 0, converged: false };
    }
    let mut h = identity(n);
    let mut first = true;
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut dir = vec![0.0; n];
    for iter in 0..cfg.max_iter {
        let gnorm = inf_norm(&g);
        if gnorm < cfg.grad_tol {
            return BfgsResult { x, value: fx, grad_norm: gnorm, iterations: iter, converged: true };
        }
        for i in 0..n {
            dir[i] = -(0..n).map(|j| h[i * n + j] * g[j]).sum::<f64>();
        }
        let mut slope: f64 = dir.iter().zip(&g).map(|(d, gi)| d * gi).sum();
        if slope >= 0.0 {
            // lost descent; restart from steepest descent
            h = identity(n);
            for i in 0..n {
                dir[i] = -g[i];
            }
            slope = -g.iter().map(|v| v * v).sum::<f64>();
            first = true;
        }
        let mut step = if first { (1.0 / inf_norm(&dir)).min(1.0) } else { 1.0 };
        let mut accepted = false;
        let mut f_new = f64::INFINITY;
        for _ in 0..60 {
            for i in 0..n {
                x_new[i] = x[i] + step * dir[i];
            }
            f_new = f(&x_new, &mut g_new);
            if f_new.is_finite() && f_new <= fx + 1e-4 * step * slope {
                accepted = true;
                break;
            }
            let shrink = if f_new.is_finite() {
                // minimizer of the quadratic through f(0), f'(0), f(step)
                let q = -slope * step * step / (2.0 * (f_new - fx - slope * step));
                (q / step).clamp(0.1, 0.5)
            } else {
                0.1
            };
            step *= shrink;
        }
        if !accepted {
            return BfgsResult { x, value: fx, grad_norm: gnorm, iterations: iter, converged: false };
        }
        let s: Vec<f64> = (0..n).map(|i| x_new[i] - x[i]).collect();
        let y: Vec<f64> = (0..n).map(|i| g_new[i] - g[i]).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        if sy > 1e-12 * norm2(&s) * norm2(&y) {
            if first {
                let yy: f64 = y.iter().map(|v| v * v).sum();
                let scale = sy / yy;
                for i in 0..n {
                    h[i * n + i] = scale;
                }
                first = false;
            }
            bfgs_update(&mut h, &s, &y, sy);
        }
        let progress = fx - f_new;
        x.copy_from_slice(&x_new);
        g.copy_from_slice(&g_new);
        fx = f_new;
        if progress.abs() <= 1e-15 * fx.abs().max(1.0) && inf_norm(&s) <= 1e-14 {
            let gnorm = inf_norm(&g);
            return BfgsResult { x, value: fx, grad_norm: gnorm, iterations: iter + 1, converged: gnorm < cfg.grad_tol };
        }
    }
    let gnorm = inf_norm(&g);
    BfgsResult { x, value: fx, grad_norm: gnorm, iterations: cfg.max_iter, converged: gnorm < cfg.grad_tol }
}

fn identity(n: usize) -> Vec<f64> {
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        h[i * n + i] = 1.0;
    }
    h
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// H ← (I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| (0..n).map(|j| h[i * n + j] * y[j]).sum()).collect();
    let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
    let c = rho * rho * yhy + rho;
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] += c * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
        }
    }
}
