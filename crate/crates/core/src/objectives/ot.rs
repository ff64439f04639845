//! Entropic optimal transport (log-domain Sinkhorn) and an exact LP solver
//! for small instances.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            epsilon: 0.05,
            max_iters: 200,
            tol: 1e-6,
        }
    }
}

/// A transport plan with its cost `⟨T, C⟩`.
#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    pub rows: usize,
    pub cols: usize,
    pub plan: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `max(‖T·1 − a‖∞, ‖Tᵀ·1 − b‖∞)`.
    pub marginal_error: f64,
}

fn check_marginals(n: usize, m: usize, cost: &[f64], a: &[f64], b: &[f64]) -> Result<()> {
    if n == 0 || m == 0 || cost.len() != n * m || a.len() != n || b.len() != m {
        return Err(Error::shape(format!(
            "transport problem: cost of {} entries, marginals {} and {}, expected {n}×{m}",
            cost.len(),
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|&x| !(x >= 0.0) || !x.is_finite())
        || cost.iter().any(|c| !c.is_finite())
    {
        return Err(Error::numeric(
            "transport marginals must be finite and nonnegative, costs finite",
        ));
    }
    let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    if (sa - sb).abs() > 1e-9 * sa.max(sb).max(1.0) {
        return Err(Error::numeric(format!(
            "marginals carry unequal mass: {sa} vs {sb}"
        )));
    }
    Ok(())
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn ln_or_neg_inf(x: f64) -> f64 {
    if x > 0.0 {
        x.ln()
    } else {
        f64::NEG_INFINITY
    }
}

struct Duals<'a> {
    n: usize,
    m: usize,
    cost: &'a [f64],
    log_a: Vec<f64>,
    log_b: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
}

impl Duals<'_> {
    fn sweep(&mut self, eps: f64) {
        let (n, m, c) = (self.n, self.m, self.cost);
        for i in 0..n {
            let g = &self.g;
            let lse = log_sum_exp((0..m).map(|j| (g[j] - c[i * m + j]) / eps));
            self.f[i] = if self.log_a[i].is_finite() {
                eps * (self.log_a[i] - lse)
            } else {
                f64::NEG_INFINITY
            };
        }
        for j in 0..m {
            let f = &self.f;
            let lse = log_sum_exp((0..n).map(|i| (f[i] - c[i * m + j]) / eps));
            self.g[j] = if self.log_b[j].is_finite() {
                eps * (self.log_b[j] - lse)
            } else {
                f64::NEG_INFINITY
            };
        }
    }

    fn plan(&self, eps: f64) -> Vec<f64> {
        let (n, m) = (self.n, self.m);
        let mut p = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let x = (self.f[i] + self.g[j] - self.cost[i * m + j]) / eps;
                p[i * m + j] = if x.is_finite() { x.exp() } else { 0.0 };
            }
        }
        p
    }
}

fn marginal_error(plan: &[f64], n: usize, m: usize, a: &[f64], b: &[f64]) -> f64 {
    let rows = (0..n).map(|i| (plan[i * m..(i + 1) * m].iter().sum::<f64>() - a[i]).abs());
    let cols = (0..m).map(|j| ((0..n).map(|i| plan[i * m + j]).sum::<f64>() - b[j]).abs());
    rows.chain(cols).fold(0.0, f64::max)
}

/// Entropic OT between marginals `a` (n) and `b` (m) with row-major `n×m`
/// cost, solved in the log domain. The regulariser is annealed from the
/// cost scale down to `cfg.epsilon`, warm-starting the duals at each level.
/// On hitting `max_iters` a warning is logged and the iterate with the
/// smallest marginal violation is returned.
pub fn sinkhorn(
    cost: &[f64],
    n: usize,
    m: usize,
    a: &[f64],
    b: &[f64],
    cfg: &SinkhornConfig,
) -> Result<Plan> {
    check_marginals(n, m, cost, a, b)?;
    if !(cfg.epsilon > 0.0) || cfg.max_iters == 0 {
        return Err(Error::config(
            "sinkhorn needs epsilon > 0 and max_iters ≥ 1",
        ));
    }
    let mut d = Duals {
        n,
        m,
        cost,
        log_a: a.iter().map(|&x| ln_or_neg_inf(x)).collect(),
        log_b: b.iter().map(|&x| ln_or_neg_inf(x)).collect(),
        f: vec![0.0; n],
        g: vec![0.0; m],
    };
    let scale = cost.iter().fold(0.0f64, |s, c| s.max(c.abs()));
    let mut eps = scale.max(cfg.epsilon);
    let stage_tol = cfg.tol.max(1e-3);
    let mut used = 0;
    let mut best: Option<(f64, Vec<f64>)> = None;
    loop {
        let last = eps <= cfg.epsilon;
        let mut stage_iters = 0;
        loop {
            d.sweep(eps);
            used += 1;
            stage_iters += 1;
            let p = d.plan(eps);
            let err = marginal_error(&p, n, m, a, b);
            if last {
                if best.as_ref().is_none_or(|(e, _)| err < *e) {
                    best = Some((err, p));
                }
                if err <= cfg.tol || used >= cfg.max_iters {
                    break;
                }
            } else if err <= stage_tol || stage_iters >= 50 || used >= cfg.max_iters {
                break;
            }
        }
        if last || used >= cfg.max_iters {
            if !last {
                // budget ran out during annealing; finish at the target level
                d.sweep(cfg.epsilon);
                let p = d.plan(cfg.epsilon);
                let err = marginal_error(&p, n, m, a, b);
                best = Some((err, p));
            }
            break;
        }
        eps = (eps * 0.5).max(cfg.epsilon);
    }
    let (err, plan) = best.expect("at least one final-level sweep");
    let converged = err <= cfg.tol;
    if !converged {
        log::warn!(
            "sinkhorn stopped after {used} iterations with marginal error {err:.3e} (tol {:.1e})",
            cfg.tol
        );
    }
    let value = plan.iter().zip(cost).map(|(t, c)| t * c).sum();
    Ok(Plan {
        rows: n,
        cols: m,
        plan,
        value,
        iterations: used,
        converged,
        marginal_error: err,
    })
}

const PIVOT_EPS: f64 = 1e-12;

/// Dense tableau simplex for `min cᵀx, A x = r, x ≥ 0` with `r ≥ 0`, using
/// two phases and Bland's rule.
fn simplex(c: &[f64], a: &[Vec<f64>], r: &[f64]) -> Result<f64> {
    let rows = a.len();
    let nv = c.len();
    let width = nv + rows + 1;
    // tableau columns: original vars, artificials, rhs
    let mut t: Vec<Vec<f64>> = (0..rows)
        .map(|i| {
            let mut row = vec![0.0; width];
            row[..nv].copy_from_slice(&a[i]);
            row[nv + i] = 1.0;
            row[width - 1] = r[i];
            row
        })
        .collect();
    let mut basis: Vec<usize> = (nv..nv + rows).collect();

    let run = |t: &mut Vec<Vec<f64>>,
               basis: &mut Vec<usize>,
               cost: &[f64],
               allowed: usize|
     -> Result<()> {
        for _ in 0..10_000 {
            // reduced costs
            let entering = (0..allowed).find(|&j| {
                if basis.contains(&j) {
                    return false;
                }
                let z: f64 = (0..t.len()).map(|i| cost[basis[i]] * t[i][j]).sum();
                cost[j] - z < -1e-10
            });
            let Some(j) = entering else { return Ok(()) };
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..t.len() {
                if t[i][j] > PIVOT_EPS {
                    let ratio = t[i][width - 1] / t[i][j];
                    match leave {
                        Some((li, lr))
                            if ratio > lr + 1e-12
                                || (ratio >= lr - 1e-12 && basis[i] > basis[li]) => {}
                        _ => leave = Some((i, ratio)),
                    }
                }
            }
            let Some((li, _)) = leave else {
                return Err(Error::numeric("transport LP is unbounded"));
            };
            pivot(t, li, j);
            basis[li] = j;
        }
        Err(Error::numeric("simplex iteration limit reached"))
    };

    let mut phase1 = vec![0.0; nv + rows];
    phase1[nv..].iter_mut().for_each(|v| *v = 1.0);
    run(&mut t, &mut basis, &phase1, nv + rows)?;
    let infeas: f64 = (0..rows)
        .filter(|&i| basis[i] >= nv)
        .map(|i| t[i][width - 1])
        .sum();
    if infeas > 1e-9 {
        return Err(Error::numeric("transport LP is infeasible"));
    }
    // drive zero-level artificials out of the basis; drop redundant rows
    let mut i = 0;
    while i < t.len() {
        if basis[i] >= nv {
            if let Some(j) = (0..nv).find(|&j| t[i][j].abs() > PIVOT_EPS) {
                pivot(&mut t, i, j);
                basis[i] = j;
            } else {
                t.remove(i);
                basis.remove(i);
                continue;
            }
        }
        i += 1;
    }
    let mut phase2 = c.to_vec();
    phase2.extend(std::iter::repeat_n(0.0, rows));
    run(&mut t, &mut basis, &phase2, nv)?;
    Ok((0..t.len()).map(|i| c[basis[i]] * t[i][width - 1]).sum())
}

fn pivot(t: &mut [Vec<f64>], r: usize, c: usize) {
    let p = t[r][c];
    t[r].iter_mut().for_each(|v| *v /= p);
    let pr = t[r].clone();
    for (i, row) in t.iter_mut().enumerate() {
        if i != r {
            let f = row[c];
            if f != 0.0 {
                row.iter_mut().zip(&pr).for_each(|(v, &q)| *v -= f * q);
            }
        }
    }
}

/// Exact optimal transport value by linear programming. Limited to
/// `n·m ≤ 25`.
pub fn exact_ot_oracle(cost: &[f64], n: usize, m: usize, a: &[f64], b: &[f64]) -> Result<f64> {
    check_marginals(n, m, cost, a, b)?;
    if n * m > 25 {
        return Err(Error::shape(format!(
            "exact OT limited to 25 cells, got {n}×{m}"
        )));
    }
    // row sums for every i, column sums for all but the last j (implied)
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n + m - 1);
    let mut rhs = Vec::with_capacity(n + m - 1);
    for i in 0..n {
        let mut r = vec![0.0; n * m];
        r[i * m..(i + 1) * m].iter_mut().for_each(|v| *v = 1.0);
        rows.push(r);
        rhs.push(a[i]);
    }
    for j in 0..m - 1 {
        let mut r = vec![0.0; n * m];
        (0..n).for_each(|i| r[i * m + j] = 1.0);
        rows.push(r);
        rhs.push(b[j]);
    }
    simplex(cost, &rows, &rhs)
}
