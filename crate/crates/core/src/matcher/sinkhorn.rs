use nalgebra::{DMatrix, DVector};

/// Marginal tolerance the inference solver finishes to.
pub const SINKHORN_TOL: f64 = 1e-10;
const NEWTON_MAX_STEPS: usize = 60;

fn logsumexp(vals: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = vals.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + vals.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Log-domain matrix `(r+1) × (c+1)` of `scores / temperature` bordered by
/// a zero dummy row and column.
pub(crate) fn augmented_log(scores: &DMatrix<f64>, temperature: f64) -> DMatrix<f64> {
    let (r, c) = scores.shape();
    let mut z = DMatrix::zeros(r + 1, c + 1);
    z.view_mut((0, 0), (r, c)).copy_from(&(scores / temperature));
    z
}

/// One row pass over the first `r` rows and one column pass over the first
/// `c` columns.
pub(crate) fn alternate(z: &mut DMatrix<f64>, r: usize, c: usize) {
    for i in 0..r {
        let lse = logsumexp(z.row(i).iter().copied());
        z.row_mut(i).add_scalar_mut(-lse);
    }
    for j in 0..c {
        let lse = logsumexp(z.column(j).iter().copied());
        z.column_mut(j).add_scalar_mut(-lse);
    }
}

fn exp_without_corner(z: &DMatrix<f64>) -> DMatrix<f64> {
    let (r, c) = (z.nrows() - 1, z.ncols() - 1);
    let mut p = z.map(f64::exp);
    p[(r, c)] = 0.0;
    p
}

/// Largest deviation of a constrained row or column sum from 1.
pub fn marginal_error(p: &DMatrix<f64>) -> f64 {
    let (r, c) = (p.nrows() - 1, p.ncols() - 1);
    let rows = (0..r).map(|i| (p.row(i).sum() - 1.0).abs());
    let cols = (0..c).map(|j| (p.column(j).sum() - 1.0).abs());
    rows.chain(cols).fold(0.0, f64::max)
}

fn shifted(z: &DMatrix<f64>, d: &DVector<f64>, step: f64) -> DMatrix<f64> {
    let (r, c) = (z.nrows() - 1, z.ncols() - 1);
    let mut out = z.clone();
    for i in 0..r {
        out.row_mut(i).add_scalar_mut(step * d[i]);
    }
    for j in 0..c {
        out.column_mut(j).add_scalar_mut(step * d[r + j]);
    }
    out
}

/// Damped Newton on the convex dual of the scaling problem
/// `min Σ exp(z_ij + α_i + β_j) − Σα − Σβ`, whose unique minimizer is the
/// limit of the alternating passes.
pub(crate) fn newton_finish(z: &mut DMatrix<f64>) {
    let (r, c) = (z.nrows() - 1, z.ncols() - 1);
    let objective = |z: &DMatrix<f64>| exp_without_corner(z).sum();
    for _ in 0..NEWTON_MAX_STEPS {
        let p = exp_without_corner(z);
        let mut g = DVector::zeros(r + c);
        let mut h = DMatrix::zeros(r + c, r + c);
        for i in 0..r {
            let s = p.row(i).sum();
            g[i] = s - 1.0;
            h[(i, i)] = s;
        }
        for j in 0..c {
            let s = p.column(j).sum();
            g[r + j] = s - 1.0;
            h[(r + j, r + j)] = s;
        }
        if g.amax() < SINKHORN_TOL {
            return;
        }
        for i in 0..r {
            for j in 0..c {
                h[(i, r + j)] = p[(i, j)];
                h[(r + j, i)] = p[(i, j)];
            }
        }
        let Some(d) = h.cholesky().map(|ch| -ch.solve(&g)) else {
            return;
        };
        let f0 = objective(z);
        let slope = g.dot(&d);
        let mut step = 1.0;
        loop {
            let cand = shifted(z, &d, step);
            if objective(&cand) - step * d.sum() <= f0 + 1e-4 * step * slope || step < 1e-12 {
                *z = cand;
                break;
            }
            step *= 0.5;
        }
    }
}

/// Soft assignment with dummy row and column: `iters` alternating passes,
/// finished by Newton when the marginals are still off by more than
/// [`SINKHORN_TOL`]. The corner is reported as zero.
pub fn solve(scores: &DMatrix<f64>, iters: usize, temperature: f64) -> DMatrix<f64> {
    let (r, c) = scores.shape();
    let mut z = augmented_log(scores, temperature);
    for _ in 0..iters {
        alternate(&mut z, r, c);
    }
    if marginal_error(&exp_without_corner(&z)) > SINKHORN_TOL {
        newton_finish(&mut z);
    }
    exp_without_corner(&z)
}
