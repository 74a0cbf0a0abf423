use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};

/// Floor on the denominator of the relative error. A central difference at
/// step 1e-5 on an O(1) loss carries round-off near 1e-10, so smaller
/// gradients are compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-5;

/// Outcome of a gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Worst `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// Coordinates compared.
    pub probed: usize,
    /// Coordinates skipped because the ±step stencil changed the branch of
    /// a non-smooth op.
    pub skipped_at_kinks: usize,
}

/// Compares tape gradients with central finite differences and returns the
/// worst relative error.
///
/// `f` records a scalar from the given parameter leaves. At most
/// `max_coords` coordinates per parameter are probed, drawn with `seed`.
/// Coordinates whose stencil crosses a kink are replaced by further draws.
pub fn grad_check<F>(f: F, params: &[DMatrix<f64>], step: f64, max_coords: usize, seed: u64) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    grad_check_report(f, params, step, max_coords, seed).max_rel_error
}

/// [`grad_check`] with the number of probed and skipped coordinates.
pub fn grad_check_report<F>(f: F, params: &[DMatrix<f64>], step: f64, max_coords: usize, seed: u64) -> GradCheckReport
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&tape, &vars);
    let pattern = tape.branch_pattern();
    let grads = tape.backward(&out);
    let analytic: Vec<DMatrix<f64>> = vars.iter().map(|v| grads.wrt(v)).collect();

    let eval = |ps: &[DMatrix<f64>]| {
        let t = Tape::new();
        let vs: Vec<Var<'_>> = ps.iter().map(|p| t.constant(p.clone())).collect();
        let v = f(&t, &vs).scalar();
        (v, t.branch_pattern())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        probed: 0,
        skipped_at_kinks: 0,
    };
    let mut probe = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let n = p.len();
        let mut taken = 0;
        for k in sample(&mut rng, n, n) {
            if taken == max_coords {
                break;
            }
            let orig = p[k];
            probe[pi][k] = orig + step;
            let (up, pat_up) = eval(&probe);
            probe[pi][k] = orig - step;
            let (down, pat_down) = eval(&probe);
            probe[pi][k] = orig;
            if pat_up != pattern || pat_down != pattern {
                report.skipped_at_kinks += 1;
                continue;
            }
            taken += 1;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[pi][k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            report.max_rel_error = report.max_rel_error.max(rel);
        }
        report.probed += taken;
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn check<F>(f: F, params: &[DMatrix<f64>]) -> f64
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
    {
        grad_check(f, params, 1e-5, 64, 1)
    }

    #[test]
    fn quadratic_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = rand_mat(&mut rng, 4, 3);
        let err = check(|_, v| v[0].mul(&v[0]).sum(), &[w]);
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn sigmoid_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = rand_mat(&mut rng, 3, 3);
        let err = check(|_, v| v[0].sigmoid().scale(2.0).sigmoid().add_const(0.5).log().sum(), &[w]);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn matmul_broadcast_and_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ps = [rand_mat(&mut rng, 4, 3), rand_mat(&mut rng, 3, 5), rand_mat(&mut rng, 1, 5), rand_mat(&mut rng, 4, 1)];
        let err = check(
            |t, v| {
                let h = v[0].matmul(&v[1]).add(&v[2]).mul(&v[3]).sub(&t.scalar(0.3));
                let r = h.row_sum().transpose().matmul(&h).matmul(&h.col_sum().transpose());
                r.add(&h.mean()).exp().sum()
            },
            &ps,
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn cat_slice_gather_scatter() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ps = [rand_mat(&mut rng, 3, 2), rand_mat(&mut rng, 3, 4), rand_mat(&mut rng, 2, 6)];
        let err = check(
            |_, v| {
                let h = Var::hcat(&[v[0], v[1]]);
                let s = Var::vcat(&[h, v[2]]).slice(1, 1, 4, 4);
                let g = s.gather_rows(&[3, 0, 0, 2, 1]).scatter_add_rows(&[1, 1, 0, 2, 2], 3);
                g.powf(2.0).sum().add(&s.gather_elems(&[(0, 0), (3, 2), (0, 0)]).sum())
            },
            &ps,
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn segment_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ps = [rand_mat(&mut rng, 7, 1), rand_mat(&mut rng, 7, 3)];
        let seg = [0, 0, 1, 2, 1, 2, 2];
        let err = check(
            |_, v| {
                let a = v[0].segment_softmax(&seg);
                let m = v[1].mul(&a).segment_max(&seg, 3);
                m.leaky_relu(0.2).transpose().matmul(&m).sum()
            },
            &ps,
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn log_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ps = [rand_mat(&mut rng, 4, 5), rand_mat(&mut rng, 4, 5)];
        let err = check(
            |_, v| {
                let mut z = v[0];
                for _ in 0..3 {
                    z = z.log_normalize_rows(3).log_normalize_cols(4);
                }
                z.exp().mul(&v[1]).sum()
            },
            &ps,
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn normalized_rows_sum_to_one() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = tape.constant(rand_mat(&mut rng, 3, 4)).log_normalize_rows(2).exp().value();
        assert!((z.row(0).sum() - 1.0).abs() < 1e-12);
        assert!((z.row(1).sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kinks_are_skipped() {
        let w = DMatrix::from_row_slice(1, 3, &[0.0, 0.5, -0.25]);
        let r = grad_check_report(|_, v| v[0].leaky_relu(0.1).sum(), &[w], 1e-5, 3, 0);
        assert_eq!(r.skipped_at_kinks, 1);
        assert_eq!(r.probed, 2);
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn branch_pattern_tracks_segment_winners() {
        let tape = Tape::new();
        let a = tape.constant(DMatrix::from_row_slice(3, 1, &[1.0, 3.0, 2.0]));
        a.segment_max(&[0, 0, 1], 2).leaky_relu(0.2);
        assert_eq!(tape.branch_pattern(), vec![1, 2, 1, 1]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let a = tape.constant(DMatrix::from_element(2, 2, 1.0));
        let b = tape.param(DMatrix::from_element(2, 2, 2.0));
        let out = a.mul(&b).sum();
        let g = tape.backward(&out);
        assert_eq!(g.wrt(&a), DMatrix::zeros(2, 2));
        assert_eq!(g.wrt(&b), DMatrix::from_element(2, 2, 1.0));
    }
}
