use nalgebra::DMatrix;

use super::params::{AfaHead, MatcherConfig, MatcherWeights};
use super::MatcherError;
use crate::encoder::{NodeEmbeddings, LEAKY_SLOPE};
use crate::training::{Tape, Var};

/// Variance guard of the instance normalization.
pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Zero mean and unit variance over all entries.
pub fn instance_norm_on<'t>(a: &Var<'t>) -> Var<'t> {
    let centered = a.sub(&a.mean());
    let var = centered.mul(&centered).mean();
    centered.mul(&var.add_const(INSTANCE_NORM_EPS).powf(-0.5))
}

/// Raw bilinear affinity `F_S_ref·W_s·F_S_srcᵀ (+ F_P_ref·W_p·F_P_srcᵀ)`.
pub fn bilinear_affinity_on<'t>(
    fs_ref: &Var<'t>,
    fp_ref: Option<&Var<'t>>,
    fs_src: &Var<'t>,
    fp_src: Option<&Var<'t>>,
    w: &MatcherWeights<Var<'t>>,
) -> Var<'t> {
    let mut a = fs_ref.matmul(&w.w_s).matmul(&fs_src.transpose());
    if let (Some(wp), Some(pr), Some(ps)) = (&w.w_p, fp_ref, fp_src) {
        a = a.add(&pr.matmul(wp).matmul(&ps.transpose()));
    }
    a
}

/// Log-domain Sinkhorn on `scores / temperature` augmented with a zero
/// dummy row and column. Rows are normalized over all columns (dummy
/// included) except the dummy row; columns likewise except the dummy
/// column. The dummy-dummy corner is unconstrained and set to zero.
pub fn sinkhorn_on<'t>(scores: &Var<'t>, iters: usize, temperature: f64) -> Var<'t> {
    let tape = scores.tape();
    let (r, c) = scores.shape();
    let z = scores.scale(1.0 / temperature);
    let z = Var::hcat(&[z, tape.constant(DMatrix::zeros(r, 1))]);
    let mut z = Var::vcat(&[z, tape.constant(DMatrix::zeros(1, c + 1))]);
    for _ in 0..iters {
        z = z.log_normalize_rows(r).log_normalize_cols(c);
    }
    let mut mask = DMatrix::from_element(r + 1, c + 1, 1.0);
    mask[(r, c)] = 0.0;
    z.exp().mul(&tape.constant(mask))
}

/// Embedding agreement `exp(−‖û_i − v̂_j‖² / bandwidth)` of unit-normalized
/// rows, `M_src × M_ref`.
pub fn agreement_on<'t>(f_src: &Var<'t>, f_ref: &Var<'t>, bandwidth: f64) -> Var<'t> {
    let unit = |f: &Var<'t>| f.mul(&f.mul(f).row_sum().add_const(1e-12).powf(-0.5));
    let cos = unit(f_src).matmul(&unit(f_ref).transpose());
    cos.scale(2.0 / bandwidth).add_const(-2.0 / bandwidth).exp()
}

/// Similarity score k̃ from the interior of a soft matrix and the
/// agreement of the matched embeddings.
pub fn afa_on<'t>(soft: &Var<'t>, agreement: &Var<'t>, head: &AfaHead<Var<'t>>) -> Var<'t> {
    let (m_src, m_ref) = agreement.shape();
    if m_src == 0 || m_ref == 0 {
        return head.b_out.sigmoid();
    }
    let interior = soft.slice(0, 0, m_src, m_ref);
    let mass = interior.row_sum();
    let peak = interior.mul(&interior).row_sum();
    let agree = interior.mul(agreement).row_sum();
    let hidden = mass
        .matmul(&head.w_value)
        .add(&peak.matmul(&head.w_edge))
        .add(&agree.matmul(&head.w_agree))
        .add(&head.bias)
        .leaky_relu(LEAKY_SLOPE);
    hidden
        .col_sum()
        .scale(1.0 / m_src.min(m_ref) as f64)
        .matmul(&head.w_out)
        .add(&head.b_out)
        .sigmoid()
}

fn fused_on<'t>(fs: &Var<'t>, fp: Option<&Var<'t>>) -> Var<'t> {
    match fp {
        Some(p) => Var::hcat(&[*fs, *p]),
        None => *fs,
    }
}

/// Recorded `(S̃, k̃)` from both sides' embeddings, with a fixed number of
/// unrolled Sinkhorn passes.
#[allow(clippy::too_many_arguments)]
pub fn match_on<'t>(
    fs_src: &Var<'t>,
    fp_src: Option<&Var<'t>>,
    fs_ref: &Var<'t>,
    fp_ref: Option<&Var<'t>>,
    w: &MatcherWeights<Var<'t>>,
    cfg: &MatcherConfig,
    iters: usize,
) -> (Var<'t>, Var<'t>) {
    let a = instance_norm_on(&bilinear_affinity_on(fs_ref, fp_ref, fs_src, fp_src, w));
    let soft = sinkhorn_on(&a.transpose(), iters, cfg.temperature);
    let agreement = agreement_on(&fused_on(fs_src, fp_src), &fused_on(fs_ref, fp_ref), cfg.afa_bandwidth);
    let k = afa_on(&soft, &agreement, &w.afa);
    (soft, k)
}

fn check_width(what: &'static str, w: &DMatrix<f64>, f: &DMatrix<f64>) -> Result<(), MatcherError> {
    if w.nrows() != f.ncols() {
        return Err(MatcherError::DimensionMismatch {
            what,
            expected: w.nrows(),
            found: f.ncols(),
        });
    }
    Ok(())
}

/// Instance-normalized affinity A (M_ref × M_src).
pub fn affinity(f_ref: &NodeEmbeddings, f_src: &NodeEmbeddings, params: &MatcherWeights<DMatrix<f64>>) -> Result<DMatrix<f64>, MatcherError> {
    check_width("semantic width", &params.w_s, &f_ref.semantic)?;
    check_width("semantic width", &params.w_s, &f_src.semantic)?;
    let use_geo = match &params.w_p {
        Some(wp) if f_ref.geometric.ncols() > 0 || f_src.geometric.ncols() > 0 => {
            check_width("geometric width", wp, &f_ref.geometric)?;
            check_width("geometric width", wp, &f_src.geometric)?;
            true
        }
        _ => false,
    };
    let tape = Tape::new();
    let w = params.map("", &mut |_, m| tape.constant(m.clone()));
    let c = |m: &DMatrix<f64>| tape.constant(m.clone());
    let (fsr, fss) = (c(&f_ref.semantic), c(&f_src.semantic));
    let (fpr, fps) = (c(&f_ref.geometric), c(&f_src.geometric));
    let a = if use_geo {
        bilinear_affinity_on(&fsr, Some(&fpr), &fss, Some(&fps), &w)
    } else {
        bilinear_affinity_on(&fsr, None, &fss, None, &w)
    };
    Ok(instance_norm_on(&a).value())
}

/// Soft assignment `(rows+1) × (cols+1)` of a score matrix, with the dummy
/// row and column last. Rows and columns other than the dummies sum to 1;
/// the dummy-dummy corner is unconstrained and reported as 0.
pub fn sinkhorn_with_dummy(scores: &DMatrix<f64>, cfg: &MatcherConfig) -> DMatrix<f64> {
    super::sinkhorn::solve(scores, cfg.sinkhorn_iters, cfg.temperature)
}

/// k̃ of a soft matrix given both sides' fused embeddings.
pub fn afa_similarity(
    soft: &DMatrix<f64>,
    f_src: &DMatrix<f64>,
    f_ref: &DMatrix<f64>,
    cfg: &MatcherConfig,
    params: &MatcherWeights<DMatrix<f64>>,
) -> Result<f64, MatcherError> {
    let (m_src, m_ref) = (f_src.nrows(), f_ref.nrows());
    if soft.shape() != (m_src + 1, m_ref + 1) {
        return Err(MatcherError::DimensionMismatch {
            what: "soft matrix rows",
            expected: m_src + 1,
            found: soft.nrows(),
        });
    }
    if f_src.ncols() != f_ref.ncols() {
        return Err(MatcherError::DimensionMismatch {
            what: "embedding width",
            expected: f_src.ncols(),
            found: f_ref.ncols(),
        });
    }
    let tape = Tape::new();
    let head = params.afa.map("", &mut |_, m| tape.constant(m.clone()));
    let agreement = agreement_on(&tape.constant(f_src.clone()), &tape.constant(f_ref.clone()), cfg.afa_bandwidth);
    Ok(afa_on(&tape.constant(soft.clone()), &agreement, &head).scalar())
}

/// `round_half_up(k̃·M_ref)` clamped to `[0, min(M_src, M_ref)]`.
pub fn selection_size(k_tilde: f64, m_src: usize, m_ref: usize) -> usize {
    let k = (k_tilde * m_ref as f64 + 0.5).floor();
    if k.is_nan() || k <= 0.0 {
        0
    } else {
        (k as usize).min(m_src.min(m_ref))
    }
}

/// Greedy one-to-one selection of the K largest interior entries; ties go
/// to the smaller `(row, column)`. Returns `(src, ref, score)`.
pub fn topk_select(soft: &DMatrix<f64>, k_tilde: f64, m_ref: usize) -> Vec<(usize, usize, f64)> {
    let m_src = soft.nrows().saturating_sub(1);
    let m_ref = m_ref.min(soft.ncols().saturating_sub(1));
    let k = selection_size(k_tilde, m_src, m_ref);
    let mut cells: Vec<(usize, usize)> = (0..m_src).flat_map(|i| (0..m_ref).map(move |j| (i, j))).collect();
    cells.sort_by(|&a, &b| soft[b].total_cmp(&soft[a]).then(a.cmp(&b)));
    let mut row_used = vec![false; m_src];
    let mut col_used = vec![false; m_ref];
    let mut out = Vec::with_capacity(k);
    for (i, j) in cells {
        if out.len() == k {
            break;
        }
        if !row_used[i] && !col_used[j] {
            row_used[i] = true;
            col_used[j] = true;
            out.push((i, j, soft[(i, j)]));
        }
    }
    out
}
