//! Relational contrastive and masked-reconstruction objectives.
//!
//! All functions work in `f64` on row-major embedding matrices and return
//! analytic gradients alongside the values, so the trainer can splice them into
//! the autograd tape as fused nodes. Softmax and KL terms go through
//! max-subtracted log-sum-exp.
//!
//! Shapes: queries and positives are `[n, d]`, negatives `[k, d]`. Batched
//! variants average over the `n` rows.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::autograd::{dgemm, View};
use crate::config::InterLoss;
use crate::error::{Error, Result};

/// Temperatures and the KL weight of the relational loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelationalParams {
    pub alpha: f64,
    pub tau_info: f64,
    pub tau_kl: f64,
}

impl RelationalParams {
    pub fn from_config(c: &crate::Config) -> Self {
        RelationalParams {
            alpha: c.alpha,
            tau_info: c.tau_info,
            tau_kl: c.tau_kl,
        }
    }
}

/// Softmax over the similarities of one embedding to every negative.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityDistribution {
    pub probs: Vec<f64>,
}

/// Mean InfoNCE and KL parts of a batch of relational terms.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RelationalTerms {
    pub info: f64,
    pub kl: f64,
    /// `w_info * info + w_kl * kl` with the weights the batch was evaluated with.
    pub loss: f64,
}

/// Gradients of a batched loss with respect to its inputs.
#[derive(Debug, Clone)]
pub struct RelationalGrad {
    pub dq: Array2<f64>,
    pub dp: Array2<f64>,
    pub dnegs: Array2<f64>,
}

fn check_rows(name: &'static str, m: ArrayView2<'_, f64>) -> Result<()> {
    for row in m.rows() {
        let norm_sq: f64 = row.iter().map(|v| v * v).sum();
        if !(norm_sq > 0.0) || !norm_sq.is_finite() {
            return Err(Error::validation(name, "embedding has zero or non-finite norm"));
        }
    }
    Ok(())
}

fn check_shapes(q: ArrayView2<'_, f64>, p: ArrayView2<'_, f64>, negs: ArrayView2<'_, f64>) -> Result<()> {
    if q.dim() != p.dim() {
        return Err(Error::shape(
            "relational loss",
            format!("queries {:?} vs positives {:?}", q.dim(), p.dim()),
        ));
    }
    if negs.ncols() != q.ncols() {
        return Err(Error::shape(
            "relational loss",
            format!("negatives have width {}, queries {}", negs.ncols(), q.ncols()),
        ));
    }
    Ok(())
}

/// `a @ b^T` through dgemm; handles non-contiguous views by copying.
fn dot_rows(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    let a = a.as_standard_layout();
    let b = b.as_standard_layout();
    let (n, d) = a.dim();
    let k = b.nrows();
    let mut out = vec![0.0; n * k];
    dgemm(
        1.0,
        View::row_major(a.as_slice().unwrap(), n, d),
        View::transposed(b.as_slice().unwrap(), k, d),
        0.0,
        &mut out,
    );
    Array2::from_shape_vec((n, k), out).unwrap()
}

/// `coef @ m` for `coef: [n, k]`, `m: [k, d]`.
fn mix_rows(coef: &Array2<f64>, m: ArrayView2<'_, f64>) -> Array2<f64> {
    let m = m.as_standard_layout();
    let (n, k) = coef.dim();
    let d = m.ncols();
    let mut out = vec![0.0; n * d];
    dgemm(
        1.0,
        View::row_major(coef.as_slice().unwrap(), n, k),
        View::row_major(m.as_slice().unwrap(), k, d),
        0.0,
        &mut out,
    );
    Array2::from_shape_vec((n, d), out).unwrap()
}

/// `coef^T @ m` for `coef: [n, k]`, `m: [n, d]`.
fn mix_rows_t(coef: &Array2<f64>, m: ArrayView2<'_, f64>) -> Array2<f64> {
    let m = m.as_standard_layout();
    let (n, k) = coef.dim();
    let d = m.ncols();
    let mut out = vec![0.0; k * d];
    dgemm(
        1.0,
        View::transposed(coef.as_slice().unwrap(), n, k),
        View::row_major(m.as_slice().unwrap(), n, d),
        0.0,
        &mut out,
    );
    Array2::from_shape_vec((k, d), out).unwrap()
}

/// In-place log-softmax of one row; returns nothing, row becomes log-probabilities.
fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    row.iter_mut().for_each(|v| *v -= lse);
}

/// Weighted relational loss over a batch:
/// `mean_i (w_info * L_info(q_i, p_i, n) + w_kl * L_kl(q_i, p_i, n))`.
///
/// Returns the mean InfoNCE and KL parts and gradients of the weighted mean.
pub fn relational_batch(
    q: ArrayView2<'_, f64>,
    p: ArrayView2<'_, f64>,
    negs: ArrayView2<'_, f64>,
    params: &RelationalParams,
    w_info: f64,
    w_kl: f64,
) -> Result<(RelationalTerms, RelationalGrad)> {
    check_shapes(q, p, negs)?;
    let (n, d) = q.dim();
    let k = negs.nrows();
    if n == 0 {
        return Err(Error::precondition("relational loss", "empty query batch"));
    }
    if k == 0 {
        return Err(Error::precondition("relational loss", "no negatives"));
    }
    if w_kl != 0.0 && k < 2 {
        return Err(Error::validation(
            "negatives",
            "similarity distribution needs at least two negatives",
        ));
    }
    if !(params.tau_info > 0.0 && params.tau_kl > 0.0) {
        return Err(Error::validation("tau", "temperatures must be positive"));
    }
    check_rows("query", q)?;
    check_rows("positive", p)?;
    check_rows("negative", negs)?;

    let sim_q = dot_rows(q, negs); // q . n_k
    let sim_p = dot_rows(p, negs); // p . n_k
    let pos: Array1<f64> = q.rows().into_iter().zip(p.rows()).map(|(a, b)| a.dot(&b)).collect();

    let inv_n = 1.0 / n as f64;
    // Coefficients of d(loss)/d(sim_q[i,k]) and d(loss)/d(sim_p[i,k]).
    let mut coef_q = Array2::<f64>::zeros((n, k));
    let mut coef_p = Array2::<f64>::zeros((n, k));
    let mut coef_pos = Array1::<f64>::zeros(n);
    let mut info_sum = 0.0;
    let mut kl_sum = 0.0;

    let mut logits = vec![0.0; k + 1];
    let mut log_q = vec![0.0; k];
    let mut log_p = vec![0.0; k];
    for i in 0..n {
        let sq = sim_q.row(i);
        let sp = sim_p.row(i);

        // InfoNCE over {n_k} and the positive.
        for (l, s) in logits.iter_mut().zip(sq.iter()) {
            *l = s / params.tau_info;
        }
        logits[k] = pos[i] / params.tau_info;
        log_softmax_in_place(&mut logits);
        info_sum += -logits[k];
        if w_info != 0.0 {
            let scale = w_info * inv_n / params.tau_info;
            for j in 0..k {
                coef_q[[i, j]] += scale * logits[j].exp();
            }
            coef_pos[i] += scale * (logits[k].exp() - 1.0);
        }

        // Symmetric KL between the two similarity distributions.
        if k >= 2 {
            for j in 0..k {
                log_q[j] = sq[j] / params.tau_kl;
                log_p[j] = sp[j] / params.tau_kl;
            }
            log_softmax_in_place(&mut log_q);
            log_softmax_in_place(&mut log_p);
            let mut kl = 0.0;
            let mut mean_r_q = 0.0; // <Q, log Q - log P>
            let mut mean_r_p = 0.0; // <P, log P - log Q>
            for j in 0..k {
                let (qj, pj) = (log_q[j].exp(), log_p[j].exp());
                let r = log_q[j] - log_p[j];
                kl += 0.5 * (pj - qj) * (-r);
                mean_r_q += qj * r;
                mean_r_p += pj * (-r);
            }
            kl_sum += kl;
            if w_kl != 0.0 {
                let scale = w_kl * inv_n / params.tau_kl;
                for j in 0..k {
                    let (qj, pj) = (log_q[j].exp(), log_p[j].exp());
                    let r = log_q[j] - log_p[j];
                    let du = 0.5 * (qj - pj) + 0.5 * qj * (r - mean_r_q);
                    let dv = 0.5 * (pj - qj) + 0.5 * pj * (-r - mean_r_p);
                    coef_q[[i, j]] += scale * du;
                    coef_p[[i, j]] += scale * dv;
                }
            }
        }
    }

    // d/dq_i = sum_k coef_q[i,k] n_k + coef_pos[i] p_i, and symmetric for p.
    let mut dq = mix_rows(&coef_q, negs);
    let mut dp = mix_rows(&coef_p, negs);
    for i in 0..n {
        let c = coef_pos[i];
        if c != 0.0 {
            dq.row_mut(i).scaled_add(c, &p.row(i));
            dp.row_mut(i).scaled_add(c, &q.row(i));
        }
    }
    let mut dnegs = mix_rows_t(&coef_q, q);
    dnegs += &mix_rows_t(&coef_p, p);
    debug_assert_eq!(dq.dim(), (n, d));

    let info = info_sum * inv_n;
    let kl = kl_sum * inv_n;
    Ok((
        RelationalTerms {
            info,
            kl,
            loss: w_info * info + w_kl * kl,
        },
        RelationalGrad { dq, dp, dnegs },
    ))
}

fn as_row(v: ArrayView1<'_, f64>) -> ArrayView2<'_, f64> {
    v.insert_axis(Axis(0))
}

/// InfoNCE of one query against its positive and `k` negatives.
pub fn info_nce(
    q: ArrayView1<'_, f64>,
    p: ArrayView1<'_, f64>,
    negs: ArrayView2<'_, f64>,
    tau_info: f64,
) -> Result<f64> {
    info_nce_with_grad(q, p, negs, tau_info).map(|(v, _)| v)
}

pub fn info_nce_with_grad(
    q: ArrayView1<'_, f64>,
    p: ArrayView1<'_, f64>,
    negs: ArrayView2<'_, f64>,
    tau_info: f64,
) -> Result<(f64, RelationalGrad)> {
    let params = RelationalParams {
        alpha: 0.0,
        tau_info,
        tau_kl: 1.0,
    };
    let (t, g) = relational_batch(as_row(q), as_row(p), negs, &params, 1.0, 0.0)?;
    Ok((t.info, g))
}

/// Softmax of `x . n_k / tau_kl` over the negatives only.
pub fn similarity_distribution(
    x: ArrayView1<'_, f64>,
    negs: ArrayView2<'_, f64>,
    tau_kl: f64,
) -> Result<SimilarityDistribution> {
    if negs.nrows() < 2 {
        return Err(Error::validation(
            "negatives",
            "similarity distribution needs at least two negatives",
        ));
    }
    if negs.ncols() != x.len() {
        return Err(Error::shape(
            "similarity distribution",
            format!("negatives width {} vs embedding {}", negs.ncols(), x.len()),
        ));
    }
    if !(tau_kl > 0.0) {
        return Err(Error::validation("tau_kl", "must be positive"));
    }
    check_rows("embedding", as_row(x))?;
    let mut logits: Vec<f64> = negs.rows().into_iter().map(|n| x.dot(&n) / tau_kl).collect();
    log_softmax_in_place(&mut logits);
    Ok(SimilarityDistribution {
        probs: logits.into_iter().map(f64::exp).collect(),
    })
}

/// `0.5 KL(P || Q) + 0.5 KL(Q || P)` of the query and positive similarity distributions.
pub fn kl_symmetric(
    q: ArrayView1<'_, f64>,
    p: ArrayView1<'_, f64>,
    negs: ArrayView2<'_, f64>,
    tau_kl: f64,
) -> Result<f64> {
    kl_symmetric_with_grad(q, p, negs, tau_kl).map(|(v, _)| v)
}

pub fn kl_symmetric_with_grad(
    q: ArrayView1<'_, f64>,
    p: ArrayView1<'_, f64>,
    negs: ArrayView2<'_, f64>,
    tau_kl: f64,
) -> Result<(f64, RelationalGrad)> {
    let params = RelationalParams {
        alpha: 1.0,
        tau_info: 1.0,
        tau_kl,
    };
    let (t, g) = relational_batch(as_row(q), as_row(p), negs, &params, 0.0, 1.0)?;
    Ok((t.kl, g))
}

/// `L_info + alpha * L_kl`.
pub fn relational_loss(
    q: ArrayView1<'_, f64>,
    p: ArrayView1<'_, f64>,
    negs: ArrayView2<'_, f64>,
    params: &RelationalParams,
) -> Result<f64> {
    if !(params.alpha >= 0.0) {
        return Err(Error::validation("alpha", "must be non-negative"));
    }
    let (t, _) = relational_batch(as_row(q), as_row(p), negs, params, 1.0, params.alpha)?;
    Ok(t.loss)
}

/// Half the relational loss of the plain query plus half that of the
/// permutation-enriched query, both against the same positive and negatives.
pub fn enriched_relational_loss(
    q: ArrayView1<'_, f64>,
    q_enriched: ArrayView1<'_, f64>,
    p: ArrayView1<'_, f64>,
    negs: ArrayView2<'_, f64>,
    params: &RelationalParams,
) -> Result<f64> {
    if q.len() != q_enriched.len() {
        return Err(Error::validation(
            "q_enriched",
            format!("width {} does not match query width {}", q_enriched.len(), q.len()),
        ));
    }
    Ok(0.5 * relational_loss(q, p, negs, params)? + 0.5 * relational_loss(q_enriched, p, negs, params)?)
}

/// Per-level breakdown of the enriched relational loss.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LevelTerms {
    /// Mean InfoNCE of the plain queries.
    pub info: f64,
    /// Mean symmetric KL of the plain queries.
    pub kl: f64,
    /// Mean InfoNCE of the enriched queries.
    pub info_enriched: f64,
    /// Mean symmetric KL of the enriched queries.
    pub kl_enriched: f64,
    /// `0.5 L_re(q) + 0.5 L_re(q_e)`, averaged over slots.
    pub ere: f64,
}

/// Inputs of one hierarchy level; rows are slots (frames, subwords or words).
#[derive(Debug, Clone, Copy)]
pub struct LevelBatch<'a> {
    pub q: ArrayView2<'a, f64>,
    /// Unshuffled embeddings of the permuted images; `None` uses `q` itself.
    pub q_enriched: Option<ArrayView2<'a, f64>>,
    pub p: ArrayView2<'a, f64>,
    pub negs: ArrayView2<'a, f64>,
}

/// Level loss with gradients for `q` and the enriched queries.
#[derive(Debug, Clone)]
pub struct LevelOutput {
    pub terms: LevelTerms,
    pub dq: Array2<f64>,
    pub dq_enriched: Option<Array2<f64>>,
}

/// Slot-averaged enriched relational loss of one hierarchy level.
pub fn level_loss(batch: &LevelBatch<'_>, params: &RelationalParams) -> Result<LevelOutput> {
    if batch.negs.nrows() < 2 {
        return Err(Error::precondition(
            "hierarchical loss",
            "negative queue holds fewer than two entries",
        ));
    }
    let (plain, g_plain) = relational_batch(batch.q, batch.p, batch.negs, params, 1.0, params.alpha)?;
    match batch.q_enriched {
        Some(qe) => {
            if qe.dim() != batch.q.dim() {
                return Err(Error::validation(
                    "q_enriched",
                    format!("shape {:?} does not match queries {:?}", qe.dim(), batch.q.dim()),
                ));
            }
            let (rich, g_rich) = relational_batch(qe, batch.p, batch.negs, params, 1.0, params.alpha)?;
            Ok(LevelOutput {
                terms: LevelTerms {
                    info: plain.info,
                    kl: plain.kl,
                    info_enriched: rich.info,
                    kl_enriched: rich.kl,
                    ere: 0.5 * plain.loss + 0.5 * rich.loss,
                },
                dq: g_plain.dq * 0.5,
                dq_enriched: Some(g_rich.dq * 0.5),
            })
        }
        None => Ok(LevelOutput {
            terms: LevelTerms {
                info: plain.info,
                kl: plain.kl,
                info_enriched: plain.info,
                kl_enriched: plain.kl,
                ere: plain.loss,
            },
            dq: g_plain.dq,
            dq_enriched: None,
        }),
    }
}

/// Sum of level losses over the enabled levels (absent levels contribute nothing).
#[derive(Debug, Clone, Default)]
pub struct HierarchyOutput {
    /// Indexed by [`crate::config::Level::index`].
    pub levels: [Option<LevelOutput>; 3],
    pub total: f64,
}

/// Evaluates every provided level and sums their `ere` terms.
pub fn hierarchical_loss(levels: [Option<LevelBatch<'_>>; 3], params: &RelationalParams) -> Result<HierarchyOutput> {
    let mut out = HierarchyOutput::default();
    for (slot, batch) in levels.iter().enumerate() {
        if let Some(batch) = batch {
            let lo = level_loss(batch, params)?;
            out.total += lo.terms.ere;
            out.levels[slot] = Some(lo);
        }
    }
    Ok(out)
}

/// Row of the upper level a lower-level slot maps to: slot `f` of `lower_per_image`
/// maps to `floor(f * upper_per_image / lower_per_image)` of the same image.
pub fn upper_slot(row: usize, lower_per_image: usize, upper_per_image: usize) -> usize {
    let image = row / lower_per_image;
    let f = row % lower_per_image;
    image * upper_per_image + f * upper_per_image / lower_per_image
}

/// One inter-hierarchy consistency term and the gradient for its lower-level queries.
#[derive(Debug, Clone)]
pub struct InterOutput {
    pub value: f64,
    pub dq: Array2<f64>,
}

/// Consistency between lower-level queries and their mapped upper-level positives,
/// with negatives from the upper level's queue. The mean is over lower-level rows.
///
/// `lower_q` is `[b * lower_per_image, d]`, `upper_p` is `[b * upper_per_image, d]`.
pub fn inter_level_loss(
    lower_q: ArrayView2<'_, f64>,
    upper_p: ArrayView2<'_, f64>,
    upper_negs: ArrayView2<'_, f64>,
    lower_per_image: usize,
    upper_per_image: usize,
    kind: InterLoss,
    params: &RelationalParams,
) -> Result<InterOutput> {
    if upper_negs.nrows() < 2 {
        return Err(Error::precondition(
            "inter-hierarchy loss",
            "upper-level queue holds fewer than two entries",
        ));
    }
    if lower_per_image == 0 || upper_per_image == 0 || lower_per_image % upper_per_image != 0 {
        return Err(Error::validation(
            "T_subwords",
            format!("{lower_per_image} lower slots do not split into {upper_per_image}"),
        ));
    }
    let images = lower_q.nrows() / lower_per_image;
    if images * lower_per_image != lower_q.nrows() || upper_p.nrows() != images * upper_per_image {
        return Err(Error::shape(
            "inter-hierarchy loss",
            format!(
                "{} lower rows and {} upper rows for {} + {} slots per image",
                lower_q.nrows(),
                upper_p.nrows(),
                lower_per_image,
                upper_per_image
            ),
        ));
    }
    let mapped: Vec<usize> = (0..lower_q.nrows())
        .map(|r| upper_slot(r, lower_per_image, upper_per_image))
        .collect();
    let positives = upper_p.select(Axis(0), &mapped);
    let (w_info, w_kl) = match kind {
        InterLoss::Kl => (0.0, 1.0),
        InterLoss::InfoNce => (1.0, 0.0),
        InterLoss::Re => (1.0, params.alpha),
    };
    let (terms, grad) = relational_batch(lower_q, positives.view(), upper_negs, params, w_info, w_kl)?;
    Ok(InterOutput {
        value: terms.loss,
        dq: grad.dq,
    })
}

/// Both inter-hierarchy terms of a batch.
#[derive(Debug, Clone)]
pub struct InterHierarchyOutput {
    pub f2s: InterOutput,
    pub s2w: InterOutput,
}

/// Frame-to-subword and subword-to-word consistency.
///
/// `frame_q` is `[b * frames, d]`, `subword_q` and `subword_p` are
/// `[b * subwords, d]`, `word_p` is `[b, d]`.
#[allow(clippy::too_many_arguments)]
pub fn inter_hierarchy_loss(
    frame_q: ArrayView2<'_, f64>,
    subword_q: ArrayView2<'_, f64>,
    subword_p: ArrayView2<'_, f64>,
    word_p: ArrayView2<'_, f64>,
    subword_negs: ArrayView2<'_, f64>,
    word_negs: ArrayView2<'_, f64>,
    frames: usize,
    subwords: usize,
    kind: InterLoss,
    params: &RelationalParams,
) -> Result<InterHierarchyOutput> {
    let f2s = inter_level_loss(frame_q, subword_p, subword_negs, frames, subwords, kind, params)?;
    let s2w = inter_level_loss(subword_q, word_p, word_negs, subwords, 1, kind, params)?;
    Ok(InterHierarchyOutput { f2s, s2w })
}

/// Intra-hierarchy sum plus both inter-hierarchy terms.
pub fn rcl_total(hierarchical: f64, f2s: f64, s2w: f64) -> f64 {
    hierarchical + f2s + s2w
}

/// `L_mim + beta * L_rcl`.
pub fn total_loss(mim: f64, rcl: f64, beta: f64) -> f64 {
    mim + beta * rcl
}

/// Masked reconstruction error and its gradients.
#[derive(Debug, Clone)]
pub struct MimOutput {
    pub value: f64,
    pub masked_pixels: usize,
    pub dpred: Vec<f64>,
    pub dtarget: Vec<f64>,
}

/// Mean squared error over masked pixels: `1 / (3 N) * sum_masked sum_rgb (x - y)^2`.
///
/// `pred` and `target` are `[b, 3, h, w]`; `pixel_mask` is `[b, h, w]` with
/// `true` for masked pixels. An empty mask yields 0 and a logged warning.
pub fn mim_loss(pred: &[f64], target: &[f64], pixel_mask: &[bool], plane: usize) -> Result<MimOutput> {
    if pred.len() != target.len() {
        return Err(Error::shape(
            "mim loss",
            format!("prediction {} vs target {}", pred.len(), target.len()),
        ));
    }
    if plane == 0 || pixel_mask.len() % plane != 0 || pixel_mask.len() * 3 != pred.len() {
        return Err(Error::shape(
            "mim loss",
            format!(
                "mask of {} pixels does not cover {} channel values",
                pixel_mask.len(),
                pred.len()
            ),
        ));
    }
    let masked = pixel_mask.iter().filter(|m| **m).count();
    let mut dpred = vec![0.0; pred.len()];
    if masked == 0 {
        log::warn!("mim loss evaluated with an empty mask; returning 0");
        return Ok(MimOutput {
            value: 0.0,
            masked_pixels: 0,
            dtarget: dpred.clone(),
            dpred,
        });
    }
    let norm = 1.0 / (3.0 * masked as f64);
    let mut sum = 0.0;
    let images = pixel_mask.len() / plane;
    for b in 0..images {
        let m = &pixel_mask[b * plane..(b + 1) * plane];
        for c in 0..3 {
            let off = (b * 3 + c) * plane;
            for (j, _) in m.iter().enumerate().filter(|(_, v)| **v) {
                let diff = pred[off + j] - target[off + j];
                sum += diff * diff;
                dpred[off + j] = 2.0 * diff * norm;
            }
        }
    }
    let dtarget = dpred.iter().map(|v| -v).collect();
    Ok(MimOutput {
        value: sum * norm,
        masked_pixels: masked,
        dpred,
        dtarget,
    })
}
