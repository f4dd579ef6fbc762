//! The training objective: soft nearest-neighbour predictions against a
//! labeled support set, sharpened stop-gradient targets, and mean-entropy
//! maximization over the batch.

use crate::autodiff::{Matrix, Tape, Var, LOG_FLOOR, NORM_EPS};
use crate::error::{PawsError, Result};

/// Support representations and their (possibly smoothed) label rows.
#[derive(Clone, Debug)]
pub struct SupportBatch {
    pub z: Var,
    pub labels: Matrix,
    /// Row count per class index, by argmax of the label row.
    pub class_counts: Vec<usize>,
}

impl SupportBatch {
    pub fn new(tape: &Tape, z: Var, labels: Matrix) -> Result<Self> {
        let m = tape.value(z).rows();
        if m == 0 || labels.rows() == 0 {
            return Err(PawsError::Config("empty support batch".into()));
        }
        if labels.rows() != m {
            return Err(PawsError::Shape(format!("{m} support representations but {} label rows", labels.rows())));
        }
        for (r, s) in labels.row_sums().into_iter().enumerate() {
            if (s - 1.0).abs() > 1e-9 {
                return Err(PawsError::Validation(format!("support label row {r} sums to {s}")));
            }
        }
        let mut class_counts = vec![0; labels.cols()];
        for r in 0..labels.rows() {
            class_counts[labels.argmax_row(r)] += 1;
        }
        Ok(Self { z, labels, class_counts })
    }

    /// Classes with at least one support row.
    pub fn classes_present(&self) -> usize {
        self.class_counts.iter().filter(|&&c| c > 0).count()
    }

    /// Equal number of rows for every represented class.
    pub fn is_balanced(&self) -> bool {
        let mut present = self.class_counts.iter().filter(|&&c| c > 0);
        match present.next() {
            Some(&first) => present.all(|&c| c == first),
            None => false,
        }
    }

    pub fn per_class_count(&self) -> Option<usize> {
        self.is_balanced().then(|| self.class_counts.iter().copied().find(|&c| c > 0).unwrap_or(0))
    }
}

/// `p = softmax(ẑ·ẑ_Sᵀ / τ) · y_S` with rows of `z` and `z_S` L2-normalized.
///
/// Differentiable with respect to both `z` and the support representations.
pub fn similarity_classifier(tape: &mut Tape, z: Var, support: &SupportBatch, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(PawsError::Domain(format!("similarity temperature must be > 0, got {tau}")));
    }
    let (dz, ds) = (tape.value(z).cols(), tape.value(support.z).cols());
    if dz != ds {
        return Err(PawsError::Shape(format!("representations have dimension {dz} but support has {ds}")));
    }
    let zn = tape.row_l2_normalize(z, NORM_EPS);
    let sn = tape.row_l2_normalize(support.z, NORM_EPS);
    let sims = tape.matmul_bt(zn, sn)?;
    let weights = tape.softmax_rows(sims, tau)?;
    let labels = tape.constant(support.labels.clone());
    tape.matmul(weights, labels)
}

fn check_sharpen_args(p: &Matrix, t: f64) -> Result<()> {
    if !(t > 0.0) {
        return Err(PawsError::Domain(format!("sharpening temperature must be > 0, got {t}")));
    }
    for r in 0..p.rows() {
        if p.row(r).iter().all(|&x| x == 0.0) {
            return Err(PawsError::Validation(format!("cannot sharpen all-zero row {r}")));
        }
    }
    Ok(())
}

/// `[ρ(p)]_k = p_k^{1/T} / Σ_j p_j^{1/T}` per row, as a constant.
pub fn sharpen(p: &Matrix, t: f64) -> Result<Matrix> {
    check_sharpen_args(p, t)?;
    if t == 1.0 {
        return Ok(p.clone());
    }
    let inv = 1.0 / t;
    let mut out = p.map(|x| (inv * x.max(LOG_FLOOR).ln()).exp());
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    Ok(out)
}

/// Sharpening recorded on the tape, so gradient flows through it.
pub fn sharpen_var(tape: &mut Tape, p: Var, t: f64) -> Result<Var> {
    check_sharpen_args(tape.value(p), t)?;
    let powered = tape.pow(p, 1.0 / t, LOG_FLOOR)?;
    tape.normalize_row_sum(powered)
}

/// Shannon entropy of each row.
pub fn row_entropies(p: &Matrix) -> Vec<f64> {
    (0..p.rows()).map(|r| p.row(r).iter().filter(|&&x| x > 0.0).map(|&x| -x * x.max(LOG_FLOOR).ln()).sum()).collect()
}

/// `H(q) = -Σ q_k log q_k` of a 1×K (or any) matrix node, as a scalar node.
pub fn entropy_node(tape: &mut Tape, q: Var) -> Result<Var> {
    let logq = tape.log(q, LOG_FLOOR);
    let prod = tape.hadamard(q, logq)?;
    let s = tape.sum(prod);
    Ok(tape.scale(s, -1.0))
}

/// How the mean-entropy term reaches the predictions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MeMaxVariant {
    /// `p̄` averages sharpened predictions, with sharpening recorded on the tape.
    Differentiable,
    /// `p̄` averages the raw predictions; sharpened values are never differentiated.
    Detached,
}

impl std::str::FromStr for MeMaxVariant {
    type Err = PawsError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "differentiable" => Ok(Self::Differentiable),
            "detached" => Ok(Self::Detached),
            _ => Err(PawsError::Config(format!("unknown me_max variant {s:?} (expected differentiable or detached)"))),
        }
    }
}

impl std::fmt::Display for MeMaxVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Differentiable => "differentiable",
            Self::Detached => "detached",
        })
    }
}

/// `H(p̄)` over every prediction batch in `predictions`, as a graph node.
pub fn me_max_regularizer(tape: &mut Tape, predictions: &[Var], t: f64, variant: MeMaxVariant) -> Result<Var> {
    if predictions.is_empty() {
        return Err(PawsError::Config("me-max needs at least one prediction batch".into()));
    }
    let parts = match variant {
        MeMaxVariant::Differentiable => {
            predictions.iter().map(|&p| sharpen_var(tape, p, t)).collect::<Result<Vec<_>>>()?
        }
        MeMaxVariant::Detached => predictions.to_vec(),
    };
    let all = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
    let p_bar = tape.mean_rows(all);
    entropy_node(tape, p_bar)
}

/// `weight · (1/n) Σ_i H(p_i)`.
pub fn entropy_minimization_term(tape: &mut Tape, p: Var, weight: f64) -> Result<Var> {
    if weight < 0.0 {
        return Err(PawsError::Domain(format!("entropy weight must be >= 0, got {weight}")));
    }
    let n = tape.value(p).rows().max(1) as f64;
    let logp = tape.log(p, LOG_FLOOR);
    let prod = tape.hadamard(p, logp)?;
    let s = tape.sum(prod);
    Ok(tape.scale(s, -weight / n))
}

/// Replaces target rows of labeled anchors by their label rows.
///
/// `labels[i]` is `Some(row)` when anchor `i` carries a label.
pub fn semi_supervised_target_override(targets: &Matrix, labels: &[Option<Vec<f64>>]) -> Result<Matrix> {
    if labels.len() != targets.rows() {
        return Err(PawsError::Shape(format!("{} label entries for {} predictions", labels.len(), targets.rows())));
    }
    let mut out = targets.clone();
    for (i, l) in labels.iter().enumerate() {
        if let Some(row) = l {
            if row.len() != targets.cols() {
                return Err(PawsError::Shape(format!(
                    "label row {i} has {} entries, predictions have {}",
                    row.len(),
                    targets.cols()
                )));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 || row.iter().any(|&x| x < 0.0) {
                return Err(PawsError::Validation(format!("label row {i} is not a distribution")));
            }
            out.row_mut(i).copy_from_slice(row);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct LossOptions {
    pub sharpen_t: f64,
    /// `None` disables the mean-entropy term.
    pub me_max: Option<MeMaxVariant>,
    pub entropy_min_weight: f64,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self { sharpen_t: 0.25, me_max: Some(MeMaxVariant::Differentiable), entropy_min_weight: 0.0 }
    }
}

#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub total: Var,
    pub consistency: f64,
    /// `H(p̄)`; zero when disabled.
    pub me_max: f64,
    pub entropy_min: f64,
    /// Average sharpened prediction over all views.
    pub p_bar: Matrix,
    /// Sharpened targets of the two global views.
    pub global_targets: [Matrix; 2],
}

/// Two-view objective: symmetric cross-entropy against sharpened, detached
/// targets minus `H(p̄)`.
pub fn paws_loss_two_view(
    tape: &mut Tape,
    p_anchor: Var,
    p_positive: Var,
    opts: &LossOptions,
) -> Result<LossBreakdown> {
    paws_loss_multicrop(tape, [p_anchor, p_positive], &[], opts, None)
}

/// Multi-crop objective with two global views and any number of local views.
///
/// Each global view targets the sharpened prediction of the other; each local
/// view targets the average of both sharpened global predictions. The
/// consistency sum is divided by the number of views times the batch size.
pub fn paws_loss_multicrop(
    tape: &mut Tape,
    globals: [Var; 2],
    locals: &[Var],
    opts: &LossOptions,
    anchor_labels: Option<&[Option<Vec<f64>>]>,
) -> Result<LossBreakdown> {
    let shape = tape.value(globals[0]).shape();
    for &v in globals.iter().chain(locals) {
        let s = tape.value(v).shape();
        if s != shape {
            return Err(PawsError::Shape(format!(
                "prediction batches differ: {}x{} vs {}x{}",
                shape.0, shape.1, s.0, s.1
            )));
        }
    }
    let t = opts.sharpen_t;
    let mut sharp = [sharpen(tape.value(globals[0]), t)?, sharpen(tape.value(globals[1]), t)?];
    if let Some(labels) = anchor_labels {
        for s in &mut sharp {
            *s = semi_supervised_target_override(s, labels)?;
        }
    }
    let avg = sharp[0].add(&sharp[1])?.scale(0.5);

    let views = (2 + locals.len()) as f64;
    let mut terms = Vec::with_capacity(2 + locals.len());
    terms.push(tape.cross_entropy_rows(&sharp[1], globals[0], LOG_FLOOR)?);
    terms.push(tape.cross_entropy_rows(&sharp[0], globals[1], LOG_FLOOR)?);
    for &l in locals {
        terms.push(tape.cross_entropy_rows(&avg, l, LOG_FLOOR)?);
    }
    let stacked = tape.concat_rows(&terms)?;
    let ce_sum = tape.sum(stacked);
    let consistency = tape.scale(ce_sum, 1.0 / views);
    let consistency_value = tape.value(consistency).item();

    let all: Vec<Var> = globals.iter().chain(locals).copied().collect();
    let mut sharpened_all = Vec::with_capacity(all.len());
    for &v in &all {
        sharpened_all.push(sharpen(tape.value(v), t)?);
    }
    let refs: Vec<&Matrix> = sharpened_all.iter().collect();
    let p_bar = Matrix::vstack(&refs)?.mean_rows();

    let mut total = consistency;
    let mut me_max = 0.0;
    if let Some(variant) = opts.me_max {
        let h = me_max_regularizer(tape, &all, t, variant)?;
        me_max = tape.value(h).item();
        total = tape.sub(total, h)?;
    }
    let mut entropy_min = 0.0;
    if opts.entropy_min_weight > 0.0 {
        let stacked = tape.concat_rows(&all)?;
        let e = entropy_minimization_term(tape, stacked, opts.entropy_min_weight)?;
        entropy_min = tape.value(e).item();
        total = tape.add(total, e)?;
    }
    Ok(LossBreakdown { total, consistency: consistency_value, me_max, entropy_min, p_bar, global_targets: sharp })
}
