//! Training objectives.
//!
//! Two reconstruction losses and two latent-similarity losses:
//!
//! - **Uni-modal reconstruction (UMR)**: each modality's decoder predicts that
//!   modality's hidden patches from its own visible latents.
//! - **Cross-modal reconstruction (CMR)**: the *other* modality's visible
//!   latents predict this modality's hidden patches.
//! - **Mutual-distance elimination (MDE)**: pulls paired whole-image features
//!   together via `−mean(log(1 + exp(cosine)))` — more aligned pairs give a
//!   more negative loss.
//! - **Mutual-information maximization (MIM)**: a symmetric
//!   temperature-scaled InfoNCE over the batch's paired features. The
//!   denominator either excludes the positive term (`as-written`) or includes
//!   it (`include-positive`, the classical form).
//!
//! Every public function here is a plain array computation with its own
//! validation; the `graph_*` builders express the same math as autograd nodes
//! and are checked against the plain forms to 1e-12.

use ndarray::{Array2, Array3, ArrayView1};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::autograd::{Graph, NodeId};
use crate::backbone::{CsmaeModel, Modality, ModelSession};
use crate::error::{Error, Result};
use crate::masking::{patchify, MaskPlan};

/// Which loss terms participate in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossFlags {
    pub use_umr: bool,
    pub use_cmr: bool,
    pub use_mde: bool,
    pub use_mim: bool,
}

impl Default for LossFlags {
    /// The published final recipe: both reconstruction losses plus MIM.
    fn default() -> Self {
        LossFlags { use_umr: true, use_cmr: true, use_mde: false, use_mim: true }
    }
}

impl LossFlags {
    pub fn any_enabled(&self) -> bool {
        self.use_umr || self.use_cmr || self.use_mde || self.use_mim
    }
}

/// Per-term multipliers applied when summing the total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub umr: f64,
    pub cmr: f64,
    pub mde: f64,
    pub mim: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { umr: 1.0, cmr: 1.0, mde: 1.0, mim: 1.0 }
    }
}

/// Denominator convention for the MIM contrastive term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MimDenominator {
    /// Sum over negatives only (q ≠ i). Requires batches of at least two.
    #[serde(rename = "as-written")]
    AsWritten,
    /// Sum over all pairs including the positive (classical InfoNCE).
    #[serde(rename = "include-positive")]
    IncludePositive,
}

impl fmt::Display for MimDenominator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MimDenominator::AsWritten => "as-written",
            MimDenominator::IncludePositive => "include-positive",
        })
    }
}

impl FromStr for MimDenominator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "as-written" => Ok(MimDenominator::AsWritten),
            "include-positive" => Ok(MimDenominator::IncludePositive),
            other => Err(Error::config(format!(
                "unknown mim denominator '{other}' (expected as-written|include-positive)"
            ))),
        }
    }
}

/// Everything [`loss_total`] needs besides the model and the batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossOptions {
    pub flags: LossFlags,
    pub weights: LossWeights,
    pub tau: f64,
    pub mim_denominator: MimDenominator,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            flags: LossFlags::default(),
            weights: LossWeights::default(),
            tau: 0.5,
            mim_denominator: MimDenominator::AsWritten,
        }
    }
}

/// Per-term loss values for one batch. Disabled terms are absent, not zero.
/// `total` is the weighted sum actually optimized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub umr_1: Option<f64>,
    pub umr_2: Option<f64>,
    pub cmr_1: Option<f64>,
    pub cmr_2: Option<f64>,
    pub mde: Option<f64>,
    pub mim: Option<f64>,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    /// Sum of the enabled reconstruction terms (unweighted).
    pub fn reconstruction_total(&self) -> f64 {
        [self.umr_1, self.umr_2, self.cmr_1, self.cmr_2]
            .into_iter()
            .flatten()
            .sum()
    }

    /// Terms in metrics order: (name, value-if-enabled).
    pub fn named_terms(&self) -> [(&'static str, Option<f64>); 6] {
        [
            ("umr_1", self.umr_1),
            ("umr_2", self.umr_2),
            ("cmr_1", self.cmr_1),
            ("cmr_2", self.cmr_2),
            ("mde", self.mde),
            ("mim", self.mim),
        ]
    }
}

/// Cosine similarity of two equal-length vectors. Zero-norm inputs are an
/// error: a direction cannot be read off them and no epsilon is smuggled in.
pub fn cosine_similarity(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "cosine similarity needs equal lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::shape("cosine similarity of empty vectors"));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::numeric("cosine similarity of a zero-norm vector"));
    }
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

/// Mean squared error over the masked patches only: with P pixels per patch,
/// `(1/(|M|·P)) Σ_{n∈M} ‖pred_n − target_n‖²`. Positions outside the mask
/// contribute nothing.
pub fn loss_masked_reconstruction(
    pred: &Array2<f64>,
    target: &Array2<f64>,
    masked: &[usize],
) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::shape(format!(
            "prediction {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    if masked.is_empty() {
        return Err(Error::config("masked reconstruction over an empty index set"));
    }
    if !masked.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::config("masked indices must be strictly ascending"));
    }
    if *masked.last().unwrap() >= pred.nrows() {
        return Err(Error::config(format!(
            "masked index {} out of range for {} patches",
            masked.last().unwrap(),
            pred.nrows()
        )));
    }
    let p = pred.ncols();
    let mut sum = 0.0;
    for &n in masked {
        for j in 0..p {
            let d = pred[[n, j]] - target[[n, j]];
            sum += d * d;
        }
    }
    Ok(sum / (masked.len() * p) as f64)
}

fn validate_feature_batch(c1: &Array2<f64>, c2: &Array2<f64>) -> Result<()> {
    if c1.dim() != c2.dim() {
        return Err(Error::shape(format!(
            "feature batches differ: {:?} vs {:?}",
            c1.dim(),
            c2.dim()
        )));
    }
    if c1.nrows() == 0 || c1.ncols() == 0 {
        return Err(Error::shape("empty feature batch"));
    }
    Ok(())
}

/// Mutual-distance elimination over paired feature batches (B×d each):
/// `−(1/B) Σ_i log(1 + exp(S(c1_i, c2_i)))`. Always negative; decreases as
/// paired features align.
pub fn loss_mde(c1: &Array2<f64>, c2: &Array2<f64>) -> Result<f64> {
    validate_feature_batch(c1, c2)?;
    let b = c1.nrows();
    let mut sum = 0.0;
    for i in 0..b {
        let s = cosine_similarity(c1.row(i), c2.row(i))?;
        sum += (1.0 + s.exp()).ln();
    }
    Ok(-sum / b as f64)
}

/// Symmetric temperature-scaled contrastive loss over paired feature batches:
/// for each pair index i and direction (j,k),
/// `ℓ^i(j,k) = −log( exp(S(c_i^j, c_i^k)/τ) / Σ_q exp(S(c_i^j, c_q^k)/τ) )`,
/// with the denominator's q ranging per `mode`, averaged as
/// `(1/(2B)) Σ_i ℓ^i(1,2) + ℓ^i(2,1)`.
pub fn loss_mim(
    c1: &Array2<f64>,
    c2: &Array2<f64>,
    tau: f64,
    mode: MimDenominator,
) -> Result<f64> {
    validate_feature_batch(c1, c2)?;
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::config(format!("temperature must be positive, got {tau}")));
    }
    let b = c1.nrows();
    if mode == MimDenominator::AsWritten && b < 2 {
        return Err(Error::config(
            "mim with the as-written denominator needs a batch of at least 2 pairs",
        ));
    }
    // Scaled similarity matrices for both directions.
    let mut s12 = Array2::zeros((b, b));
    for i in 0..b {
        for q in 0..b {
            s12[[i, q]] = cosine_similarity(c1.row(i), c2.row(q))? / tau;
        }
    }
    let exclude = mode == MimDenominator::AsWritten;
    let mut sum = 0.0;
    for direction in 0..2 {
        for i in 0..b {
            // s21[i][q] = S(c2_i, c1_q)/τ = s12[q][i] by cosine symmetry.
            let row: Vec<f64> = (0..b)
                .map(|q| if direction == 0 { s12[[i, q]] } else { s12[[q, i]] })
                .collect();
            let included = row
                .iter()
                .enumerate()
                .filter(|(q, _)| !(exclude && *q == i))
                .map(|(_, v)| *v);
            let max = included.clone().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + included.map(|v| (v - max).exp()).sum::<f64>().ln();
            sum += lse - row[i];
        }
    }
    Ok(sum / (2 * b) as f64)
}

// Graph builders: the same math as node operations, for training.

/// Masked reconstruction as a scalar node. `target` rows at `masked` become a
/// constant leaf, so gradients flow only into `pred` rows at `masked`.
pub(crate) fn graph_masked_reconstruction(
    g: &mut Graph,
    pred: NodeId,
    target: &Array2<f64>,
    masked: &[usize],
) -> NodeId {
    let rows: Vec<usize> = masked.to_vec();
    let picked = g.gather_rows(pred, rows);
    let mut tgt = Array2::zeros((masked.len(), target.ncols()));
    for (i, &n) in masked.iter().enumerate() {
        tgt.row_mut(i).assign(&target.row(n));
    }
    let tgt = g.leaf(tgt);
    let diff = g.sub(picked, tgt);
    let sq = g.mul(diff, diff);
    g.mean_all(sq)
}

/// MDE as a scalar node over feature-batch nodes (B×d each).
pub(crate) fn graph_mde(g: &mut Graph, c1: NodeId, c2: NodeId) -> NodeId {
    let b = g.value(c1).nrows();
    let n1 = g.row_normalize(c1);
    let n2 = g.row_normalize(c2);
    let prod = g.mul(n1, n2);
    let paired = g.row_sum(prod); // B×1 of cosines
    let e = g.exp(paired);
    let e1 = g.add_scalar(e, 1.0);
    let le = g.ln(e1);
    let s = g.sum_all(le);
    g.scale(s, -1.0 / b as f64)
}

/// MIM as a scalar node over feature-batch nodes (B×d each).
pub(crate) fn graph_mim(
    g: &mut Graph,
    c1: NodeId,
    c2: NodeId,
    tau: f64,
    mode: MimDenominator,
) -> NodeId {
    let b = g.value(c1).nrows();
    let exclude = mode == MimDenominator::AsWritten;
    let n1 = g.row_normalize(c1);
    let n2 = g.row_normalize(c2);
    let mut direction_sums = Vec::with_capacity(2);
    for (a, bn) in [(n1, n2), (n2, n1)] {
        let sims = g.matmul_t(a, bn, false, true);
        let scaled = g.scale(sims, 1.0 / tau);
        let pos = g.take_diag(scaled);
        let lse = g.row_log_sum_exp(scaled, exclude);
        let col = g.sub(lse, pos);
        direction_sums.push(g.sum_all(col));
    }
    let both = g.add(direction_sums[0], direction_sums[1]);
    g.scale(both, 1.0 / (2 * b) as f64)
}

/// The full differentiable objective for one batch: per-pair forward passes,
/// batch-pooled features, and the weighted term sum as one graph.
pub struct BatchLoss<'m> {
    pub session: ModelSession<'m>,
    /// The weighted total — the node training backpropagates.
    pub total: NodeId,
    pub breakdown: LossBreakdown,
}

/// Build the combined objective for a batch of image pairs under their mask
/// plans. Validates batch/plan agreement, geometry, temperature, and batch
/// size; checks every enabled term for finiteness and names the first
/// offender otherwise.
pub fn build_batch_loss<'m>(
    model: &'m CsmaeModel,
    batch: &[(&Array3<f64>, &Array3<f64>)],
    plans: &[MaskPlan],
    opts: &LossOptions,
) -> Result<BatchLoss<'m>> {
    if batch.is_empty() {
        return Err(Error::config("loss over an empty batch"));
    }
    if batch.len() != plans.len() {
        return Err(Error::config(format!(
            "{} pairs but {} mask plans",
            batch.len(),
            plans.len()
        )));
    }
    if !opts.flags.any_enabled() {
        return Err(Error::config("no loss terms enabled"));
    }
    if opts.flags.use_mim {
        if !(opts.tau.is_finite() && opts.tau > 0.0) {
            return Err(Error::config(format!("temperature must be positive, got {}", opts.tau)));
        }
        if opts.mim_denominator == MimDenominator::AsWritten && batch.len() < 2 {
            return Err(Error::config(
                "mim with the as-written denominator needs a batch of at least 2 pairs",
            ));
        }
    }
    let cfg = model.config();
    let n = cfg.n_patches();
    for plan in plans {
        if plan.n_patches() != n {
            return Err(Error::config(format!(
                "mask plan covers {} patches, model grid has {n}",
                plan.n_patches()
            )));
        }
    }

    let need_features = opts.flags.use_mde || opts.flags.use_mim;
    let mut sess = ModelSession::new(model);
    let mut umr_terms: (Vec<NodeId>, Vec<NodeId>) = (Vec::new(), Vec::new());
    let mut cmr_terms: (Vec<NodeId>, Vec<NodeId>) = (Vec::new(), Vec::new());
    let mut features: (Vec<NodeId>, Vec<NodeId>) = (Vec::new(), Vec::new());

    for (&(img1, img2), plan) in batch.iter().zip(plans) {
        let grid1 = patchify(img1, cfg.patch_size)?;
        let grid2 = patchify(img2, cfg.patch_size)?;
        let tokens1 = sess.embed(grid1.patches(), Modality::S1)?;
        let tokens2 = sess.embed(grid2.patches(), Modality::S2)?;
        let enc1 = sess.encode(tokens1, &plan.unmasked_1(), Modality::S1)?;
        let enc2 = sess.encode(tokens2, &plan.unmasked_2(), Modality::S2)?;

        if opts.flags.use_umr {
            let pred11 =
                sess.decode(enc1.patch_latents, plan.masked_1(), Modality::S1, Modality::S1)?;
            let pred22 =
                sess.decode(enc2.patch_latents, plan.masked_2(), Modality::S2, Modality::S2)?;
            umr_terms.0.push(graph_masked_reconstruction(
                sess.graph_mut(),
                pred11,
                grid1.patches(),
                plan.masked_1(),
            ));
            umr_terms.1.push(graph_masked_reconstruction(
                sess.graph_mut(),
                pred22,
                grid2.patches(),
                plan.masked_2(),
            ));
        }
        if opts.flags.use_cmr {
            // Reconstruct modality 1's hidden patches from modality 2's
            // latents (and vice versa); scored at the *target's* mask.
            let pred21 =
                sess.decode(enc2.patch_latents, plan.masked_2(), Modality::S2, Modality::S1)?;
            let pred12 =
                sess.decode(enc1.patch_latents, plan.masked_1(), Modality::S1, Modality::S2)?;
            cmr_terms.0.push(graph_masked_reconstruction(
                sess.graph_mut(),
                pred21,
                grid1.patches(),
                plan.masked_1(),
            ));
            cmr_terms.1.push(graph_masked_reconstruction(
                sess.graph_mut(),
                pred12,
                grid2.patches(),
                plan.masked_2(),
            ));
        }
        if need_features {
            let f1 = sess.pooled_feature(&enc1);
            let f2 = sess.pooled_feature(&enc2);
            features.0.push(f1);
            features.1.push(f2);
        }
    }

    let mean_of = |g: &mut Graph, terms: &[NodeId]| -> NodeId {
        let stacked = g.concat_rows(terms);
        g.mean_all(stacked)
    };

    let g = sess.graph_mut();
    let umr = opts
        .flags
        .use_umr
        .then(|| (mean_of(g, &umr_terms.0), mean_of(g, &umr_terms.1)));
    let cmr = opts
        .flags
        .use_cmr
        .then(|| (mean_of(g, &cmr_terms.0), mean_of(g, &cmr_terms.1)));
    let feature_nodes = need_features.then(|| {
        let c1 = g.concat_rows(&features.0);
        let c2 = g.concat_rows(&features.1);
        (c1, c2)
    });
    let mde = opts.flags.use_mde.then(|| {
        let (c1, c2) = feature_nodes.unwrap();
        graph_mde(g, c1, c2)
    });
    let mim = opts.flags.use_mim.then(|| {
        let (c1, c2) = feature_nodes.unwrap();
        graph_mim(g, c1, c2, opts.tau, opts.mim_denominator)
    });

    // Weighted total.
    let mut total: Option<NodeId> = None;
    let mut add_weighted = |g: &mut Graph, node: NodeId, w: f64| {
        let scaled = g.scale(node, w);
        total = Some(match total {
            Some(t) => g.add(t, scaled),
            None => scaled,
        });
    };
    if let Some((u1, u2)) = umr {
        add_weighted(g, u1, opts.weights.umr);
        add_weighted(g, u2, opts.weights.umr);
    }
    if let Some((c1, c2)) = cmr {
        add_weighted(g, c1, opts.weights.cmr);
        add_weighted(g, c2, opts.weights.cmr);
    }
    if let Some(m) = mde {
        add_weighted(g, m, opts.weights.mde);
    }
    if let Some(m) = mim {
        add_weighted(g, m, opts.weights.mim);
    }
    let total = total.expect("at least one term is enabled");

    let breakdown = LossBreakdown {
        umr_1: umr.map(|(a, _)| g.scalar(a)),
        umr_2: umr.map(|(_, b)| g.scalar(b)),
        cmr_1: cmr.map(|(a, _)| g.scalar(a)),
        cmr_2: cmr.map(|(_, b)| g.scalar(b)),
        mde: mde.map(|m| g.scalar(m)),
        mim: mim.map(|m| g.scalar(m)),
        total: g.scalar(total),
        weights: opts.weights,
    };
    for (name, value) in breakdown.named_terms() {
        if value.is_some_and(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("loss term {name} is non-finite")));
        }
    }
    if !breakdown.total.is_finite() {
        return Err(Error::numeric("total loss is non-finite"));
    }

    Ok(BatchLoss { session: sess, total, breakdown })
}

/// Evaluate the combined objective for a batch (values only).
pub fn loss_total(
    model: &CsmaeModel,
    batch: &[(&Array3<f64>, &Array3<f64>)],
    plans: &[MaskPlan],
    opts: &LossOptions,
) -> Result<LossBreakdown> {
    build_batch_loss(model, batch, plans, opts).map(|b| b.breakdown)
}
