//! Hybrid loss components, voxel-selection mask algebra, ramp schedules, and
//! the analytic-vs-numeric gradient verification suite.
//!
//! Every loss is a pure function of slices so the same code runs in `f32`
//! during training and in `f64` under the finite-difference checker. The
//! `*_grad` variants return the analytic gradient actually used by the
//! training loop; the checker compares exactly these against central
//! differences.
//!
//! Conventions:
//! - probabilities are clamped to `[1e-7, 1 - 1e-7]` before any log;
//! - voxel distances are squared differences throughout;
//! - an empty selection mask yields loss 0 with zero gradient;
//! - entropies are in nats.

use crate::core::{StableMaskVariant, ThresholdRamp};
use crate::nn::Scalar;
use crate::rng;
use rand_chacha::ChaCha8Rng;

pub const PROB_EPS: f64 = 1e-7;

/// Binary entropy in nats; exactly 0 at p in {0, 1}.
pub fn binary_entropy(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        return 0.0;
    }
    -(p * libm::log(p) + (1.0 - p) * libm::log(1.0 - p))
}

/// Converts a probability threshold to its entropy bound H(tau).
pub fn entropy_threshold(tau_prob: f64) -> f64 {
    binary_entropy(tau_prob)
}

/// Per-voxel binary entropy of a probability map.
pub fn entropy_map<S: Scalar>(p: &[S]) -> Vec<S> {
    p.iter().map(|&v| S::from_f64(binary_entropy(v.to_f64()))).collect()
}

fn clamp_prob<S: Scalar>(p: S) -> S {
    p.clamp_s(S::from_f64(PROB_EPS), S::from_f64(1.0 - PROB_EPS))
}

// ---------------------------------------------------------------------------
// Supervised loss: per-voxel-mean BCE + smoothed Dice.
// ---------------------------------------------------------------------------

/// Cross-entropy plus `1 - (2*sum(y*p)+1)/(sum(y)+sum(p)+1)`.
/// `bce_sum` switches the cross-entropy reduction from mean to sum.
pub fn supervised_loss<S: Scalar>(pred: &[S], label: &[S], bce_sum: bool) -> S {
    supervised_loss_grad(pred, label, bce_sum).0
}

/// Returns (loss, dLoss/dPred).
pub fn supervised_loss_grad<S: Scalar>(pred: &[S], label: &[S], bce_sum: bool) -> (S, Vec<S>) {
    assert_eq!(pred.len(), label.len());
    let n = pred.len();
    let inv_n = if bce_sum { S::ONE } else { S::ONE / S::from_f64(n as f64) };
    let one = S::ONE;

    let mut bce = S::ZERO;
    let mut sum_y = S::ZERO;
    let mut sum_p = S::ZERO;
    let mut sum_yp = S::ZERO;
    for i in 0..n {
        let p = clamp_prob(pred[i]);
        let y = label[i];
        bce += -(y * p.ln() + (one - y) * (one - p).ln());
        sum_y += y;
        sum_p += p;
        sum_yp += y * p;
    }
    bce = bce * inv_n;
    let a = S::from_f64(2.0) * sum_yp + one;
    let b = sum_y + sum_p + one;
    let dice = one - a / b;
    let loss = bce + dice;

    let mut grad = vec![S::ZERO; n];
    let b2 = b * b;
    for i in 0..n {
        let p = clamp_prob(pred[i]);
        let y = label[i];
        let dbce = (-(y / p) + (one - y) / (one - p)) * inv_n;
        let ddice = -(S::from_f64(2.0) * y * b - a) / b2;
        grad[i] = dbce + ddice;
    }
    (loss, grad)
}

// ---------------------------------------------------------------------------
// Intra-network uncertainty constraint.
// ---------------------------------------------------------------------------

/// Mean squared prediction-vs-Bayesian distance over voxels whose Bayesian
/// entropy is below the threshold; 0 when nothing is selected.
pub fn intra_loss<S: Scalar>(
    pred: &[S],
    bayes_mean: &[S],
    bayes_entropy: &[S],
    tau1_entropy: f64,
) -> (S, usize) {
    let (l, _, c) = intra_loss_grad(pred, bayes_mean, bayes_entropy, tau1_entropy);
    (l, c)
}

/// Returns (loss, dLoss/dPred, selected-voxel count).
pub fn intra_loss_grad<S: Scalar>(
    pred: &[S],
    bayes_mean: &[S],
    bayes_entropy: &[S],
    tau1_entropy: f64,
) -> (S, Vec<S>, usize) {
    assert_eq!(pred.len(), bayes_mean.len());
    assert_eq!(pred.len(), bayes_entropy.len());
    let thr = S::from_f64(tau1_entropy);
    let count = bayes_entropy.iter().filter(|&&u| u < thr).count();
    let mut grad = vec![S::ZERO; pred.len()];
    if count == 0 {
        return (S::ZERO, grad, 0);
    }
    let omega = S::ONE / S::from_f64(count as f64);
    let mut loss = S::ZERO;
    for i in 0..pred.len() {
        if bayes_entropy[i] < thr {
            let d = pred[i] - bayes_mean[i];
            loss += d * d;
            grad[i] = S::from_f64(2.0) * d * omega;
        }
    }
    (loss * omega, grad, count)
}

// ---------------------------------------------------------------------------
// Stable-voxel selection and the inter-network constraint.
// ---------------------------------------------------------------------------

/// Stable voxels: binary agreement of plain and Bayesian predictions on the
/// instrument class (or both classes, depending on `variant`), and at least
/// one of the two entropies below the tighter threshold.
pub fn stable_mask<S: Scalar>(
    pred: &[S],
    bayes_mean: &[S],
    entropy_plain: &[S],
    entropy_bayes: &[S],
    tau2_entropy: f64,
    variant: StableMaskVariant,
) -> Vec<bool> {
    assert_eq!(pred.len(), bayes_mean.len());
    assert_eq!(pred.len(), entropy_plain.len());
    assert_eq!(pred.len(), entropy_bayes.len());
    let half = S::from_f64(0.5);
    let thr = S::from_f64(tau2_entropy);
    (0..pred.len())
        .map(|i| {
            let c = pred[i] > half;
            let c_hat = bayes_mean[i] > half;
            let agree = match variant {
                StableMaskVariant::InstrumentAgreement => c && c_hat,
                StableMaskVariant::ClassAgreement => c == c_hat,
            };
            agree && (entropy_plain[i] < thr || entropy_bayes[i] < thr)
        })
        .collect()
}

/// Voxel-selection masks for the inter-network constraint:
/// `M1 = (S1 & S2 & (D1 > D2)) | (!(S1 & S2) & S2)` and mirrored for `M2`.
pub fn inter_mask<S: Scalar>(
    s1: &[bool],
    s2: &[bool],
    d1: &[S],
    d2: &[S],
) -> (Vec<bool>, Vec<bool>) {
    assert_eq!(s1.len(), s2.len());
    assert_eq!(s1.len(), d1.len());
    assert_eq!(s1.len(), d2.len());
    let mut m1 = vec![false; s1.len()];
    let mut m2 = vec![false; s1.len()];
    for i in 0..s1.len() {
        let both = s1[i] && s2[i];
        m1[i] = (both && d1[i] > d2[i]) || (!both && s2[i]);
        m2[i] = (both && d2[i] > d1[i]) || (!both && s1[i]);
    }
    (m1, m2)
}

/// Per-voxel squared prediction distance `D = (pred - bayes_mean)^2`.
pub fn distance_map<S: Scalar>(pred: &[S], bayes_mean: &[S]) -> Vec<S> {
    assert_eq!(pred.len(), bayes_mean.len());
    pred.iter()
        .zip(bayes_mean)
        .map(|(&a, &b)| (a - b) * (a - b))
        .collect()
}

/// Mean squared distance between the two networks' predictions over the
/// selected voxels. The second prediction is a constant target: gradients
/// flow only into `pred_own`.
pub fn inter_loss<S: Scalar>(pred_own: &[S], pred_other: &[S], mask: &[bool]) -> (S, usize) {
    let (l, _, c) = inter_loss_grad(pred_own, pred_other, mask);
    (l, c)
}

pub fn inter_loss_grad<S: Scalar>(
    pred_own: &[S],
    pred_other: &[S],
    mask: &[bool],
) -> (S, Vec<S>, usize) {
    assert_eq!(pred_own.len(), pred_other.len());
    assert_eq!(pred_own.len(), mask.len());
    let count = mask.iter().filter(|&&m| m).count();
    let mut grad = vec![S::ZERO; pred_own.len()];
    if count == 0 {
        return (S::ZERO, grad, 0);
    }
    let omega = S::ONE / S::from_f64(count as f64);
    let mut loss = S::ZERO;
    for i in 0..pred_own.len() {
        if mask[i] {
            let d = pred_own[i] - pred_other[i];
            loss += d * d;
            grad[i] = S::from_f64(2.0) * d * omega;
        }
    }
    (loss * omega, grad, count)
}

// ---------------------------------------------------------------------------
// Label-wise contextual (adversarial) constraint.
// ---------------------------------------------------------------------------

/// Discriminator and segmenter losses over one batch of classifier outputs.
///
/// `l_disc` is the mean binary cross-entropy, minimized by the discriminator.
/// `l_lcont` is the constraint as written (`cls*log(p) + (1-cls)*log(1-p)`,
/// i.e. minus the cross-entropy), minimized by the segmenters; the identity
/// `l_lcont == -l_disc` holds on any batch.
pub fn label_adversarial_losses<S: Scalar>(cls_hat: &[S], cls: &[bool]) -> (S, S) {
    assert_eq!(cls_hat.len(), cls.len());
    assert!(!cls_hat.is_empty());
    let mut lcont = S::ZERO;
    for i in 0..cls_hat.len() {
        let p = clamp_prob(cls_hat[i]);
        let y = if cls[i] { S::ONE } else { S::ZERO };
        lcont += y * p.ln() + (S::ONE - y) * (S::ONE - p).ln();
    }
    lcont = lcont / S::from_f64(cls_hat.len() as f64);
    (-lcont, lcont)
}

/// Gradient of `l_lcont` wrt the classifier outputs
/// (`cls/p - (1-cls)/(1-p)`, scaled by the batch-mean reduction).
pub fn lcont_grad<S: Scalar>(cls_hat: &[S], cls: &[bool]) -> Vec<S> {
    let inv_n = S::ONE / S::from_f64(cls_hat.len() as f64);
    cls_hat
        .iter()
        .zip(cls)
        .map(|(&p, &y)| {
            let p = clamp_prob(p);
            let y = if y { S::ONE } else { S::ZERO };
            (y / p - (S::ONE - y) / (S::ONE - p)) * inv_n
        })
        .collect()
}

/// Gradient of `l_disc` wrt the classifier outputs (negated [`lcont_grad`]).
pub fn disc_grad<S: Scalar>(cls_hat: &[S], cls: &[bool]) -> Vec<S> {
    lcont_grad(cls_hat, cls).into_iter().map(|g| -g).collect()
}

// ---------------------------------------------------------------------------
// Network-wise contextual constraint over encoder vectors.
// ---------------------------------------------------------------------------

/// Squared vector distances, summed over samples and vector dimensions:
/// labeled predictions vs annotation for both networks, plus the two
/// networks' unlabeled embeddings against each other. Slices concatenate
/// per-sample vectors; `v1l`, `v2l`, `v` share a length, as do `v1u`, `v2u`.
pub fn ncont_loss<S: Scalar>(v1l: &[S], v2l: &[S], v: &[S], v1u: &[S], v2u: &[S]) -> S {
    assert_eq!(v1l.len(), v.len());
    assert_eq!(v2l.len(), v.len());
    assert_eq!(v1u.len(), v2u.len());
    let mut loss = S::ZERO;
    for i in 0..v.len() {
        let a = v1l[i] - v[i];
        let b = v2l[i] - v[i];
        loss += a * a + b * b;
    }
    for i in 0..v1u.len() {
        let d = v1u[i] - v2u[i];
        loss += d * d;
    }
    loss
}

/// Analytic gradients of [`ncont_loss`] wrt all five vector groups, in the
/// order `(g_v1l, g_v2l, g_v, g_v1u, g_v2u)`.
#[allow(clippy::type_complexity)]
pub fn ncont_grads<S: Scalar>(
    v1l: &[S],
    v2l: &[S],
    v: &[S],
    v1u: &[S],
    v2u: &[S],
) -> (Vec<S>, Vec<S>, Vec<S>, Vec<S>, Vec<S>) {
    let two = S::from_f64(2.0);
    let g1l: Vec<S> = v1l.iter().zip(v).map(|(&a, &b)| two * (a - b)).collect();
    let g2l: Vec<S> = v2l.iter().zip(v).map(|(&a, &b)| two * (a - b)).collect();
    let gv: Vec<S> = (0..v.len())
        .map(|i| -two * (v1l[i] - v[i]) - two * (v2l[i] - v[i]))
        .collect();
    let g1u: Vec<S> = v1u.iter().zip(v2u).map(|(&a, &b)| two * (a - b)).collect();
    let g2u: Vec<S> = v1u.iter().zip(v2u).map(|(&a, &b)| -(two * (a - b))).collect();
    (g1l, g2l, gv, g1u, g2u)
}

// ---------------------------------------------------------------------------
// Ramp schedules and weighted aggregation.
// ---------------------------------------------------------------------------

/// `lambda * exp(-5 * (1 - t/t_max)^2)` for `t < t_max`, `lambda` afterwards.
pub fn ramp_weight(lambda: f64, t: u64, t_max: u64) -> f64 {
    if t >= t_max {
        return lambda;
    }
    let r = 1.0 - t as f64 / t_max as f64;
    lambda * libm::exp(-5.0 * r * r)
}

/// Ramps a probability threshold from `3/4 * tau` to `tau` over `t_max`
/// steps; linear by default, optionally Gaussian-shaped.
pub fn ramp_threshold(tau: f64, t: u64, t_max: u64, kind: ThresholdRamp) -> f64 {
    if t >= t_max {
        return tau;
    }
    let frac = t as f64 / t_max as f64;
    match kind {
        ThresholdRamp::Linear => tau * (0.75 + 0.25 * frac),
        ThresholdRamp::Gaussian => {
            let r = 1.0 - frac;
            tau * (0.75 + 0.25 * libm::exp(-5.0 * r * r))
        }
    }
}

/// Time-dependent weights and entropy bounds of the hybrid loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RampedWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub tau1_prob: f64,
    pub tau2_prob: f64,
    pub tau1_entropy: f64,
    pub tau2_entropy: f64,
}

pub fn ramped_weights(cfg: &crate::core::HybridLossConfig, t: u64) -> RampedWeights {
    let tau1_prob = ramp_threshold(cfg.tau1, t, cfg.t_max, cfg.threshold_ramp);
    let tau2_prob = ramp_threshold(cfg.tau2, t, cfg.t_max, cfg.threshold_ramp);
    RampedWeights {
        alpha: cfg.lambda * ramp_weight(cfg.alpha, t, cfg.t_max),
        beta: cfg.lambda * ramp_weight(cfg.beta, t, cfg.t_max),
        gamma: cfg.lambda * ramp_weight(cfg.gamma, t, cfg.t_max),
        tau1_prob,
        tau2_prob,
        tau1_entropy: entropy_threshold(tau1_prob),
        tau2_entropy: entropy_threshold(tau2_prob),
    }
}

/// One network's loss components at one step, with the ramped weights and
/// selected-voxel counts used to produce them.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub l_sup: f64,
    pub l_intra: f64,
    pub l_inter: f64,
    pub l_lcont: f64,
    pub l_ncont: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub intra_selected: usize,
    pub inter_selected: usize,
}

impl LossBreakdown {
    pub fn assemble(
        l_sup: f64,
        l_intra: f64,
        l_inter: f64,
        l_lcont: f64,
        l_ncont: f64,
        w: &RampedWeights,
        intra_selected: usize,
        inter_selected: usize,
    ) -> Self {
        let total =
            l_sup + w.alpha * (l_intra + l_inter) + w.beta * l_lcont + w.gamma * l_ncont;
        LossBreakdown {
            l_sup,
            l_intra,
            l_inter,
            l_lcont,
            l_ncont,
            total,
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
            intra_selected,
            inter_selected,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.l_sup.is_finite()
            && self.l_intra.is_finite()
            && self.l_inter.is_finite()
            && self.l_lcont.is_finite()
            && self.l_ncont.is_finite()
    }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient verification.
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossComponent {
    Sup,
    Intra,
    Inter,
    LCont,
    NCont,
}

impl LossComponent {
    pub const ALL: [LossComponent; 5] = [
        LossComponent::Sup,
        LossComponent::Intra,
        LossComponent::Inter,
        LossComponent::LCont,
        LossComponent::NCont,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LossComponent::Sup => "sup",
            LossComponent::Intra => "intra",
            LossComponent::Inter => "inter",
            LossComponent::LCont => "lcont",
            LossComponent::NCont => "ncont",
        }
    }
}

#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct GradCheckReport {
    pub component: LossComponent,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
}

/// Compares an analytic gradient against central finite differences of a
/// scalar loss. Relative error uses `max(|a|, |n|, 1e-8)` as denominator.
pub fn compare_gradients(
    loss: &mut dyn FnMut(&[f64]) -> f64,
    analytic: &[f64],
    x0: &[f64],
    eps: f64,
) -> (f64, usize, f64, f64) {
    assert_eq!(analytic.len(), x0.len());
    let mut worst = (0.0f64, 0usize, 0.0f64, 0.0f64);
    let mut x = x0.to_vec();
    for i in 0..x0.len() {
        x[i] = x0[i] + eps;
        let fp = loss(&x);
        x[i] = x0[i] - eps;
        let fm = loss(&x);
        x[i] = x0[i];
        let numeric = (fp - fm) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > worst.0 {
            worst = (rel, i, analytic[i], numeric);
        }
    }
    worst
}

/// Runs the finite-difference check for one loss component on random inputs
/// of side `side` (double precision, central differences of step `eps`).
pub fn gradient_check(
    component: LossComponent,
    side: usize,
    eps: f64,
    seed: u64,
) -> GradCheckReport {
    let n = side * side * side;
    let mut rng = rng::stream(seed, &format!("gradcheck-{}", component.name()));
    let unif = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| lo + (hi - lo) * rng::uniform_f64(rng);

    let (max_rel_err, worst_index, analytic_at_worst, numeric_at_worst, checked) = match component
    {
        LossComponent::Sup => {
            let pred: Vec<f64> = (0..n).map(|_| unif(&mut rng, 0.1, 0.9)).collect();
            let label: Vec<f64> =
                (0..n).map(|_| f64::from(rng::uniform_f64(&mut rng) > 0.5)).collect();
            let (_, grad) = supervised_loss_grad(&pred, &label, false);
            let mut f = |p: &[f64]| supervised_loss(p, &label, false);
            let (r, i, a, nm) = compare_gradients(&mut f, &grad, &pred, eps);
            (r, i, a, nm, n)
        }
        LossComponent::Intra => {
            let pred: Vec<f64> = (0..n).map(|_| unif(&mut rng, 0.1, 0.9)).collect();
            let mean: Vec<f64> = (0..n).map(|_| unif(&mut rng, 0.1, 0.9)).collect();
            let entropy: Vec<f64> = (0..n).map(|_| unif(&mut rng, 0.05, 0.69)).collect();
            let tau_h = 0.45;
            let (_, grad, _) = intra_loss_grad(&pred, &mean, &entropy, tau_h);
            let mut f = |p: &[f64]| intra_loss(p, &mean, &entropy, tau_h).0;
            let (r, i, a, nm) = compare_gradients(&mut f, &grad, &pred, eps);
            (r, i, a, nm, n)
        }
        LossComponent::Inter => {
            let pred1: Vec<f64> = (0..n).map(|_| unif(&mut rng, 0.1, 0.9)).collect();
            let pred2: Vec<f64> = (0..n).map(|_| unif(&mut rng, 0.1, 0.9)).collect();
            let mask: Vec<bool> = (0..n).map(|_| rng::uniform_f64(&mut rng) > 0.4).collect();
            let (_, grad, _) = inter_loss_grad(&pred1, &pred2, &mask);
            let mut f = |p: &[f64]| inter_loss(p, &pred2, &mask).0;
            let (r, i, a, nm) = compare_gradients(&mut f, &grad, &pred1, eps);
            (r, i, a, nm, n)
        }
        LossComponent::LCont => {
            let m = 8;
            let cls_hat: Vec<f64> = (0..m).map(|_| unif(&mut rng, 0.1, 0.9)).collect();
            let cls: Vec<bool> = (0..m).map(|_| rng::uniform_f64(&mut rng) > 0.5).collect();
            let grad = lcont_grad(&cls_hat, &cls);
            let mut f = |p: &[f64]| label_adversarial_losses(p, &cls).1;
            let (r, i, a, nm) = compare_gradients(&mut f, &grad, &cls_hat, eps);
            (r, i, a, nm, m)
        }
        LossComponent::NCont => {
            let m = n;
            let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
                (0..m).map(|_| unif(rng, -1.0, 1.0)).collect()
            };
            let v1l = draw(&mut rng);
            let v2l = draw(&mut rng);
            let v = draw(&mut rng);
            let v1u = draw(&mut rng);
            let v2u = draw(&mut rng);
            let (g1l, g2l, gv, g1u, g2u) = ncont_grads(&v1l, &v2l, &v, &v1u, &v2u);
            // Check the concatenated gradient over all five vector groups.
            let x0: Vec<f64> = [&v1l[..], &v2l[..], &v[..], &v1u[..], &v2u[..]].concat();
            let analytic: Vec<f64> = [&g1l[..], &g2l[..], &gv[..], &g1u[..], &g2u[..]].concat();
            let mut f = |x: &[f64]| {
                ncont_loss(&x[..m], &x[m..2 * m], &x[2 * m..3 * m], &x[3 * m..4 * m], &x[4 * m..])
            };
            let (r, i, a, nm) = compare_gradients(&mut f, &analytic, &x0, eps);
            (r, i, a, nm, 5 * m)
        }
    };

    GradCheckReport {
        component,
        max_rel_err,
        worst_index,
        analytic_at_worst,
        numeric_at_worst,
        checked,
    }
}

/// Runs all five component checks with the acceptance defaults.
pub fn gradient_check_all(side: usize, eps: f64, seed: u64) -> Vec<GradCheckReport> {
    LossComponent::ALL
        .iter()
        .map(|&c| gradient_check(c, side, eps, seed))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::HybridLossConfig;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn entropy_reference_values() {
        assert!((binary_entropy(0.5) - LN2).abs() < 1e-12);
        assert_eq!(binary_entropy(0.0), 0.0);
        assert_eq!(binary_entropy(1.0), 0.0);
        // -(0.7 ln 0.7 + 0.3 ln 0.3)
        assert!((binary_entropy(0.7) - 0.6108643020548935).abs() < 1e-12);
        assert!((binary_entropy(0.7) - 0.6109).abs() < 1e-4);
    }

    #[test]
    fn entropy_map_matches_scalar() {
        let p = [0.0f64, 0.5, 1.0, 0.7];
        let e = entropy_map(&p);
        assert_eq!(e[0], 0.0);
        assert!((e[1] - LN2).abs() < 1e-12);
        assert_eq!(e[2], 0.0);
        assert!((e[3] - 0.6109).abs() < 1e-4);
    }

    #[test]
    fn supervised_loss_perfect_prediction_is_zero() {
        let ones = [1.0f64; 27];
        let (l, _) = supervised_loss_grad(&ones, &ones, false);
        // BCE on clamped ones is ~1e-7, Dice term exactly 0.
        assert!(l.abs() < 1e-5, "loss {l}");
    }

    #[test]
    fn supervised_loss_all_zeros_is_zero() {
        let zeros = [0.0f64; 27];
        let l = supervised_loss(&zeros, &zeros, false);
        assert!(l.abs() < 1e-5, "loss {l}");
    }

    #[test]
    fn supervised_loss_single_voxel_hand_value() {
        // y=1, p=0.5: ln 2 + (1 - 2*0.5+1/(1+0.5+1)) = ln 2 + 1 - 2/2.5
        let l = supervised_loss(&[0.5f64], &[1.0f64], false);
        assert!((l - (LN2 + 1.0 - 2.0 / 2.5)).abs() < 1e-12);
        assert!((l - 0.8931).abs() < 1e-4);
    }

    #[test]
    fn intra_loss_identical_predictions() {
        let p = [0.3f64, 0.8, 0.6];
        let (l, c) = intra_loss(&p, &p, &[0.1, 0.1, 0.1], 0.5);
        assert_eq!(l, 0.0);
        assert_eq!(c, 3);
    }

    #[test]
    fn intra_loss_empty_selection_falls_back_to_zero() {
        let (l, grad, c) = intra_loss_grad(&[0.9f64, 0.1], &[0.1, 0.9], &[0.69, 0.69], 0.5);
        assert_eq!(l, 0.0);
        assert_eq!(c, 0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn intra_loss_hand_value() {
        // Two voxels, one selected, pred 0.9 vs mean 0.5 -> 0.4^2 / 1.
        let (l, c) = intra_loss(&[0.9f64, 0.2], &[0.5, 0.4], &[0.1, 0.69], 0.5);
        assert!((l - 0.16).abs() < 1e-12);
        assert_eq!(c, 1);
    }

    #[test]
    fn stable_mask_truth_table_cases() {
        let h07 = entropy_threshold(0.7);
        // C=1, Chat=1, U=0.3 < H(0.7), Uhat=0.68 -> stable
        let s = stable_mask(
            &[0.9f64],
            &[0.8],
            &[0.3],
            &[0.68],
            h07,
            StableMaskVariant::InstrumentAgreement,
        );
        assert_eq!(s, vec![true]);
        // C=1, Chat=0 -> unstable regardless of entropies
        let s = stable_mask(
            &[0.9f64],
            &[0.2],
            &[0.0],
            &[0.0],
            h07,
            StableMaskVariant::InstrumentAgreement,
        );
        assert_eq!(s, vec![false]);
        // C=0, Chat=0 -> unstable under the instrument-agreement reading
        let s = stable_mask(
            &[0.1f64],
            &[0.2],
            &[0.0],
            &[0.0],
            h07,
            StableMaskVariant::InstrumentAgreement,
        );
        assert_eq!(s, vec![false]);
        // ... but stable under the class-agreement variant
        let s = stable_mask(
            &[0.1f64],
            &[0.2],
            &[0.0],
            &[0.0],
            h07,
            StableMaskVariant::ClassAgreement,
        );
        assert_eq!(s, vec![true]);
    }

    #[test]
    fn inter_mask_truth_table_cases() {
        // S1=1, S2=1, D1=0.3 > D2=0.1 -> M1 selected, M2 not
        let (m1, m2) = inter_mask(&[true], &[true], &[0.3f64], &[0.1]);
        assert_eq!((m1[0], m2[0]), (true, false));
        // S1=0, S2=1 -> M1 guided by network 2
        let (m1, m2) = inter_mask(&[false], &[true], &[0.3f64], &[0.1]);
        assert_eq!((m1[0], m2[0]), (true, false));
        // S1=0, S2=0 -> nothing selected
        let (m1, m2) = inter_mask(&[false], &[false], &[0.3f64], &[0.1]);
        assert_eq!((m1[0], m2[0]), (false, false));
    }

    /// Brute-force evaluation of the selection indicator, written directly
    /// from the composed boolean expression.
    fn inter_mask_oracle(s1: bool, s2: bool, d1: f64, d2: f64) -> (bool, bool) {
        let both = s1 && s2;
        let not_both = !both;
        let m1 = (both && (d1 > d2)) || (not_both && s2);
        let m2 = (both && (d2 > d1)) || (not_both && s1);
        (m1, m2)
    }

    #[test]
    fn inter_mask_exhaustive_against_oracle() {
        for s1 in [false, true] {
            for s2 in [false, true] {
                for (d1, d2) in [(0.3, 0.1), (0.1, 0.3), (0.2, 0.2)] {
                    let (m1, m2) = inter_mask(&[s1], &[s2], &[d1], &[d2]);
                    let (o1, o2) = inter_mask_oracle(s1, s2, d1, d2);
                    assert_eq!((m1[0], m2[0]), (o1, o2), "case {s1} {s2} {d1} {d2}");
                }
            }
        }
    }

    #[test]
    fn inter_loss_cases() {
        let p = [0.4f64, 0.7];
        assert_eq!(inter_loss(&p, &p, &[true, true]).0, 0.0);
        assert_eq!(inter_loss(&[0.8f64], &[0.6], &[false]).0, 0.0);
        let (l, c) = inter_loss(&[0.8f64], &[0.6], &[true]);
        assert!((l - 0.04).abs() < 1e-12);
        assert_eq!(c, 1);
    }

    #[test]
    fn lcont_is_negative_disc_loss() {
        let cls_hat = [0.3f64, 0.9, 0.5, 0.2];
        let cls = [true, false, true, false];
        let (l_disc, l_lcont) = label_adversarial_losses(&cls_hat, &cls);
        assert!((l_lcont + l_disc).abs() < 1e-12);
    }

    #[test]
    fn confused_discriminator_loss_is_ln2() {
        let cls_hat = [0.5f64; 6];
        let cls = [true, false, true, false, true, false];
        let (l_disc, _) = label_adversarial_losses(&cls_hat, &cls);
        assert!((l_disc - LN2).abs() < 1e-9);
    }

    #[test]
    fn ncont_decomposes_into_three_distances() {
        let mut rng = rng::stream(11, "ncont");
        let draw = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
            (0..n).map(|_| rng::uniform_f64(rng) * 2.0 - 1.0).collect()
        };
        let (v1l, v2l, v, v1u, v2u) = (
            draw(&mut rng, 16),
            draw(&mut rng, 16),
            draw(&mut rng, 16),
            draw(&mut rng, 16),
            draw(&mut rng, 16),
        );
        // Scalar brute-force recomputation of each squared distance.
        let sq = |a: &[f64], b: &[f64]| -> f64 {
            let mut s = 0.0;
            for i in 0..a.len() {
                s += (a[i] - b[i]) * (a[i] - b[i]);
            }
            s
        };
        let expect = sq(&v1l, &v) + sq(&v2l, &v) + sq(&v1u, &v2u);
        let got = ncont_loss(&v1l, &v2l, &v, &v1u, &v2u);
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn ncont_zero_when_all_match() {
        let v = [0.2f64, -0.4, 0.9];
        assert_eq!(ncont_loss(&v, &v, &v, &v, &v), 0.0);
        // Only the unlabeled term left when labeled predictions match truth.
        let u1 = [0.5f64, 0.5, 0.5];
        let u2 = [0.0f64, 0.0, 0.0];
        let l = ncont_loss(&v, &v, &v, &u1, &u2);
        assert!((l - 0.75).abs() < 1e-12);
    }

    #[test]
    fn ramp_weight_reference_values() {
        assert_eq!(ramp_weight(0.1, 4000, 4000), 0.1);
        assert_eq!(ramp_weight(0.1, 9999, 4000), 0.1);
        let w0 = ramp_weight(0.1, 0, 4000);
        assert!((w0 - 0.1 * libm::exp(-5.0)).abs() < 1e-15);
        assert!((w0 - 6.7379e-4).abs() < 1e-7);
    }

    #[test]
    fn ramp_weight_monotone_and_continuous() {
        let mut prev = -1.0;
        for t in 0..=4100 {
            let w = ramp_weight(0.1, t, 4000);
            assert!(w >= prev, "not monotone at t={t}");
            prev = w;
        }
        let just_before = ramp_weight(0.1, 3999, 4000);
        assert!((ramp_weight(0.1, 4000, 4000) - just_before) < 1e-4);
    }

    #[test]
    fn ramp_threshold_endpoints() {
        assert_eq!(ramp_threshold(0.5, 0, 4000, ThresholdRamp::Linear), 0.375);
        assert_eq!(ramp_threshold(0.5, 4000, 4000, ThresholdRamp::Linear), 0.5);
        assert_eq!(ramp_threshold(0.5, 9000, 4000, ThresholdRamp::Linear), 0.5);
        assert_eq!(ramp_threshold(0.7, 4000, 4000, ThresholdRamp::Gaussian), 0.7);
    }

    #[test]
    fn threshold_ordering_realized_in_entropy_space() {
        // H(0.7) < H(0.5): the tighter threshold selects a subset.
        let h1 = entropy_threshold(0.5);
        let h2 = entropy_threshold(0.7);
        assert!((h1 - LN2).abs() < 1e-12);
        assert!((h2 - 0.6109).abs() < 1e-4);
        assert!(h2 < h1);
        let entropies: Vec<f64> = (0..100).map(|i| i as f64 * 0.007).collect();
        let sel1: Vec<bool> = entropies.iter().map(|&e| e < h1).collect();
        let sel2: Vec<bool> = entropies.iter().map(|&e| e < h2).collect();
        for (a, b) in sel2.iter().zip(&sel1) {
            assert!(!a | b, "tau2 selection must be a subset of tau1 selection");
        }
    }

    #[test]
    fn shrinking_threshold_never_grows_selection() {
        let entropies: Vec<f64> = (0..50).map(|i| (i as f64) * 0.0139).collect();
        let mut prev_count = usize::MAX;
        for thr in [0.69, 0.6, 0.5, 0.4, 0.2, 0.0] {
            let count = entropies.iter().filter(|&&e| e < thr).count();
            assert!(count <= prev_count);
            prev_count = count;
        }
    }

    #[test]
    fn hybrid_breakdown_totals() {
        let cfg = HybridLossConfig::default();
        let w = ramped_weights(&cfg, cfg.t_max);
        assert_eq!((w.alpha, w.beta, w.gamma), (0.1, 0.002, 0.1));
        let b = LossBreakdown::assemble(1.0, 0.5, 0.25, -0.7, 2.0, &w, 10, 5);
        let expect = 1.0 + 0.1 * (0.5 + 0.25) + 0.002 * (-0.7) + 0.1 * 2.0;
        assert!((b.total - expect).abs() < 1e-9);

        let sup_only = crate::core::HybridLossConfig::supervised_only();
        let w0 = ramped_weights(&sup_only, 100);
        let b0 = LossBreakdown::assemble(1.25, 9.0, 9.0, 9.0, 9.0, &w0, 0, 0);
        assert_eq!(b0.total, 1.25);
    }

    #[test]
    fn gradient_checks_pass_for_all_components() {
        for report in gradient_check_all(4, 1e-6, 12345) {
            assert!(
                report.max_rel_err <= 1e-4,
                "{}: rel err {} at {} (analytic {}, numeric {})",
                report.component.name(),
                report.max_rel_err,
                report.worst_index,
                report.analytic_at_worst,
                report.numeric_at_worst
            );
        }
    }

    #[test]
    fn gradient_check_zero_gradient_point() {
        // pred == mean: analytic and numeric both ~0.
        let p = [0.4f64; 8];
        let e = [0.1f64; 8];
        let (_, grad, _) = intra_loss_grad(&p, &p, &e, 0.5);
        let mut f = |x: &[f64]| intra_loss(x, &p, &e, 0.5).0;
        let (rel, _, a, n) = compare_gradients(&mut f, &grad, &p, 1e-6);
        assert!(a.abs() < 1e-9 && n.abs() < 1e-6, "a={a} n={n}");
        assert!(rel < 1e-4);
    }

    #[test]
    fn gradient_check_detects_injected_sign_error() {
        let pred: Vec<f64> = (0..27).map(|i| 0.1 + 0.028 * i as f64).collect();
        let label: Vec<f64> = (0..27).map(|i| f64::from(i % 3 == 0)).collect();
        let (_, mut grad) = supervised_loss_grad(&pred, &label, false);
        grad[13] = -grad[13]; // fault injection
        let mut f = |p: &[f64]| supervised_loss(p, &label, false);
        let (rel, worst, _, _) = compare_gradients(&mut f, &grad, &pred, 1e-6);
        assert!(rel > 1e-2, "sign error must be detected, got {rel}");
        assert_eq!(worst, 13, "worst coordinate must be reported");
    }

    proptest! {
        #[test]
        fn losses_stay_finite_for_any_probabilities(
            pred in proptest::collection::vec(0.0f64..=1.0, 8),
            label_bits in proptest::collection::vec(proptest::bool::ANY, 8),
            mean in proptest::collection::vec(0.0f64..=1.0, 8),
        ) {
            let label: Vec<f64> = label_bits.iter().map(|&b| f64::from(b)).collect();
            let (l, grad) = supervised_loss_grad(&pred, &label, false);
            prop_assert!(l.is_finite());
            prop_assert!(grad.iter().all(|g| g.is_finite()));

            let entropy = entropy_map(&mean);
            prop_assert!(entropy.iter().all(|e| e.is_finite()));
            let (li, gi, _) = intra_loss_grad(&pred, &mean, &entropy, 0.5);
            prop_assert!(li.is_finite());
            prop_assert!(gi.iter().all(|g| g.is_finite()));

            let masks: Vec<bool> = label_bits.clone();
            let (le, ge, _) = inter_loss_grad(&pred, &mean, &masks);
            prop_assert!(le.is_finite());
            prop_assert!(ge.iter().all(|g| g.is_finite()));

            let (ld, ll) = label_adversarial_losses(&pred, &label_bits);
            prop_assert!(ld.is_finite() && ll.is_finite());
        }

        #[test]
        fn binarize_selection_monotone_in_entropy_threshold(
            entropy in proptest::collection::vec(0.0f64..=0.6931, 16),
            t1 in 0.0f64..=0.6931,
            t2 in 0.0f64..=0.6931,
        ) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let count_lo = entropy.iter().filter(|&&e| e < lo).count();
            let count_hi = entropy.iter().filter(|&&e| e < hi).count();
            prop_assert!(count_lo <= count_hi);
        }
    }
}
