//! Loss terms and the full objective.
//!
//! Every term returns a scalar `Var` that already carries its weight, so the
//! generator objective is a plain sum plus the weighted KL term. Terms with
//! stop-gradient operands come in two forms: the everyday one computes the
//! constants from the current values and detaches them, and the `_with` form
//! takes them explicitly so they can be held fixed in finite-difference
//! checks.

use ndarray::{ArrayD, Axis, IxDyn};
use pathogan_autograd::{Scalar, Var};
use serde::{Deserialize, Serialize};

use crate::model::{LatentCode, ResidualOutput};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Scales both adversarial terms; 0 masks them.
    pub lambda_gan: f64,
    pub lambda_cc: f64,
    pub lambda_vae: f64,
    pub lambda_idt: f64,
    pub lambda_r: f64,
    pub lambda_kl: f64,
    /// Pixel-count guard added to the region sizes that divide the
    /// reconstruction and relevancy terms.
    pub omega_guard: f64,
    /// Labelmaps are clamped to `[0, 1 - label_clamp]` before `ln(1 - l^2)`.
    pub label_clamp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_gan: 1.0,
            lambda_cc: 5.0,
            lambda_vae: 1.0,
            lambda_idt: 1.0,
            lambda_r: 0.5,
            lambda_kl: 0.1,
            omega_guard: 1.0,
            label_clamp: 1e-6,
        }
    }
}

impl LossWeights {
    /// All weights zero; guards keep their defaults.
    pub fn zero() -> Self {
        LossWeights {
            lambda_gan: 0.0,
            lambda_cc: 0.0,
            lambda_vae: 0.0,
            lambda_idt: 0.0,
            lambda_r: 0.0,
            lambda_kl: 0.0,
            ..LossWeights::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let named = [
            ("lambda_gan", self.lambda_gan),
            ("lambda_cc", self.lambda_cc),
            ("lambda_vae", self.lambda_vae),
            ("lambda_idt", self.lambda_idt),
            ("lambda_r", self.lambda_r),
            ("lambda_kl", self.lambda_kl),
            ("label_clamp", self.label_clamp),
        ];
        for (name, v) in named {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("{name} must be a nonnegative number, got {v}"));
            }
        }
        if !(self.omega_guard.is_finite() && self.omega_guard > 0.0) {
            return Err(format!("omega_guard must be positive, got {}", self.omega_guard));
        }
        if self.label_clamp >= 1.0 {
            return Err(format!("label_clamp must be below 1, got {}", self.label_clamp));
        }
        Ok(())
    }
}

fn c<T: Scalar>(v: f64) -> T {
    T::from_f64_lossy(v)
}

/// Least-squares discriminator loss: real scores pulled to 1, fake to 0.
pub fn gan_loss_d<T: Scalar>(real: &Var<T>, fake: &Var<T>) -> Var<T> {
    &real.add_scalar(-T::one()).square().mean() + &fake.square().mean()
}

/// Least-squares generator loss: fake scores pulled to 1.
pub fn gan_loss_g<T: Scalar>(fake: &Var<T>) -> Var<T> {
    fake.add_scalar(-T::one()).square().mean()
}

/// `lambda_cc * mean |x_tilde - x|`
pub fn cycle_loss<T: Scalar>(x: &Var<T>, x_tilde: &Var<T>, w: &LossWeights) -> Var<T> {
    (x_tilde - x).abs().mean().scale(c(w.lambda_cc))
}

/// KL divergence of a diagonal Gaussian from N(0, I), summed over the code
/// and averaged over the batch.
pub fn kl_divergence<T: Scalar>(code: &LatentCode<T>) -> Var<T> {
    let terms = &(&code.mean.square() + &code.logvar.exp()) - &code.logvar.add_scalar(T::one());
    terms.sum_per_sample().mean().scale(c(0.5))
}

/// Unweighted KL term over the context and pathology codes.
pub fn kl_loss<T: Scalar>(gamma: &LatentCode<T>, delta: &LatentCode<T>) -> Var<T> {
    &kl_divergence(gamma) + &kl_divergence(delta)
}

/// The three weighted reconstruction terms of one cycle.
#[derive(Debug, Clone)]
pub struct VaeTerms<T: Scalar> {
    /// Labelmap of the return leg against the outbound labelmap.
    pub label: Var<T>,
    /// Outbound inpainting outside the outbound labelmap.
    pub inpaint_out: Var<T>,
    /// Return inpainting inside the return labelmap.
    pub inpaint_in: Var<T>,
}

impl<T: Scalar> VaeTerms<T> {
    pub fn sum(&self) -> Var<T> {
        &(&self.label + &self.inpaint_out) + &self.inpaint_in
    }
}

/// Operands of the reconstruction terms that receive no gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeConstants<T: Scalar> {
    /// Target for the return labelmap, `(N, 1, H, W)`.
    pub label_target: ArrayD<T>,
    /// Per-sample `(sum(1 - l_hat) + guard) / pixels`.
    pub omega1: ArrayD<T>,
    /// Per-sample `(sum(l_tilde) + guard) / pixels`.
    pub omega2: ArrayD<T>,
}

impl<T: Scalar> VaeConstants<T> {
    pub fn from_labelmaps(l_hat: &ArrayD<T>, l_tilde: &ArrayD<T>, guard: f64) -> Self {
        let n = l_hat.shape()[0];
        let pixels = c::<T>((l_hat.len() / n) as f64);
        let g = c::<T>(guard);
        let omega = |a: ArrayD<T>| {
            let per_sample = a.into_shape_with_order((n, l_hat.len() / n)).unwrap().sum_axis(Axis(1));
            per_sample.mapv(|s| (s + g) / pixels).into_dyn()
        };
        VaeConstants {
            label_target: l_hat.clone(),
            omega1: omega(l_hat.mapv(|v| T::one() - v)),
            omega2: omega(l_tilde.clone()),
        }
    }
}

/// Reconstruction terms for the cycle that starts at `x`; `hat` is the
/// outbound leg and `tilde` the return leg.
pub fn vae_loss<T: Scalar>(
    x: &Var<T>,
    hat: &ResidualOutput<T>,
    tilde: &ResidualOutput<T>,
    w: &LossWeights,
) -> VaeTerms<T> {
    let constants = VaeConstants::from_labelmaps(hat.labelmap.value(), tilde.labelmap.value(), w.omega_guard);
    vae_loss_with(x, hat, tilde, &constants, w)
}

pub fn vae_loss_with<T: Scalar>(
    x: &Var<T>,
    hat: &ResidualOutput<T>,
    tilde: &ResidualOutput<T>,
    constants: &VaeConstants<T>,
    w: &LossWeights,
) -> VaeTerms<T> {
    let s = x.shape();
    let pixels = (s[2] * s[3]) as f64;
    let weight = c::<T>(w.lambda_vae / pixels);
    let n = s[0];
    let per_sample_omega = |o: &ArrayD<T>| Var::constant(o.clone().into_shape_with_order(IxDyn(&[n])).unwrap());

    // Bernoulli negative log-likelihood from logits: softplus(s) - t * s.
    let target = Var::constant(constants.label_target.clone());
    let logit = &tilde.logit;
    let bce = &logit.softplus() - &(&target * logit);
    let label = bce.sum_per_sample().mean().scale(weight);

    let outside = &hat.labelmap.rsub_scalar(T::one()) * &(&hat.inpaint - x);
    let inpaint_out = (&outside.square().sum_per_sample() / &per_sample_omega(&constants.omega1))
        .mean()
        .scale(weight);

    let inside = &tilde.labelmap * &(&tilde.inpaint - x);
    let inpaint_in = (&inside.square().sum_per_sample() / &per_sample_omega(&constants.omega2))
        .mean()
        .scale(weight);

    VaeTerms {
        label,
        inpaint_out,
        inpaint_in,
    }
}

/// `lambda_idt * mean |l|` for the labelmap a generator produces on an
/// image already in its target domain.
pub fn identity_loss<T: Scalar>(labelmap: &Var<T>, w: &LossWeights) -> Var<T> {
    labelmap.abs().mean().scale(c(w.lambda_idt))
}

/// Area penalty minus the mean residual magnitude under the labelmap.
pub fn relevancy_loss<T: Scalar>(x: &Var<T>, residual: &ResidualOutput<T>, w: &LossWeights) -> Var<T> {
    let diff = (x - &residual.inpaint).value().clone();
    relevancy_loss_with(&residual.labelmap, &diff, w)
}

/// Relevancy with the image/inpainting difference given as a constant.
pub fn relevancy_loss_with<T: Scalar>(labelmap: &Var<T>, diff: &ArrayD<T>, w: &LossWeights) -> Var<T> {
    let l = labelmap.clamp(T::zero(), c(1.0 - w.label_clamp));
    let area = l.square().rsub_scalar(T::one()).ln().neg().mean();
    let weighted = (&l * &Var::constant(diff.clone())).abs().sum_per_sample();
    let size = l.sum_per_sample().add_scalar(c(w.omega_guard));
    let gain = (&weighted / &size).mean();
    (&area - &gain).scale(c(w.lambda_r))
}

/// Generator-side terms of one translation direction.
#[derive(Debug, Clone)]
pub struct DirectionTerms<T: Scalar> {
    pub gan_g: Var<T>,
    pub cc: Var<T>,
    pub vae: VaeTerms<T>,
    pub idt: Var<T>,
    pub relevancy: Var<T>,
}

impl<T: Scalar> DirectionTerms<T> {
    pub fn sum(&self) -> Var<T> {
        let s = &(&self.gan_g + &self.cc) + &self.vae.sum();
        &(&s + &self.idt) + &self.relevancy
    }
}

/// Scalar values of every term for one step. Each component carries its
/// weight except `kl`, which enters `total_g` as `lambda_kl * kl`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub gan_g: f64,
    pub gan_d: f64,
    pub cc: f64,
    pub kl: f64,
    pub vae_label: f64,
    pub vae_inpaint_out: f64,
    pub vae_inpaint_in: f64,
    pub idt: f64,
    pub relevancy: f64,
    pub total_g: f64,
    pub total_d: f64,
}

impl LossReport {
    pub const FIELDS: [&'static str; 11] = [
        "gan_g",
        "gan_d",
        "cc",
        "kl",
        "vae_label",
        "vae_inpaint_out",
        "vae_inpaint_in",
        "idt",
        "relevancy",
        "total_g",
        "total_d",
    ];

    pub fn values(&self) -> [f64; 11] {
        [
            self.gan_g,
            self.gan_d,
            self.cc,
            self.kl,
            self.vae_label,
            self.vae_inpaint_out,
            self.vae_inpaint_in,
            self.idt,
            self.relevancy,
            self.total_g,
            self.total_d,
        ]
    }

    /// Name of the first non-finite term.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        Self::FIELDS
            .iter()
            .zip(self.values())
            .find(|(_, v)| !v.is_finite())
            .map(|(name, _)| *name)
    }
}

/// Generator objective and its breakdown; `gan_d` and `total_d` stay zero
/// until the discriminator step fills them in.
#[derive(Debug, Clone)]
pub struct Objective<T: Scalar> {
    pub total_g: Var<T>,
    pub report: LossReport,
}

pub fn total_objective<T: Scalar>(
    a_to_b: &DirectionTerms<T>,
    b_to_a: &DirectionTerms<T>,
    kl: &Var<T>,
    w: &LossWeights,
) -> Objective<T> {
    let total_g = &(&a_to_b.sum() + &b_to_a.sum()) + &kl.scale(c(w.lambda_kl));
    let both = |f: fn(&DirectionTerms<T>) -> &Var<T>| f(a_to_b).item().as_f64() + f(b_to_a).item().as_f64();
    let report = LossReport {
        gan_g: both(|d| &d.gan_g),
        cc: both(|d| &d.cc),
        kl: kl.item().as_f64(),
        vae_label: both(|d| &d.vae.label),
        vae_inpaint_out: both(|d| &d.vae.inpaint_out),
        vae_inpaint_in: both(|d| &d.vae.inpaint_in),
        idt: both(|d| &d.idt),
        relevancy: both(|d| &d.relevancy),
        total_g: total_g.item().as_f64(),
        ..LossReport::default()
    };
    Objective { total_g, report }
}
