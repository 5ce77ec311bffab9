use ndarray::{ArrayD, IxDyn};
use pathogan::losses::{
    cycle_loss, gan_loss_d, gan_loss_g, identity_loss, kl_divergence, kl_loss, relevancy_loss, relevancy_loss_with,
    total_objective, vae_loss, vae_loss_with, DirectionTerms, LossWeights, VaeConstants, VaeTerms,
};
use pathogan::model::{LatentCode, ResidualOutput};
use pathogan_autograd::Var;
use rand::Rng;

use crate::{ensure, rng, Outcome};

const DIRECT_TOL: f64 = 1e-9;

fn filled(shape: &[usize], v: f64) -> Var<f64> {
    Var::constant(ArrayD::from_elem(IxDyn(shape), v))
}

fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> ArrayD<f64> {
    let mut r = rng(seed);
    ArrayD::from_shape_fn(IxDyn(shape), |_| r.gen_range(lo..hi))
}

fn exact(name: &str, got: &Var<f64>, want: f64) -> Result<(), String> {
    let v = got.item();
    ensure(v == want, || format!("{name}: {v} != {want}"))
}

fn close(name: &str, got: f64, want: f64) -> Result<(), String> {
    ensure((got - want).abs() <= DIRECT_TOL, || format!("{name}: {got} vs {want}"))
}

fn code(mean: ArrayD<f64>, logvar: ArrayD<f64>) -> LatentCode<f64> {
    let mean = Var::constant(mean);
    LatentCode {
        sample: mean.clone(),
        mean,
        logvar: Var::constant(logvar),
    }
}

/// Residual maps from a labelmap logit and an inpainting, as leaves.
fn residual(logit: ArrayD<f64>, inpaint: ArrayD<f64>) -> ResidualOutput<f64> {
    let logit = Var::leaf(logit);
    ResidualOutput {
        raw: logit.clone(),
        labelmap: logit.sigmoid(),
        logit,
        inpaint: Var::leaf(inpaint),
    }
}

/// KL(N(m, e^lv) || N(0, 1)) by composite Simpson quadrature.
fn kl_quadrature(m: f64, lv: f64) -> f64 {
    let s = (0.5 * lv).exp();
    let (lo, hi) = (m - 14.0 * s, m + 14.0 * s);
    let n = 40_000;
    let h = (hi - lo) / n as f64;
    let f = |x: f64| {
        let log_q = -0.5 * ((x - m) / s).powi(2) - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        let log_p = -0.5 * x * x - 0.5 * (2.0 * std::f64::consts::PI).ln();
        log_q.exp() * (log_q - log_p)
    };
    let mut acc = f(lo) + f(hi);
    for k in 1..n {
        acc += f(lo + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

fn adversarial() -> Result<usize, String> {
    let s = [2, 1, 3, 3];
    exact("gan_d(1, 0)", &gan_loss_d(&filled(&s, 1.0), &filled(&s, 0.0)), 0.0)?;
    exact("gan_d(0, 1)", &gan_loss_d(&filled(&s, 0.0), &filled(&s, 1.0)), 2.0)?;
    exact("gan_d(.5, .5)", &gan_loss_d(&filled(&s, 0.5), &filled(&s, 0.5)), 0.5)?;
    exact("gan_g(1)", &gan_loss_g(&filled(&s, 1.0)), 0.0)?;
    exact("gan_g(0)", &gan_loss_g(&filled(&s, 0.0)), 1.0)?;
    exact("gan_g(.5)", &gan_loss_g(&filled(&s, 0.5)), 0.25)?;
    Ok(6)
}

fn cycle() -> Result<usize, String> {
    let w = LossWeights::default();
    let s = [2, 3, 4, 4];
    let x = random(&s, -1.0, 1.0, 1);
    exact("cycle(x, x)", &cycle_loss(&Var::constant(x.clone()), &Var::constant(x.clone()), &w), 0.0)?;
    let shifted = x.mapv(|v| v + 0.1);
    close(
        "cycle offset 0.1",
        cycle_loss(&Var::constant(x.clone()), &Var::constant(shifted), &w).item(),
        0.5,
    )?;
    let y = random(&s, -1.0, 1.0, 2);
    let oracle = 5.0 * x.iter().zip(y.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64;
    close("cycle random", cycle_loss(&Var::constant(x), &Var::constant(y), &w).item(), oracle)?;
    Ok(3)
}

fn kl() -> Result<usize, String> {
    let zero = || code(ArrayD::zeros(IxDyn(&[1, 4])), ArrayD::zeros(IxDyn(&[1, 4])));
    exact("kl prior", &kl_loss(&zero(), &zero()), 0.0)?;
    let mut m = ArrayD::zeros(IxDyn(&[1, 4]));
    m[[0, 0]] = 1.0;
    exact("kl unit mean", &kl_loss(&code(m, ArrayD::zeros(IxDyn(&[1, 4]))), &zero()), 0.5)?;

    let (mean, logvar) = (random(&[3, 4], -1.5, 1.5, 3), random(&[3, 4], -1.0, 1.0, 4));
    let mut oracle = 0.0;
    for (m, lv) in mean.iter().zip(logvar.iter()) {
        oracle += kl_quadrature(*m, *lv);
    }
    oracle /= 3.0;
    close("kl quadrature", kl_divergence(&code(mean, logvar)).item(), oracle)?;
    Ok(3)
}

fn vae() -> Result<usize, String> {
    let w = LossWeights::default();
    // Perfect reconstruction with binary labelmaps: saturated logits.
    let s = [2, 1, 4, 4];
    let bits = random(&s, 0.0, 1.0, 5).mapv(|v| if v < 0.5 { -800.0 } else { 800.0 });
    let x = random(&[2, 3, 4, 4], -1.0, 1.0, 6);
    let hat = residual(bits.clone(), x.clone());
    let tilde = residual(bits, x.clone());
    let t = vae_loss(&Var::constant(x), &hat, &tilde, &w);
    exact("vae label, perfect", &t.label, 0.0)?;
    exact("vae outside, perfect", &t.inpaint_out, 0.0)?;
    exact("vae inside, perfect", &t.inpaint_in, 0.0)?;

    // One pixel, l_hat = 0, p_hat - x = 1, guard 1: 1 / ((1 + 1) / 1).
    let x = ArrayD::zeros(IxDyn(&[1, 1, 1, 1]));
    let hat = residual(ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), -800.0), ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), 1.0));
    let tilde = residual(ArrayD::zeros(IxDyn(&[1, 1, 1, 1])), ArrayD::zeros(IxDyn(&[1, 1, 1, 1])));
    let t = vae_loss(&Var::constant(x), &hat, &tilde, &w);
    close("vae outside, one pixel", t.inpaint_out.item(), 0.5)?;

    // The region sizes and the label target carry no gradient: gradients
    // with live constants equal those with frozen ones, and the target
    // labelmap receives none from the label term.
    let x = Var::constant(random(&[2, 2, 4, 4], -1.0, 1.0, 7));
    let hat = residual(random(&s, -2.0, 2.0, 8), random(&[2, 2, 4, 4], -1.0, 1.0, 9));
    let tilde = residual(random(&s, -2.0, 2.0, 10), random(&[2, 2, 4, 4], -1.0, 1.0, 11));
    let live = vae_loss(&x, &hat, &tilde, &w);
    let constants =
        VaeConstants::from_labelmaps(hat.labelmap.value(), tilde.labelmap.value(), w.omega_guard);
    let frozen = vae_loss_with(&x, &hat, &tilde, &constants, &w);
    let (g_live, g_frozen) = (live.sum().backward(), frozen.sum().backward());
    for leaf in [&hat.logit, &hat.inpaint, &tilde.logit, &tilde.inpaint] {
        ensure(g_live.get_or_zeros(leaf) == g_frozen.get_or_zeros(leaf), || "vae: region sizes leak gradient".into())?;
    }
    let label_only = live.label.backward();
    ensure(
        label_only.get_or_zeros(&hat.logit).iter().all(|&g| g == 0.0),
        || "vae: label target receives gradient".into(),
    )?;
    Ok(6)
}

fn identity() -> Result<usize, String> {
    let w = LossWeights::default();
    let s = [2, 1, 4, 4];
    exact("identity l=0", &identity_loss(&filled(&s, 0.0), &w), 0.0)?;
    exact("identity l=1", &identity_loss(&filled(&s, 1.0), &w), 1.0)?;
    let l = random(&s, 0.0, 1.0, 12);
    let oracle = l.iter().map(|v| v.abs()).sum::<f64>() / l.len() as f64;
    close("identity random", identity_loss(&Var::constant(l), &w).item(), oracle)?;
    Ok(3)
}

fn relevancy() -> Result<usize, String> {
    let w = LossWeights::default();
    let zero_l = filled(&[1, 1, 3, 3], 0.0);
    exact("relevancy l=0", &relevancy_loss_with(&zero_l, &random(&[1, 2, 3, 3], -1.0, 1.0, 13), &w), 0.0)?;

    let negligible = LossWeights {
        omega_guard: 1e-15,
        label_clamp: 1e-15,
        ..w
    };
    let one = |l: f64, d: f64, w: &LossWeights| {
        relevancy_loss_with(&filled(&[1, 1, 1, 1], l), &ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), d), w).item()
    };
    close("relevancy one pixel", one(0.5, 1.0, &negligible), 0.5 * (-(0.75f64).ln() - 1.0))?;
    let mut prev = f64::INFINITY;
    for k in 0..=10 {
        let v = one(0.5, k as f64 / 10.0, &w);
        ensure(v < prev, || format!("relevancy not decreasing at |x-p| = {}", k as f64 / 10.0))?;
        prev = v;
    }

    // The image/inpainting difference is a constant.
    let x = Var::constant(random(&[2, 2, 4, 4], -1.0, 1.0, 14));
    let r = residual(random(&[2, 1, 4, 4], -2.0, 2.0, 15), random(&[2, 2, 4, 4], -1.0, 1.0, 16));
    let g = relevancy_loss(&x, &r, &w).backward();
    ensure(g.get_or_zeros(&r.inpaint).iter().all(|&v| v == 0.0), || "relevancy: inpainting receives gradient".into())?;
    ensure(g.get_or_zeros(&r.logit).iter().any(|&v| v != 0.0), || "relevancy: labelmap receives no gradient".into())?;
    Ok(5)
}

fn objective() -> Result<usize, String> {
    let terms = |vals: [f64; 7]| DirectionTerms {
        gan_g: Var::scalar(vals[0]),
        cc: Var::scalar(vals[1]),
        vae: VaeTerms {
            label: Var::scalar(vals[2]),
            inpaint_out: Var::scalar(vals[3]),
            inpaint_in: Var::scalar(vals[4]),
        },
        idt: Var::scalar(vals[5]),
        relevancy: Var::scalar(vals[6]),
    };
    let w = LossWeights::default();
    let zero = total_objective(&terms([0.0; 7]), &terms([0.0; 7]), &Var::scalar(0.0), &w);
    ensure(zero.total_g.item() == 0.0, || "objective of zero terms".into())?;

    let a = [0.3, 1.2, 0.05, 0.7, 0.2, 0.01, -0.4];
    let b = [0.9, 0.8, 0.15, 0.3, 0.6, 0.02, -0.1];
    let kl = 2.5;
    let o = total_objective(&terms(a), &terms(b), &Var::scalar(kl), &w);
    let independent: f64 = a.iter().sum::<f64>() + b.iter().sum::<f64>() + 0.1 * kl;
    close("objective sum", o.total_g.item(), independent)?;
    let without = total_objective(&terms(a), &terms(b), &Var::scalar(0.0), &w).total_g.item();
    close("kl weight 0.1", o.total_g.item() - without, 0.1 * kl)?;
    close("report kl", o.report.kl, kl)?;
    Ok(3)
}

pub fn run() -> Outcome {
    let n = adversarial()? + cycle()? + kl()? + vae()? + identity()? + relevancy()? + objective()?;
    Ok(format!("{n} closed-form and direct-evaluation examples hold"))
}
