use ndarray::{ArrayD, IxDyn};
use pathogan::losses::{
    cycle_loss, gan_loss_d, gan_loss_g, identity_loss, kl_loss, relevancy_loss_with, vae_loss_with, LossWeights,
    VaeConstants,
};
use pathogan::model::{DeltaSource, Domain, Mode, PathoGan, Role};
use pathogan_autograd::Var;
use rand::Rng;

use crate::{ensure, rng, tiny_model_config, Outcome};

const H: f64 = 1e-6;
const REL_TOL: f64 = 1e-4;
const PROBES: usize = 60;

type Model = PathoGan<f64>;
type LossFn<'a> = Box<dyn Fn(&Model) -> Var<f64> + 'a>;

/// Largest relative error between analytic and central-difference
/// gradients over randomly chosen parameter entries of `roles`.
fn worst_error(model: &mut Model, roles: &[Role], loss: &LossFn) -> Result<(f64, usize), String> {
    let grads = loss(model).backward();
    let mut pick = rng(0xF00D);
    let candidates: Vec<(Role, String, usize)> = roles
        .iter()
        .flat_map(|&role| model.network(role).parameters().map(move |p| (role, p.name().to_string(), p.len())))
        .collect();
    // Analytic values first: a perturbed parameter gets a fresh variable.
    let probes: Vec<_> = (0..PROBES)
        .map(|_| {
            let (role, name, len) = candidates[pick.gen_range(0..candidates.len())].clone();
            let k = pick.gen_range(0..len);
            let p = model.network(role).parameters().find(|p| p.name() == name).unwrap();
            let g = p.grad(&grads).map_or(0.0, |g| g.as_slice_memory_order().unwrap()[k]);
            (role, name, k, g)
        })
        .collect();
    let (mut worst, mut informative) = (0f64, 0);
    for (role, name, k, analytic) in probes {
        let mut shifted = |delta: f64| {
            let p = model.network_mut(role).parameter_mut(&name).unwrap();
            let original = p.value().clone();
            let mut v = original.clone();
            v.as_slice_memory_order_mut().unwrap()[k] += delta;
            p.set_value(v);
            let out = loss(model).item();
            model.network_mut(role).parameter_mut(&name).unwrap().set_value(original);
            out
        };
        let numeric = (shifted(H) - shifted(-H)) / (2.0 * H);
        let scale = analytic.abs().max(numeric.abs());
        if scale > 1e-7 {
            informative += 1;
        }
        let err = (analytic - numeric).abs() / scale.max(1e-5);
        worst = worst.max(err);
    }
    Ok((worst, informative))
}

pub fn run() -> Outcome {
    let config = tiny_model_config(2);
    let mut model = PathoGan::<f64>::new(config.clone(), 17).map_err(|e| e.to_string())?;
    let batch = |seed: u64| {
        let mut r = rng(seed);
        Var::constant(ArrayD::from_shape_fn(IxDyn(&[2, 2, 8, 8]), |_| r.gen_range(-0.9..0.9)))
    };
    let (x_a, x_b) = (batch(1), batch(2));
    let w = LossWeights::default();
    let noise = || rng(99);

    // Stop-gradient operands, frozen at the unperturbed parameters.
    let fake_a = {
        let y = model.generator_b_forward(&x_b, Mode::Train, &mut noise()).unwrap();
        Var::constant(y.output.value().clone())
    };
    let constants = {
        let c = model.cycle_b(&x_b, Mode::Train, &mut noise()).unwrap();
        VaeConstants::from_labelmaps(c.hat.residual.labelmap.value(), c.tilde.residual.labelmap.value(), w.omega_guard)
    };
    let diff: ArrayD<f64> = {
        let y = model.generator_b_forward(&x_b, Mode::Train, &mut noise()).unwrap();
        x_b.value() - y.residual.inpaint.value()
    };

    let generators = [Role::GammaEnc, Role::DeltaEnc, Role::Decoder, Role::Zb];
    let vae = |pick: usize| -> LossFn {
        let (x_b, constants) = (&x_b, &constants);
        Box::new(move |m: &Model| {
            let c = m.cycle_b(x_b, Mode::Train, &mut noise()).unwrap();
            let t = vae_loss_with(x_b, &c.hat.residual, &c.tilde.residual, constants, &w);
            [t.label, t.inpaint_out, t.inpaint_in][pick].clone()
        })
    };
    let terms: Vec<(&str, Vec<Role>, LossFn)> = vec![
        (
            "gan_g",
            vec![Role::GammaEnc, Role::Decoder],
            Box::new(|m: &Model| {
                let y = m.generator_a_forward(&x_a, DeltaSource::Prior, Mode::Train, &mut noise()).unwrap();
                gan_loss_g(&m.discriminate(Domain::Pathological, &y.output).unwrap())
            }),
        ),
        (
            "gan_d",
            vec![Role::DiscA],
            Box::new(|m: &Model| {
                let real = m.discriminate(Domain::Healthy, &x_a).unwrap();
                gan_loss_d(&real, &m.discriminate(Domain::Healthy, &fake_a).unwrap())
            }),
        ),
        (
            "cycle",
            generators.to_vec(),
            Box::new(|m: &Model| {
                let c = m.cycle_a(&x_a, Mode::Train, &mut noise()).unwrap();
                cycle_loss(&x_a, &c.tilde.output, &w)
            }),
        ),
        (
            "kl",
            generators.to_vec(),
            Box::new(|m: &Model| {
                let mut r = noise();
                let a = m.cycle_a(&x_a, Mode::Train, &mut r).unwrap();
                let b = m.cycle_b(&x_b, Mode::Train, &mut r).unwrap();
                kl_loss(a.hat.gamma.as_ref().unwrap(), b.tilde.delta.as_ref().unwrap())
            }),
        ),
        ("vae_label", generators.to_vec(), vae(0)),
        ("vae_inpaint_out", generators.to_vec(), vae(1)),
        ("vae_inpaint_in", generators.to_vec(), vae(2)),
        (
            "identity",
            vec![Role::GammaEnc, Role::Decoder],
            Box::new(|m: &Model| {
                let y = m.generator_a_forward(&x_b, DeltaSource::Prior, Mode::Train, &mut noise()).unwrap();
                identity_loss(&y.residual.labelmap, &w)
            }),
        ),
        (
            "relevancy",
            vec![Role::Zb],
            Box::new(|m: &Model| {
                let y = m.generator_b_forward(&x_b, Mode::Train, &mut noise()).unwrap();
                relevancy_loss_with(&y.residual.labelmap, &diff, &w)
            }),
        ),
    ];

    let mut summary = Vec::new();
    for (name, roles, loss) in &terms {
        let (worst, informative) = worst_error(&mut model, roles, loss)?;
        ensure(worst <= REL_TOL, || format!("{name}: relative error {worst:.2e}"))?;
        ensure(informative > 0, || format!("{name}: every probed gradient vanished"))?;
        summary.push(format!("{name} {worst:.1e}"));
    }
    Ok(format!("worst relative errors: {}", summary.join(", ")))
}
