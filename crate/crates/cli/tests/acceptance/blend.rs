use ndarray::{ArrayD, IxDyn};
use pathogan::model::{activate, blend, DeltaSource, Mode, PathoGan, Role};
use pathogan_autograd::Var;
use rand::Rng;

use crate::{ensure, rng, tiny_model_config, Outcome};

const CASES: usize = 1000;

/// Force the labelmap channel of a network's last layer to a logit of
/// -1e4, so the labelmap is exactly zero.
fn silence_labelmap(model: &mut PathoGan<f32>, role: Role) {
    let net = model.network_mut(role);
    let names: Vec<String> = net.parameters().map(|p| p.name().to_string()).collect();
    let (weight, bias) = (&names[names.len() - 2], &names[names.len() - 1]);
    let p = net.parameter_mut(weight).unwrap();
    let mut v = p.value().clone();
    v.index_axis_mut(ndarray::Axis(0), 0).fill(0.0);
    p.set_value(v);
    let p = net.parameter_mut(bias).unwrap();
    let mut v = p.value().clone();
    v[0] = -1e4;
    p.set_value(v);
}

fn check_ranges(name: &str, labelmap: &Var<f32>, output: &Var<f32>) -> Result<(), String> {
    ensure(labelmap.value().iter().all(|&l| l > 0.0 && l < 1.0), || format!("{name}: labelmap leaves (0, 1)"))?;
    ensure(output.value().iter().all(|&y| (-1.0..=1.0).contains(&y)), || format!("{name}: output leaves [-1, 1]"))
}

pub fn run() -> Outcome {
    let mut r = rng(404);

    // Activation and blend on random raw maps of random shapes.
    for k in 0..CASES {
        let (n, c, h, w) = (r.gen_range(1..4), r.gen_range(1..5), r.gen_range(1..7), r.gen_range(1..7));
        let raw = Var::constant(ArrayD::from_shape_fn(IxDyn(&[n, c + 1, h, w]), |_| r.gen_range(-15.0f32..15.0)));
        let x = Var::constant(ArrayD::from_shape_fn(IxDyn(&[n, c, h, w]), |_| r.gen_range(-1.0f32..=1.0)));
        let res = activate(&raw, Mode::Test, &mut r);
        let y = blend(&x, &res).map_err(|e| e.to_string())?;
        check_ranges(&format!("activation case {k}"), &res.labelmap, &y)?;
        let (l, p, xv) = (res.labelmap.value(), res.inpaint.value(), x.value());
        for ((idx, &yv), &xe) in y.value().indexed_iter().zip(xv.iter()) {
            let lv = l[[idx[0], 0, idx[2], idx[3]]];
            let expected = lv * p[&idx] + (1.0 - lv) * xe;
            ensure((yv - expected).abs() <= 1e-6, || format!("blend case {k}: {yv} vs {expected}"))?;
        }
    }

    // Untrained generators on random images.
    let config = tiny_model_config(2);
    let mut model = PathoGan::<f32>::new(config, 3).map_err(|e| e.to_string())?;
    let inputs: Vec<Var<f32>> = (0..CASES)
        .map(|_| Var::constant(ArrayD::from_shape_fn(IxDyn(&[1, 2, 8, 8]), |_| r.gen_range(-1.0f32..=1.0))))
        .collect();
    for (k, x) in inputs.iter().enumerate() {
        let a = model.generator_a_forward(x, DeltaSource::Prior, Mode::Test, &mut r).map_err(|e| e.to_string())?;
        check_ranges(&format!("G_A input {k}"), &a.residual.labelmap, &a.output)?;
        let b = model.generator_b_forward(x, Mode::Test, &mut r).map_err(|e| e.to_string())?;
        check_ranges(&format!("G_B input {k}"), &b.residual.labelmap, &b.output)?;
    }

    // A zero labelmap passes the input through bit for bit.
    silence_labelmap(&mut model, Role::Zb);
    silence_labelmap(&mut model, Role::Decoder);
    for (k, x) in inputs.iter().enumerate() {
        let a = model.generator_a_forward(x, DeltaSource::Prior, Mode::Test, &mut r).map_err(|e| e.to_string())?;
        let b = model.generator_b_forward(x, Mode::Test, &mut r).map_err(|e| e.to_string())?;
        for (name, y) in [("G_A", &a.output), ("G_B", &b.output)] {
            let same = y.value().iter().zip(x.value().iter()).all(|(p, q)| p.to_bits() == q.to_bits());
            ensure(same, || format!("{name} input {k}: l = 0 but output differs from input"))?;
        }
    }
    Ok(format!("{CASES} raw maps and {CASES} images per generator within range; l = 0 is the identity"))
}
