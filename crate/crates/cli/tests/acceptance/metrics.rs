use std::collections::BTreeMap;

use ndarray::{concatenate, Array2, Axis};
use pathogan::evaluation::{avd, dice, dice_per_patient, hd95};
use rand::Rng;

use crate::{ensure, rng, Outcome};

fn random_mask<R: Rng>(r: &mut R, h: usize, w: usize) -> Array2<u8> {
    let density = r.gen_range(0.0..1.0);
    Array2::from_shape_fn((h, w), |_| u8::from(r.gen_bool(density)))
}

fn pixels(m: &Array2<u8>) -> Vec<(usize, usize)> {
    m.indexed_iter().filter(|(_, &v)| v != 0).map(|(p, _)| p).collect()
}

fn dice_oracle(a: &Array2<u8>, b: &Array2<u8>) -> f64 {
    let (pa, pb) = (pixels(a), pixels(b));
    if pa.is_empty() && pb.is_empty() {
        return 100.0;
    }
    let both = pa.iter().filter(|p| pb.contains(p)).count();
    100.0 * 2.0 * both as f64 / (pa.len() + pb.len()) as f64
}

/// Mask pixels with a 4-neighbour outside the mask or the image.
fn edge_pixels(m: &Array2<u8>) -> Vec<(usize, usize)> {
    let (h, w) = m.dim();
    let inside = |y: isize, x: isize| {
        y >= 0 && x >= 0 && y < h as isize && x < w as isize && m[[y as usize, x as usize]] != 0
    };
    pixels(m)
        .into_iter()
        .filter(|&(y, x)| {
            let (y, x) = (y as isize, x as isize);
            [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dy, dx)| !inside(y + dy, x + dx))
        })
        .collect()
}

fn directed(a: &[(usize, usize)], b: &[(usize, usize)]) -> Vec<f64> {
    a.iter()
        .map(|&(ya, xa)| {
            b.iter()
                .map(|&(yb, xb)| {
                    let (dy, dx) = (ya as f64 - yb as f64, xa as f64 - xb as f64);
                    (dy * dy + dx * dx).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

fn empty_case(a: &Array2<u8>, b: &Array2<u8>) -> Option<f64> {
    let (ea, eb) = (pixels(a).is_empty(), pixels(b).is_empty());
    let (h, w) = a.dim();
    match (ea, eb) {
        (true, true) => Some(0.0),
        (true, false) | (false, true) => Some(((h * h + w * w) as f64).sqrt()),
        _ => None,
    }
}

fn hd95_oracle(a: &Array2<u8>, b: &Array2<u8>) -> f64 {
    if let Some(d) = empty_case(a, b) {
        return d;
    }
    let (ea, eb) = (edge_pixels(a), edge_pixels(b));
    let mut d = directed(&ea, &eb);
    d.extend(directed(&eb, &ea));
    d.sort_by(f64::total_cmp);
    let pos = 0.95 * (d.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    d[lo] + (pos - lo as f64) * (d[hi] - d[lo])
}

fn avd_oracle(a: &Array2<u8>, b: &Array2<u8>) -> f64 {
    if let Some(d) = empty_case(a, b) {
        return d;
    }
    let (ea, eb) = (edge_pixels(a), edge_pixels(b));
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    0.5 * (mean(directed(&ea, &eb)) + mean(directed(&eb, &ea)))
}

pub fn run() -> Outcome {
    let mut r = rng(505);
    for k in 0..500 {
        let (h, w) = (r.gen_range(1..=8), r.gen_range(1..=8));
        let (a, b) = (random_mask(&mut r, h, w), random_mask(&mut r, h, w));
        for (name, got, want) in [
            ("dice", dice(&a, &b), dice_oracle(&a, &b)),
            ("hd95", hd95(&a, &b), hd95_oracle(&a, &b)),
            ("avd", avd(&a, &b), avd_oracle(&a, &b)),
        ] {
            ensure(got == want, || format!("{name} pair {k} ({h}x{w}): {got} vs oracle {want}\n{a}\n{b}"))?;
        }
    }

    for k in 0..50 {
        let (h, w) = (r.gen_range(1..=8), r.gen_range(1..=8));
        let mut groups: BTreeMap<String, Vec<(Array2<u8>, Array2<u8>)>> = BTreeMap::new();
        for p in 0..r.gen_range(1..6) {
            let slices = (0..r.gen_range(0..5)).map(|_| (random_mask(&mut r, h, w), random_mask(&mut r, h, w))).collect();
            groups.insert(format!("patient{p}"), slices);
        }
        let expected: Vec<(String, f64)> = groups
            .iter()
            .filter(|(_, s)| !s.is_empty())
            .map(|(id, s)| {
                let pred: Vec<_> = s.iter().map(|(p, _)| p.view()).collect();
                let gold: Vec<_> = s.iter().map(|(_, g)| g.view()).collect();
                let stack = |v: &[ndarray::ArrayView2<u8>]| concatenate(Axis(0), v).unwrap();
                (id.clone(), dice_oracle(&stack(&pred), &stack(&gold)))
            })
            .collect();
        let got = dice_per_patient(&groups);
        ensure(got == expected, || format!("grouping {k}: {got:?} vs stacked {expected:?}"))?;
    }
    Ok("500 random mask pairs and 50 patient groupings match brute force exactly".into())
}
