mod common;

use common::rng;
use ndarray::Array2;
use pathogan::data::{generate_phantom_dataset, select_and_label_slices};
use pathogan::evaluation::{hd95, metrics_from_masks, Summary};
use rand::Rng;

fn edges(m: &Array2<u8>) -> Vec<(i64, i64)> {
    let (h, w) = m.dim();
    let on = |y: i64, x: i64| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && m[[y as usize, x as usize]] != 0;
    let mut out = Vec::new();
    for ((y, x), &v) in m.indexed_iter() {
        let (y, x) = (y as i64, x as i64);
        if v != 0 && !(on(y - 1, x) && on(y + 1, x) && on(y, x - 1) && on(y, x + 1)) {
            out.push((y, x));
        }
    }
    out
}

/// Pooled symmetric boundary distances by exhaustive pairing.
fn pairwise_hd95(a: &Array2<u8>, b: &Array2<u8>) -> f64 {
    let (ea, eb) = (edges(a), edges(b));
    let nearest = |p: &(i64, i64), set: &[(i64, i64)]| {
        set.iter()
            .map(|q| (((p.0 - q.0).pow(2) + (p.1 - q.1).pow(2)) as f64).sqrt())
            .fold(f64::INFINITY, f64::min)
    };
    let mut d: Vec<f64> = ea.iter().map(|p| nearest(p, &eb)).chain(eb.iter().map(|p| nearest(p, &ea))).collect();
    d.sort_by(f64::total_cmp);
    let pos = 0.95 * (d.len() - 1) as f64;
    let lo = pos.floor() as usize;
    d[lo] + (pos - lo as f64) * (d[pos.ceil() as usize] - d[lo])
}

#[test]
fn hd95_matches_pairwise_oracle_at_16px() {
    let mut r = rng(16);
    for _ in 0..100 {
        let mut mask = || {
            let p = r.gen_range(0.05..0.9);
            let m = Array2::from_shape_fn((16, 16), |_| u8::from(r.gen_bool(p)));
            if m.iter().all(|&v| v == 0) {
                Array2::from_elem((16, 16), 1)
            } else {
                m
            }
        };
        let (a, b) = (mask(), mask());
        assert_eq!(hd95(&a, &b), pairwise_hd95(&a, &b));
    }
}

#[test]
fn perfect_predictor_on_phantoms() {
    let set = generate_phantom_dataset(0, 12, 64, 1, &mut rng(2));
    let slices: Vec<_> = set.iter().flat_map(|v| select_and_label_slices(v, 0, 0, 20).unwrap()).collect();
    let scored: Vec<_> = slices.iter().map(|s| (s, s.mask.clone().unwrap())).collect();
    let record = metrics_from_masks(&scored).unwrap();
    let a = &record.aggregate;
    assert_eq!((a.dice.mean, a.hd95.mean, a.avd.mean, a.dice_pp.mean), (100.0, 0.0, 0.0, 100.0));
    assert!(record.per_slice.iter().all(|m| !m.empty_penalty));
}

#[test]
fn aggregates_recompute_from_csv() {
    let set = generate_phantom_dataset(0, 9, 32, 1, &mut rng(3));
    let slices: Vec<_> = set.iter().flat_map(|v| select_and_label_slices(v, 0, 0, 0).unwrap()).collect();
    let mut r = rng(4);
    let scored: Vec<_> = slices
        .iter()
        .map(|s| {
            let m = s.mask.as_ref().unwrap().mapv(|v| if r.gen_bool(0.2) { 1 - v } else { v });
            (s, m)
        })
        .collect();
    let record = metrics_from_masks(&scored).unwrap();
    let csv = record.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "patient_id,slice_index,dice,hd95,avd,empty_penalty");
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').skip(2).take(3).map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), scored.len());
    for (k, summary) in [record.aggregate.dice, record.aggregate.hd95, record.aggregate.avd].iter().enumerate() {
        let col: Vec<f64> = rows.iter().map(|r| r[k]).collect();
        let again = Summary::of(&col).unwrap();
        assert!((again.mean - summary.mean).abs() < 1e-9);
        assert!((again.std - summary.std).abs() < 1e-9);
        assert!((again.median - summary.median).abs() < 1e-9);
    }
    assert!(record.table().contains("72.9±23.8(81.4)"));
}
