use std::fs;

use ndarray::{Array2, Array3, Array4};
use ndarray_npy::WriteNpyExt;
use pathogan::checkpoint::Checkpoint;
use pathogan::model::{Domain, ImageSlice, PathoGan};
use pathogan::training::{TrainConfig, TrainState};
use pathogan_cli::commands::{build_panel, cmd_render_panel, PanelArgs};
use rand::Rng;

use crate::{ensure, rng, tiny_model_config, Outcome};

/// Width and height from a PNG header.
fn png_dims(png: &[u8]) -> (u32, u32) {
    let be = |k: usize| u32::from_be_bytes(png[k..k + 4].try_into().unwrap());
    (be(16), be(20))
}

/// A 4-channel slice gives three rows with 5, 5 and 4 populated cells, and
/// the rendered bytes depend only on the inputs.
pub fn run() -> Outcome {
    let config = tiny_model_config(4);
    let mut r = rng(909);
    let data = Array3::from_shape_fn((4, 8, 8), |_| r.gen_range(-1.0f32..=1.0));
    let mask = Array2::from_shape_fn((8, 8), |(y, x)| u8::from((2..5).contains(&y) && (3..7).contains(&x)));
    let slice = ImageSlice {
        data: data.clone(),
        patient_id: "panel".into(),
        slice_index: 0,
        domain: Domain::Pathological,
        mask: Some(mask.clone()),
    };

    let model = PathoGan::<f32>::new(config.clone(), 5).map_err(|e| e.to_string())?;
    let panel = build_panel(&model, &slice, Some(&mask)).map_err(|e| e.to_string())?;
    ensure(panel.cols == 5 && panel.rows.len() == 3, || format!("{} rows x {} columns", panel.rows.len(), panel.cols))?;
    ensure(panel.populated() == vec![5, 5, 4], || format!("populated cells {:?}", panel.populated()))?;
    let rebuilt = build_panel(&PathoGan::<f32>::new(config.clone(), 5).unwrap(), &slice, Some(&mask)).unwrap();
    ensure(panel.png_bytes() == rebuilt.png_bytes(), || "panel bytes differ between identical builds".into())?;

    // Through the command, from a checkpoint on disk.
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let state = TrainState::<f32>::new(config, &TrainConfig::default()).map_err(|e| e.to_string())?;
    let ckpt = tmp.path().join("model.ckpt");
    Checkpoint::from_state(&state, "{}", "panel").save(&ckpt).map_err(|e| e.to_string())?;
    let input = tmp.path().join("input.npy");
    data.into_shape_with_order((1, 4, 8, 8))
        .map(|a: Array4<f32>| a.write_npy(fs::File::create(&input).unwrap()))
        .map_err(|e| e.to_string())?
        .map_err(|e| e.to_string())?;
    let render = |name: &str| {
        let out = tmp.path().join(name);
        cmd_render_panel(&PanelArgs {
            checkpoint: ckpt.clone(),
            input: input.clone(),
            index: 0,
            mask: None,
            out: out.clone(),
        })
        .map_err(|e| e.to_string())?;
        fs::read(out).map_err(|e| e.to_string())
    };
    let (p1, p2) = (render("a.png")?, render("b.png")?);
    ensure(p1 == p2, || "rendered files differ".into())?;
    let dims = png_dims(&p1);
    ensure(dims == (5 * 8 + 4 * 2, 3 * 8 + 2 * 2), || format!("image size {dims:?}"))?;
    Ok(format!("5/5/4 cells in a 3x5 grid, {}x{} px, byte-identical across renders", dims.0, dims.1))
}
