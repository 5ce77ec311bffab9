use pathogan::netspec::{infer_shapes, parse_netspec, reference, Shape, Symbols};

use crate::{ensure, Outcome};

/// Parse, shape-check and round-trip the reference strings at full
/// resolution (i = 15) and at 64 px (i = 4).
pub fn run() -> Outcome {
    let z = 256;
    let mut checked = 0;
    for (n, size) in [(4, 240), (1, 64), (4, 64)] {
        let i = size / 16;
        let r = n + 1;
        let symbols = Symbols::new(z, i, r);
        let image = Shape::image(n, size, size);
        let residual = Shape::image(r, size, size);
        let cases = [
            ("encoder", reference::ENCODER, image, Shape::Vector(2 * z)),
            ("decoder", reference::DECODER, Shape::Vector(2 * z), residual),
            ("zb", reference::ZB, image, residual),
            ("discriminator", reference::DISCRIMINATOR, image, Shape::image(1, size / 8, size / 8)),
        ];
        for (name, text, input, expected) in cases {
            let spec = parse_netspec(text, &symbols).map_err(|e| format!("{name}: {e}"))?;
            let shapes = infer_shapes(&spec, input).map_err(|e| format!("{name} at {input}: {e}"))?;
            let out = *shapes.last().unwrap();
            ensure(out == expected, || format!("{name} at {input}: got {out}, expected {expected}"))?;
            let printed = spec.to_string();
            ensure(printed == text, || format!("{name}: printed {printed:?}"))?;
            let again = parse_netspec(&printed, &symbols).map_err(|e| e.to_string())?;
            ensure(again == spec, || format!("{name}: reparse differs"))?;
            checked += 1;
        }
    }
    // The encoder's tanh layer has z * i = 3840 units at full resolution.
    let spec = parse_netspec(reference::ENCODER, &Symbols::new(z, 15, 5)).map_err(|e| e.to_string())?;
    ensure(spec.layers.len() == 9 && spec.out_features(7) == Some(3840), || "encoder layer 8 width".into())?;
    Ok(format!("{checked} string/shape cases parse, trace and round-trip"))
}
