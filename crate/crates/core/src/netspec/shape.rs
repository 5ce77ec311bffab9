use std::fmt;

use super::{LayerKind, NetSpec, NetSpecError};

/// Per-sample tensor shape (batch dimension excluded).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Image { c: usize, h: usize, w: usize },
    Vector(usize),
}

impl Shape {
    pub fn image(c: usize, h: usize, w: usize) -> Self {
        Shape::Image { c, h, w }
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            Shape::Image { c, h, w } => vec![c, h, w],
            Shape::Vector(n) => vec![n],
        }
    }

    pub fn len(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Image { c, h, w } => write!(f, "({c}, {h}, {w})"),
            Shape::Vector(n) => write!(f, "({n},)"),
        }
    }
}

/// Output shape of every layer for a given input shape.
///
/// All convolutions use "same" zero padding, so only strides change the
/// spatial size.
pub fn infer_shapes(spec: &NetSpec, input: Shape) -> Result<Vec<Shape>, NetSpecError> {
    let mut shapes = Vec::with_capacity(spec.layers.len());
    let mut cur = input;
    for (index, layer) in spec.layers.iter().enumerate() {
        let mismatch = |reason: String| NetSpecError::ShapeMismatch { index, reason };
        let f = spec.out_features(index);
        cur = match (layer.kind, cur) {
            (LayerKind::Conv { .. } | LayerKind::NormActConv { .. }, Shape::Image { h, w, .. }) => {
                Shape::image(f.expect("conv width"), h, w)
            }
            (LayerKind::LeakyConv { stride, .. }, Shape::Image { h, w, .. }) => {
                Shape::image(f.expect("conv width"), h.div_ceil(stride), w.div_ceil(stride))
            }
            (LayerKind::Down, Shape::Image { h, w, .. }) => {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(mismatch(format!("cannot halve odd spatial size {h}x{w}")));
                }
                Shape::image(f.expect("down width"), h / 2, w / 2)
            }
            (LayerKind::Up, Shape::Image { h, w, .. }) => Shape::image(f.expect("up width"), 2 * h, 2 * w),
            (LayerKind::ResBlock, Shape::Image { c, h, w }) => {
                let f = f.expect("res width");
                if f != c {
                    return Err(mismatch(format!("residual block of width {f} on {c} channels")));
                }
                Shape::image(c, h, w)
            }
            (LayerKind::ReshapeQ2F, Shape::Image { c, h, w }) => {
                if h != w {
                    return Err(mismatch(format!("Q2F needs a square image, got {h}x{w}")));
                }
                if let Some(i) = spec.symbols.get('i') {
                    if h != i {
                        return Err(mismatch(format!("Q2F expects side i={i}, got {h}")));
                    }
                }
                Shape::Vector(c * h * w)
            }
            (LayerKind::ReshapeF2Q, Shape::Vector(n)) => {
                let i = spec
                    .symbols
                    .get('i')
                    .ok_or_else(|| mismatch("F2Q needs symbol i".into()))?;
                if n % (i * i) != 0 {
                    return Err(mismatch(format!("F2Q: {n} values do not fill {i}x{i} planes")));
                }
                Shape::image(n / (i * i), i, i)
            }
            (LayerKind::FullyConnected, Shape::Vector(_)) => Shape::Vector(f.expect("fc width")),
            (kind, shape) => return Err(mismatch(format!("{kind:?} cannot consume {shape}"))),
        };
        if cur.len() == 0 {
            return Err(mismatch("empty output".into()));
        }
        shapes.push(cur);
    }
    Ok(shapes)
}
