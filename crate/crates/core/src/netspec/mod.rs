//! Architecture shorthand: parser, pretty-printer, shape inference and
//! network construction.
//!
//! A network is written as comma-separated tokens:
//!
//! | token    | meaning                                                        |
//! |----------|----------------------------------------------------------------|
//! | `Ck-f`   | convolution, kernel `k`, stride 1                              |
//! | `ck-f`   | convolution, kernel `k`, stride 1, instance norm, ELU          |
//! | `df`     | convolution, kernel 3, stride 2, instance norm, ELU            |
//! | `uf`     | transposed convolution, kernel 3, stride 2, instance norm, ELU |
//! | `l(f)`   | fully connected                                                |
//! | `Rf`     | residual block: conv3, instance norm, ELU, conv3, plus input   |
//! | `Q2F`    | square image to flat vector                                    |
//! | `F2Q`    | flat vector to square image of side `i`                        |
//! | `Pk-f`   | convolution, kernel `k`, stride 2, leaky ReLU (0.2)            |
//! | `pk-f`   | convolution, kernel `k`, stride 2, instance norm, leaky ReLU   |
//! | `nk-f`   | convolution, kernel `k`, stride 1, instance norm, leaky ReLU   |
//!
//! A trailing `t` or `e` appends a tanh or ELU. Feature counts `f` are
//! integers, declared single-letter symbols (`z`, `i`, `r`) or products of
//! both, e.g. `l(2*z)`. The last three tokens describe patch discriminators.

mod network;
mod shape;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use network::Network;
pub use shape::{infer_shapes, Shape};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NetSpecError {
    #[error("empty architecture string")]
    Empty,
    #[error("unknown or malformed token `{token}` at position {index}")]
    UnknownToken { token: String, index: usize },
    #[error("undeclared symbol `{symbol}` in token `{token}`")]
    UnknownSymbol { symbol: char, token: String },
    #[error("structure error at layer {index}: {reason}")]
    StructureError { index: usize, reason: String },
    #[error("shape mismatch at layer {index}: {reason}")]
    ShapeMismatch { index: usize, reason: String },
}

/// Values of the symbols an architecture string may reference.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Symbols(BTreeMap<char, usize>);

impl Symbols {
    /// `z`: encoding length, `i`: smallest spatial side, `r`: labelmap plus
    /// inpainting count.
    pub fn new(z: usize, i: usize, r: usize) -> Self {
        Symbols(BTreeMap::from([('z', z), ('i', i), ('r', r)]))
    }

    pub fn empty() -> Self {
        Symbols::default()
    }

    pub fn with(mut self, symbol: char, value: usize) -> Self {
        self.0.insert(symbol, value);
        self
    }

    pub fn get(&self, symbol: char) -> Option<usize> {
        self.0.get(&symbol).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Factor {
    Int(usize),
    Sym(char),
}

/// Product of integer literals and symbols.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Expr(Vec<Factor>);

impl Expr {
    pub fn int(v: usize) -> Self {
        Expr(vec![Factor::Int(v)])
    }

    pub fn factors(&self) -> &[Factor] {
        &self.0
    }

    pub fn eval(&self, symbols: &Symbols) -> Result<usize, NetSpecError> {
        self.0.iter().try_fold(1usize, |acc, f| match *f {
            Factor::Int(v) => Ok(acc * v),
            Factor::Sym(s) => symbols
                .get(s)
                .map(|v| acc * v)
                .ok_or_else(|| NetSpecError::UnknownSymbol {
                    symbol: s,
                    token: self.to_string(),
                }),
        })
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, factor) in self.0.iter().enumerate() {
            if k > 0 {
                f.write_str("*")?;
            }
            match factor {
                Factor::Int(v) => write!(f, "{v}")?,
                Factor::Sym(s) => write!(f, "{s}")?,
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    None,
    Tanh,
    Elu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv { kernel: usize },
    NormActConv { kernel: usize },
    Down,
    Up,
    FullyConnected,
    ResBlock,
    ReshapeQ2F,
    ReshapeF2Q,
    /// Patch-discriminator convolution with a leaky ReLU.
    LeakyConv { kernel: usize, stride: usize, norm: bool },
}

impl LayerKind {
    pub fn kernel(&self) -> Option<usize> {
        match *self {
            LayerKind::Conv { kernel }
            | LayerKind::NormActConv { kernel }
            | LayerKind::LeakyConv { kernel, .. } => Some(kernel),
            _ => None,
        }
    }

    /// Whether the layer consumes a flat vector rather than an image.
    fn takes_vector(&self) -> bool {
        matches!(self, LayerKind::FullyConnected | LayerKind::ReshapeF2Q)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Output feature count; absent for the reshapes.
    pub out_features: Option<Expr>,
    pub trailing_activation: Activation,
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let out = self.out_features.as_ref().map(|e| e.to_string()).unwrap_or_default();
        match self.kind {
            LayerKind::Conv { kernel } => write!(f, "C{kernel}-{out}")?,
            LayerKind::NormActConv { kernel } => write!(f, "c{kernel}-{out}")?,
            LayerKind::Down => write!(f, "d{out}")?,
            LayerKind::Up => write!(f, "u{out}")?,
            LayerKind::FullyConnected => write!(f, "l({out})")?,
            LayerKind::ResBlock => write!(f, "R{out}")?,
            LayerKind::ReshapeQ2F => f.write_str("Q2F")?,
            LayerKind::ReshapeF2Q => f.write_str("F2Q")?,
            LayerKind::LeakyConv { kernel, stride: 2, norm: false } => write!(f, "P{kernel}-{out}")?,
            LayerKind::LeakyConv { kernel, stride: 2, norm: true } => write!(f, "p{kernel}-{out}")?,
            LayerKind::LeakyConv { kernel, .. } => write!(f, "n{kernel}-{out}")?,
        }
        match self.trailing_activation {
            Activation::None => Ok(()),
            Activation::Tanh => f.write_str("t"),
            Activation::Elu => f.write_str("e"),
        }
    }
}

/// Parsed architecture together with the symbol values it was checked
/// against.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetSpec {
    pub layers: Vec<LayerSpec>,
    pub symbols: Symbols,
}

impl fmt::Display for NetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, layer) in self.layers.iter().enumerate() {
            if k > 0 {
                f.write_str(",")?;
            }
            write!(f, "{layer}")?;
        }
        Ok(())
    }
}

impl NetSpec {
    /// Resolved output feature count of layer `index`.
    pub fn out_features(&self, index: usize) -> Option<usize> {
        self.layers[index]
            .out_features
            .as_ref()
            .map(|e| e.eval(&self.symbols).expect("symbols validated at parse time"))
    }

    pub fn count_down(&self) -> usize {
        self.layers.iter().filter(|l| l.kind == LayerKind::Down).count()
    }

    /// Whether the network expects a flat vector input.
    pub fn takes_vector_input(&self) -> bool {
        self.layers.first().is_some_and(|l| l.kind.takes_vector())
    }
}

/// Parse a comma-separated architecture string.
///
/// Whitespace is ignored, so multi-line strings are accepted.
pub fn parse_netspec(text: &str, symbols: &Symbols) -> Result<NetSpec, NetSpecError> {
    let normalized: String = text.chars().filter(|c| !c.is_whitespace()).collect();
    if normalized.is_empty() {
        return Err(NetSpecError::Empty);
    }
    let layers = normalized
        .split(',')
        .enumerate()
        .map(|(index, token)| parse_token(token, index, symbols))
        .collect::<Result<Vec<_>, _>>()?;
    check_structure(&layers)?;
    Ok(NetSpec {
        layers,
        symbols: symbols.clone(),
    })
}

fn check_structure(layers: &[LayerSpec]) -> Result<(), NetSpecError> {
    let mut flat = layers.first().is_some_and(|l| l.kind.takes_vector());
    for (index, layer) in layers.iter().enumerate() {
        let err = |reason: &str| NetSpecError::StructureError {
            index,
            reason: reason.to_string(),
        };
        match layer.kind {
            LayerKind::ReshapeQ2F if flat => return Err(err("Q2F applied to a flat vector")),
            LayerKind::ReshapeQ2F => flat = true,
            LayerKind::ReshapeF2Q if !flat => return Err(err("F2Q before Q2F")),
            LayerKind::ReshapeF2Q => flat = false,
            LayerKind::FullyConnected if !flat => {
                return Err(err("fully connected layer on an image; insert Q2F first"))
            }
            LayerKind::FullyConnected => {}
            _ if flat => return Err(err("spatial layer on a flat vector; insert F2Q first")),
            _ => {}
        }
    }
    Ok(())
}

fn parse_token(token: &str, index: usize, symbols: &Symbols) -> Result<LayerSpec, NetSpecError> {
    let bad = || NetSpecError::UnknownToken {
        token: token.to_string(),
        index,
    };
    match token {
        "Q2F" => {
            return Ok(LayerSpec {
                kind: LayerKind::ReshapeQ2F,
                out_features: None,
                trailing_activation: Activation::None,
            })
        }
        "F2Q" => {
            return Ok(LayerSpec {
                kind: LayerKind::ReshapeF2Q,
                out_features: None,
                trailing_activation: Activation::None,
            })
        }
        _ => {}
    }
    let mut chars = token.chars();
    let head = chars.next().ok_or_else(bad)?;
    let rest = chars.as_str();

    let (kind, expr_text) = match head {
        'C' | 'c' | 'P' | 'p' | 'n' => {
            let (k, after) = rest.split_once('-').ok_or_else(bad)?;
            let kernel: usize = k.parse().map_err(|_| bad())?;
            if kernel == 0 {
                return Err(bad());
            }
            let kind = match head {
                'C' => LayerKind::Conv { kernel },
                'c' => LayerKind::NormActConv { kernel },
                'P' => LayerKind::LeakyConv { kernel, stride: 2, norm: false },
                'p' => LayerKind::LeakyConv { kernel, stride: 2, norm: true },
                _ => LayerKind::LeakyConv { kernel, stride: 1, norm: true },
            };
            (kind, after)
        }
        'd' => (LayerKind::Down, rest),
        'u' => (LayerKind::Up, rest),
        'R' => (LayerKind::ResBlock, rest),
        'l' => {
            let inner = rest.strip_prefix('(').ok_or_else(bad)?;
            let close = inner.rfind(')').ok_or_else(bad)?;
            let (expr, tail) = (&inner[..close], &inner[close + 1..]);
            let out = parse_expr(expr, token, symbols, bad)?;
            let act = parse_activation(tail).ok_or_else(bad)?;
            return Ok(LayerSpec {
                kind: LayerKind::FullyConnected,
                out_features: Some(out),
                trailing_activation: act,
            });
        }
        _ => return Err(bad()),
    };

    let (expr, act) = match expr_text.chars().last() {
        Some('t') => (&expr_text[..expr_text.len() - 1], Activation::Tanh),
        Some('e') => (&expr_text[..expr_text.len() - 1], Activation::Elu),
        _ => (expr_text, Activation::None),
    };
    let out = parse_expr(expr, token, symbols, bad)?;
    Ok(LayerSpec {
        kind,
        out_features: Some(out),
        trailing_activation: act,
    })
}

fn parse_activation(s: &str) -> Option<Activation> {
    match s {
        "" => Some(Activation::None),
        "t" => Some(Activation::Tanh),
        "e" => Some(Activation::Elu),
        _ => None,
    }
}

fn parse_expr(
    text: &str,
    token: &str,
    symbols: &Symbols,
    bad: impl Fn() -> NetSpecError,
) -> Result<Expr, NetSpecError> {
    if text.is_empty() {
        return Err(bad());
    }
    let factors = text
        .split('*')
        .map(|f| {
            if !f.is_empty() && f.bytes().all(|b| b.is_ascii_digit()) {
                // No leading zeros, so printing reproduces the input.
                if f.len() > 1 && f.starts_with('0') {
                    return Err(bad());
                }
                let v: usize = f.parse().map_err(|_| bad())?;
                if v == 0 {
                    return Err(bad());
                }
                Ok(Factor::Int(v))
            } else {
                let mut cs = f.chars();
                match (cs.next(), cs.next()) {
                    (Some(c), None) if c.is_ascii_lowercase() => {
                        if symbols.get(c).is_none() {
                            Err(NetSpecError::UnknownSymbol {
                                symbol: c,
                                token: token.to_string(),
                            })
                        } else {
                            Ok(Factor::Sym(c))
                        }
                    }
                    _ => Err(bad()),
                }
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Expr(factors))
}

/// Human-readable IR listing with the per-layer shape trace.
pub fn describe(spec: &NetSpec, input: Shape) -> Result<String, NetSpecError> {
    let shapes = infer_shapes(spec, input)?;
    let mut out = format!("input  {input}\n");
    for (k, (layer, shape)) in spec.layers.iter().zip(shapes.iter()).enumerate() {
        let features = spec
            .out_features(k)
            .map(|f| format!(" f={f}"))
            .unwrap_or_default();
        out.push_str(&format!(
            "{k:>3}  {:<10} {:?}{features} act={:?} -> {shape}\n",
            layer.to_string(),
            layer.kind,
            layer.trailing_activation
        ));
    }
    Ok(out)
}

/// Architecture strings of the reference model.
pub mod reference {
    pub const ENCODER: &str = "c7-64,d128,d256,d512,d1024,C1-15,Q2F,l(z*i)t,l(2*z)";
    pub const DECODER: &str = "l(i*i)e,l(i*i),F2Q,c3-1024,u512,u256,C7-256e,R256,R256,R256,\
R256,R256,R256,R256,R256,R256,u128,u64,C7-r";
    pub const ZB: &str = "c7-64,d128,d256,R256,R256,R256,R256,R256,R256,R256,R256,R256,u128,u64,C7-r";
    /// 70x70 patch discriminator.
    pub const DISCRIMINATOR: &str = "P4-64,p4-128,p4-256,n4-512,C4-1";
}
