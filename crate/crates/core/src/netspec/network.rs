use ndarray::{ArrayD, IxDyn};
use pathogan_autograd::{Parameter, Scalar, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{infer_shapes, Activation, LayerKind, NetSpec, NetSpecError, Shape};

const INIT_STD: f64 = 0.02;
const NORM_EPS: f64 = 1e-5;
const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Post {
    InstanceNorm,
    Elu,
    Tanh,
    Leaky,
}

#[derive(Debug, Clone)]
enum Op {
    Conv { stride: usize },
    ConvTranspose,
    Linear,
    Residual,
    Flatten,
    Unflatten { side: usize },
}

#[derive(Debug, Clone)]
struct Layer<T: Scalar> {
    op: Op,
    params: Vec<Parameter<T>>,
    post: Vec<Post>,
}

/// Differentiable network built from a [`NetSpec`].
#[derive(Debug, Clone)]
pub struct Network<T: Scalar> {
    spec: NetSpec,
    input: Shape,
    output: Shape,
    layers: Vec<Layer<T>>,
}

fn normal_array<T: Scalar>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> ArrayD<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    ArrayD::from_shape_fn(IxDyn(shape), |_| T::from_f64_lossy(dist.sample(rng)))
}

fn lecun(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

fn zeros<T: Scalar>(n: usize) -> ArrayD<T> {
    ArrayD::zeros(IxDyn(&[n]))
}

impl<T: Scalar> Network<T> {
    /// Build with zero biases and normal weights: std 0.02 for layers
    /// followed by instance norm, 1/sqrt(fan_in) for plain convolutions and
    /// fully connected layers so their output scale does not depend on the
    /// network width.
    pub fn build(spec: &NetSpec, input: Shape, seed: u64) -> Result<Self, NetSpecError> {
        let shapes = infer_shapes(spec, input)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut prev = input;
        for (k, (layer, &out)) in spec.layers.iter().zip(shapes.iter()).enumerate() {
            let in_c = prev.dims()[0];
            let f = spec.out_features(k);
            let name = |p: &str| format!("layer{k:02}.{p}");
            let conv_params = |kernel: usize, std: f64, rng: &mut ChaCha8Rng| {
                let f = f.expect("width");
                vec![
                    Parameter::new(name("weight"), normal_array::<T>(&[f, in_c, kernel, kernel], std, rng)),
                    Parameter::new(name("bias"), zeros::<T>(f)),
                ]
            };
            let (op, params, mut post) = match layer.kind {
                LayerKind::Conv { kernel } => {
                    let std = lecun(in_c * kernel * kernel);
                    (Op::Conv { stride: 1 }, conv_params(kernel, std, &mut rng), vec![])
                }
                LayerKind::NormActConv { kernel } => (
                    Op::Conv { stride: 1 },
                    conv_params(kernel, INIT_STD, &mut rng),
                    vec![Post::InstanceNorm, Post::Elu],
                ),
                LayerKind::Down => (
                    Op::Conv { stride: 2 },
                    conv_params(3, INIT_STD, &mut rng),
                    vec![Post::InstanceNorm, Post::Elu],
                ),
                LayerKind::LeakyConv { kernel, stride, norm } => {
                    let post = if norm {
                        vec![Post::InstanceNorm, Post::Leaky]
                    } else {
                        vec![Post::Leaky]
                    };
                    (Op::Conv { stride }, conv_params(kernel, INIT_STD, &mut rng), post)
                }
                LayerKind::Up => {
                    let f = f.expect("width");
                    (
                        Op::ConvTranspose,
                        vec![
                            Parameter::new(name("weight"), normal_array::<T>(&[in_c, f, 3, 3], INIT_STD, &mut rng)),
                            Parameter::new(name("bias"), zeros::<T>(f)),
                        ],
                        vec![Post::InstanceNorm, Post::Elu],
                    )
                }
                LayerKind::FullyConnected => {
                    let f = f.expect("width");
                    (
                        Op::Linear,
                        vec![
                            Parameter::new(name("weight"), normal_array::<T>(&[f, prev.len()], lecun(prev.len()), &mut rng)),
                            Parameter::new(name("bias"), zeros::<T>(f)),
                        ],
                        vec![],
                    )
                }
                LayerKind::ResBlock => {
                    let c = in_c;
                    (
                        Op::Residual,
                        vec![
                            Parameter::new(name("conv1.weight"), normal_array::<T>(&[c, c, 3, 3], INIT_STD, &mut rng)),
                            Parameter::new(name("conv1.bias"), zeros::<T>(c)),
                            Parameter::new(name("conv2.weight"), normal_array::<T>(&[c, c, 3, 3], INIT_STD, &mut rng)),
                            Parameter::new(name("conv2.bias"), zeros::<T>(c)),
                        ],
                        vec![],
                    )
                }
                LayerKind::ReshapeQ2F => (Op::Flatten, vec![], vec![]),
                LayerKind::ReshapeF2Q => {
                    let Shape::Image { h, .. } = out else { unreachable!("F2Q yields an image") };
                    (Op::Unflatten { side: h }, vec![], vec![])
                }
            };
            match layer.trailing_activation {
                Activation::None => {}
                Activation::Tanh => post.push(Post::Tanh),
                Activation::Elu => post.push(Post::Elu),
            }
            layers.push(Layer { op, params, post });
            prev = out;
        }
        Ok(Network {
            spec: spec.clone(),
            input,
            output: prev,
            layers,
        })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn output_shape(&self) -> Shape {
        self.output
    }

    pub fn parameters(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.layers.iter().flat_map(|l| l.params.iter())
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.layers.iter_mut().flat_map(|l| l.params.iter_mut())
    }

    pub fn parameter_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.parameters_mut().find(|p| p.name() == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().map(|p| p.len()).sum()
    }

    /// Forward pass over a batch: `(N, C, H, W)` or `(N, len)`.
    pub fn forward(&self, x: &Var<T>) -> Var<T> {
        let expected = self.input.dims();
        assert_eq!(
            &x.shape()[1..],
            expected.as_slice(),
            "network expects per-sample shape {}, got {:?}",
            self.input,
            x.shape()
        );
        let eps = T::from_f64_lossy(NORM_EPS);
        let slope = T::from_f64_lossy(LEAKY_SLOPE);
        let mut h = x.clone();
        for layer in &self.layers {
            let p = |i: usize| layer.params[i].var();
            h = match layer.op {
                Op::Conv { stride } => h.conv2d(p(0), p(1), stride),
                Op::ConvTranspose => h.conv_transpose2d(p(0), p(1), 2, 1, 1),
                Op::Linear => h.linear(p(0), p(1)),
                Op::Residual => {
                    let r = h.conv2d(p(0), p(1), 1).instance_norm(eps).elu().conv2d(p(2), p(3), 1);
                    &h + &r
                }
                Op::Flatten => {
                    let n = h.shape()[0];
                    let len = h.len() / n;
                    h.reshape(&[n, len])
                }
                Op::Unflatten { side } => {
                    let n = h.shape()[0];
                    let c = h.shape()[1] / (side * side);
                    h.reshape(&[n, c, side, side])
                }
            };
            for post in &layer.post {
                h = match post {
                    Post::InstanceNorm => h.instance_norm(eps),
                    Post::Elu => h.elu(),
                    Post::Tanh => h.tanh(),
                    Post::Leaky => h.leaky_relu(slope),
                };
            }
        }
        h
    }
}
