//! The two translation pathways.
//!
//! `G_A` (healthy to pathological) is a variational autoencoder: an encoder
//! for the healthy context (`gamma`), an encoder for the pathology
//! appearance (`delta`) and a decoder that turns the concatenated codes into
//! a residual. `G_B` (pathological to healthy) is a single fully
//! convolutional residual generator. Both residuals hold one labelmap logit
//! channel followed by one inpainting channel per image channel, and the
//! translated image is `l * p + (1 - l) * x`.

use ndarray::{Array2, Array3, Array4, ArrayD, Axis, IxDyn};
use pathogan_autograd::{Scalar, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netspec::{parse_netspec, reference, NetSpec, NetSpecError, Network, Shape, Symbols};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    NetSpec(#[from] NetSpecError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    /// Domain A.
    Healthy,
    /// Domain B.
    Pathological,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Labelmap noise and latent sampling enabled.
    Train,
    /// Noise off, latents collapse to their means.
    Test,
}

/// One multi-channel slice with values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSlice {
    /// `(channels, H, W)`
    pub data: Array3<f32>,
    pub patient_id: String,
    pub slice_index: usize,
    pub domain: Domain,
    /// Manual segmentation, kept for evaluation only.
    pub mask: Option<Array2<u8>>,
}

impl ImageSlice {
    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }
}

/// Stack slices into an `(N, C, H, W)` batch.
pub fn stack_batch<T: Scalar>(slices: &[&ImageSlice]) -> ArrayD<T> {
    let views: Vec<_> = slices.iter().map(|s| s.data.view().insert_axis(Axis(0))).collect();
    let stacked: Array4<f32> = ndarray::concatenate(Axis(0), &views).expect("uniform slice shapes");
    stacked.mapv(|v| T::from_f64_lossy(v as f64)).into_dyn()
}

/// Architecture strings, one per network role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub encoder: String,
    pub decoder: String,
    pub zb: String,
    pub discriminator: String,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            encoder: reference::ENCODER.into(),
            decoder: reference::DECODER.into(),
            zb: reference::ZB.into(),
            discriminator: reference::DISCRIMINATOR.into(),
        }
    }
}

impl ArchConfig {
    /// The reference topology with every channel count scaled to base width
    /// `w` (the reference uses 64).
    pub fn scaled(w: usize) -> Self {
        let res = vec![format!("R{}", 4 * w); 9].join(",");
        ArchConfig {
            encoder: format!("c7-{w},d{},d{},d{},d{},C1-15,Q2F,l(z*i)t,l(2*z)", 2 * w, 4 * w, 8 * w, 16 * w),
            decoder: format!(
                "l(i*i)e,l(i*i),F2Q,c3-{},u{},u{},C7-{}e,{res},u{},u{w},C7-r",
                16 * w,
                8 * w,
                4 * w,
                4 * w,
                2 * w
            ),
            zb: format!("c7-{w},d{},d{},{res},u{},u{w},C7-r", 2 * w, 4 * w, 2 * w),
            discriminator: format!("P4-{w},p4-{},p4-{},n4-{},C4-1", 2 * w, 4 * w, 8 * w),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_channels: usize,
    pub image_size: usize,
    /// Encoding length of each latent code.
    pub z: usize,
    pub arch: ArchConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_channels: 4,
            image_size: 240,
            z: 256,
            arch: ArchConfig::default(),
        }
    }
}

/// Parsed architectures of all six networks.
#[derive(Debug, Clone)]
pub struct ModelSpecs {
    pub symbols: Symbols,
    pub encoder: NetSpec,
    pub decoder: NetSpec,
    pub zb: NetSpec,
    pub discriminator: NetSpec,
}

impl ModelConfig {
    /// Symbol table; `i` is the image size divided by the encoder's total
    /// downsampling factor.
    pub fn symbols(&self) -> Result<Symbols, NetSpecError> {
        let probe = parse_netspec(&self.arch.encoder, &Symbols::new(self.z, 1, self.n_channels + 1))?;
        let factor = 1usize << probe.count_down();
        if self.image_size % factor != 0 {
            return Err(NetSpecError::ShapeMismatch {
                index: 0,
                reason: format!(
                    "image size {} is not divisible by the encoder downsampling factor {factor}",
                    self.image_size
                ),
            });
        }
        Ok(Symbols::new(self.z, self.image_size / factor, self.n_channels + 1))
    }

    pub fn specs(&self) -> Result<ModelSpecs, NetSpecError> {
        let symbols = self.symbols()?;
        Ok(ModelSpecs {
            encoder: parse_netspec(&self.arch.encoder, &symbols)?,
            decoder: parse_netspec(&self.arch.decoder, &symbols)?,
            zb: parse_netspec(&self.arch.zb, &symbols)?,
            discriminator: parse_netspec(&self.arch.discriminator, &symbols)?,
            symbols,
        })
    }

    pub fn image_shape(&self) -> Shape {
        Shape::image(self.n_channels, self.image_size, self.image_size)
    }

    /// Parse every network and check that the encoder emits `2z` values,
    /// the residual generators emit `n + 1` full-size maps and the
    /// discriminator emits an image.
    pub fn check_shapes(&self) -> Result<ModelSpecs, ModelError> {
        let specs = self.specs()?;
        let last = |spec: &NetSpec, input: Shape| -> Result<Shape, ModelError> {
            Ok(*crate::netspec::infer_shapes(spec, input)?.last().expect("non-empty spec"))
        };
        let image = self.image_shape();
        let enc_out = last(&specs.encoder, image)?;
        if enc_out != Shape::Vector(2 * self.z) {
            return Err(ModelError::ShapeMismatch(format!(
                "encoder must emit a vector of 2*z = {}, got {enc_out}",
                2 * self.z
            )));
        }
        let residual = Shape::image(self.n_channels + 1, self.image_size, self.image_size);
        for (role, out) in [
            (Role::Decoder, last(&specs.decoder, Shape::Vector(2 * self.z))?),
            (Role::Zb, last(&specs.zb, image)?),
        ] {
            if out != residual {
                return Err(ModelError::ShapeMismatch(format!("{} must emit {residual}, got {out}", role.key())));
            }
        }
        if let Shape::Vector(_) = last(&specs.discriminator, image)? {
            return Err(ModelError::ShapeMismatch("discriminator must emit a patch map".into()));
        }
        Ok(specs)
    }
}

/// Network roles, in checkpoint order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    GammaEnc,
    DeltaEnc,
    Decoder,
    Zb,
    DiscA,
    DiscB,
}

impl Role {
    pub const ALL: [Role; 6] = [
        Role::GammaEnc,
        Role::DeltaEnc,
        Role::Decoder,
        Role::Zb,
        Role::DiscA,
        Role::DiscB,
    ];
    pub const GENERATORS: [Role; 4] = [Role::GammaEnc, Role::DeltaEnc, Role::Decoder, Role::Zb];
    pub const DISCRIMINATORS: [Role; 2] = [Role::DiscA, Role::DiscB];

    pub fn key(&self) -> &'static str {
        match self {
            Role::GammaEnc => "gamma_enc",
            Role::DeltaEnc => "delta_enc",
            Role::Decoder => "decoder",
            Role::Zb => "zb",
            Role::DiscA => "disc_A",
            Role::DiscB => "disc_B",
        }
    }

    pub fn from_key(key: &str) -> Option<Role> {
        Role::ALL.into_iter().find(|r| r.key() == key)
    }
}

/// Gaussian code: mean, log variance and the sample passed downstream.
#[derive(Debug, Clone)]
pub struct LatentCode<T: Scalar> {
    pub mean: Var<T>,
    pub logvar: Var<T>,
    pub sample: Var<T>,
}

/// Raw residual maps and their activations.
#[derive(Debug, Clone)]
pub struct ResidualOutput<T: Scalar> {
    /// `(N, n + 1, H, W)`
    pub raw: Var<T>,
    /// Labelmap logit including the training noise, `(N, 1, H, W)`
    pub logit: Var<T>,
    /// `(N, 1, H, W)` in `(0, 1)`
    pub labelmap: Var<T>,
    /// `(N, n, H, W)` in `(-1, 1)`
    pub inpaint: Var<T>,
}

#[derive(Debug, Clone)]
pub struct TranslationResult<T: Scalar> {
    pub output: Var<T>,
    pub residual: ResidualOutput<T>,
    pub gamma: Option<LatentCode<T>>,
    /// Pathology code when it was encoded rather than drawn from the prior.
    pub delta: Option<LatentCode<T>>,
}

/// Source of the pathology code fed to the decoder of `G_A`.
#[derive(Debug, Clone)]
pub enum DeltaSource<T: Scalar> {
    /// Draw from N(0, I).
    Prior,
    Code(LatentCode<T>),
}

/// Both legs of one cycle.
#[derive(Debug, Clone)]
pub struct Cycle<T: Scalar> {
    pub hat: TranslationResult<T>,
    pub tilde: TranslationResult<T>,
}

pub fn standard_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> ArrayD<T> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || {
        let v: f64 = rng.sample(StandardNormal);
        T::from_f64_lossy(v)
    })
}

/// `mean + exp(logvar / 2) * eta` in training, `mean` at test time.
///
/// `eta` enters the graph as a constant, so gradients reach `mean` and
/// `logvar` only.
pub fn reparameterize<T: Scalar, R: Rng + ?Sized>(
    mean: &Var<T>,
    logvar: &Var<T>,
    mode: Mode,
    rng: &mut R,
) -> Var<T> {
    assert_eq!(mean.shape(), logvar.shape(), "mean and logvar shapes differ");
    match mode {
        Mode::Test => mean.clone(),
        Mode::Train => {
            let eta = Var::constant(standard_normal(mean.shape(), rng));
            let std = logvar.scale(T::from_f64_lossy(0.5)).exp();
            mean + &(&std * &eta)
        }
    }
}

/// Split raw residual maps into labelmap and inpaintings.
///
/// In training the labelmap logit is perturbed with unit Gaussian noise
/// before the sigmoid.
pub fn activate<T: Scalar, R: Rng + ?Sized>(raw: &Var<T>, mode: Mode, rng: &mut R) -> ResidualOutput<T> {
    let s = raw.shape();
    let (n, r, h, w) = (s[0], s[1], s[2], s[3]);
    let logit = raw.narrow(1, 0, 1);
    let logit = match mode {
        Mode::Test => logit,
        Mode::Train => &logit + &Var::constant(standard_normal(&[n, 1, h, w], rng)),
    };
    ResidualOutput {
        raw: raw.clone(),
        labelmap: logit.sigmoid(),
        logit,
        inpaint: raw.narrow(1, 1, r - 1).tanh(),
    }
}

/// `l * p + (1 - l) * x` with `l` broadcast over channels.
pub fn blend<T: Scalar>(x: &Var<T>, residual: &ResidualOutput<T>) -> Result<Var<T>, ModelError> {
    let (l, p) = (&residual.labelmap, &residual.inpaint);
    if x.shape() != p.shape() {
        return Err(ModelError::ShapeMismatch(format!(
            "image {:?} vs inpainting {:?}",
            x.shape(),
            p.shape()
        )));
    }
    let s = x.shape();
    if l.shape() != [s[0], 1, s[2], s[3]] {
        return Err(ModelError::ShapeMismatch(format!(
            "image {:?} vs labelmap {:?}",
            x.shape(),
            l.shape()
        )));
    }
    let keep = l.rsub_scalar(T::one());
    Ok(&(l * p) + &(&keep * x))
}

/// All six networks of the model.
#[derive(Debug, Clone)]
pub struct PathoGan<T: Scalar> {
    pub config: ModelConfig,
    pub gamma_enc: Network<T>,
    pub delta_enc: Network<T>,
    pub decoder: Network<T>,
    pub zb: Network<T>,
    pub disc_a: Network<T>,
    pub disc_b: Network<T>,
}

impl<T: Scalar> PathoGan<T> {
    /// Build with per-role seeds derived from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let specs = config.check_shapes()?;
        let image = config.image_shape();
        let z = config.z;
        let seed_for = |k: u64| seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k);
        Ok(PathoGan {
            gamma_enc: Network::build(&specs.encoder, image, seed_for(0))?,
            delta_enc: Network::build(&specs.encoder, image, seed_for(1))?,
            decoder: Network::build(&specs.decoder, Shape::Vector(2 * z), seed_for(2))?,
            zb: Network::build(&specs.zb, image, seed_for(3))?,
            disc_a: Network::build(&specs.discriminator, image, seed_for(4))?,
            disc_b: Network::build(&specs.discriminator, image, seed_for(5))?,
            config,
        })
    }

    pub fn network(&self, role: Role) -> &Network<T> {
        match role {
            Role::GammaEnc => &self.gamma_enc,
            Role::DeltaEnc => &self.delta_enc,
            Role::Decoder => &self.decoder,
            Role::Zb => &self.zb,
            Role::DiscA => &self.disc_a,
            Role::DiscB => &self.disc_b,
        }
    }

    pub fn network_mut(&mut self, role: Role) -> &mut Network<T> {
        match role {
            Role::GammaEnc => &mut self.gamma_enc,
            Role::DeltaEnc => &mut self.delta_enc,
            Role::Decoder => &mut self.decoder,
            Role::Zb => &mut self.zb,
            Role::DiscA => &mut self.disc_a,
            Role::DiscB => &mut self.disc_b,
        }
    }

    fn check_image(&self, x: &Var<T>) -> Result<(), ModelError> {
        let c = &self.config;
        let s = x.shape();
        if s.len() != 4 || s[1] != c.n_channels || s[2] != c.image_size || s[3] != c.image_size {
            return Err(ModelError::ShapeMismatch(format!(
                "expected (N, {}, {}, {}), got {s:?}",
                c.n_channels, c.image_size, c.image_size
            )));
        }
        Ok(())
    }

    fn encode<R: Rng + ?Sized>(&self, net: &Network<T>, x: &Var<T>, mode: Mode, rng: &mut R) -> LatentCode<T> {
        let z = self.config.z;
        let h = net.forward(x);
        let mean = h.narrow(1, 0, z);
        let logvar = h.narrow(1, z, z);
        let sample = reparameterize(&mean, &logvar, mode, rng);
        LatentCode { mean, logvar, sample }
    }

    /// `delta = Delta_B(l * x)`.
    pub fn encode_pathology<R: Rng + ?Sized>(
        &self,
        x_b: &Var<T>,
        labelmap: &Var<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<LatentCode<T>, ModelError> {
        self.check_image(x_b)?;
        let s = x_b.shape();
        if labelmap.shape() != [s[0], 1, s[2], s[3]] {
            return Err(ModelError::ShapeMismatch(format!(
                "labelmap {:?} for image {:?}",
                labelmap.shape(),
                s
            )));
        }
        Ok(self.encode(&self.delta_enc, &(labelmap * x_b), mode, rng))
    }

    /// Healthy to pathological.
    pub fn generator_a_forward<R: Rng + ?Sized>(
        &self,
        x_a: &Var<T>,
        delta: DeltaSource<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<TranslationResult<T>, ModelError> {
        self.check_image(x_a)?;
        let n = x_a.shape()[0];
        let gamma = self.encode(&self.gamma_enc, x_a, mode, rng);
        let (delta_sample, delta) = match delta {
            DeltaSource::Prior => (Var::constant(standard_normal(&[n, self.config.z], rng)), None),
            DeltaSource::Code(code) => (code.sample.clone(), Some(code)),
        };
        if delta_sample.shape() != gamma.sample.shape() {
            return Err(ModelError::ShapeMismatch(format!(
                "delta {:?} vs gamma {:?}",
                delta_sample.shape(),
                gamma.sample.shape()
            )));
        }
        let code = Var::concat(&[gamma.sample.clone(), delta_sample], 1);
        let raw = self.decoder.forward(&code);
        let residual = activate(&raw, mode, rng);
        let output = blend(x_a, &residual)?;
        Ok(TranslationResult {
            output,
            residual,
            gamma: Some(gamma),
            delta,
        })
    }

    /// Pathological to healthy.
    pub fn generator_b_forward<R: Rng + ?Sized>(
        &self,
        x_b: &Var<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<TranslationResult<T>, ModelError> {
        self.check_image(x_b)?;
        let raw = self.zb.forward(x_b);
        let residual = activate(&raw, mode, rng);
        let output = blend(x_b, &residual)?;
        Ok(TranslationResult {
            output,
            residual,
            gamma: None,
            delta: None,
        })
    }

    /// A -> B -> A with the pathology code drawn from the prior.
    pub fn cycle_a<R: Rng + ?Sized>(&self, x_a: &Var<T>, mode: Mode, rng: &mut R) -> Result<Cycle<T>, ModelError> {
        let hat = self.generator_a_forward(x_a, DeltaSource::Prior, mode, rng)?;
        let tilde = self.generator_b_forward(&hat.output, mode, rng)?;
        Ok(Cycle { hat, tilde })
    }

    /// B -> A -> B; the way back encodes the pathology found on the way out.
    pub fn cycle_b<R: Rng + ?Sized>(&self, x_b: &Var<T>, mode: Mode, rng: &mut R) -> Result<Cycle<T>, ModelError> {
        let hat = self.generator_b_forward(x_b, mode, rng)?;
        let delta = self.encode_pathology(x_b, &hat.residual.labelmap, mode, rng)?;
        let tilde = self.generator_a_forward(&hat.output, DeltaSource::Code(delta), mode, rng)?;
        Ok(Cycle { hat, tilde })
    }

    /// Patch score map of the discriminator for `domain`.
    pub fn discriminate(&self, domain: Domain, y: &Var<T>) -> Result<Var<T>, ModelError> {
        self.check_image(y)?;
        Ok(match domain {
            Domain::Healthy => self.disc_a.forward(y),
            Domain::Pathological => self.disc_b.forward(y),
        })
    }

    pub fn parameter_count(&self) -> usize {
        Role::ALL.iter().map(|r| self.network(*r).parameter_count()).sum()
    }
}
