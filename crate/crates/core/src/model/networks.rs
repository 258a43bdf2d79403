//! The four networks: anatomy encoder (U-Net), style encoder, reconstruction
//! decoder with style reconstruction modules, and segmentor.

use cddsa_autograd::nn::{BatchNorm2d, Conv2d, Linear};
use cddsa_autograd::{Binder, ParamStore, Scalar, Tensor, Var};
use rand::{Rng, RngCore};

use super::activation::anatomy_activation;
use super::ModelConfig;
use crate::error::{CddsaError, Result};

/// conv3×3 → BN → LeakyReLU, twice.
#[derive(Clone, Debug)]
struct DoubleConv {
    c1: Conv2d,
    n1: BatchNorm2d,
    c2: Conv2d,
    n2: BatchNorm2d,
}

impl DoubleConv {
    fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        DoubleConv {
            c1: Conv2d::same3(store, &format!("{name}.conv1"), cin, cout, rng),
            n1: BatchNorm2d::new(store, &format!("{name}.bn1"), cout),
            c2: Conv2d::same3(store, &format!("{name}.conv2"), cout, cout, rng),
            n2: BatchNorm2d::new(store, &format!("{name}.bn2"), cout),
        }
    }

    fn forward<'t, T: Scalar>(&self, b: &Binder<'t, T>, x: Var<'t, T>, slope: T) -> Result<Var<'t, T>> {
        let h = self.n1.forward(b, self.c1.forward(b, x)?)?.leaky_relu(slope);
        Ok(self.n2.forward(b, self.c2.forward(b, h)?)?.leaky_relu(slope))
    }
}

#[derive(Clone, Debug)]
struct UpBlock {
    reduce: Conv2d,
    norm: BatchNorm2d,
    fuse: DoubleConv,
}

/// Five-scale U-Net with a `T`-channel head.
#[derive(Clone, Debug)]
pub struct AnatomyEncoder {
    down: Vec<DoubleConv>,
    up: Vec<UpBlock>,
    head: Conv2d,
}

impl AnatomyEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Self {
        let ch = &cfg.unet_channels;
        let mut down = Vec::new();
        let mut cin = cfg.in_channels;
        for (l, &c) in ch.iter().enumerate() {
            down.push(DoubleConv::new(store, &format!("ana.down{l}"), cin, c, rng));
            cin = c;
        }
        let mut up = Vec::new();
        for l in (0..ch.len() - 1).rev() {
            up.push(UpBlock {
                reduce: Conv2d::same3(store, &format!("ana.up{l}.reduce"), ch[l + 1], ch[l], rng),
                norm: BatchNorm2d::new(store, &format!("ana.up{l}.bn"), ch[l]),
                fuse: DoubleConv::new(store, &format!("ana.up{l}.fuse"), 2 * ch[l], ch[l], rng),
            });
        }
        let head = Conv2d::new(store, "ana.head", ch[0], cfg.anatomy_channels, 1, 1, 0, true, rng);
        AnatomyEncoder { down, up, head }
    }

    /// Pre-activation logits `(N, T, H, W)`.
    pub fn logits<'t, T: Scalar>(&self, b: &Binder<'t, T>, x: Var<'t, T>, cfg: &ModelConfig) -> Result<Var<'t, T>> {
        let slope = T::of(cfg.leaky_slope);
        let mut skips = Vec::with_capacity(self.down.len());
        let mut h = x;
        for (l, block) in self.down.iter().enumerate() {
            if l > 0 {
                h = h.max_pool2()?;
            }
            h = block.forward(b, h, slope)?;
            skips.push(h);
        }
        skips.pop();
        for block in &self.up {
            let skip = skips.pop().expect("one skip per up block");
            let u = block.norm.forward(b, block.reduce.forward(b, h.upsample2()?)?)?.leaky_relu(slope);
            h = block.fuse.forward(b, Var::concat(&[skip, u], 1)?, slope)?;
        }
        Ok(self.head.forward(b, h)?)
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        b: &Binder<'t, T>,
        x: Var<'t, T>,
        cfg: &ModelConfig,
        noise: Option<&mut dyn RngCore>,
    ) -> Result<Var<'t, T>> {
        let logits = self.logits(b, x, cfg)?;
        anatomy_activation(logits, cfg.activation, cfg.gumbel_temperature, noise)
    }
}

/// Strided conv blocks, global average pooling, then mean and log-variance heads.
#[derive(Clone, Debug)]
pub struct StyleEncoder {
    blocks: Vec<Conv2d>,
    mean: Linear,
    logvar: Linear,
}

impl StyleEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut cin = cfg.in_channels;
        let mut blocks = Vec::new();
        for (i, &c) in cfg.style_channels.iter().enumerate() {
            blocks.push(Conv2d::new(store, &format!("sty.block{i}"), cin, c, 3, 2, 1, true, rng));
            cin = c;
        }
        let mean = Linear::new(store, "sty.fc_mean", cin, cfg.style_dim, rng);
        let logvar = Linear::new(store, "sty.fc_logvar", cin, cfg.style_dim, rng);
        // start near the unit Gaussian prior
        scale_param(store, logvar.weight, 0.1);
        StyleEncoder { blocks, mean, logvar }
    }

    /// `(mean, log-variance)`, each `(N, Z)`.
    pub fn forward<'t, T: Scalar>(&self, b: &Binder<'t, T>, x: Var<'t, T>, cfg: &ModelConfig) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let slope = T::of(cfg.leaky_slope);
        let mut h = x;
        for block in &self.blocks {
            h = block.forward(b, h)?.leaky_relu(slope);
        }
        let s = h.shape();
        let pooled = h.mean_axes(&[2, 3]).reshape(&[s[0], s[1]])?;
        Ok((self.mean.forward(b, pooled)?, self.logvar.forward(b, pooled)?))
    }
}

fn scale_param<T: Scalar>(store: &mut ParamStore<T>, id: cddsa_autograd::ParamId, factor: f64) {
    let f = T::of(factor);
    for v in store.get_mut(id).data_mut() {
        *v *= f;
    }
}

/// Style reconstruction module: FC → ReLU → FC producing AdaIN scale and bias.
#[derive(Clone, Debug)]
pub struct Srm {
    fc1: Linear,
    fc2: Linear,
    pub channels: usize,
}

impl Srm {
    fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, z: usize, hidden: usize, channels: usize, rng: &mut R) -> Self {
        let fc1 = Linear::new(store, &format!("{name}.fc1"), z, hidden, rng);
        let fc2 = Linear::new(store, &format!("{name}.fc2"), hidden, 2 * channels, rng);
        scale_param(store, fc2.weight, 0.1);
        // unit scale at initialisation
        let bias = store.get_mut(fc2.bias).data_mut();
        for v in &mut bias[..channels] {
            *v = T::one();
        }
        Srm { fc1, fc2, channels }
    }

    /// `(gamma, beta)`, each `(N, C')`.
    pub fn forward<'t, T: Scalar>(&self, b: &Binder<'t, T>, style: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let h = self.fc1.forward(b, style)?.relu();
        let out = self.fc2.forward(b, h)?;
        Ok((out.narrow(1, 0, self.channels)?, out.narrow(1, self.channels, self.channels)?))
    }
}

/// Four conv blocks; AdaIN driven by an SRM follows each of the first three.
#[derive(Clone, Debug)]
pub struct Decoder {
    blocks: Vec<Conv2d>,
    srms: Vec<Srm>,
    out: Conv2d,
}

impl Decoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut cin = cfg.anatomy_channels;
        let mut blocks = Vec::new();
        let mut srms = Vec::new();
        for (i, &c) in cfg.decoder_channels.iter().enumerate() {
            blocks.push(Conv2d::same3(store, &format!("dec.block{i}"), cin, c, rng));
            srms.push(Srm::new(store, &format!("dec.srm{i}"), cfg.style_dim, cfg.srm_hidden(c), c, rng));
            cin = c;
        }
        let out = Conv2d::same3(store, "dec.out", cin, cfg.in_channels, rng);
        Decoder { blocks, srms, out }
    }

    pub fn srm(&self, index: usize) -> Result<&Srm> {
        self.srms
            .get(index)
            .ok_or_else(|| CddsaError::Config(format!("SRM index {index} out of range 0..{}", self.srms.len())))
    }

    /// Image `(N, Co, H, W)` in `[0, 1]`. `style` is `(N, Z)`.
    pub fn forward<'t, T: Scalar>(&self, b: &Binder<'t, T>, style: Var<'t, T>, anatomy: Var<'t, T>, cfg: &ModelConfig) -> Result<Var<'t, T>> {
        let slope = T::of(cfg.leaky_slope);
        let eps = T::of(cfg.adain_eps);
        let mut h = anatomy;
        for (block, srm) in self.blocks.iter().zip(&self.srms) {
            let (gamma, beta) = srm.forward(b, style)?;
            h = block.forward(b, h)?.adain(gamma, beta, eps)?.leaky_relu(slope);
        }
        Ok(self.out.forward(b, h)?.sigmoid())
    }
}

/// conv3×3 → BN → LeakyReLU, then conv1×1 → softmax over classes.
#[derive(Clone, Debug)]
pub struct Segmentor {
    conv: Conv2d,
    norm: BatchNorm2d,
    classify: Conv2d,
}

impl Segmentor {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Self {
        Segmentor {
            conv: Conv2d::same3(store, "seg.conv", cfg.anatomy_channels, cfg.segmentor_hidden, rng),
            norm: BatchNorm2d::new(store, "seg.bn", cfg.segmentor_hidden),
            classify: Conv2d::new(store, "seg.classify", cfg.segmentor_hidden, cfg.num_classes, 1, 1, 0, true, rng),
        }
    }

    /// Class probabilities `(N, K, H, W)`.
    pub fn forward<'t, T: Scalar>(&self, b: &Binder<'t, T>, anatomy: Var<'t, T>, cfg: &ModelConfig) -> Result<Var<'t, T>> {
        let h = self.norm.forward(b, self.conv.forward(b, anatomy)?)?.leaky_relu(T::of(cfg.leaky_slope));
        Ok(self.classify.forward(b, h)?.softmax(1))
    }
}

/// Adds a leading batch axis of size one.
pub(crate) fn batch_of_one<T: Scalar>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    Ok(image.clone().reshape(&shape)?)
}
