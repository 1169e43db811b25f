//! Learnable networks: the point-wise back-projection layer, the refinement
//! U-net and the Wasserstein critic.
//!
//! Networks own their parameters as [`Tensor`]s. A forward pass first binds
//! the parameters onto a [`Graph`] (one [`Var`] per tensor, in
//! [`Network::params`] order) and then records its operations there.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::analytic::prepare_inputs;
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::image::{fov_mask, Image, Sinogram};
use crate::tensor::{Graph, Real, Tensor, Var};

/// U-net kernel size.
pub const KERNEL: usize = 5;
/// Default U-net width.
pub const UNET_FILTERS: usize = 32;
/// Critic convolution widths; odd layers stride 1, even layers stride 2.
pub const CRITIC_FILTERS: [usize; 6] = [64, 64, 128, 128, 256, 256];
pub const CRITIC_HIDDEN: usize = 1024;
pub const LEAKY_SLOPE: f64 = 0.2;
/// Default critic weight-clipping bound.
pub const CLIP: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BpVariant {
    /// One length-N vector per sinogram sample: `Nv' * Nd * N` weights.
    ViewDependent,
    /// One length-N vector shared by every sample: `N` weights.
    Lite,
}

/// How the back-projection sum is normalized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BpScaling {
    /// `pi / Nv'` with `Nv'` the view count of the input at hand, as in FBP.
    PerView,
    /// `pi / Nv'` frozen at the training view count; other view counts need
    /// [`lite_rescale`].
    Legacy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Padding {
    /// Zero padding; every layer keeps the spatial size.
    Same,
    /// Unpadded convolutions. The input is mirror-padded once and skip
    /// features are center-cropped so the output still matches the input.
    Valid,
}

/// Network configurations compared in the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Deer,
    DeerLite,
    DeerSino,
    DeerFbp,
    DeerNowgan,
}

/// The two images concatenated in front of the U-net.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RefineInputs {
    BpAndFbp,
    BpTwice,
    FbpTwice,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Deer,
        Variant::DeerLite,
        Variant::DeerSino,
        Variant::DeerFbp,
        Variant::DeerNowgan,
    ];

    /// `None` when the variant has no learned back-projection.
    pub fn bp_variant(self) -> Option<BpVariant> {
        match self {
            Variant::DeerFbp => None,
            Variant::DeerLite => Some(BpVariant::Lite),
            _ => Some(BpVariant::ViewDependent),
        }
    }

    pub fn refine_inputs(self) -> RefineInputs {
        match self {
            Variant::DeerSino => RefineInputs::BpTwice,
            Variant::DeerFbp => RefineInputs::FbpTwice,
            _ => RefineInputs::BpAndFbp,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Deer => "DEER",
            Variant::DeerLite => "DEER-Lite",
            Variant::DeerSino => "DEER-Sino",
            Variant::DeerFbp => "DEER-FBP",
            Variant::DeerNowgan => "DEER-NoWGAN",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Architecture of a generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n: usize,
    pub n_det: usize,
    /// Views `Nv'` of the dense, filtered sinogram fed to the BP layer.
    pub nv_dense: usize,
    pub variant: Variant,
    pub padding: Padding,
    pub bp_scaling: BpScaling,
    pub unet_filters: usize,
    /// ReLU on the last U-net layer as well.
    pub final_relu: bool,
}

impl ModelConfig {
    pub fn new(n: usize, nv_dense: usize, variant: Variant) -> Self {
        ModelConfig {
            n,
            n_det: n,
            nv_dense,
            variant,
            padding: Padding::Same,
            bp_scaling: BpScaling::PerView,
            unet_filters: UNET_FILTERS,
            final_relu: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < Image::MIN_SIZE {
            return Err(Error::Config(format!(
                "n = {} below {}",
                self.n,
                Image::MIN_SIZE
            )));
        }
        if self.padding == Padding::Valid && self.n < 4 * KERNEL * 2 {
            return Err(Error::Config(format!(
                "valid padding needs n >= {}, got {}",
                8 * KERNEL,
                self.n
            )));
        }
        if self.n_det == 0 || self.nv_dense == 0 || self.unet_filters == 0 {
            return Err(Error::Config(
                "n_det, nv_dense and unet_filters must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Access to a network's trainable tensors in a fixed order.
pub trait Network<T: Real> {
    fn params(&self) -> Vec<(String, &Tensor<T>)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)>;

    /// Registers every parameter on `g`; gradients flow to trainable ones.
    fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params().into_iter().map(|(_, t)| g.input(t)).collect()
    }

    /// Registers every parameter as a constant.
    fn bind_frozen(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|(_, t)| g.frozen(t))
            .collect()
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    fn set_trainable(&mut self, trainable: bool) {
        for (_, t) in self.params_mut() {
            let taken = std::mem::replace(t, Tensor::zeros([0]));
            *t = taken.with_requires_grad(trainable);
        }
    }
}

fn he_normal<T: Real>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Result<Tensor<T>> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).map_err(|e| Error::Invalid(e.to_string()))?;
    let len = shape.iter().product();
    let data = (0..len).map(|_| T::lit(dist.sample(rng))).collect();
    Tensor::param(shape.to_vec(), data)
}

fn fov_constant<T: Real>(g: &mut Graph<T>, batch: usize, n: usize) -> Result<Var> {
    let mask = fov_mask(n);
    let data = (0..batch)
        .flat_map(|_| mask.iter().map(|&m| if m { T::one() } else { T::zero() }))
        .collect();
    g.constant([batch, 1, n, n], data)
}

// ----- back-projection ---------------------------------------------------

/// Point-wise fully-connected back-projection without bias: every filtered
/// sinogram sample scales its weight vector into a line of N pixels, the
/// lines of one view form an image that is rotated to the view angle, and
/// the views are summed and normalized.
#[derive(Clone, Debug)]
pub struct BpLayer<T: Real = f32> {
    variant: BpVariant,
    n: usize,
    n_det: usize,
    /// View count the weights were built for.
    n_views: usize,
    scaling: BpScaling,
    weights: Tensor<T>,
}

impl<T: Real> BpLayer<T> {
    /// Weights start at 1 plus uniform noise in `[-0.01, 0.01]`, i.e. close
    /// to classical back-projection.
    pub fn new(
        variant: BpVariant,
        n: usize,
        n_det: usize,
        n_views: usize,
        scaling: BpScaling,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut layer = Self::uniform(variant, n, n_det, n_views, scaling, 1.0)?;
        for w in layer.weights.data_mut() {
            *w += T::lit(rng.random_range(-0.01..=0.01));
        }
        Ok(layer)
    }

    /// Every weight equal to `value`.
    pub fn uniform(
        variant: BpVariant,
        n: usize,
        n_det: usize,
        n_views: usize,
        scaling: BpScaling,
        value: f64,
    ) -> Result<Self> {
        if n < Image::MIN_SIZE || n_det == 0 || n_views == 0 {
            return Err(Error::Invalid(format!(
                "back-projection layer needs n >= {}, n_det >= 1, views >= 1 (got {n}, {n_det}, {n_views})",
                Image::MIN_SIZE
            )));
        }
        let shape = match variant {
            BpVariant::ViewDependent => vec![n_views, n_det, n],
            BpVariant::Lite => vec![n],
        };
        let len = shape.iter().product();
        Ok(BpLayer {
            variant,
            n,
            n_det,
            n_views,
            scaling,
            weights: Tensor::param(shape, vec![T::lit(value); len])?,
        })
    }

    /// Rebuilds a layer around stored weights, checking their shape.
    pub fn from_weights(
        variant: BpVariant,
        n: usize,
        n_det: usize,
        n_views: usize,
        scaling: BpScaling,
        weights: Tensor<T>,
    ) -> Result<Self> {
        let mut layer = Self::uniform(variant, n, n_det, n_views, scaling, 0.0)?;
        if weights.shape() != layer.weights.shape() {
            return Err(Error::shape(
                "bp_layer",
                format!(
                    "weights {:?}, expected {:?}",
                    weights.shape(),
                    layer.weights.shape()
                ),
            ));
        }
        layer.weights = weights.with_requires_grad(true);
        Ok(layer)
    }

    pub fn variant(&self) -> BpVariant {
        self.variant
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_det(&self) -> usize {
        self.n_det
    }

    pub fn n_views(&self) -> usize {
        self.n_views
    }

    pub fn scaling(&self) -> BpScaling {
        self.scaling
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }

    /// Checks that a sinogram with `views` views and `dets` detectors can
    /// be back-projected.
    pub fn check_input(&self, views: usize, dets: usize) -> Result<()> {
        if dets != self.n_det {
            return Err(Error::shape(
                "bp_forward",
                format!(
                    "sinogram has {dets} detectors, layer expects {}",
                    self.n_det
                ),
            ));
        }
        if self.variant == BpVariant::ViewDependent && views != self.n_views {
            return Err(Error::ViewMismatch {
                expected: self.n_views,
                actual: views,
            });
        }
        if views == 0 {
            return Err(Error::Invalid("cannot back-project zero views".into()));
        }
        Ok(())
    }

    /// `sino` is `[B, V, Nd]` (already filtered); returns `[B, 1, N, N]`.
    pub fn forward(&self, g: &mut Graph<T>, w: Var, sino: Var, angles: &[f64]) -> Result<Var> {
        let shape = g.shape(sino).to_vec();
        if shape.len() != 3 {
            return Err(Error::shape(
                "bp_forward",
                format!("sinogram batch must be [B, V, Nd], got {shape:?}"),
            ));
        }
        let (batch, views) = (shape[0], shape[1]);
        self.check_input(views, shape[2])?;
        if angles.len() != views {
            return Err(Error::shape(
                "bp_forward",
                format!("{views} views but {} angles", angles.len()),
            ));
        }
        let lines = g.pointwise_lines(sino, w)?;
        let rotated = g.rotate(lines, angles, self.n, 1.0)?;
        let summed = g.sum_axis(rotated, 1)?;
        let divisor = match self.scaling {
            BpScaling::PerView => views,
            BpScaling::Legacy => self.n_views,
        };
        let scaled = g.scale(summed, T::lit(PI / divisor as f64));
        let img = g.reshape(scaled, [batch, 1, self.n, self.n])?;
        let mask = fov_constant(g, batch, self.n)?;
        g.mul(img, mask)
    }
}

impl<T: Real> Network<T> for BpLayer<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![("bp.weights".into(), &self.weights)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![("bp.weights".into(), &mut self.weights)]
    }
}

/// Back-projects one filtered sinogram with `layer`'s current weights.
pub fn bp_forward(layer: &BpLayer<f32>, filtered: &Sinogram) -> Result<Image> {
    layer.check_input(filtered.n_views(), filtered.n_det())?;
    let mut g = Graph::new();
    let w = g.frozen(layer.weights());
    let sino = g.constant(
        [1, filtered.n_views(), filtered.n_det()],
        filtered.data().to_vec(),
    )?;
    let out = layer.forward(&mut g, w, sino, filtered.angles())?;
    Image::new(layer.n(), filtered.det_spacing(), g.value(out).to_vec())
}

/// Magnitude correction for a back-projection trained at `nv_train` views
/// and applied at `nv_test`. With per-view scaling the sum is already
/// normalized and this is the identity; with legacy scaling the image is
/// multiplied by `nv_train / nv_test`.
pub fn lite_rescale(
    img: &Image,
    nv_train: usize,
    nv_test: usize,
    scaling: BpScaling,
) -> Result<Image> {
    if nv_test == 0 || nv_train == 0 {
        return Err(Error::Invalid(format!(
            "view counts must be >= 1 (train {nv_train}, test {nv_test})"
        )));
    }
    Ok(match scaling {
        BpScaling::PerView => img.clone(),
        BpScaling::Legacy => img.scaled((nv_train as f64 / nv_test as f64) as f32),
    })
}

// ----- refinement U-net -----------------------------------------------------

#[derive(Clone, Debug)]
struct ConvLayer<T: Real> {
    name: String,
    w: Tensor<T>,
    b: Tensor<T>,
}

impl<T: Real> ConvLayer<T> {
    fn new(
        name: String,
        cin: usize,
        cout: usize,
        k: usize,
        transpose: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let shape = if transpose {
            [cin, cout, k, k]
        } else {
            [cout, cin, k, k]
        };
        Ok(ConvLayer {
            name,
            w: he_normal(&shape, cin * k * k, rng)?,
            b: Tensor::param([cout], vec![T::zero(); cout])?,
        })
    }
}

/// Nine-layer encoder-decoder: four convolutions, a bottleneck convolution
/// and four transposed convolutions, all 5x5 with stride 1. Decoder layers
/// 6..9 read the previous output concatenated with the output of encoder
/// layer 4..1.
#[derive(Clone, Debug)]
pub struct UNet<T: Real = f32> {
    padding: Padding,
    final_relu: bool,
    layers: Vec<ConvLayer<T>>,
}

impl<T: Real> UNet<T> {
    /// He-normal weights, zero biases.
    pub fn new(
        filters: usize,
        padding: Padding,
        final_relu: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(9);
        for i in 0..9 {
            let (cin, cout, transpose) = match i {
                0 => (2, filters, false),
                1..=4 => (filters, filters, false),
                5..=7 => (2 * filters, filters, true),
                _ => (2 * filters, 1, true),
            };
            layers.push(ConvLayer::new(
                format!("unet.l{}", i + 1),
                cin,
                cout,
                KERNEL,
                transpose,
                rng,
            )?);
        }
        Ok(UNet {
            padding,
            final_relu,
            layers,
        })
    }

    pub fn padding(&self) -> Padding {
        self.padding
    }

    /// `x` is `[B, 2, N, N]`; `p` holds this network's bound parameters.
    pub fn forward(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 2 {
            return Err(Error::shape(
                "refine",
                format!("input must be [B, 2, N, N], got {shape:?}"),
            ));
        }
        let pad = match self.padding {
            Padding::Same => KERNEL / 2,
            Padding::Valid => 0,
        };
        let mut h = match self.padding {
            Padding::Same => x,
            Padding::Valid => g.pad2d_reflect(x, KERNEL / 2)?,
        };
        let mut skips = Vec::with_capacity(4);
        for l in 0..5 {
            let c = g.conv2d(h, p[2 * l], Some(p[2 * l + 1]), 1, pad)?;
            h = g.relu(c);
            if l < 4 {
                skips.push(h);
            }
        }
        for l in 5..9 {
            let skip = skips.pop().expect("four skips");
            let skip = center_crop(g, skip, g.shape(h)[2])?;
            let cat = g.concat(&[h, skip], 1)?;
            let c = g.conv_transpose2d(cat, p[2 * l], Some(p[2 * l + 1]), 1, pad)?;
            h = if l < 8 || self.final_relu {
                g.relu(c)
            } else {
                c
            };
        }
        Ok(h)
    }
}

fn center_crop<T: Real>(g: &mut Graph<T>, x: Var, size: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s[2] == size && s[3] == size {
        return Ok(x);
    }
    if s[2] < size || s[3] < size {
        return Err(Error::shape(
            "center_crop",
            format!("{s:?} smaller than {size}"),
        ));
    }
    g.crop2d(x, (s[2] - size) / 2, (s[3] - size) / 2, size, size)
}

impl<T: Real> Network<T> for UNet<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    (format!("{}.w", l.name), &l.w),
                    (format!("{}.b", l.name), &l.b),
                ]
            })
            .collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    (format!("{}.w", l.name), &mut l.w),
                    (format!("{}.b", l.name), &mut l.b),
                ]
            })
            .collect()
    }
}

// ----- critic -----------------------------------------------------------------

/// Wasserstein critic: six 3x3 convolutions with leaky ReLU, then a
/// 1024-unit hidden layer and a linear scalar head.
#[derive(Clone, Debug)]
pub struct Discriminator<T: Real = f32> {
    n: usize,
    convs: Vec<ConvLayer<T>>,
    fc1_w: Tensor<T>,
    fc1_b: Tensor<T>,
    fc2_w: Tensor<T>,
    fc2_b: Tensor<T>,
}

fn critic_side(n: usize, layer: usize) -> usize {
    // 3x3, pad 1: stride-2 layers halve (rounding up)
    let mut s = n;
    for l in 0..=layer {
        if l % 2 == 1 {
            s = (s - 1) / 2 + 1;
        }
    }
    s
}

impl<T: Real> Discriminator<T> {
    /// He-normal weights clipped to `[-clip, clip]`, zero biases.
    pub fn new(n: usize, clip: f64, rng: &mut impl Rng) -> Result<Self> {
        if n < Image::MIN_SIZE {
            return Err(Error::Invalid(format!(
                "critic input side {n} < {}",
                Image::MIN_SIZE
            )));
        }
        let mut convs = Vec::with_capacity(6);
        let mut cin = 1;
        for (i, &f) in CRITIC_FILTERS.iter().enumerate() {
            convs.push(ConvLayer::new(
                format!("disc.c{}", i + 1),
                cin,
                f,
                3,
                false,
                rng,
            )?);
            cin = f;
        }
        let side = critic_side(n, 5);
        let flat = cin * side * side;
        let mut d = Discriminator {
            n,
            convs,
            fc1_w: he_normal(&[CRITIC_HIDDEN, flat], flat, rng)?,
            fc1_b: Tensor::param([CRITIC_HIDDEN], vec![T::zero(); CRITIC_HIDDEN])?,
            fc2_w: he_normal(&[1, CRITIC_HIDDEN], CRITIC_HIDDEN, rng)?,
            fc2_b: Tensor::param([1], vec![T::zero()])?,
        };
        d.clip(clip);
        Ok(d)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Clamps every weight and bias to `[-c, c]`.
    pub fn clip(&mut self, c: f64) {
        let (lo, hi) = (T::lit(-c), T::lit(c));
        for (_, t) in self.params_mut() {
            for v in t.data_mut() {
                *v = v.max(lo).min(hi);
            }
        }
    }

    /// `img` is `[B, 1, N, N]`; returns one score per item, shape `[B]`.
    pub fn forward(&self, g: &mut Graph<T>, p: &[Var], img: Var) -> Result<Var> {
        let shape = g.shape(img).to_vec();
        if shape.len() != 4 || shape[1] != 1 || shape[2] != self.n || shape[3] != self.n {
            return Err(Error::shape(
                "discriminate",
                format!("input must be [B, 1, {n}, {n}], got {shape:?}", n = self.n),
            ));
        }
        let batch = shape[0];
        let slope = T::lit(LEAKY_SLOPE);
        let mut h = img;
        for l in 0..6 {
            let stride = if l % 2 == 1 { 2 } else { 1 };
            let c = g.conv2d(h, p[2 * l], Some(p[2 * l + 1]), stride, 1)?;
            h = g.leaky_relu(c, slope);
        }
        let flat = g.shape(h)[1..].iter().product::<usize>();
        let h = g.reshape(h, [batch, flat])?;
        let h = g.linear(h, p[12], Some(p[13]))?;
        let h = g.leaky_relu(h, slope);
        let out = g.linear(h, p[14], Some(p[15]))?;
        g.reshape(out, [batch])
    }
}

impl<T: Real> Network<T> for Discriminator<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v: Vec<(String, &Tensor<T>)> = self
            .convs
            .iter()
            .flat_map(|l| {
                [
                    (format!("{}.w", l.name), &l.w),
                    (format!("{}.b", l.name), &l.b),
                ]
            })
            .collect();
        v.push(("disc.fc1.w".into(), &self.fc1_w));
        v.push(("disc.fc1.b".into(), &self.fc1_b));
        v.push(("disc.fc2.w".into(), &self.fc2_w));
        v.push(("disc.fc2.b".into(), &self.fc2_b));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v: Vec<(String, &mut Tensor<T>)> = self
            .convs
            .iter_mut()
            .flat_map(|l| {
                [
                    (format!("{}.w", l.name), &mut l.w),
                    (format!("{}.b", l.name), &mut l.b),
                ]
            })
            .collect();
        v.push(("disc.fc1.w".into(), &mut self.fc1_w));
        v.push(("disc.fc1.b".into(), &mut self.fc1_b));
        v.push(("disc.fc2.w".into(), &mut self.fc2_w));
        v.push(("disc.fc2.b".into(), &mut self.fc2_b));
        v
    }
}

// ----- generator ----------------------------------------------------------------

/// Batched generator inputs for one forward pass.
#[derive(Clone, Debug)]
pub struct GenInput<'a> {
    /// Filtered dense sinograms, `[B, Nv', Nd]` flattened.
    pub filtered: &'a [f32],
    pub angles: &'a [f64],
    /// Few-view FBP images, `[B, 1, N, N]` flattened.
    pub fbp: &'a [f32],
    pub batch: usize,
}

/// Vars produced by one generator pass.
#[derive(Clone, Copy, Debug)]
pub struct GenOutput {
    /// Intermediate back-projection `[B, 1, N, N]`, absent for DEER-FBP.
    pub bp: Option<Var>,
    /// Refined image `[B, 1, N, N]`.
    pub out: Var,
}

/// Back-projection layer (when the variant has one) followed by the U-net.
#[derive(Clone, Debug)]
pub struct Generator<T: Real = f32> {
    cfg: ModelConfig,
    bp: Option<BpLayer<T>>,
    unet: UNet<T>,
}

impl<T: Real> Generator<T> {
    pub fn new(cfg: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let bp = match cfg.variant.bp_variant() {
            Some(v) => Some(BpLayer::new(
                v,
                cfg.n,
                cfg.n_det,
                cfg.nv_dense,
                cfg.bp_scaling,
                rng,
            )?),
            None => None,
        };
        let unet = UNet::new(cfg.unet_filters, cfg.padding, cfg.final_relu, rng)?;
        Ok(Generator { cfg, bp, unet })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn bp(&self) -> Option<&BpLayer<T>> {
        self.bp.as_ref()
    }

    pub fn bp_mut(&mut self) -> Option<&mut BpLayer<T>> {
        self.bp.as_mut()
    }

    pub fn unet(&self) -> &UNet<T> {
        &self.unet
    }

    pub fn unet_mut(&mut self) -> &mut UNet<T> {
        &mut self.unet
    }

    /// Number of bound parameter vars belonging to the BP layer.
    pub fn bp_param_len(&self) -> usize {
        usize::from(self.bp.is_some())
    }

    /// Back-projection only; `p` holds the generator's bound parameters.
    pub fn forward_bp(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        input: &GenInput<'_>,
    ) -> Result<Option<Var>> {
        let Some(bp) = &self.bp else { return Ok(None) };
        let expected = input.batch * input.angles.len() * self.cfg.n_det;
        if input.filtered.len() != expected {
            return Err(Error::shape(
                "generator",
                format!(
                    "filtered batch has {} values, expected {expected}",
                    input.filtered.len()
                ),
            ));
        }
        let sino = g.constant(
            [input.batch, input.angles.len(), self.cfg.n_det],
            input.filtered.iter().map(|&v| T::lit(v as f64)).collect(),
        )?;
        let img = bp.forward(g, p[0], sino, input.angles)?;
        // legacy scaling divides by the training view count; restore the
        // magnitude at other counts
        let views = input.angles.len();
        Ok(Some(match bp.scaling() {
            BpScaling::Legacy if views != bp.n_views() => {
                g.scale(img, T::lit(bp.n_views() as f64 / views as f64))
            }
            _ => img,
        }))
    }

    /// Full pass: back-projection, concatenation and refinement.
    pub fn forward(&self, g: &mut Graph<T>, p: &[Var], input: &GenInput<'_>) -> Result<GenOutput> {
        let n = self.cfg.n;
        let bp = self.forward_bp(g, p, input)?;
        let fbp = g.constant(
            [input.batch, 1, n, n],
            input.fbp.iter().map(|&v| T::lit(v as f64)).collect(),
        )?;
        let pair = match (self.cfg.variant.refine_inputs(), bp) {
            (RefineInputs::BpAndFbp, Some(b)) => [b, fbp],
            (RefineInputs::BpTwice, Some(b)) => [b, b],
            (RefineInputs::FbpTwice, _) => [fbp, fbp],
            (_, None) => {
                return Err(Error::Invalid(
                    "variant needs a back-projection layer".into(),
                ))
            }
        };
        let x = g.concat(&pair, 1)?;
        let out = self.unet.forward(g, &p[self.bp_param_len()..], x)?;
        Ok(GenOutput { bp, out })
    }
}

impl<T: Real> Network<T> for Generator<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = self.bp.as_ref().map(|b| b.params()).unwrap_or_default();
        v.extend(self.unet.params());
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v = self.bp.as_mut().map(|b| b.params_mut()).unwrap_or_default();
        v.extend(self.unet.params_mut());
        v
    }
}

/// Inference result for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    pub bp: Option<Image>,
    pub out: Image,
}

/// Samples per inference graph.
const INFER_BATCH: usize = 8;

impl Generator<f32> {
    /// Frozen-weight forward pass over a batch.
    pub fn reconstruct_batch(&self, batch: &Batch, angles: &[f64]) -> Result<Vec<Reconstruction>> {
        let n = self.cfg.n;
        let mut g = Graph::new();
        let p = self.bind_frozen(&mut g);
        let input = GenInput {
            filtered: &batch.filtered,
            angles,
            fbp: &batch.fbp,
            batch: batch.size,
        };
        let out = self.forward(&mut g, &p, &input)?;
        let plane = n * n;
        let image = |g: &Graph<f32>, v: Var, i: usize| {
            Image::new(n, 1.0, g.value(v)[i * plane..(i + 1) * plane].to_vec())
        };
        (0..batch.size)
            .map(|i| {
                Ok(Reconstruction {
                    bp: out.bp.map(|b| image(&g, b, i)).transpose()?,
                    out: image(&g, out.out, i)?,
                })
            })
            .collect()
    }

    /// Reconstructs every sample of `data`; back-projection inputs may use a
    /// different view count than training when the layer is lite.
    pub fn reconstruct_dataset(&self, data: &Dataset) -> Result<Vec<Reconstruction>> {
        if data.geometry().n != self.cfg.n {
            return Err(Error::shape(
                "reconstruct",
                format!("dataset is {}px, model {}px", data.geometry().n, self.cfg.n),
            ));
        }
        let angles = data.dense_angles();
        let mut out = Vec::with_capacity(data.len());
        let indices: Vec<usize> = (0..data.len()).collect();
        for chunk in indices.chunks(INFER_BATCH) {
            out.extend(self.reconstruct_batch(&data.batch(chunk), &angles)?);
        }
        Ok(out)
    }

    /// Reconstructs one few-view sinogram. The dense view count defaults to
    /// twice the few-view count; view-dependent layers require it to match
    /// training.
    pub fn reconstruct_sinogram(
        &self,
        fewview: &Sinogram,
        nv_dense: Option<usize>,
    ) -> Result<Reconstruction> {
        if fewview.n_det() != self.cfg.n_det {
            return Err(Error::shape(
                "reconstruct",
                format!(
                    "sinogram has {} detector bins, model {}",
                    fewview.n_det(),
                    self.cfg.n_det
                ),
            ));
        }
        let products = prepare_inputs(fewview, self.cfg.n, nv_dense)?;
        let filtered = &products.filtered_dense_sino;
        let batch = Batch {
            size: 1,
            filtered: filtered.data().to_vec(),
            fbp: products.fbp_image.data().to_vec(),
            target: Vec::new(),
        };
        let mut rec = self.reconstruct_batch(&batch, filtered.angles())?;
        Ok(rec.remove(0))
    }
}

/// Runs the refinement network on one pair of images.
pub fn refine(unet: &UNet<f32>, bp_image: &Image, fbp_image: &Image) -> Result<Image> {
    if bp_image.n() != fbp_image.n() {
        return Err(Error::shape(
            "refine",
            format!(
                "inputs {} and {} differ in size",
                bp_image.n(),
                fbp_image.n()
            ),
        ));
    }
    let n = bp_image.n();
    let mut g = Graph::new();
    let p = unet.bind_frozen(&mut g);
    let mut data = bp_image.data().to_vec();
    data.extend_from_slice(fbp_image.data());
    let x = g.constant([1, 2, n, n], data)?;
    let out = unet.forward(&mut g, &p, x)?;
    Image::new(n, bp_image.pixel_size(), g.value(out).to_vec())
}

/// Critic score of one image.
pub fn discriminate(d: &Discriminator<f32>, img: &Image) -> Result<f32> {
    let mut g = Graph::new();
    let p = d.bind_frozen(&mut g);
    let x = g.constant([1, 1, img.n(), img.n()], img.data().to_vec())?;
    let out = d.forward(&mut g, &p, x)?;
    Ok(g.value(out)[0])
}
