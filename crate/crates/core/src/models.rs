//! U-Net 3D and multi-resolution U-Net 3D.
//!
//! Both networks are described once against [`Exec`], so the same code runs
//! forward-only ([`crate::nn::Eval`]) and recorded for training ([`Tape`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ConvLayer, Eval, Exec, NormLayer, ParamStore, Real, Tape, Tensor5};
use crate::rng::{self, tag};

/// Width multiplier of the multi-resolution block.
pub const MULTIRES_ALPHA: f64 = 1.67;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "unet3d")]
    Unet3d,
    #[serde(rename = "multires_unet3d", alias = "multires")]
    MultiresUnet3d,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Unet3d => "unet3d",
            Variant::MultiresUnet3d => "multires_unet3d",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unet3d" | "unet" => Ok(Variant::Unet3d),
            "multires_unet3d" | "multires" => Ok(Variant::MultiresUnet3d),
            other => Err(Error::Invalid(format!("unknown architecture {other:?}"))),
        }
    }
}

fn default_levels() -> usize {
    5
}
fn default_in_channels() -> usize {
    3
}
fn default_out_classes() -> usize {
    crate::volume::NUM_CLASSES
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub variant: Variant,
    pub nf: usize,
    #[serde(default = "default_levels")]
    pub levels: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_out_classes")]
    pub out_classes: usize,
}

impl ArchitectureSpec {
    pub fn new(variant: Variant, nf: usize) -> Self {
        Self {
            variant,
            nf,
            levels: default_levels(),
            in_channels: default_in_channels(),
            out_classes: default_out_classes(),
        }
    }

    pub fn with_levels(mut self, levels: usize) -> Self {
        self.levels = levels;
        self
    }

    pub fn with_in_channels(mut self, c: usize) -> Self {
        self.in_channels = c;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.nf == 0 || self.levels < 2 || self.in_channels == 0 || self.out_classes == 0 {
            return Err(Error::Invalid(format!("invalid architecture {self:?}")));
        }
        if self.levels > 12 {
            return Err(Error::Invalid(format!("levels {} is too deep", self.levels)));
        }
        Ok(())
    }

    /// Encoder width at level `l`.
    pub fn channels(&self, level: usize) -> usize {
        self.nf << level
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.channels(self.levels - 1)
    }

    /// Spatial dims must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn check_input_shape(&self, shape: [usize; 5]) -> Result<()> {
        let [n, c, d, h, w] = shape;
        if n == 0 || c != self.in_channels {
            return Err(Error::Shape(format!("input {shape:?}, expected {} channels", self.in_channels)));
        }
        let q = self.divisor();
        if [d, h, w].iter().any(|&s| s == 0 || s % q != 0) {
            return Err(Error::Dims(format!(
                "spatial dims {:?} must be positive multiples of {q} for {} levels",
                [d, h, w],
                self.levels
            )));
        }
        Ok(())
    }
}

/// Channel split `(a, b, c)` of a multi-resolution block for base width `w`.
pub fn multires_split(w: usize) -> (usize, usize, usize) {
    let big = MULTIRES_ALPHA * w as f64;
    let part = |d: f64| ((big / d).round() as usize).max(1);
    (part(6.0), part(3.0), part(2.0))
}

pub fn multires_out_channels(w: usize) -> usize {
    let (a, b, c) = multires_split(w);
    a + b + c
}

#[derive(Debug, Clone, Copy)]
struct Cn {
    conv: ConvLayer,
    norm: NormLayer,
}

impl Cn {
    fn new<T: Real>(p: &mut ParamStore<T>, name: &str, ci: usize, co: usize, k: usize, r: &mut rng::StreamRng) -> Self {
        Self {
            conv: ConvLayer::new(p, &format!("{name}.conv"), ci, co, k, r),
            norm: NormLayer::new(p, &format!("{name}.norm"), co),
        }
    }

    fn apply<T: Real, E: Exec<T>>(&self, p: &ParamStore<T>, e: &mut E, x: &E::Value) -> Result<E::Value> {
        let y = e.conv(p, &self.conv, x)?;
        e.norm(p, &self.norm, &y)
    }

    fn apply_relu<T: Real, E: Exec<T>>(&self, p: &ParamStore<T>, e: &mut E, x: &E::Value) -> Result<E::Value> {
        let y = self.apply(p, e, x)?;
        Ok(e.relu(&y))
    }
}

#[derive(Debug, Clone, Copy)]
struct DoubleConv {
    a: Cn,
    b: Cn,
}

impl DoubleConv {
    fn new<T: Real>(p: &mut ParamStore<T>, name: &str, ci: usize, co: usize, r: &mut rng::StreamRng) -> Self {
        Self {
            a: Cn::new(p, &format!("{name}.a"), ci, co, 3, r),
            b: Cn::new(p, &format!("{name}.b"), co, co, 3, r),
        }
    }

    fn apply<T: Real, E: Exec<T>>(&self, p: &ParamStore<T>, e: &mut E, x: &E::Value) -> Result<E::Value> {
        let y = self.a.apply_relu(p, e, x)?;
        self.b.apply_relu(p, e, &y)
    }
}

#[derive(Debug, Clone, Copy)]
struct MultiResBlock {
    shortcut: Cn,
    c1: Cn,
    c2: Cn,
    c3: Cn,
    cat_norm: NormLayer,
    out_norm: NormLayer,
    out: usize,
}

impl MultiResBlock {
    fn new<T: Real>(p: &mut ParamStore<T>, name: &str, ci: usize, w: usize, r: &mut rng::StreamRng) -> Self {
        let (a, b, c) = multires_split(w);
        let o = a + b + c;
        Self {
            shortcut: Cn::new(p, &format!("{name}.shortcut"), ci, o, 1, r),
            c1: Cn::new(p, &format!("{name}.c1"), ci, a, 3, r),
            c2: Cn::new(p, &format!("{name}.c2"), a, b, 3, r),
            c3: Cn::new(p, &format!("{name}.c3"), b, c, 3, r),
            cat_norm: NormLayer::new(p, &format!("{name}.cat_norm"), o),
            out_norm: NormLayer::new(p, &format!("{name}.out_norm"), o),
            out: o,
        }
    }

    fn apply<T: Real, E: Exec<T>>(&self, p: &ParamStore<T>, e: &mut E, x: &E::Value) -> Result<E::Value> {
        let sc = self.shortcut.apply(p, e, x)?;
        let y1 = self.c1.apply_relu(p, e, x)?;
        let y2 = self.c2.apply_relu(p, e, &y1)?;
        let y3 = self.c3.apply_relu(p, e, &y2)?;
        let cat = e.concat(&y1, &y2)?;
        let cat = e.concat(&cat, &y3)?;
        let y = e.norm(p, &self.cat_norm, &cat)?;
        let y = e.add(&y, &sc)?;
        let y = e.relu(&y);
        e.norm(p, &self.out_norm, &y)
    }
}

#[derive(Debug, Clone, Copy)]
struct ResStep {
    shortcut: Cn,
    conv: Cn,
    norm: NormLayer,
}

impl ResStep {
    fn apply<T: Real, E: Exec<T>>(&self, p: &ParamStore<T>, e: &mut E, x: &E::Value) -> Result<E::Value> {
        let sc = self.shortcut.apply(p, e, x)?;
        let y = self.conv.apply_relu(p, e, x)?;
        let y = e.add(&y, &sc)?;
        let y = e.relu(&y);
        e.norm(p, &self.norm, &y)
    }
}

fn res_path<T: Real>(p: &mut ParamStore<T>, name: &str, ci: usize, co: usize, len: usize, r: &mut rng::StreamRng) -> Vec<ResStep> {
    (0..len)
        .map(|i| {
            let cin = if i == 0 { ci } else { co };
            ResStep {
                shortcut: Cn::new(p, &format!("{name}.{i}.shortcut"), cin, co, 1, r),
                conv: Cn::new(p, &format!("{name}.{i}.conv"), cin, co, 3, r),
                norm: NormLayer::new(p, &format!("{name}.{i}.norm"), co),
            }
        })
        .collect()
}

/// Upsampling step: trilinear ×2 followed by a 1³ conv, norm and relu. The
/// conv is evaluated before the interpolation; both are linear and the
/// interpolation weights sum to one, so the order does not change the result
/// while the conv runs on 8× fewer voxels.
#[derive(Debug, Clone, Copy)]
struct Up {
    cn: Cn,
}

impl Up {
    fn apply<T: Real, E: Exec<T>>(&self, p: &ParamStore<T>, e: &mut E, x: &E::Value) -> Result<E::Value> {
        let y = e.conv(p, &self.cn.conv, x)?;
        let y = e.upsample(&y);
        let y = e.norm(p, &self.cn.norm, &y)?;
        Ok(e.relu(&y))
    }
}

#[derive(Debug, Clone)]
enum Net {
    Unet {
        enc: Vec<DoubleConv>,
        up: Vec<Up>,
        dec: Vec<DoubleConv>,
    },
    Multires {
        enc: Vec<MultiResBlock>,
        paths: Vec<Vec<ResStep>>,
        up: Vec<Up>,
        dec: Vec<MultiResBlock>,
    },
}

/// A built network: immutable topology plus its parameters.
#[derive(Debug, Clone)]
pub struct Model<T> {
    spec: ArchitectureSpec,
    params: ParamStore<T>,
    net: Net,
    head: ConvLayer,
}

impl<T: Real> Model<T> {
    /// Builds the network with deterministic initialization from `seed`.
    pub fn build(spec: ArchitectureSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut r = rng::stream(seed, &[tag::INIT]);
        let mut p = ParamStore::new();
        let levels = spec.levels;
        let (net, last) = match spec.variant {
            Variant::Unet3d => {
                let mut enc = Vec::new();
                let mut ci = spec.in_channels;
                for l in 0..levels {
                    let c = spec.channels(l);
                    enc.push(DoubleConv::new(&mut p, &format!("enc{l}"), ci, c, &mut r));
                    ci = c;
                }
                let mut up = Vec::new();
                let mut dec = Vec::new();
                for l in (0..levels - 1).rev() {
                    let c = spec.channels(l);
                    up.push(Up {
                        cn: Cn::new(&mut p, &format!("up{l}"), spec.channels(l + 1), c, 1, &mut r),
                    });
                    dec.push(DoubleConv::new(&mut p, &format!("dec{l}"), 2 * c, c, &mut r));
                }
                (Net::Unet { enc, up, dec }, spec.channels(0))
            }
            Variant::MultiresUnet3d => {
                let mut enc = Vec::new();
                let mut paths = Vec::new();
                let mut ci = spec.in_channels;
                let mut widths = Vec::new();
                for l in 0..levels {
                    let block = MultiResBlock::new(&mut p, &format!("enc{l}"), ci, spec.channels(l), &mut r);
                    ci = block.out;
                    if l + 1 < levels {
                        paths.push(res_path(&mut p, &format!("path{l}"), block.out, block.out, levels - 1 - l, &mut r));
                    }
                    widths.push(block.out);
                    enc.push(block);
                }
                let mut up = Vec::new();
                let mut dec = Vec::new();
                let mut prev = ci;
                for l in (0..levels - 1).rev() {
                    let c = spec.channels(l);
                    up.push(Up {
                        cn: Cn::new(&mut p, &format!("up{l}"), prev, c, 1, &mut r),
                    });
                    let block = MultiResBlock::new(&mut p, &format!("dec{l}"), widths[l] + c, c, &mut r);
                    prev = block.out;
                    dec.push(block);
                }
                (Net::Multires { enc, paths, up, dec }, prev)
            }
        };
        let head = ConvLayer::new(&mut p, "head", last, spec.out_classes, 1, &mut r);
        Ok(Self { spec, params: p, net, head })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.element_count()
    }

    /// Sets the final 1³ convolution (weights and bias) to zero.
    pub fn zero_head(&mut self) {
        for id in [self.head.weight, self.head.bias] {
            self.params.get_mut(id).value.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Same topology and values at another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            spec: self.spec,
            params: self.params.cast(),
            net: self.net.clone(),
            head: self.head,
        }
    }

    /// Logits for input `x`, recorded or evaluated depending on `e`.
    pub fn forward<E: Exec<T>>(&self, e: &mut E, x: &E::Value) -> Result<E::Value> {
        self.forward_with(&self.params, e, x)
    }

    /// [`Model::forward`] with an external parameter store of the same layout.
    pub fn forward_with<E: Exec<T>>(&self, p: &ParamStore<T>, e: &mut E, x: &E::Value) -> Result<E::Value> {
        self.spec.check_input_shape(e.shape(x))?;
        if p.len() != self.params.len() {
            return Err(Error::Invalid("parameter store does not match the model".into()));
        }
        let y = match &self.net {
            Net::Unet { enc, up, dec } => {
                let mut skips = Vec::new();
                let mut cur = enc[0].apply(p, e, x)?;
                for block in &enc[1..] {
                    let pooled = e.maxpool(&cur)?;
                    skips.push(cur);
                    cur = block.apply(p, e, &pooled)?;
                }
                for (u, block) in up.iter().zip(dec) {
                    let skip = skips.pop().expect("one skip per decoder level");
                    let upped = u.apply(p, e, &cur)?;
                    let cat = e.concat(&skip, &upped)?;
                    cur = block.apply(p, e, &cat)?;
                }
                cur
            }
            Net::Multires { enc, paths, up, dec } => {
                let mut skips = Vec::new();
                let mut cur = enc[0].apply(p, e, x)?;
                for (l, block) in enc[1..].iter().enumerate() {
                    let pooled = e.maxpool(&cur)?;
                    let mut s = cur;
                    for step in &paths[l] {
                        s = step.apply(p, e, &s)?;
                    }
                    skips.push(s);
                    cur = block.apply(p, e, &pooled)?;
                }
                for (u, block) in up.iter().zip(dec) {
                    let skip = skips.pop().expect("one skip per decoder level");
                    let upped = u.apply(p, e, &cur)?;
                    let cat = e.concat(&skip, &upped)?;
                    cur = block.apply(p, e, &cat)?;
                }
                cur
            }
        };
        e.conv(p, &self.head, &y)
    }

    /// Forward-only logits.
    pub fn predict(&self, x: &Tensor5<T>) -> Result<Tensor5<T>> {
        self.forward(&mut Eval, x)
    }

    /// Records the forward pass on a fresh tape; returns the tape, the input
    /// node and the logits node.
    pub fn forward_tape(&self, x: Tensor5<T>) -> Result<(Tape<T>, crate::nn::NodeId)> {
        let mut tape = Tape::new();
        let xi = tape.input(x, false);
        let y = self.forward(&mut tape, &xi)?;
        Ok((tape, y))
    }
}
