use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Graph, ParamId, Params, Var, NORM_EPS};
use crate::error::{Error, Result};
use crate::volume::Slice2D;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// A 7x7 stem followed by `n_feature_convs - 1` stride-2 convolutions.
    pub n_feature_convs: usize,
    pub n_res_blocks: usize,
    /// The first `n_feature_convs - 1` upsample by 2; the last maps to the image.
    pub n_deconvs: usize,
    pub base_channels: usize,
    pub image_channels: usize,
}

impl Default for GeneratorConfig {
    /// Desk scale: the full layer pattern with 3 residual blocks.
    fn default() -> Self {
        Self {
            n_feature_convs: 2,
            n_res_blocks: 3,
            n_deconvs: 3,
            base_channels: 16,
            image_channels: 1,
        }
    }
}

impl GeneratorConfig {
    /// Full-size layer counts with 64 base channels.
    pub fn full_scale() -> Self {
        Self {
            n_res_blocks: 9,
            base_channels: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_feature_convs == 0
            || self.n_deconvs == 0
            || self.base_channels == 0
            || self.image_channels == 0
        {
            return Err(Error::Config(format!("generator sizes must be positive: {self:?}")));
        }
        if self.n_deconvs < self.n_feature_convs {
            return Err(Error::Config(format!(
                "{} deconvolutions cannot undo {} downsampling stages and map back to the image",
                self.n_deconvs,
                self.n_feature_convs - 1
            )));
        }
        Ok(())
    }

    /// Input sides must be multiples of this.
    pub fn total_stride(&self) -> usize {
        1 << (self.n_feature_convs - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub n_convs: usize,
    pub base_channels: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            n_convs: 4,
            base_channels: 16,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_convs == 0 || self.base_channels == 0 {
            return Err(Error::Config(format!("discriminator sizes must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Score-map side for an input side `n`.
    pub fn output_side(&self, n: usize) -> usize {
        (0..self.n_convs).fold(n, |s, _| if s >= 2 { (s + 2 - 4) / 2 + 1 } else { 0 })
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvLayer {
    w: ParamId,
    b: Option<ParamId>,
}

fn conv_layer(
    p: &mut Params,
    name: &str,
    shape: [usize; 4],
    bias: bool,
    rng: &mut impl Rng,
) -> Result<ConvLayer> {
    let w = p.add_truncated_normal(&format!("{name}.w"), &shape, INIT_STD, rng)?;
    // transposed kernels are [c_in, c_out, k, k], plain ones [c_out, c_in, k, k]
    let b = if bias {
        Some(p.add(&format!("{name}.b"), Array::zeros(&[shape[0]]))?)
    } else {
        None
    };
    Ok(ConvLayer { w, b })
}

fn biased_transposed(
    p: &mut Params,
    name: &str,
    shape: [usize; 4],
    rng: &mut impl Rng,
) -> Result<ConvLayer> {
    let w = p.add_truncated_normal(&format!("{name}.w"), &shape, INIT_STD, rng)?;
    let b = Some(p.add(&format!("{name}.b"), Array::zeros(&[shape[1]]))?);
    Ok(ConvLayer { w, b })
}

// Layers keep ids of the store they were built in; a cloned network has a
// new store, so ids are re-resolved by position.
fn bind(g: &mut Graph, p: &Params, l: ConvLayer) -> (Var, Option<Var>) {
    let local = |id: ParamId| p.id_at(id.index());
    (g.param(p, local(l.w)), l.b.map(|b| g.param(p, local(b))))
}

/// ResNet-style generator: stem, downsampling, residual blocks, upsampling
/// and a tanh head rescaled to `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Generator {
    cfg: GeneratorConfig,
    params: Params,
    stem: ConvLayer,
    down: Vec<ConvLayer>,
    res: Vec<(ConvLayer, ConvLayer)>,
    up: Vec<(ConvLayer, usize)>,
    head: ConvLayer,
}

impl Generator {
    pub fn new(cfg: GeneratorConfig, name: &str, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut p = Params::new();
        let c0 = cfg.base_channels;
        let stem = conv_layer(&mut p, &format!("{name}.stem"), [c0, cfg.image_channels, 7, 7], false, rng)?;
        let mut c = c0;
        let mut down = Vec::new();
        for i in 1..cfg.n_feature_convs {
            down.push(conv_layer(&mut p, &format!("{name}.down{i}"), [2 * c, c, 3, 3], false, rng)?);
            c *= 2;
        }
        let mut res = Vec::new();
        for i in 0..cfg.n_res_blocks {
            let a = conv_layer(&mut p, &format!("{name}.res{i}.a"), [c, c, 3, 3], false, rng)?;
            let b = conv_layer(&mut p, &format!("{name}.res{i}.b"), [c, c, 3, 3], false, rng)?;
            res.push((a, b));
        }
        let mut up = Vec::new();
        for j in 0..cfg.n_deconvs - 1 {
            let stride2 = j + 1 < cfg.n_feature_convs;
            let (k, co) = if stride2 { (4, c / 2) } else { (3, c) };
            let w = p.add_truncated_normal(&format!("{name}.up{j}.w"), &[c, co, k, k], INIT_STD, rng)?;
            up.push((ConvLayer { w, b: None }, if stride2 { 2 } else { 1 }));
            c = co;
        }
        let head = biased_transposed(&mut p, &format!("{name}.head"), [c, cfg.image_channels, 7, 7], rng)?;
        Ok(Self {
            cfg,
            params: p,
            stem,
            down,
            res,
            up,
            head,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.cfg.total_stride();
        let ok = shape.len() == 4
            && shape[1] == self.cfg.image_channels
            && shape[2] % s == 0
            && shape[3] % s == 0
            && shape[2] / s > 3
            && shape[3] / s > 3;
        if ok {
            Ok(())
        } else {
            Err(Error::Shape {
                op: "generator",
                detail: format!(
                    "input {shape:?} needs {} channel(s) and sides divisible by {s} with at least {} pixels",
                    self.cfg.image_channels,
                    4 * s
                ),
            })
        }
    }

    /// `[n, c, h, w]` in, same shape out, values in `[0, 1]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.forward_with(g, &self.params, x)
    }

    /// Forward pass reading weights from `p`, a store laid out like
    /// [`Generator::params`] (for example a clone of it).
    pub fn forward_with(&self, g: &mut Graph, p: &Params, x: Var) -> Result<Var> {
        self.check_input(g.shape(x))?;
        let (w, _) = bind(g, p, self.stem);
        let h = g.pad_reflect(x, 3)?;
        let h = g.conv2d(h, w, None, 1, 0)?;
        let h = g.instance_norm(h, NORM_EPS)?;
        let mut h = g.relu(h);
        for l in &self.down {
            let (w, _) = bind(g, p, *l);
            let y = g.conv2d(h, w, None, 2, 1)?;
            let y = g.instance_norm(y, NORM_EPS)?;
            h = g.relu(y);
        }
        for (a, b) in &self.res {
            let (wa, _) = bind(g, p, *a);
            let (wb, _) = bind(g, p, *b);
            let y = g.pad_reflect(h, 1)?;
            let y = g.conv2d(y, wa, None, 1, 0)?;
            let y = g.instance_norm(y, NORM_EPS)?;
            let y = g.relu(y);
            let y = g.pad_reflect(y, 1)?;
            let y = g.conv2d(y, wb, None, 1, 0)?;
            let y = g.instance_norm(y, NORM_EPS)?;
            h = g.add(h, y)?;
        }
        for (l, stride) in &self.up {
            let (w, _) = bind(g, p, *l);
            let y = g.conv2d_transpose(h, w, None, *stride, 1)?;
            let y = g.instance_norm(y, NORM_EPS)?;
            h = g.relu(y);
        }
        let (w, b) = bind(g, p, self.head);
        let y = g.conv2d_transpose(h, w, b, 1, 3)?;
        let y = g.tanh(y);
        let y = g.add_scalar(y, 1.0);
        Ok(g.scale(y, 0.5))
    }

    /// Translates one single-channel image.
    pub fn translate(&self, img: &Slice2D) -> Result<Slice2D> {
        let out = self.translate_batch(std::slice::from_ref(img))?;
        Ok(out.into_iter().next().expect("one image"))
    }

    pub fn translate_batch(&self, imgs: &[Slice2D]) -> Result<Vec<Slice2D>> {
        let mut g = Graph::new();
        let x = g.constant(to_batch(imgs)?);
        let y = self.forward(&mut g, x)?;
        from_batch(g.value(y), imgs[0].width(), imgs[0].height())
    }
}

/// PatchGAN-style critic: stride-2 4x4 convolutions with leaky ReLU and
/// instance norm after the first, then a 3x3 convolution to one channel.
/// Scores are unbounded.
#[derive(Debug, Clone)]
pub struct Discriminator {
    cfg: DiscriminatorConfig,
    params: Params,
    layers: Vec<ConvLayer>,
    head: ConvLayer,
}

impl Discriminator {
    pub fn new(cfg: DiscriminatorConfig, image_channels: usize, name: &str, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut p = Params::new();
        let mut layers = Vec::new();
        let mut c = image_channels;
        for i in 0..cfg.n_convs {
            let co = cfg.base_channels << i.min(3);
            layers.push(conv_layer(&mut p, &format!("{name}.conv{i}"), [co, c, 4, 4], i == 0, rng)?);
            c = co;
        }
        let head = conv_layer(&mut p, &format!("{name}.head"), [1, c, 3, 3], true, rng)?;
        Ok(Self {
            cfg,
            params: p,
            layers,
            head,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    /// `[n, c, h, w]` in, `[n, 1, h', w']` score map out.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.forward_with(g, &self.params, x)
    }

    pub fn forward_with(&self, g: &mut Graph, p: &Params, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || self.cfg.output_side(s[2]) == 0 || self.cfg.output_side(s[3]) == 0 {
            return Err(Error::Shape {
                op: "discriminator",
                detail: format!("input {s:?} is too small for {} stride-2 layers", self.cfg.n_convs),
            });
        }
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            let (w, b) = bind(g, p, *l);
            h = g.conv2d(h, w, b, 2, 1)?;
            if i > 0 {
                h = g.instance_norm(h, NORM_EPS)?;
            }
            h = g.leaky_relu(h, 0.2);
        }
        let (w, b) = bind(g, p, self.head);
        g.conv2d(h, w, b, 1, 1)
    }
}

/// Stacks single-channel images into `[n, 1, h, w]`.
pub fn to_batch(imgs: &[Slice2D]) -> Result<Array> {
    let first = imgs.first().ok_or_else(|| Error::Config("empty batch".into()))?;
    let mut data = Vec::with_capacity(imgs.len() * first.data().len());
    for im in imgs {
        if im.dims() != first.dims() {
            return Err(Error::dims(first.dims(), im.dims()));
        }
        data.extend_from_slice(im.data());
    }
    Array::new(&[imgs.len(), 1, first.height(), first.width()], data)
}

pub fn from_batch(a: &Array, width: usize, height: usize) -> Result<Vec<Slice2D>> {
    a.data()
        .chunks(width * height)
        .map(|c| Slice2D::new(width, height, c.to_vec()))
        .collect()
}
