use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{BatchNorm2d, Conv2d, ConvTranspose2d};
use crate::nn::{weights, Conv2dOpts, Graph, ParamStore, Tensor, Var};
use crate::raster::Raster;

const SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Backbone {
    #[default]
    Dense,
    ResnetLike,
    VitLike,
    MobileLike,
    VggLike,
}

impl Backbone {
    pub const ALL: [Backbone; 5] = [
        Backbone::Dense,
        Backbone::ResnetLike,
        Backbone::VitLike,
        Backbone::MobileLike,
        Backbone::VggLike,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Backbone::Dense => "dense",
            Backbone::ResnetLike => "resnet-like",
            Backbone::VitLike => "vit-like",
            Backbone::MobileLike => "mobile-like",
            Backbone::VggLike => "vgg-like",
        }
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Backbone::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown backbone `{s}` (allowed: dense, resnet-like, vit-like, mobile-like, vgg-like)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub backbone: Backbone,
    pub base_channels: usize,
    /// Encoder stages; stage `i` runs at `1 / 2^i` resolution.
    pub depth: usize,
    pub skip_connections: bool,
    /// `(width, height)` the generator accepts; `None` accepts any size.
    pub input_size: Option<(usize, usize)>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::Dense,
            base_channels: 16,
            depth: 3,
            skip_connections: true,
            input_size: None,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::InvalidArgument(format!("generator depth {} < 2", self.depth)));
        }
        if self.base_channels < 8 {
            return Err(Error::InvalidArgument(format!(
                "generator base_channels {} < 8",
                self.base_channels
            )));
        }
        Ok(())
    }

    fn channels(&self, stage: usize) -> usize {
        self.base_channels << stage.min(3)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub layers: usize,
    pub base_channels: usize,
    pub batch_norm: bool,
    pub slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            base_channels: 16,
            batch_norm: true,
            slope: 0.2,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 3 {
            return Err(Error::InvalidArgument(format!("discriminator layers {} < 3", self.layers)));
        }
        if self.base_channels == 0 {
            return Err(Error::InvalidArgument("discriminator base_channels must be positive".into()));
        }
        Ok(())
    }

    /// Smallest image side the stride-2 stack accepts.
    pub fn min_side(&self) -> usize {
        1 << (self.layers - 1)
    }
}

/// `[B, 1, H, W]` batch; each raster is edge-padded on the right/bottom to
/// `(pw, ph)`.
pub(crate) fn batch_tensor(rasters: &[&Raster], pw: usize, ph: usize) -> Tensor {
    let mut data = Vec::with_capacity(rasters.len() * pw * ph);
    for r in rasters {
        let (w, h) = r.dims();
        for y in 0..ph {
            for x in 0..pw {
                data.push(r.get(x.min(w - 1), y.min(h - 1)));
            }
        }
    }
    Tensor::new(vec![rasters.len(), 1, ph, pw], data)
}

pub(crate) fn tensor_rasters(t: &Tensor) -> Vec<Raster> {
    let (b, h, w) = (t.dim(0), t.dim(2), t.dim(3));
    (0..b)
        .map(|i| Raster::new(w, h, t.data()[i * h * w..(i + 1) * h * w].to_vec()).expect("consistent shape"))
        .collect()
}

fn lrelu_conv(g: &mut Graph, store: &ParamStore, conv: &Conv2d, x: Var) -> Var {
    let y = conv.forward(g, store, x);
    g.leaky_relu(y, SLOPE)
}

/// Shape-preserving feature block at `c` channels.
#[derive(Debug, Clone)]
enum Block {
    Dense { l1: Conv2d, l2: Conv2d, transition: Conv2d },
    Residual { c1: Conv2d, c2: Conv2d },
    Attention { conv: Conv2d, q: Conv2d, k: Conv2d, v: Conv2d, proj: Conv2d, ff1: Conv2d, ff2: Conv2d, dk: usize },
    InvertedResidual { expand: Conv2d, depthwise: Conv2d, project: Conv2d },
    Plain { c1: Conv2d, c2: Conv2d },
}

/// Attention keys and values are average-pooled to at most this many tokens.
const MAX_KV_TOKENS: usize = 64;

impl Block {
    fn new(store: &mut ParamStore, name: &str, kind: Backbone, c: usize, rng: &mut ChaCha8Rng) -> Self {
        let sq = |store: &mut ParamStore, n: &str, cin, cout, k, rng: &mut ChaCha8Rng| {
            Conv2d::square(store, &format!("{name}.{n}"), cin, cout, k, 1, rng)
        };
        match kind {
            Backbone::Dense => {
                let gr = (c / 2).max(1);
                Block::Dense {
                    l1: sq(store, "dense1", c, gr, 3, rng),
                    l2: sq(store, "dense2", c + gr, gr, 3, rng),
                    transition: sq(store, "transition", c + 2 * gr, c, 1, rng),
                }
            }
            Backbone::ResnetLike => Block::Residual {
                c1: sq(store, "res1", c, c, 3, rng),
                c2: sq(store, "res2", c, c, 3, rng),
            },
            Backbone::VitLike => {
                let dk = (c / 2).max(1);
                Block::Attention {
                    conv: sq(store, "local", c, c, 3, rng),
                    q: sq(store, "query", c, dk, 1, rng),
                    k: sq(store, "key", c, dk, 1, rng),
                    v: sq(store, "value", c, c, 1, rng),
                    proj: sq(store, "proj", c, c, 1, rng),
                    ff1: sq(store, "ff1", c, 2 * c, 1, rng),
                    ff2: sq(store, "ff2", 2 * c, c, 1, rng),
                    dk,
                }
            }
            Backbone::MobileLike => Block::InvertedResidual {
                expand: sq(store, "expand", c, 2 * c, 1, rng),
                depthwise: Conv2d::new(
                    store,
                    &format!("{name}.depthwise"),
                    2 * c,
                    2 * c,
                    (3, 3),
                    Conv2dOpts {
                        groups: 2 * c,
                        ..Conv2dOpts::new(1, 1)
                    },
                    rng,
                ),
                project: sq(store, "project", 2 * c, c, 1, rng),
            },
            Backbone::VggLike => Block::Plain {
                c1: sq(store, "vgg1", c, c, 3, rng),
                c2: sq(store, "vgg2", c, c, 3, rng),
            },
        }
    }

    fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Var {
        match self {
            Block::Dense { l1, l2, transition } => {
                let y1 = lrelu_conv(g, s, l1, x);
                let cat1 = g.concat(&[x, y1]);
                let y2 = lrelu_conv(g, s, l2, cat1);
                let cat2 = g.concat(&[x, y1, y2]);
                lrelu_conv(g, s, transition, cat2)
            }
            Block::Residual { c1, c2 } => {
                let y = lrelu_conv(g, s, c1, x);
                let y = c2.forward(g, s, y);
                let y = g.add(x, y);
                g.leaky_relu(y, SLOPE)
            }
            Block::Attention { conv, q, k, v, proj, ff1, ff2, dk } => {
                let x = lrelu_conv(g, s, conv, x);
                let shape = g.shape(x).to_vec();
                let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                // spatial reduction of keys/values
                let mut r = 1;
                while (h / r) * (w / r) > MAX_KV_TOKENS && h / r >= 2 && w / r >= 2 {
                    r *= 2;
                }
                let pooled = if r > 1 {
                    let kernel = g.input(Tensor::full(&[c, 1, r, r], 1.0 / (r * r) as f64));
                    g.conv2d(
                        x,
                        kernel,
                        Conv2dOpts {
                            groups: c,
                            ..Conv2dOpts::new(r, 0)
                        },
                    )
                } else {
                    x
                };
                let kv_tokens = g.shape(pooled)[2] * g.shape(pooled)[3];
                let qv = q.forward(g, s, x);
                let qv = g.reshape(qv, &[b, *dk, h * w]);
                let qt = g.transpose_last2(qv);
                let kk = k.forward(g, s, pooled);
                let kk = g.reshape(kk, &[b, *dk, kv_tokens]);
                let scores = g.bmm(qt, kk);
                let scores = g.scale(scores, 1.0 / (*dk as f64).sqrt());
                let attn = g.softmax_last(scores);
                let vv = v.forward(g, s, pooled);
                let vv = g.reshape(vv, &[b, c, kv_tokens]);
                let at = g.transpose_last2(attn);
                let mixed = g.bmm(vv, at);
                let mixed = g.reshape(mixed, &[b, c, h, w]);
                let mixed = proj.forward(g, s, mixed);
                let x = g.add(x, mixed);
                let f = lrelu_conv(g, s, ff1, x);
                let f = ff2.forward(g, s, f);
                g.add(x, f)
            }
            Block::InvertedResidual { expand, depthwise, project } => {
                let y = lrelu_conv(g, s, expand, x);
                let y = lrelu_conv(g, s, depthwise, y);
                let y = project.forward(g, s, y);
                g.add(x, y)
            }
            Block::Plain { c1, c2 } => {
                let y = lrelu_conv(g, s, c1, x);
                lrelu_conv(g, s, c2, y)
            }
        }
    }
}

#[derive(Debug, Clone)]
struct DecoderStage {
    up: ConvTranspose2d,
    fuse: Conv2d,
}

/// Encoder–decoder generator predicting a residual on the hazy input.
/// Output is `clamp(input + residual, 0, 1)`.
#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    store: ParamStore,
    stem: Conv2d,
    down: Vec<Conv2d>,
    blocks: Vec<Block>,
    decoder: Vec<DecoderStage>,
    head: Conv2d,
}

impl Generator {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c0 = config.channels(0);
        let stem = Conv2d::square(&mut store, "enc.stem", 1, c0, 3, 1, &mut rng);
        let mut down = Vec::new();
        let mut blocks = Vec::new();
        for i in 0..config.depth {
            if i > 0 {
                down.push(Conv2d::square(
                    &mut store,
                    &format!("enc.down{i}"),
                    config.channels(i - 1),
                    config.channels(i),
                    3,
                    2,
                    &mut rng,
                ));
            }
            blocks.push(Block::new(
                &mut store,
                &format!("enc.stage{i}"),
                config.backbone,
                config.channels(i),
                &mut rng,
            ));
        }
        let mut decoder = Vec::new();
        for i in (1..config.depth).rev() {
            let (ci, co) = (config.channels(i), config.channels(i - 1));
            let up = ConvTranspose2d::new(&mut store, &format!("dec.up{i}"), ci, co, 4, 2, 1, &mut rng);
            let fin = if config.skip_connections { 2 * co } else { co };
            let fuse = Conv2d::square(&mut store, &format!("dec.fuse{i}"), fin, co, 3, 1, &mut rng);
            decoder.push(DecoderStage { up, fuse });
        }
        let head = Conv2d::square(&mut store, "dec.head", c0, 1, 3, 1, &mut rng);
        Ok(Self {
            config,
            store,
            stem,
            down,
            blocks,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub(crate) fn set_input_size(&mut self, size: (usize, usize)) {
        self.config.input_size = Some(size);
    }

    fn multiple(&self) -> usize {
        1 << (self.config.depth - 1)
    }

    pub(crate) fn check_input(&self, dims: (usize, usize)) -> Result<()> {
        if let Some(expected) = self.config.input_size {
            if expected != dims {
                return Err(Error::shape("generator input (width, height)", expected, dims));
            }
        }
        if dims.0 == 0 || dims.1 == 0 {
            return Err(Error::InvalidArgument("empty image".into()));
        }
        Ok(())
    }

    /// Builds the forward pass for a batch of equally sized rasters and
    /// returns the `[B, 1, H, W]` output node.
    pub fn forward(&self, g: &mut Graph, batch: &[&Raster]) -> Result<Var> {
        let dims = batch
            .first()
            .map(|r| r.dims())
            .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        for r in batch {
            self.check_input(r.dims())?;
            if r.dims() != dims {
                return Err(Error::shape("batch image", dims, r.dims()));
            }
        }
        let m = self.multiple();
        let (pw, ph) = (dims.0.div_ceil(m) * m, dims.1.div_ceil(m) * m);
        let x = g.input(batch_tensor(batch, pw, ph));
        Ok(self.forward_padded(g, x, dims))
    }

    fn forward_padded(&self, g: &mut Graph, x: Var, (w, h): (usize, usize)) -> Var {
        let s = &self.store;
        let mut feats = Vec::with_capacity(self.config.depth);
        let mut cur = lrelu_conv(g, s, &self.stem, x);
        for i in 0..self.config.depth {
            if i > 0 {
                cur = lrelu_conv(g, s, &self.down[i - 1], cur);
            }
            cur = self.blocks[i].forward(g, s, cur);
            feats.push(cur);
        }
        for (k, stage) in self.decoder.iter().enumerate() {
            let i = self.config.depth - 1 - k;
            let up = stage.up.forward(g, s, cur);
            let up = g.leaky_relu(up, SLOPE);
            let joined = if self.config.skip_connections {
                g.concat(&[up, feats[i - 1]])
            } else {
                up
            };
            cur = lrelu_conv(g, s, &stage.fuse, joined);
        }
        let residual = self.head.forward(g, s, cur);
        let out = g.add(x, residual);
        let out = g.clamp(out, 0.0, 1.0);
        g.crop2d(out, h, w)
    }

    pub fn generate_batch(&self, batch: &[&Raster]) -> Result<Vec<Raster>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, batch)?;
        Ok(tensor_rasters(g.value(out)))
    }

    /// Dehazes one image.
    pub fn generate(&self, image: &Raster) -> Result<Raster> {
        Ok(self.generate_batch(&[image])?.remove(0))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        weights::save(path, "dehaze-generator", serde_json::to_value(&self.config)?, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, tensors) = weights::load(path)?;
        if header.model != "dehaze-generator" {
            return Err(Error::Weights(format!(
                "{} holds a `{}` model, expected dehaze-generator",
                path.display(),
                header.model
            )));
        }
        let config: GeneratorConfig = serde_json::from_value(header.config.clone())?;
        let mut g = Self::new(config, 0)?;
        weights::assign(&mut g.store, &header, tensors)?;
        Ok(g)
    }

    /// Copies externally trained encoder tensors (names under `enc.` after
    /// stripping `prefix`) with matching shapes. Returns the number copied.
    pub fn import_encoder(&mut self, path: &Path, prefix: &str) -> Result<usize> {
        let (header, tensors) = weights::load(path)?;
        // restrict the import to encoder tensors
        let keep: Vec<usize> = header
            .tensors
            .iter()
            .enumerate()
            .filter(|(_, e)| e.name.strip_prefix(prefix).unwrap_or(&e.name).starts_with("enc."))
            .map(|(i, _)| i)
            .collect();
        let sub_header = weights::WeightsHeader {
            tensors: keep.iter().map(|&i| header.tensors[i].clone()).collect(),
            ..header
        };
        let sub: Vec<Tensor> = keep.iter().map(|&i| tensors[i].clone()).collect();
        Ok(weights::import_matching(&mut self.store, &sub_header, &sub, prefix))
    }
}

/// Convolutional critic: stride-2 4×4 convolutions with optional batch
/// normalisation and LeakyReLU, a 3×3 single-channel head, global average
/// pooling and a sigmoid.
#[derive(Debug, Clone)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    store: ParamStore,
    convs: Vec<Conv2d>,
    norms: Vec<Option<BatchNorm2d>>,
    head: Conv2d,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut cin = 1;
        for i in 0..config.layers - 1 {
            let cout = config.base_channels << i.min(3);
            convs.push(Conv2d::new(
                &mut store,
                &format!("disc.conv{i}"),
                cin,
                cout,
                (4, 4),
                Conv2dOpts::new(2, 1),
                &mut rng,
            ));
            norms.push(if config.batch_norm && i > 0 {
                Some(BatchNorm2d::new(&mut store, &format!("disc.bn{i}"), cout))
            } else {
                None
            });
            cin = cout;
        }
        let head = Conv2d::square(&mut store, "disc.head", cin, 1, 3, 1, &mut rng);
        Ok(Self {
            config,
            store,
            convs,
            norms,
            head,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub(crate) fn check_input(&self, (w, h): (usize, usize)) -> Result<()> {
        let m = self.config.min_side();
        if w < m || h < m {
            return Err(Error::shape("discriminator input (min width, min height)", (m, m), (w, h)));
        }
        Ok(())
    }

    /// Pre-sigmoid scores `[B, 1]` for an NCHW image node.
    pub fn logits(&self, g: &mut Graph, x: Var, train: bool) -> Var {
        let s = &self.store;
        let mut cur = x;
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            cur = conv.forward(g, s, cur);
            if let Some(bn) = norm {
                cur = bn.forward(g, s, cur, train);
            }
            cur = g.leaky_relu(cur, self.config.slope);
        }
        let y = self.head.forward(g, s, cur);
        g.global_avg_pool(y)
    }

    /// Probability that `image` is a clean (real) image.
    pub fn discriminate(&self, image: &Raster) -> Result<f64> {
        self.check_input(image.dims())?;
        let mut g = Graph::new();
        let (w, h) = image.dims();
        let x = g.input(batch_tensor(&[image], w, h));
        let l = self.logits(&mut g, x, false);
        let p = g.sigmoid(l);
        Ok(g.value(p).data()[0])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        weights::save(path, "dehaze-discriminator", serde_json::to_value(&self.config)?, &self.store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(w: usize, h: usize) -> Raster {
        Raster::from_fn(w, h, |x, y| ((x * 5 + y * 3) % 11) as f64 / 10.0)
    }

    #[test]
    fn every_backbone_preserves_shape() {
        for backbone in Backbone::ALL {
            for skip in [true, false] {
                let cfg = GeneratorConfig {
                    backbone,
                    base_channels: 8,
                    depth: 3,
                    skip_connections: skip,
                    input_size: None,
                };
                let g = Generator::new(cfg, 3).unwrap();
                for (w, h) in [(16, 8), (13, 7), (24, 20)] {
                    let out = g.generate(&image(w, h)).unwrap();
                    assert_eq!(out.dims(), (w, h), "{backbone}");
                    assert!(out.in_unit_range());
                }
            }
        }
    }

    #[test]
    fn generator_is_deterministic() {
        let g = Generator::new(GeneratorConfig { base_channels: 8, ..Default::default() }, 1).unwrap();
        let img = image(16, 16);
        assert_eq!(g.generate(&img).unwrap(), g.generate(&img).unwrap());
    }

    #[test]
    fn generator_rejects_wrong_size() {
        let cfg = GeneratorConfig {
            base_channels: 8,
            input_size: Some((16, 8)),
            ..Default::default()
        };
        let g = Generator::new(cfg, 1).unwrap();
        let err = g.generate(&image(8, 8)).unwrap_err();
        assert!(err.to_string().contains("(16, 8)"), "{err}");
    }

    #[test]
    fn config_invariants() {
        assert!(Generator::new(GeneratorConfig { depth: 1, ..Default::default() }, 0).is_err());
        assert!(Generator::new(GeneratorConfig { base_channels: 4, ..Default::default() }, 0).is_err());
        assert!(Discriminator::new(DiscriminatorConfig { layers: 2, ..Default::default() }, 0).is_err());
    }

    #[test]
    fn discriminator_codomain_and_determinism() {
        let d = Discriminator::new(DiscriminatorConfig { base_channels: 8, ..Default::default() }, 2).unwrap();
        let img = image(16, 16);
        let p = d.discriminate(&img).unwrap();
        assert!(p > 0.0 && p < 1.0);
        assert_eq!(p, d.discriminate(&img).unwrap());
        assert!(d.discriminate(&image(4, 4)).is_err());
    }

    #[test]
    fn weights_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.bin");
        let cfg = GeneratorConfig {
            backbone: Backbone::MobileLike,
            base_channels: 8,
            ..Default::default()
        };
        let g = Generator::new(cfg, 5).unwrap();
        g.save(&path).unwrap();
        let back = Generator::load(&path).unwrap();
        let img = image(12, 12);
        assert_eq!(g.generate(&img).unwrap(), back.generate(&img).unwrap());
    }

    #[test]
    fn encoder_import_copies_only_encoder() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pre.bin");
        let cfg = GeneratorConfig { base_channels: 8, ..Default::default() };
        let donor = Generator::new(cfg.clone(), 11).unwrap();
        donor.save(&path).unwrap();
        let mut g = Generator::new(cfg, 12).unwrap();
        let n = g.import_encoder(&path, "").unwrap();
        let enc = g.store().ids_with_prefix("enc.").count();
        assert_eq!(n, enc);
        let id = g.store().find("enc.stem.weight").unwrap();
        assert_eq!(g.store().get(id), donor.store().get(id));
        let id = g.store().find("dec.head.weight").unwrap();
        assert_ne!(g.store().get(id), donor.store().get(id));
    }
}
