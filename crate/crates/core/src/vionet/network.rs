use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{ImuSample, IMU_WINDOW};
use crate::error::{Error, Result};
use crate::geometry::PoseDelta;
use crate::nn::layers::{Conv2d, Linear, LstmLayer};
use crate::nn::{weights, Conv2dOpts, Graph, ParamStore, Tensor, Var};
use crate::raster::Raster;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VioConfig {
    pub image_width: usize,
    pub image_height: usize,
    pub imu_window: usize,
    pub visual_channels: Vec<usize>,
    pub visual_kernels: Vec<usize>,
    pub visual_strides: Vec<usize>,
    pub visual_feature: usize,
    pub inertial_channels: Vec<usize>,
    pub inertial_kernel: usize,
    /// Size of the projected inertial feature.
    pub inertial_feature: usize,
    /// Project the flattened inertial map to `inertial_feature`; off fuses
    /// the raw flatten.
    pub inertial_projection: bool,
    pub lstm_layers: usize,
    pub lstm_hidden: usize,
    pub mlp_hidden: usize,
    pub leaky_slope: f64,
    /// Rotation weight of the pose loss.
    pub alpha: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam_betas: (f64, f64),
    /// Consecutive windows per training chunk; the recurrent state starts
    /// from zero at each chunk.
    pub seq_len: usize,
    /// Update the dehazing generator together with the VIO network.
    pub dehaze_finetune: bool,
}

impl Default for VioConfig {
    fn default() -> Self {
        Self {
            image_width: 512,
            image_height: 256,
            imu_window: IMU_WINDOW,
            visual_channels: vec![64, 128, 256, 256, 512, 512, 512, 512, 1024],
            visual_kernels: vec![7, 5, 5, 3, 3, 3, 3, 3, 3],
            visual_strides: vec![2, 2, 2, 2, 2, 2, 1, 1, 1],
            visual_feature: 512,
            inertial_channels: vec![128, 256, 256],
            inertial_kernel: 3,
            inertial_feature: 256,
            inertial_projection: true,
            lstm_layers: 2,
            lstm_hidden: 1024,
            mlp_hidden: 128,
            leaky_slope: 0.1,
            alpha: 100.0,
            learning_rate: 1e-6,
            batch_size: 16,
            epochs: 20,
            adam_betas: (0.9, 0.999),
            seq_len: 10,
            dehaze_finetune: false,
        }
    }
}

impl VioConfig {
    /// Same topology with every width divided by `factor` (at least 1) and
    /// the given image size.
    pub fn scaled(width: usize, height: usize, factor: usize) -> Self {
        let d = |v: usize| (v / factor.max(1)).max(1);
        let base = Self::default();
        Self {
            image_width: width,
            image_height: height,
            visual_channels: base.visual_channels.iter().map(|&c| d(c)).collect(),
            visual_feature: d(base.visual_feature),
            inertial_channels: base.inertial_channels.iter().map(|&c| d(c)).collect(),
            inertial_feature: d(base.inertial_feature),
            lstm_hidden: d(base.lstm_hidden),
            mlp_hidden: d(base.mlp_hidden),
            ..base
        }
    }

    /// Every violated invariant, one message each.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        let positive = [
            ("image_width", self.image_width),
            ("image_height", self.image_height),
            ("imu_window", self.imu_window),
            ("visual_feature", self.visual_feature),
            ("inertial_kernel", self.inertial_kernel),
            ("inertial_feature", self.inertial_feature),
            ("lstm_layers", self.lstm_layers),
            ("lstm_hidden", self.lstm_hidden),
            ("mlp_hidden", self.mlp_hidden),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("seq_len", self.seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                p.push(format!("vio.{name} must be positive"));
            }
        }
        let n = self.visual_channels.len();
        if n == 0 || self.visual_kernels.len() != n || self.visual_strides.len() != n {
            p.push(format!(
                "vio.visual_channels/kernels/strides must be non-empty and equally long (got {}, {}, {})",
                n,
                self.visual_kernels.len(),
                self.visual_strides.len()
            ));
        }
        if self.visual_channels.iter().chain(&self.visual_kernels).chain(&self.visual_strides).any(|&v| v == 0) {
            p.push("vio.visual_* entries must be positive".into());
        }
        if self.inertial_channels.is_empty() || self.inertial_channels.contains(&0) {
            p.push("vio.inertial_channels must be non-empty and positive".into());
        }
        if self.inertial_kernel % 2 == 0 {
            p.push("vio.inertial_kernel must be odd".into());
        }
        if !(self.alpha >= 0.0) {
            p.push(format!("vio.alpha must be ≥ 0, got {}", self.alpha));
        }
        if !(self.learning_rate > 0.0) {
            p.push(format!("vio.learning_rate must be positive, got {}", self.learning_rate));
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            p.push(format!("vio.adam_betas must lie in [0, 1), got ({b1}, {b2})"));
        }
        if !(self.leaky_slope >= 0.0) {
            p.push("vio.leaky_slope must be ≥ 0".into());
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// `(channels, height, width)` of the last visual feature map.
    pub fn visual_map_shape(&self) -> (usize, usize, usize) {
        let (mut h, mut w) = (self.image_height, self.image_width);
        for (&k, &s) in self.visual_kernels.iter().zip(&self.visual_strides) {
            let p = k / 2;
            h = (h + 2 * p).saturating_sub(k) / s + 1;
            w = (w + 2 * p).saturating_sub(k) / s + 1;
        }
        (*self.visual_channels.last().unwrap_or(&0), h, w)
    }

    /// `(channels, steps)` of the inertial feature map before flattening.
    pub fn inertial_map_shape(&self) -> (usize, usize) {
        (*self.inertial_channels.last().unwrap_or(&0), self.imu_window)
    }

    pub fn inertial_out(&self) -> usize {
        if self.inertial_projection {
            self.inertial_feature
        } else {
            let (c, t) = self.inertial_map_shape();
            c * t
        }
    }

    pub fn fused_len(&self) -> usize {
        self.visual_feature + self.inertial_out()
    }
}

/// Hidden and cell state of every LSTM layer, each `[batch, hidden]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState {
    pub h: Vec<Tensor>,
    pub c: Vec<Tensor>,
}

impl RecurrentState {
    pub fn zeros(cfg: &VioConfig, batch: usize) -> Self {
        let z = || Tensor::zeros(&[batch, cfg.lstm_hidden]);
        Self {
            h: (0..cfg.lstm_layers).map(|_| z()).collect(),
            c: (0..cfg.lstm_layers).map(|_| z()).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.h.iter().chain(&self.c).all(|t| t.is_finite())
    }
}

/// `[a | b]` along the feature axis.
pub fn fuse_features(x_v: &[f64], x_i: &[f64]) -> Vec<f64> {
    let mut z = Vec::with_capacity(x_v.len() + x_i.len());
    z.extend_from_slice(x_v);
    z.extend_from_slice(x_i);
    z
}

/// Eq.-5 style pose loss: mean over steps of `‖v̂ − v‖² + α‖φ̂ − φ‖²`.
pub fn pose_loss(predictions: &[PoseDelta], targets: &[PoseDelta], alpha: f64) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::shape("pose sequence length", targets.len(), predictions.len()));
    }
    if predictions.is_empty() {
        return Err(Error::InvalidArgument("pose loss needs at least one step".into()));
    }
    if !(alpha >= 0.0) {
        return Err(Error::InvalidArgument(format!("alpha must be ≥ 0, got {alpha}")));
    }
    let total: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p.v - t.v).norm_squared() + alpha * (p.phi - t.phi).norm_squared())
        .sum();
    Ok(total / predictions.len() as f64)
}

/// Graph version of [`pose_loss`] for `[N, 6]` predictions and targets.
pub fn pose_loss_graph(g: &mut Graph, pred: Var, target: &Tensor, alpha: f64) -> Var {
    let n = g.shape(pred)[0];
    let t = g.input(target.clone());
    let d = g.sub(pred, t);
    let sq = g.square(d);
    let weights: Vec<f64> = (0..n).flat_map(|_| [1.0, 1.0, 1.0, alpha, alpha, alpha]).collect();
    let wv = g.input(Tensor::new(vec![n, 6], weights));
    let weighted = g.mul(sq, wv);
    let s = g.sum_all(weighted);
    g.scale(s, 1.0 / n as f64)
}

pub(crate) fn pose_tensor(deltas: &[PoseDelta]) -> Tensor {
    Tensor::new(vec![deltas.len(), 6], deltas.iter().flat_map(|d| d.to_array()).collect())
}

/// The pose network: visual encoder, inertial encoder, concat fusion,
/// stacked LSTM and a two-layer regression head.
#[derive(Debug, Clone)]
pub struct VioNet {
    config: VioConfig,
    store: ParamStore,
    visual: Vec<Conv2d>,
    visual_fc: Linear,
    inertial: Vec<Conv2d>,
    inertial_fc: Option<Linear>,
    lstm: Vec<LstmLayer>,
    mlp1: Linear,
    mlp2: Linear,
}

impl VioNet {
    pub fn new(config: VioConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (vc, vh, vw) = config.visual_map_shape();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut visual = Vec::new();
        let mut cin = 2;
        for (i, ((&c, &k), &s)) in config
            .visual_channels
            .iter()
            .zip(&config.visual_kernels)
            .zip(&config.visual_strides)
            .enumerate()
        {
            visual.push(
                Conv2d::square(&mut store, &format!("visual.conv{}", i + 1), cin, c, k, s, &mut rng)
                    .he_init(&mut store, config.leaky_slope),
            );
            cin = c;
        }
        let visual_fc = Linear::new(&mut store, "visual.fc", vc * vh * vw, config.visual_feature, &mut rng);
        let mut inertial = Vec::new();
        let mut cin = 6;
        let k = config.inertial_kernel;
        for (i, &c) in config.inertial_channels.iter().enumerate() {
            inertial.push(Conv2d::new(
                &mut store,
                &format!("inertial.conv{}", i + 1),
                cin,
                c,
                (1, k),
                Conv2dOpts {
                    stride: (1, 1),
                    padding: (0, k / 2),
                    groups: 1,
                },
                &mut rng,
            )
            .he_init(&mut store, config.leaky_slope));
            cin = c;
        }
        let (ic, it) = config.inertial_map_shape();
        let inertial_fc = config
            .inertial_projection
            .then(|| Linear::new(&mut store, "inertial.fc", ic * it, config.inertial_feature, &mut rng));
        let mut lstm = Vec::new();
        let mut input = config.fused_len();
        for i in 0..config.lstm_layers {
            lstm.push(LstmLayer::new(&mut store, &format!("lstm.l{i}"), input, config.lstm_hidden, &mut rng));
            input = config.lstm_hidden;
        }
        let mlp1 = Linear::new(&mut store, "head.fc1", config.lstm_hidden, config.mlp_hidden, &mut rng);
        let mlp2 = Linear::new(&mut store, "head.fc2", config.mlp_hidden, 6, &mut rng);
        Ok(Self {
            config,
            store,
            visual,
            visual_fc,
            inertial,
            inertial_fc,
            lstm,
            mlp1,
            mlp2,
        })
    }

    pub fn config(&self) -> &VioConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn expected_image(&self) -> (usize, usize) {
        (self.config.image_width, self.config.image_height)
    }

    pub(crate) fn check_image(&self, r: &Raster) -> Result<()> {
        if r.dims() != self.expected_image() {
            return Err(Error::shape("frame (width, height)", self.expected_image(), r.dims()));
        }
        Ok(())
    }

    /// `[B, 2, H, W]` tensor of stacked frame pairs.
    pub fn pair_tensor(&self, pairs: &[(&Raster, &Raster)]) -> Result<Tensor> {
        let (w, h) = self.expected_image();
        let mut data = Vec::with_capacity(pairs.len() * 2 * w * h);
        for (a, b) in pairs {
            self.check_image(a)?;
            self.check_image(b)?;
            data.extend_from_slice(a.data());
            data.extend_from_slice(b.data());
        }
        Ok(Tensor::new(vec![pairs.len(), 2, h, w], data))
    }

    /// `[B, 6, 1, T]` tensor of IMU windows, channels `(gx, gy, gz, ax, ay, az)`.
    pub fn imu_tensor(&self, windows: &[&[ImuSample]]) -> Result<Tensor> {
        let t = self.config.imu_window;
        let mut data = vec![0.0; windows.len() * 6 * t];
        for (b, win) in windows.iter().enumerate() {
            if win.len() != t {
                return Err(Error::shape("IMU window length", t, win.len()));
            }
            for (j, s) in win.iter().enumerate() {
                for (c, v) in s.channels().iter().enumerate() {
                    data[(b * 6 + c) * t + j] = *v;
                }
            }
        }
        Ok(Tensor::new(vec![windows.len(), 6, 1, t], data))
    }

    /// Visual encoder on a `[B, 2, H, W]` node; returns `[B, visual_feature]`.
    pub fn visual_graph(&self, g: &mut Graph, pairs: Var) -> Var {
        let mut x = pairs;
        for conv in &self.visual {
            let y = conv.forward(g, &self.store, x);
            x = g.leaky_relu(y, self.config.leaky_slope);
        }
        let b = g.shape(x)[0];
        let flat: usize = g.shape(x)[1..].iter().product();
        let x = g.reshape(x, &[b, flat]);
        self.visual_fc.forward(g, &self.store, x)
    }

    /// Inertial encoder on a `[B, 6, 1, T]` node; returns the `[B, C, 1, T]`
    /// map and the fused-ready feature.
    pub fn inertial_graph(&self, g: &mut Graph, imu: Var) -> (Var, Var) {
        let mut x = imu;
        for conv in &self.inertial {
            let y = conv.forward(g, &self.store, x);
            x = g.leaky_relu(y, self.config.leaky_slope);
        }
        let map = x;
        let b = g.shape(map)[0];
        let flat: usize = g.shape(map)[1..].iter().product();
        let x = g.reshape(map, &[b, flat]);
        let feat = match &self.inertial_fc {
            Some(fc) => fc.forward(g, &self.store, x),
            None => x,
        };
        (map, feat)
    }

    /// One LSTM step plus regression head. `state` holds `(h, c)` per layer.
    pub fn temporal_graph(&self, g: &mut Graph, z: Var, state: &[(Var, Var)]) -> (Var, Vec<(Var, Var)>) {
        let mut x = z;
        let mut next = Vec::with_capacity(state.len());
        for (layer, &(h, c)) in self.lstm.iter().zip(state) {
            let (h2, c2) = layer.step(g, &self.store, x, h, c);
            next.push((h2, c2));
            x = h2;
        }
        let y = self.mlp1.forward(g, &self.store, x);
        let y = g.leaky_relu(y, self.config.leaky_slope);
        (self.mlp2.forward(g, &self.store, y), next)
    }

    pub fn extract_visual_features(&self, frame_a: &Raster, frame_b: &Raster) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let x = g.input(self.pair_tensor(&[(frame_a, frame_b)])?);
        let f = self.visual_graph(&mut g, x);
        Ok(g.value(f).data().to_vec())
    }

    /// Returns the flattened `C × T` map and the fused-ready feature.
    pub fn extract_inertial_features(&self, imu: &[ImuSample]) -> Result<(Tensor, Vec<f64>)> {
        let mut g = Graph::new();
        let x = g.input(self.imu_tensor(&[imu])?);
        let (map, f) = self.inertial_graph(&mut g, x);
        let m = g.value(map);
        Ok((m.clone().reshape(&[m.dim(1), m.dim(3)]), g.value(f).data().to_vec()))
    }

    fn state_vars(&self, g: &mut Graph, state: &RecurrentState) -> Vec<(Var, Var)> {
        state
            .h
            .iter()
            .zip(&state.c)
            .map(|(h, c)| (g.input(h.clone()), g.input(c.clone())))
            .collect()
    }

    fn check_state(&self, state: &RecurrentState, batch: usize) -> Result<()> {
        let want = [batch, self.config.lstm_hidden];
        if state.h.len() != self.config.lstm_layers || state.c.len() != self.config.lstm_layers {
            return Err(Error::shape("recurrent state layers", self.config.lstm_layers, state.h.len()));
        }
        for t in state.h.iter().chain(&state.c) {
            if t.shape() != want {
                return Err(Error::shape("recurrent state tensor", want, t.shape()));
            }
        }
        Ok(())
    }

    /// One recurrent step on a single fused feature.
    pub fn step_temporal(&self, z: &[f64], state: &RecurrentState) -> Result<(PoseDelta, RecurrentState)> {
        if z.len() != self.config.fused_len() {
            return Err(Error::shape("fused feature length", self.config.fused_len(), z.len()));
        }
        self.check_state(state, 1)?;
        let mut g = Graph::new();
        let zv = g.input(Tensor::new(vec![1, z.len()], z.to_vec()));
        let sv = self.state_vars(&mut g, state);
        let (out, next) = self.temporal_graph(&mut g, zv, &sv);
        let next = RecurrentState {
            h: next.iter().map(|(h, _)| g.value(*h).clone()).collect(),
            c: next.iter().map(|(_, c)| g.value(*c).clone()).collect(),
        };
        Ok((PoseDelta::from_slice(g.value(out).data()), next))
    }

    /// Runs a whole sequence of fused features from a zero state in one graph.
    pub fn rollout(&self, zs: &[Vec<f64>]) -> Result<Vec<PoseDelta>> {
        let mut g = Graph::new();
        let state0 = RecurrentState::zeros(&self.config, 1);
        let mut state = self.state_vars(&mut g, &state0);
        let mut out = Vec::with_capacity(zs.len());
        for z in zs {
            if z.len() != self.config.fused_len() {
                return Err(Error::shape("fused feature length", self.config.fused_len(), z.len()));
            }
            let zv = g.input(Tensor::new(vec![1, z.len()], z.clone()));
            let (y, next) = self.temporal_graph(&mut g, zv, &state);
            out.push(PoseDelta::from_slice(g.value(y).data()));
            state = next;
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        weights::save(path, "vio-net", serde_json::to_value(&self.config)?, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, tensors) = weights::load(path)?;
        if header.model != "vio-net" {
            return Err(Error::Weights(format!(
                "{} holds a `{}` model, expected vio-net",
                path.display(),
                header.model
            )));
        }
        let cfg: VioConfig = serde_json::from_value(header.config.clone())?;
        let mut net = Self::new(cfg, 0)?;
        weights::assign(&mut net.store, &header, tensors)?;
        Ok(net)
    }
}
