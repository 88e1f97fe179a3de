use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{pose_loss_graph, pose_tensor, RecurrentState, VioConfig, VioNet};
use crate::dataio::{resample_imu, ImuSample, SampleWindow, SequenceDataset};
use crate::dehaze::Generator;
use crate::error::{Error, Result};
use crate::geometry::PoseDelta;
use crate::nn::optim::Adam;
use crate::nn::{Graph, Tensor, Var};
use crate::raster::Raster;

/// Graph scope of the dehazing generator during joint fine-tuning.
const DEHAZE_SCOPE: usize = 1;

#[derive(Debug, Clone, Default)]
pub struct VioTrainOptions<'a> {
    /// Frames pass through this generator before the visual encoder.
    pub dehazer: Option<&'a Generator>,
    /// Zero the visual features (inertial-only ablation).
    pub imu_only: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VioEpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct VioTrainOutput {
    pub net: VioNet,
    /// The fine-tuned generator when `dehaze_finetune` is on.
    pub dehazer: Option<Generator>,
    pub log: Vec<VioEpochLog>,
}

/// A window whose frames are already dehazed (frozen mode) and resized.
#[derive(Debug, Clone)]
struct Prepared {
    a: Arc<Raster>,
    b: Arc<Raster>,
    imu: Vec<ImuSample>,
    target: PoseDelta,
}

/// Dehazes (if requested) and resizes frames to the network input,
/// sharing work between windows that reference the same frame.
struct FramePrep<'a> {
    size: (usize, usize),
    dehazer: Option<&'a Generator>,
    cache: HashMap<*const Raster, Arc<Raster>>,
}

impl<'a> FramePrep<'a> {
    fn new(cfg: &VioConfig, dehazer: Option<&'a Generator>) -> Self {
        Self {
            size: (cfg.image_width, cfg.image_height),
            dehazer,
            cache: HashMap::new(),
        }
    }

    fn get(&mut self, frame: &Arc<Raster>) -> Result<Arc<Raster>> {
        let key = Arc::as_ptr(frame);
        if let Some(r) = self.cache.get(&key) {
            return Ok(r.clone());
        }
        let mut img = match self.dehazer {
            Some(g) => g.generate(frame)?,
            None => (**frame).clone(),
        };
        if img.dims() != self.size {
            img = img.resize(self.size.0, self.size.1);
        }
        let img = Arc::new(img);
        self.cache.insert(key, img.clone());
        Ok(img)
    }

    fn window(&mut self, w: &SampleWindow) -> Result<Prepared> {
        Ok(Prepared {
            a: self.get(&w.frame_a.image)?,
            b: self.get(&w.frame_b.image)?,
            imu: w.imu.clone(),
            target: w.target,
        })
    }
}

fn chunk_sequences(seqs: &[Vec<Prepared>], len: usize) -> Vec<Vec<Prepared>> {
    seqs.iter()
        .flat_map(|s| s.chunks(len).map(|c| c.to_vec()))
        .filter(|c| !c.is_empty())
        .collect()
}

/// Groups chunks into batches of equal chunk length, preserving `order`.
fn batches(chunks: &[Vec<Prepared>], order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut by_len: Vec<(usize, Vec<usize>)> = Vec::new();
    for &i in order {
        let len = chunks[i].len();
        match by_len.iter_mut().find(|(l, _)| *l == len) {
            Some((_, v)) => v.push(i),
            None => by_len.push((len, vec![i])),
        }
    }
    let mut out = Vec::new();
    for (_, idx) in by_len {
        out.extend(idx.chunks(batch_size).map(|c| c.to_vec()));
    }
    out
}

/// Pose loss of a batch of equally long chunks, rolled out from zero state.
fn batch_loss(
    g: &mut Graph,
    net: &VioNet,
    chunks: &[&[Prepared]],
    joint: Option<&Generator>,
    imu_only: bool,
) -> Result<Var> {
    let cfg = net.config();
    let b = chunks.len();
    let t_len = chunks[0].len();
    // rows are time-major: row t * B + b
    let rows: Vec<&Prepared> = (0..t_len).flat_map(|t| chunks.iter().map(move |c| &c[t])).collect();
    let n = rows.len();
    let xv = if imu_only {
        g.input(Tensor::zeros(&[n, cfg.visual_feature]))
    } else {
        let pairs = match joint {
            Some(gen) => {
                let prev = g.set_scope(DEHAZE_SCOPE);
                let fa: Vec<&Raster> = rows.iter().map(|r| &*r.a).collect();
                let fb: Vec<&Raster> = rows.iter().map(|r| &*r.b).collect();
                let da = gen.forward(g, &fa)?;
                let db = gen.forward(g, &fb)?;
                g.set_scope(prev);
                g.concat(&[da, db])
            }
            None => {
                let pairs: Vec<(&Raster, &Raster)> = rows.iter().map(|r| (&*r.a, &*r.b)).collect();
                g.input(net.pair_tensor(&pairs)?)
            }
        };
        net.visual_graph(g, pairs)
    };
    let imu: Vec<&[ImuSample]> = rows.iter().map(|r| r.imu.as_slice()).collect();
    let imu = g.input(net.imu_tensor(&imu)?);
    let (_, xi) = net.inertial_graph(g, imu);
    let z = g.concat(&[xv, xi]);
    let f = cfg.fused_len();
    let z3 = g.reshape(z, &[1, t_len, b * f]);
    let zero = RecurrentState::zeros(cfg, b);
    let mut state: Vec<(Var, Var)> = zero
        .h
        .iter()
        .zip(&zero.c)
        .map(|(h, c)| (g.input(h.clone()), g.input(c.clone())))
        .collect();
    let mut preds = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let zt = g.narrow(z3, t, 1);
        let zt = g.reshape(zt, &[b, f]);
        let (y, next) = net.temporal_graph(g, zt, &state);
        preds.push(y);
        state = next;
    }
    // [B, 6T] -> [B*T, 6], row b * T + t
    let pred = g.concat(&preds);
    let pred = g.reshape(pred, &[b * t_len, 6]);
    let targets: Vec<PoseDelta> = chunks.iter().flat_map(|c| c.iter().map(|p| p.target)).collect();
    Ok(pose_loss_graph(g, pred, &pose_tensor(&targets), cfg.alpha))
}

fn evaluate(
    net: &VioNet,
    chunks: &[Vec<Prepared>],
    batch_size: usize,
    joint: Option<&Generator>,
    imu_only: bool,
) -> Result<f64> {
    let order: Vec<usize> = (0..chunks.len()).collect();
    let (mut total, mut count) = (0.0, 0usize);
    for batch in batches(chunks, &order, batch_size) {
        let refs: Vec<&[Prepared]> = batch.iter().map(|&i| chunks[i].as_slice()).collect();
        let mut g = Graph::new();
        let loss = batch_loss(&mut g, net, &refs, joint, imu_only)?;
        let steps = refs.len() * refs[0].len();
        total += g.value(loss).item() * steps as f64;
        count += steps;
    }
    Ok(total / count.max(1) as f64)
}

/// Mean pose loss of `net` over `windows` with the same batching as training.
pub fn vio_loss(net: &VioNet, windows: &[Vec<SampleWindow>], opts: &VioTrainOptions) -> Result<f64> {
    let mut prep = FramePrep::new(net.config(), opts.dehazer);
    let seqs = windows
        .iter()
        .map(|s| s.iter().map(|w| prep.window(w)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let chunks = chunk_sequences(&seqs, net.config().seq_len);
    evaluate(net, &chunks, net.config().batch_size, None, opts.imu_only)
}

/// Pose loss of one batch of equally long window chunks (rolled out from
/// zero state) and its gradient for every trainable parameter, by name.
pub fn vio_loss_gradients(
    net: &VioNet,
    chunks: &[Vec<SampleWindow>],
    opts: &VioTrainOptions,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let len = chunks.first().map_or(0, |c| c.len());
    if len == 0 || chunks.iter().any(|c| c.len() != len) {
        return Err(Error::InvalidArgument("chunks must be non-empty and equally long".into()));
    }
    let mut prep = FramePrep::new(net.config(), opts.dehazer);
    let prepared = chunks
        .iter()
        .map(|c| c.iter().map(|w| prep.window(w)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&[Prepared]> = prepared.iter().map(|c| c.as_slice()).collect();
    let mut g = Graph::new();
    let loss = batch_loss(&mut g, net, &refs, None, opts.imu_only)?;
    let value = g.value(loss).item();
    let grads = g.backward(loss);
    let named = grads
        .params()
        .iter()
        .map(|(id, t)| (net.store().name(*id).to_string(), t.clone()))
        .collect();
    Ok((value, named))
}

/// Trains the pose network. `train` and `val` hold the windows of each
/// sequence in time order; chunks of `seq_len` consecutive windows are the
/// recurrent training unit.
pub fn train_vio(
    train: &[Vec<SampleWindow>],
    val: &[Vec<SampleWindow>],
    cfg: &VioConfig,
    opts: &VioTrainOptions,
) -> Result<VioTrainOutput> {
    cfg.validate()?;
    if train.iter().all(|s| s.is_empty()) {
        return Err(Error::InvalidArgument("VIO training set is empty".into()));
    }
    let mut net = VioNet::new(cfg.clone(), opts.seed)?;
    let mut joint = match (cfg.dehaze_finetune, opts.dehazer) {
        (true, Some(g)) => {
            if g.config().input_size.is_some_and(|s| s != (cfg.image_width, cfg.image_height)) {
                return Err(Error::InvalidArgument(
                    "joint dehazer fine-tuning needs dehazer and VIO input sizes to match".into(),
                ));
            }
            Some(g.clone())
        }
        _ => None,
    };
    // frozen dehazing happens once, up front
    let frozen = if joint.is_some() { None } else { opts.dehazer };
    let mut prep = FramePrep::new(cfg, frozen);
    let prepare = |prep: &mut FramePrep, sets: &[Vec<SampleWindow>]| -> Result<Vec<Vec<Prepared>>> {
        sets.iter()
            .map(|s| s.iter().map(|w| prep.window(w)).collect::<Result<Vec<_>>>())
            .collect()
    };
    let train_chunks = chunk_sequences(&prepare(&mut prep, train)?, cfg.seq_len);
    let val_chunks = chunk_sequences(&prepare(&mut prep, val)?, cfg.seq_len);
    drop(prep);

    let mut opt = Adam::new(cfg.learning_rate, cfg.adam_betas);
    let mut opt_dehaze = Adam::new(cfg.learning_rate, cfg.adam_betas);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..train_chunks.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut steps) = (0.0, 0usize);
        for batch in batches(&train_chunks, &order, cfg.batch_size) {
            let refs: Vec<&[Prepared]> = batch.iter().map(|&i| train_chunks[i].as_slice()).collect();
            let mut g = Graph::new();
            let loss = batch_loss(&mut g, &net, &refs, joint.as_ref(), opts.imu_only)?;
            let n = refs.len() * refs[0].len();
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::InvalidArgument(format!("VIO loss diverged at epoch {epoch}")));
            }
            total += value * n as f64;
            steps += n;
            let grads = g.backward(loss);
            opt.step(net.store_mut(), grads.params(), |_| false);
            if let Some(gen) = joint.as_mut() {
                opt_dehaze.step(gen.store_mut(), grads.params_in(DEHAZE_SCOPE), |_| false);
            }
        }
        let val_loss = if val_chunks.is_empty() {
            None
        } else {
            Some(evaluate(&net, &val_chunks, cfg.batch_size, joint.as_ref(), opts.imu_only)?)
        };
        let entry = VioEpochLog {
            epoch,
            train_loss: total / steps as f64,
            val_loss,
        };
        log::info!(
            "vio epoch {epoch}: train {:.6e} val {}",
            entry.train_loss,
            val_loss.map_or("-".to_string(), |v| format!("{v:.6e}"))
        );
        log.push(entry);
    }
    Ok(VioTrainOutput {
        net,
        dehazer: joint,
        log,
    })
}

/// Relative-pose estimates for every consecutive frame pair of `dataset`,
/// from one stateful pass starting at zero state. Reference poses are not
/// needed.
pub fn infer_sequence(net: &VioNet, dataset: &SequenceDataset, dehazer: Option<&Generator>) -> Result<Vec<PoseDelta>> {
    infer_sequence_with(net, dataset, dehazer, false)
}

/// [`infer_sequence`] with optional visual-feature ablation.
pub fn infer_sequence_with(
    net: &VioNet,
    dataset: &SequenceDataset,
    dehazer: Option<&Generator>,
    imu_only: bool,
) -> Result<Vec<PoseDelta>> {
    if dataset.frames.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "sequence {} has {} frame(s); inference needs at least 2",
            dataset.sequence_id,
            dataset.frames.len()
        )));
    }
    let cfg = net.config();
    let mut prep = FramePrep::new(cfg, dehazer);
    let frames = dataset
        .frames
        .iter()
        .map(|f| prep.get(&f.image))
        .collect::<Result<Vec<_>>>()?;
    let imu = dataset
        .frames
        .windows(2)
        .enumerate()
        .map(|(i, p)| {
            resample_imu(&dataset.imu_stream, p[0].timestamp, p[1].timestamp, cfg.imu_window).map_err(|message| {
                Error::Coverage {
                    frame_a: i,
                    frame_b: i + 1,
                    message,
                }
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = imu.len();
    let f = cfg.fused_len();
    let mut zs = Vec::with_capacity(n);
    for start in (0..n).step_by(16) {
        let end = (start + 16).min(n);
        let mut g = Graph::new();
        let xv = if imu_only {
            g.input(Tensor::zeros(&[end - start, cfg.visual_feature]))
        } else {
            let pairs: Vec<(&Raster, &Raster)> = (start..end).map(|i| (&*frames[i], &*frames[i + 1])).collect();
            let x = g.input(net.pair_tensor(&pairs)?);
            net.visual_graph(&mut g, x)
        };
        let windows: Vec<&[ImuSample]> = imu[start..end].iter().map(|w| w.as_slice()).collect();
        let x = g.input(net.imu_tensor(&windows)?);
        let (_, xi) = net.inertial_graph(&mut g, x);
        let z = g.concat(&[xv, xi]);
        zs.extend(g.value(z).data().chunks(f).map(|c| c.to_vec()));
    }
    let mut state = RecurrentState::zeros(cfg, 1);
    let mut out = Vec::with_capacity(n);
    for z in &zs {
        let (d, next) = net.step_temporal(z, &state)?;
        out.push(d);
        state = next;
    }
    Ok(out)
}
