use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use crate::dataio::{build_windows, load_sequence, retain_fraction, SampleWindow, Scenario, SequenceDataset};
use crate::dehaze::{capped_psnr, image_metrics, train_dehazer, DehazeTrainConfig, Generator, ImagePair};
use crate::disturb::{disturb_sequence, synthesize_sequence};
use crate::error::{Error, Result};
use crate::eval::{
    capture_hardware_metrics, evaluate_sequence, harbor_baselines, render_reports, HardwareMetrics, HardwareProbe,
    RmseReport,
};
use crate::vionet::{infer_sequence, train_vio, VioNet, VioTrainOptions};

/// Frames compared per test sequence when scoring dehazing quality.
const QUALITY_FRAMES: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub scenario: Option<Scenario>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_sha256: String,
    pub seed: u64,
    pub deterministic: bool,
    pub versions: BTreeMap<String, String>,
    pub stages: Vec<StageTiming>,
    pub status: String,
    pub failed_stage: Option<String>,
    pub config: ExperimentConfig,
}

/// PSNR of disturbed and dehazed test frames against the clean frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageQuality {
    pub sequence_id: String,
    pub scenario: Scenario,
    pub frames: usize,
    /// dB
    pub disturbed_psnr: f64,
    /// dB
    pub dehazed_psnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareRecord {
    pub sequence_id: String,
    pub scenario: Scenario,
    pub dehazed: bool,
    pub metrics: HardwareMetrics,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub dir: PathBuf,
    pub reports: Vec<RmseReport>,
    pub image_quality: Vec<ImageQuality>,
    pub provenance: Provenance,
}

fn versions() -> BTreeMap<String, String> {
    [
        ("duvio-core", env!("CARGO_PKG_VERSION")),
        ("os", std::env::consts::OS),
        ("arch", std::env::consts::ARCH),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

/// SHA-256 of the config's canonical JSON.
pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    let json = serde_json::to_vec(cfg)?;
    Ok(hex::encode(Sha256::digest(&json)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    seed: u64,
    dir: PathBuf,
    timings: Vec<StageTiming>,
    current: Option<String>,
}

impl Run<'_> {
    fn stage<T>(&mut self, name: &str, scenario: Option<Scenario>, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let label = match scenario {
            Some(s) => format!("{name}:{s}"),
            None => name.to_string(),
        };
        log::info!("stage {label}");
        self.current = Some(label.clone());
        let start = Instant::now();
        let out = f(self).map_err(|e| Error::Stage {
            stage: label,
            source: Box::new(e),
        })?;
        self.timings.push(StageTiming {
            stage: name.into(),
            scenario,
            seconds: start.elapsed().as_secs_f64(),
        });
        self.current = None;
        Ok(out)
    }

    fn load(&self) -> Result<BTreeMap<String, SequenceDataset>> {
        let split = self.cfg.resolved_split();
        let wanted: Vec<&String> = split.train.iter().chain(&split.val).chain(&split.test).collect();
        let mut out = BTreeMap::new();
        match &self.cfg.dataset_root {
            Some(root) => {
                for id in wanted {
                    out.insert(id.clone(), load_sequence(&root.join(id))?);
                }
            }
            None => {
                for spec in self.cfg.synthetic.specs(self.seed) {
                    if wanted.contains(&&spec.sequence_id) {
                        out.insert(spec.sequence_id.clone(), synthesize_sequence(&spec)?);
                    }
                }
            }
        }
        Ok(out)
    }

    fn windows(&self, data: &BTreeMap<String, SequenceDataset>, ids: &[String]) -> Result<Vec<Vec<SampleWindow>>> {
        let split = self.cfg.resolved_split();
        ids.iter()
            .map(|id| {
                let w = build_windows(&data[id])?;
                Ok(retain_fraction(&w, split.fraction, split.mode))
            })
            .collect()
    }

    fn dehaze_pairs(&self, clean: &BTreeMap<String, SequenceDataset>, disturbed: &BTreeMap<String, SequenceDataset>) -> Vec<ImagePair> {
        let split = self.cfg.resolved_split();
        let per = self.cfg.dehaze.pairs_per_sequence;
        let mut pairs = Vec::new();
        for id in &split.train {
            let (c, d) = (&clean[id], &disturbed[id]);
            let n = c.frames.len();
            let take = per.min(n);
            for k in 0..take {
                let i = k * n / take;
                pairs.push(((*d.frames[i].image).clone(), (*c.frames[i].image).clone()));
            }
        }
        pairs
    }

    fn quality(&self, gen: &Generator, clean: &SequenceDataset, disturbed: &SequenceDataset) -> Result<ImageQuality> {
        let n = clean.frames.len();
        let take = QUALITY_FRAMES.min(n);
        let (mut hazy, mut fixed) = (0.0, 0.0);
        for k in 0..take {
            let i = k * n / take;
            let c = &clean.frames[i].image;
            let d = &disturbed.frames[i].image;
            hazy += capped_psnr(image_metrics(c, d)?.psnr);
            fixed += capped_psnr(image_metrics(c, &gen.generate(d)?.quantize8())?.psnr);
        }
        Ok(ImageQuality {
            sequence_id: clean.sequence_id.clone(),
            scenario: disturbed.scenario,
            frames: take,
            disturbed_psnr: hazy / take as f64,
            dehazed_psnr: fixed / take as f64,
        })
    }

    fn execute(&mut self) -> Result<(Vec<RmseReport>, Vec<ImageQuality>)> {
        let cfg = self.cfg;
        let split = cfg.resolved_split();
        let clean = self.stage("load", None, |r| r.load())?;
        let mut reports = Vec::new();
        let mut quality = Vec::new();
        let mut hardware = Vec::new();
        let mut probe = cfg.probe.clone();

        for &scenario in &cfg.scenarios {
            let sdir = self.dir.join(scenario.as_str());
            fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
            let disturbed: BTreeMap<String, SequenceDataset> = self.stage("disturb", Some(scenario), |_| {
                Ok(clean
                    .iter()
                    .map(|(id, ds)| {
                        let out = disturb_sequence(ds, scenario, &cfg.disturb.turbidity, &cfg.disturb.distortion);
                        (id.clone(), out)
                    })
                    .collect())
            })?;

            let dehazer = if cfg.dehaze.enabled {
                let gen = self.stage("dehaze-train", Some(scenario), |r| {
                    if let Some(w) = &cfg.dehaze.weights {
                        return Generator::load(w);
                    }
                    let pairs = r.dehaze_pairs(&clean, &disturbed);
                    let tcfg = DehazeTrainConfig {
                        seed: r.seed,
                        ..cfg.dehaze.train.clone()
                    };
                    let out = train_dehazer(&pairs, &cfg.dehaze.generator, &cfg.dehaze.discriminator, &tcfg)?;
                    write_json(&sdir.join("dehaze_log.json"), &out.log)?;
                    Ok(out.generator)
                })?;
                gen.save(&sdir.join("dehazer.weights"))?;
                Some(gen)
            } else {
                None
            };

            let train_w = self.windows(&disturbed, &split.train)?;
            let val_w = self.windows(&disturbed, &split.val)?;
            let mut variants: Vec<(bool, VioNet, Option<Generator>)> = Vec::new();
            let mut want: Vec<bool> = Vec::new();
            if dehazer.is_some() {
                want.push(true);
            }
            if dehazer.is_none() || cfg.dehaze.compare_without {
                want.push(false);
            }
            for dehazed in want {
                let tag = if dehazed { "vio" } else { "vio_undehazed" };
                let (net, gen) = self.stage("vio-train", Some(scenario), |r| {
                    let opts = VioTrainOptions {
                        dehazer: if dehazed { dehazer.as_ref() } else { None },
                        imu_only: false,
                        seed: r.seed,
                    };
                    let out = train_vio(&train_w, &val_w, &cfg.vio, &opts)?;
                    write_json(&sdir.join(format!("{tag}_log.json")), &out.log)?;
                    let gen = if dehazed { out.dehazer.or_else(|| dehazer.clone()) } else { None };
                    Ok((out.net, gen))
                })?;
                net.save(&sdir.join(format!("{tag}.weights")))?;
                variants.push((dehazed, net, gen));
            }

            for (dehazed, net, gen) in &variants {
                let preds = self.stage("vio-infer", Some(scenario), |_| {
                    let mut out = Vec::new();
                    for id in &split.test {
                        let p: Option<&mut dyn HardwareProbe> = probe.as_mut().map(|p| p as &mut dyn HardwareProbe);
                        let (metrics, deltas) = capture_hardware_metrics(p, || infer_sequence(net, &disturbed[id], gen.as_ref()))?;
                        hardware.push(HardwareRecord {
                            sequence_id: id.clone(),
                            scenario,
                            dehazed: *dehazed,
                            metrics,
                        });
                        out.push((id.clone(), deltas));
                    }
                    Ok(out)
                })?;
                let tag = if *dehazed { "dehazed" } else { "undehazed" };
                for (id, deltas) in &preds {
                    write_predictions(&sdir.join(format!("pred_{id}_{tag}.csv")), deltas)?;
                }
                let reps = self.stage("eval", Some(scenario), |r| {
                    let mut out = Vec::new();
                    for (id, deltas) in &preds {
                        let refs: Vec<_> = build_windows(&disturbed[id])?.into_iter().map(|w| w.target).collect();
                        out.extend(evaluate_sequence(id, scenario, *dehazed, deltas, &refs, r.cfg.eval.rotation_error)?);
                    }
                    Ok(out)
                })?;
                reports.extend(reps);
            }

            if let Some(gen) = variants.iter().find_map(|v| v.2.as_ref()) {
                for id in &split.test {
                    quality.push(self.quality(gen, &clean[id], &disturbed[id])?);
                }
            }
            write_json(&self.dir.join("hardware.json"), &hardware)?;
        }

        let dir = self.dir.clone();
        self.stage("report", None, |_| {
            render_reports(&reports, &harbor_baselines(), &dir.join("report"))?;
            write_json(&dir.join("report").join("image_quality.json"), &quality)
        })?;
        Ok((reports, quality))
    }
}

/// Writes `index,vx,vy,vz,phix,phiy,phiz` rows.
pub fn write_predictions(path: &Path, deltas: &[crate::geometry::PoseDelta]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["index", "vx", "vy", "vz", "phix", "phiy", "phiz"])?;
    for (i, d) in deltas.iter().enumerate() {
        let a = d.to_array();
        let mut row = vec![i.to_string()];
        row.extend(a.iter().map(|v| format!("{v}")));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads the CSV written by [`write_predictions`].
pub fn read_predictions(path: &Path) -> Result<Vec<crate::geometry::PoseDelta>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != 7 {
            return Err(Error::Load {
                path: path.into(),
                message: format!("row {row} has {} columns, expected 7", rec.len()),
            });
        }
        let vals = rec
            .iter()
            .skip(1)
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Load {
                path: path.into(),
                message: format!("row {row}: {e}"),
            })?;
        out.push(crate::geometry::PoseDelta::from_slice(&vals));
    }
    Ok(out)
}

/// Resolves the seed: the configured one, else one drawn from the clock
/// (only allowed with determinism off).
pub fn resolve_seed(cfg: &ExperimentConfig) -> u64 {
    cfg.seed.unwrap_or_else(|| {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_nanos() as u64)
            .unwrap_or(0)
    })
}

/// Runs every stage for every configured scenario and writes the experiment
/// directory. On failure the error names the stage, outputs written so far
/// are kept and `provenance.json` records the failure.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineOutput> {
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let seed = resolve_seed(cfg);
    let mut resolved = cfg.clone();
    resolved.seed = Some(seed);
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut run = Run {
        cfg: &resolved,
        seed,
        dir: dir.clone(),
        timings: Vec::new(),
        current: None,
    };
    let result = run.execute();
    let provenance = Provenance {
        config_sha256: config_hash(&resolved)?,
        seed,
        deterministic: resolved.deterministic,
        versions: versions(),
        stages: run.timings.clone(),
        status: if result.is_ok() { "ok" } else { "failed" }.into(),
        failed_stage: run.current.clone(),
        config: resolved.clone(),
    };
    write_json(&dir.join("provenance.json"), &provenance)?;
    let (reports, image_quality) = result?;
    Ok(PipelineOutput {
        dir,
        reports,
        image_quality,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cli::parse_config;
    use crate::geometry::PoseDelta;

    fn tiny(dir: &Path, extra: &str) -> ExperimentConfig {
        let text = format!(
            r#"
seed = 3
output_dir = {:?}
scenario = ["turbid"]
{extra}
[synthetic]
sequences = 2
duration = 1.0
width = 32
height = 16
[dehaze]
pairs_per_sequence = 4
[dehaze.generator]
base_channels = 8
depth = 2
[dehaze.discriminator]
layers = 3
base_channels = 8
[dehaze.train]
epochs = 2
batch_size = 2
[vio]
image_width = 32
image_height = 16
visual_channels = [4, 4, 8]
visual_kernels = [3, 3, 3]
visual_strides = [2, 2, 2]
visual_feature = 8
inertial_channels = [4, 4, 4]
inertial_feature = 8
lstm_layers = 1
lstm_hidden = 8
mlp_hidden = 8
epochs = 2
batch_size = 2
seq_len = 5
learning_rate = 1e-3
"#,
            dir.to_str().unwrap()
        );
        parse_config(&text).unwrap()
    }

    #[test]
    fn tiny_run_writes_everything() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny(&tmp.path().join("run"), "");
        let out = run_pipeline(&cfg).unwrap();
        // one test sequence, with and without dehazing, three thirds each
        assert_eq!(out.reports.len(), 6);
        assert_eq!(out.reports.iter().filter(|r| r.dehazed).count(), 3);
        for f in ["provenance.json", "hardware.json", "report/report.json", "report/report.txt", "report/chart_syn01.svg", "turbid/dehazer.weights", "turbid/vio.weights", "turbid/vio_undehazed.weights", "turbid/pred_syn01_dehazed.csv"] {
            assert!(out.dir.join(f).exists(), "{f}");
        }
        assert_eq!(out.provenance.status, "ok");
        assert!(out.provenance.stages.iter().any(|s| s.stage == "vio-train"));
        assert_eq!(out.image_quality.len(), 1);
        let preds = read_predictions(&out.dir.join("turbid/pred_syn01_dehazed.csv")).unwrap();
        assert_eq!(preds.len(), 20);
    }

    #[test]
    fn dehaze_off_is_undehazed_only() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = tiny(&tmp.path().join("run"), "");
        cfg.dehaze.enabled = false;
        let out = run_pipeline(&cfg).unwrap();
        assert_eq!(out.reports.len(), 3);
        assert!(out.reports.iter().all(|r| !r.dehazed));
        assert!(out.image_quality.is_empty());
    }

    #[test]
    fn failing_stage_is_named() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = tiny(&tmp.path().join("run"), "");
        // dehazer input smaller than the discriminator accepts
        cfg.dehaze.discriminator.layers = 8;
        let err = run_pipeline(&cfg).unwrap_err();
        match &err {
            Error::Stage { stage, .. } => assert_eq!(stage, "dehaze-train:turbid"),
            other => panic!("unexpected {other}"),
        }
        let prov: Provenance =
            serde_json::from_str(&fs::read_to_string(tmp.path().join("run/provenance.json")).unwrap()).unwrap();
        assert_eq!(prov.status, "failed");
        assert_eq!(prov.failed_stage.as_deref(), Some("dehaze-train:turbid"));
        assert!(prov.stages.iter().any(|s| s.stage == "disturb"));
    }

    #[test]
    fn predictions_csv_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("p.csv");
        let d = vec![PoseDelta::new([0.1, -2.0, 3.5e-9], [0.0, 1.0, -0.25]); 3];
        write_predictions(&p, &d).unwrap();
        assert_eq!(read_predictions(&p).unwrap(), d);
    }

    #[test]
    fn hash_tracks_config() {
        let a = ExperimentConfig { seed: Some(1), ..Default::default() };
        let b = ExperimentConfig { seed: Some(2), ..Default::default() };
        assert_eq!(config_hash(&a).unwrap(), config_hash(&a.clone()).unwrap());
        assert_ne!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
    }
}
