use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use duvio_core::cli::{parse_config, read_predictions, run_pipeline, validate_config, write_predictions, ExperimentConfig};
use duvio_core::dataio::{build_windows, export_windows, load_sequence, save_sequence, Scenario, SequenceDataset};
use duvio_core::dehaze::{capped_psnr, image_metrics, train_dehazer, DehazeTrainConfig, Generator, ImageQualityReport};
use duvio_core::disturb::{disturb_sequence, synthesize_sequence, DistortionParams, SyntheticSpec, TurbidityParams};
use duvio_core::raster::Raster;
use duvio_core::eval::{evaluate_sequence, harbor_baselines, render_reports, ReportDocument, RmseReport};
use duvio_core::vionet::{infer_sequence, train_vio, VioNet, VioTrainOptions};

#[derive(Parser)]
#[command(name = "duvio", version, about = "Dehazing-aided visual-inertial odometry")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment config (TOML); defaults apply to omitted keys.
    #[arg(long, global = true, visible_alias = "cfg")]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    deterministic: bool,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic sequence.
    Synth {
        /// SyntheticSpec TOML; defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply a scenario disturbance to every frame of a sequence.
    Disturb {
        #[arg(long = "in", visible_alias = "seq")]
        input: PathBuf,
        #[arg(long)]
        scenario: Scenario,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        params: ModelParams,
    },
    /// Train the dehazing GAN on frame-aligned (hazy, clean) sequences.
    /// `--data` takes clean sequences and hazes them with the configured
    /// turbidity model.
    DehazeTrain {
        #[arg(long, required_unless_present = "data")]
        hazy: Vec<PathBuf>,
        #[arg(long, required_unless_present = "data")]
        clean: Vec<PathBuf>,
        #[arg(long, conflicts_with_all = ["hazy", "clean"])]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dehaze every frame of a sequence.
    DehazeRun {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long = "in", visible_alias = "seq")]
        seq: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean PSNR/SSIM/MSE/RMSE against clean frames, for the input frames
    /// and (with `--weights`) their dehazed versions. `--pairs` takes a clean
    /// sequence and hazes it with the configured turbidity model.
    DehazeEval {
        #[arg(long, required_unless_present = "pairs", requires = "test")]
        clean: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long, conflicts_with_all = ["clean", "test"])]
        pairs: Option<PathBuf>,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train the pose network.
    VioTrain {
        #[arg(long, required = true, visible_alias = "data")]
        train: Vec<PathBuf>,
        #[arg(long)]
        val: Vec<PathBuf>,
        #[arg(long, visible_alias = "dehaze")]
        dehazer: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate relative poses; writes index,vx,vy,vz,phix,phiy,phiz.
    VioInfer {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        seq: PathBuf,
        #[arg(long, visible_alias = "dehaze")]
        dehazer: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against a sequence's reference poses.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        scenario: Option<Scenario>,
        #[arg(long)]
        dehazed: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render tables and charts from eval outputs.
    Report {
        #[arg(long = "in", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        charts: PathBuf,
    },
    /// Full pipeline from the experiment config.
    Run,
    /// Write a sequence's training windows as flat binary arrays.
    ExportWindows {
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Overrides for the configured disturbance models.
#[derive(Args)]
struct ModelParams {
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    airlight: Option<f64>,
    #[arg(long)]
    k1: Option<f64>,
    #[arg(long)]
    k2: Option<f64>,
    #[arg(long)]
    blur: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(serde::Serialize)]
struct QualityRow {
    images: &'static str,
    #[serde(flatten)]
    metrics: ImageQualityReport,
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(p) => validate_config(p)?,
        None => parse_config("")?,
    };
    if g.seed.is_some() {
        cfg.seed = g.seed;
    }
    if g.deterministic {
        cfg.deterministic = true;
        cfg.seed.get_or_insert(0);
    }
    Ok(cfg)
}

fn seed(cfg: &ExperimentConfig) -> u64 {
    duvio_core::cli::resolve_seed(cfg)
}

fn frame_pairs(hazy: &SequenceDataset, clean: &SequenceDataset) -> Result<Vec<(Raster, Raster)>> {
    if hazy.frames.len() != clean.frames.len() {
        bail!(
            "{} has {} frames but {} has {}",
            hazy.sequence_id,
            hazy.frames.len(),
            clean.sequence_id,
            clean.frames.len()
        );
    }
    Ok(hazy
        .frames
        .iter()
        .zip(&clean.frames)
        .map(|(h, c)| ((*h.image).clone(), (*c.image).clone()))
        .collect())
}

fn haze(cfg: &ExperimentConfig, clean: &SequenceDataset) -> SequenceDataset {
    disturb_sequence(clean, Scenario::Turbid, &cfg.disturb.turbidity, &cfg.disturb.distortion)
}

fn mean_quality(pairs: &[(Raster, Raster)], gen: Option<&Generator>) -> Result<ImageQualityReport> {
    let n = pairs.len() as f64;
    let (mut psnr, mut ssim, mut mse) = (0.0, 0.0, 0.0);
    for (t, c) in pairs {
        let img = match gen {
            Some(g) => g.generate(t)?.quantize8(),
            None => t.clone(),
        };
        let m = image_metrics(c, &img)?;
        psnr += capped_psnr(m.psnr);
        ssim += m.ssim;
        mse += m.mse;
    }
    Ok(ImageQualityReport {
        psnr: psnr / n,
        ssim: ssim / n,
        mse: mse / n,
        rmse: (mse / n).sqrt(),
    })
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(v)?).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.global)?;
    match cli.command {
        Command::Synth { spec, out } => {
            let spec: SyntheticSpec = match spec {
                Some(p) => toml::from_str(&fs::read_to_string(&p)?).with_context(|| format!("parsing {}", p.display()))?,
                None => SyntheticSpec::default(),
            };
            let ds = synthesize_sequence(&spec)?;
            save_sequence(&ds, &out)?;
            println!("wrote {} frames to {}", ds.frames.len(), out.display());
        }
        Command::Disturb { input, scenario, out, params } => {
            let ds = load_sequence(&input)?;
            let t = &cfg.disturb.turbidity;
            let turbidity = TurbidityParams::new(
                params.beta.unwrap_or(t.attenuation_beta),
                params.airlight.unwrap_or(t.airlight),
                t.depth.clone(),
            );
            let d = &cfg.disturb.distortion;
            let distortion = DistortionParams::new(
                params.k1.unwrap_or(d.radial_k1),
                params.k2.unwrap_or(d.radial_k2),
                params.blur.unwrap_or(d.blur_sigma),
                params.noise.unwrap_or(d.noise_sigma),
                cli.global.seed.unwrap_or(d.seed),
            );
            save_sequence(&disturb_sequence(&ds, scenario, &turbidity, &distortion), &out)?;
        }
        Command::DehazeTrain { hazy, clean, data, out } => {
            if hazy.len() != clean.len() {
                bail!("--hazy and --clean must be given the same number of times");
            }
            let mut pairs = Vec::new();
            for (h, c) in hazy.iter().zip(&clean) {
                pairs.extend(frame_pairs(&load_sequence(h)?, &load_sequence(c)?)?);
            }
            for p in &data {
                let c = load_sequence(p)?;
                pairs.extend(frame_pairs(&haze(&cfg, &c), &c)?);
            }
            let tcfg = DehazeTrainConfig {
                seed: seed(&cfg),
                ..cfg.dehaze.train.clone()
            };
            let res = train_dehazer(&pairs, &cfg.dehaze.generator, &cfg.dehaze.discriminator, &tcfg)?;
            res.generator.save(&out)?;
            write_json(&out.with_extension("log.json"), &res.log)?;
        }
        Command::DehazeRun { weights, seq, out } => {
            let gen = Generator::load(&weights)?;
            let ds = load_sequence(&seq)?;
            let mut err = None;
            let d = ds.map_frames(|_, img| match gen.generate(img) {
                Ok(r) => r.quantize8(),
                Err(e) => {
                    err.get_or_insert(e);
                    img.clone()
                }
            });
            if let Some(e) = err {
                return Err(e.into());
            }
            save_sequence(&d, &out)?;
        }
        Command::DehazeEval { clean, test, pairs, weights, report } => {
            let (t, c) = match (pairs, clean, test) {
                (Some(p), _, _) => {
                    let c = load_sequence(&p)?;
                    (haze(&cfg, &c), c)
                }
                (None, Some(c), Some(t)) => (load_sequence(&t)?, load_sequence(&c)?),
                _ => bail!("give --pairs or both --clean and --test"),
            };
            let pairs = frame_pairs(&t, &c)?;
            let mut rows = vec![QualityRow {
                images: "input",
                metrics: mean_quality(&pairs, None)?,
            }];
            if let Some(w) = weights {
                rows.push(QualityRow {
                    images: "dehazed",
                    metrics: mean_quality(&pairs, Some(&Generator::load(&w)?))?,
                });
            }
            match report {
                Some(p) => write_json(&p, &rows)?,
                None => println!("{}", serde_json::to_string_pretty(&rows)?),
            }
        }
        Command::VioTrain { train, val, dehazer, out } => {
            let windows = |paths: &[PathBuf]| -> Result<Vec<_>> {
                paths.iter().map(|p| Ok(build_windows(&load_sequence(p)?)?)).collect()
            };
            let gen = dehazer.map(|w| Generator::load(&w)).transpose()?;
            let opts = VioTrainOptions {
                dehazer: gen.as_ref(),
                imu_only: false,
                seed: seed(&cfg),
            };
            let res = train_vio(&windows(&train)?, &windows(&val)?, &cfg.vio, &opts)?;
            res.net.save(&out)?;
            write_json(&out.with_extension("log.json"), &res.log)?;
        }
        Command::VioInfer { weights, seq, dehazer, out } => {
            let net = VioNet::load(&weights)?;
            let gen = dehazer.map(|w| Generator::load(&w)).transpose()?;
            let deltas = infer_sequence(&net, &load_sequence(&seq)?, gen.as_ref())?;
            write_predictions(&out, &deltas)?;
        }
        Command::Eval { pred, reference, scenario, dehazed, out } => {
            let preds = read_predictions(&pred)?;
            let ds = load_sequence(&reference)?;
            let refs: Vec<_> = build_windows(&ds)?.into_iter().map(|w| w.target).collect();
            let scenario = scenario.unwrap_or(ds.scenario);
            let reps = evaluate_sequence(&ds.sequence_id, scenario, dehazed, &preds, &refs, cfg.eval.rotation_error)?;
            write_json(&out, &reps)?;
            for r in &reps {
                println!("{} {} sub {}: v_rmse {:.6} m, phi_rmse {:.6} rad", r.sequence_id, r.scenario, r.sub_sequence_index, r.v_rmse, r.phi_rmse);
            }
        }
        Command::Report { inputs, charts } => {
            let mut reps: Vec<RmseReport> = Vec::new();
            for p in &inputs {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                match serde_json::from_str::<Vec<RmseReport>>(&text) {
                    Ok(v) => reps.extend(v),
                    Err(_) => reps.extend(serde_json::from_str::<ReportDocument>(&text).with_context(|| format!("parsing {}", p.display()))?.reports),
                }
            }
            let files = render_reports(&reps, &harbor_baselines(), &charts)?;
            print!("{}", fs::read_to_string(&files.table)?);
        }
        Command::Run => {
            let out = run_pipeline(&cfg)?;
            println!("experiment written to {}", out.dir.display());
        }
        Command::ExportWindows { seq, out } => {
            let w = build_windows(&load_sequence(&seq)?)?;
            let idx = export_windows(&w, &out)?;
            println!("wrote {} windows ({} bytes each) to {}", idx.count, idx.record_bytes, out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // thiserror messages often embed their source already
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
