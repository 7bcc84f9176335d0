use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use xreg::augment::{augment, AugmentConfig};
use xreg::drr::{render_with, DrrStyle, DrrStyleId, Image};
use xreg::geometry::{sample_pose_set, PoseSetLabel};
use xreg::harness::{
    patient_key, prepare_patient, run_initialization_experiment, run_registration_experiment, run_registration_trial,
    run_sweep, run_trial, trial_detections, ExperimentConfig, Mode, SweepParam,
};
use xreg::volume::{make_phantom, VolumeDtype};
use xreg::Execution;

#[derive(Parser)]
#[command(
    name = "xreg",
    version,
    about = "Landmark-based X-ray to CT registration initialization on phantoms",
    args_override_self = true
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON, layered over the shipped defaults)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's master seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (defaults to the config's output_dir)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run every loop on the calling thread
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Args)]
struct PatientArg {
    /// Phantom seed (defaults to the first configured patient)
    #[arg(long)]
    patient: Option<u64>,
}

#[derive(Args)]
struct TrialArgs {
    #[command(flatten)]
    patient: PatientArg,
    /// Index into the test pose set
    #[arg(long, default_value_t = 0)]
    pose_id: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom volume and its annotated landmarks
    Phantom(PatientArg),
    /// Render a DRR from one pose of a pose set
    Render {
        #[command(flatten)]
        patient: PatientArg,
        /// Pose set: s2 (refinement), s3 (error table) or s4 (test)
        #[arg(long, default_value = "s4")]
        set: String,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, value_parser = parse_style, default_value = "LINE_INTEGRAL")]
        style: DrrStyleId,
        /// Detector binning factor
        #[arg(long, default_value_t = 1)]
        downsample: usize,
    },
    /// Apply the randomized post-processing to a saved image
    Augment {
        /// Image sidecar (.json) written by `render`
        #[arg(long)]
        input: PathBuf,
        /// Augmentation parameters (JSON); defaults when omitted
        #[arg(long)]
        augment_config: Option<PathBuf>,
    },
    /// Refine the landmarks of a phantom from backprojected detections
    Refine(PatientArg),
    /// Build the detector error table of a phantom
    Table(PatientArg),
    /// Solve one PnP initialization
    Init {
        #[command(flatten)]
        trial: TrialArgs,
        #[arg(long, value_parser = parse_mode, default_value = "WEIGHTED")]
        mode: Mode,
    },
    /// Initialize one trial and register it
    Register(TrialArgs),
    /// Run the full experiment and write report.csv and summary.json
    Experiment {
        /// Also register every trial from the configured initialization
        #[arg(long)]
        registration: bool,
    },
    /// Run the initialization experiment over a grid of one parameter
    Sweep {
        /// tau, mu_refine, mu_pnp or k
        #[arg(long)]
        param: String,
        /// Comma-separated values
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
}

fn parse_style(s: &str) -> Result<DrrStyleId, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
    exec: Execution,
}

impl Ctx {
    fn patient(&self, p: &PatientArg) -> u64 {
        p.patient.unwrap_or(self.cfg.patient_seeds[0])
    }

    fn write_json(&self, name: &str, value: &serde_json::Value) -> Result<PathBuf> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        let path = self.out.join(name);
        fs::write(&path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

fn load_config(common: &Common) -> Result<Ctx> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let out = common.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    cfg.output_dir = out.clone();
    let exec = if common.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    Ok(Ctx { cfg, out, exec })
}

fn write_landmarks(path: &Path, set: &xreg::volume::LandmarkSet3D) -> Result<()> {
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    set.write_csv(f)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let ctx = load_config(&cli.common)?;
    let cfg = &ctx.cfg;
    match cli.command {
        Command::Phantom(p) => {
            let ph = make_phantom(ctx.patient(&p));
            let path = ph.volume.save(&ctx.out, "phantom", VolumeDtype::I16)?;
            write_landmarks(&ctx.out.join("landmarks.csv"), &ph.landmarks)?;
            println!("{}", path.display());
        }
        Command::Render {
            patient,
            set,
            index,
            style,
            downsample,
        } => {
            let label = match set.as_str() {
                "s2" => PoseSetLabel::S2,
                "s3" => PoseSetLabel::S3,
                "s4" => PoseSetLabel::S4,
                _ => bail!("unknown pose set {set:?}; use s2, s3 or s4"),
            };
            let spec = match label {
                PoseSetLabel::S2 => &cfg.refine_poses,
                PoseSetLabel::S3 => &cfg.table_poses,
                _ => &cfg.test_poses,
            };
            let patient = ctx.patient(&patient);
            let poses = sample_pose_set(label, spec, patient_key(cfg, patient))?;
            let pose = poses
                .poses
                .get(index)
                .with_context(|| format!("pose index {index} out of range (set has {})", poses.len()))?;
            if downsample == 0 || cfg.intrinsics.image_size[0] % downsample != 0 {
                bail!("--downsample must divide the image size");
            }
            let ph = make_phantom(patient);
            let k = cfg.intrinsics.downsampled(downsample);
            let img = render_with(&ph.volume, pose, &k, &DrrStyle::for_volume(style, &ph.volume), ctx.exec)?;
            let path = img.save(&ctx.out, "drr")?;
            img.save_png(&ctx.out.join("drr.png"))?;
            println!("{}", path.display());
        }
        Command::Augment { input, augment_config } => {
            let acfg: AugmentConfig = match augment_config {
                Some(p) => serde_json::from_str(&fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?)?,
                None => AugmentConfig::default(),
            };
            acfg.validate()?;
            let img = Image::load(&input)?;
            let out = augment(&img, &acfg, cfg.seed);
            let path = out.save(&ctx.out, "augmented")?;
            out.save_png(&ctx.out.join("augmented.png"))?;
            println!("{}", path.display());
        }
        Command::Refine(p) => {
            let pc = prepare_patient(cfg, ctx.patient(&p), ctx.exec)?;
            fs::create_dir_all(&ctx.out)?;
            write_landmarks(&ctx.out.join("landmarks_cluster.csv"), &pc.refinement.cluster)?;
            write_landmarks(&ctx.out.join("landmarks_bone.csv"), &pc.refinement.bone)?;
            println!(
                "{} of {} landmarks refined",
                pc.refinement.bone.resolved_count(),
                pc.refinement.bone.len()
            );
        }
        Command::Table(p) => {
            let pc = prepare_patient(cfg, ctx.patient(&p), ctx.exec)?;
            println!("{}", ctx.write_json("error_table.json", &serde_json::to_value(&pc.table)?)?.display());
        }
        Command::Init { trial, mode } => {
            if mode == Mode::Registered {
                bail!("REGISTERED is not an initialization mode");
            }
            let pc = prepare_patient(cfg, ctx.patient(&trial.patient), ctx.exec)?;
            check_pose_id(&pc, trial.pose_id)?;
            let det = trial_detections(cfg, &pc, trial.pose_id);
            let (row, pose) = run_trial(cfg, &pc, trial.pose_id, mode, &det);
            let value = serde_json::json!({ "schema_version": xreg::SCHEMA_VERSION, "trial": row, "pose": pose });
            println!("{}", ctx.write_json("init.json", &value)?.display());
        }
        Command::Register(trial) => {
            let pc = prepare_patient(cfg, ctx.patient(&trial.patient), ctx.exec)?;
            check_pose_id(&pc, trial.pose_id)?;
            let det = trial_detections(cfg, &pc, trial.pose_id);
            let (init_row, pose) = run_trial(cfg, &pc, trial.pose_id, cfg.registration.init_mode, &det);
            let Some(pose) = pose else {
                bail!("initialization failed: {}", init_row.status);
            };
            let row = run_registration_trial(cfg, &pc, trial.pose_id, &pose, init_row.n_detected, ctx.exec);
            let value = serde_json::json!({
                "schema_version": xreg::SCHEMA_VERSION,
                "initialization": init_row,
                "registered": row,
            });
            println!("{}", ctx.write_json("registration.json", &value)?.display());
        }
        Command::Experiment { registration } => {
            let rep = if registration {
                run_registration_experiment(cfg, ctx.exec)?
            } else {
                run_initialization_experiment(cfg, ctx.exec)?
            };
            rep.write(&ctx.out)?;
            fs::write(ctx.out.join("config.json"), cfg.to_json())?;
            for m in &rep.summary.modes {
                println!(
                    "{:<15} success {:.3}  translation {:.2} ± {:.2} mm  rotation {:.2} ± {:.2} deg",
                    m.mode.name(),
                    m.success_rate,
                    m.translation_mean_mm,
                    m.translation_std_mm,
                    m.rotation_mean_deg,
                    m.rotation_std_deg
                );
            }
        }
        Command::Sweep { param, values } => {
            let param: SweepParam = param.parse()?;
            let sweep = run_sweep(cfg, param, &values, ctx.exec)?;
            sweep.write(&ctx.out)?;
            print!("{}", sweep.to_csv_string()?);
        }
    }
    Ok(())
}

fn check_pose_id(pc: &xreg::harness::PatientContext, pose_id: usize) -> Result<()> {
    if pose_id >= pc.test_poses.len() {
        bail!("pose id {pose_id} out of range (test set has {})", pc.test_poses.len());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
