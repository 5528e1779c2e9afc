use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dyngen::data::{per_pixel_error, FrameSequence};
use dyngen::diffcore::{SeededRng, Tensor};
use dyngen::inference::{read_latents, write_latents};
use dyngen::io::{
    convert_frames, export_frames, read_mask, read_sequence, write_sequence, RunConfig,
};
use dyngen::model::{read_checkpoint, write_checkpoint, Model};
use dyngen::oracle::{
    gradcheck_instance, langevin_vs_kalman, CompareConfig, GradcheckReport, LinearSSM,
};
use dyngen::trainer::{animate, interpolate_appearance, metrics_csv, Dataset, Sequence, Trainer};
use dyngen::Error;

const GRADCHECK_TOL: f64 = 1e-5;
const ORACLE_RMSE_TOL: f64 = 0.1;

#[derive(Parser)]
#[command(
    name = "dyngen",
    version,
    about = "Dynamic generator models for image sequences"
)]
struct Cli {
    /// Worker threads for per-sequence inference (falls back to DGEN_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig, Failure> {
        match &self.config {
            Some(p) => Ok(RunConfig::read(p)?),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on DGSQ sequences.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Glob of DGSQ training sequences.
        #[arg(long)]
        data: String,
        /// Glob of DGMK masks, paired with sequences by file stem.
        #[arg(long)]
        mask: Option<String>,
        /// Glob of unoccluded DGSQ sequences used only to score occluded pixels.
        #[arg(long)]
        truth: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Record wall-clock time in the metrics.
        #[arg(long)]
        timing: bool,
    },
    /// Sample a sequence from a trained model.
    Synthesize {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fill in occluded pixels of one sequence by training on its visible ones.
    Recover {
        #[command(flatten)]
        config: ConfigArg,
        /// Start from this model instead of a fresh one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// Unoccluded sequence for reporting the occluded-pixel error.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict a sequence from its first frame with a conditional model.
    Animate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        /// DGSQ file whose first frame starts the sequence.
        #[arg(long)]
        frame: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Roll out a sweep between the appearance vectors of two sequences.
    Interpolate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        latents: PathBuf,
        #[arg(long)]
        i: usize,
        #[arg(long)]
        j: usize,
        #[arg(long)]
        steps: usize,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of all gradients on random tiny instances.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        instances: u64,
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
    /// Compare long-run Langevin means with the exact smoother on a linear model.
    OracleCompare {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        chains: usize,
        #[arg(long, default_value_t = 20_000)]
        steps: usize,
        #[arg(long, default_value_t = 5_000)]
        burn_in: usize,
    },
    /// Convert a directory of PGM/PPM frames into one DGSQ file.
    Convert {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the frames of a DGSQ file as PGM/PPM images.
    Export {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Error carrying its exit code.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config { .. } | Error::InvalidConfig(_) => 2,
            Error::Data(_)
            | Error::Format { .. }
            | Error::Io(_)
            | Error::Dimension { .. }
            | Error::Rank(_) => 3,
            _ => 1,
        };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

fn config_error(msg: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        msg: msg.into(),
    }
}

fn data_error(msg: impl Into<String>) -> Failure {
    Failure {
        code: 3,
        msg: msg.into(),
    }
}

fn glob_paths(pattern: &str) -> Result<Vec<PathBuf>, Failure> {
    let paths =
        glob::glob(pattern).map_err(|e| data_error(format!("bad glob `{pattern}`: {e}")))?;
    let mut out: Vec<PathBuf> = paths
        .collect::<Result<_, _>>()
        .map_err(|e| data_error(format!("cannot read {}", e.path().display())))?;
    out.sort();
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn by_stem(pattern: &str, what: &str) -> Result<BTreeMap<String, PathBuf>, Failure> {
    let mut map = BTreeMap::new();
    for p in glob_paths(pattern)? {
        if let Some(prev) = map.insert(stem(&p), p.clone()) {
            return Err(data_error(format!(
                "{what} {} and {} share a stem",
                prev.display(),
                p.display()
            )));
        }
    }
    Ok(map)
}

fn load_dataset(data: &str, mask: Option<&str>, truth: Option<&str>) -> Result<Dataset, Failure> {
    let files = glob_paths(data)?;
    if files.is_empty() {
        return Err(data_error(format!("no sequences match `{data}`")));
    }
    let mut masks = mask.map(|m| by_stem(m, "masks")).transpose()?;
    let mut truths = truth
        .map(|t| by_stem(t, "ground truth files"))
        .transpose()?;
    let mut seqs = Vec::with_capacity(files.len());
    for f in &files {
        let key = stem(f);
        let x = read_sequence(f)?;
        let m = match masks.as_mut() {
            Some(ms) => {
                let p = ms
                    .remove(&key)
                    .ok_or_else(|| data_error(format!("no mask for {}", f.display())))?;
                Some(read_mask(&p)?)
            }
            None => None,
        };
        let mut s = Sequence::new(x, m)?;
        if let Some(ts) = truths.as_mut() {
            let p = ts
                .remove(&key)
                .ok_or_else(|| data_error(format!("no ground truth for {}", f.display())))?;
            s = s.with_truth(read_sequence(&p)?)?;
        }
        seqs.push(s);
    }
    if let Some(extra) = masks.as_ref().and_then(|m| m.values().next()) {
        return Err(data_error(format!(
            "mask {} has no sequence",
            extra.display()
        )));
    }
    Ok(Dataset::new(seqs)?)
}

fn frames_dir(out: &Path) -> PathBuf {
    let name = format!("{}_frames", stem(out));
    out.with_file_name(name)
}

/// Writes `x` as DGSQ plus an image per frame when the channel count allows.
fn write_output(out: &Path, x: &FrameSequence) -> Result<(), Failure> {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(Error::from)?;
    }
    write_sequence(out, x)?;
    if matches!(x.shape().channels, 1 | 3) {
        export_frames(&frames_dir(out), x)?;
    } else {
        log::warn!(
            "{}-channel frames have no image format; skipping the frame dump",
            x.shape().channels
        );
    }
    Ok(())
}

fn check_model(model: &Model, cfg: &RunConfig) -> Result<(), Failure> {
    if model.config().frame != cfg.model.frame {
        return Err(data_error(format!(
            "checkpoint emits {} frames, configuration says {}",
            model.config().frame,
            cfg.model.frame
        )));
    }
    Ok(())
}

fn train(cfg: RunConfig, data: Dataset, out: &Path) -> Result<(), Failure> {
    fs::create_dir_all(out).map_err(Error::from)?;
    let model = Model::new(
        cfg.model.clone(),
        &mut SeededRng::with_stream(cfg.train.seed, 0),
    )?;
    let every = cfg.train.checkpoint_every;
    let mut trainer = Trainer::new(model, data, cfg.train, cfg.variant)?;
    trainer.run_with(|t| {
        let k = t.iteration();
        if let Some(m) = t.metrics().last() {
            log::info!(
                "iteration {k}: log joint {:.3}, visible error {:?}",
                m.log_joint,
                m.recon_err_visible
            );
        }
        if every > 0 && k % every == 0 {
            write_checkpoint(&out.join(format!("checkpoint_{k:06}.dgmd")), t.model())?;
            write_latents(&out.join(format!("checkpoint_{k:06}.dglt")), t.latents())?;
        }
        Ok(())
    })?;
    write_checkpoint(&out.join("model.dgmd"), trainer.model())?;
    write_latents(&out.join("latents.dglt"), trainer.latents())?;
    fs::write(out.join("metrics.csv"), metrics_csv(trainer.metrics())).map_err(Error::from)?;
    if let Some(m) = trainer.metrics().last() {
        println!(
            "trained {} iterations; final log joint {:.4}; visible error {}",
            m.iter,
            m.log_joint,
            m.recon_err_visible
                .map_or("n/a".into(), |e| format!("{e:.4}"))
        );
    }
    Ok(())
}

fn report_line(r: &GradcheckReport, case: u64) -> String {
    format!(
        "instance {case}: max relative error {:.3e} over {} coordinates (worst index {:?}: analytic {:.6e}, numeric {:.6e})",
        r.max_rel_err, r.checked, r.worst_index, r.analytic, r.numeric
    )
}

fn run(cli: Cli) -> Result<u8, Failure> {
    match cli.command {
        Command::Train {
            config,
            data,
            mask,
            truth,
            out,
            timing,
        } => {
            let mut cfg = config.load()?;
            cfg.train.timing = timing;
            let ds = load_dataset(&data, mask.as_deref(), truth.as_deref())?;
            train(cfg, ds, &out)?;
        }
        Command::Synthesize {
            config,
            checkpoint,
            seed,
            out,
        } => {
            let cfg = config.load()?;
            let model = read_checkpoint(&checkpoint)?;
            check_model(&model, &cfg)?;
            let x = model.synthesize(
                &mut SeededRng::new(seed),
                cfg.synth_length,
                cfg.synth_burn_in,
                None,
                None,
            )?;
            write_output(&out, &x)?;
        }
        Command::Recover {
            config,
            checkpoint,
            data,
            mask,
            truth,
            out,
        } => {
            let cfg = config.load()?;
            let model = match checkpoint {
                Some(p) => {
                    let m = read_checkpoint(&p)?;
                    check_model(&m, &cfg)?;
                    m
                }
                None => Model::new(
                    cfg.model.clone(),
                    &mut SeededRng::with_stream(cfg.train.seed, 0),
                )?,
            };
            let mk = read_mask(&mask)?;
            let mut seq = Sequence::new(read_sequence(&data)?, Some(mk.clone()))?;
            if let Some(t) = &truth {
                seq = seq.with_truth(read_sequence(t)?)?;
            }
            let (trainer, recon) = dyngen::trainer::recover(
                model,
                Dataset::new(vec![seq.clone()])?,
                cfg.train,
                cfg.variant,
            )?;
            let x = &recon[0];
            let visible = per_pixel_error(x.data(), seq.frames().data(), Some(mk.data()));
            println!(
                "visible-pixel error {}",
                visible.map_or("n/a".into(), |e| format!("{e:.4}"))
            );
            if let Some(t) = seq.truth() {
                let hidden: Vec<bool> = mk.data().iter().map(|v| !v).collect();
                let e = per_pixel_error(x.data(), t.data(), Some(&hidden));
                println!(
                    "occluded-pixel error {}",
                    e.map_or("n/a".into(), |e| format!("{e:.4}"))
                );
            }
            log::info!("recovery ran {} iterations", trainer.iteration());
            // frames outside [-1, 1] cannot be stored; the emission tanh keeps
            // them inside except in linear mode
            let clamped = FrameSequence::new(
                x.shape(),
                x.frames(),
                x.data().iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
            )?;
            write_output(&out, &clamped)?;
        }
        Command::Animate {
            config,
            checkpoint,
            frame,
            seed,
            out,
        } => {
            let cfg = config.load()?;
            let model = read_checkpoint(&checkpoint)?;
            let x = read_sequence(&frame)?;
            if x.shape() != model.config().frame {
                return Err(data_error(format!(
                    "frame is {}, model emits {}",
                    x.shape(),
                    model.config().frame
                )));
            }
            let v = animate(
                &model,
                x.frame(0),
                cfg.synth_length,
                &mut SeededRng::new(seed),
            )?;
            write_output(&out, &v)?;
        }
        Command::Interpolate {
            checkpoint,
            latents,
            i,
            j,
            steps,
            out,
        } => {
            let model = read_checkpoint(&checkpoint)?;
            let zs = read_latents(&latents)?;
            let get = |k: usize| {
                zs.get(k).ok_or_else(|| {
                    data_error(format!(
                        "latent file has {} sequences, asked for {k}",
                        zs.len()
                    ))
                })
            };
            let (zi, zj) = (get(i)?, get(j)?);
            let appearance = |z: &dyngen::model::LatentTrajectory| -> Result<Tensor, Failure> {
                z.a.clone()
                    .ok_or_else(|| data_error("latents have no appearance vectors"))
            };
            let videos =
                interpolate_appearance(&model, zi, &appearance(zi)?, &appearance(zj)?, steps)?;
            fs::create_dir_all(&out).map_err(Error::from)?;
            for (k, v) in videos.iter().enumerate() {
                write_output(&out.join(format!("interp_{k:02}.dgsq")), v)?;
            }
        }
        Command::Gradcheck {
            config,
            seed,
            instances,
            corrupt_gradient,
        } => {
            let cfg = config.load()?;
            let variant = config.config.as_ref().map(|_| cfg.variant);
            let mut worst: Option<(u64, GradcheckReport)> = None;
            for case in 0..instances.max(1) {
                let r = gradcheck_instance(seed, case, variant, corrupt_gradient && case == 0)?;
                log::info!("{}", report_line(&r, case));
                if worst
                    .as_ref()
                    .map_or(true, |(_, w)| r.max_rel_err > w.max_rel_err)
                {
                    worst = Some((case, r));
                }
            }
            let (case, r) = worst.expect("at least one instance");
            println!("worst {}", report_line(&r, case));
            if !(r.max_rel_err < GRADCHECK_TOL) {
                println!("FAIL: exceeds {GRADCHECK_TOL:e}");
                return Ok(1);
            }
            println!("ok");
        }
        Command::OracleCompare {
            config,
            seed,
            chains,
            steps,
            burn_in,
        } => {
            let cfg = config.load()?;
            if chains == 0 || steps == 0 {
                return Err(config_error(
                    "oracle-compare needs at least one chain and one step",
                ));
            }
            let mut rng = SeededRng::with_stream(seed, 4);
            let ssm = LinearSSM::random_conditioned(2, 2, 3, 0.5, 0.8, 2.0, &mut rng);
            let (_, x) = ssm.sample(10, &mut rng);
            let l = &cfg.train.langevin;
            let cc = CompareConfig {
                delta: l.delta,
                burn_in,
                steps,
                chains,
                mh_correct: l.mh_correct,
            };
            let r = langevin_vs_kalman(&ssm, &x, &cc, &rng.fork(1))?;
            println!("posterior-mean RMSE {:.6}", r.rmse_mean);
            println!(
                "max marginal variance relative error {:.6}",
                r.max_var_rel_err
            );
            println!(
                "acceptance rate {:.4}; diverged chains {}",
                r.accept_rate, r.diverged_chains
            );
            if !(r.rmse_mean < ORACLE_RMSE_TOL) {
                println!("FAIL: RMSE not below {ORACLE_RMSE_TOL}");
                return Ok(1);
            }
            println!("ok");
        }
        Command::Convert { input, out } => {
            let x = convert_frames(&input)?;
            write_sequence(&out, &x)?;
        }
        Command::Export { input, out } => {
            let x = read_sequence(&input)?;
            export_frames(&out, &x)?;
        }
    }
    Ok(0)
}

fn threads(flag: Option<usize>) -> Result<Option<usize>, Failure> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("DGEN_THREADS") {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| {
            config_error(format!(
                "DGEN_THREADS must be a positive integer, got `{v}`"
            ))
        }),
        Err(_) => Ok(None),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = threads(cli.threads).and_then(|n| {
        if let Some(n) = n {
            if n == 0 {
                return Err(config_error("thread count must be positive"));
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| config_error(format!("cannot start {n} threads: {e}")))?;
        }
        run(cli)
    });
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
