mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use pcda::dataio::{read_manifest, write_manifest, write_point_cloud, write_sample, Manifest};
use pcda::encoder::{read_checkpoint, write_checkpoint};
use pcda::experiment::{run_ablation, Setting};
use pcda::mixup::{
    hybrid_mix, instance_mix, laser_mix, polar_mix, range_mix, replay, MixConfig, Recipe, Strategy,
};
use pcda::projection::project_points;
use pcda::synth::gen_domain_pair;
use pcda::training::{evaluate, format_log, pseudo_labels, strip_labels, train_from};
use pcda::{DomainSample, Exec};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "pcda", version, about = "Camera-guided cross-domain point cloud segmentation", after_help = config::keys_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (`key = value` lines); unspecified keys keep their defaults
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed; overrides the config's `seed`
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic source/target domain pair
    Synth {
        #[command(flatten)]
        common: Common,
        /// Output directory (gets source.manifest, target.manifest, params.txt)
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Scenes per domain [default: config `scenes`, 40]
        #[arg(long)]
        scenes: Option<usize>,
    },
    /// Dump per-point projections: `sample view point u v depth visible`
    Project {
        #[command(flatten)]
        common: Common,
        /// Manifest to project
        #[arg(long = "in", value_name = "MANIFEST")]
        input: PathBuf,
        /// Output text file
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Mix two samples and write the mixed cloud, its provenance and recipe
    Mix {
        #[command(flatten)]
        common: Common,
        /// Manifest holding sample a (instance donor / selected region)
        #[arg(long = "in", value_name = "MANIFEST")]
        input: PathBuf,
        /// Manifest holding sample b [default: same as --in]
        #[arg(long = "with", value_name = "MANIFEST")]
        with: Option<PathBuf>,
        /// Sample id of a [default: first entry of --in]
        #[arg(long)]
        a_id: Option<u64>,
        /// Sample id of b [default: first entry of --with]
        #[arg(long)]
        b_id: Option<u64>,
        /// Mixing strategy
        #[arg(long, value_enum, default_value_t = StrategyArg::Hybrid)]
        strategy: StrategyArg,
        /// Polar split azimuth (radians) [default: drawn from the seed]
        #[arg(long)]
        theta0: Option<f64>,
        /// Range split radius (meters) [default: drawn from the seed]
        #[arg(long)]
        r0: Option<f64>,
        /// Laser split pitch (radians) [default: drawn from the seed]
        #[arg(long)]
        phi0: Option<f64>,
        /// Replay a recipe file instead of drawing a new mix
        #[arg(long, value_name = "FILE", conflicts_with_all = ["theta0", "r0", "phi0"])]
        replay: Option<PathBuf>,
        /// Output directory (gets mixed.pcda, provenance.txt, recipe.txt)
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train the point encoder; writes model.padm and loss.log
    Train {
        #[command(flatten)]
        common: Common,
        /// Labelled source manifest [default: config `source_manifest`]
        #[arg(long = "in", value_name = "MANIFEST")]
        input: Option<PathBuf>,
        /// Target manifest [default: config `target_manifest`; none = source only]
        #[arg(long, value_name = "MANIFEST")]
        target: Option<PathBuf>,
        /// Labelled target manifest scored after every epoch [default: config `eval_manifest`]
        #[arg(long, value_name = "MANIFEST")]
        eval: Option<PathBuf>,
        /// Checkpoint to fine-tune instead of training from scratch
        #[arg(long, value_name = "PATH")]
        model: Option<PathBuf>,
        /// Train on the target labels (e.g. pseudo-labels) instead of dropping them
        #[arg(long)]
        target_labels: bool,
        /// Output directory
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Label target samples with confident predictions; writes pseudo.manifest
    #[command(name = "pseudo-label")]
    PseudoLabel {
        #[command(flatten)]
        common: Common,
        /// Model checkpoint
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        /// Target manifest [default: config `target_manifest`]
        #[arg(long = "in", value_name = "MANIFEST")]
        input: Option<PathBuf>,
        /// Confidence threshold [default: config `tau`, 0.9]
        #[arg(long)]
        tau: Option<f64>,
        /// Output directory
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Per-class IoU and mIoU of a model on a labelled manifest
    Eval {
        #[command(flatten)]
        common: Common,
        /// Model checkpoint
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        /// Labelled manifest [default: config `eval_manifest`]
        #[arg(long = "in", value_name = "MANIFEST")]
        input: Option<PathBuf>,
        /// Report file [default: stdout]
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Run every adaptation setting over several seeds and print a table
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Number of seeds, starting at --seed
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Retrain from scratch on pseudo-labels instead of fine-tuning
        #[arg(long)]
        restart: bool,
        /// Table file [default: stdout]
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Polar,
    Range,
    Laser,
    Instance,
    Hybrid,
}

/// Failure classes mapped to exit codes 1 and 2.
enum Fail {
    Usage(anyhow::Error),
    Data(anyhow::Error),
}

type Res<T> = Result<T, Fail>;

fn usage(e: impl Into<anyhow::Error>) -> Fail {
    Fail::Usage(e.into())
}

fn data(e: impl Into<anyhow::Error>) -> Fail {
    Fail::Data(e.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Fail::Usage(e)) => {
            eprintln!("usage error: {e:#}");
            ExitCode::from(1)
        }
        Err(Fail::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_config(common: &Common) -> Res<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).map_err(usage)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.ablation.train.seed = s;
    }
    Ok(cfg)
}

fn pick(flag: Option<PathBuf>, configured: &Option<PathBuf>, what: &str) -> Res<PathBuf> {
    flag.or_else(|| configured.clone())
        .ok_or_else(|| usage(anyhow!("no {what} given (flag or config key)")))
}

fn manifest(path: &Path) -> Res<Manifest> {
    read_manifest(path)
        .with_context(|| format!("manifest {}", path.display()))
        .map_err(data)
}

fn load_samples(path: &Path) -> Res<Vec<DomainSample>> {
    manifest(path)?
        .load_all()
        .with_context(|| format!("loading samples of {}", path.display()))
        .map_err(data)
}

fn write_text(path: &Path, text: &str) -> Res<()> {
    fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(data)
}

fn create_dir(dir: &Path) -> Res<()> {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(data)
}

fn emit(out: Option<&Path>, text: &str) -> Res<()> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cmd: Command) -> Res<()> {
    match cmd {
        Command::Synth {
            common,
            out,
            scenes,
        } => {
            let cfg = load_config(&common)?;
            let a = &cfg.ablation;
            let scenes = scenes.unwrap_or(a.scenes);
            gen_domain_pair(&a.source, &a.target, scenes, cfg.train().seed, &out).map_err(data)?;
            let mut params = String::new();
            for (prefix, p) in [("source", &a.source), ("target", &a.target)] {
                for line in p.to_text().lines() {
                    writeln!(params, "{prefix}.{line}").unwrap();
                }
            }
            writeln!(params, "seed = {}", cfg.train().seed).unwrap();
            writeln!(params, "scenes = {scenes}").unwrap();
            write_text(&out.join("params.txt"), &params)
        }
        Command::Project { common, input, out } => {
            load_config(&common)?;
            let m = manifest(&input)?;
            let mut text = String::new();
            for entry in &m.entries {
                let s = m.load(entry).map_err(data)?;
                for (vi, view) in s.views.iter().enumerate() {
                    let proj = project_points(&s.cloud, &view.calib);
                    for i in 0..s.cloud.len() {
                        let [u, v] = proj.uv[i];
                        writeln!(
                            text,
                            "{} {vi} {i} {u:.9} {v:.9} {:.9} {}",
                            s.sample_id,
                            proj.depth[i],
                            u8::from(proj.visible[i])
                        )
                        .unwrap();
                    }
                }
            }
            write_text(&out, &text)
        }
        Command::Mix {
            common,
            input,
            with,
            a_id,
            b_id,
            strategy,
            theta0,
            r0,
            phi0,
            replay: recipe_path,
            out,
        } => {
            let cfg = load_config(&common)?;
            let a = find_sample(&input, a_id)?;
            let b = find_sample(with.as_deref().unwrap_or(&input), b_id)?;
            let seed = cfg.train().seed;
            let mixed = if let Some(rp) = recipe_path {
                let text = fs::read_to_string(&rp)
                    .with_context(|| format!("reading {}", rp.display()))
                    .map_err(data)?;
                let recipe: Recipe = text.trim().parse().map_err(data)?;
                replay(&recipe, &a, &b).map_err(data)?
            } else {
                let only = |s: Strategy| {
                    let mut weights = [0.0; 4];
                    weights[s as usize] = 1.0;
                    MixConfig {
                        weights,
                        ..cfg.mix().clone()
                    }
                };
                match (strategy, theta0, r0, phi0) {
                    (StrategyArg::Polar, Some(t), _, _) => polar_mix(&a, &b, t),
                    (StrategyArg::Range, _, Some(r), _) => range_mix(&a, &b, r).map_err(data)?,
                    (StrategyArg::Laser, _, _, Some(p)) => laser_mix(&a, &b, p),
                    (StrategyArg::Polar, ..) => {
                        hybrid_mix(&a, &b, &only(Strategy::Polar), seed).map_err(data)?
                    }
                    (StrategyArg::Range, ..) => {
                        hybrid_mix(&a, &b, &only(Strategy::Range), seed).map_err(data)?
                    }
                    (StrategyArg::Laser, ..) => {
                        hybrid_mix(&a, &b, &only(Strategy::Laser), seed).map_err(data)?
                    }
                    (StrategyArg::Instance, ..) => {
                        instance_mix(&a, &b, cfg.mix(), seed).map_err(data)?
                    }
                    (StrategyArg::Hybrid, ..) => {
                        hybrid_mix(&a, &b, cfg.mix(), seed).map_err(data)?
                    }
                }
            };
            create_dir(&out)?;
            write_point_cloud(&out.join("mixed.pcda"), &mixed.cloud).map_err(data)?;
            let mut prov = String::new();
            for (sid, j) in &mixed.provenance {
                writeln!(prov, "{sid} {j}").unwrap();
            }
            write_text(&out.join("provenance.txt"), &prov)?;
            write_text(&out.join("recipe.txt"), &format!("{}\n", mixed.recipe))
        }
        Command::Train {
            common,
            input,
            target,
            eval,
            model,
            target_labels,
            out,
        } => {
            let cfg = load_config(&common)?;
            let sources = load_samples(&pick(input, &cfg.source_manifest, "source manifest")?)?;
            let targets = match target.or_else(|| cfg.target_manifest.clone()) {
                Some(p) => load_samples(&p)?,
                None => Vec::new(),
            };
            let targets = if target_labels {
                targets
            } else {
                strip_labels(&targets)
            };
            let eval = match eval.or_else(|| cfg.eval_manifest.clone()) {
                Some(p) => load_samples(&p)?,
                None => Vec::new(),
            };
            let init = model
                .map(|p| read_checkpoint(&p).map_err(data))
                .transpose()?;
            let mix = (cfg.train().mix_proportion > 0.0).then(|| cfg.mix());
            let trained =
                train_from(init, &sources, &targets, &eval, mix, cfg.train()).map_err(data)?;
            create_dir(&out)?;
            write_checkpoint(&out.join("model.padm"), &trained.model).map_err(data)?;
            write_text(&out.join("loss.log"), &format_log(&trained.log))
        }
        Command::PseudoLabel {
            common,
            model,
            input,
            tau,
            out,
        } => {
            let cfg = load_config(&common)?;
            let tau = tau.unwrap_or(cfg.train().tau);
            if !(0.0..=1.0).contains(&tau) {
                return Err(usage(anyhow!("--tau must lie in [0, 1], got {tau}")));
            }
            let model = read_checkpoint(&model).map_err(data)?;
            let targets = load_samples(&pick(input, &cfg.target_manifest, "target manifest")?)?;
            let (labelled, kept) = pseudo_labels(&model, &targets, tau, Exec::default());
            create_dir(&out)?;
            let entries = labelled
                .iter()
                .enumerate()
                .map(|(i, s)| write_sample(&out, &format!("pl_{i:04}"), s))
                .collect::<Result<Vec<_>, _>>()
                .map_err(data)?;
            write_manifest(&out.join("pseudo.manifest"), &entries).map_err(data)?;
            write_text(
                &out.join("stats.txt"),
                &format!("tau {tau:.6}\nkept_fraction {kept:.6}\n"),
            )
        }
        Command::Eval {
            common,
            model,
            input,
            out,
        } => {
            let cfg = load_config(&common)?;
            let model = read_checkpoint(&model).map_err(data)?;
            let samples = load_samples(&pick(input, &cfg.eval_manifest, "manifest to evaluate")?)?;
            let cm = evaluate(&model, &samples, Exec::default()).map_err(data)?;
            emit(out.as_deref(), &cm.report())
        }
        Command::Ablate {
            common,
            seeds,
            restart,
            out,
        } => {
            let mut cfg = load_config(&common)?;
            if seeds == 0 {
                return Err(usage(anyhow!("--seeds must be at least 1")));
            }
            cfg.ablation.pseudo_restart |= restart;
            let first = cfg.train().seed;
            let seeds: Vec<u64> = (first..first + seeds).collect();
            let result = run_ablation(&cfg.ablation, &seeds, |s: Setting, seed, miou| {
                eprintln!("seed {seed} {s}: {miou:.4}");
            })
            .map_err(data)?;
            emit(out.as_deref(), &result.table())
        }
    }
}

fn find_sample(path: &Path, id: Option<u64>) -> Res<DomainSample> {
    let m = manifest(path)?;
    let entry = match id {
        Some(id) => m
            .entries
            .iter()
            .find(|e| e.sample_id == id)
            .ok_or_else(|| usage(anyhow!("sample {id} not in {}", path.display())))?,
        None => m
            .entries
            .first()
            .ok_or_else(|| data(anyhow!("manifest {} is empty", path.display())))?,
    };
    m.load(entry).map_err(data)
}
