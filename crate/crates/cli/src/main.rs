//! `cvar`: dataset generation, training, evaluation, verification oracles,
//! and ablation sweeps, all driven by flat key-value configs.
//!
//! Exit codes: 0 pass, 1 check failed, 2 config error, 3 IO error,
//! 4 numeric error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cvar_core::config::{format_layers, AppConfig};
use cvar_core::dataset::{sha256_hex, CsvWriter, Dataset, TRAIN_SPLIT, VAL_SPLIT};
use cvar_core::error::Error;
use cvar_core::eval::{
    ablation_cells, dump_attention, eval_split, proportionality_report,
    remark2_oracle, run_ablation, verify_cells_single_knob, AblationKind, WarpMass,
    EVAL_CSV_HEADER,
};
use cvar_core::loss::{
    objective_grad_check, verify_bound, BoundTriple, EmbedNet, LossConfig,
};
use cvar_core::model::{forward_eval, AttentionMap, ModelConfig, ModelParams};
use cvar_core::rng::Rng;
use cvar_core::scene::{render, SceneSpec, VideoClip, View};
use cvar_core::train::Trainer;

#[derive(Parser)]
#[command(name = "cvar", version, about = "Cross-view attention lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Overrides mirroring config keys; echoed into the persisted effective
/// config.
#[derive(Args, Default, Clone)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Video metric: pixel | embed
    #[arg(long)]
    dx: Option<String>,
    /// Attention metric: l2 | symkl | jsmix
    #[arg(long)]
    da: Option<String>,
    /// Layer subset, e.g. 1-4 or 1,3
    #[arg(long)]
    layers: Option<String>,
    /// Pair set: matched | all
    #[arg(long)]
    pairing: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
}

impl Overrides {
    fn kvs(&self, seed_keys: &[&str]) -> Vec<(String, String)> {
        let mut out = Vec::new();
        if let Some(s) = self.seed {
            for key in seed_keys {
                out.push((key.to_string(), s.to_string()));
            }
        }
        let pairs: [(&str, Option<String>); 7] = [
            ("loss.alpha", self.alpha.map(|v| v.to_string())),
            ("loss.beta", self.beta.map(|v| v.to_string())),
            ("loss.lambda", self.lambda.map(|v| v.to_string())),
            ("loss.dx", self.dx.clone()),
            ("loss.da", self.da.clone()),
            ("loss.layers", self.layers.clone()),
            ("loss.pairing", self.pairing.clone()),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        }
        if let Some(e) = self.epochs {
            out.push(("train.epochs".to_string(), e.to_string()));
        }
        out
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-camera dataset on disk.
    GenerateData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Render both views of every scene.
        #[arg(long)]
        paired: bool,
        /// Overwrite an existing output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train the model; writes checkpoints and a per-step metrics CSV.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = VAL_SPLIT)]
        split: String,
        /// Spatial crops averaged per clip: 1 or 3.
        #[arg(long, default_value_t = 1)]
        crops: usize,
    },
    /// Finite-difference check of the full objective on a fresh toy model.
    Gradcheck {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 60)]
        max_coords: usize,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check the paired-sample bound over sampled triples.
    VerifyBound {
        /// Paired dataset directory.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        triples: usize,
        #[arg(long, default_value_t = 0.75)]
        alpha: f64,
        #[arg(long, default_value_t = 200.0)]
        beta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Attention maps come from this checkpoint (fresh model otherwise).
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Attention-transfer and proportionality oracles on paired data.
    Oracle {
        #[arg(long)]
        ckpt: PathBuf,
        /// Paired dataset directory.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        clips: usize,
        #[arg(long, default_value_t = 200)]
        pairs: usize,
        /// Unmapped attention mass: discard | redistribute
        #[arg(long, default_value = "discard")]
        mass: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Layer subset for the oracle, e.g. 1-4.
        #[arg(long)]
        layers: Option<String>,
    },
    /// Sweep one knob: train and evaluate every grid cell.
    Ablate {
        /// alpha | metric | layers | lambda | pairing
        #[arg(long)]
        kind: String,
        /// Comma-separated grid values (alpha and lambda sweeps).
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        crops: usize,
        /// Also write an SVG plot of ego top-1 across cells.
        #[arg(long)]
        plot: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Write per-layer attention maps of a split as raw f32 grids.
    DumpAttention {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = VAL_SPLIT)]
        split: String,
        /// Layer subset, e.g. 1-4.
        #[arg(long)]
        layers: Option<String>,
    },
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io { .. } | Error::Data(_) | Error::Format(_) => 3,
        Error::Numeric(_) | Error::Shape { .. } | Error::Axis { .. } => 4,
    }
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("CVAR_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(pass) => {
            if pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<AppConfig, Error> {
    match path {
        Some(p) => AppConfig::from_file(p),
        None => Ok(AppConfig::default()),
    }
}

fn run(command: Command) -> Result<bool, Error> {
    match command {
        Command::GenerateData {
            config,
            out,
            seed,
            paired,
            force,
        } => {
            let mut cfg = load_config(&config)?;
            let mut kvs = Vec::new();
            if let Some(s) = seed {
                kvs.push(("dataset.seed".to_string(), s.to_string()));
            }
            if paired {
                kvs.push(("dataset.paired".to_string(), "true".to_string()));
            }
            cfg.apply_overrides(&kvs)?;
            let ds = Dataset::generate(&cfg.dataset, &out, force)?;
            cfg.write_effective(&out.join("effective.conf"))?;
            let manifest_hash = sha256_hex(&ds.manifest_bytes()?);
            for split in [TRAIN_SPLIT, VAL_SPLIT] {
                let exo = ds.clips(split, Some(View::Exo))?.len();
                let ego = ds.clips(split, Some(View::Ego))?.len();
                println!(
                    "{split}: {exo} exo + {ego} ego clips, {} classes, paired={}",
                    ds.manifest.classes, ds.manifest.paired
                );
            }
            println!(
                "generate-data: PASS format={} regenerated={} manifest_sha256={manifest_hash}",
                ds.manifest.format, ds.manifest.regenerated
            );
            Ok(true)
        }

        Command::Train {
            config,
            data,
            out,
            resume,
            overrides,
        } => {
            let mut cfg = load_config(&config)?;
            cfg.apply_overrides(&overrides.kvs(&["train.seed"]))?;
            let data_dir = data.unwrap_or_else(|| PathBuf::from(&cfg.data_dir));
            let ds = Dataset::open(&data_dir)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            cfg.write_effective(&out.join("effective.conf"))?;
            let mut trainer = match &resume {
                Some(ckpt) => Trainer::resume(cfg.train.clone(), &ds, ckpt)?,
                None => Trainer::new(cfg.train.clone(), &ds)?,
            };
            let final_ckpt = trainer.run(&out)?;
            let last = trainer.state.history.last();
            println!(
                "train: PASS epochs={} steps={} final_total={} checkpoint={}",
                trainer.state.epoch,
                trainer.state.step,
                last.map(|m| m.total.to_string()).unwrap_or_default(),
                final_ckpt.display()
            );
            Ok(true)
        }

        Command::Eval {
            ckpt,
            data,
            out,
            split,
            crops,
        } => {
            let (mcfg, params) = cvar_core::checkpoint::load_model(&ckpt)?;
            let ds = Dataset::open(&data)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let report = eval_split(&params, &ds, &split, &mcfg, crops)?;
            let mut csv = CsvWriter::create(&out.join("report.csv"), EVAL_CSV_HEADER)?;
            csv.row(&report.csv_row("eval"))?;
            csv.flush()?;
            println!(
                "eval: PASS split={split} crops={crops} exo_top1={:.4} ego_top1={:.4} exo_map={:.4} ego_map={:.4}",
                report.exo.top1, report.ego.top1, report.exo.map, report.ego.map
            );
            Ok(true)
        }

        Command::Gradcheck {
            out,
            max_coords,
            h,
            seed,
        } => {
            let seed = seed.unwrap_or(0);
            let (worst, per_tensor) = gradcheck_toy(seed, max_coords, h)?;
            if let Some(out) = out {
                std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
                let mut csv = CsvWriter::create(&out.join("gradcheck.csv"), "tensor,rel_error")?;
                for (name, err) in &per_tensor {
                    csv.row(&format!("{name},{err}"))?;
                }
                csv.flush()?;
            }
            let pass = worst < 1e-4;
            println!(
                "gradcheck: {} max_rel_error={worst:.3e} tensors={} threshold=1e-4",
                if pass { "PASS" } else { "FAIL" },
                per_tensor.len()
            );
            Ok(pass)
        }

        Command::VerifyBound {
            data,
            out,
            triples,
            alpha,
            beta,
            seed,
            ckpt,
        } => {
            let ds = Dataset::open(&data)?;
            let (mcfg, params) = match &ckpt {
                Some(p) => cvar_core::checkpoint::load_model(p)?,
                None => {
                    let mcfg = model_for_dataset(&ds);
                    let params = ModelParams::<f32>::init(&mcfg)?;
                    (mcfg, params)
                }
            };
            let report = bound_over_dataset(&ds, &mcfg, &params, triples, alpha, beta, seed)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let mut csv = CsvWriter::create(
                &out.join("bound_report.csv"),
                "triples,violations,min_slack,max_slack,hist",
            )?;
            let hist = report
                .slack_hist
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(";");
            csv.row(&format!(
                "{},{},{},{},{hist}",
                report.triples, report.violations, report.min_slack, report.max_slack
            ))?;
            csv.flush()?;
            let pass = report.violations == 0;
            println!(
                "verify-bound: {} {} violations / {} triples (alpha={alpha}, beta={beta})",
                if pass { "PASS" } else { "FAIL" },
                report.violations,
                report.triples
            );
            Ok(pass)
        }

        Command::Oracle {
            ckpt,
            data,
            out,
            clips,
            pairs,
            mass,
            seed,
            layers,
        } => {
            let (mcfg, params) = cvar_core::checkpoint::load_model(&ckpt)?;
            let ds = Dataset::open(&data)?;
            let mass = match mass.as_str() {
                "discard" => WarpMass::Discard,
                "redistribute" => WarpMass::Redistribute,
                other => {
                    return Err(Error::Config(format!(
                        "mass must be discard|redistribute, got {other:?}"
                    )))
                }
            };
            let mut lcfg = LossConfig {
                layers: (1..=mcfg.layers).collect(),
                ..LossConfig::default()
            };
            if let Some(spec) = &layers {
                lcfg.layers = cvar_core::config::parse_layers(spec)?;
            }
            lcfg.validate(mcfg.layers)?;

            let warp = remark2_oracle(&params, &ds, VAL_SPLIT, &mcfg, &lcfg, mass, clips, seed)?;

            // proportionality: trained model against an untrained seed-matched one
            let embed = EmbedNet::<f32>::random(&mcfg, mcfg.seed)?;
            let lcfg_pixel = LossConfig {
                dx: cvar_core::loss::DxKind::Pixel,
                ..lcfg.clone()
            };
            let trained =
                proportionality_report(&params, Some(&embed), &ds, VAL_SPLIT, &mcfg, &lcfg_pixel, pairs, seed)?;
            let fresh = ModelParams::<f32>::init(&mcfg)?;
            let untrained = proportionality_report(
                &fresh,
                Some(&embed),
                &ds,
                VAL_SPLIT,
                &mcfg,
                &lcfg_pixel,
                pairs,
                seed,
            )?;

            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let mut csv = CsvWriter::create(
                &out.join("oracle_report.csv"),
                "metric,value",
            )?;
            csv.row(&format!("warp_oracle_mean,{}", warp.oracle_mean))?;
            csv.row(&format!("warp_null_mean,{}", warp.null_mean))?;
            csv.row(&format!("warp_null_std,{}", warp.null_std))?;
            csv.row(&format!("warp_clips_used,{}", warp.clips_used))?;
            csv.row(&format!("warp_clips_skipped,{}", warp.clips_skipped))?;
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or("undefined".into());
            csv.row(&format!("proportionality_r_trained,{}", opt(trained.pearson)))?;
            csv.row(&format!("proportionality_r_untrained,{}", opt(untrained.pearson)))?;
            csv.row(&format!("proportionality_slope,{}", opt(trained.slope)))?;
            csv.row(&format!("proportionality_alpha_hat,{}", opt(trained.alpha_hat)))?;
            csv.flush()?;

            let pass = warp.oracle_mean < warp.null_mean;
            println!(
                "oracle: {} warp_agreement={:.5} null={:.5}+-{:.5} ({} clips, {} skipped) r_trained={} r_untrained={}",
                if pass { "PASS" } else { "FAIL" },
                warp.oracle_mean,
                warp.null_mean,
                warp.null_std,
                warp.clips_used,
                warp.clips_skipped,
                opt(trained.pearson),
                opt(untrained.pearson)
            );
            Ok(pass)
        }

        Command::Ablate {
            kind,
            grid,
            config,
            data,
            out,
            crops,
            plot,
            overrides,
        } => {
            let mut cfg = load_config(&config)?;
            cfg.apply_overrides(&overrides.kvs(&["train.seed"]))?;
            let data_dir = data.unwrap_or_else(|| PathBuf::from(&cfg.data_dir));
            let ds = Dataset::open(&data_dir)?;
            let kind: AblationKind = kind.parse()?;
            let cells = ablation_cells(kind, grid.as_deref(), &cfg.train)?;
            verify_cells_single_knob(kind, &cells, &cfg.train)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            cfg.write_effective(&out.join("effective.conf"))?;
            let csv_path = out.join("ablation.csv");
            let rows = run_ablation(&cells, &ds, crops, Some(&csv_path), VAL_SPLIT)?;
            if plot {
                let labels: Vec<String> = rows.iter().map(|r| r.label.clone()).collect();
                let ego: Vec<f64> = rows.iter().map(|r| r.report.ego.top1).collect();
                let exo: Vec<f64> = rows.iter().map(|r| r.report.exo.top1).collect();
                cvar_core::plot::svg_line_plot(
                    &format!("{kind:?} sweep"),
                    &labels,
                    &[("ego top-1".into(), ego), ("exo top-1".into(), exo)],
                    &out.join("ablation.svg"),
                )?;
            }
            let best = rows
                .iter()
                .max_by(|a, b| a.report.ego.top1.partial_cmp(&b.report.ego.top1).unwrap())
                .expect("nonempty grid");
            println!(
                "ablate: PASS kind={kind:?} cells={} best={} (ego top-1 {:.4}) -> {}",
                rows.len(),
                best.label,
                best.report.ego.top1,
                csv_path.display()
            );
            Ok(true)
        }

        Command::DumpAttention {
            ckpt,
            data,
            out,
            split,
            layers,
        } => {
            let (mcfg, params) = cvar_core::checkpoint::load_model(&ckpt)?;
            let ds = Dataset::open(&data)?;
            let layer_list = match &layers {
                Some(spec) => cvar_core::config::parse_layers(spec)?,
                None => (1..=mcfg.layers).collect(),
            };
            let count = dump_attention(&params, &ds, &split, &mcfg, &layer_list, &out)?;
            println!(
                "dump-attention: PASS {count} files ({} layers) -> {}",
                format_layers(&layer_list),
                out.display()
            );
            Ok(true)
        }
    }
}

/// Model config matching a dataset's geometry.
fn model_for_dataset(ds: &Dataset) -> ModelConfig {
    ModelConfig {
        frames: ds.manifest.frames,
        height: ds.manifest.height,
        width: ds.manifest.width,
        channels: ds.manifest.channels,
        classes_exo: ds.manifest.classes,
        classes_ego: ds.manifest.classes,
        ..ModelConfig::default()
    }
}

/// Toy two-layer, dim-32 setup for the finite-difference check.
fn gradcheck_toy(
    seed: u64,
    max_coords: usize,
    h: f64,
) -> Result<(f64, Vec<(String, f64)>), Error> {
    let mcfg = ModelConfig {
        frames: 4,
        height: 16,
        width: 16,
        patch_k: 2,
        patch_p: 8,
        dim: 32,
        layers: 2,
        heads: 4,
        seed,
        ..ModelConfig::default()
    };
    let params = ModelParams::<f64>::init(&mcfg)?;
    let make = |s: u64, class: usize, view: View| -> Result<VideoClip, Error> {
        let scene = SceneSpec::generate(s, class, mcfg.frames)?;
        let rigs = scene.rigs(view, mcfg.height, mcfg.width);
        Ok(render(&scene, &rigs, mcfg.height, mcfg.width, view)?.0)
    };
    let exo = vec![make(seed ^ 0xe0, 0, View::Exo)?, make(seed ^ 0xe1, 3, View::Exo)?];
    let ego = vec![make(seed ^ 0x90, 1, View::Ego)?, make(seed ^ 0x91, 6, View::Ego)?];
    let exo_refs: Vec<&VideoClip> = exo.iter().collect();
    let ego_refs: Vec<&VideoClip> = ego.iter().collect();
    let embed = EmbedNet::<f64>::random(&mcfg, seed ^ 0x6)?;
    let lcfg = LossConfig {
        lambda: 0.05,
        layers: vec![1, 2],
        ..LossConfig::default()
    };
    objective_grad_check(
        &mcfg,
        &lcfg,
        &params,
        &exo_refs,
        &ego_refs,
        Some(&embed),
        max_coords,
        h,
    )
}

/// Assemble bound triples from a paired dataset: each paired (exo, ego)
/// plus a random other ego clip, attention maps from the given model.
fn bound_over_dataset(
    ds: &Dataset,
    mcfg: &ModelConfig,
    params: &ModelParams<f32>,
    triples: usize,
    alpha: f64,
    beta: f64,
    seed: u64,
) -> Result<cvar_core::loss::BoundReport, Error> {
    let mut pairs = ds.paired_entries(TRAIN_SPLIT)?;
    pairs.extend(ds.paired_entries(VAL_SPLIT)?);
    if pairs.len() < 2 {
        return Err(Error::Data("need at least two paired scenes".into()));
    }
    // load and embed every clip once
    let mut clips: Vec<(VideoClip, VideoClip)> = Vec::with_capacity(pairs.len());
    for (e, g) in &pairs {
        clips.push((ds.load_clip(e)?, ds.load_clip(g)?));
    }
    let maps: Vec<(AttentionMap<f32>, AttentionMap<f32>)> = clips
        .iter()
        .map(|(e, g)| {
            let me = forward_eval(params, e, mcfg, View::Exo)?.1.remove(mcfg.layers - 1);
            let mg = forward_eval(params, g, mcfg, View::Ego)?.1.remove(mcfg.layers - 1);
            Ok((me, mg))
        })
        .collect::<Result<_, Error>>()?;

    let mut rng = Rng::stream(seed, 0xb0);
    let mut sample_triples = Vec::with_capacity(triples);
    for _ in 0..triples {
        let i = rng.below(clips.len());
        let mut j = rng.below(clips.len() - 1);
        if j >= i {
            j += 1;
        }
        sample_triples.push(BoundTriple {
            x_exo: &clips[i].0,
            x_ego_paired: &clips[i].1,
            x_ego: &clips[j].1,
            a_exo: &maps[i].0,
            a_ego_paired: &maps[i].1,
            a_ego: &maps[j].1,
        });
    }
    Ok(verify_bound(&sample_triples, alpha, beta))
}
