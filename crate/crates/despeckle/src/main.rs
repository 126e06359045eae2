use clap::{Parser, Subcommand, ValueEnum};
use despeckle::config::AppConfig;
use despeckle::data::{add_speckle, load_dataset, phantom_dataset, resize_to_canonical,
                      split_dataset, DatasetManifest, ImageSample, NoiseConfig, Split};
use despeckle::error::{Error, Result};
use despeckle::figure::{comparison_figure, save_png};
use despeckle::metrics::METRIC_SCALE;
use despeckle::stats::rho_map;
use despeckle::train::{
    ablation_csv, default_sweep_values, evaluate, evaluate_sample, eval_noisy, hyperparam_sweep,
    load_checkpoint, log_csv, orders_grid, run_ablation, save_checkpoint, table3_grid, train,
    write_text, Checkpoint, CheckpointMeta, ModelDenoiser, PassThrough, SweepAxis,
};
use ndarray::Array2;
use std::path::{Path, PathBuf};

/// Output root override; takes precedence over the config's output.dir.
const OUT_ENV: &str = "DESPECKLE_OUT";

#[derive(Parser)]
#[command(name = "despeckle", about = "Ultrasound speckle suppression toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum GridName {
    Table3,
    Orders,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisName {
    Alpha,
    Beta,
    Depths,
}

#[derive(Subcommand)]
enum Command {
    /// Build a dataset manifest and pre-rendered noisy copies.
    Prepare {
        /// Directory of source images; omit to synthesize phantoms.
        #[arg(long)]
        root: Option<PathBuf>,
        #[arg(long, default_value = "synthetic")]
        dataset: String,
        /// Comma-separated noise levels.
        #[arg(long, default_value = "0.25,0.5,0.75", value_delimiter = ',')]
        sigmas: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.7)]
        split_ratio: f64,
        /// Phantom count when no --root is given.
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Windowed mean-to-std map of one image, plus a threshold report.
    Stats {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = despeckle::stats::DEFAULT_WINDOW)]
        window: usize,
        #[arg(long, default_value_t = despeckle::stats::DEFAULT_TAU_NOISE)]
        tau: f64,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Train a model from a TOML config, with dotted-path overrides.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// key.subkey=value pairs applied over the config file.
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint (and the noisy baseline) on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "0.25,0.5,0.75", value_delimiter = ',')]
        sigmas: Vec<f64>,
        /// Optional dataset root overriding the checkpoint's config.
        #[arg(long)]
        root: Option<PathBuf>,
    },
    /// Train and score one of the predefined ablation grids.
    Ablate {
        #[arg(long, value_enum)]
        grid: GridName,
        #[arg(long)]
        config: Option<PathBuf>,
        overrides: Vec<String>,
    },
    /// Train and score one hyperparameter axis.
    Sweep {
        #[arg(long, value_enum)]
        axis: AxisName,
        /// Override the default value set (comma separated; depths values
        /// use ; between tuples).
        #[arg(long)]
        values: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        overrides: Vec<String>,
    },
    /// Render clean | noisy | denoised comparison panels from a checkpoint.
    Figure {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated sample ids; defaults to the first test sample.
        #[arg(long, value_delimiter = ',')]
        samples: Vec<String>,
        #[arg(long, default_value_t = 0.5)]
        sigma: f64,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn out_dir(configured: &Path) -> PathBuf {
    match std::env::var_os(OUT_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => configured.to_path_buf(),
    }
}

fn load_config(path: &Option<PathBuf>, overrides: &[String]) -> Result<AppConfig> {
    let base = match path {
        Some(p) => AppConfig::from_file(p)?,
        None => AppConfig::desk(),
    };
    let cfg = base.with_overrides(overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_dataset(cfg: &AppConfig) -> Result<DatasetManifest> {
    let manifest = if cfg.data.root.is_empty() || cfg.data.dataset == "synthetic" {
        phantom_dataset(cfg.data.phantom_count, cfg.model.image_size, cfg.train.seed)
    } else {
        let loaded = load_dataset(Path::new(&cfg.data.root), &cfg.data.dataset)?;
        DatasetManifest {
            entries: loaded
                .entries
                .iter()
                .map(resize_to_canonical)
                .collect(),
            ..loaded
        }
    };
    split_dataset(&manifest, cfg.data.split_ratio, cfg.train.seed)
}

fn save_gray(path: &Path, pixels: &Array2<f64>) -> Result<()> {
    save_png(path, pixels)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare {
            root,
            dataset,
            sigmas,
            seed,
            split_ratio,
            count,
            out,
        } => {
            let base = match &root {
                Some(r) => load_dataset(r, &dataset)?,
                None => phantom_dataset(count, despeckle::data::CANONICAL_SIZE, seed),
            };
            let manifest = split_dataset(&base, split_ratio, seed)?;
            let dir = out_dir(&out).join("prepared").join(&dataset);
            write_text(&dir.join("manifest.txt"), &manifest.to_text())?;
            for &sigma in &sigmas {
                let sdir = dir.join(format!("sigma_{sigma}"));
                for s in &manifest.entries {
                    let fitted = resize_to_canonical(s);
                    let noise = NoiseConfig::new(
                        sigma,
                        despeckle::data::derive_seed(seed, &s.id, sigma.to_bits()),
                        true,
                    );
                    let noisy = add_speckle(&fitted, &noise);
                    save_gray(&sdir.join(format!("{}.png", s.id)), &noisy.pixels)?;
                }
            }
            let (tr, te) = (manifest.counts.train, manifest.counts.test);
            println!(
                "prepared {} images ({tr} train / {te} test) into {}",
                manifest.entries.len(),
                dir.display()
            );
        }

        Command::Stats { image, window, tau, out } => {
            let img = image::open(&image)
                .map_err(|e| Error::BadImage {
                    path: image.clone(),
                    message: e.to_string(),
                })?
                .to_luma32f();
            let (w, h) = (img.width() as usize, img.height() as usize);
            let pixels = Array2::from_shape_fn((h, w), |(r, c)| {
                img.get_pixel(c as u32, r as u32).0[0] as f64
            });
            let rho = rho_map(&pixels, window)?;

            let stem = image
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("image");
            let dir = out_dir(&out).join("stats");
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

            // heatmap: finite rho scaled into [0,1] over [0, 2*tau]
            let heat = rho.mapv(|v| {
                if v.is_finite() {
                    (v / (2.0 * tau)).clamp(0.0, 1.0)
                } else {
                    0.0
                }
            });
            save_gray(&dir.join(format!("{stem}_rho.png")), &heat)?;

            // raw map: text header line, then little-endian f64 rows
            let mut raw = format!("dtype=f64 c=1 h={h} w={w}\n").into_bytes();
            for v in rho.iter() {
                raw.extend_from_slice(&v.to_le_bytes());
            }
            let raw_path = dir.join(format!("{stem}_rho.bin"));
            std::fs::write(&raw_path, raw).map_err(|e| Error::io(&raw_path, e))?;

            let mut below = 0usize;
            let mut finite = 0usize;
            let mut csv = String::from("row,col,rho\n");
            for ((r, c), &v) in rho.indexed_iter() {
                if v.is_finite() {
                    finite += 1;
                    if v < tau {
                        below += 1;
                        csv.push_str(&format!("{r},{c},{v:.6}\n"));
                    }
                }
            }
            write_text(&dir.join(format!("{stem}_below_tau.csv")), &csv)?;
            println!(
                "{stem}: {below}/{finite} windowed pixels below tau={tau} (window={window})"
            );
        }

        Command::Train { config, overrides } => {
            let cfg = load_config(&config, &overrides)?;
            let manifest = resolve_dataset(&cfg)?;
            let result = train(&cfg, &manifest)?;
            let dir = out_dir(Path::new(&cfg.output.dir)).join("train");
            write_text(&dir.join("log.csv"), &log_csv(&result.log))?;
            let ckpt = Checkpoint {
                params: result.params,
                bank: result.bank,
                meta: CheckpointMeta {
                    config: cfg.clone(),
                    epoch: result.epochs_run,
                    seed: cfg.train.seed,
                    metrics: [("final_loss".to_string(), result.final_loss)].into(),
                },
            };
            let ckpt_path = dir.join("model.ckpt");
            save_checkpoint(&ckpt_path, &ckpt)?;
            println!(
                "trained {} epochs, final loss {:.6}, checkpoint {}",
                result.epochs_run,
                result.final_loss,
                ckpt_path.display()
            );
        }

        Command::Eval { checkpoint, sigmas, root } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let mut cfg = ckpt.meta.config.clone();
            if let Some(r) = root {
                cfg.data.root = r.display().to_string();
                cfg.data.dataset = "custom".into();
            }
            let manifest = resolve_dataset(&cfg)?;
            let test: Vec<&ImageSample> = manifest.samples(Split::Test);
            let model = ModelDenoiser {
                params: &ckpt.params,
                cfg: &cfg.model,
                label: "model".into(),
            };
            let size = cfg.model.image_size;
            let mut report = evaluate(&model, &test, &sigmas, cfg.train.seed, size, &cfg.data.dataset)?;
            let baseline =
                evaluate(&PassThrough, &test, &sigmas, cfg.train.seed, size, &cfg.data.dataset)?;
            report.rows.extend(baseline.rows);
            let dir = out_dir(Path::new(&cfg.output.dir)).join("eval");
            write_text(&dir.join("metrics.csv"), &report.to_csv())?;
            print!("{}", report.to_csv());
        }

        Command::Ablate { grid, config, overrides } => {
            let cfg = load_config(&config, &overrides)?;
            let manifest = resolve_dataset(&cfg)?;
            let (name, specs) = match grid {
                GridName::Table3 => ("table3", table3_grid()),
                GridName::Orders => ("orders", orders_grid()),
            };
            let rows = run_ablation(&specs, &cfg, &manifest)?;
            let dir = out_dir(Path::new(&cfg.output.dir)).join("ablate");
            write_text(&dir.join(format!("{name}.csv")), &ablation_csv(&rows))?;
            print!("{}", ablation_csv(&rows));
        }

        Command::Sweep { axis, values, config, overrides } => {
            let cfg = load_config(&config, &overrides)?;
            let manifest = resolve_dataset(&cfg)?;
            let axis = match axis {
                AxisName::Alpha => SweepAxis::Alpha,
                AxisName::Beta => SweepAxis::Beta,
                AxisName::Depths => SweepAxis::Depths,
            };
            let values: Vec<String> = match values {
                Some(s) => {
                    let sep = if axis == SweepAxis::Depths { ';' } else { ',' };
                    s.split(sep).map(|p| p.trim().to_string()).collect()
                }
                None => default_sweep_values(axis),
            };
            let rows = hyperparam_sweep(axis, &values, &cfg, &manifest)?;
            let name = match axis {
                SweepAxis::Alpha => "alpha",
                SweepAxis::Beta => "beta",
                SweepAxis::Depths => "depths",
            };
            let csv = despeckle::train::sweep_csv(axis, &rows);
            let dir = out_dir(Path::new(&cfg.output.dir)).join("sweep");
            write_text(&dir.join(format!("{name}.csv")), &csv)?;
            print!("{csv}");
        }

        Command::Figure { checkpoint, samples, sigma } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let cfg = ckpt.meta.config.clone();
            let manifest = resolve_dataset(&cfg)?;
            let test: Vec<&ImageSample> = manifest.samples(Split::Test);
            let chosen: Vec<&ImageSample> = if samples.is_empty() {
                test.first().copied().into_iter().collect()
            } else {
                manifest
                    .entries
                    .iter()
                    .filter(|s| samples.contains(&s.id))
                    .collect()
            };
            if chosen.is_empty() {
                return Err(Error::Config("no matching sample ids".into()));
            }
            let model = ModelDenoiser {
                params: &ckpt.params,
                cfg: &cfg.model,
                label: "model".into(),
            };
            let dir = out_dir(Path::new(&cfg.output.dir)).join("figures");
            let size = cfg.model.image_size;
            for s in chosen {
                let (metrics, pred) = evaluate_sample(&model, s, sigma, cfg.train.seed, size)?;
                let clean = if s.pixels.dim() == (size, size) {
                    s.pixels.clone()
                } else {
                    despeckle::data::resize_bilinear(&s.pixels, size, size)
                };
                let fitted = ImageSample { pixels: clean.clone(), ..s.clone() };
                let noisy = eval_noisy(&fitted, sigma, cfg.train.seed);
                let fig = comparison_figure(&clean, &noisy, &pred)?;
                let path = dir.join(format!("{}_sigma{sigma}.png", s.id));
                save_png(&path, &fig)?;
                println!(
                    "{} sigma={sigma}: psnr={:.2} dB (scale 0-{METRIC_SCALE}), {}",
                    s.id,
                    metrics.psnr,
                    path.display()
                );
            }
        }
    }
    Ok(())
}
