use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use vvnet::config::{Config, Manifest};
use vvnet::formats::{write_atomic, CheckpointFile, GridFile};
use vvnet::group::{check_axioms, enumerate_stabilizer, GroupKind};
use vvnet::harness::{
    evaluate_samples, format_kernel_compare, format_sweep, kernel_compare, robustness_sweep, train_pipeline,
    train_with_vae, training_blocks, BlockSource, PipelineConfig,
};
use vvnet::pointcloud::load_cloud;
use vvnet::segnet::{VvNetModel, METRICS_HEADER};
use vvnet::synth::{load_dataset, save_dataset, synth_dataset};
use vvnet::vae::{encode_grid, train_vae, VaeModel};
use vvnet::voxelizer::{occupancy, voxelize};
use vvnet::{Error, Result};

#[derive(Parser)]
#[command(name = "vvnet", version, about = "Point-cloud segmentation with RBF subvoxels, VAEs and group convolutions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Plain-text `key = value` configuration file.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; created if missing.
    #[arg(long, short, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Blocks {
    Rbf,
    Occupancy,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic shape dataset (keys: data.count, data.points, data.noise, seed).
    SynthDataset(Common),
    /// Voxelize one cloud into a (D,H,W,k,k,k) subvoxel grid.
    Voxelize {
        #[command(flatten)]
        common: Common,
        /// Cloud text file, one `x y z [label]` per line.
        #[arg(long)]
        input: PathBuf,
        /// The input has a fourth label column.
        #[arg(long)]
        labels: bool,
        /// Also write the (Dk,Hk,Wk) occupancy grid.
        #[arg(long)]
        occupancy: bool,
    },
    /// Pre-train the per-voxel VAE on the blocks of a dataset.
    TrainVae {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "rbf")]
        blocks: Blocks,
    },
    /// Encode one cloud into a (D,H,W,latent) grid of posterior means.
    Encode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        labels: bool,
        /// VAE checkpoint written by train-vae.
        #[arg(long, value_name = "FILE")]
        vae: PathBuf,
    },
    /// Train the segmentation network, pre-training the VAE unless one is given.
    TrainSeg {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "FILE")]
        vae: Option<PathBuf>,
    },
    /// Evaluate a trained model on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Output directory of train-seg.
        #[arg(long, value_name = "DIR")]
        model: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
    /// Enumerate p4 and p4m and check the group axioms.
    GroupSelftest,
    /// Evaluate a trained model on farthest-point subsamples.
    RobustnessSweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        model: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Comma-separated missing-data ratios.
        #[arg(long, default_value = "0,0.75,0.875")]
        ratios: String,
    },
    /// Train twin pipelines differing only in the RBF kernel.
    KernelCompare {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        train: PathBuf,
        #[arg(long, value_name = "DIR")]
        test: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<Config> {
    let mut c = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::new(),
    };
    for o in &common.overrides {
        c.apply_override(o)?;
    }
    Ok(c)
}

/// Config actually used by a pipeline command: every key spelled out.
fn resolved(c: &Config) -> Result<(PipelineConfig, Config)> {
    let p = PipelineConfig::from_config(c)?;
    let mut full = p.to_config();
    for (k, v) in c.iter() {
        full.set_default(k, v);
    }
    Ok((p, full))
}

fn out_dir(common: &Common) -> Result<&Path> {
    fs::create_dir_all(&common.out).map_err(|e| Error::InvalidArgument(format!("{}: {e}", common.out.display())))?;
    Ok(&common.out)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn finish(manifest: &mut Manifest, dir: &Path, outputs: &[&str]) -> Result<()> {
    for name in outputs {
        manifest.add_output(&dir.join(name))?;
    }
    manifest.write(dir)
}

fn load_model(dir: &Path) -> Result<(PipelineConfig, VvNetModel)> {
    let manifest = Manifest::read(dir)?;
    let cfg = PipelineConfig::from_config(&manifest.config)?;
    let ckpt = CheckpointFile::read(dir.join("model.ckpt"))?;
    let model = VvNetModel::from_checkpoint(cfg.seg.clone(), &ckpt, cfg.vae_arch.obs_sd)?;
    Ok((cfg, model))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthDataset(common) => {
            let mut c = load_config(&common)?;
            c.set_default("data.count", 200);
            c.set_default("data.points", 512);
            c.set_default("data.noise", 0.01);
            c.set_default("seed", 0);
            let samples = synth_dataset(
                c.get("data.count")?,
                c.get("data.points")?,
                c.get("data.noise")?,
                c.get("seed")?,
            )?;
            let dir = out_dir(&common)?;
            save_dataset(dir, &samples)?;
            let mut m = Manifest::new("synth-dataset", &c);
            finish(&mut m, dir, &["index.txt"])?;
            println!("wrote {} clouds to {}", samples.len(), dir.display());
        }
        Command::Voxelize {
            common,
            input,
            labels,
            occupancy: with_occ,
        } => {
            let (p, c) = resolved(&load_config(&common)?)?;
            let g = p.seg.grid;
            let cloud = load_cloud(&input, labels)?;
            let sub = voxelize(&cloud, &g)?;
            let dir = out_dir(&common)?;
            let dims = sub.dims();
            GridFile::from_f64(&dims, &sub.values)?.write(dir.join("grid.bin"))?;
            let mut outputs = vec!["grid.bin"];
            if with_occ {
                let occ = occupancy(&cloud, &g)?;
                let bits: Vec<f64> = occ.bits.iter().map(|&b| f64::from(b)).collect();
                let shape: Vec<usize> = occ.dims.to_vec();
                GridFile::from_f64(&shape, &bits)?.write(dir.join("occupancy.bin"))?;
                outputs.push("occupancy.bin");
            }
            let mut m = Manifest::new("voxelize", &c);
            finish(&mut m, dir, &outputs)?;
            println!("grid dims {dims:?}");
        }
        Command::TrainVae { common, data, blocks } => {
            let (p, c) = resolved(&load_config(&common)?)?;
            let samples = load_dataset(&data)?;
            let source = match blocks {
                Blocks::Rbf => BlockSource::Rbf,
                Blocks::Occupancy => BlockSource::Occupancy,
            };
            let x = training_blocks(&samples, &p.seg.grid, source, p.vae_blocks, p.vae_train.seed)?;
            let mut vae = VaeModel::new(p.vae_arch, p.vae_train.seed);
            let before = vae.reconstruction_mse(x.view())?;
            let history = train_vae(&mut vae, x.view(), &p.vae_train)?;
            let after = vae.reconstruction_mse(x.view())?;

            let dir = out_dir(&common)?;
            let mut ckpt = CheckpointFile::new();
            vae.to_checkpoint(&mut ckpt)?;
            ckpt.write(dir.join("vae.ckpt"))?;
            let mut log = String::from("epoch\tloss\n");
            for (i, l) in history.iter().enumerate() {
                let _ = writeln!(log, "{}\t{l:.6}", i + 1);
            }
            write_text(&dir.join("vae_loss.txt"), &log)?;
            let mut m = Manifest::new("train-vae", &c);
            finish(&mut m, dir, &["vae.ckpt", "vae_loss.txt"])?;
            println!("{} blocks, reconstruction mse {before:.6} -> {after:.6}", x.nrows());
        }
        Command::Encode {
            common,
            input,
            labels,
            vae,
        } => {
            let (p, c) = resolved(&load_config(&common)?)?;
            let ckpt = CheckpointFile::read(&vae)?;
            let model = VaeModel::from_checkpoint(VaeModel::arch_from_checkpoint(&ckpt, p.vae_arch.obs_sd)?, &ckpt)?;
            let cloud = load_cloud(&input, labels)?;
            let latent = encode_grid(&voxelize(&cloud, &p.seg.grid)?, &model)?;
            let dir = out_dir(&common)?;
            let v = latent.values.as_standard_layout();
            GridFile::from_f64(v.shape(), v.as_slice().expect("standard layout"))?.write(dir.join("latent.bin"))?;
            let mut m = Manifest::new("encode", &c);
            finish(&mut m, dir, &["latent.bin"])?;
            println!("latent dims {:?}", v.shape());
        }
        Command::TrainSeg { common, data, vae } => {
            let (p, c) = resolved(&load_config(&common)?)?;
            let samples = load_dataset(&data)?;
            let run = match vae.filter(|_| p.seg.mode.uses_vae()) {
                Some(path) => {
                    let ckpt = CheckpointFile::read(&path)?;
                    let arch = VaeModel::arch_from_checkpoint(&ckpt, p.vae_arch.obs_sd)?;
                    train_with_vae(&p, Some(VaeModel::from_checkpoint(arch, &ckpt)?), Vec::new(), &samples)?
                }
                None => train_pipeline(&p, &samples)?,
            };
            let dir = out_dir(&common)?;
            run.model.to_checkpoint()?.write(dir.join("model.ckpt"))?;
            let mut log = format!("{METRICS_HEADER}\n");
            for e in &run.history {
                let _ = writeln!(log, "{e}");
            }
            write_text(&dir.join("metrics.txt"), &log)?;
            let mut m = Manifest::new("train-seg", &c);
            finish(&mut m, dir, &["model.ckpt", "metrics.txt"])?;
            print!("{log}");
        }
        Command::Eval { common, model, data } => {
            let c = load_config(&common)?;
            let (_, net) = load_model(&model)?;
            let report = evaluate_samples(&net, &load_dataset(&data)?)?;
            let dir = out_dir(&common)?;
            let text = report.to_string();
            write_text(&dir.join("report.txt"), &text)?;
            let mut m = Manifest::new("eval", &c);
            finish(&mut m, dir, &["report.txt"])?;
            print!("{text}");
        }
        Command::GroupSelftest => {
            let mut ok = true;
            for kind in [GroupKind::P4, GroupKind::P4m] {
                let report = check_axioms(&enumerate_stabilizer(kind, true));
                ok &= report.all_hold();
                println!("|{}|={} axioms {}", kind.name(), report.size, if report.all_hold() { "ok" } else { "FAILED" });
            }
            if !ok {
                return Err(Error::InvalidArgument("group axioms violated".into()));
            }
        }
        Command::RobustnessSweep {
            common,
            model,
            data,
            ratios,
        } => {
            let mut c = load_config(&common)?;
            c.set_default("seed", 0);
            c.set("sweep.ratios", &ratios);
            let ratios: Vec<f64> = c.get_list("sweep.ratios")?;
            let (_, net) = load_model(&model)?;
            let rows = robustness_sweep(&net, &load_dataset(&data)?, &ratios, c.get("seed")?)?;
            let dir = out_dir(&common)?;
            let text = format_sweep(&rows);
            write_text(&dir.join("sweep.txt"), &text)?;
            let mut m = Manifest::new("robustness-sweep", &c);
            finish(&mut m, dir, &["sweep.txt"])?;
            print!("{text}");
        }
        Command::KernelCompare { common, train, test } => {
            let (p, c) = resolved(&load_config(&common)?)?;
            let results = kernel_compare(&p, &load_dataset(&train)?, &load_dataset(&test)?)?;
            let dir = out_dir(&common)?;
            let text = format_kernel_compare(&results);
            write_text(&dir.join("kernel_compare.txt"), &text)?;
            let mut m = Manifest::new("kernel-compare", &c);
            finish(&mut m, dir, &["kernel_compare.txt"])?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
