//! End-to-end runs on synthetic data: VAE pre-training, segmentation
//! training, the missing-data sweep and the kernel comparison.

use std::fmt::Write as _;

use ndarray::{Array2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::group::GroupKind;
use crate::metrics::EvalReport;
use crate::pointcloud::farthest_point_sample;
use crate::segnet::{train_segmentation, AblationMode, EpochMetrics, SegExample, SegNetConfig, TrainConfig, VvNetModel};
use crate::synth::{total_parts, SynthSample};
use crate::vae::{collect_blocks, train_vae, VaeArch, VaeModel, VaeTrainConfig};
use crate::voxelizer::{occupancy, voxelize, GridSpec, Kernel, Neighborhood, Sigma, SubvoxelTensor};

/// Everything needed to train the pipeline from raw clouds.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub seg: SegNetConfig,
    pub vae_arch: VaeArch,
    pub vae_train: VaeTrainConfig,
    /// Cap on VAE training blocks, drawn at random from all non-empty ones.
    pub vae_blocks: usize,
    pub train: TrainConfig,
}

impl PipelineConfig {
    /// Small configuration that trains in minutes on one core.
    pub fn desk() -> Self {
        let mut grid = GridSpec::cube(8, 4, Sigma::VoxelMultiple(2.0));
        grid.neighborhood = Neighborhood::Global;
        PipelineConfig {
            seg: SegNetConfig {
                grid,
                classes: total_parts(),
                mode: AblationMode::Full,
                group: GroupKind::P4m,
                kernel_size: 3,
                gconv_channels: vec![2, 2],
                global_width: 64,
                head_hidden: 64,
            },
            vae_arch: VaeArch {
                k: 4,
                latent: 8,
                hidden: 128,
                obs_sd: 0.1,
            },
            vae_train: VaeTrainConfig {
                epochs: 10,
                lr: 1e-3,
                batch_size: 64,
                seed: 0,
            },
            vae_blocks: 10_000,
            train: TrainConfig {
                epochs: 30,
                lr: 3e-3,
                batch_size: 8,
                seed: 0,
            },
        }
    }

    /// Full-size defaults: 16^3 grid, two lifting layers of 8 base filters,
    /// 50 part classes.
    pub fn shapenet() -> Self {
        PipelineConfig {
            seg: SegNetConfig::default(),
            train: TrainConfig::default(),
            ..Self::desk()
        }
    }

    /// Reads every key, falling back to the values of `preset`
    /// (`shapenet` unless set to `desk`).
    pub fn from_config(c: &Config) -> Result<Self> {
        let d = match c.get_or("preset", "shapenet".to_string())?.as_str() {
            "shapenet" => Self::shapenet(),
            "desk" => Self::desk(),
            other => return Err(Error::Config(format!("unknown preset `{other}`"))),
        };
        let (sigma_value, sigma_unit) = match d.seg.grid.sigma {
            Sigma::VoxelMultiple(v) => (v, "voxel"),
            Sigma::World(v) => (v, "world"),
        };
        let sigma_value = c.get_or("grid.sigma", sigma_value)?;
        let sigma = match c.get_or("grid.sigma_unit", sigma_unit.to_string())?.as_str() {
            "voxel" => Sigma::VoxelMultiple(sigma_value),
            "world" => Sigma::World(sigma_value),
            other => return Err(Error::Config(format!("grid.sigma_unit must be voxel or world, got `{other}`"))),
        };
        let g = &d.seg.grid;
        let grid = GridSpec {
            d: c.get_or("grid.d", g.d)?,
            h: c.get_or("grid.h", g.h)?,
            w: c.get_or("grid.w", g.w)?,
            k: c.get_or("grid.k", g.k)?,
            sigma,
            kernel: c.get_or("grid.kernel", g.kernel)?,
            combine: c.get_or("grid.combine", g.combine)?,
            neighborhood: c.get_or("grid.neighborhood", g.neighborhood)?,
        };
        let seed: u64 = c.get_or("seed", 0)?;
        let cfg = PipelineConfig {
            seg: SegNetConfig {
                grid,
                classes: c.get_or("seg.classes", d.seg.classes)?,
                mode: c.get_or("seg.mode", d.seg.mode)?,
                group: c.get_or("seg.group", d.seg.group)?,
                kernel_size: c.get_or("seg.kernel_size", d.seg.kernel_size)?,
                gconv_channels: if c.contains("seg.gconv_channels") {
                    c.get_list("seg.gconv_channels")?
                } else {
                    d.seg.gconv_channels.clone()
                },
                global_width: c.get_or("seg.global_width", d.seg.global_width)?,
                head_hidden: c.get_or("seg.head_hidden", d.seg.head_hidden)?,
            },
            vae_arch: VaeArch {
                k: grid.k,
                latent: c.get_or("vae.latent", d.vae_arch.latent)?,
                hidden: c.get_or("vae.hidden", d.vae_arch.hidden)?,
                obs_sd: c.get_or("vae.obs_sd", d.vae_arch.obs_sd)?,
            },
            vae_train: VaeTrainConfig {
                epochs: c.get_or("vae.epochs", d.vae_train.epochs)?,
                lr: c.get_or("vae.lr", d.vae_train.lr)?,
                batch_size: c.get_or("vae.batch_size", d.vae_train.batch_size)?,
                seed,
            },
            vae_blocks: c.get_or("vae.blocks", d.vae_blocks)?,
            train: TrainConfig {
                epochs: c.get_or("train.epochs", d.train.epochs)?,
                lr: c.get_or("train.lr", d.train.lr)?,
                batch_size: c.get_or("train.batch_size", d.train.batch_size)?,
                seed,
            },
        };
        if cfg.vae_arch.obs_sd.is_nan() || cfg.vae_arch.obs_sd <= 0.0 {
            return Err(Error::Config("vae.obs_sd must be positive".into()));
        }
        cfg.seg.validate()?;
        Ok(cfg)
    }

    /// Complete key set; `from_config(&to_config())` is the identity.
    pub fn to_config(&self) -> Config {
        let mut c = Config::new();
        let g = &self.seg.grid;
        c.set("grid.d", g.d);
        c.set("grid.h", g.h);
        c.set("grid.w", g.w);
        c.set("grid.k", g.k);
        match g.sigma {
            Sigma::VoxelMultiple(v) => {
                c.set("grid.sigma", v);
                c.set("grid.sigma_unit", "voxel");
            }
            Sigma::World(v) => {
                c.set("grid.sigma", v);
                c.set("grid.sigma_unit", "world");
            }
        }
        c.set("grid.kernel", g.kernel);
        c.set("grid.combine", g.combine);
        c.set("grid.neighborhood", g.neighborhood);
        c.set("seg.classes", self.seg.classes);
        c.set("seg.mode", self.seg.mode);
        c.set("seg.group", self.seg.group.name());
        c.set("seg.kernel_size", self.seg.kernel_size);
        c.set(
            "seg.gconv_channels",
            self.seg
                .gconv_channels
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        c.set("seg.global_width", self.seg.global_width);
        c.set("seg.head_hidden", self.seg.head_hidden);
        c.set("vae.latent", self.vae_arch.latent);
        c.set("vae.hidden", self.vae_arch.hidden);
        c.set("vae.obs_sd", self.vae_arch.obs_sd);
        c.set("vae.epochs", self.vae_train.epochs);
        c.set("vae.lr", self.vae_train.lr);
        c.set("vae.batch_size", self.vae_train.batch_size);
        c.set("vae.blocks", self.vae_blocks);
        c.set("train.epochs", self.train.epochs);
        c.set("train.lr", self.train.lr);
        c.set("train.batch_size", self.train.batch_size);
        c.set("seed", self.train.seed);
        c
    }

    pub fn with_mode(&self, mode: AblationMode) -> Self {
        let mut c = self.clone();
        c.seg.mode = mode;
        c
    }

    pub fn with_kernel(&self, kernel: Kernel) -> Self {
        let mut c = self.clone();
        c.seg.grid.kernel = kernel;
        c
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.train.seed = seed;
        c.vae_train.seed = seed;
        c
    }
}

/// Which block representation the VAE sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockSource {
    Rbf,
    /// `{0,1}` occupancy bits of each voxel's subcells.
    Occupancy,
}

/// Non-empty `k^3` blocks of every cloud, subsampled to at most `max` rows
/// without replacement.
pub fn training_blocks(
    samples: &[SynthSample],
    grid: &GridSpec,
    source: BlockSource,
    max: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    let all = match source {
        BlockSource::Rbf => {
            let subs = samples
                .iter()
                .map(|s| voxelize(&s.cloud, grid))
                .collect::<Result<Vec<SubvoxelTensor>>>()?;
            collect_blocks(subs.iter(), true)
        }
        BlockSource::Occupancy => {
            let mut rows = Vec::new();
            for s in samples {
                let ch = occupancy(&s.cloud, grid)?.to_voxel_channels(grid.k);
                let len = grid.block_len();
                for b in ch.as_standard_layout().as_slice().expect("contiguous").chunks(len) {
                    if b.iter().any(|&v| v != 0.0) {
                        rows.push(b.to_vec());
                    }
                }
            }
            let n = rows.len();
            Array2::from_shape_vec((n, grid.block_len()), rows.concat()).expect("sizes")
        }
    };
    if all.nrows() == 0 {
        return Err(Error::EmptyDataset);
    }
    if all.nrows() <= max {
        return Ok(all);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, all.nrows(), max).into_vec();
    idx.sort_unstable();
    Ok(all.select(Axis(0), &idx))
}

/// Splits rows into a training part and a held-out part of `holdout` rows.
pub fn split_rows(x: &Array2<f64>, holdout: usize) -> (Array2<f64>, Array2<f64>) {
    let cut = x.nrows().saturating_sub(holdout);
    (
        x.slice(ndarray::s![..cut, ..]).to_owned(),
        x.slice(ndarray::s![cut.., ..]).to_owned(),
    )
}

pub fn to_examples(model: &VvNetModel, samples: &[SynthSample]) -> Result<Vec<SegExample>> {
    samples
        .par_iter()
        .map(|s| {
            Ok(SegExample {
                category: s.kind.name().to_string(),
                parts: s.kind.global_parts(),
                input: model.prepare(&s.cloud)?,
            })
        })
        .collect()
}

/// Trained artifacts of one pipeline run.
#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub model: VvNetModel,
    /// Epoch-mean VAE losses; empty when the mode needs no VAE.
    pub vae_history: Vec<f64>,
    pub history: Vec<EpochMetrics>,
}

/// Pre-trains the VAE on `train` blocks when needed, then trains the network.
pub fn train_pipeline(cfg: &PipelineConfig, train: &[SynthSample]) -> Result<PipelineRun> {
    let (vae, vae_history) = if cfg.seg.mode.uses_vae() {
        let blocks = training_blocks(train, &cfg.seg.grid, BlockSource::Rbf, cfg.vae_blocks, cfg.vae_train.seed)?;
        let mut vae = VaeModel::new(cfg.vae_arch, cfg.vae_train.seed);
        let h = train_vae(&mut vae, blocks.view(), &cfg.vae_train)?;
        (Some(vae), h)
    } else {
        (None, Vec::new())
    };
    train_with_vae(cfg, vae, vae_history, train)
}

/// Trains the network around an already trained (or absent) VAE.
pub fn train_with_vae(
    cfg: &PipelineConfig,
    vae: Option<VaeModel>,
    vae_history: Vec<f64>,
    train: &[SynthSample],
) -> Result<PipelineRun> {
    let mut model = VvNetModel::new(cfg.seg.clone(), vae, cfg.train.seed)?;
    let examples = to_examples(&model, train)?;
    let history = train_segmentation(&mut model, &examples, &cfg.train)?;
    Ok(PipelineRun {
        model,
        vae_history,
        history,
    })
}

pub fn evaluate_samples(model: &VvNetModel, samples: &[SynthSample]) -> Result<EvalReport> {
    model.evaluate(&to_examples(model, samples)?, 16)
}

/// Points kept at a missing-data ratio (at least one).
pub fn kept_points(n: usize, missing_ratio: f64) -> usize {
    (((1.0 - missing_ratio) * n as f64).round() as usize).clamp(1, n)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub missing_ratio: f64,
    pub report: EvalReport,
}

/// Evaluates `model` on farthest-point subsamples of every cloud.
pub fn robustness_sweep(model: &VvNetModel, samples: &[SynthSample], ratios: &[f64], seed: u64) -> Result<Vec<SweepRow>> {
    ratios
        .iter()
        .map(|&r| {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::InvalidArgument(format!("missing ratio {r} outside [0, 1)")));
            }
            let reduced = samples
                .iter()
                .map(|s| {
                    let keep = kept_points(s.cloud.n(), r);
                    let idx = farthest_point_sample(&s.cloud, keep, seed)?;
                    Ok(SynthSample {
                        kind: s.kind,
                        cloud: s.cloud.select(&idx)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SweepRow {
                missing_ratio: r,
                report: evaluate_samples(model, &reduced)?,
            })
        })
        .collect()
}

pub fn format_sweep(rows: &[SweepRow]) -> String {
    let mut s = String::from("missing_ratio\taccuracy\tinstance_miou\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{:.4}\t{:.6}\t{:.6}",
            r.missing_ratio, r.report.overall_accuracy, r.report.instance_miou
        );
    }
    s
}

#[derive(Clone, Debug)]
pub struct KernelResult {
    pub kernel: Kernel,
    pub run: PipelineRun,
    pub report: EvalReport,
}

/// Twin pipelines differing only in the RBF kernel.
pub fn kernel_compare(cfg: &PipelineConfig, train: &[SynthSample], test: &[SynthSample]) -> Result<[KernelResult; 2]> {
    let run = |kernel| -> Result<KernelResult> {
        let run = train_pipeline(&cfg.with_kernel(kernel), train)?;
        let report = evaluate_samples(&run.model, test)?;
        Ok(KernelResult { kernel, run, report })
    };
    Ok([run(Kernel::Gaussian)?, run(Kernel::InverseQuadratic)?])
}

pub fn format_kernel_compare(results: &[KernelResult]) -> String {
    let mut s = String::from("kernel\taccuracy\tinstance_miou\tclass_miou\n");
    for r in results {
        let _ = writeln!(
            s,
            "{}\t{:.6}\t{:.6}\t{:.6}",
            r.kernel,
            r.report.overall_accuracy,
            r.report.instance_miou,
            r.report.class_miou()
        );
    }
    s
}
