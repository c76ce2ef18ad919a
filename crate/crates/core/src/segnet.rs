//! Point-branch plus voxel-branch segmentation network.
//!
//! The point branch maps each normalized coordinate through a shared MLP to 64
//! features. The voxel branch voxelizes the cloud, encodes the grid with a
//! frozen VAE, runs a stack of lifting group convolutions, flattens the result
//! and reduces it to one global vector. That vector is appended to every
//! point's features before a per-point classification head.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Array4, Array5, ArrayD, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::formats::CheckpointFile;
use crate::group::{enumerate_stabilizer, GroupKind};
use crate::metrics::{EvalReport, EvalSample};
use crate::nn::{
    adam_step, install_grads, relu, relu_backward, shared_point_mlp, softmax_cross_entropy, AdamConfig, LiftLayer,
    Linear, Mlp, MlpCache, Params, Parameter, POINT_FEATURE_WIDTH,
};
use crate::pointcloud::{bounding_box, LabeledPointCloud};
use crate::vae::{encode_grid, VaeModel};
use crate::voxelizer::{occupancy, voxelize, GridSpec};

/// Which parts of the voxel branch are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AblationMode {
    /// Latent grid through the group-convolution stack.
    Full,
    /// Latent grid flattened straight into the dense layer.
    RbfVaeOnly,
    /// Binary occupancy through the group-convolution stack.
    GconvOccupancyOnly,
    /// No voxel branch.
    PointOnly,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [
        AblationMode::Full,
        AblationMode::RbfVaeOnly,
        AblationMode::GconvOccupancyOnly,
        AblationMode::PointOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::RbfVaeOnly => "rbf_vae_only",
            AblationMode::GconvOccupancyOnly => "gconv_occupancy_only",
            AblationMode::PointOnly => "point_only",
        }
    }

    pub fn uses_vae(self) -> bool {
        matches!(self, AblationMode::Full | AblationMode::RbfVaeOnly)
    }

    pub fn uses_gconv(self) -> bool {
        matches!(self, AblationMode::Full | AblationMode::GconvOccupancyOnly)
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown ablation mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegNetConfig {
    pub grid: GridSpec,
    /// Class count `m`.
    pub classes: usize,
    pub mode: AblationMode,
    pub group: GroupKind,
    pub kernel_size: usize,
    /// Base filter count of each lifting layer.
    pub gconv_channels: Vec<usize>,
    pub global_width: usize,
    pub head_hidden: usize,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        SegNetConfig {
            grid: GridSpec::shapenet(),
            classes: 50,
            mode: AblationMode::Full,
            group: GroupKind::P4m,
            kernel_size: 3,
            gconv_channels: vec![8, 8],
            global_width: 256,
            head_hidden: 128,
        }
    }
}

impl SegNetConfig {
    /// Spatial edge lengths left after the lifting stack.
    pub fn gconv_output_dims(&self) -> Result<[usize; 3]> {
        let shrink = self.gconv_channels.len() * (self.kernel_size - 1);
        let dims = [self.grid.d, self.grid.h, self.grid.w];
        if dims.iter().any(|&d| d <= shrink) {
            return Err(Error::Config(format!(
                "grid {dims:?} too small for {} layers of kernel {}",
                self.gconv_channels.len(),
                self.kernel_size
            )));
        }
        Ok(dims.map(|d| d - shrink))
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.mode.uses_gconv() {
            if self.kernel_size == 0 || self.gconv_channels.is_empty() || self.gconv_channels.contains(&0) {
                return Err(Error::Config("group-convolution stack needs positive widths".into()));
            }
            self.gconv_output_dims()?;
        }
        if self.mode != AblationMode::PointOnly && self.global_width == 0 {
            return Err(Error::Config("global width must be positive".into()));
        }
        if self.head_hidden == 0 {
            return Err(Error::Config("head width must be positive".into()));
        }
        Ok(())
    }
}

/// Network inputs derived from one cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedCloud {
    /// `(n, 3)` coordinates normalized to the cloud's own box.
    pub points: Array2<f64>,
    /// `(D, H, W, C)` voxel-branch input, absent in point-only mode.
    pub voxels: Option<Array4<f64>>,
    pub labels: Option<Vec<u32>>,
}

/// A prepared cloud with its category and that category's part ids.
#[derive(Clone, Debug, PartialEq)]
pub struct SegExample {
    pub category: String,
    pub parts: Vec<u32>,
    pub input: PreparedCloud,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VvNetModel {
    pub config: SegNetConfig,
    /// Frozen encoder for the latent grid.
    pub vae: Option<VaeModel>,
    pub point_mlp: Mlp,
    pub lifts: Vec<LiftLayer>,
    pub dense: Option<Linear>,
    pub head: Mlp,
}

struct VoxelCache {
    /// Input of each lifting layer.
    lift_in: Vec<Array5<f64>>,
    /// Pre-activation output of each lifting layer.
    lift_pre: Vec<Array5<f64>>,
    flat: Array2<f64>,
    dense_pre: Array2<f64>,
}

/// Everything the backward pass needs from one batch.
pub struct BatchCache {
    offsets: Vec<usize>,
    point_cache: MlpCache,
    voxel: Option<VoxelCache>,
    head_cache: MlpCache,
}

impl VvNetModel {
    /// Parameters of the point branch, voxel branch and head come from
    /// separate streams of `seed`.
    pub fn new(config: SegNetConfig, vae: Option<VaeModel>, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.mode.uses_vae() {
            let v = vae
                .as_ref()
                .ok_or_else(|| Error::Config(format!("mode {} needs a VAE", config.mode)))?;
            if v.arch.k != config.grid.k {
                return Err(Error::Config(format!(
                    "VAE block edge {} differs from grid k={}",
                    v.arch.k, config.grid.k
                )));
            }
        }
        let stream = |s| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(s);
            r
        };
        let mut point_rng = stream(0);
        let mut voxel_rng = stream(1);
        let mut head_rng = stream(2);

        let point_mlp = Mlp::new("point", &[3, POINT_FEATURE_WIDTH, POINT_FEATURE_WIDTH], true, &mut point_rng);
        let latent = vae.as_ref().map_or(0, |v| v.arch.latent);
        let g = &config.grid;
        let mut lifts = Vec::new();
        let flat_width = match config.mode {
            AblationMode::PointOnly => 0,
            AblationMode::RbfVaeOnly => g.voxels() * latent,
            AblationMode::Full | AblationMode::GconvOccupancyOnly => {
                let stab = enumerate_stabilizer(config.group, true);
                let mut c_in = if config.mode == AblationMode::Full { latent } else { g.block_len() };
                for (i, &c) in config.gconv_channels.iter().enumerate() {
                    let layer = LiftLayer::new(
                        &format!("gconv.{i}"),
                        config.kernel_size,
                        c_in,
                        c,
                        stab.clone(),
                        &mut voxel_rng,
                    );
                    c_in = layer.outputs();
                    lifts.push(layer);
                }
                config.gconv_output_dims()?.iter().product::<usize>() * c_in
            }
        };
        let (dense, global) = if flat_width > 0 {
            (
                Some(Linear::new("global", flat_width, config.global_width, &mut voxel_rng)),
                config.global_width,
            )
        } else {
            (None, 0)
        };
        let head = Mlp::new(
            "head",
            &[POINT_FEATURE_WIDTH + global, config.head_hidden, config.classes],
            false,
            &mut head_rng,
        );
        Ok(VvNetModel {
            vae: if config.mode.uses_vae() { vae } else { None },
            config,
            point_mlp,
            lifts,
            dense,
            head,
        })
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    /// Width of the broadcast global feature (0 in point-only mode).
    pub fn global_width(&self) -> usize {
        self.dense.as_ref().map_or(0, Linear::outputs)
    }

    /// Normalizes the cloud and builds the voxel-branch input.
    pub fn prepare(&self, cloud: &LabeledPointCloud) -> Result<PreparedCloud> {
        let bbox = bounding_box(cloud);
        let pts: Vec<f64> = cloud.points().iter().flat_map(|p| bbox.normalize(p)).collect();
        let points = Array2::from_shape_vec((cloud.n(), 3), pts).expect("sizes");
        let g = &self.config.grid;
        let voxels = match self.config.mode {
            AblationMode::PointOnly => None,
            AblationMode::Full | AblationMode::RbfVaeOnly => {
                let vae = self.vae.as_ref().ok_or_else(|| Error::Config("model has no VAE".into()))?;
                Some(encode_grid(&voxelize(cloud, g)?, vae)?.values)
            }
            AblationMode::GconvOccupancyOnly => Some(occupancy(cloud, g)?.to_voxel_channels(g.k)),
        };
        if let Some(l) = cloud.labels() {
            if let Some(&bad) = l.iter().find(|&&l| l as usize >= self.classes()) {
                return Err(Error::LabelOutOfRange {
                    label: bad,
                    classes: self.classes(),
                });
            }
        }
        Ok(PreparedCloud {
            points,
            voxels,
            labels: cloud.labels().map(<[u32]>::to_vec),
        })
    }

    fn voxel_forward(&self, batch: &[&PreparedCloud]) -> Result<Option<(Array2<f64>, VoxelCache)>> {
        let Some(dense) = &self.dense else {
            return Ok(None);
        };
        let vox: Vec<&Array4<f64>> = batch
            .iter()
            .map(|p| p.voxels.as_ref().ok_or_else(|| Error::Shape("cloud was prepared without voxels".into())))
            .collect::<Result<_>>()?;
        let dims = vox[0].dim();
        if vox.iter().any(|v| v.dim() != dims) {
            return Err(Error::Shape("voxel inputs differ in shape".into()));
        }
        let b = batch.len();
        let mut x = Array5::zeros((b, dims.0, dims.1, dims.2, dims.3));
        for (i, v) in vox.iter().enumerate() {
            x.index_axis_mut(Axis(0), i).assign(v);
        }
        let mut lift_in = Vec::with_capacity(self.lifts.len());
        let mut lift_pre = Vec::with_capacity(self.lifts.len());
        for layer in &self.lifts {
            let pre = layer.forward(x.view())?;
            lift_in.push(x);
            x = relu(&pre);
            lift_pre.push(pre);
        }
        let width = x.len() / b;
        let flat = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((b, width))
            .expect("contiguous");
        let dense_pre = dense.forward(flat.view())?;
        let global = relu(&dense_pre);
        Ok(Some((
            global,
            VoxelCache {
                lift_in,
                lift_pre,
                flat,
                dense_pre,
            },
        )))
    }

    /// `(B, G)` global features of a batch.
    pub fn global_features(&self, batch: &[&PreparedCloud]) -> Result<Option<Array2<f64>>> {
        Ok(self.voxel_forward(batch)?.map(|(g, _)| g))
    }

    /// Scores `(sum n_i, m)` for the concatenated points of a batch.
    pub fn forward_batch(&self, batch: &[&PreparedCloud]) -> Result<(Array2<f64>, BatchCache)> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut offsets = vec![0];
        for p in batch {
            if p.points.ncols() != 3 {
                return Err(Error::Shape("points must have 3 columns".into()));
            }
            offsets.push(offsets.last().unwrap() + p.points.nrows());
        }
        let total = *offsets.last().unwrap();
        let mut pts = Array2::zeros((total, 3));
        for (i, p) in batch.iter().enumerate() {
            pts.slice_mut(s![offsets[i]..offsets[i + 1], ..]).assign(&p.points);
        }
        let (feat, point_cache) = shared_point_mlp(pts.view(), &self.point_mlp)?;
        let voxel = self.voxel_forward(batch)?;
        let gw = self.global_width();
        let mut head_in = Array2::zeros((total, POINT_FEATURE_WIDTH + gw));
        head_in.slice_mut(s![.., ..POINT_FEATURE_WIDTH]).assign(&feat.values);
        if let Some((global, _)) = &voxel {
            for (i, g) in global.rows().into_iter().enumerate() {
                let mut block = head_in.slice_mut(s![offsets[i]..offsets[i + 1], POINT_FEATURE_WIDTH..]);
                for mut row in block.rows_mut() {
                    row.assign(&g);
                }
            }
        }
        let (scores, head_cache) = self.head.forward(head_in.view())?;
        Ok((
            scores,
            BatchCache {
                offsets,
                point_cache,
                voxel: voxel.map(|(_, c)| c),
                head_cache,
            },
        ))
    }

    /// Gradients of all trainable parameters, in [`Params::params`] order.
    pub fn backward(&self, cache: &BatchCache, d_scores: ArrayView2<f64>) -> Result<Vec<ArrayD<f64>>> {
        let (d_head_in, g_head) = self.head.backward(&cache.head_cache, d_scores);
        let d_feat = d_head_in.slice(s![.., ..POINT_FEATURE_WIDTH]).to_owned();
        let (_, g_point) = self.point_mlp.backward(&cache.point_cache, d_feat.view());

        let mut grads = g_point;
        if let (Some(dense), Some(vc)) = (&self.dense, &cache.voxel) {
            let b = cache.offsets.len() - 1;
            let gw = dense.outputs();
            let mut d_global = Array2::zeros((b, gw));
            for i in 0..b {
                let block = d_head_in.slice(s![cache.offsets[i]..cache.offsets[i + 1], POINT_FEATURE_WIDTH..]);
                d_global.row_mut(i).assign(&block.sum_axis(Axis(0)));
            }
            let d_dense_pre = relu_backward(&vc.dense_pre, &d_global);
            let (d_flat, g_dense) = dense.backward(vc.flat.view(), d_dense_pre.view());

            let mut lift_grads = Vec::with_capacity(self.lifts.len());
            if let Some(last) = vc.lift_pre.last() {
                let mut d = d_flat.into_shape_with_order(last.raw_dim()).expect("sizes");
                for (i, layer) in self.lifts.iter().enumerate().rev() {
                    let d_pre = relu_backward(&vc.lift_pre[i], &d);
                    let (dx, g) = layer.backward(vc.lift_in[i].view(), d_pre.view())?;
                    lift_grads.push(g);
                    d = dx;
                }
            }
            lift_grads.reverse();
            grads.extend(lift_grads.into_iter().flatten());
            grads.extend(g_dense);
        }
        grads.extend(g_head);
        Ok(grads)
    }

    /// Mean cross-entropy of a labeled batch, its scores and gradients.
    pub fn loss_and_grads(&self, batch: &[&PreparedCloud]) -> Result<(f64, Array2<f64>, Vec<ArrayD<f64>>)> {
        let labels = batch_labels(batch)?;
        let (scores, cache) = self.forward_batch(batch)?;
        let (loss, d_scores) = softmax_cross_entropy(scores.view(), &labels)?;
        let grads = self.backward(&cache, d_scores.view())?;
        Ok((loss, scores, grads))
    }

    /// Mean cross-entropy without gradients.
    pub fn loss(&self, batch: &[&PreparedCloud]) -> Result<f64> {
        let labels = batch_labels(batch)?;
        let (scores, _) = self.forward_batch(batch)?;
        Ok(softmax_cross_entropy(scores.view(), &labels)?.0)
    }

    /// `(n, m)` scores of a raw cloud.
    pub fn forward(&self, cloud: &LabeledPointCloud) -> Result<Array2<f64>> {
        let p = self.prepare(cloud)?;
        Ok(self.forward_batch(&[&p])?.0)
    }

    pub fn predict_labels(&self, cloud: &LabeledPointCloud) -> Result<Vec<u32>> {
        Ok(argmax_rows(self.forward(cloud)?.view()))
    }

    /// Predicted labels of each prepared cloud.
    pub fn predict_prepared(&self, clouds: &[&PreparedCloud], batch_size: usize) -> Result<Vec<Vec<u32>>> {
        let mut out = Vec::with_capacity(clouds.len());
        for chunk in clouds.chunks(batch_size.max(1)) {
            let (scores, cache) = self.forward_batch(chunk)?;
            let labels = argmax_rows(scores.view());
            for w in cache.offsets.windows(2) {
                out.push(labels[w[0]..w[1]].to_vec());
            }
        }
        Ok(out)
    }

    pub fn evaluate(&self, examples: &[SegExample], batch_size: usize) -> Result<EvalReport> {
        let inputs: Vec<&PreparedCloud> = examples.iter().map(|e| &e.input).collect();
        let preds = self.predict_prepared(&inputs, batch_size)?;
        let samples = examples
            .iter()
            .zip(&preds)
            .map(|(e, p)| {
                Ok(EvalSample {
                    category: &e.category,
                    parts: &e.parts,
                    gt: e.input.labels.as_deref().ok_or_else(|| Error::Shape("example without labels".into()))?,
                    pred: p,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        EvalReport::evaluate(&samples)
    }

    /// Trainable parameters followed by the frozen VAE tensors.
    pub fn to_checkpoint(&self) -> Result<CheckpointFile> {
        let mut c = CheckpointFile::new();
        for p in self.params() {
            c.push_array(&p.name, p.value())?;
        }
        if let Some(v) = &self.vae {
            v.to_checkpoint(&mut c)?;
        }
        Ok(c)
    }

    pub fn from_checkpoint(config: SegNetConfig, ckpt: &CheckpointFile, obs_sd: f64) -> Result<Self> {
        let vae = if config.mode.uses_vae() {
            let arch = VaeModel::arch_from_checkpoint(ckpt, obs_sd)?;
            Some(VaeModel::from_checkpoint(arch, ckpt)?)
        } else {
            None
        };
        let mut model = VvNetModel::new(config, vae, 0)?;
        for p in model.params_mut() {
            let shape = p.value().shape().to_vec();
            p.load(ckpt.array(&p.name, &shape)?)?;
        }
        Ok(model)
    }
}

impl Params for VvNetModel {
    fn params(&self) -> Vec<&Parameter> {
        let mut v = self.point_mlp.params();
        v.extend(self.lifts.iter().flat_map(Params::params));
        if let Some(d) = &self.dense {
            v.extend(d.params());
        }
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.point_mlp.params_mut();
        v.extend(self.lifts.iter_mut().flat_map(Params::params_mut));
        if let Some(d) = &mut self.dense {
            v.extend(d.params_mut());
        }
        v.extend(self.head.params_mut());
        v
    }
}

fn batch_labels(batch: &[&PreparedCloud]) -> Result<Vec<u32>> {
    let mut labels = Vec::new();
    for p in batch {
        labels.extend_from_slice(
            p.labels
                .as_deref()
                .ok_or_else(|| Error::Shape("training cloud has no labels".into()))?,
        );
    }
    Ok(labels)
}

/// Row-wise argmax; ties go to the lowest class.
pub fn argmax_rows(scores: ArrayView2<f64>) -> Vec<u32> {
    scores
        .rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for (j, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = j;
                }
            }
            best as u32
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            lr: 1e-3,
            batch_size: 8,
            seed: 0,
        }
    }
}

/// Training-set statistics of one epoch, gathered from the forward passes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub miou: f64,
}

impl fmt::Display for EpochMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{:.6}\t{:.6}\t{:.6}",
            self.epoch, self.loss, self.accuracy, self.miou
        )
    }
}

/// Header line of the metrics log.
pub const METRICS_HEADER: &str = "epoch\tloss\taccuracy\tmiou";

/// Adam on mean point cross-entropy; the VAE stays frozen.
pub fn train_segmentation(model: &mut VvNetModel, data: &[SegExample], cfg: &TrainConfig) -> Result<Vec<EpochMetrics>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(Error::Config("epochs and batch size must be positive, lr finite and non-negative".into()));
    }
    for e in data {
        let labels = e.input.labels.as_deref().ok_or_else(|| Error::Shape("training cloud has no labels".into()))?;
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= model.classes()) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: model.classes(),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(3);
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits, mut points, mut miou_sum) = (0.0, 0usize, 0usize, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreparedCloud> = chunk.iter().map(|&i| &data[i].input).collect();
            let (loss, scores, grads) = model.loss_and_grads(&batch)?;
            let pred = argmax_rows(scores.view());
            let mut at = 0;
            for &i in chunk {
                let gt = data[i].input.labels.as_deref().expect("checked");
                let p = &pred[at..at + gt.len()];
                hits += gt.iter().zip(p).filter(|(a, b)| a == b).count();
                miou_sum += crate::metrics::instance_miou(gt, p, &data[i].parts)?;
                at += gt.len();
            }
            loss_sum += loss * at as f64;
            points += at;
            install_grads(model.params_mut(), grads)?;
            adam_step(model.params_mut(), &adam);
        }
        history.push(EpochMetrics {
            epoch,
            loss: loss_sum / points as f64,
            accuracy: hits as f64 / points as f64,
            miou: miou_sum / data.len() as f64,
        });
    }
    Ok(history)
}
