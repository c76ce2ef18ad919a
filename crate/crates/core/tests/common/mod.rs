#![allow(dead_code)]

use ndarray::{Array2, Array5, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vvnet::gconv::{
    backward_lift_gconv3d, conv3d_valid, conv3d_valid_backward, lift_gconv3d, transform_lifted, transform_volume,
    FilterBank, Real,
};
use vvnet::group::{enumerate_stabilizer, GroupKind};
use vvnet::nn::{
    linear, linear_backward, max_pool_points, max_pool_points_backward, relu, relu_backward, softmax_cross_entropy,
    Params,
};
use vvnet::pointcloud::LabeledPointCloud;
use vvnet::segnet::{AblationMode, PreparedCloud, SegNetConfig, VvNetModel};
use vvnet::vae::{VaeArch, VaeModel};
use vvnet::voxelizer::{GridSpec, Sigma};

pub const STEP: f64 = 1e-5;
pub const UNIT_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> ArrayD<f64> {
    let mut r = rng(seed);
    ArrayD::from_shape_simple_fn(IxDyn(shape), || r.random_range(lo..hi))
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(x: &ArrayD<f64>, mut f: impl FnMut(&ArrayD<f64>) -> f64) -> ArrayD<f64> {
    let mut g = ArrayD::zeros(x.raw_dim());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.as_slice().unwrap()[i];
        probe.as_slice_mut().unwrap()[i] = orig + STEP;
        let up = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig - STEP;
        let down = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig;
        g.as_slice_mut().unwrap()[i] = (up - down) / (2.0 * STEP);
    }
    g
}

/// `|a - n| / max(|a|, |n|)` in the Euclidean norm.
pub fn rel_err(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    let norm = |a: &ArrayD<f64>| a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff = norm(&(analytic - numeric));
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[derive(Clone, Debug)]
pub struct GradCase {
    pub name: String,
    pub rel_err: f64,
    pub tol: f64,
}

impl GradCase {
    fn new(name: impl Into<String>, rel_err: f64, tol: f64) -> Self {
        GradCase {
            name: name.into(),
            rel_err,
            tol,
        }
    }

    pub fn passed(&self) -> bool {
        self.rel_err < self.tol
    }
}

fn dot(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    (a * b).sum()
}

pub fn linear_cases() -> Vec<GradCase> {
    let x = uniform(&[4, 5], -1.0, 1.0, 1);
    let w = uniform(&[5, 3], -1.0, 1.0, 2);
    let b = uniform(&[3], -1.0, 1.0, 3);
    let r = uniform(&[4, 3], -1.0, 1.0, 4);
    let v2 = |a: &ArrayD<f64>| a.view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
    let v1 = |a: &ArrayD<f64>| a.view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
    let f = |x: &ArrayD<f64>, w: &ArrayD<f64>, b: &ArrayD<f64>| {
        dot(&linear(v2(x).view(), v2(w).view(), v1(b).view()).unwrap().into_dyn(), &r)
    };
    let (dx, dw, db) = linear_backward(v2(&x).view(), v2(&w).view(), v2(&r).view());
    vec![
        GradCase::new("linear/x", rel_err(&dx.into_dyn(), &numeric_grad(&x, |p| f(p, &w, &b))), UNIT_TOL),
        GradCase::new("linear/W", rel_err(&dw.into_dyn(), &numeric_grad(&w, |p| f(&x, p, &b))), UNIT_TOL),
        GradCase::new("linear/b", rel_err(&db.into_dyn(), &numeric_grad(&b, |p| f(&x, &w, p))), UNIT_TOL),
    ]
}

pub fn relu_cases() -> Vec<GradCase> {
    // Magnitudes kept away from the kink.
    let mag = uniform(&[40], 0.1, 1.0, 5);
    let sign = uniform(&[40], -1.0, 1.0, 6);
    let x = ndarray::Zip::from(&mag).and(&sign).map_collect(|&m, &s| if s < 0.0 { -m } else { m });
    let r = uniform(&[40], -1.0, 1.0, 7);
    let analytic = relu_backward(&x, &r);
    let numeric = numeric_grad(&x, |p| dot(&relu(p), &r));
    vec![GradCase::new("relu", rel_err(&analytic, &numeric), UNIT_TOL)]
}

pub fn conv_cases() -> Vec<GradCase> {
    let x = uniform(&[1, 4, 5, 4, 2], -1.0, 1.0, 8);
    let w = uniform(&[2, 3, 2, 2, 3], -1.0, 1.0, 9);
    let b = uniform(&[3], -1.0, 1.0, 10);
    let r = uniform(&[1, 3, 3, 3, 3], -1.0, 1.0, 11);
    let v5 = |a: &ArrayD<f64>| a.view().into_dimensionality::<ndarray::Ix5>().unwrap().to_owned();
    let v1 = |a: &ArrayD<f64>| a.view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
    let f = |x: &ArrayD<f64>, w: &ArrayD<f64>, b: &ArrayD<f64>| {
        dot(&conv3d_valid(v5(x).view(), v5(w).view(), v1(b).view()).unwrap().into_dyn(), &r)
    };
    let g = conv3d_valid_backward(v5(&x).view(), v5(&w).view(), v5(&r).view()).unwrap();
    vec![
        GradCase::new("conv/input", rel_err(&g.input.into_dyn(), &numeric_grad(&x, |p| f(p, &w, &b))), UNIT_TOL),
        GradCase::new("conv/weights", rel_err(&g.weights.into_dyn(), &numeric_grad(&w, |p| f(&x, p, &b))), UNIT_TOL),
        GradCase::new("conv/bias", rel_err(&g.bias.into_dyn(), &numeric_grad(&b, |p| f(&x, &w, p))), UNIT_TOL),
    ]
}

/// Lifting layer over all 48 p4m elements on a 4^3 input.
pub fn gconv_cases() -> Vec<GradCase> {
    let stab = enumerate_stabilizer(GroupKind::P4m, true);
    assert_eq!(stab.len(), 48);
    let x = uniform(&[1, 4, 4, 4, 2], -1.0, 1.0, 12);
    let w = uniform(&[3, 3, 3, 2, 1], -1.0, 1.0, 13);
    let b = uniform(&[1], -1.0, 1.0, 14);
    let r = uniform(&[1, 2, 2, 2, 48], -1.0, 1.0, 15);
    let bank = |w: &ArrayD<f64>, b: &ArrayD<f64>| {
        FilterBank::new(
            w.view().into_dimensionality().unwrap().to_owned(),
            b.view().into_dimensionality().unwrap().to_owned(),
        )
        .unwrap()
    };
    let v5 = |a: &ArrayD<f64>| a.view().into_dimensionality::<ndarray::Ix5>().unwrap().to_owned();
    let f = |x: &ArrayD<f64>, w: &ArrayD<f64>, b: &ArrayD<f64>| {
        dot(&lift_gconv3d(v5(x).view(), &bank(w, b), &stab).unwrap().values.into_dyn(), &r)
    };
    let g = backward_lift_gconv3d(v5(&x).view(), &bank(&w, &b), &stab, v5(&r).view()).unwrap();
    vec![
        GradCase::new("gconv/input", rel_err(&g.input.into_dyn(), &numeric_grad(&x, |p| f(p, &w, &b))), UNIT_TOL),
        GradCase::new(
            "gconv/weights",
            rel_err(&g.bank.weights.into_dyn(), &numeric_grad(&w, |p| f(&x, p, &b))),
            UNIT_TOL,
        ),
        GradCase::new(
            "gconv/bias",
            rel_err(&g.bank.bias.into_dyn(), &numeric_grad(&b, |p| f(&x, &w, p))),
            UNIT_TOL,
        ),
    ]
}

pub fn max_pool_cases() -> Vec<GradCase> {
    // Distinct values on a 0.1 lattice, so no ties within the step.
    let mut vals: Vec<f64> = (0..24).map(|i| i as f64 * 0.1 - 1.2).collect();
    let mut r = rng(16);
    for i in (1..vals.len()).rev() {
        vals.swap(i, r.random_range(0..=i));
    }
    let x = ArrayD::from_shape_vec(IxDyn(&[6, 4]), vals).unwrap();
    let up = uniform(&[4], -1.0, 1.0, 17);
    let v2 = |a: &ArrayD<f64>| a.view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
    let (_, arg) = max_pool_points(v2(&x).view()).unwrap();
    let up1 = up.view().into_dimensionality::<ndarray::Ix1>().unwrap();
    let analytic = max_pool_points_backward(&arg, up1, 6).into_dyn();
    let numeric = numeric_grad(&x, |p| dot(&max_pool_points(v2(p).view()).unwrap().0.into_dyn(), &up));
    vec![GradCase::new("max_pool", rel_err(&analytic, &numeric), UNIT_TOL)]
}

pub fn cross_entropy_cases() -> Vec<GradCase> {
    let s = uniform(&[5, 4], -2.0, 2.0, 18);
    let labels = [0, 3, 1, 1, 2];
    let v2 = |a: &ArrayD<f64>| a.view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
    let (_, g) = softmax_cross_entropy(v2(&s).view(), &labels).unwrap();
    let numeric = numeric_grad(&s, |p| softmax_cross_entropy(v2(p).view(), &labels).unwrap().0);
    vec![GradCase::new("cross_entropy", rel_err(&g.into_dyn(), &numeric), UNIT_TOL)]
}

/// Numeric gradient of `loss` with respect to every parameter of `model`.
pub fn param_fd<M: Params + Clone>(model: &M, loss: impl Fn(&M) -> f64) -> Vec<ArrayD<f64>> {
    let mut probe = model.clone();
    let shapes: Vec<usize> = model.params().iter().map(|p| p.value().len()).collect();
    let mut out = Vec::with_capacity(shapes.len());
    for (pi, &len) in shapes.iter().enumerate() {
        let mut g = ArrayD::zeros(model.params()[pi].value().raw_dim());
        for i in 0..len {
            let orig = probe.params()[pi].value().as_slice().unwrap()[i];
            probe.params_mut()[pi].value_mut().as_slice_mut().unwrap()[i] = orig + STEP;
            let up = loss(&probe);
            probe.params_mut()[pi].value_mut().as_slice_mut().unwrap()[i] = orig - STEP;
            let down = loss(&probe);
            probe.params_mut()[pi].value_mut().as_slice_mut().unwrap()[i] = orig;
            g.as_slice_mut().unwrap()[i] = (up - down) / (2.0 * STEP);
        }
        out.push(g);
    }
    out
}

fn jitter_biases<M: Params>(model: &mut M, seed: u64) {
    let mut r = rng(seed);
    for p in model.params_mut() {
        if p.name.ends_with("bias") {
            p.value_mut().mapv_inplace(|_| r.random_range(-0.1..0.1));
        }
    }
}

pub fn small_vae() -> VaeModel {
    let mut m = VaeModel::new(
        VaeArch {
            k: 2,
            latent: 3,
            hidden: 6,
            obs_sd: 0.5,
        },
        19,
    );
    jitter_biases(&mut m, 20);
    m
}

/// ELBO with fixed noise, per parameter tensor (encoder, both heads, decoder).
pub fn vae_cases() -> Vec<GradCase> {
    let m = small_vae();
    let x = uniform(&[4, 8], 0.0, 1.0, 21).into_dimensionality::<ndarray::Ix2>().unwrap();
    let noise = uniform(&[4, 3], -1.5, 1.5, 22).into_dimensionality::<ndarray::Ix2>().unwrap();
    let (_, grads) = m.elbo_loss_and_grads(x.view(), noise.view()).unwrap();
    let numeric = param_fd(&m, |p| p.elbo_loss(x.view(), noise.view()).unwrap().loss);
    m.params()
        .iter()
        .zip(grads.iter().zip(&numeric))
        .map(|(p, (a, n))| GradCase::new(format!("vae/{}", p.name), rel_err(a, n), UNIT_TOL))
        .collect()
}

pub fn tiny_config() -> SegNetConfig {
    SegNetConfig {
        grid: GridSpec::cube(4, 2, Sigma::VoxelMultiple(1.0)),
        classes: 3,
        mode: AblationMode::Full,
        group: GroupKind::P4m,
        kernel_size: 2,
        gconv_channels: vec![1, 1],
        global_width: 4,
        head_hidden: 4,
    }
}

pub fn tiny_vae(seed: u64) -> VaeModel {
    VaeModel::new(
        VaeArch {
            k: 2,
            latent: 2,
            hidden: 4,
            obs_sd: 0.1,
        },
        seed,
    )
}

pub fn random_cloud(n: usize, classes: u32, seed: u64) -> LabeledPointCloud {
    let mut r = rng(seed);
    let pts = (0..n)
        .map(|_| std::array::from_fn(|_| r.random_range(-1.0..1.0)))
        .collect();
    let labels = (0..n).map(|_| r.random_range(0..classes)).collect();
    LabeledPointCloud::new(pts, Some(labels)).unwrap()
}

/// Mean cross-entropy of the tiny network over a batch of two 16-point clouds.
pub fn tiny_vvnet_cases() -> Vec<GradCase> {
    let mut model = VvNetModel::new(tiny_config(), Some(tiny_vae(23)), 24).unwrap();
    jitter_biases(&mut model, 25);
    let clouds = [random_cloud(16, 3, 26), random_cloud(16, 3, 27)];
    let prepared: Vec<PreparedCloud> = clouds.iter().map(|c| model.prepare(c).unwrap()).collect();
    let batch: Vec<&PreparedCloud> = prepared.iter().collect();
    let (_, _, grads) = model.loss_and_grads(&batch).unwrap();
    let numeric = param_fd(&model, |m| m.loss(&batch).unwrap());
    model
        .params()
        .iter()
        .zip(grads.iter().zip(&numeric))
        .map(|(p, (a, n))| GradCase::new(format!("vvnet/{}", p.name), rel_err(a, n), END_TO_END_TOL))
        .collect()
}

pub fn all_unit_cases() -> Vec<GradCase> {
    let mut v = linear_cases();
    v.extend(relu_cases());
    v.extend(conv_cases());
    v.extend(gconv_cases());
    v.extend(max_pool_cases());
    v.extend(cross_entropy_cases());
    v.extend(vae_cases());
    v
}

/// Largest `|lift(g x) - g lift(x)|` over every p4m element, on a random
/// `8^3 x 2` input with `3^3` filters.
pub fn equivariance_error<T: Real>(seed: u64) -> T {
    let stab = enumerate_stabilizer(GroupKind::P4m, true);
    let mut r = rng(seed);
    let mut draw = || T::from(r.random_range(-1.0..1.0)).unwrap();
    let x = Array5::from_shape_simple_fn((1, 8, 8, 8, 2), &mut draw);
    let bank = FilterBank::new(
        Array5::from_shape_simple_fn((3, 3, 3, 2, 2), &mut draw),
        ndarray::Array1::from_shape_simple_fn(2, &mut draw),
    )
    .unwrap();
    let base = lift_gconv3d(x.view(), &bank, &stab).unwrap();
    let mut worst = T::zero();
    for g in stab.elements() {
        let lhs = lift_gconv3d(transform_volume(x.view(), g).unwrap().view(), &bank, &stab).unwrap();
        let rhs = transform_lifted(&base, g).unwrap();
        for (a, b) in lhs.values.iter().zip(rhs.iter()) {
            let d = (*a - *b).abs();
            if d > worst {
                worst = d;
            }
        }
    }
    worst
}

pub fn points_matrix(cloud: &LabeledPointCloud) -> Array2<f64> {
    Array2::from_shape_vec((cloud.n(), 3), cloud.points().iter().flatten().copied().collect()).unwrap()
}
