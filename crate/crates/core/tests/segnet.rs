mod common;

use ndarray::array;
use rand::seq::SliceRandom;

use vvnet::error::Error;
use vvnet::formats::CheckpointFile;
use vvnet::nn::Params;
use vvnet::pointcloud::LabeledPointCloud;
use vvnet::segnet::{argmax_rows, train_segmentation, AblationMode, SegExample, SegNetConfig, TrainConfig, VvNetModel};
use vvnet::vae::{train_vae, VaeTrainConfig};

use common::{random_cloud, rng, tiny_config, tiny_vae};

fn model(mode: AblationMode, seed: u64) -> VvNetModel {
    let config = SegNetConfig { mode, ..tiny_config() };
    VvNetModel::new(config, Some(tiny_vae(7)), seed).unwrap()
}

fn examples(model: &VvNetModel, count: usize, seed: u64) -> Vec<SegExample> {
    (0..count)
        .map(|i| SegExample {
            category: "random".into(),
            parts: vec![0, 1, 2],
            input: model.prepare(&random_cloud(16, 3, seed + i as u64)).unwrap(),
        })
        .collect()
}

fn train_cfg(lr: f64) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        lr,
        batch_size: 2,
        seed: 5,
    }
}

#[test]
fn scores_have_one_row_per_point() {
    for mode in AblationMode::ALL {
        let m = model(mode, 1);
        let scores = m.forward(&random_cloud(16, 3, 2)).unwrap();
        assert_eq!(scores.dim(), (16, 3), "{mode}");
        assert!(scores.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn permuting_points_permutes_scores() {
    let m = model(AblationMode::Full, 1);
    let cloud = random_cloud(16, 3, 3);
    let mut perm: Vec<usize> = (0..16).collect();
    perm.shuffle(&mut rng(4));
    let permuted = cloud.select(&perm).unwrap();

    let a = m.forward(&cloud).unwrap();
    let b = m.forward(&permuted).unwrap();
    for (row, &src) in perm.iter().enumerate() {
        for c in 0..3 {
            assert!((b[[row, c]] - a[[src, c]]).abs() < 1e-12);
        }
    }
    let ga = m.global_features(&[&m.prepare(&cloud).unwrap()]).unwrap().unwrap();
    let gb = m.global_features(&[&m.prepare(&permuted).unwrap()]).unwrap().unwrap();
    assert!(ga.iter().zip(gb.iter()).all(|(x, y)| (x - y).abs() < 1e-12));
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let mut m = model(AblationMode::Full, 1);
    let before = m.clone();
    let data = examples(&m, 4, 10);
    train_segmentation(&mut m, &data, &train_cfg(0.0)).unwrap();
    for (a, b) in m.params().iter().zip(before.params()) {
        assert_eq!(a.value(), b.value(), "{}", a.name);
    }
}

#[test]
fn training_is_reproducible_and_keeps_the_vae_frozen() {
    let run = || {
        let mut m = model(AblationMode::Full, 1);
        let data = examples(&m, 4, 10);
        let h = train_segmentation(&mut m, &data, &train_cfg(1e-2)).unwrap();
        (m, h)
    };
    let (a, ha) = run();
    let (b, hb) = run();
    assert_eq!(ha, hb);
    assert_eq!(a, b);
    assert_eq!(ha.len(), 2);

    let fresh = model(AblationMode::Full, 1);
    assert_eq!(a.vae, fresh.vae);
    assert_ne!(a.head, fresh.head);
}

#[test]
fn point_branch_init_is_shared_across_modes() {
    let base = model(AblationMode::Full, 9);
    for mode in AblationMode::ALL {
        let m = model(mode, 9);
        assert_eq!(m.point_mlp, base.point_mlp, "{mode}");
        assert_eq!(m.vae.is_some(), mode.uses_vae());
        assert_eq!(m.lifts.is_empty(), !mode.uses_gconv());
    }
}

#[test]
fn argmax_prefers_the_lowest_class_on_ties() {
    let s = array![[1.0, 1.0, 0.0], [0.0, 2.0, 2.0], [3.0, 3.0, 3.0], [0.0, -1.0, 0.5]];
    assert_eq!(argmax_rows(s.view()), [0, 1, 0, 2]);
}

#[test]
fn out_of_range_labels_are_rejected() {
    let m = model(AblationMode::Full, 1);
    let pts = random_cloud(16, 3, 1).points().to_vec();
    let mut labels = vec![0; 16];
    labels[4] = 3;
    let bad = LabeledPointCloud::new(pts, Some(labels)).unwrap();
    assert!(matches!(m.prepare(&bad), Err(Error::LabelOutOfRange { label: 3, classes: 3 })));

    let mut data = examples(&m, 2, 10);
    data[1].input.labels.as_mut().unwrap()[0] = 7;
    let mut m2 = m.clone();
    assert!(matches!(
        train_segmentation(&mut m2, &data, &train_cfg(1e-3)),
        Err(Error::LabelOutOfRange { label: 7, .. })
    ));
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    for mode in AblationMode::ALL {
        let mut m = model(mode, 3);
        let data = examples(&m, 4, 20);
        train_segmentation(&mut m, &data, &train_cfg(1e-2)).unwrap();

        let bytes = m.to_checkpoint().unwrap().encode();
        let ckpt = CheckpointFile::decode(&bytes).unwrap();
        let obs_sd = m.vae.as_ref().map_or(0.1, |v| v.arch.obs_sd);
        let back = VvNetModel::from_checkpoint(m.config.clone(), &ckpt, obs_sd).unwrap();

        let cloud = random_cloud(16, 3, 99);
        let a = m.forward(&cloud).unwrap();
        let b = back.forward(&cloud).unwrap();
        // Tensors are stored in single precision.
        assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-4), "{mode}");
        assert_eq!(back.to_checkpoint().unwrap().encode(), bytes, "{mode}");
        assert_eq!(back.params().len(), m.params().len());
    }
}

#[test]
fn vae_training_is_deterministic() {
    let blocks = common::uniform(&[64, 8], 0.0, 1.0, 40).into_dimensionality().unwrap();
    let cfg = VaeTrainConfig {
        epochs: 3,
        lr: 1e-3,
        batch_size: 16,
        seed: 2,
    };
    let run = || {
        let mut v = tiny_vae(11);
        let h = train_vae(&mut v, blocks.view(), &cfg).unwrap();
        (v, h)
    };
    let (a, ha) = run();
    let (b, hb) = run();
    assert_eq!(ha, hb);
    assert_eq!(a, b);
    assert_ne!(a, tiny_vae(11));
}
