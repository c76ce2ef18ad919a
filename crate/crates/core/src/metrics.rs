//! Segmentation metrics.
//!
//! A part whose ground-truth and predicted point sets are both empty has IoU 1.
//! Category mIoU is the mean of instance mIoU over the category's instances.

use std::collections::BTreeMap;
use std::fmt;

use num_rational::Ratio;

use crate::error::{Error, Result};

fn check_lengths(gt: &[u32], pred: &[u32]) -> Result<()> {
    if gt.len() != pred.len() {
        return Err(Error::Shape(format!(
            "{} ground-truth labels vs {} predictions",
            gt.len(),
            pred.len()
        )));
    }
    Ok(())
}

/// Exact IoU of one part.
pub fn part_iou_exact(gt: &[u32], pred: &[u32], part: u32) -> Result<Ratio<u64>> {
    check_lengths(gt, pred)?;
    let (mut inter, mut union) = (0u64, 0u64);
    for (&g, &p) in gt.iter().zip(pred) {
        let (a, b) = (g == part, p == part);
        inter += (a && b) as u64;
        union += (a || b) as u64;
    }
    Ok(if union == 0 {
        Ratio::from_integer(1)
    } else {
        Ratio::new(inter, union)
    })
}

pub fn part_iou(gt: &[u32], pred: &[u32], part: u32) -> Result<f64> {
    part_iou_exact(gt, pred, part).map(to_f64)
}

/// Exact mean of [`part_iou_exact`] over `parts`.
pub fn instance_miou_exact(gt: &[u32], pred: &[u32], parts: &[u32]) -> Result<Ratio<u64>> {
    if parts.is_empty() {
        return Err(Error::InvalidArgument("instance has no parts".into()));
    }
    let mut sum = Ratio::from_integer(0u64);
    for &p in parts {
        sum += part_iou_exact(gt, pred, p)?;
    }
    Ok(sum / parts.len() as u64)
}

pub fn instance_miou(gt: &[u32], pred: &[u32], parts: &[u32]) -> Result<f64> {
    instance_miou_exact(gt, pred, parts).map(to_f64)
}

pub fn overall_accuracy(gt: &[u32], pred: &[u32]) -> Result<f64> {
    check_lengths(gt, pred)?;
    if gt.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let hits = gt.iter().zip(pred).filter(|(g, p)| g == p).count();
    Ok(hits as f64 / gt.len() as f64)
}

fn to_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Ground truth and prediction for one evaluated cloud.
#[derive(Clone, Debug)]
pub struct EvalSample<'a> {
    pub category: &'a str,
    pub parts: &'a [u32],
    pub gt: &'a [u32],
    pub pred: &'a [u32],
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    /// Mean IoU of each part over the instances whose category has it.
    pub per_part_iou: BTreeMap<u32, f64>,
    /// Mean instance mIoU over all instances.
    pub instance_miou: f64,
    pub category_miou: BTreeMap<String, f64>,
    /// Pooled over every point of every instance.
    pub overall_accuracy: f64,
}

impl EvalReport {
    pub fn evaluate(samples: &[EvalSample<'_>]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut part_sums: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
        let mut cat_sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        let (mut inst_sum, mut hits, mut total) = (0.0, 0usize, 0usize);
        for s in samples {
            check_lengths(s.gt, s.pred)?;
            for &p in s.parts {
                let e = part_sums.entry(p).or_default();
                e.0 += part_iou(s.gt, s.pred, p)?;
                e.1 += 1;
            }
            let m = instance_miou(s.gt, s.pred, s.parts)?;
            inst_sum += m;
            let e = cat_sums.entry(s.category.to_string()).or_default();
            e.0 += m;
            e.1 += 1;
            hits += s.gt.iter().zip(s.pred).filter(|(g, p)| g == p).count();
            total += s.gt.len();
        }
        let mean = |(s, c): (f64, usize)| s / c as f64;
        Ok(EvalReport {
            per_part_iou: part_sums.into_iter().map(|(k, v)| (k, mean(v))).collect(),
            instance_miou: inst_sum / samples.len() as f64,
            category_miou: cat_sums.into_iter().map(|(k, v)| (k, mean(v))).collect(),
            overall_accuracy: if total == 0 { 0.0 } else { hits as f64 / total as f64 },
        })
    }

    /// Mean of the per-category values.
    pub fn class_miou(&self) -> f64 {
        if self.category_miou.is_empty() {
            return 0.0;
        }
        self.category_miou.values().sum::<f64>() / self.category_miou.len() as f64
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "overall_accuracy\t{:.6}", self.overall_accuracy)?;
        writeln!(f, "instance_miou\t{:.6}", self.instance_miou)?;
        for (c, v) in &self.category_miou {
            writeln!(f, "category_miou\t{c}\t{v:.6}")?;
        }
        for (p, v) in &self.per_part_iou {
            writeln!(f, "part_iou\t{p}\t{v:.6}")?;
        }
        Ok(())
    }
}
