use super::tensor::Parameter;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam update. Parameters without a gradient are skipped.
pub fn adam_step<'a>(params: impl IntoIterator<Item = &'a mut Parameter>, cfg: &AdamConfig) {
    for p in params {
        let Some(grad) = p.tensor.grad.as_ref() else {
            continue;
        };
        p.step += 1;
        let t = p.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let value = &mut p.tensor.value;
        ndarray::Zip::from(value)
            .and(&mut p.m)
            .and(&mut p.v)
            .and(grad)
            .for_each(|w, m, v, &g| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, ArrayD};

    fn param(v: &[f64]) -> Parameter {
        Parameter::new("p", arr1(v).into_dyn())
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = param(&[1.0, -2.0]);
        for _ in 0..5 {
            p.tensor.grad = Some(ArrayD::zeros(p.value().raw_dim()));
            adam_step([&mut p], &AdamConfig::default());
        }
        assert_eq!(p.value(), &arr1(&[1.0, -2.0]).into_dyn());
        assert_eq!(p.step(), 5);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let cfg = AdamConfig::with_lr(0.01);
        let g = [0.5, -3.0, 1e-3];
        let mut p = param(&[0.0, 0.0, 0.0]);
        p.tensor.grad = Some(arr1(&g).into_dyn());
        adam_step([&mut p], &cfg);
        // m_hat = g and v_hat = g^2 after bias correction.
        for (w, g) in p.value().iter().zip(g) {
            let want = -cfg.lr * g / (g.abs() + cfg.eps);
            assert!((w - want).abs() < 1e-15, "{w} vs {want}");
        }
    }

    #[test]
    fn constant_gradient_steps_approach_lr() {
        let cfg = AdamConfig::with_lr(0.1);
        let mut p = param(&[0.0, 0.0]);
        let mut prev = p.value().clone();
        for _ in 0..200 {
            p.tensor.grad = Some(arr1(&[2.0, -0.25]).into_dyn());
            adam_step([&mut p], &cfg);
            let step = p.value() - &prev;
            prev = p.value().clone();
            assert!((step[0] + 0.1).abs() < 1e-6);
            assert!((step[1] - 0.1).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut p = param(&[3.0]);
        p.tensor.grad = Some(arr1(&[7.0]).into_dyn());
        adam_step([&mut p], &AdamConfig::with_lr(0.0));
        assert_eq!(p.value()[0], 3.0);
    }

    #[test]
    fn missing_gradient_skips() {
        let mut p = param(&[3.0]);
        adam_step([&mut p], &AdamConfig::default());
        assert_eq!(p.step(), 0);
    }
}
