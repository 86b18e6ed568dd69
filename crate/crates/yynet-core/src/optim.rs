//! Training recipe: AdamW with decoupled weight decay, global-norm (or
//! value) gradient clipping, the one-cycle cosine learning-rate schedule,
//! an exponential moving average of the weights that activates a quarter of
//! the way into training, and the learning-rate-coupled weight decay rule.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One-cycle schedule shape parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OneCycle {
    /// Fraction of total steps spent warming up to max_lr.
    pub pct_start: f64,
    /// Initial lr = max_lr / div_factor.
    pub div_factor: f64,
    /// Final lr = max_lr / final_div_factor.
    pub final_div_factor: f64,
}

impl Default for OneCycle {
    fn default() -> Self {
        OneCycle { pct_start: 0.3, div_factor: 25.0, final_div_factor: 1e4 }
    }
}

/// How "gradient clip of 1" is interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    /// Scale all gradients so the global L2 norm is at most the threshold.
    GlobalNorm,
    /// Clamp each element to [-threshold, threshold].
    Value,
}

/// Full training configuration with the published CIFAR-10 defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub clip_mode: ClipMode,
    pub ema_start_fraction: f64,
    pub ema_avg_coeff: f64,
    pub ema_cur_coeff: f64,
    /// Evaluate the EMA shadow weights (once active) instead of the live ones.
    pub ema_eval_shadow: bool,
    pub wd_lr_multiplier: f64,
    pub seed: u64,
    pub onecycle: OneCycle,
    /// Random flip + 4-pixel reflect-pad crop on the training split.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_lr: 1e-2,
            epochs: 40,
            batch_size: 64,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            clip_mode: ClipMode::GlobalNorm,
            ema_start_fraction: 0.25,
            ema_avg_coeff: 0.1,
            ema_cur_coeff: 0.9,
            ema_eval_shadow: true,
            wd_lr_multiplier: 1.56,
            seed: 0,
            onecycle: OneCycle::default(),
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if self.max_lr <= 0.0 {
            return Err(Error::config("max_lr must be positive"));
        }
        if self.clip_norm <= 0.0 {
            return Err(Error::config("clip_norm must be positive"));
        }
        if (self.ema_avg_coeff + self.ema_cur_coeff - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!(
                "ema coefficients must sum to 1, got {} + {}",
                self.ema_avg_coeff, self.ema_cur_coeff
            )));
        }
        if !(0.0..=1.0).contains(&self.ema_start_fraction) {
            return Err(Error::config("ema_start_fraction must be in [0,1]"));
        }
        if !(0.0 < self.onecycle.pct_start && self.onecycle.pct_start < 1.0) {
            return Err(Error::config("onecycle pct_start must be in (0,1)"));
        }
        if self.onecycle.div_factor < 1.0 || self.onecycle.final_div_factor < 1.0 {
            return Err(Error::config("onecycle div factors must be >= 1"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

/// AdamW over a fixed parameter list. Moment arrays live here; the
/// parameters themselves are shared-storage tensors owned by the model.
pub struct AdamW<E: Scalar> {
    pub params: Vec<Tensor<E>>,
    pub m: Vec<Vec<E>>,
    pub v: Vec<Vec<E>>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<E: Scalar> AdamW<E> {
    pub fn new(params: Vec<Tensor<E>>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let m = params.iter().map(|p| vec![E::ZERO; p.len()]).collect();
        let v = params.iter().map(|p| vec![E::ZERO; p.len()]).collect();
        AdamW { params, m, v, step_count: 0, beta1, beta2, eps }
    }

    /// One decoupled update: `p -= lr * m_hat / (sqrt(v_hat) + eps) + lr * wd * p`.
    /// Parameters whose gradient is unset are skipped.
    pub fn step(&mut self, lr: f64, wd: f64) -> Result<()> {
        // Divergence check first so no parameter is half-updated.
        for p in &self.params {
            if let Some(g) = p.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::diverged("non-finite gradient encountered"));
                }
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let b1 = E::from_f64(self.beta1);
        let b2 = E::from_f64(self.beta2);
        let bc1 = E::from_f64(1.0 - libm::pow(self.beta1, t as f64));
        let bc2 = E::from_f64(1.0 - libm::pow(self.beta2, t as f64));
        let lr_e = E::from_f64(lr);
        let wd_e = E::from_f64(wd);
        let eps = E::from_f64(self.eps);
        for (i, p) in self.params.iter().enumerate() {
            let Some(g) = p.grad() else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            p.with_data_mut(|theta| {
                for j in 0..theta.len() {
                    m[j] = b1 * m[j] + (E::ONE - b1) * g[j];
                    v[j] = b2 * v[j] + (E::ONE - b2) * g[j] * g[j];
                    let m_hat = m[j] / bc1;
                    let v_hat = v[j] / bc2;
                    theta[j] -= lr_e * m_hat / (v_hat.sqrt() + eps) + lr_e * wd_e * theta[j];
                }
            });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Gradient clipping
// ---------------------------------------------------------------------------

/// Clip gradients in place. Returns the pre-clip global L2 norm (for
/// logging; `Value` mode also reports it).
pub fn clip_gradients<E: Scalar>(params: &[Tensor<E>], threshold: f64, mode: ClipMode) -> f64 {
    let mut sq = 0.0f64;
    for p in params {
        if let Some(g) = p.grad() {
            for v in g {
                let v = v.to_f64();
                sq += v * v;
            }
        }
    }
    let norm = libm::sqrt(sq);
    match mode {
        ClipMode::GlobalNorm => {
            if norm > threshold {
                let scale = E::from_f64(threshold / norm);
                for p in params {
                    p.with_grad_mut(|g| {
                        for v in g {
                            *v *= scale;
                        }
                    });
                }
            }
        }
        ClipMode::Value => {
            let hi = E::from_f64(threshold);
            let lo = E::from_f64(-threshold);
            for p in params {
                p.with_grad_mut(|g| {
                    for v in g {
                        if *v > hi {
                            *v = hi;
                        } else if *v < lo {
                            *v = lo;
                        }
                    }
                });
            }
        }
    }
    norm
}

// ---------------------------------------------------------------------------
// One-cycle schedule
// ---------------------------------------------------------------------------

fn cosine_interp(from: f64, to: f64, t: f64) -> f64 {
    to + (from - to) * (1.0 + libm::cos(core::f64::consts::PI * t)) / 2.0
}

/// Learning rate at a given step: cosine warmup from `max_lr/div_factor`
/// to `max_lr` over the first `pct_start` of the run, then cosine anneal
/// down to `max_lr/final_div_factor` by the last step.
pub fn onecycle_lr(step: usize, total_steps: usize, max_lr: f64, oc: &OneCycle) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::state(format!(
            "schedule queried at step {step} of {total_steps}"
        )));
    }
    let boundary = oc.pct_start * total_steps as f64;
    let s = step as f64;
    Ok(if s <= boundary {
        // t runs 1 -> 0 so cos interpolation rises to max_lr.
        let t = if boundary > 0.0 { 1.0 - s / boundary } else { 0.0 };
        cosine_interp(max_lr / oc.div_factor, max_lr, 1.0 - t)
    } else {
        let span = (total_steps - 1) as f64 - boundary;
        let t = if span > 0.0 { ((s - boundary) / span).min(1.0) } else { 1.0 };
        cosine_interp(max_lr, max_lr / oc.final_div_factor, t)
    })
}

/// Weight decay for the next epoch, coupled to the epoch-end lr.
pub fn couple_weight_decay(multiplier: f64, lr: f64) -> f64 {
    multiplier * lr
}

// ---------------------------------------------------------------------------
// Weight EMA
// ---------------------------------------------------------------------------

/// Exponential moving average of the parameters, inactive until
/// `floor(start_fraction * total_steps)`. At activation the shadow copies
/// the live weights; each later step blends
/// `shadow = avg_coeff * shadow + cur_coeff * current`.
pub struct Ema<E: Scalar> {
    pub shadow: Option<Vec<Vec<E>>>,
    pub update_count: u64,
    pub avg_coeff: f64,
    pub cur_coeff: f64,
}

impl<E: Scalar> Ema<E> {
    pub fn new(avg_coeff: f64, cur_coeff: f64) -> Self {
        Ema { shadow: None, update_count: 0, avg_coeff, cur_coeff }
    }

    pub fn active(&self) -> bool {
        self.shadow.is_some()
    }

    pub fn activation_step(start_fraction: f64, total_steps: usize) -> usize {
        (start_fraction * total_steps as f64) as usize
    }

    /// Called once per optimizer step with the 0-based step index.
    pub fn update(
        &mut self,
        params: &[Tensor<E>],
        step: usize,
        total_steps: usize,
        start_fraction: f64,
    ) {
        if step < Self::activation_step(start_fraction, total_steps) {
            return;
        }
        self.update_count += 1;
        match &mut self.shadow {
            None => {
                self.shadow = Some(params.iter().map(|p| p.to_vec()).collect());
            }
            Some(shadow) => {
                let a = E::from_f64(self.avg_coeff);
                let c = E::from_f64(self.cur_coeff);
                for (s, p) in shadow.iter_mut().zip(params) {
                    let cur = p.data();
                    for (sv, &cv) in s.iter_mut().zip(cur.iter()) {
                        *sv = a * *sv + c * cv;
                    }
                }
            }
        }
    }

    /// Swap shadow weights into the live parameters, returning the saved
    /// live values so they can be restored after evaluation.
    pub fn swap_in(&self, params: &[Tensor<E>]) -> Option<Vec<Vec<E>>> {
        let shadow = self.shadow.as_ref()?;
        let saved: Vec<Vec<E>> = params.iter().map(|p| p.to_vec()).collect();
        for (p, s) in params.iter().zip(shadow) {
            p.set_data(s);
        }
        Some(saved)
    }

    pub fn restore(params: &[Tensor<E>], saved: Vec<Vec<E>>) {
        for (p, s) in params.iter().zip(saved) {
            p.set_data(&s);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(vals: &[f64]) -> Tensor<f64> {
        Tensor::new(&[vals.len()], vals.to_vec()).unwrap().requires_grad(true)
    }

    fn set_grad(p: &Tensor<f64>, g: &[f64]) {
        // Route through the tape-free accumulation path: seed then overwrite.
        p.zero_grad();
        p.seed_grad(g);
    }

    #[test]
    fn adamw_single_step_oracle() {
        let p = param(&[1.0]);
        set_grad(&p, &[1.0]);
        let mut opt = AdamW::new(vec![p.clone()], 0.9, 0.999, 1e-8);
        opt.step(0.1, 0.01).unwrap();
        let expect = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8)) - 0.1 * 0.01 * 1.0;
        assert!((p.to_vec()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn adamw_zero_grad_behaviour() {
        let p = param(&[2.0]);
        set_grad(&p, &[0.0]);
        let mut opt = AdamW::new(vec![p.clone()], 0.9, 0.999, 1e-8);
        opt.step(0.1, 0.0).unwrap();
        assert_eq!(p.to_vec()[0], 2.0);
        // Decoupled decay alone shrinks by exactly lr*wd*theta.
        let p2 = param(&[2.0]);
        set_grad(&p2, &[0.0]);
        let mut opt2 = AdamW::new(vec![p2.clone()], 0.9, 0.999, 1e-8);
        opt2.step(0.1, 0.5).unwrap();
        assert!((p2.to_vec()[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn adamw_matches_scalar_recurrence_100_steps() {
        let p = param(&[0.5]);
        let mut opt = AdamW::new(vec![p.clone()], 0.9, 0.999, 1e-8);
        // Independent scalar reference, written straight from the update rule.
        let (mut theta, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for t in 1..=100 {
            let g = libm::sin(t as f64); // deterministic, sign-varying
            set_grad(&p, &[g]);
            opt.step(0.003, 0.02).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - libm::pow(0.9, t as f64));
            let vh = v / (1.0 - libm::pow(0.999, t as f64));
            theta -= 0.003 * mh / (libm::sqrt(vh) + 1e-8) + 0.003 * 0.02 * theta;
            let got = p.to_vec()[0];
            assert!(
                ((got - theta) / theta.abs().max(1e-12)).abs() < 1e-12,
                "step {t}: {got} vs {theta}"
            );
        }
    }

    #[test]
    fn adamw_nan_grad_diverges() {
        let p = param(&[1.0]);
        set_grad(&p, &[f64::NAN]);
        let mut opt = AdamW::new(vec![p.clone()], 0.9, 0.999, 1e-8);
        assert!(matches!(
            opt.step(0.1, 0.0),
            Err(crate::Error::TrainingDiverged(_))
        ));
        // Parameter untouched.
        assert_eq!(p.to_vec()[0], 1.0);
    }

    #[test]
    fn clip_three_four_five() {
        let p = param(&[0.0, 0.0]);
        set_grad(&p, &[3.0, 4.0]);
        let norm = clip_gradients(&[p.clone()], 1.0, ClipMode::GlobalNorm);
        assert!((norm - 5.0).abs() < 1e-12);
        let g = p.grad().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn clip_under_threshold_identity() {
        let p = param(&[0.3, 0.4]);
        set_grad(&p, &[0.3, 0.4]);
        clip_gradients(&[p.clone()], 1.0, ClipMode::GlobalNorm);
        assert_eq!(p.grad().unwrap(), vec![0.3, 0.4]);
    }

    #[test]
    fn clip_post_norm_bounded() {
        let mut r = crate::rng::seeded(5);
        for _ in 0..10 {
            let g: alloc::vec::Vec<f64> =
                (0..32).map(|_| crate::rng::normal(&mut r) * 3.0).collect();
            let p = param(&vec![0.0; 32]);
            set_grad(&p, &g);
            let pre = clip_gradients(&[p.clone()], 1.0, ClipMode::GlobalNorm);
            let post = libm::sqrt(p.grad().unwrap().iter().map(|v| v * v).sum::<f64>());
            assert!(post <= 1.0 + 1e-6);
            assert!((post - pre.min(1.0)).abs() < 1e-6);
        }
    }

    #[test]
    fn clip_value_mode() {
        let p = param(&[0.0, 0.0, 0.0]);
        set_grad(&p, &[2.0, -3.0, 0.5]);
        clip_gradients(&[p.clone()], 1.0, ClipMode::Value);
        assert_eq!(p.grad().unwrap(), vec![1.0, -1.0, 0.5]);
    }

    #[test]
    fn onecycle_endpoints_and_continuity() {
        let oc = OneCycle::default();
        let total = 1000;
        let lr0 = onecycle_lr(0, total, 1e-2, &oc).unwrap();
        assert!((lr0 - 4e-4).abs() < 1e-12);
        let peak = onecycle_lr(300, total, 1e-2, &oc).unwrap();
        assert!((peak - 1e-2).abs() < 1e-12);
        let last = onecycle_lr(total - 1, total, 1e-2, &oc).unwrap();
        assert!((last - 1e-6).abs() < 1e-9);
        // Continuity: successive steps differ by less than max_lr*pi/phase.
        let bound = 1e-2 * core::f64::consts::PI / 300.0;
        for s in 0..total - 1 {
            let a = onecycle_lr(s, total, 1e-2, &oc).unwrap();
            let b = onecycle_lr(s + 1, total, 1e-2, &oc).unwrap();
            assert!((a - b).abs() <= bound, "jump at {s}");
        }
        assert!(matches!(
            onecycle_lr(total, total, 1e-2, &oc),
            Err(crate::Error::State(_))
        ));
    }

    #[test]
    fn ema_recurrence_and_activation() {
        let p = param(&[2.0]);
        let mut ema = Ema::new(0.1, 0.9);
        let total = 100;
        // Before 25%: inactive.
        ema.update(&[p.clone()], 10, total, 0.25);
        assert!(!ema.active());
        // Activation at step 25: shadow copies current.
        ema.update(&[p.clone()], 25, total, 0.25);
        assert_eq!(ema.shadow.as_ref().unwrap()[0][0], 2.0);
        // Blend: shadow=2, current=1 -> 1.1.
        p.set_data(&[1.0]);
        ema.update(&[p.clone()], 26, total, 0.25);
        assert!((ema.shadow.as_ref().unwrap()[0][0] - 1.1).abs() < 1e-12);
        // Constant current converges geometrically with ratio 0.1.
        for s in 27..40 {
            ema.update(&[p.clone()], s, total, 0.25);
        }
        assert!((ema.shadow.as_ref().unwrap()[0][0] - 1.0).abs() < 0.1f64.powi(12));
    }

    #[test]
    fn ema_update_count_property() {
        let p = param(&[1.0]);
        let mut ema = Ema::new(0.1, 0.9);
        let total = 103;
        for s in 0..total {
            ema.update(&[p.clone()], s, total, 0.25);
        }
        assert_eq!(ema.update_count as usize, total - (total as f64 * 0.25) as usize);
    }

    #[test]
    fn ema_swap_roundtrip() {
        let p = param(&[5.0]);
        let mut ema = Ema::new(0.1, 0.9);
        ema.update(&[p.clone()], 0, 1, 0.0); // immediate activation
        p.set_data(&[7.0]);
        let saved = ema.swap_in(&[p.clone()]).unwrap();
        assert_eq!(p.to_vec()[0], 5.0);
        Ema::restore(&[p.clone()], saved);
        assert_eq!(p.to_vec()[0], 7.0);
    }

    #[test]
    fn wd_coupling() {
        assert!((couple_weight_decay(1.56, 1e-2) - 1.56e-2).abs() < 1e-15);
        assert_eq!(couple_weight_decay(1.56, 0.0), 0.0);
    }

    #[test]
    fn train_config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let mut c = TrainConfig::default();
        c.ema_avg_coeff = 0.2;
        assert!(matches!(c.validate(), Err(crate::Error::Config(_))));
        let mut c = TrainConfig::default();
        c.clip_norm = 0.0;
        assert!(matches!(c.validate(), Err(crate::Error::Config(_))));
    }
}
