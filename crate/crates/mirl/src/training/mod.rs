//! Optimization: AdamW with decoupled weight decay, warmup plus cosine or
//! step-decay schedules, moving-average parameter updates, layer-wise
//! learning-rate decay, and the classification loss.

pub mod checkpoint;
mod loops;

pub use loops::{
    class_features, encoder_grad_norm_records, finetune, linear_probe, FinetuneMode,
    FinetuneOutcome, FinetuneSettings, GradNormRecord, InfoNceSettings, Model, ObjectiveMode,
    ObjectiveSettings, PerceptualSettings, Pretrainer, StepMetrics,
};

use crate::diffcore::{ParamStore, Tensor};
use crate::{MirlError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Cosine,
    /// Learning rate drops by 10x at 90% and again at 95% of the run.
    Step,
}

#[derive(Debug, Clone)]
pub struct OptimSpec {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub warmup_epochs: f64,
    pub total_epochs: f64,
    pub steps_per_epoch: usize,
    pub schedule: Schedule,
    pub grad_clip: Option<f64>,
}

impl OptimSpec {
    /// The linear scaling rule: lr = base_lr * batch / 256.
    pub fn effective_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_epochs * self.steps_per_epoch as f64).round() as u64
    }

    pub fn total_steps(&self) -> u64 {
        (self.total_epochs * self.steps_per_epoch as f64).round() as u64
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs > self.total_epochs {
            return Err(MirlError::Config(format!(
                "warmup {} exceeds total {} epochs",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if self.batch_size == 0 || self.steps_per_epoch == 0 {
            return Err(MirlError::Config("batch size and steps per epoch must be positive".into()));
        }
        Ok(())
    }
}

/// Learning rate at a (0-based) step: linear warmup, then the configured
/// decay. Step decay milestones sit exactly at 90% and 95% of the total
/// epoch budget.
pub fn lr_at(spec: &OptimSpec, step: u64) -> f64 {
    let eff = spec.effective_lr();
    let warmup = spec.warmup_steps();
    if step < warmup {
        return eff * step as f64 / warmup as f64;
    }
    match spec.schedule {
        Schedule::Cosine => {
            let total = spec.total_steps();
            if total <= warmup {
                return eff;
            }
            let p = ((step - warmup) as f64 / (total - warmup) as f64).clamp(0.0, 1.0);
            eff * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
        }
        Schedule::Step => {
            let epoch = step as f64 / spec.steps_per_epoch as f64;
            let factor = if epoch >= 0.95 * spec.total_epochs {
                0.01
            } else if epoch >= 0.9 * spec.total_epochs {
                0.1
            } else {
                1.0
            };
            eff * factor
        }
    }
}

/// AdamW with bias-corrected moments and decoupled weight decay. Moment
/// buffers align with the parameter store's insertion order.
pub struct AdamW {
    names: Vec<String>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let names = store.names().map(str::to_string).collect();
        let m = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        let v = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        AdamW { names, m, v, t: 0 }
    }

    /// One update from the gradients accumulated in `store`, with an
    /// optional per-parameter learning-rate multiplier.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        lr: f64,
        spec: &OptimSpec,
        lr_scale: &dyn Fn(&str) -> f64,
    ) -> Result<()> {
        if store.len() != self.names.len() {
            return Err(MirlError::Config(
                "optimizer state does not match the parameter store".into(),
            ));
        }
        self.t += 1;
        let bc1 = 1.0 - spec.beta1.powi(self.t as i32);
        let bc2 = 1.0 - spec.beta2.powi(self.t as i32);
        for (i, p) in store.iter_mut().enumerate() {
            debug_assert_eq!(p.name, self.names[i]);
            let scaled_lr = lr * lr_scale(&p.name);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for ((w, g), (mi, vi)) in p
                .value
                .iter_mut()
                .zip(&p.grad)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = spec.beta1 * *mi + (1.0 - spec.beta1) * g;
                *vi = spec.beta2 * *vi + (1.0 - spec.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= scaled_lr * (m_hat / (v_hat.sqrt() + spec.eps))
                    + scaled_lr * spec.weight_decay * *w;
            }
        }
        Ok(())
    }

    pub fn moment_tensors(&self) -> impl Iterator<Item = (String, &Vec<f64>)> {
        let ms = self
            .names
            .iter()
            .zip(&self.m)
            .map(|(n, m)| (format!("m.{n}"), m));
        let vs = self
            .names
            .iter()
            .zip(&self.v)
            .map(|(n, v)| (format!("v.{n}"), v));
        ms.chain(vs)
    }

    pub fn restore_moments(
        &mut self,
        t: u64,
        tensors: &std::collections::HashMap<String, (Vec<usize>, Vec<f64>)>,
    ) -> Result<()> {
        self.t = t;
        for (i, name) in self.names.iter().enumerate() {
            for (prefix, buf) in [("m", &mut self.m[i]), ("v", &mut self.v[i])] {
                let key = format!("{prefix}.{name}");
                let (_, data) = tensors
                    .get(&key)
                    .ok_or_else(|| MirlError::Checkpoint(format!("missing moment {key}")))?;
                if data.len() != buf.len() {
                    return Err(MirlError::Checkpoint(format!("moment {key} has wrong size")));
                }
                buf.copy_from_slice(data);
            }
        }
        Ok(())
    }
}

/// dst <- keep * dst + (1 - keep) * src, matched by parameter name.
/// Shared by the momentum-encoder update and parameter EMA.
pub fn moving_average_update(src: &ParamStore, dst: &mut ParamStore, keep: f64) -> Result<()> {
    if src.len() != dst.len() {
        return Err(MirlError::Config(
            "moving average requires matching parameter sets".into(),
        ));
    }
    for p in dst.iter_mut() {
        let s = src.get(&p.name)?;
        for (d, s) in p.value.iter_mut().zip(&s.value) {
            *d = keep * *d + (1.0 - keep) * s;
        }
    }
    Ok(())
}

/// Momentum-encoder update with coefficient m.
pub fn momentum_update(online: &ParamStore, momentum: &mut ParamStore, m: f64) -> Result<()> {
    moving_average_update(online, momentum, m)
}

/// Exponential moving average of trained parameters.
pub fn ema_update(params: &ParamStore, ema: &mut ParamStore, decay: f64) -> Result<()> {
    moving_average_update(params, ema, decay)
}

/// Layer-wise learning-rate multiplier: the head trains at full rate, block
/// i of `depth` at decay^(depth - i), and the embedding at decay^(depth+1),
/// a geometric ladder in depth.
pub fn layer_lr_scale(depth: usize, decay: f64) -> impl Fn(&str) -> f64 {
    move |name: &str| {
        if decay == 1.0 {
            return 1.0;
        }
        if let Some(rest) = name.strip_prefix("encoder.block") {
            if let Some(idx) = rest.split('.').next().and_then(|s| s.parse::<usize>().ok()) {
                return decay.powi((depth - idx) as i32);
            }
        }
        if name.starts_with("patch_embed.")
            || name.starts_with("pos_embed")
            || name.starts_with("class_token")
        {
            return decay.powi(depth as i32 + 1);
        }
        // head and final norm train at full rate
        1.0
    }
}

/// Cross entropy with label smoothing over logits [B, K].
pub fn cross_entropy_label_smoothing(
    logits: &Tensor,
    labels: &[usize],
    smoothing: f64,
) -> Result<Tensor> {
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != b {
        return Err(MirlError::Data(format!("{} labels for {b} logits rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(MirlError::Data(format!("label {bad} out of range 0..{k}")));
    }
    let mut q = vec![smoothing / k as f64; b * k];
    for (row, &l) in labels.iter().enumerate() {
        q[row * k + l] += 1.0 - smoothing;
    }
    let logp = logits.log_softmax(1)?;
    let q_tensor = logits.tape().constant(vec![b, k], q)?;
    logp.mul(&q_tensor)?.sum_all()?.scale(-1.0 / b as f64)
}

/// Fraction of rows whose argmax matches the label.
pub fn accuracy(logits: &[f64], classes: usize, labels: &[usize]) -> f64 {
    let rows = labels.len();
    let mut hits = 0usize;
    for (r, &label) in labels.iter().enumerate() {
        let row = &logits[r * classes..(r + 1) * classes];
        let mut best = 0usize;
        for (j, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = j;
            }
        }
        if best == label {
            hits += 1;
        }
    }
    hits as f64 / rows.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(schedule: Schedule) -> OptimSpec {
        OptimSpec {
            base_lr: 1.5e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            batch_size: 256,
            warmup_epochs: 20.0,
            total_epochs: 1000.0,
            steps_per_epoch: 1,
            schedule,
            grad_clip: None,
        }
    }

    #[test]
    fn warmup_starts_at_zero_and_peaks_at_effective_lr() {
        let s = spec(Schedule::Cosine);
        assert_eq!(lr_at(&s, 0), 0.0);
        let peak = lr_at(&s, s.warmup_steps());
        assert!((peak - s.effective_lr()).abs() < 1e-18);
        assert!((s.effective_lr() - 1.5e-4).abs() < 1e-18); // batch 256
        let mut s2 = s.clone();
        s2.batch_size = 512;
        assert!((s2.effective_lr() - 3e-4).abs() < 1e-18);
    }

    #[test]
    fn step_decay_switches_exactly_at_90_and_95_percent() {
        let s = spec(Schedule::Step);
        let eff = s.effective_lr();
        assert!((lr_at(&s, 899) - eff).abs() < 1e-18);
        assert!((lr_at(&s, 900) - 0.1 * eff).abs() < 1e-18);
        assert!((lr_at(&s, 949) - 0.1 * eff).abs() < 1e-18);
        assert!((lr_at(&s, 950) - 0.01 * eff).abs() < 1e-18);
        assert!((lr_at(&s, 999) - 0.01 * eff).abs() < 1e-18);
    }

    #[test]
    fn cosine_reaches_zero_at_the_end() {
        let s = spec(Schedule::Cosine);
        assert!(lr_at(&s, 1000) < 1e-18);
        let mid = lr_at(&s, 510);
        assert!(mid > 0.0 && mid < s.effective_lr());
    }

    fn scalar_store(v: f64) -> ParamStore {
        let mut store = ParamStore::new();
        store.insert("w", vec![1], vec![v]).unwrap();
        store
    }

    #[test]
    fn adamw_zero_gradient_zero_decay_is_a_fixed_point() {
        let mut store = scalar_store(0.7);
        let mut opt = AdamW::new(&store);
        let mut s = spec(Schedule::Cosine);
        s.weight_decay = 0.0;
        opt.step(&mut store, 1e-3, &s, &|_| 1.0).unwrap();
        assert_eq!(store.get("w").unwrap().value[0], 0.7);
    }

    #[test]
    fn adamw_two_step_trace_matches_closed_form() {
        // hand-computed closed form for a single scalar with fixed gradient
        let (b1, b2, eps, wd, lr) = (0.9, 0.95, 1e-8, 0.05, 1e-2);
        let g1 = 0.3;
        let g2 = -0.2;
        let mut w = 0.5f64;
        let mut m = 0.0;
        let mut v = 0.0;
        for (t, g) in [(1, g1), (2, g2)] {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1_pow(b1, t));
            let vh = v / (1.0 - b1_pow(b2, t));
            w -= lr * (mh / (vh.sqrt() + eps)) + lr * wd * w;
        }

        let mut store = scalar_store(0.5);
        let mut opt = AdamW::new(&store);
        let mut s = spec(Schedule::Cosine);
        s.weight_decay = wd;
        s.eps = eps;
        for g in [g1, g2] {
            store.get_mut("w").unwrap().grad[0] = g;
            opt.step(&mut store, lr, &s, &|_| 1.0).unwrap();
        }
        let got = store.get("w").unwrap().value[0];
        assert!((got - w).abs() <= 1e-12, "{got} vs {w}");
    }

    fn b1_pow(b: f64, t: i32) -> f64 {
        b.powi(t)
    }

    #[test]
    fn weight_decay_only_step_shrinks_by_lr_times_decay() {
        let mut store = scalar_store(1.0);
        let mut opt = AdamW::new(&store);
        let s = spec(Schedule::Cosine); // wd = 0.05
        opt.step(&mut store, 1e-2, &s, &|_| 1.0).unwrap();
        let want = 1.0 - 1e-2 * 0.05;
        assert!((store.get("w").unwrap().value[0] - want).abs() < 1e-15);
    }

    #[test]
    fn moving_average_endpoints() {
        let mut src = scalar_store(2.0);
        src.get_mut("w").unwrap().value[0] = 2.0;
        let mut dst = scalar_store(1.0);
        ema_update(&src, &mut dst, 1.0).unwrap();
        assert_eq!(dst.get("w").unwrap().value[0], 1.0); // keep everything
        ema_update(&src, &mut dst, 0.0).unwrap();
        assert_eq!(dst.get("w").unwrap().value[0], 2.0); // copy source

        // two-step closed form at 0.996
        let mut dst = scalar_store(1.0);
        momentum_update(&src, &mut dst, 0.996).unwrap();
        momentum_update(&src, &mut dst, 0.996).unwrap();
        let want = 0.996 * (0.996 * 1.0 + 0.004 * 2.0) + 0.004 * 2.0;
        assert!((dst.get("w").unwrap().value[0] - want).abs() < 1e-15);

        // ema decay 0.9998 single step
        let mut dst = scalar_store(1.0);
        ema_update(&src, &mut dst, 0.9998).unwrap();
        let want = 0.9998 + 0.0002 * 2.0;
        assert!((dst.get("w").unwrap().value[0] - want).abs() < 1e-15);
    }

    #[test]
    fn layer_multipliers_form_a_geometric_ladder() {
        let scale = layer_lr_scale(2, 0.5);
        assert_eq!(scale("head.weight"), 1.0);
        assert_eq!(scale("encoder.norm.gain"), 1.0);
        assert_eq!(scale("encoder.block1.attn.wq.weight"), 0.5);
        assert_eq!(scale("encoder.block0.mlp.fc1.weight"), 0.25);
        assert_eq!(scale("patch_embed.weight"), 0.125);
        assert_eq!(scale("pos_embed"), 0.125);

        let uniform = layer_lr_scale(2, 1.0);
        assert_eq!(uniform("encoder.block0.attn.wq.weight"), 1.0);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_k() {
        let tape = crate::diffcore::Tape::new();
        let logits = tape.constant(vec![2, 4], vec![0.3; 8]).unwrap();
        let loss = cross_entropy_label_smoothing(&logits, &[1, 2], 0.0).unwrap();
        assert!((loss.item() - 4f64.ln()).abs() < 1e-12);
        // label smoothing keeps the loss finite and bounded below by the
        // smoothed entropy
        let loss = cross_entropy_label_smoothing(&logits, &[1, 2], 0.1).unwrap();
        assert!((loss.item() - 4f64.ln()).abs() < 1e-12); // uniform logits again
        assert!(cross_entropy_label_smoothing(&logits, &[1, 9], 0.1).is_err());
    }

    #[test]
    fn accuracy_counts_argmax_hits() {
        let logits = vec![0.1, 0.9, 0.5, 0.2, 0.8, 0.1];
        assert!((accuracy(&logits, 3, &[1, 1]) - 1.0).abs() < 1e-15);
        assert!((accuracy(&logits, 3, &[1, 0]) - 0.5).abs() < 1e-15);
    }
}
