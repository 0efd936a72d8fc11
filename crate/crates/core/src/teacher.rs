//! Mean-teacher coupling: EMA weight updates, Monte-Carlo-dropout
//! uncertainty estimation, and the ramping uncertainty threshold.

use crate::array::Array;
use crate::error::{Error, Result};
use crate::model::{ForwardMode, SegModel, NUM_STAGES};
use crate::rng::Rng64;
use crate::scalar::Scalar;
use crate::tensor::Tape;

/// EMA interpolation state; `alpha` is fixed for a whole run.
#[derive(Clone, Copy, Debug)]
pub struct EmaState {
    pub alpha: f64,
    pub step: u64,
}

impl EmaState {
    pub fn new(alpha: f64) -> Self {
        EmaState { alpha, step: 0 }
    }
}

/// teacher <- alpha * teacher + (1 - alpha) * student, elementwise over the
/// index-aligned parameter lists. The teacher never sees the tape, so it
/// never carries gradients.
pub fn ema_update<F: Scalar>(
    teacher: &mut SegModel<F>,
    student: &SegModel<F>,
    state: &mut EmaState,
) -> Result<()> {
    let mut student_params: Vec<&Array<F>> = Vec::new();
    student.visit_params(|_, _, a| student_params.push(a));
    let mut idx = 0usize;
    let mut mismatch = None;
    let alpha = F::c(state.alpha);
    let one_minus = F::one() - alpha;
    teacher.visit_params_mut(|name, _, t| {
        if mismatch.is_some() {
            return;
        }
        match student_params.get(idx) {
            Some(s) if s.shape == t.shape => {
                for (tv, sv) in t.data.iter_mut().zip(&s.data) {
                    *tv = alpha * *tv + one_minus * *sv;
                }
            }
            _ => mismatch = Some(name),
        }
        idx += 1;
    });
    if let Some(name) = mismatch {
        return Err(Error::Config(format!(
            "ema_update: parameter mismatch at {name}"
        )));
    }
    if idx != student_params.len() {
        return Err(Error::Config(format!(
            "ema_update: parameter count mismatch ({} teacher vs {} student)",
            idx,
            student_params.len()
        )));
    }
    state.step += 1;
    Ok(())
}

/// Per-pixel predictive entropy of the teacher under MC dropout, plus its
/// average-pooled pyramid at the four stage resolutions.
#[derive(Clone, Debug)]
pub struct UncertaintyField<F> {
    /// MC-mean class probabilities, `[N, K, H, W]`.
    pub mean_probs: Array<F>,
    /// Entropy in nats, `[N, H, W]`; bounded by ln K.
    pub entropy: Array<F>,
    /// Entropy downsampled to each stage resolution, `[N, H/2^i, W/2^i]`.
    pub pyramid: [Array<F>; NUM_STAGES],
}

/// Mean softmax probabilities over `t_passes` stochastic forwards. Each
/// pass consumes its own pre-split rng stream and accumulation order is
/// fixed, so the result is reproducible.
pub fn mc_mean_probs<F: Scalar>(
    teacher: &SegModel<F>,
    x_weak: &Array<F>,
    t_passes: usize,
    rng: &mut Rng64,
) -> Result<Array<F>> {
    if t_passes < 2 {
        return Err(Error::Config(format!(
            "mc_mean_probs: need at least 2 passes, got {t_passes}"
        )));
    }
    let mut acc: Option<Array<F>> = None;
    for pass in 0..t_passes {
        let mut pass_rng = rng.derive(pass as u64 + 1);
        let mut tape = Tape::<F>::no_grad();
        let binding = teacher.bind(&mut tape, false)?;
        let x = tape.from_array(x_weak, false)?;
        let out = teacher.forward(&mut tape, &binding, x, ForwardMode::McSample, &mut pass_rng)?;
        let probs = tape.softmax_channels(out.logits)?;
        let p = tape.to_array(probs);
        acc = Some(match acc {
            None => p,
            Some(mut a) => {
                for (av, pv) in a.data.iter_mut().zip(&p.data) {
                    *av += *pv;
                }
                a
            }
        });
    }
    let mut mean = acc.expect("at least two passes");
    let inv = F::one() / F::c(t_passes as f64);
    for v in mean.data.iter_mut() {
        *v *= inv;
    }
    Ok(mean)
}

/// Entropy of the class distribution at every pixel: -sum_k p_k ln p_k,
/// with 0 ln 0 read as 0.
pub fn predictive_entropy<F: Scalar>(mean_probs: &Array<F>) -> Array<F> {
    let (n, k, h, w) = (
        mean_probs.shape[0],
        mean_probs.shape[1],
        mean_probs.shape[2],
        mean_probs.shape[3],
    );
    let hw = h * w;
    let mut out = Array::<F>::zeros(&[n, h, w]);
    for ni in 0..n {
        for p in 0..hw {
            let mut u = F::zero();
            for ki in 0..k {
                let pk = mean_probs.data[(ni * k + ki) * hw + p];
                if pk > F::zero() {
                    u -= pk * pk.ln();
                }
            }
            out.data[ni * hw + p] = u;
        }
    }
    out
}

/// 2x2 average pooling of a `[N, h, w]` map.
pub fn avg_pool_map<F: Scalar>(map: &Array<F>) -> Array<F> {
    let (n, h, w) = (map.shape[0], map.shape[1], map.shape[2]);
    let (oh, ow) = (h / 2, w / 2);
    let quarter = F::c(0.25);
    let mut out = Array::<F>::zeros(&[n, oh, ow]);
    for ni in 0..n {
        for y in 0..oh {
            for x in 0..ow {
                let i = (ni * h + 2 * y) * w + 2 * x;
                out.data[(ni * oh + y) * ow + x] =
                    (map.data[i] + map.data[i + 1] + map.data[i + w] + map.data[i + w + 1])
                        * quarter;
            }
        }
    }
    out
}

/// Chain of 2x2 average pools down to each stage resolution.
pub fn entropy_pyramid<F: Scalar>(entropy: &Array<F>) -> [Array<F>; NUM_STAGES] {
    let l1 = avg_pool_map(entropy);
    let l2 = avg_pool_map(&l1);
    let l3 = avg_pool_map(&l2);
    let l4 = avg_pool_map(&l3);
    [l1, l2, l3, l4]
}

/// T stochastic teacher passes on a weakly augmented batch.
pub fn estimate_uncertainty<F: Scalar>(
    teacher: &SegModel<F>,
    x_weak: &Array<F>,
    t_passes: usize,
    rng: &mut Rng64,
) -> Result<UncertaintyField<F>> {
    let mean_probs = mc_mean_probs(teacher, x_weak, t_passes, rng)?;
    let entropy = predictive_entropy(&mean_probs);
    let pyramid = entropy_pyramid(&entropy);
    Ok(UncertaintyField {
        mean_probs,
        entropy,
        pyramid,
    })
}

/// Fraction of map entries strictly below the threshold.
pub fn mask_pass_fraction<F: Scalar>(map: &Array<F>, threshold: F) -> f64 {
    let pass = map.data.iter().filter(|&&u| u < threshold).count();
    pass as f64 / map.numel() as f64
}

/// Gaussian ramp of the uncertainty threshold from h_max/2 to h_max.
#[derive(Clone, Copy, Debug)]
pub struct ThresholdSchedule {
    pub h_max: f64,
    pub total_steps: u64,
}

impl ThresholdSchedule {
    pub fn new(h_max: f64, total_steps: u64) -> Self {
        ThresholdSchedule { h_max, total_steps }
    }

    /// H(t) = h_max * (1/2 + 1/2 * exp(-5 (1 - t/T)^2)); steps outside
    /// [0, T] clamp to the range.
    pub fn threshold_at(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return self.h_max;
        }
        let t = step.min(self.total_steps) as f64 / self.total_steps as f64;
        self.h_max * (0.5 + 0.5 * (-5.0 * (1.0 - t) * (1.0 - t)).exp())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::StageSpec;

    fn model(seed: u64) -> SegModel<f32> {
        SegModel::new(StageSpec::default(), 0.1, seed)
    }

    fn first_param(m: &SegModel<f32>) -> Vec<f32> {
        let mut out = Vec::new();
        let mut taken = false;
        m.visit_params(|_, _, a| {
            if !taken {
                out = a.data.clone();
                taken = true;
            }
        });
        out
    }

    #[test]
    fn ema_alpha_one_keeps_teacher() {
        let mut teacher = model(1);
        let student = model(2);
        let before = first_param(&teacher);
        let mut st = EmaState::new(1.0);
        ema_update(&mut teacher, &student, &mut st).unwrap();
        assert_eq!(first_param(&teacher), before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn ema_alpha_zero_copies_student() {
        let mut teacher = model(1);
        let student = model(2);
        let mut st = EmaState::new(0.0);
        ema_update(&mut teacher, &student, &mut st).unwrap();
        assert_eq!(first_param(&teacher), first_param(&student));
    }

    #[test]
    fn ema_direct_value() {
        let mut teacher = model(1);
        let student = model(2);
        teacher.visit_params_mut(|_, _, a| a.data.fill(1.0));
        let mut s2 = student;
        s2.visit_params_mut(|_, _, a| a.data.fill(0.0));
        let mut st = EmaState::new(0.99);
        ema_update(&mut teacher, &s2, &mut st).unwrap();
        for v in first_param(&teacher) {
            assert!((v - 0.99).abs() < 1e-7);
        }
    }

    #[test]
    fn ema_rejects_mismatched_models() {
        let mut teacher = model(1);
        let spec = StageSpec { channels: [8, 16, 32, 64], ..StageSpec::default() };
        let student = SegModel::<f32>::new(spec, 0.1, 2);
        let mut st = EmaState::new(0.99);
        assert!(ema_update(&mut teacher, &student, &mut st).is_err());
    }

    #[test]
    fn teacher_stays_in_convex_hull() {
        let mut teacher = model(3);
        let mut lo = first_param(&teacher);
        let mut hi = lo.clone();
        let mut st = EmaState::new(0.9);
        let mut rng = Rng64::seed_from(4);
        for i in 0..12 {
            let student = model(100 + i);
            let sp = first_param(&student);
            for ((l, h), s) in lo.iter_mut().zip(hi.iter_mut()).zip(&sp) {
                *l = l.min(*s);
                *h = h.max(*s);
            }
            st.alpha = rng.unit_f64();
            ema_update(&mut teacher, &student, &mut st).unwrap();
            for ((&v, &l), &h) in first_param(&teacher).iter().zip(&lo).zip(&hi) {
                assert!(v >= l - 1e-6 && v <= h + 1e-6);
            }
        }
    }

    #[test]
    fn entropy_oracle_points() {
        // One-hot: zero entropy.
        let p = Array::from_vec(&[1, 2, 1, 1], vec![1.0f64, 0.0]).unwrap();
        assert_eq!(predictive_entropy(&p).data[0], 0.0);
        // Uniform over two classes: ln 2.
        let p = Array::from_vec(&[1, 2, 1, 1], vec![0.5f64, 0.5]).unwrap();
        assert!((predictive_entropy(&p).data[0] - 2.0f64.ln()).abs() < 1e-12);
        // (0.75, 0.25).
        let p = Array::from_vec(&[1, 2, 1, 1], vec![0.75f64, 0.25]).unwrap();
        let expect = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        assert!((predictive_entropy(&p).data[0] - expect).abs() < 1e-12);
        assert!((expect - 0.5623).abs() < 1e-4);
    }

    #[test]
    fn mc_requires_two_passes() {
        let m = model(5);
        let x = Array::<f32>::zeros(&[1, 3, 16, 16]);
        let mut rng = Rng64::seed_from(6);
        assert!(mc_mean_probs(&m, &x, 1, &mut rng).is_err());
    }

    #[test]
    fn uncertainty_bounds_hold_everywhere() {
        let m = model(7);
        let mut rng = Rng64::seed_from(8);
        let mut img_rng = Rng64::seed_from(9);
        let data = (0..3 * 32 * 32).map(|_| img_rng.unit_f32()).collect();
        let x = Array::from_vec(&[1, 3, 32, 32], data).unwrap();
        let field = estimate_uncertainty(&m, &x, 4, &mut rng).unwrap();
        let ln_k = (m.spec.num_classes as f32).ln();
        for &u in &field.entropy.data {
            assert!((0.0..=ln_k + 1e-5).contains(&u));
        }
        for (i, level) in field.pyramid.iter().enumerate() {
            assert_eq!(level.shape, vec![1, 32 >> (i + 1), 32 >> (i + 1)]);
            for &u in &level.data {
                assert!((0.0..=ln_k + 1e-5).contains(&u));
            }
        }
        // Mean probs sum to one per pixel.
        let hw = 32 * 32;
        for p in 0..hw {
            let s: f32 = (0..5).map(|k| field.mean_probs.data[k * hw + p]).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
        // Reproducible for an equal rng state.
        let mut rng2 = Rng64::seed_from(8);
        let field2 = estimate_uncertainty(&m, &x, 4, &mut rng2).unwrap();
        assert_eq!(field.entropy.data, field2.entropy.data);
    }

    #[test]
    fn threshold_endpoints_and_monotonicity() {
        let h_max = 2.0f64.ln();
        let sched = ThresholdSchedule::new(h_max, 1000);
        assert!((sched.threshold_at(1000) - h_max).abs() < 1e-12);
        let h0 = sched.threshold_at(0);
        assert!((h0 - h_max * (0.5 + 0.5 * (-5.0f64).exp())).abs() < 1e-12);
        assert!((h0 / h_max - 0.5034).abs() < 1e-4);
        let mut prev = -1.0;
        for step in (0..=1000).step_by(50) {
            let h = sched.threshold_at(step);
            assert!(h >= prev);
            prev = h;
        }
        // Clamped outside the range.
        assert_eq!(sched.threshold_at(5000), sched.threshold_at(1000));
    }

    #[test]
    fn pass_fraction_monotone_in_threshold_for_fixed_field() {
        let mut rng = Rng64::seed_from(10);
        let data = (0..256).map(|_| rng.unit_f64() * 0.7).collect();
        let field = Array::from_vec(&[1, 16, 16], data).unwrap();
        let sched = ThresholdSchedule::new(2.0f64.ln(), 100);
        let mut prev = -1.0;
        for step in (0..=100).step_by(10) {
            let f = mask_pass_fraction(&field, sched.threshold_at(step));
            assert!(f >= prev);
            prev = f;
        }
    }
}
