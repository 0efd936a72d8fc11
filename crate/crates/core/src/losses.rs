//! Training objectives: supervised cross entropy, teacher-student Huber
//! consistency, multi-scale uncertainty-masked feature consistency, the
//! attention-path cross entropy, and their unit-weight composition.

use crate::array::Array;
use crate::error::{Error, Result};
use crate::model::NUM_STAGES;
use crate::scalar::Scalar;
use crate::tensor::{Tape, TensorRef};

/// One training step's loss values in report form.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossReport {
    pub step: u64,
    pub l_s: f64,
    pub l_c: f64,
    pub l_msuc: f64,
    pub l_ctsa: f64,
    pub total: f64,
    pub masked_fraction_per_stage: [f64; NUM_STAGES],
}

impl LossReport {
    pub fn csv_header() -> &'static str {
        "step,l_s,l_c,l_msuc,l_ctsa,total,mf1,mf2,mf3,mf4"
    }

    pub fn to_csv_row(&self) -> String {
        let m = &self.masked_fraction_per_stage;
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step, self.l_s, self.l_c, self.l_msuc, self.l_ctsa, self.total, m[0], m[1], m[2], m[3]
        )
    }
}

/// Mean pixelwise cross entropy on labeled data; an empty non-ignored set
/// yields zero, and the pixel count lets the caller track that condition.
pub fn supervised_loss<F: Scalar>(
    tape: &mut Tape<F>,
    logits: TensorRef,
    labels: &Array<u8>,
) -> Result<(TensorRef, usize)> {
    tape.cross_entropy_mean(logits, labels)
}

/// Mean (over pixels and classes) Huber distance between the student's
/// probability map and the aligned, detached teacher probability map.
pub fn consistency_loss<F: Scalar>(
    tape: &mut Tape<F>,
    student_probs: TensorRef,
    teacher_probs_aligned: TensorRef,
    rho: F,
) -> Result<TensorRef> {
    if tape.requires_grad(teacher_probs_aligned) {
        return Err(Error::Config(
            "consistency_loss: teacher probabilities must be detached".into(),
        ));
    }
    let delta = tape.sub(student_probs, teacher_probs_aligned)?;
    let h = tape.huber(delta, rho)?;
    tape.mean_all(h)
}

pub struct MsucOutput {
    pub loss: TensorRef,
    pub masked_fractions: [f64; NUM_STAGES],
}

/// Per stage: channel-meaned Huber distance between student and aligned
/// teacher features, averaged over the pixels whose uncertainty falls below
/// `threshold`, then summed over stages. A stage with no passing pixels
/// contributes exactly zero.
pub fn msuc_loss<F: Scalar>(
    tape: &mut Tape<F>,
    student_feats: &[TensorRef; NUM_STAGES],
    teacher_feats_aligned: &[TensorRef; NUM_STAGES],
    pyramid: &[Array<F>; NUM_STAGES],
    threshold: f64,
    rho: F,
) -> Result<MsucOutput> {
    let mut fractions = [0.0f64; NUM_STAGES];
    let mut acc: Option<TensorRef> = None;
    let thr = F::c(threshold);
    for i in 0..NUM_STAGES {
        let (s, t) = (student_feats[i], teacher_feats_aligned[i]);
        if tape.requires_grad(t) {
            return Err(Error::Config(
                "msuc_loss: teacher features must be detached".into(),
            ));
        }
        let ss = tape.shape(s).to_vec();
        tape.same_shape("msuc_loss", s, t)?;
        let u = &pyramid[i];
        if u.shape != [ss[0], ss[2], ss[3]] {
            return Err(Error::Shape {
                op: "msuc_loss",
                expected: vec![ss[0], ss[2], ss[3]],
                got: u.shape.clone(),
            });
        }
        let mask: Vec<F> = u
            .data
            .iter()
            .map(|&v| if v < thr { F::one() } else { F::zero() })
            .collect();
        let count = mask.iter().filter(|&&m| m == F::one()).count();
        fractions[i] = count as f64 / u.numel() as f64;
        if count == 0 {
            continue;
        }
        let delta = tape.sub(s, t)?;
        let hub = tape.huber(delta, rho)?;
        let chan = tape.mean_channels(hub)?;
        let mask_t = tape.constant(&[ss[0], 1, ss[2], ss[3]], mask)?;
        let masked = tape.mul(chan, mask_t)?;
        let sum = tape.sum_all(masked)?;
        let stage = tape.mul_scalar(sum, F::one() / F::c(count as f64))?;
        acc = Some(match acc {
            None => stage,
            Some(a) => tape.add(a, stage)?,
        });
    }
    let loss = match acc {
        Some(a) => a,
        None => tape.scalar(F::zero()),
    };
    Ok(MsucOutput { loss, masked_fractions: fractions })
}

/// Cross entropy of the attention-path logits against the student's own
/// hard pseudo-labels (already aligned and detached).
pub fn ctsa_loss<F: Scalar>(
    tape: &mut Tape<F>,
    ctsa_logits: TensorRef,
    pseudo_student: &Array<u8>,
) -> Result<(TensorRef, usize)> {
    tape.cross_entropy_mean(ctsa_logits, pseudo_student)
}

/// Argmax over the class axis of an `[N, K, H, W]` probability or logit
/// map, yielding a hard label raster.
pub fn argmax_labels<F: Scalar>(map: &Array<F>) -> Array<u8> {
    let (n, k, h, w) = (map.shape[0], map.shape[1], map.shape[2], map.shape[3]);
    let hw = h * w;
    let mut out = Array::<u8>::zeros(&[n, h, w]);
    for ni in 0..n {
        for p in 0..hw {
            let mut best = 0usize;
            let mut best_v = map.data[(ni * k) * hw + p];
            for ki in 1..k {
                let v = map.data[(ni * k + ki) * hw + p];
                if v > best_v {
                    best_v = v;
                    best = ki;
                }
            }
            out.data[ni * hw + p] = best as u8;
        }
    }
    out
}
