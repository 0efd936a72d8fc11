//! Cross teacher-student channel attention.
//!
//! The student's deepest stage feature supplies queries; the teacher's the
//! keys and values. Tokens are spatial positions (d = h*w), similarity is
//! computed between channels per head, and the row-stochastic attention
//! re-mixes teacher values into a reconstruction of the student feature.

use crate::array::Array;
use crate::error::{Error, Result};
use crate::model::ParamTag;
use crate::rng::Rng64;
use crate::scalar::{normal, Scalar};
use crate::tensor::{Tape, TensorRef};

const NORM_EPS: f64 = 1e-5;

/// Projection weights: C -> 2C for q/k/v, 2C -> C to close the loop.
#[derive(Clone, Debug)]
pub struct CtsaParams<F> {
    pub w_q: Array<F>,
    pub w_k: Array<F>,
    pub w_v: Array<F>,
    pub w_out: Array<F>,
    pub heads: usize,
    pub channels: usize,
}

impl<F: Scalar> CtsaParams<F> {
    pub fn new(channels: usize, heads: usize, seed: u64) -> Result<Self> {
        if heads == 0 || (2 * channels) % heads != 0 {
            return Err(Error::Config(format!(
                "ctsa: heads ({heads}) must divide 2C ({})",
                2 * channels
            )));
        }
        let mut rng = Rng64::seed_from(seed);
        let std = F::c(1.0 / (channels as f64).sqrt());
        let mut mat = |rows: usize, cols: usize| {
            let data = (0..rows * cols).map(|_| normal::<F>(&mut rng) * std).collect();
            Array::from_vec(&[rows, cols], data).unwrap()
        };
        Ok(CtsaParams {
            w_q: mat(channels, 2 * channels),
            w_k: mat(channels, 2 * channels),
            w_v: mat(channels, 2 * channels),
            w_out: mat(2 * channels, channels),
            heads,
            channels,
        })
    }

    /// Identity-extended projections [I | I] (and stacked for w_out),
    /// useful for analytic checks.
    pub fn identity_extended(channels: usize) -> Self {
        let mut qkv = Array::<F>::zeros(&[channels, 2 * channels]);
        for i in 0..channels {
            qkv.data[i * 2 * channels + i] = F::one();
            qkv.data[i * 2 * channels + channels + i] = F::one();
        }
        let mut out = Array::<F>::zeros(&[2 * channels, channels]);
        let half = F::c(0.5);
        for i in 0..channels {
            out.data[i * channels + i] = half;
            out.data[(channels + i) * channels + i] = half;
        }
        CtsaParams {
            w_q: qkv.clone(),
            w_k: qkv.clone(),
            w_v: qkv,
            w_out: out,
            heads: 1,
            channels,
        }
    }

    pub fn visit_params<'a>(&'a self, mut f: impl FnMut(String, ParamTag, &'a Array<F>)) {
        f("ctsa.w_q".into(), ParamTag::Weight, &self.w_q);
        f("ctsa.w_k".into(), ParamTag::Weight, &self.w_k);
        f("ctsa.w_v".into(), ParamTag::Weight, &self.w_v);
        f("ctsa.w_out".into(), ParamTag::Weight, &self.w_out);
    }

    pub fn visit_params_mut(&mut self, mut f: impl FnMut(String, ParamTag, &mut Array<F>)) {
        f("ctsa.w_q".into(), ParamTag::Weight, &mut self.w_q);
        f("ctsa.w_k".into(), ParamTag::Weight, &mut self.w_k);
        f("ctsa.w_v".into(), ParamTag::Weight, &mut self.w_v);
        f("ctsa.w_out".into(), ParamTag::Weight, &mut self.w_out);
    }
}

pub struct CtsaBinding {
    pub w_q: TensorRef,
    pub w_k: TensorRef,
    pub w_v: TensorRef,
    pub w_out: TensorRef,
    pub param_refs: Vec<TensorRef>,
}

pub fn bind<F: Scalar>(
    params: &CtsaParams<F>,
    tape: &mut Tape<F>,
    trainable: bool,
) -> Result<CtsaBinding> {
    let w_q = tape.from_array(&params.w_q, trainable)?;
    let w_k = tape.from_array(&params.w_k, trainable)?;
    let w_v = tape.from_array(&params.w_v, trainable)?;
    let w_out = tape.from_array(&params.w_out, trainable)?;
    Ok(CtsaBinding {
        w_q,
        w_k,
        w_v,
        w_out,
        param_refs: vec![w_q, w_k, w_v, w_out],
    })
}

/// Diagnostics captured alongside the output for invariant checks.
pub struct CtsaDetail<F> {
    pub output: TensorRef,
    /// Row-stochastic attention matrix per (sample, head).
    pub attention: Vec<Array<F>>,
    /// Value-mixed tokens per (sample, head), before the output projection.
    pub mixed: Vec<Array<F>>,
}

/// Reconstruct the student stage-4 feature under teacher guidance.
/// `v4_teacher` must already be detached; gradients reach the projections
/// and the student branch only.
pub fn ctsa_forward<F: Scalar>(
    tape: &mut Tape<F>,
    params: &CtsaParams<F>,
    binding: &CtsaBinding,
    v4_student: TensorRef,
    v4_teacher: TensorRef,
) -> Result<TensorRef> {
    Ok(ctsa_forward_detailed(tape, params, binding, v4_student, v4_teacher)?.output)
}

pub fn ctsa_forward_detailed<F: Scalar>(
    tape: &mut Tape<F>,
    params: &CtsaParams<F>,
    binding: &CtsaBinding,
    v4_student: TensorRef,
    v4_teacher: TensorRef,
) -> Result<CtsaDetail<F>> {
    let ss = tape.shape(v4_student).to_vec();
    let st = tape.shape(v4_teacher).to_vec();
    if ss != st {
        return Err(Error::Shape { op: "ctsa_forward", expected: ss, got: st });
    }
    if ss.len() != 4 {
        return Err(Error::Shape { op: "ctsa_forward", expected: vec![4], got: vec![ss.len()] });
    }
    let (n, c, h, w) = (ss[0], ss[1], ss[2], ss[3]);
    if c != params.channels {
        return Err(Error::Dimension {
            op: "ctsa_forward",
            axis: "channels",
            expected: params.channels,
            got: c,
        });
    }
    let d = h * w;
    let hc = 2 * c / params.heads;
    let scale = F::c(1.0 / (d as f64).sqrt());

    let f_s = tape.flatten_spatial(v4_student)?;
    let f_t = tape.flatten_spatial(v4_teacher)?;
    let q = tape.matmul(f_s, binding.w_q)?;
    let k = tape.matmul(f_t, binding.w_k)?;
    let v = tape.matmul(f_t, binding.w_v)?;

    let mut attention = Vec::with_capacity(n * params.heads);
    let mut mixed = Vec::with_capacity(n * params.heads);
    let mut sample_rows: Option<TensorRef> = None;
    for ni in 0..n {
        let q_n = tape.slice_rows(q, ni * d, d)?;
        let k_n = tape.slice_rows(k, ni * d, d)?;
        let v_n = tape.slice_rows(v, ni * d, d)?;
        let mut head_cols: Option<TensorRef> = None;
        for hh in 0..params.heads {
            let q_nh = tape.slice_cols(q_n, hh * hc, hc)?;
            let k_nh = tape.slice_cols(k_n, hh * hc, hc)?;
            let v_nh = tape.slice_cols(v_n, hh * hc, hc)?;
            let q_t = tape.transpose(q_nh)?;
            let sim = tape.matmul(q_t, k_nh)?;
            let sim = tape.mul_scalar(sim, scale)?;
            let sim = tape.instance_norm(sim, F::c(NORM_EPS))?;
            let attn = tape.softmax_rows(sim)?;
            attention.push(tape.to_array(attn));
            let v_t = tape.transpose(v_nh)?;
            let mix = tape.matmul(attn, v_t)?;
            mixed.push(tape.to_array(mix));
            let out_h = tape.transpose(mix)?;
            head_cols = Some(match head_cols {
                None => out_h,
                Some(acc) => tape.concat_cols(acc, out_h)?,
            });
        }
        let tokens = head_cols.expect("at least one head");
        sample_rows = Some(match sample_rows {
            None => tokens,
            Some(acc) => tape.concat_rows(acc, tokens)?,
        });
    }
    let all_tokens = sample_rows.expect("at least one sample");
    let projected = tape.matmul(all_tokens, binding.w_out)?;
    let output = tape.unflatten_spatial(projected, n, c, h, w)?;
    Ok(CtsaDetail { output, attention, mixed })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_feature(tape: &mut Tape<f32>, n: usize, c: usize, s: usize, seed: u64, rg: bool) -> TensorRef {
        let mut rng = Rng64::seed_from(seed);
        let data = (0..n * c * s * s).map(|_| normal::<f32>(&mut rng)).collect();
        tape.leaf(&[n, c, s, s], data, rg).unwrap()
    }

    #[test]
    fn heads_must_divide_double_channels() {
        assert!(CtsaParams::<f32>::new(8, 3, 1).is_err());
        assert!(CtsaParams::<f32>::new(8, 2, 1).is_ok());
    }

    #[test]
    fn output_shape_matches_student() {
        let params = CtsaParams::<f32>::new(8, 2, 7).unwrap();
        let mut tape = Tape::no_grad();
        let b = bind(&params, &mut tape, false).unwrap();
        let s = rand_feature(&mut tape, 2, 8, 4, 1, false);
        let t = rand_feature(&mut tape, 2, 8, 4, 2, false);
        let out = ctsa_forward(&mut tape, &params, &b, s, t).unwrap();
        assert_eq!(tape.shape(out), &[2, 8, 4, 4]);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let params = CtsaParams::<f32>::new(8, 2, 7).unwrap();
        let mut tape = Tape::no_grad();
        let b = bind(&params, &mut tape, false).unwrap();
        let s = rand_feature(&mut tape, 1, 8, 4, 3, false);
        let t = rand_feature(&mut tape, 1, 8, 4, 4, false);
        let detail = ctsa_forward_detailed(&mut tape, &params, &b, s, t).unwrap();
        assert_eq!(detail.attention.len(), 2);
        for a in &detail.attention {
            let cols = a.shape[1];
            for r in 0..a.shape[0] {
                let sum: f32 = a.data[r * cols..(r + 1) * cols].iter().sum();
                assert!((sum - 1.0).abs() < 1e-6, "row sum {sum}");
                assert!(a.data[r * cols..(r + 1) * cols].iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
        }
    }

    #[test]
    fn gradients_skip_teacher_branch() {
        let params = CtsaParams::<f32>::new(4, 1, 9).unwrap();
        let mut tape = Tape::new();
        let b = bind(&params, &mut tape, true).unwrap();
        let s = rand_feature(&mut tape, 1, 4, 4, 5, true);
        let t_raw = rand_feature(&mut tape, 1, 4, 4, 6, true);
        let t = tape.stop_gradient(t_raw);
        let out = ctsa_forward(&mut tape, &params, &b, s, t).unwrap();
        let sq = tape.mul(out, out).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        let gq = tape.grad(b.w_q).unwrap();
        assert!(gq.iter().any(|&g| g != 0.0), "w_q untouched");
        let gs = tape.grad(s).unwrap();
        assert!(gs.iter().any(|&g| g != 0.0), "student untouched");
        let gt = tape.grad(t_raw).unwrap();
        assert!(gt.iter().all(|&g| g == 0.0), "teacher leaked gradient");
    }

    #[test]
    fn spatial_permutation_equivariance() {
        let params = CtsaParams::<f32>::new(6, 2, 11).unwrap();
        let (n, c, s) = (1usize, 6usize, 3usize);
        let d = s * s;
        let mut rng = Rng64::seed_from(20);
        let sdat: Vec<f32> = (0..n * c * d).map(|_| normal::<f32>(&mut rng)).collect();
        let tdat: Vec<f32> = (0..n * c * d).map(|_| normal::<f32>(&mut rng)).collect();
        // A fixed spatial permutation applied to both inputs.
        let perm: Vec<usize> = vec![4, 0, 7, 2, 8, 1, 6, 3, 5];
        let permute = |x: &[f32]| -> Vec<f32> {
            let mut out = vec![0.0; x.len()];
            for ci in 0..c {
                for (pnew, &pold) in perm.iter().enumerate() {
                    out[ci * d + pnew] = x[ci * d + pold];
                }
            }
            out
        };
        let run = |sv: Vec<f32>, tv: Vec<f32>| -> Vec<f32> {
            let mut tape = Tape::no_grad();
            let b = bind(&params, &mut tape, false).unwrap();
            let sr = tape.leaf(&[n, c, s, s], sv, false).unwrap();
            let tr = tape.leaf(&[n, c, s, s], tv, false).unwrap();
            let out = ctsa_forward(&mut tape, &params, &b, sr, tr).unwrap();
            tape.data(out).to_vec()
        };
        let base = run(sdat.clone(), tdat.clone());
        let permuted = run(permute(&sdat), permute(&tdat));
        let expected = permute(&base);
        for (a, b) in permuted.iter().zip(&expected) {
            assert!((a - b).abs() < 2e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn identity_extended_mixing_is_bounded() {
        let c = 4usize;
        let params = CtsaParams::<f32>::identity_extended(c);
        let mut tape = Tape::no_grad();
        let b = bind(&params, &mut tape, false).unwrap();
        let s = rand_feature(&mut tape, 1, c, 4, 31, false);
        let t = rand_feature(&mut tape, 1, c, 4, 32, false);
        let detail = ctsa_forward_detailed(&mut tape, &params, &b, s, t).unwrap();
        // v = [F_t | F_t]: its sup-norm equals the teacher feature's.
        let v_inf = tape
            .data(t)
            .iter()
            .fold(0.0f32, |m, &x| m.max(x.abs()));
        for mix in &detail.mixed {
            for &x in &mix.data {
                assert!(x.abs() <= v_inf + 1e-5, "mixing exceeded value bound");
            }
        }
    }
}
