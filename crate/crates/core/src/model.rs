//! Four-stage convolutional encoder plus a multi-scale fusion decoder,
//! instantiated twice (student and teacher).
//!
//! Each encoder stage is a stride-2 conv, a stride-1 conv (both 3x3 with
//! relu) and a dropout site; the stage output after dropout is the stage
//! feature. The decoder projects every stage feature to a common width,
//! upsamples to the stage-1 resolution, sums, then classifies with a 3x3
//! conv at input resolution so labels thinner than the stage-1 grid stay
//! representable.

use crate::array::Array;
use crate::error::{Error, Result};
use crate::rng::Rng64;
use crate::scalar::{normal, Scalar};
use crate::tensor::{Tape, TensorRef};

/// Channel width every stage feature is projected to inside the decoder.
pub const DECODER_CHANNELS: usize = 64;

/// Stabilizer for the per-channel instance normalization in the encoder.
const NORM_EPS: f64 = 1e-5;

pub const NUM_STAGES: usize = 4;

/// Spatial reduction of the input by the time stage `i` (0-based) emits.
pub fn stage_scale(i: usize) -> usize {
    2 << i
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageSpec {
    pub input_channels: usize,
    pub num_classes: usize,
    pub channels: [usize; NUM_STAGES],
}

impl Default for StageSpec {
    fn default() -> Self {
        StageSpec {
            input_channels: 3,
            num_classes: 5,
            channels: [16, 32, 64, 128],
        }
    }
}

/// Whether SGD weight decay applies (weights yes, biases no).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamTag {
    Weight,
    Bias,
}

#[derive(Clone, Debug)]
struct ConvParams<F> {
    w: Array<F>,
    b: Array<F>,
}

#[derive(Clone, Debug)]
pub struct SegModel<F> {
    pub spec: StageSpec,
    pub dropout_rate: f64,
    /// Per stage: stride-2 conv then stride-1 conv.
    stages: Vec<[ConvParams<F>; 2]>,
    /// Per stage: 1x1 projection to decoder width, stored as C_i x 64.
    projs: Vec<ConvParams<F>>,
    classifier: ConvParams<F>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    Train,
    Eval,
    McSample,
}

impl ForwardMode {
    fn dropout_active(self) -> bool {
        !matches!(self, ForwardMode::Eval)
    }
}

/// Parameter tensors leafed into one tape, aligned with visit order.
pub struct ModelBinding {
    stage_refs: Vec<[(TensorRef, TensorRef); 2]>,
    proj_refs: Vec<(TensorRef, TensorRef)>,
    classifier_ref: (TensorRef, TensorRef),
    pub param_refs: Vec<TensorRef>,
}

pub struct ForwardOut {
    pub features: [TensorRef; NUM_STAGES],
    pub logits: TensorRef,
}

fn he_conv<F: Scalar>(out_c: usize, in_c: usize, rng: &mut Rng64) -> ConvParams<F> {
    let std = F::c((2.0 / (in_c as f64 * 9.0)).sqrt());
    let data = (0..out_c * in_c * 9).map(|_| normal::<F>(rng) * std).collect();
    ConvParams {
        w: Array::from_vec(&[out_c, in_c, 3, 3], data).unwrap(),
        b: Array::zeros(&[out_c]),
    }
}

fn he_proj<F: Scalar>(in_c: usize, out_c: usize, rng: &mut Rng64) -> ConvParams<F> {
    let std = F::c((2.0 / in_c as f64).sqrt());
    let data = (0..in_c * out_c).map(|_| normal::<F>(rng) * std).collect();
    ConvParams {
        w: Array::from_vec(&[in_c, out_c], data).unwrap(),
        b: Array::zeros(&[out_c]),
    }
}

impl<F: Scalar> SegModel<F> {
    pub fn new(spec: StageSpec, dropout_rate: f64, seed: u64) -> Self {
        let mut rng = Rng64::seed_from(seed);
        let mut stages = Vec::with_capacity(NUM_STAGES);
        let mut in_c = spec.input_channels;
        for &c in &spec.channels {
            let s2 = he_conv(c, in_c, &mut rng);
            let s1 = he_conv(c, c, &mut rng);
            stages.push([s2, s1]);
            in_c = c;
        }
        let projs = spec
            .channels
            .iter()
            .map(|&c| he_proj(c, DECODER_CHANNELS, &mut rng))
            .collect();
        let classifier = he_conv(spec.num_classes, DECODER_CHANNELS / 4, &mut rng);
        SegModel {
            spec,
            dropout_rate,
            stages,
            projs,
            classifier,
        }
    }

    /// Visit every parameter in a fixed order with its name and tag.
    pub fn visit_params<'a>(&'a self, mut f: impl FnMut(String, ParamTag, &'a Array<F>)) {
        for (i, [s2, s1]) in self.stages.iter().enumerate() {
            f(format!("enc.stage{}.conv1.weight", i + 1), ParamTag::Weight, &s2.w);
            f(format!("enc.stage{}.conv1.bias", i + 1), ParamTag::Bias, &s2.b);
            f(format!("enc.stage{}.conv2.weight", i + 1), ParamTag::Weight, &s1.w);
            f(format!("enc.stage{}.conv2.bias", i + 1), ParamTag::Bias, &s1.b);
        }
        for (i, p) in self.projs.iter().enumerate() {
            f(format!("dec.proj{}.weight", i + 1), ParamTag::Weight, &p.w);
            f(format!("dec.proj{}.bias", i + 1), ParamTag::Bias, &p.b);
        }
        f("dec.classifier.weight".into(), ParamTag::Weight, &self.classifier.w);
        f("dec.classifier.bias".into(), ParamTag::Bias, &self.classifier.b);
    }

    pub fn visit_params_mut(&mut self, mut f: impl FnMut(String, ParamTag, &mut Array<F>)) {
        for (i, [s2, s1]) in self.stages.iter_mut().enumerate() {
            f(format!("enc.stage{}.conv1.weight", i + 1), ParamTag::Weight, &mut s2.w);
            f(format!("enc.stage{}.conv1.bias", i + 1), ParamTag::Bias, &mut s2.b);
            f(format!("enc.stage{}.conv2.weight", i + 1), ParamTag::Weight, &mut s1.w);
            f(format!("enc.stage{}.conv2.bias", i + 1), ParamTag::Bias, &mut s1.b);
        }
        for (i, p) in self.projs.iter_mut().enumerate() {
            f(format!("dec.proj{}.weight", i + 1), ParamTag::Weight, &mut p.w);
            f(format!("dec.proj{}.bias", i + 1), ParamTag::Bias, &mut p.b);
        }
        f("dec.classifier.weight".into(), ParamTag::Weight, &mut self.classifier.w);
        f("dec.classifier.bias".into(), ParamTag::Bias, &mut self.classifier.b);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(|_, _, a| n += a.numel());
        n
    }

    /// Leaf all parameters into `tape`; `trainable` wires them for grads.
    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> Result<ModelBinding> {
        let mut param_refs = Vec::new();
        let push = |tape: &mut Tape<F>, a: &Array<F>| -> Result<TensorRef> {
            let r = tape.from_array(a, trainable)?;
            Ok(r)
        };
        let mut stage_refs = Vec::with_capacity(NUM_STAGES);
        for [s2, s1] in &self.stages {
            let r = [
                (push(tape, &s2.w)?, push(tape, &s2.b)?),
                (push(tape, &s1.w)?, push(tape, &s1.b)?),
            ];
            param_refs.extend([r[0].0, r[0].1, r[1].0, r[1].1]);
            stage_refs.push(r);
        }
        let mut proj_refs = Vec::with_capacity(NUM_STAGES);
        for p in &self.projs {
            let r = (push(tape, &p.w)?, push(tape, &p.b)?);
            param_refs.extend([r.0, r.1]);
            proj_refs.push(r);
        }
        let classifier_ref = (push(tape, &self.classifier.w)?, push(tape, &self.classifier.b)?);
        param_refs.extend([classifier_ref.0, classifier_ref.1]);
        Ok(ModelBinding {
            stage_refs,
            proj_refs,
            classifier_ref,
            param_refs,
        })
    }

    /// Encoder + decoder pass. Stage features come back post-dropout, so
    /// `decode` on them reproduces `logits` bit-exactly in every mode.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        binding: &ModelBinding,
        x: TensorRef,
        mode: ForwardMode,
        rng: &mut Rng64,
    ) -> Result<ForwardOut> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::Shape { op: "forward", expected: vec![4], got: vec![s.len()] });
        }
        if s[1] != self.spec.input_channels {
            return Err(Error::Dimension {
                op: "forward",
                axis: "input channels",
                expected: self.spec.input_channels,
                got: s[1],
            });
        }
        if s[2] % 16 != 0 || s[3] % 16 != 0 {
            return Err(Error::Config(format!(
                "forward: spatial extents must be divisible by 16, got {}x{}",
                s[2], s[3]
            )));
        }
        let mut cur = x;
        let mut feats = Vec::with_capacity(NUM_STAGES);
        for [(w2, b2), (w1, b1)] in &binding.stage_refs {
            let c = tape.conv2d(cur, *w2, *b2, 2)?;
            let c = tape.instance_norm(c, F::c(NORM_EPS))?;
            let c = tape.relu(c)?;
            let c = tape.conv2d(c, *w1, *b1, 1)?;
            let c = tape.instance_norm(c, F::c(NORM_EPS))?;
            let c = tape.relu(c)?;
            let c = if mode.dropout_active() {
                tape.dropout(c, self.dropout_rate, rng)?
            } else {
                c
            };
            feats.push(c);
            cur = c;
        }
        let features: [TensorRef; NUM_STAGES] = [feats[0], feats[1], feats[2], feats[3]];
        let logits = self.decode(tape, binding, &features)?;
        Ok(ForwardOut { features, logits })
    }

    /// Decoder alone, callable on externally supplied stage features (the
    /// attention path swaps in a reconstructed stage-4 feature).
    pub fn decode(
        &self,
        tape: &mut Tape<F>,
        binding: &ModelBinding,
        features: &[TensorRef; NUM_STAGES],
    ) -> Result<TensorRef> {
        let mut fused: Option<TensorRef> = None;
        for (i, (&feat, &(pw, pb))) in features.iter().zip(&binding.proj_refs).enumerate() {
            let fs = tape.shape(feat).to_vec();
            if fs.len() != 4 {
                return Err(Error::Shape { op: "decode", expected: vec![4], got: vec![fs.len()] });
            }
            if fs[1] != self.spec.channels[i] {
                return Err(Error::Dimension {
                    op: "decode",
                    axis: "stage channels",
                    expected: self.spec.channels[i],
                    got: fs[1],
                });
            }
            let (n, _c, h, w) = (fs[0], fs[1], fs[2], fs[3]);
            let flat = tape.flatten_spatial(feat)?;
            let proj = tape.matmul(flat, pw)?;
            let proj = tape.add_bias(proj, pb)?;
            let proj = tape.unflatten_spatial(proj, n, DECODER_CHANNELS, h, w)?;
            let up = if i == 0 { proj } else { tape.bilinear_upsample(proj, 1 << i)? };
            fused = Some(match fused {
                None => up,
                Some(acc) => tape.add(acc, up)?,
            });
        }
        let fused = fused.expect("four stages");
        let fused = tape.relu(fused)?;
        // Sub-pixel reconstruction back to input resolution: each group of
        // four fused channels supplies the 2x2 sub-pixels of one channel,
        // so structures thinner than the stage-1 grid stay representable.
        let fused = tape.depth_to_space(fused)?;
        let (cw, cb) = binding.classifier_ref;
        tape.conv2d(fused, cw, cb, 1)
    }
}
