//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Tensors live in a [`Tape`] arena and are addressed by [`TensorRef`].
//! Forward ops append nodes to the tape; [`Tape::backward`] replays them in
//! strict reverse insertion order, accumulating gradients into every
//! reachable `requires_grad` tensor. All loops run in a fixed order, so two
//! passes with identical seeds produce bit-identical gradients.

mod conv;
pub(crate) mod ops;
pub mod check;
#[cfg(test)]
mod tests;

pub use ops::IGNORE_LABEL;

use crate::array::Array;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle into a tape's tensor arena.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorRef(pub(crate) u32);

#[derive(Debug)]
pub(crate) struct Entry<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
    pub requires_grad: bool,
    pub grad: Option<Vec<F>>,
    /// Producing node, None for leaves.
    pub node: Option<u32>,
}

/// Recorded operation: enough to replay the backward rule.
#[derive(Debug)]
pub(crate) enum Op<F> {
    Add { a: u32, b: u32 },
    Sub { a: u32, b: u32 },
    Mul { a: u32, b: u32 },
    MulScalar { a: u32, s: F },
    AddBias { a: u32, bias: u32 },
    Matmul { a: u32, b: u32 },
    Transpose { a: u32 },
    Relu { a: u32 },
    /// Softmax along `axis`; backward reads the saved output.
    SoftmaxAxis { a: u32, axis: usize },
    /// Mask already folded with the 1/(1-p) keep scale.
    Dropout { a: u32, mask: Vec<F> },
    AvgPool2 { a: u32 },
    BilinearUp { a: u32, factor: usize },
    /// Per-instance (mean, inv_std) saved at forward time.
    InstanceNorm { a: u32, stats: Vec<(F, F)> },
    Conv2d { x: u32, w: u32, b: u32, stride: usize },
    SumAll { a: u32 },
    MeanChannels { a: u32 },
    /// C,H,W -> C/4, 2H, 2W sub-pixel rearrangement.
    DepthToSpace { a: u32 },
    FlattenSpatial { a: u32 },
    UnflattenSpatial { a: u32 },
    SliceRows { a: u32, start: usize },
    SliceCols { a: u32, start: usize },
    ConcatRows { a: u32, b: u32 },
    ConcatCols { a: u32, b: u32 },
    Huber { a: u32, rho: F },
    /// Saved softmax probabilities plus the non-ignored pixel count.
    CrossEntropyMean {
        logits: u32,
        probs: Vec<F>,
        labels: Vec<u8>,
        count: usize,
    },
}

#[derive(Debug)]
pub(crate) struct Node<F> {
    pub op: Op<F>,
    pub out: u32,
}

/// Gradient tape: tensor arena plus the recorded op list.
pub struct Tape<F> {
    pub(crate) entries: Vec<Entry<F>>,
    pub(crate) nodes: Vec<Node<F>>,
    grad_enabled: bool,
    consumed: bool,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            entries: Vec::new(),
            nodes: Vec::new(),
            grad_enabled: true,
            consumed: false,
        }
    }

    /// Tape that computes forward values but records no backward graph.
    pub fn no_grad() -> Self {
        Tape {
            entries: Vec::new(),
            nodes: Vec::new(),
            grad_enabled: false,
            consumed: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    // ── arena access ─────────────────────────────────────────────────

    pub fn leaf(&mut self, shape: &[usize], data: Vec<F>, requires_grad: bool) -> Result<TensorRef> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "leaf",
                expected: shape.to_vec(),
                got: vec![data.len()],
            });
        }
        let id = self.entries.len() as u32;
        self.entries.push(Entry {
            shape: shape.to_vec(),
            data,
            requires_grad: requires_grad && self.grad_enabled,
            grad: None,
            node: None,
        });
        Ok(TensorRef(id))
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<F>) -> Result<TensorRef> {
        self.leaf(shape, data, false)
    }

    pub fn from_array(&mut self, a: &Array<F>, requires_grad: bool) -> Result<TensorRef> {
        self.leaf(&a.shape, a.data.clone(), requires_grad)
    }

    pub fn scalar(&mut self, v: F) -> TensorRef {
        self.leaf(&[1], vec![v], false).expect("scalar leaf")
    }

    pub fn data(&self, t: TensorRef) -> &[F] {
        &self.entries[t.0 as usize].data
    }

    pub fn shape(&self, t: TensorRef) -> &[usize] {
        &self.entries[t.0 as usize].shape
    }

    pub fn grad(&self, t: TensorRef) -> Option<&[F]> {
        self.entries[t.0 as usize].grad.as_deref()
    }

    pub fn requires_grad(&self, t: TensorRef) -> bool {
        self.entries[t.0 as usize].requires_grad
    }

    /// True when the tensor has no producing node (leaf or detached).
    pub fn is_leaf(&self, t: TensorRef) -> bool {
        self.entries[t.0 as usize].node.is_none()
    }

    pub fn to_array(&self, t: TensorRef) -> Array<F> {
        let e = &self.entries[t.0 as usize];
        Array {
            shape: e.shape.clone(),
            data: e.data.clone(),
        }
    }

    pub fn item(&self, t: TensorRef) -> Result<F> {
        let e = &self.entries[t.0 as usize];
        if e.data.len() != 1 {
            return Err(Error::NotScalar {
                op: "item",
                shape: e.shape.clone(),
            });
        }
        Ok(e.data[0])
    }

    /// Value-identical tensor detached from the tape.
    pub fn stop_gradient(&mut self, t: TensorRef) -> TensorRef {
        let e = &self.entries[t.0 as usize];
        let (shape, data) = (e.shape.clone(), e.data.clone());
        self.leaf(&shape, data, false).expect("detached leaf")
    }

    // ── recording helpers ────────────────────────────────────────────

    pub(crate) fn push_result(
        &mut self,
        shape: Vec<usize>,
        data: Vec<F>,
        requires_grad: bool,
        op: Option<Op<F>>,
    ) -> TensorRef {
        let id = self.entries.len() as u32;
        let record = requires_grad && self.grad_enabled;
        let node = if record {
            let nid = self.nodes.len() as u32;
            self.nodes.push(Node {
                op: op.expect("op required when recording"),
                out: id,
            });
            Some(nid)
        } else {
            None
        };
        self.entries.push(Entry {
            shape,
            data,
            requires_grad: record,
            grad: None,
            node,
        });
        TensorRef(id)
    }

    pub(crate) fn any_requires_grad(&self, refs: &[TensorRef]) -> bool {
        refs.iter().any(|r| self.entries[r.0 as usize].requires_grad)
    }

    pub(crate) fn check_finite(&self, op: &'static str, t: TensorRef) -> Result<()> {
        if self.entries[t.0 as usize].data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op, what: "input" })
        }
    }

    pub(crate) fn same_shape(&self, op: &'static str, a: TensorRef, b: TensorRef) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape {
                op,
                expected: sa.to_vec(),
                got: sb.to_vec(),
            });
        }
        Ok(())
    }

    // ── elementwise ops ──────────────────────────────────────────────

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.same_shape("add", a, b)?;
        self.check_finite("add", a)?;
        self.check_finite("add", b)?;
        let data: Vec<F> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.any_requires_grad(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push_result(shape, data, rg, Some(Op::Add { a: a.0, b: b.0 })))
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.same_shape("sub", a, b)?;
        self.check_finite("sub", a)?;
        self.check_finite("sub", b)?;
        let data: Vec<F> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x - y).collect();
        let rg = self.any_requires_grad(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push_result(shape, data, rg, Some(Op::Sub { a: a.0, b: b.0 })))
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.same_shape("mul", a, b)?;
        self.check_finite("mul", a)?;
        self.check_finite("mul", b)?;
        let data: Vec<F> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.any_requires_grad(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push_result(shape, data, rg, Some(Op::Mul { a: a.0, b: b.0 })))
    }

    pub fn mul_scalar(&mut self, a: TensorRef, s: F) -> Result<TensorRef> {
        self.check_finite("mul_scalar", a)?;
        if !s.is_finite() {
            return Err(Error::NonFinite { op: "mul_scalar", what: "scalar factor" });
        }
        let data: Vec<F> = self.data(a).iter().map(|&x| x * s).collect();
        let rg = self.any_requires_grad(&[a]);
        let shape = self.shape(a).to_vec();
        Ok(self.push_result(shape, data, rg, Some(Op::MulScalar { a: a.0, s })))
    }

    /// Rows of a 2-d tensor plus a bias vector (the one broadcast we allow).
    pub fn add_bias(&mut self, a: TensorRef, bias: TensorRef) -> Result<TensorRef> {
        self.check_finite("add_bias", a)?;
        self.check_finite("add_bias", bias)?;
        let sa = self.shape(a);
        let sb = self.shape(bias);
        if sa.len() != 2 || sb.len() != 1 {
            return Err(Error::Shape {
                op: "add_bias",
                expected: vec![2, 1],
                got: vec![sa.len(), sb.len()],
            });
        }
        if sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "add_bias",
                axis: "columns",
                expected: sa[1],
                got: sb[0],
            });
        }
        let (rows, cols) = (sa[0], sa[1]);
        let mut data = self.data(a).to_vec();
        let bdat = self.data(bias).to_vec();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += bdat[c];
            }
        }
        let rg = self.any_requires_grad(&[a, bias]);
        Ok(self.push_result(
            vec![rows, cols],
            data,
            rg,
            Some(Op::AddBias { a: a.0, bias: bias.0 }),
        ))
    }

    pub fn relu(&mut self, a: TensorRef) -> Result<TensorRef> {
        self.check_finite("relu", a)?;
        let data: Vec<F> = self.data(a).iter().map(|&x| x.max(F::zero())).collect();
        let rg = self.any_requires_grad(&[a]);
        let shape = self.shape(a).to_vec();
        Ok(self.push_result(shape, data, rg, Some(Op::Relu { a: a.0 })))
    }

    /// Elementwise Huber: ½x² inside |x| ≤ rho, rho·|x| − ½rho² outside.
    pub fn huber(&mut self, a: TensorRef, rho: F) -> Result<TensorRef> {
        self.check_finite("huber", a)?;
        if rho <= F::zero() {
            return Err(Error::Config(format!("huber: rho must be > 0, got {rho}")));
        }
        let half = F::c(0.5);
        let data: Vec<F> = self
            .data(a)
            .iter()
            .map(|&x| {
                if x.abs() <= rho {
                    half * x * x
                } else {
                    rho * x.abs() - half * rho * rho
                }
            })
            .collect();
        let rg = self.any_requires_grad(&[a]);
        let shape = self.shape(a).to_vec();
        Ok(self.push_result(shape, data, rg, Some(Op::Huber { a: a.0, rho })))
    }

    /// Inverted dropout: keep with probability 1-p and scale by 1/(1-p).
    /// p = 0 is the exact identity; the mask is a pure function of `rng`.
    pub fn dropout(&mut self, a: TensorRef, p: f64, rng: &mut crate::rng::Rng64) -> Result<TensorRef> {
        self.check_finite("dropout", a)?;
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout: p must be in [0,1), got {p}")));
        }
        if p == 0.0 {
            let data = self.data(a).to_vec();
            let rg = self.any_requires_grad(&[a]);
            let shape = self.shape(a).to_vec();
            let n = data.len();
            return Ok(self.push_result(
                shape,
                data,
                rg,
                Some(Op::Dropout { a: a.0, mask: vec![F::one(); n] }),
            ));
        }
        let scale = F::c(1.0 / (1.0 - p));
        let mask: Vec<F> = (0..self.data(a).len())
            .map(|_| if rng.unit_f64() < p { F::zero() } else { scale })
            .collect();
        let data: Vec<F> = self.data(a).iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let rg = self.any_requires_grad(&[a]);
        let shape = self.shape(a).to_vec();
        Ok(self.push_result(shape, data, rg, Some(Op::Dropout { a: a.0, mask })))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients accumulate into every
    /// reachable `requires_grad` tensor; unreachable ones get zero buffers.
    /// The recorded node list is cleared afterwards.
    pub fn backward(&mut self, loss: TensorRef) -> Result<()> {
        if self.consumed {
            return Err(Error::Config("backward: tape already consumed".into()));
        }
        let le = &self.entries[loss.0 as usize];
        if le.data.len() != 1 {
            return Err(Error::NotScalar {
                op: "backward",
                shape: le.shape.clone(),
            });
        }
        if !le.data[0].is_finite() {
            return Err(Error::NonFinite { op: "backward", what: "loss value" });
        }
        self.entries[loss.0 as usize].grad = Some(vec![F::one()]);

        for i in (0..self.nodes.len()).rev() {
            // Take the output grad; if absent, the node feeds nothing on the
            // path to the loss and is skipped.
            let out = self.nodes[i].out as usize;
            let g_out = match self.entries[out].grad.take() {
                Some(g) => g,
                None => continue,
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::SumAll { a: 0 });
            self.backward_node(&op, out, &g_out)?;
            self.entries[out].grad = Some(g_out);
        }

        // Unreached requires_grad tensors read as zero gradient.
        for e in &mut self.entries {
            if e.requires_grad && e.grad.is_none() {
                e.grad = Some(vec![F::zero(); e.data.len()]);
            }
        }
        self.nodes.clear();
        self.consumed = true;
        Ok(())
    }

    pub(crate) fn wants_grad(&self, id: u32) -> bool {
        self.entries[id as usize].requires_grad
    }

    /// Add `contrib` into the grad buffer of entry `id`.
    pub(crate) fn accum(&mut self, id: u32, contrib: &[F]) {
        let e = &mut self.entries[id as usize];
        let g = e.grad.get_or_insert_with(|| vec![F::zero(); e.data.len()]);
        for (gi, &ci) in g.iter_mut().zip(contrib) {
            *gi += ci;
        }
    }

    fn backward_node(&mut self, op: &Op<F>, out: usize, g_out: &[F]) -> Result<()> {
        match *op {
            Op::Add { a, b } => {
                if self.wants_grad(a) {
                    self.accum(a, g_out);
                }
                if self.wants_grad(b) {
                    self.accum(b, g_out);
                }
            }
            Op::Sub { a, b } => {
                if self.wants_grad(a) {
                    self.accum(a, g_out);
                }
                if self.wants_grad(b) {
                    let neg: Vec<F> = g_out.iter().map(|&g| -g).collect();
                    self.accum(b, &neg);
                }
            }
            Op::Mul { a, b } => {
                if self.wants_grad(a) {
                    let contrib: Vec<F> = g_out
                        .iter()
                        .zip(&self.entries[b as usize].data)
                        .map(|(&g, &y)| g * y)
                        .collect();
                    self.accum(a, &contrib);
                }
                if self.wants_grad(b) {
                    let contrib: Vec<F> = g_out
                        .iter()
                        .zip(&self.entries[a as usize].data)
                        .map(|(&g, &x)| g * x)
                        .collect();
                    self.accum(b, &contrib);
                }
            }
            Op::MulScalar { a, s } => {
                if self.wants_grad(a) {
                    let contrib: Vec<F> = g_out.iter().map(|&g| g * s).collect();
                    self.accum(a, &contrib);
                }
            }
            Op::AddBias { a, bias } => {
                if self.wants_grad(a) {
                    self.accum(a, g_out);
                }
                if self.wants_grad(bias) {
                    let cols = self.entries[bias as usize].data.len();
                    let mut contrib = vec![F::zero(); cols];
                    for (i, &g) in g_out.iter().enumerate() {
                        contrib[i % cols] += g;
                    }
                    self.accum(bias, &contrib);
                }
            }
            Op::Relu { a } => {
                if self.wants_grad(a) {
                    let contrib: Vec<F> = g_out
                        .iter()
                        .zip(&self.entries[a as usize].data)
                        .map(|(&g, &x)| if x > F::zero() { g } else { F::zero() })
                        .collect();
                    self.accum(a, &contrib);
                }
            }
            Op::Huber { a, rho } => {
                if self.wants_grad(a) {
                    // Derivative clamps to ±rho outside the knee.
                    let contrib: Vec<F> = g_out
                        .iter()
                        .zip(&self.entries[a as usize].data)
                        .map(|(&g, &x)| g * x.max(-rho).min(rho))
                        .collect();
                    self.accum(a, &contrib);
                }
            }
            Op::Dropout { a, ref mask } => {
                if self.wants_grad(a) {
                    let contrib: Vec<F> = g_out.iter().zip(mask).map(|(&g, &m)| g * m).collect();
                    self.accum(a, &contrib);
                }
            }
            Op::Matmul { a, b } => self.backward_matmul(a, b, out, g_out),
            Op::Transpose { a } => self.backward_transpose(a, out, g_out),
            Op::SoftmaxAxis { a, axis } => self.backward_softmax(a, axis, out, g_out),
            Op::AvgPool2 { a } => self.backward_avg_pool2(a, out, g_out),
            Op::BilinearUp { a, factor } => self.backward_bilinear(a, factor, out, g_out),
            Op::InstanceNorm { a, ref stats } => self.backward_instance_norm(a, stats, out, g_out),
            Op::Conv2d { x, w, b, stride } => self.backward_conv2d(x, w, b, stride, out, g_out)?,
            Op::SumAll { a } => {
                if self.wants_grad(a) {
                    let n = self.entries[a as usize].data.len();
                    let contrib = vec![g_out[0]; n];
                    self.accum(a, &contrib);
                }
            }
            Op::MeanChannels { a } => self.backward_mean_channels(a, out, g_out),
            Op::DepthToSpace { a } => self.backward_depth_to_space(a, out, g_out),
            Op::FlattenSpatial { a } => self.backward_flatten_spatial(a, out, g_out),
            Op::UnflattenSpatial { a } => self.backward_unflatten_spatial(a, out, g_out),
            Op::SliceRows { a, start } => self.backward_slice_rows(a, start, out, g_out),
            Op::SliceCols { a, start } => self.backward_slice_cols(a, start, out, g_out),
            Op::ConcatRows { a, b } => self.backward_concat_rows(a, b, g_out),
            Op::ConcatCols { a, b } => self.backward_concat_cols(a, b, out, g_out),
            Op::CrossEntropyMean {
                logits,
                ref probs,
                ref labels,
                count,
            } => self.backward_cross_entropy(logits, probs, labels, count, g_out),
        }
        Ok(())
    }
}
