//! The training loop: batch assembly, the four-term objective, SGD with
//! weight decay and a per-epoch poly learning-rate schedule, EMA teacher
//! updates, validation, and best-checkpoint retention.

use std::fs;
use std::path::{Path, PathBuf};

use crate::array::Array;
use crate::augment::{
    apply_blur, apply_geometry_to_labels, apply_to_labels, compose_records, paste_box_batched,
    paste_box_batched_3d, strong_augment, weak_augment, StrongAugConfig,
};
use crate::checkpoint;
use crate::ctsa::{self, CtsaParams};
use crate::error::{Error, Result};
use crate::losses::{
    argmax_labels, consistency_loss, ctsa_loss, msuc_loss, supervised_loss, LossReport,
};
use crate::metrics::{metrics_from, ConfusionMatrix, MetricsReport};
use crate::model::{stage_scale, ForwardMode, ParamTag, SegModel, StageSpec, NUM_STAGES};
use crate::rng::Rng64;
use crate::synth::{atomic_write, load_batch, BatchPlan, DatasetManifest, Split};
use crate::teacher::{
    ema_update, estimate_uncertainty, EmaState, ThresholdSchedule, UncertaintyField,
};
use crate::tensor::{Tape, TensorRef};

/// Which loss terms a run trains with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Supervised cross entropy only.
    OnlySup,
    /// + consistency + unmasked multi-scale consistency.
    NoUc,
    /// + consistency + uncertainty-masked multi-scale consistency.
    Msuc,
    /// + consistency + attention-path loss.
    Ctsa,
    /// All four terms.
    Muca,
}

impl TrainMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "onlysup" => Ok(TrainMode::OnlySup),
            "nouc" => Ok(TrainMode::NoUc),
            "msuc" => Ok(TrainMode::Msuc),
            "ctsa" => Ok(TrainMode::Ctsa),
            "muca" => Ok(TrainMode::Muca),
            other => Err(Error::Config(format!(
                "unknown mode {other} (expected onlysup|nouc|msuc|ctsa|muca)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::OnlySup => "onlysup",
            TrainMode::NoUc => "nouc",
            TrainMode::Msuc => "msuc",
            TrainMode::Ctsa => "ctsa",
            TrainMode::Muca => "muca",
        }
    }

    pub fn uses_unlabeled(self) -> bool {
        self != TrainMode::OnlySup
    }

    pub fn uses_msuc(self) -> bool {
        matches!(self, TrainMode::NoUc | TrainMode::Msuc | TrainMode::Muca)
    }

    /// NoUc is the masked loss with the threshold forced open, so it needs
    /// no uncertainty estimate at all.
    pub fn masks_by_uncertainty(self) -> bool {
        matches!(self, TrainMode::Msuc | TrainMode::Muca)
    }

    pub fn uses_ctsa(self) -> bool {
        matches!(self, TrainMode::Ctsa | TrainMode::Muca)
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    /// Optimization steps per epoch at desk scale.
    pub steps_per_epoch: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub ema_alpha: f64,
    pub mc_passes: usize,
    pub rho: f64,
    pub h_max: f64,
    pub dropout: f64,
    pub heads: usize,
    pub seed: u64,
    pub labeled_ratio: f64,
    /// Validate every this many epochs (and always after the last).
    pub val_every: usize,
    /// Weak geometry + blur on labeled images (off for memorization
    /// sanity checks).
    pub aug_labeled: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Muca,
            epochs: 40,
            steps_per_epoch: 6,
            batch_labeled: 4,
            batch_unlabeled: 4,
            lr0: 0.007,
            lr_min: 0.00007,
            weight_decay: 0.0001,
            momentum: 0.9,
            ema_alpha: 0.99,
            mc_passes: 8,
            rho: 1.0,
            h_max: std::f64::consts::LN_2,
            dropout: 0.1,
            heads: 2,
            seed: 1,
            labeled_ratio: 0.05,
            val_every: 4,
            aug_labeled: true,
        }
    }
}

impl TrainConfig {
    /// Poly(0.9) decay per epoch, floor-clamped to lr_min.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.epochs == 0 {
            return self.lr0;
        }
        let frac = 1.0 - epoch as f64 / self.epochs as f64;
        (self.lr0 * frac.powf(0.9)).max(self.lr_min)
    }

    pub fn total_steps(&self) -> u64 {
        (self.epochs * self.steps_per_epoch) as u64
    }

    /// Every field as `key = value` lines; written before a run starts and
    /// embedded in every checkpoint.
    pub fn resolved_text(&self) -> String {
        format!(
            "mode = {}\nepochs = {}\nsteps_per_epoch = {}\nbatch_labeled = {}\nbatch_unlabeled = {}\nlr0 = {}\nlr_min = {}\nweight_decay = {}\nmomentum = {}\nema_alpha = {}\nmc_passes = {}\nrho = {}\nh_max = {}\ndropout = {}\nheads = {}\nseed = {}\nlabeled_ratio = {}\nval_every = {}\naug_labeled = {}\n",
            self.mode.name(),
            self.epochs,
            self.steps_per_epoch,
            self.batch_labeled,
            self.batch_unlabeled,
            self.lr0,
            self.lr_min,
            self.weight_decay,
            self.momentum,
            self.ema_alpha,
            self.mc_passes,
            self.rho,
            self.h_max,
            self.dropout,
            self.heads,
            self.seed,
            self.labeled_ratio,
            self.val_every,
            self.aug_labeled,
        )
    }
}

/// Shuffled cycling over a fixed index pool; reshuffles per pass.
struct CyclicSampler {
    pool: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
    rng: Rng64,
}

impl CyclicSampler {
    fn new(pool: Vec<usize>, rng: Rng64) -> Self {
        CyclicSampler { order: Vec::new(), pos: 0, pool, rng }
    }

    fn reshuffle(&mut self) {
        self.order = self.pool.clone();
        let n = self.order.len();
        for i in (1..n).rev() {
            let j = self.rng.below(i as u64 + 1) as usize;
            self.order.swap(i, j);
        }
        self.pos = 0;
    }

    fn take(&mut self, n: usize) -> Vec<usize> {
        if self.pool.is_empty() {
            return Vec::new();
        }
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            if self.pos >= self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub student: SegModel<f32>,
    pub teacher: SegModel<f32>,
    pub ctsa: CtsaParams<f32>,
    pub ema: EmaState,
    pub schedule: ThresholdSchedule,
    pub step: u64,
    /// Steps whose supervised loss saw zero non-ignored pixels.
    pub empty_ce_warnings: u64,
    velocity: Vec<Array<f32>>,
}

fn zero_pyramid(n: usize, h: usize, w: usize) -> [Array<f32>; NUM_STAGES] {
    [
        Array::zeros(&[n, h / 2, w / 2]),
        Array::zeros(&[n, h / 4, w / 4]),
        Array::zeros(&[n, h / 8, w / 8]),
        Array::zeros(&[n, h / 16, w / 16]),
    ]
}

fn finite_or(name: &'static str, v: f32) -> Result<f32> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { op: "train_step", what: name })
    }
}

impl Trainer {
    pub fn new(cfg: TrainConfig, spec: StageSpec) -> Result<Self> {
        let seeds = Rng64::seed_from(cfg.seed);
        let student = SegModel::<f32>::new(spec.clone(), cfg.dropout, seeds.derive(0xA).next_u64());
        let teacher = student.clone();
        let ctsa = CtsaParams::<f32>::new(spec.channels[3], cfg.heads, seeds.derive(0xB).next_u64())?;
        let mut velocity = Vec::new();
        student.visit_params(|_, _, a| velocity.push(Array::zeros(&a.shape)));
        ctsa.visit_params(|_, _, a| velocity.push(Array::zeros(&a.shape)));
        let schedule = ThresholdSchedule::new(cfg.h_max, cfg.total_steps());
        let ema = EmaState::new(cfg.ema_alpha);
        Ok(Trainer {
            cfg,
            student,
            teacher,
            ctsa,
            ema,
            schedule,
            step: 0,
            empty_ce_warnings: 0,
            velocity,
        })
    }

    /// One optimization step over a labeled and an unlabeled mini-batch,
    /// in order: supervised CE; weak/strong augmentation; student-on-strong
    /// and teacher-on-weak forwards; consistency; uncertainty-masked
    /// multi-scale consistency; attention path and its loss; backward; SGD;
    /// EMA.
    pub fn train_step(&mut self, labeled: &BatchPlan, unlabeled: &BatchPlan) -> Result<LossReport> {
        let cfg = self.cfg.clone();
        if labeled.is_empty() {
            return Err(Error::Config("train_step: need at least one labeled sample".into()));
        }
        if cfg.mode.uses_unlabeled() && unlabeled.is_empty() {
            return Err(Error::Config("train_step: need at least one unlabeled sample".into()));
        }
        let step = self.step;
        let epoch = (step / cfg.steps_per_epoch.max(1) as u64) as usize;
        let lr = cfg.lr_at(epoch);
        let base = Rng64::seed_from(cfg.seed).derive(0x5000_0000 | step);
        let mut rng_aug_l = base.derive(1);
        let mut rng_aug_u = base.derive(2);
        let mut rng_aug_s = base.derive(3);
        let mut rng_student = base.derive(4);
        let mut rng_teacher = base.derive(5);
        let mut rng_mc = base.derive(6);

        let mut tape = Tape::<f32>::new();
        let binding = self.student.bind(&mut tape, true)?;

        // Supervised branch: weak geometry plus blur on labeled images.
        let labels_src = labeled
            .labels
            .as_ref()
            .ok_or_else(|| Error::Config("train_step: labeled batch carries no labels".into()))?;
        let mut l_imgs = Vec::with_capacity(labeled.len());
        let mut l_labels = Vec::with_capacity(labeled.len());
        for (img, lab) in labeled.images.iter().zip(labels_src) {
            if !cfg.aug_labeled {
                l_imgs.push(img.clone());
                l_labels.push(lab.clone());
                continue;
            }
            let (wimg, wrec) = weak_augment(img, &mut rng_aug_l);
            let sigma = rng_aug_l.range_f64(0.0, 1.0);
            l_imgs.push(apply_blur(&wimg, sigma));
            l_labels.push(apply_to_labels(&wrec, lab, None)?);
        }
        let xl = tape.from_array(&BatchPlan::stack_images(&l_imgs), false)?;
        let out_l = self
            .student
            .forward(&mut tape, &binding, xl, ForwardMode::Train, &mut rng_student)?;
        let label_stack = BatchPlan::stack_labels(&l_labels);
        let (l_s_ref, l_count) = supervised_loss(&mut tape, out_l.logits, &label_stack)?;
        if l_count == 0 {
            self.empty_ce_warnings += 1;
        }

        let mut total = l_s_ref;
        let mut report = LossReport {
            step,
            l_s: finite_or("l_s", tape.item(l_s_ref)?)? as f64,
            ..LossReport::default()
        };

        let mut ctsa_bound = None;
        if cfg.mode.uses_unlabeled() {
            let n_u = unlabeled.len();
            // Weak branch for the teacher.
            let mut weak_imgs = Vec::with_capacity(n_u);
            let mut weak_recs = Vec::with_capacity(n_u);
            for img in &unlabeled.images {
                let (w, r) = weak_augment(img, &mut rng_aug_u);
                weak_imgs.push(w);
                weak_recs.push(r);
            }
            let weak_stack = BatchPlan::stack_images(&weak_imgs);
            let (h_img, w_img) = (weak_stack.shape[2], weak_stack.shape[3]);

            // Single stochastic teacher pass: pseudo-probabilities + features.
            let (t_feats, t_probs) = {
                let mut ttape = Tape::<f32>::no_grad();
                let tb = self.teacher.bind(&mut ttape, false)?;
                let x = ttape.from_array(&weak_stack, false)?;
                let out =
                    self.teacher
                        .forward(&mut ttape, &tb, x, ForwardMode::Train, &mut rng_teacher)?;
                let probs = ttape.softmax_channels(out.logits)?;
                let feats: Vec<Array<f32>> =
                    out.features.iter().map(|&f| ttape.to_array(f)).collect();
                (feats, ttape.to_array(probs))
            };

            // Strong branch for the student, built on the same weak images.
            let strong_cfg = StrongAugConfig::default();
            let mut s_imgs = Vec::with_capacity(n_u);
            let mut full_recs = Vec::with_capacity(n_u);
            for (j, w) in weak_imgs.iter().enumerate() {
                let (s, srec) = strong_augment(w, &weak_imgs, j, &strong_cfg, &mut rng_aug_s)?;
                s_imgs.push(s);
                full_recs.push(compose_records(&weak_recs[j], &srec));
            }

            // MC-dropout uncertainty; skipped when the mask is forced open.
            let field: Option<UncertaintyField<f32>> = if cfg.mode.masks_by_uncertainty() {
                Some(estimate_uncertainty(
                    &self.teacher,
                    &weak_stack,
                    cfg.mc_passes,
                    &mut rng_mc,
                )?)
            } else {
                None
            };

            // CutMix-align teacher outputs with the student branch: paste
            // the donor's probabilities, stage features, and uncertainty.
            let mut probs_aligned = t_probs.clone();
            let mut feats_aligned = t_feats.clone();
            let mut pyramid_aligned = match &field {
                Some(f) => f.pyramid.clone(),
                None => zero_pyramid(n_u, h_img, w_img),
            };
            for (j, rec) in full_recs.iter().enumerate() {
                if let Some(b) = &rec.cutmix {
                    let d = b.source_index;
                    paste_box_batched(&mut probs_aligned, j, &t_probs, d, b, 1);
                    for i in 0..NUM_STAGES {
                        paste_box_batched(&mut feats_aligned[i], j, &t_feats[i], d, b, stage_scale(i));
                        if field.is_some() {
                            paste_box_batched_3d(
                                &mut pyramid_aligned[i],
                                j,
                                &field.as_ref().unwrap().pyramid[i],
                                d,
                                b,
                                stage_scale(i),
                            );
                        }
                    }
                }
            }

            // Student on the strong branch.
            let xs = tape.from_array(&BatchPlan::stack_images(&s_imgs), false)?;
            let out_s =
                self.student
                    .forward(&mut tape, &binding, xs, ForwardMode::Train, &mut rng_student)?;

            // Consistency between probability maps.
            let student_probs = tape.softmax_channels(out_s.logits)?;
            let teacher_probs = tape.from_array(&probs_aligned, false)?;
            let l_c_ref = consistency_loss(&mut tape, student_probs, teacher_probs, cfg.rho as f32)?;
            report.l_c = finite_or("l_c", tape.item(l_c_ref)?)? as f64;
            total = tape.add(total, l_c_ref)?;

            if cfg.mode.uses_msuc() {
                let threshold = if cfg.mode.masks_by_uncertainty() {
                    self.schedule.threshold_at(step)
                } else {
                    f64::INFINITY
                };
                let mut t_leaves = Vec::with_capacity(NUM_STAGES);
                for f in &feats_aligned {
                    t_leaves.push(tape.from_array(f, false)?);
                }
                let t_arr: [TensorRef; NUM_STAGES] =
                    [t_leaves[0], t_leaves[1], t_leaves[2], t_leaves[3]];
                let msuc = msuc_loss(
                    &mut tape,
                    &out_s.features,
                    &t_arr,
                    &pyramid_aligned,
                    threshold,
                    cfg.rho as f32,
                )?;
                report.l_msuc = finite_or("l_msuc", tape.item(msuc.loss)?)? as f64;
                report.masked_fraction_per_stage = msuc.masked_fractions;
                total = tape.add(total, msuc.loss)?;
            }

            if cfg.mode.uses_ctsa() {
                // Student pseudo-labels on the raw unlabeled images,
                // eval-mode, detached by construction.
                let pseudo: Vec<Array<u8>> = {
                    let mut ptape = Tape::<f32>::no_grad();
                    let pb = self.student.bind(&mut ptape, false)?;
                    let x = ptape.from_array(&BatchPlan::stack_images(&unlabeled.images), false)?;
                    let mut dummy = Rng64::seed_from(0);
                    let out =
                        self.student
                            .forward(&mut ptape, &pb, x, ForwardMode::Eval, &mut dummy)?;
                    let logits = ptape.to_array(out.logits);
                    let all = argmax_labels(&logits);
                    let hw = h_img * w_img;
                    (0..n_u)
                        .map(|j| {
                            Array::from_vec(
                                &[h_img, w_img],
                                all.data[j * hw..(j + 1) * hw].to_vec(),
                            )
                            .unwrap()
                        })
                        .collect()
                };
                // Move pseudo-labels into the student branch geometry.
                let pseudo_geo: Vec<Array<u8>> = pseudo
                    .iter()
                    .zip(&weak_recs)
                    .map(|(p, r)| apply_geometry_to_labels(r, p))
                    .collect();
                let mut aligned = Vec::with_capacity(n_u);
                for (j, rec) in full_recs.iter().enumerate() {
                    let donor = rec.cutmix.map(|b| &pseudo_geo[b.source_index]);
                    aligned.push(apply_to_labels(rec, &pseudo[j], donor)?);
                }
                let pseudo_stack = BatchPlan::stack_labels(&aligned);

                let cb = ctsa::bind(&self.ctsa, &mut tape, true)?;
                let t4 = tape.from_array(&feats_aligned[3], false)?;
                let recon = ctsa::ctsa_forward(&mut tape, &self.ctsa, &cb, out_s.features[3], t4)?;
                let ctsa_feats = [
                    out_s.features[0],
                    out_s.features[1],
                    out_s.features[2],
                    recon,
                ];
                let ctsa_logits = self.student.decode(&mut tape, &binding, &ctsa_feats)?;
                let (l_ctsa_ref, _) = ctsa_loss(&mut tape, ctsa_logits, &pseudo_stack)?;
                report.l_ctsa = finite_or("l_ctsa", tape.item(l_ctsa_ref)?)? as f64;
                total = tape.add(total, l_ctsa_ref)?;
                ctsa_bound = Some(cb);
            }
        }

        finite_or("total", tape.item(total)?)?;
        report.total = report.l_s + report.l_c + report.l_msuc + report.l_ctsa;
        tape.backward(total)?;

        // SGD with momentum; weight decay on weights only.
        let lr32 = lr as f32;
        let wd = cfg.weight_decay as f32;
        let mu = cfg.momentum as f32;
        let velocity = &mut self.velocity;
        let mut vi = 0usize;
        let mut pi = 0usize;
        {
            let param_refs = &binding.param_refs;
            let tape_ref = &tape;
            self.student.visit_params_mut(|_, tag, arr| {
                let g = tape_ref.grad(param_refs[pi]).expect("trainable param grad");
                let v = &mut velocity[vi];
                apply_sgd(arr, v, g, tag, lr32, wd, mu);
                pi += 1;
                vi += 1;
            });
        }
        if let Some(cb) = &ctsa_bound {
            let mut ci = 0usize;
            let tape_ref = &tape;
            self.ctsa.visit_params_mut(|_, tag, arr| {
                let g = tape_ref.grad(cb.param_refs[ci]).expect("trainable ctsa grad");
                let v = &mut velocity[vi];
                apply_sgd(arr, v, g, tag, lr32, wd, mu);
                ci += 1;
                vi += 1;
            });
        }

        ema_update(&mut self.teacher, &self.student, &mut self.ema)?;
        self.step += 1;
        Ok(report)
    }
}

fn apply_sgd(
    param: &mut Array<f32>,
    velocity: &mut Array<f32>,
    grad: &[f32],
    tag: ParamTag,
    lr: f32,
    wd: f32,
    mu: f32,
) {
    let decay = if tag == ParamTag::Weight { wd } else { 0.0 };
    for ((p, v), &g) in param.data.iter_mut().zip(velocity.data.iter_mut()).zip(grad) {
        let g = g + decay * *p;
        *v = mu * *v + g;
        *p -= lr * *v;
    }
}

// ── validation ────────────────────────────────────────────────────────

/// Eval-mode forward, argmax, confusion-matrix metrics over a split.
pub fn eval_split(
    model: &SegModel<f32>,
    man: &DatasetManifest,
    split: Split,
) -> Result<(MetricsReport, ConfusionMatrix)> {
    let n = man.entries(split).len();
    if n == 0 {
        return Err(Error::Data(format!("validate: {} split is empty", split.name())));
    }
    let mut cm = ConfusionMatrix::new(model.spec.num_classes);
    let chunk = 8usize;
    let mut dummy = Rng64::seed_from(0);
    for start in (0..n).step_by(chunk) {
        let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
        let plan = load_batch(man, split, &idx, true)?;
        let mut tape = Tape::<f32>::no_grad();
        let b = model.bind(&mut tape, false)?;
        let x = tape.from_array(&BatchPlan::stack_images(&plan.images), false)?;
        let out = model.forward(&mut tape, &b, x, ForwardMode::Eval, &mut dummy)?;
        let pred = argmax_labels(&tape.to_array(out.logits));
        let truth = BatchPlan::stack_labels(plan.labels.as_ref().unwrap());
        cm.accumulate(&pred, &truth)?;
    }
    Ok((metrics_from(&cm)?, cm))
}

pub fn validate(model: &SegModel<f32>, man: &DatasetManifest, split: Split) -> Result<MetricsReport> {
    eval_split(model, man, split).map(|(r, _)| r)
}

/// Evaluation through the attention path: student stage features with the
/// deepest one reconstructed from the teacher, decoded by the student.
pub fn eval_split_with_ctsa(
    student: &SegModel<f32>,
    teacher: &SegModel<f32>,
    params: &CtsaParams<f32>,
    man: &DatasetManifest,
    split: Split,
) -> Result<(MetricsReport, ConfusionMatrix)> {
    let n = man.entries(split).len();
    if n == 0 {
        return Err(Error::Data(format!("validate: {} split is empty", split.name())));
    }
    let mut cm = ConfusionMatrix::new(student.spec.num_classes);
    let chunk = 8usize;
    let mut dummy = Rng64::seed_from(0);
    for start in (0..n).step_by(chunk) {
        let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
        let plan = load_batch(man, split, &idx, true)?;
        let mut tape = Tape::<f32>::no_grad();
        let sb = student.bind(&mut tape, false)?;
        let tb = teacher.bind(&mut tape, false)?;
        let cb = ctsa::bind(params, &mut tape, false)?;
        let x = tape.from_array(&BatchPlan::stack_images(&plan.images), false)?;
        let s_out = student.forward(&mut tape, &sb, x, ForwardMode::Eval, &mut dummy)?;
        let t_out = teacher.forward(&mut tape, &tb, x, ForwardMode::Eval, &mut dummy)?;
        let t4 = tape.stop_gradient(t_out.features[3]);
        let recon = ctsa::ctsa_forward(&mut tape, params, &cb, s_out.features[3], t4)?;
        let feats = [s_out.features[0], s_out.features[1], s_out.features[2], recon];
        let logits = student.decode(&mut tape, &sb, &feats)?;
        let pred = argmax_labels(&tape.to_array(logits));
        let truth = BatchPlan::stack_labels(plan.labels.as_ref().unwrap());
        cm.accumulate(&pred, &truth)?;
    }
    Ok((metrics_from(&cm)?, cm))
}

pub fn validate_with_ctsa(
    student: &SegModel<f32>,
    teacher: &SegModel<f32>,
    params: &CtsaParams<f32>,
    man: &DatasetManifest,
    split: Split,
) -> Result<MetricsReport> {
    eval_split_with_ctsa(student, teacher, params, man, split).map(|(r, _)| r)
}

// ── full runs ─────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub best_val_miou: f64,
    pub best_epoch: usize,
    pub steps: u64,
    pub empty_ce_warnings: u64,
    pub out_dir: PathBuf,
}

/// Guards an output directory against concurrent runs.
struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
        let path = dir.join(".muca-lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Data(format!(
                "{}: output directory is locked by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(format!("lock {}", path.display()), e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn val_csv_header() -> &'static str {
    "epoch,miou,mf1,oa,kappa"
}

/// Train per the config on the manifest's labeled/unlabeled pools, logging
/// per-step losses and per-validation metrics, retaining the checkpoint
/// with the best teacher validation mIoU.
pub fn run_training(
    cfg: &TrainConfig,
    manifest_path: &Path,
    out_dir: &Path,
) -> Result<RunSummary> {
    let _lock = RunLock::acquire(out_dir)?;
    atomic_write(&out_dir.join("resolved_config.txt"), cfg.resolved_text().as_bytes())?;

    let man = DatasetManifest::load(manifest_path)?;
    let (labeled_pool, unlabeled_pool) = man.labeled_split(cfg.labeled_ratio);
    if labeled_pool.is_empty() {
        return Err(Error::Data("run_training: labeled pool is empty".into()));
    }
    if cfg.mode.uses_unlabeled() && unlabeled_pool.is_empty() {
        return Err(Error::Data(
            "run_training: unlabeled pool is empty; use mode onlysup or lower the ratio".into(),
        ));
    }
    // Probe one image for geometry; scan all train labels for the class count.
    let probe = load_batch(&man, Split::Train, &[labeled_pool[0]], true)?;
    let spec = StageSpec {
        input_channels: probe.images[0].shape[0],
        num_classes: scan_num_classes(&man)?,
        channels: StageSpec::default().channels,
    };

    let mut trainer = Trainer::new(cfg.clone(), spec)?;
    let sampler_seed = Rng64::seed_from(cfg.seed);
    let mut sampler_l = CyclicSampler::new(labeled_pool, sampler_seed.derive(0x11));
    let mut sampler_u = CyclicSampler::new(unlabeled_pool, sampler_seed.derive(0x22));

    let mut loss_csv = format!("{}\n", LossReport::csv_header());
    let mut val_csv = format!("{}\n", val_csv_header());
    let mut best_miou = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    for epoch in 0..cfg.epochs {
        for _ in 0..cfg.steps_per_epoch {
            let l_idx = sampler_l.take(cfg.batch_labeled);
            let labeled = load_batch(&man, Split::Train, &l_idx, true)?;
            let unlabeled = if cfg.mode.uses_unlabeled() {
                let u_idx = sampler_u.take(cfg.batch_unlabeled);
                load_batch(&man, Split::Train, &u_idx, false)?
            } else {
                BatchPlan::default()
            };
            let report = trainer.train_step(&labeled, &unlabeled)?;
            loss_csv.push_str(&report.to_csv_row());
            loss_csv.push('\n');
        }
        let is_last = epoch + 1 == cfg.epochs;
        if (epoch + 1) % cfg.val_every.max(1) == 0 || is_last {
            let rep = validate(&trainer.teacher, &man, Split::Val)?;
            val_csv.push_str(&format!(
                "{},{},{},{},{}\n",
                epoch, rep.miou, rep.mf1, rep.oa, rep.kappa
            ));
            if rep.miou > best_miou {
                best_miou = rep.miou;
                best_epoch = epoch;
                let blob = format!(
                    "{}best_val_miou = {}\nbest_epoch = {}\n",
                    cfg.resolved_text(),
                    rep.miou,
                    epoch
                );
                checkpoint::save(
                    &out_dir.join("best.ckpt"),
                    &trainer.student,
                    &trainer.teacher,
                    &trainer.ctsa,
                    &blob,
                )?;
            }
        }
    }
    atomic_write(&out_dir.join("loss.csv"), loss_csv.as_bytes())?;
    atomic_write(&out_dir.join("val_metrics.csv"), val_csv.as_bytes())?;
    Ok(RunSummary {
        best_val_miou: best_miou,
        best_epoch,
        steps: trainer.step,
        empty_ce_warnings: trainer.empty_ce_warnings,
        out_dir: out_dir.to_path_buf(),
    })
}

/// Largest class id across every train label raster, plus one.
fn scan_num_classes(man: &DatasetManifest) -> Result<usize> {
    let mut max = 0u8;
    for (_, lab_rel) in &man.train {
        let l = crate::synth::read_pgm(&man.root.join(lab_rel))?;
        for &v in &l.data {
            if v != crate::tensor::IGNORE_LABEL && v > max {
                max = v;
            }
        }
    }
    Ok((max as usize + 1).max(2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SceneSpec};

    #[test]
    fn lr_schedule_endpoints_and_midpoint() {
        let cfg = TrainConfig { epochs: 100, ..TrainConfig::default() };
        assert_eq!(cfg.lr_at(0), 0.007);
        assert!((cfg.lr_at(50) - 0.007 * 0.5f64.powf(0.9)).abs() < 1e-15);
        assert!((cfg.lr_at(50) - 0.003752).abs() < 1e-6);
        assert!(cfg.lr_at(99) >= 0.00007);
        // The floor clamps late epochs.
        let steep = TrainConfig { epochs: 1000, lr_min: 0.001, ..TrainConfig::default() };
        assert_eq!(steep.lr_at(999), 0.001);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!(TrainMode::parse("muca").unwrap(), TrainMode::Muca);
        assert_eq!(TrainMode::parse("onlysup").unwrap(), TrainMode::OnlySup);
        assert!(TrainMode::parse("bogus").is_err());
        assert!(!TrainMode::NoUc.masks_by_uncertainty());
        assert!(TrainMode::NoUc.uses_msuc());
    }

    fn tiny_dataset(seed: u64) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec { height: 32, width: 32, seed, ..SceneSpec::default() };
        generate(&spec, 12, dir.path()).unwrap();
        let path = dir.path().join("manifest.tsv");
        (dir, path)
    }

    fn tiny_cfg(mode: TrainMode) -> TrainConfig {
        TrainConfig {
            mode,
            epochs: 2,
            steps_per_epoch: 2,
            batch_labeled: 2,
            batch_unlabeled: 2,
            mc_passes: 2,
            labeled_ratio: 0.3,
            val_every: 1,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn onlysup_zeroes_unsupervised_terms() {
        let (_dir, man_path) = tiny_dataset(31);
        let man = DatasetManifest::load(&man_path).unwrap();
        let (lp, _) = man.labeled_split(0.3);
        let cfg = tiny_cfg(TrainMode::OnlySup);
        let mut tr = Trainer::new(
            cfg,
            StageSpec { num_classes: 5, ..StageSpec::default() },
        )
        .unwrap();
        let labeled = load_batch(&man, Split::Train, &lp[..2], true).unwrap();
        let report = tr.train_step(&labeled, &BatchPlan::default()).unwrap();
        assert_eq!(report.l_c, 0.0);
        assert_eq!(report.l_msuc, 0.0);
        assert_eq!(report.l_ctsa, 0.0);
        assert_eq!(report.total, report.l_s);
        assert!(report.l_s > 0.0);
    }

    #[test]
    fn report_total_is_sum_and_fractions_bounded() {
        let (_dir, man_path) = tiny_dataset(32);
        let man = DatasetManifest::load(&man_path).unwrap();
        let (lp, up) = man.labeled_split(0.3);
        let cfg = tiny_cfg(TrainMode::Muca);
        let mut tr = Trainer::new(
            cfg,
            StageSpec { num_classes: 5, ..StageSpec::default() },
        )
        .unwrap();
        let labeled = load_batch(&man, Split::Train, &lp[..2], true).unwrap();
        let unlabeled = load_batch(&man, Split::Train, &up[..2], false).unwrap();
        let report = tr.train_step(&labeled, &unlabeled).unwrap();
        assert_eq!(report.total, report.l_s + report.l_c + report.l_msuc + report.l_ctsa);
        for f in report.masked_fraction_per_stage {
            assert!((0.0..=1.0).contains(&f));
        }
        assert!(report.l_c > 0.0);
        assert!(report.l_ctsa >= 0.0);
    }

    #[test]
    fn teacher_follows_exact_ema_recurrence() {
        let (_dir, man_path) = tiny_dataset(33);
        let man = DatasetManifest::load(&man_path).unwrap();
        let (lp, up) = man.labeled_split(0.3);
        let cfg = tiny_cfg(TrainMode::Msuc);
        let alpha = cfg.ema_alpha as f32;
        let mut tr = Trainer::new(
            cfg,
            StageSpec { num_classes: 5, ..StageSpec::default() },
        )
        .unwrap();
        let labeled = load_batch(&man, Split::Train, &lp[..2], true).unwrap();
        let unlabeled = load_batch(&man, Split::Train, &up[..2], false).unwrap();
        for _ in 0..2 {
            let mut t_before = Vec::new();
            tr.teacher.visit_params(|_, _, a| t_before.push(a.data.clone()));
            tr.train_step(&labeled, &unlabeled).unwrap();
            let mut s_after = Vec::new();
            tr.student.visit_params(|_, _, a| s_after.push(a.data.clone()));
            let mut i = 0;
            tr.teacher.visit_params(|_, _, a| {
                for (j, &v) in a.data.iter().enumerate() {
                    let expect = alpha * t_before[i][j] + (1.0 - alpha) * s_after[i][j];
                    assert_eq!(v, expect, "teacher param diverged from the EMA recurrence");
                }
                i += 1;
            });
        }
    }

    #[test]
    fn full_runs_are_bit_deterministic() {
        let (_dir, man_path) = tiny_dataset(34);
        let cfg = tiny_cfg(TrainMode::Muca);
        let o1 = tempfile::tempdir().unwrap();
        let o2 = tempfile::tempdir().unwrap();
        let s1 = run_training(&cfg, &man_path, o1.path()).unwrap();
        let s2 = run_training(&cfg, &man_path, o2.path()).unwrap();
        assert_eq!(s1.best_val_miou, s2.best_val_miou);
        let a = fs::read(o1.path().join("loss.csv")).unwrap();
        let b = fs::read(o2.path().join("loss.csv")).unwrap();
        assert_eq!(a, b);
        let va = fs::read(o1.path().join("val_metrics.csv")).unwrap();
        let vb = fs::read(o2.path().join("val_metrics.csv")).unwrap();
        assert_eq!(va, vb);
        assert!(o1.path().join("best.ckpt").exists());
        assert!(o1.path().join("resolved_config.txt").exists());
        assert!(!o1.path().join(".muca-lock").exists(), "lock released");
    }

    #[test]
    #[ignore = "timing probe, run explicitly"]
    fn bench_step_timing() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec { height: 64, width: 64, seed: 77, ..SceneSpec::default() };
        generate(&spec, 20, dir.path()).unwrap();
        let man = DatasetManifest::load(&dir.path().join("manifest.tsv")).unwrap();
        let (lp, up) = man.labeled_split(0.3);
        for mode in [TrainMode::OnlySup, TrainMode::Msuc, TrainMode::Ctsa, TrainMode::Muca] {
            let cfg = TrainConfig { mode, seed: 5, ..TrainConfig::default() };
            let mut tr = Trainer::new(cfg, StageSpec::default()).unwrap();
            let labeled = load_batch(&man, Split::Train, &lp[..4], true).unwrap();
            let unlabeled = load_batch(&man, Split::Train, &up[..4], false).unwrap();
            tr.train_step(&labeled, &unlabeled).unwrap();
            let t0 = std::time::Instant::now();
            let n = 5;
            for _ in 0..n {
                tr.train_step(&labeled, &unlabeled).unwrap();
            }
            eprintln!(
                "{}: {:.0} ms/step",
                mode.name(),
                t0.elapsed().as_secs_f64() * 1000.0 / n as f64
            );
        }
        let t0 = std::time::Instant::now();
        let cfg = TrainConfig { seed: 5, ..TrainConfig::default() };
        let tr = Trainer::new(cfg, StageSpec::default()).unwrap();
        validate(&tr.teacher, &man, Split::Val).unwrap();
        eprintln!("validate(4 images): {:.0} ms", t0.elapsed().as_secs_f64() * 1000.0);
    }

    #[test]
    fn lock_blocks_concurrent_runs() {
        let dir = tempfile::tempdir().unwrap();
        let _lock = RunLock::acquire(dir.path()).unwrap();
        assert!(RunLock::acquire(dir.path()).is_err());
    }

    #[test]
    fn validate_is_deterministic_and_checkpoint_reload_matches() {
        let (_dir, man_path) = tiny_dataset(35);
        let man = DatasetManifest::load(&man_path).unwrap();
        let cfg = tiny_cfg(TrainMode::Ctsa);
        let out = tempfile::tempdir().unwrap();
        let summary = run_training(&cfg, &man_path, out.path()).unwrap();
        let ck = checkpoint::load(&out.path().join("best.ckpt")).unwrap();
        let rep = validate(&ck.teacher, &man, Split::Val).unwrap();
        assert!((rep.miou - summary.best_val_miou).abs() < 1e-9);
        let rep2 = validate(&ck.teacher, &man, Split::Val).unwrap();
        assert_eq!(rep.miou, rep2.miou);
        // The attention path evaluates cleanly too.
        let repc = validate_with_ctsa(&ck.student, &ck.teacher, &ck.ctsa, &man, Split::Val).unwrap();
        assert!((0.0..=1.0).contains(&repc.miou));
    }
}
