use std::collections::BTreeMap;

use crate::autodiff::{Graph, Tensor};
use crate::dataio::VideoRecord;
use crate::encoders::{EncoderConfig, Model, ParamStore};
use crate::losses::{Combo, LossSpec, LossTerm};
use crate::metrics::evaluate;
use crate::rng::{derive_seed, SplitMix64};
use crate::sampling::{clip, SamplerSpec};

use super::objective::{l2_penalty, objective, BatchTargets, TeacherOutputs};
use super::{lr_at, Adam, DistillConfig, EpochRecord, ModelBundle, Role, TrainConfig, TrainError};

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const DROPOUT_STREAM: u64 = 0x4452_4f50;
const TEACHER_BATCH: usize = 64;

/// Clips and multi-hot labels of a dataset as one model sees it.
struct Prepared {
    clips: Vec<Tensor>,
    labels: Vec<Vec<f64>>,
}

impl Prepared {
    fn new(data: &[VideoRecord], sampler: Option<&SamplerSpec>, model: &Model) -> Result<Self, TrainError> {
        let cfg = model.config();
        for r in data {
            if r.dim() != cfg.input_dim {
                return Err(TrainError::Config(format!(
                    "{}: feature width {} but encoder expects {}",
                    r.id,
                    r.dim(),
                    cfg.input_dim
                )));
            }
            r.check_classes(cfg.num_classes).map_err(|e| TrainError::Config(e.to_string()))?;
        }
        Ok(Self {
            clips: data.iter().map(|r| clip(r, sampler)).collect(),
            labels: data.iter().map(|r| r.target(cfg.num_classes)).collect(),
        })
    }

    fn len(&self) -> usize {
        self.clips.len()
    }

    fn frames(&self, i: usize) -> usize {
        self.clips[i].shape()[0]
    }
}

fn check_data(train: &[VideoRecord], val: &[VideoRecord]) -> Result<(), TrainError> {
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::Config("training and validation sets must be non-empty".into()));
    }
    Ok(())
}

fn max_frames(data: &[VideoRecord]) -> usize {
    data.iter().map(VideoRecord::n_frames).max().unwrap_or(1)
}

/// Splits `idx` into runs of equal clip length, keeping first-seen order.
fn group_by_len(idx: &[usize], prep: &Prepared) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in idx {
        groups.entry(prep.frames(i)).or_default().push(i);
    }
    groups.into_values().collect()
}

/// Shuffled mini-batches for one epoch.
fn epoch_batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    SplitMix64::stream(derive_seed(seed, SHUFFLE_STREAM), epoch as u64).shuffle(&mut order);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Eval-mode embeddings, block embeddings and probabilities for every clip.
pub(crate) fn teacher_outputs(model: &Model, clips: &[Tensor]) -> Result<Vec<TeacherOutputs>, TrainError> {
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, c) in clips.iter().enumerate() {
        by_len.entry(c.shape()[0]).or_default().push(i);
    }
    let mut out: Vec<Option<TeacherOutputs>> = vec![None; clips.len()];
    for idx in by_len.values() {
        for chunk in idx.chunks(TEACHER_BATCH) {
            let batch: Vec<Tensor> = chunk.iter().map(|&i| clips[i].clone()).collect();
            let mut g = Graph::new();
            let bound = model.bind(&mut g, |_| false);
            let enc = model.encode(&mut g, &bound, &batch, false)?;
            let probs = model.classify(&mut g, &bound, enc.embedding)?;
            let row = |g: &Graph, v, r: usize| g.value(v).row(r).to_vec();
            for (r, &i) in chunk.iter().enumerate() {
                out[i] = Some(TeacherOutputs {
                    embedding: row(&g, enc.embedding, r),
                    intermediates: enc.intermediates.iter().map(|&v| row(&g, v, r)).collect(),
                    probs: row(&g, probs, r),
                });
            }
        }
    }
    Ok(out.into_iter().map(Option::unwrap).collect())
}

/// A model being optimized on one objective.
struct Learner {
    model: Model,
    adam: Adam,
    trainable: Vec<bool>,
    spec: LossSpec,
    /// Dropout seeds come from this stream, indexed by step.
    dropout_seed: u64,
}

struct StepStats {
    loss: f64,
    terms: Vec<(LossTerm, f64)>,
}

impl Learner {
    fn new(model: Model, spec: LossSpec, trainable: impl Fn(&str) -> bool, cfg: &TrainConfig, slot: u64) -> Self {
        let trainable = model.params().names().iter().map(|n| trainable(n)).collect();
        let adam = Adam::new(model.params(), cfg.beta1, cfg.beta2, cfg.adam_eps);
        let dropout_seed = derive_seed(derive_seed(cfg.seed, DROPOUT_STREAM), slot);
        Self { model, adam, trainable, spec, dropout_seed }
    }

    /// One Adam update on the batch `idx` of `prep`.
    fn step(
        &mut self,
        prep: &Prepared,
        idx: &[usize],
        teacher: Option<&[TeacherOutputs]>,
        cfg: &TrainConfig,
        lr: f64,
    ) -> Result<StepStats, TrainError> {
        let mut g = Graph::with_seed(derive_seed(self.dropout_seed, self.adam.steps()));
        let bound = self.model.params().bind_mask(&mut g, &self.trainable);
        let b = idx.len() as f64;
        let mut total = None;
        let mut term_vars = Vec::new();
        for group in group_by_len(idx, prep) {
            let clips: Vec<Tensor> = group.iter().map(|&i| prep.clips[i].clone()).collect();
            let labels: Vec<Vec<f64>> = group.iter().map(|&i| prep.labels[i].clone()).collect();
            let outs: Option<Vec<&TeacherOutputs>> = teacher.map(|t| group.iter().map(|&i| &t[i]).collect());
            let targets = BatchTargets::new(&labels, outs.as_deref())?;
            let (obj, terms) = objective(&mut g, &self.model, &bound, &clips, &targets, &self.spec, true)?;
            let weighted = g.affine(obj, group.len() as f64 / b, 0.0);
            total = Some(match total {
                Some(t) => g.add(t, weighted)?,
                None => weighted,
            });
            term_vars.extend(terms);
        }
        let mut total = total.expect("batch is non-empty");
        if let Some(p) = l2_penalty(&mut g, &bound, &self.trainable, cfg.l2)? {
            total = g.add(total, p)?;
        }
        let loss = g.value(total).item();
        let mut terms: Vec<(LossTerm, f64)> = Vec::new();
        for (t, v) in term_vars {
            let x = g.value(v).item();
            match terms.iter_mut().find(|(u, _)| *u == t) {
                Some((_, s)) => *s += x,
                None => terms.push((t, x)),
            }
        }
        if !loss.is_finite() {
            return Err(TrainError::Diverged { epoch: 0, step: self.adam.steps() as usize, loss });
        }
        g.backward(total)?;
        let grads = bound.grads(&g);
        drop(g);
        self.adam.update(self.model.params_mut(), &grads, &self.trainable, lr);
        Ok(StepStats { loss, terms })
    }
}

/// Running epoch means and best-epoch bookkeeping.
struct Tracker {
    role: Role,
    history: Vec<EpochRecord>,
    best: Option<(f64, usize, ParamStore)>,
}

impl Tracker {
    fn new(role: Role) -> Self {
        Self { role, history: Vec::new(), best: None }
    }

    fn record(&mut self, model: &Model, loss: f64, terms: Vec<(LossTerm, f64)>, val_gap: f64) {
        let epoch = self.history.len();
        self.history.push(EpochRecord { epoch, loss, val_gap, role: self.role, terms });
        if self.best.as_ref().is_none_or(|(g, _, _)| val_gap > *g) {
            self.best = Some((val_gap, epoch, model.params().clone()));
        }
    }

    fn finish(self, mut model: Model, sampler: Option<SamplerSpec>, updates: u64) -> ModelBundle {
        let (_, best_epoch, params) = self.best.expect("at least one epoch");
        *model.params_mut() = params;
        ModelBundle { model, role: self.role, sampler, history: self.history, best_epoch, updates }
    }
}

#[derive(Default)]
struct EpochSums {
    loss: f64,
    batches: usize,
    terms: Vec<(LossTerm, f64)>,
}

impl EpochSums {
    fn add(&mut self, s: StepStats) {
        self.loss += s.loss;
        self.batches += 1;
        for (t, v) in s.terms {
            match self.terms.iter_mut().find(|(u, _)| *u == t) {
                Some((_, x)) => *x += v,
                None => self.terms.push((t, v)),
            }
        }
    }

    fn means(self, videos: usize) -> (f64, Vec<(LossTerm, f64)>) {
        let terms = self.terms.into_iter().map(|(t, v)| (t, v / videos as f64)).collect();
        (self.loss / self.batches as f64, terms)
    }
}

/// Runs `cfg.epochs` epochs of `learner` and records each in `tracker`.
fn fit(
    learner: &mut Learner,
    tracker: &mut Tracker,
    prep: &Prepared,
    teacher: Option<&[TeacherOutputs]>,
    val: &[VideoRecord],
    sampler: Option<&SamplerSpec>,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    for epoch in 0..cfg.epochs {
        let lr = lr_at(cfg, epoch);
        let mut sums = EpochSums::default();
        for batch in epoch_batches(prep.len(), cfg.batch, cfg.seed, tracker.history.len()) {
            let stats = learner.step(prep, &batch, teacher, cfg, lr).map_err(|e| with_epoch(e, epoch))?;
            sums.add(stats);
        }
        let (loss, terms) = sums.means(prep.len());
        let val_gap = evaluate(&learner.model, val, sampler)?.gap;
        tracker.record(&learner.model, loss, terms, val_gap);
    }
    Ok(())
}

fn with_epoch(e: TrainError, epoch: usize) -> TrainError {
    match e {
        TrainError::Diverged { step, loss, .. } => TrainError::Diverged { epoch, step, loss },
        other => other,
    }
}

fn ce_only() -> LossSpec {
    LossSpec::new(&[(LossTerm::Ce, 1.0)])
}

/// Full-frame model trained on cross-entropy; the skyline.
pub fn train_teacher(
    train: &[VideoRecord],
    val: &[VideoRecord],
    enc: &EncoderConfig,
    cfg: &TrainConfig,
) -> Result<ModelBundle, TrainError> {
    fit_from_scratch(train, val, enc, cfg, None, Role::Teacher)
}

/// Model trained from scratch on cross-entropy over `sampler`'s frames only.
pub fn train_baseline(
    train: &[VideoRecord],
    val: &[VideoRecord],
    enc: &EncoderConfig,
    cfg: &TrainConfig,
    sampler: &SamplerSpec,
) -> Result<ModelBundle, TrainError> {
    sampler.validate().map_err(TrainError::Config)?;
    check_data(train, val)?;
    let enc = enc.for_frames(sampler.k, max_frames(train));
    fit_from_scratch(train, val, &enc, cfg, Some(*sampler), Role::Baseline)
}

fn fit_from_scratch(
    train: &[VideoRecord],
    val: &[VideoRecord],
    enc: &EncoderConfig,
    cfg: &TrainConfig,
    sampler: Option<SamplerSpec>,
    role: Role,
) -> Result<ModelBundle, TrainError> {
    cfg.validate()?;
    check_data(train, val)?;
    let model = Model::new(cfg.encoder(enc), cfg.seed)?;
    let prep = Prepared::new(train, sampler.as_ref(), &model)?;
    let mut learner = Learner::new(model, ce_only(), |_| true, cfg, 0);
    let mut tracker = Tracker::new(role);
    fit(&mut learner, &mut tracker, &prep, None, val, sampler.as_ref(), cfg)?;
    let updates = learner.adam.steps();
    Ok(tracker.finish(learner.model, sampler, updates))
}

/// Student encoder config and the checks shared by serial and parallel runs.
fn student_setup(
    teacher_cfg: &EncoderConfig,
    train: &[VideoRecord],
    val: &[VideoRecord],
    distill: &DistillConfig,
    cfg: &TrainConfig,
) -> Result<EncoderConfig, TrainError> {
    cfg.validate()?;
    distill.validate()?;
    check_data(train, val)?;
    let student = cfg.encoder(teacher_cfg).for_frames(distill.k, max_frames(train));
    teacher_cfg.check_parity(&student)?;
    if distill.loss_spec().needs_intermediates()
        && !matches!(student.architecture, crate::encoders::Architecture::Hrnn { .. })
    {
        return Err(TrainError::Config("intermediate matching needs an hrnn encoder".into()));
    }
    Ok(student)
}

/// Distills a frozen teacher into a student that sees `distill.k` frames.
///
/// Combo `a` first matches representations with the head frozen, then
/// fine-tunes everything on cross-entropy with a fresh optimizer. Other combos
/// run one stage; the head starts as the teacher's and is trained only when
/// cross-entropy is part of the objective.
pub fn train_student_serial(
    teacher: &ModelBundle,
    train: &[VideoRecord],
    val: &[VideoRecord],
    distill: &DistillConfig,
    cfg: &TrainConfig,
) -> Result<ModelBundle, TrainError> {
    if teacher.sampler.is_some() {
        return Err(TrainError::Config("teacher must see all frames".into()));
    }
    let student_cfg = student_setup(teacher.model.config(), train, val, distill, cfg)?;
    let mut model = Model::new(student_cfg, cfg.seed)?;
    model.copy_head_from(&teacher.model)?;
    let sampler = distill.sampler_spec(cfg.seed);

    let full = Prepared::new(train, None, &teacher.model)?;
    let targets = teacher_outputs(&teacher.model, &full.clips)?;
    drop(full);
    let prep = Prepared::new(train, Some(&sampler), &model)?;

    let spec = distill.loss_spec();
    let train_head = spec.has(LossTerm::Ce);
    let mut tracker = Tracker::new(Role::Student);
    let mut learner = Learner::new(model, spec, |n| train_head || !Model::is_head_param(n), cfg, 0);
    fit(&mut learner, &mut tracker, &prep, Some(&targets), val, Some(&sampler), cfg)?;

    let mut updates = learner.adam.steps();
    if distill.combo == Combo::A {
        let mut stage2 = Learner::new(learner.model, ce_only(), |_| true, cfg, 0);
        // keep dropout masks distinct from stage one
        stage2.dropout_seed = derive_seed(stage2.dropout_seed, 2);
        fit(&mut stage2, &mut tracker, &prep, Some(&targets), val, Some(&sampler), cfg)?;
        updates += stage2.adam.steps();
        learner = stage2;
    }
    Ok(tracker.finish(learner.model, Some(sampler), updates))
}

/// Trains teacher and student together. Each step updates the teacher on
/// cross-entropy, then the student on the distillation objective against the
/// updated teacher's eval-mode outputs. The head is shared: after each
/// update the updated copy is written into the other model.
pub fn train_parallel(
    train: &[VideoRecord],
    val: &[VideoRecord],
    enc: &EncoderConfig,
    distill: &DistillConfig,
    cfg: &TrainConfig,
) -> Result<(ModelBundle, ModelBundle), TrainError> {
    if distill.combo == Combo::A {
        return Err(TrainError::Config("combo a is two-stage and only runs in serial mode".into()));
    }
    let teacher_cfg = cfg.encoder(enc);
    let student_cfg = student_setup(&teacher_cfg, train, val, distill, cfg)?;
    let sampler = distill.sampler_spec(cfg.seed);
    let teacher_model = Model::new(teacher_cfg, cfg.seed)?;
    let mut student_model = Model::new(student_cfg, cfg.seed)?;
    student_model.copy_head_from(&teacher_model)?;

    let full = Prepared::new(train, None, &teacher_model)?;
    let sub = Prepared::new(train, Some(&sampler), &student_model)?;
    let spec = distill.loss_spec();
    let student_ce = spec.has(LossTerm::Ce);

    let mut teacher = Learner::new(teacher_model, ce_only(), |_| true, cfg, 0);
    let mut student = Learner::new(student_model, spec, |n| student_ce || !Model::is_head_param(n), cfg, 1);
    let mut t_track = Tracker::new(Role::Teacher);
    let mut s_track = Tracker::new(Role::Student);
    let mut targets: Vec<TeacherOutputs> = Vec::new();

    for epoch in 0..cfg.epochs {
        let lr = lr_at(cfg, epoch);
        let (mut t_sums, mut s_sums) = (EpochSums::default(), EpochSums::default());
        for batch in epoch_batches(train.len(), cfg.batch, cfg.seed, epoch) {
            t_sums.add(teacher.step(&full, &batch, None, cfg, lr).map_err(|e| with_epoch(e, epoch))?);
            student.model.copy_head_from(&teacher.model)?;
            let clips: Vec<Tensor> = batch.iter().map(|&i| full.clips[i].clone()).collect();
            let outs = teacher_outputs(&teacher.model, &clips)?;
            // scatter into a dataset-indexed buffer for the student step
            if targets.is_empty() {
                targets = vec![outs[0].clone(); train.len()];
            }
            for (&i, o) in batch.iter().zip(outs) {
                targets[i] = o;
            }
            s_sums.add(student.step(&sub, &batch, Some(&targets), cfg, lr).map_err(|e| with_epoch(e, epoch))?);
            if student_ce {
                teacher.model.copy_head_from(&student.model)?;
            }
        }
        let (loss, terms) = t_sums.means(train.len());
        t_track.record(&teacher.model, loss, terms, evaluate(&teacher.model, val, None)?.gap);
        let (loss, terms) = s_sums.means(train.len());
        s_track.record(&student.model, loss, terms, evaluate(&student.model, val, Some(&sampler))?.gap);
    }
    let (tu, su) = (teacher.adam.steps(), student.adam.steps());
    Ok((t_track.finish(teacher.model, None, tu), s_track.finish(student.model, Some(sampler), su)))
}
