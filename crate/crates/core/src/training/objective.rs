use crate::autodiff::{Graph, Tensor, Var};
use crate::encoders::{Bound, Model};
use crate::losses::{self, LossSpec, LossTerm};

use super::TrainError;

/// Frozen-teacher outputs for one video, used as distillation targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherOutputs {
    pub embedding: Vec<f64>,
    pub intermediates: Vec<Vec<f64>>,
    pub probs: Vec<f64>,
}

/// Targets for one equal-length batch, rows aligned with the clips.
#[derive(Debug, Clone)]
pub struct BatchTargets {
    /// Multi-hot labels `[B, m]`.
    pub labels: Tensor,
    pub teacher: Option<TeacherBatch>,
}

#[derive(Debug, Clone)]
pub struct TeacherBatch {
    pub embedding: Tensor,
    pub intermediates: Vec<Tensor>,
    pub probs: Tensor,
}

impl BatchTargets {
    /// Stacks per-video labels and (optionally) teacher outputs. Intermediate
    /// lists are truncated to the shortest in the batch.
    pub fn new(labels: &[Vec<f64>], teacher: Option<&[&TeacherOutputs]>) -> Result<Self, TrainError> {
        let labels = Tensor::from_rows(labels)?;
        let teacher = match teacher {
            None => None,
            Some(outs) => {
                let rows = |f: &dyn Fn(&TeacherOutputs) -> &Vec<f64>| -> Result<Tensor, TrainError> {
                    Ok(Tensor::from_rows(&outs.iter().map(|o| f(o).clone()).collect::<Vec<_>>())?)
                };
                let blocks = outs.iter().map(|o| o.intermediates.len()).min().unwrap_or(0);
                let intermediates =
                    (0..blocks).map(|i| rows(&|o| &o.intermediates[i])).collect::<Result<Vec<_>, _>>()?;
                Some(TeacherBatch { embedding: rows(&|o| &o.embedding)?, intermediates, probs: rows(&|o| &o.probs)? })
            }
        };
        Ok(Self { labels, teacher })
    }
}

/// Sum of the enabled loss terms over a batch, divided by the batch size.
/// Also returns each term's batch sum (unweighted).
pub fn objective(
    g: &mut Graph,
    model: &Model,
    bound: &Bound,
    clips: &[Tensor],
    targets: &BatchTargets,
    spec: &LossSpec,
    train: bool,
) -> Result<(Var, Vec<(LossTerm, Var)>), TrainError> {
    let enc = model.encode(g, bound, clips, train)?;
    let needs_probs = spec.has(LossTerm::Ce) || spec.has(LossTerm::Pred);
    let probs = if needs_probs { Some(model.classify(g, bound, enc.embedding)?) } else { None };
    let teacher = || {
        targets.teacher.as_ref().ok_or_else(|| TrainError::Config("distillation term without teacher targets".into()))
    };
    let mut terms = Vec::with_capacity(spec.terms.len());
    for wt in &spec.terms {
        let v = match wt.term {
            LossTerm::Ce => {
                let y = g.constant(targets.labels.clone());
                losses::ce(g, probs.unwrap(), y)?
            }
            LossTerm::Rep => {
                let t = g.constant(teacher()?.embedding.clone());
                losses::rep(g, enc.embedding, t)?
            }
            LossTerm::RepI => {
                let t: Vec<Var> = teacher()?.intermediates.iter().map(|x| g.constant(x.clone())).collect();
                losses::rep_intermediate(g, &enc.intermediates, &t)?
            }
            LossTerm::Pred => {
                let t = g.constant(teacher()?.probs.clone());
                losses::pred(g, probs.unwrap(), t, spec.pred_distance)?
            }
        };
        terms.push((wt.term, v));
    }
    let total = losses::combine_vars(g, spec, &terms)?;
    Ok((g.affine(total, 1.0 / clips.len() as f64, 0.0), terms))
}

/// `l2 * sum ||theta||^2` over the trainable parameters, or `None` when
/// `l2 == 0` or nothing is trainable.
pub fn l2_penalty(g: &mut Graph, bound: &Bound, trainable: &[bool], l2: f64) -> Result<Option<Var>, TrainError> {
    if l2 == 0.0 {
        return Ok(None);
    }
    let mut total: Option<Var> = None;
    for (&v, _) in bound.vars().iter().zip(trainable).filter(|(_, &t)| t) {
        let sq = g.mul(v, v)?;
        let s = g.sum(sq);
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    Ok(total.map(|t| g.affine(t, l2, 0.0)))
}
