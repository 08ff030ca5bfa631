//! Classification and distillation objectives.
//!
//! Graph-level functions return *sums over the batch*; the training loop
//! divides by the batch size. The slice-level functions evaluate one video.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Tensor, TensorError, Var};

/// Probabilities are clipped to `[EPS, 1 - EPS]` before any logarithm.
pub const EPS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("{what}: length {a} vs {b}")]
    LengthMismatch { what: &'static str, a: usize, b: usize },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LossTerm {
    #[serde(rename = "CE")]
    Ce,
    #[serde(rename = "REP")]
    Rep,
    #[serde(rename = "REP_I")]
    RepI,
    #[serde(rename = "PRED")]
    Pred,
}

impl LossTerm {
    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Ce => "CE",
            LossTerm::Rep => "REP",
            LossTerm::RepI => "REP_I",
            LossTerm::Pred => "PRED",
        }
    }

    /// Terms that compare against a teacher.
    pub fn is_distillation(self) -> bool {
        !matches!(self, LossTerm::Ce)
    }
}

impl fmt::Display for LossTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredDistance {
    #[default]
    Sqerr,
    Kl,
}

impl FromStr for PredDistance {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sqerr" => Ok(Self::Sqerr),
            "kl" => Ok(Self::Kl),
            _ => Err(format!("unknown distance {s:?} (expected sqerr|kl)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RepMode {
    #[default]
    Final,
    Intermediate,
}

impl FromStr for RepMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "final" => Ok(Self::Final),
            "intermediate" => Ok(Self::Intermediate),
            _ => Err(format!("unknown rep mode {s:?} (expected final|intermediate)")),
        }
    }
}

/// Student objective combinations.
///
/// `A` trains on representation matching first and then fine-tunes with
/// cross-entropy; the others are single-stage weighted sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combo {
    A,
    B,
    C,
    D,
    E,
}

impl Combo {
    pub const ALL: [Combo; 5] = [Combo::A, Combo::B, Combo::C, Combo::D, Combo::E];

    /// Terms of the single-stage objective (stage one for `A`), with REP
    /// standing for final or intermediate matching.
    pub fn terms(self) -> &'static [LossTerm] {
        match self {
            Combo::A => &[LossTerm::Rep],
            Combo::B => &[LossTerm::Rep, LossTerm::Ce],
            Combo::C => &[LossTerm::Pred],
            Combo::D => &[LossTerm::Pred, LossTerm::Ce],
            Combo::E => &[LossTerm::Rep, LossTerm::Pred, LossTerm::Ce],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Combo::A => "a",
            Combo::B => "b",
            Combo::C => "c",
            Combo::D => "d",
            Combo::E => "e",
        }
    }
}

impl FromStr for Combo {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Combo::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown combo {s:?} (expected a|b|c|d|e)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightedTerm {
    pub term: LossTerm,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub terms: Vec<WeightedTerm>,
    #[serde(default)]
    pub pred_distance: PredDistance,
    #[serde(default)]
    pub rep_mode: RepMode,
}

impl LossSpec {
    pub fn new(terms: &[(LossTerm, f64)]) -> Self {
        Self {
            terms: terms.iter().map(|&(term, weight)| WeightedTerm { term, weight }).collect(),
            pred_distance: PredDistance::default(),
            rep_mode: RepMode::default(),
        }
    }

    /// Objective for `combo`; REP becomes REP_I under intermediate matching.
    /// `weight` supplies per-term weights (default 1).
    pub fn for_combo(
        combo: Combo,
        rep_mode: RepMode,
        pred_distance: PredDistance,
        weight: impl Fn(LossTerm) -> f64,
    ) -> Self {
        let terms = combo
            .terms()
            .iter()
            .map(|&t| {
                let term = match (t, rep_mode) {
                    (LossTerm::Rep, RepMode::Intermediate) => LossTerm::RepI,
                    (t, _) => t,
                };
                WeightedTerm { term, weight: weight(term) }
            })
            .collect();
        Self { terms, pred_distance, rep_mode }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if self.terms.is_empty() {
            return Err(LossError::Invalid("loss spec has no terms".into()));
        }
        for (i, wt) in self.terms.iter().enumerate() {
            if !(wt.weight > 0.0 && wt.weight.is_finite()) {
                return Err(LossError::Invalid(format!("weight of {} must be positive, got {}", wt.term, wt.weight)));
            }
            if self.terms[..i].iter().any(|o| o.term == wt.term) {
                return Err(LossError::Invalid(format!("duplicate term {}", wt.term)));
            }
        }
        Ok(())
    }

    pub fn has(&self, term: LossTerm) -> bool {
        self.terms.iter().any(|t| t.term == term)
    }

    pub fn needs_intermediates(&self) -> bool {
        self.has(LossTerm::RepI)
    }

    pub fn is_distillation_only(&self) -> bool {
        self.terms.iter().all(|t| t.term.is_distillation())
    }
}

/// `sum_t weight_t * value_t`; every term of `spec` must be supplied.
pub fn combine(spec: &LossSpec, computed: &[(LossTerm, f64)]) -> Result<f64, LossError> {
    spec.validate()?;
    spec.terms.iter().try_fold(0.0, |acc, wt| {
        let v = computed
            .iter()
            .find(|(t, _)| *t == wt.term)
            .map(|(_, v)| *v)
            .ok_or_else(|| LossError::Invalid(format!("missing term {}", wt.term)))?;
        Ok(acc + wt.weight * v)
    })
}

/// Graph counterpart of [`combine`].
pub fn combine_vars(g: &mut Graph, spec: &LossSpec, computed: &[(LossTerm, Var)]) -> Result<Var, LossError> {
    spec.validate()?;
    let mut total: Option<Var> = None;
    for wt in &spec.terms {
        let v = computed
            .iter()
            .find(|(t, _)| *t == wt.term)
            .map(|(_, v)| *v)
            .ok_or_else(|| LossError::Invalid(format!("missing term {}", wt.term)))?;
        let scaled = if wt.weight == 1.0 { v } else { g.affine(v, wt.weight, 0.0) };
        total = Some(match total {
            Some(t) => g.add(t, scaled)?,
            None => scaled,
        });
    }
    Ok(total.expect("validated non-empty"))
}

fn same_shape(g: &Graph, what: &'static str, a: Var, b: Var) -> Result<(), LossError> {
    if g.shape(a) != g.shape(b) {
        return Err(LossError::LengthMismatch { what, a: g.value(a).numel(), b: g.value(b).numel() });
    }
    Ok(())
}

/// Multi-label cross-entropy summed over classes and batch rows.
pub fn ce(g: &mut Graph, probs: Var, targets: Var) -> Result<Var, LossError> {
    same_shape(g, "cross-entropy", probs, targets)?;
    let p = g.clamp(probs, EPS, 1.0 - EPS);
    let log_p = g.log(p)?;
    let q = g.affine(p, -1.0, 1.0);
    let log_q = g.log(q)?;
    let not_y = g.affine(targets, -1.0, 1.0);
    let pos = g.mul(targets, log_p)?;
    let neg = g.mul(not_y, log_q)?;
    let both = g.add(pos, neg)?;
    let s = g.sum(both);
    Ok(g.affine(s, -1.0, 0.0))
}

/// `||e_t - e_s||^2` summed over the batch. `teacher` should be a constant.
pub fn rep(g: &mut Graph, student: Var, teacher: Var) -> Result<Var, LossError> {
    same_shape(g, "representation", student, teacher)?;
    Ok(g.sq_err(student, teacher)?)
}

/// Intermediate matching over the first `min(len)` aligned pairs.
pub fn rep_intermediate(g: &mut Graph, student: &[Var], teacher: &[Var]) -> Result<Var, LossError> {
    let pairs = student.len().min(teacher.len());
    if pairs == 0 {
        return Err(LossError::Invalid("no intermediate representations to match".into()));
    }
    let mut total = rep(g, student[0], teacher[0])?;
    for i in 1..pairs {
        let term = rep(g, student[i], teacher[i])?;
        total = g.add(total, term)?;
    }
    Ok(total)
}

/// Distance between predicted probabilities; `teacher` is a constant.
///
/// `Kl` is the per-class Bernoulli divergence
/// `p log(p/q) + (1-p) log((1-p)/(1-q))` summed over classes.
pub fn pred(g: &mut Graph, student: Var, teacher: Var, distance: PredDistance) -> Result<Var, LossError> {
    same_shape(g, "prediction", student, teacher)?;
    let q = g.clamp(student, EPS, 1.0 - EPS);
    let p_vals: Vec<f64> = g.value(teacher).data().iter().map(|v| v.clamp(EPS, 1.0 - EPS)).collect();
    let shape = g.shape(teacher).to_vec();
    match distance {
        PredDistance::Sqerr => {
            let p = g.constant(Tensor::new(shape, p_vals)?);
            Ok(g.sq_err(q, p)?)
        }
        PredDistance::Kl => {
            let entropy: f64 = p_vals.iter().map(|&p| p * p.ln() + (1.0 - p) * (1.0 - p).ln()).sum();
            let not_p = g.constant(Tensor::new(shape.clone(), p_vals.iter().map(|p| 1.0 - p).collect())?);
            let p = g.constant(Tensor::new(shape, p_vals)?);
            let log_q = g.log(q)?;
            let one_minus_q = g.affine(q, -1.0, 1.0);
            let log_nq = g.log(one_minus_q)?;
            let a = g.mul(p, log_q)?;
            let b = g.mul(not_p, log_nq)?;
            let cross = g.add(a, b)?;
            let cross = g.sum(cross);
            Ok(g.affine(cross, -1.0, entropy))
        }
    }
}

fn row(g: &mut Graph, v: &[f64]) -> Var {
    g.constant(Tensor::new(vec![1, v.len().max(1)], if v.is_empty() { vec![0.0] } else { v.to_vec() }).unwrap())
}

fn check_len(what: &'static str, a: &[f64], b: &[f64]) -> Result<(), LossError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(LossError::LengthMismatch { what, a: a.len(), b: b.len() });
    }
    Ok(())
}

/// Cross-entropy of one video's predictions against a multi-hot target.
pub fn loss_ce(y: &[f64], y_hat: &[f64]) -> Result<f64, LossError> {
    check_len("cross-entropy", y, y_hat)?;
    let mut g = Graph::new();
    let (p, t) = (row(&mut g, y_hat), row(&mut g, y));
    let l = ce(&mut g, p, t)?;
    Ok(g.value(l).item())
}

pub fn loss_rep(teacher: &[f64], student: &[f64]) -> Result<f64, LossError> {
    check_len("representation", teacher, student)?;
    let mut g = Graph::new();
    let (s, t) = (row(&mut g, student), row(&mut g, teacher));
    let l = rep(&mut g, s, t)?;
    Ok(g.value(l).item())
}

pub fn loss_rep_intermediate(teacher: &[Vec<f64>], student: &[Vec<f64>]) -> Result<f64, LossError> {
    let mut g = Graph::new();
    let pairs = teacher.len().min(student.len());
    for (t, s) in teacher.iter().zip(student).take(pairs) {
        check_len("intermediate representation", t, s)?;
    }
    let s: Vec<Var> = student[..pairs].iter().map(|v| row(&mut g, v)).collect();
    let t: Vec<Var> = teacher[..pairs].iter().map(|v| row(&mut g, v)).collect();
    let l = rep_intermediate(&mut g, &s, &t)?;
    Ok(g.value(l).item())
}

pub fn loss_pred(teacher: &[f64], student: &[f64], distance: PredDistance) -> Result<f64, LossError> {
    check_len("prediction", teacher, student)?;
    let mut g = Graph::new();
    let (s, t) = (row(&mut g, student), row(&mut g, teacher));
    let l = pred(&mut g, s, t, distance)?;
    Ok(g.value(l).item())
}
