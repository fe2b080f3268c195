//! Representation-capability losses.
//!
//! * `single`: each modality's unimodal decoder is supervised on its own
//!   encoded features, weighted by `A[m]·B[m]`.
//! * `sub`: every modality subset that occurs in the batch is fused on its
//!   own (other slots zeroed) and supervised.
//! * `aux`: for every occurring subset, the present modalities outside it are
//!   dropped and reconstructed from the rest; the reconstruction is pulled
//!   toward the (detached) encoded features, weighted by `A[m]·B[m]`.

use rand::seq::index::sample;

use crate::coalition::{enumerate_subsets, size, Coalition};
use crate::error::{MceError, Result};
use crate::model::ModelVars;
use crate::seeding::rng_for;
use crate::tensor::{ErrorNorm, Tape, Tensor, Var};

/// Guard added to the subset and dropped-set sizes in the normalisers.
pub const EPSILON: f64 = 1e-8;

/// Subsets occurring in a batch and where each is feasible.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubsetPlan {
    /// Distinct non-empty subsets of some sample's present set, ascending.
    pub subsets: Vec<Coalition>,
    /// For each subset, the sample indices whose present set contains it.
    pub members: Vec<Vec<usize>>,
    masks: Vec<Coalition>,
}

impl SubsetPlan {
    pub fn masks(&self) -> &[Coalition] {
        &self.masks
    }

    pub fn len(&self) -> usize {
        self.subsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subsets.is_empty()
    }

    /// Present modalities of sample `n` that subset `k` leaves out.
    pub fn dropped(&self, n: usize, k: usize) -> Coalition {
        self.masks[n] & !self.subsets[k]
    }

    /// Keeps `cap` subsets chosen uniformly without replacement (order
    /// preserved). No-op when the plan is already within the cap.
    pub fn capped(self, cap: usize, seed: u64, stream_id: u64) -> SubsetPlan {
        if cap == 0 || self.subsets.len() <= cap {
            return self;
        }
        let mut rng = rng_for(seed, stream_id);
        let mut keep = sample(&mut rng, self.subsets.len(), cap).into_vec();
        keep.sort_unstable();
        SubsetPlan {
            subsets: keep.iter().map(|&k| self.subsets[k]).collect(),
            members: keep.iter().map(|&k| self.members[k].clone()).collect(),
            masks: self.masks,
        }
    }
}

pub fn build_subset_plan(masks: &[Coalition]) -> Result<SubsetPlan> {
    if let Some(n) = masks.iter().position(|&k| k == 0) {
        return Err(MceError::Contract(format!("sample {n} has no present modality")));
    }
    let mut subsets: Vec<Coalition> = masks.iter().flat_map(|&k| enumerate_subsets(k)).collect();
    subsets.sort_unstable();
    subsets.dedup();
    let members = subsets
        .iter()
        .map(|&s| (0..masks.len()).filter(|&n| s & !masks[n] == 0).collect())
        .collect();
    Ok(SubsetPlan {
        subsets,
        members,
        masks: masks.to_vec(),
    })
}

fn zero(tape: &mut Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

fn accumulate(tape: &mut Tape, acc: Option<Var>, term: Var) -> Result<Option<Var>> {
    Ok(Some(match acc {
        Some(a) => tape.add(a, term)?,
        None => term,
    }))
}

/// `Σ_m w[m] · mean CE(unimodal_decoder_m(h_m), y)` over samples with `m`
/// present. Modalities with `w[m] = 0` are not evaluated.
pub fn loss_single(tape: &mut Tape, vars: &ModelVars, features: &[Var], labels: &[usize], masks: &[Coalition], weights: &[f64]) -> Result<Var> {
    let mut acc = None;
    for (m, &w) in weights.iter().enumerate() {
        let count = masks.iter().filter(|&&k| k >> m & 1 == 1).count();
        if w == 0.0 || count == 0 {
            continue;
        }
        let row_w: Vec<f64> = masks
            .iter()
            .map(|&k| if k >> m & 1 == 1 { w / count as f64 } else { 0.0 })
            .collect();
        let logits = vars.unimodal_logits(tape, features[m], m)?;
        let ce = tape.cross_entropy(logits, labels, row_w)?;
        acc = accumulate(tape, acc, ce)?;
    }
    Ok(acc.unwrap_or_else(|| zero(tape)))
}

/// `1/|S_batch| · Σ_S 1/(|N_S| + ε) · Σ_{n∈N_S} CE(fuse_predict(h_n, S), y_n)`.
pub fn loss_sub(tape: &mut Tape, vars: &ModelVars, features: &[Var], labels: &[usize], plan: &SubsetPlan, eps: f64) -> Result<Var> {
    let mut acc = None;
    let outer = 1.0 / plan.len().max(1) as f64;
    for (k, &s) in plan.subsets.iter().enumerate() {
        let members = &plan.members[k];
        let w = outer / (members.len() as f64 + eps);
        let mut row_w = vec![0.0; labels.len()];
        for &n in members {
            row_w[n] = w;
        }
        let logits = vars.fuse_predict(tape, features, s)?;
        let ce = tape.cross_entropy(logits, labels, row_w)?;
        acc = accumulate(tape, acc, ce)?;
    }
    Ok(acc.unwrap_or_else(|| zero(tape)))
}

/// Dropped-slot reconstruction error:
///
/// ```text
/// 1/|S_batch| Σ_S 1/|N_S| Σ_{n∈N_S} 1/(|drop(n,S)| + ε) Σ_{m∈drop(n,S)} w[m]·err(h'_m, h_m)
/// ```
///
/// Targets `h_m` are detached copies of the encoded features.
pub fn loss_aux(tape: &mut Tape, vars: &ModelVars, features: &[Var], plan: &SubsetPlan, weights: &[f64], eps: f64, norm: ErrorNorm) -> Result<Var> {
    let targets: Vec<Var> = features
        .iter()
        .map(|&h| {
            let v = tape.value(h).clone();
            tape.constant(v)
        })
        .collect();
    loss_aux_with_targets(tape, vars, features, &targets, plan, weights, eps, norm)
}

/// [`loss_aux`] against caller-supplied targets, one per modality.
#[allow(clippy::too_many_arguments)]
pub fn loss_aux_with_targets(
    tape: &mut Tape,
    vars: &ModelVars,
    features: &[Var],
    targets: &[Var],
    plan: &SubsetPlan,
    weights: &[f64],
    eps: f64,
    norm: ErrorNorm,
) -> Result<Var> {
    if targets.len() != features.len() {
        return Err(MceError::Contract(format!(
            "{} reconstruction targets for {} modalities",
            targets.len(),
            features.len()
        )));
    }
    let rows = plan.masks().len();
    let outer = 1.0 / plan.len().max(1) as f64;
    let mut acc = None;
    for (k, &s) in plan.subsets.iter().enumerate() {
        let members = &plan.members[k];
        let mut row_weights = vec![vec![0.0; rows]; weights.len()];
        let mut any = false;
        for &n in members {
            let drop = plan.dropped(n, k);
            if drop == 0 {
                continue;
            }
            let per = outer / members.len() as f64 / (size(drop) as f64 + eps);
            for (m, &w) in weights.iter().enumerate() {
                if drop >> m & 1 == 1 && w != 0.0 {
                    row_weights[m][n] = per * w;
                    any = true;
                }
            }
        }
        if !any {
            continue;
        }
        // rows outside N_S keep their own present set; their weight is zero
        let keep: Vec<Coalition> = (0..rows)
            .map(|n| if s & !plan.masks()[n] == 0 { s } else { plan.masks()[n] })
            .collect();
        let recon = vars.reconstruct(tape, features, &keep)?;
        for (m, rw) in row_weights.into_iter().enumerate() {
            if rw.iter().all(|&w| w == 0.0) {
                continue;
            }
            let e = tape.row_error(recon[m], targets[m], rw, norm)?;
            acc = accumulate(tape, acc, e)?;
        }
    }
    Ok(acc.unwrap_or_else(|| zero(tape)))
}

/// Weights of the three auxiliary terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lambdas {
    pub single: f64,
    pub sub: f64,
    pub aux: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Lambdas {
            single: 1.0,
            sub: 2.0,
            aux: 1.0,
        }
    }
}

impl Lambdas {
    pub const ZERO: Lambdas = Lambdas {
        single: 0.0,
        sub: 0.0,
        aux: 0.0,
    };
}

/// Scalar values of one step's loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub task: f64,
    pub single: f64,
    pub sub: f64,
    pub aux: f64,
    pub total: f64,
    pub lambdas: Lambdas,
    pub epsilon: f64,
}

/// Combines component values; any non-finite component is a divergence.
pub fn total_loss(task: f64, single: f64, sub: f64, aux: f64, lambdas: Lambdas, step: usize) -> Result<LossBreakdown> {
    for (component, v) in [("task", task), ("single", single), ("sub", sub), ("aux", aux)] {
        if !v.is_finite() {
            return Err(MceError::Divergence { component, step });
        }
    }
    let total = task + lambdas.single * single + lambdas.sub * sub + lambdas.aux * aux;
    if !total.is_finite() {
        return Err(MceError::Divergence { component: "total", step });
    }
    Ok(LossBreakdown {
        task,
        single,
        sub,
        aux,
        total,
        lambdas,
        epsilon: EPSILON,
    })
}

/// Settings of the joint objective.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveSettings {
    pub lambdas: Lambdas,
    pub epsilon: f64,
    pub norm: ErrorNorm,
}

impl Default for ObjectiveSettings {
    fn default() -> Self {
        ObjectiveSettings {
            lambdas: Lambdas::default(),
            epsilon: EPSILON,
            norm: ErrorNorm::Mse,
        }
    }
}

/// Tape handles of one step's objective.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub total: Var,
    pub task: Var,
    pub single: Option<Var>,
    pub sub: Option<Var>,
    pub aux: Option<Var>,
}

impl Objective {
    pub fn breakdown(&self, tape: &Tape, lambdas: Lambdas, step: usize) -> Result<LossBreakdown> {
        let get = |v: Option<Var>| v.map_or(0.0, |v| tape.scalar(v));
        total_loss(tape.scalar(self.task), get(self.single), get(self.sub), get(self.aux), lambdas, step)
    }
}

/// Task loss on reconstruction-completed features plus the weighted
/// auxiliary terms. Terms whose λ is zero are not built.
pub fn build_objective(
    tape: &mut Tape,
    vars: &ModelVars,
    features: &[Var],
    labels: &[usize],
    plan: &SubsetPlan,
    factor_weights: &[f64],
    settings: &ObjectiveSettings,
) -> Result<Objective> {
    let masks = plan.masks();
    let logits = vars.task_logits(tape, features, masks)?;
    let n = labels.len().max(1) as f64;
    let task = tape.cross_entropy(logits, labels, vec![1.0 / n; labels.len()])?;
    let lam = settings.lambdas;
    let mut total = task;
    let single = if lam.single != 0.0 {
        let l = loss_single(tape, vars, features, labels, masks, factor_weights)?;
        let s = tape.scale(l, lam.single);
        total = tape.add(total, s)?;
        Some(l)
    } else {
        None
    };
    let sub = if lam.sub != 0.0 {
        let l = loss_sub(tape, vars, features, labels, plan, settings.epsilon)?;
        let s = tape.scale(l, lam.sub);
        total = tape.add(total, s)?;
        Some(l)
    } else {
        None
    };
    let aux = if lam.aux != 0.0 {
        let l = loss_aux(tape, vars, features, plan, factor_weights, settings.epsilon, settings.norm)?;
        let s = tape.scale(l, lam.aux);
        total = tape.add(total, s)?;
        Some(l)
    } else {
        None
    };
    Ok(Objective {
        total,
        task,
        single,
        sub,
        aux,
    })
}
