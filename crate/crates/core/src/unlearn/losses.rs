//! Forgetting, preservation and consistency losses, in plain-value form for
//! single outputs and in graph form for batched training.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::grad::{bce_with_logits_value, Graph, Tensor, Var};
use crate::model::{concept_logit, concept_logits_graph, ConceptVocab, ModelOutput};

/// Floor applied to clean probabilities inside the KL term.
pub const PROB_FLOOR: f64 = 1e-12;

pub(crate) fn check_target(t: f64, what: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Config(format!("{what} target {t} outside [0, 1]")));
    }
    Ok(())
}

/// BCE between the target's concept logit and the suppression target.
pub fn forgetting_loss(output: &ModelOutput, target: &ConceptVocab, l_neg: f64) -> Result<f64> {
    check_target(l_neg, "suppression")?;
    Ok(bce_with_logits_value(concept_logit(output, target)?, l_neg))
}

/// Weighted BCE of each anchor's concept logit against the positive target.
pub fn preservation_loss(output: &ModelOutput, anchors: &[(&ConceptVocab, f64)], l_pos: f64) -> Result<f64> {
    check_target(l_pos, "positive")?;
    if anchors.is_empty() {
        return Err(Error::Contract("preservation needs at least one anchor".into()));
    }
    let mut total = 0.0;
    for (c, w) in anchors {
        total += w * bce_with_logits_value(concept_logit(output, c)?, l_pos);
    }
    Ok(total)
}

/// Mean over rows of `KL(p_adv || p_clean)`.
pub fn consistency_loss(p_adv: &Tensor, p_clean: &Tensor) -> Result<f64> {
    if p_adv.shape() != p_clean.shape() || p_adv.rank() != 2 {
        return Err(Error::Dimension(format!(
            "consistency needs matching row matrices, got {:?} and {:?}",
            p_adv.shape(),
            p_clean.shape()
        )));
    }
    let rows = p_adv.shape()[0];
    let mut total = 0.0;
    for r in 0..rows {
        for (&p, &q) in p_adv.row(r).iter().zip(p_clean.row(r)) {
            if p > 0.0 {
                total += p * (p.max(PROB_FLOOR).ln() - q.max(PROB_FLOOR).ln());
            }
        }
    }
    Ok(total / rows as f64)
}

/// Mean BCE of the target concept logit on the given batch rows; zero when
/// `rows` is empty.
pub fn forgetting_loss_graph(
    g: &mut Graph,
    logits: Var,
    slots: usize,
    rows: &[usize],
    target: &ConceptVocab,
    l_neg: f64,
) -> Result<Var> {
    check_target(l_neg, "suppression")?;
    if rows.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let z = concept_logits_graph(g, logits, slots, &[target])?;
    let z = g.gather(z, Rc::new(rows.to_vec()), &[rows.len()])?;
    let bce = g.bce_with_logits(z, &vec![l_neg; rows.len()])?;
    g.mean(bce)
}

/// One weighted preservation term: batch row, concept column, weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnchorTerm {
    pub sample: usize,
    pub concept: usize,
    pub weight: f64,
}

/// `sum(weight * BCE(z[sample, concept], l_pos)) / batch` over `terms`,
/// where `z` is the `[batch, concepts]` concept-logit matrix.
pub fn preservation_loss_graph(g: &mut Graph, z: Var, terms: &[AnchorTerm], l_pos: f64) -> Result<Var> {
    check_target(l_pos, "positive")?;
    let shape = g.shape(z).to_vec();
    if terms.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let idx: Vec<usize> = terms.iter().map(|t| t.sample * shape[1] + t.concept).collect();
    let picked = g.gather(z, Rc::new(idx), &[terms.len()])?;
    let bce = g.bce_with_logits(picked, &vec![l_pos; terms.len()])?;
    let w = g.constant(Tensor::from_vec(terms.iter().map(|t| t.weight).collect()));
    let weighted = g.mul(bce, w)?;
    let s = g.sum(weighted)?;
    g.scale(s, 1.0 / shape[0] as f64)
}

/// Row-mean KL from the adversarial distribution `p_adv` (a graph
/// variable) to a constant clean distribution.
pub fn consistency_loss_graph(g: &mut Graph, p_adv: Var, p_clean: &Tensor) -> Result<Var> {
    if g.shape(p_adv) != p_clean.shape() || p_clean.rank() != 2 {
        return Err(Error::Dimension(format!(
            "consistency needs matching row matrices, got {:?} and {:?}",
            g.shape(p_adv),
            p_clean.shape()
        )));
    }
    let rows = p_clean.shape()[0];
    let log_q = g.constant(p_clean.map(|q| q.max(PROB_FLOOR).ln()));
    let clipped = g.clip(p_adv, PROB_FLOOR, 1.0)?;
    let log_p = g.log(clipped)?;
    let diff = g.sub(log_p, log_q)?;
    let terms = g.mul(p_adv, diff)?;
    let s = g.sum(terms)?;
    g.scale(s, 1.0 / rows as f64)
}
