//! Base-model pretraining: multi-label concept BCE plus per-slot caption
//! cross-entropy.

use std::rc::Rc;

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{caption_targets, Example, Task};
use crate::error::{Error, Result};
use crate::grad::{Graph, Var};
use crate::model::{concept_logits_graph, recognized, stack_images, ConceptVocab, ModelState, Trainable};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng;
use crate::vcubench::Roster;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub caption_weight: f64,
    /// Training stops early once validation single recall and group recall
    /// both reach this level.
    pub target_recall: f64,
    /// Below this single-image recall the run is reported as failed.
    pub min_recall: f64,
    pub adamw: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch: 16,
            lr: 3e-3,
            caption_weight: 1.0,
            target_recall: 0.98,
            min_recall: 0.9,
            adamw: AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub single_recall: f64,
    pub group_recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub single_recall: f64,
    pub group_recall: f64,
}

pub fn roster_concepts(state: &ModelState, roster: &Roster) -> Result<Vec<ConceptVocab>> {
    roster.identities.iter().map(|s| state.concept(s)).collect()
}

/// Mean concept BCE over name examples (present → 1, absent → 0) plus
/// `caption_weight` times mean per-slot caption cross-entropy, for the
/// logits of `examples` already in the graph.
pub fn supervised_loss(
    g: &mut Graph,
    state: &ModelState,
    logits: Var,
    examples: &[&Example],
    roster: &Roster,
    concepts: &[ConceptVocab],
    caption_weight: f64,
) -> Result<Var> {
    let geo = &state.geometry;
    let (s, v) = (geo.slots, state.vocab_size());
    let n = concepts.len();

    let mut idx = Vec::new();
    let mut targets = Vec::new();
    for (b, e) in examples.iter().enumerate() {
        let t = caption_targets(&e.scene, roster, &state.vocab, e.task, geo)?;
        idx.extend(t.iter().enumerate().map(|(k, &tok)| (b * s + k) * v + tok));
    }
    let lsm = g.log_softmax(logits)?;
    let picked = g.gather(lsm, Rc::new(idx), &[examples.len() * s])?;
    let ce = g.mean(picked)?;
    let ce = g.scale(ce, -caption_weight)?;

    let named: Vec<usize> = (0..examples.len()).filter(|&b| examples[b].task == Task::Names).collect();
    if named.is_empty() {
        return Ok(ce);
    }
    let refs: Vec<&ConceptVocab> = concepts.iter().collect();
    let z = concept_logits_graph(g, logits, s, &refs)?;
    let rows: Vec<usize> = named.iter().flat_map(|&b| (0..n).map(move |k| b * n + k)).collect();
    let z = g.gather(z, Rc::new(rows), &[named.len(), n])?;
    for &b in &named {
        targets.extend((0..n).map(|k| if examples[b].scene.contains(k) { 1.0 } else { 0.0 }));
    }
    let bce = g.bce_with_logits(z, &targets)?;
    let bce = g.mean(bce)?;
    g.add(bce, ce)
}

/// Validation recall: share of singles whose identity is recognized, and
/// share of groups with every member recognized.
pub fn recognition_recall(
    state: &ModelState,
    examples: &[Example],
    concepts: &[ConceptVocab],
) -> Result<(f64, f64)> {
    let (mut singles, mut single_ok, mut groups, mut group_ok) = (0, 0, 0, 0);
    for chunk in examples.chunks(32) {
        let imgs: Vec<_> = chunk.iter().map(|e| &e.image).collect();
        let prompts: Vec<_> = chunk.iter().map(|e| e.prompt.clone()).collect();
        let outs = state.forward_many(&imgs, &prompts)?;
        for (e, o) in chunk.iter().zip(&outs) {
            let mut all = true;
            for m in e.members() {
                all &= recognized(o, &concepts[m])?;
            }
            if e.scene.members.len() == 1 {
                singles += 1;
                single_ok += all as usize;
            } else {
                groups += 1;
                group_ok += all as usize;
            }
        }
    }
    let frac = |a: usize, n: usize| if n == 0 { 1.0 } else { a as f64 / n as f64 };
    Ok((frac(single_ok, singles), frac(group_ok, groups)))
}

/// Trains every base parameter of `state` on `train`. Returns a training
/// failure when validation single recall ends below `min_recall`.
pub fn train_base(
    mut state: ModelState,
    roster: &Roster,
    train: &[Example],
    validation: &[Example],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ModelState, TrainReport)> {
    if train.is_empty() || cfg.batch == 0 {
        return Err(Error::Config("training needs examples and a positive batch size".into()));
    }
    for i in 0..roster.len() {
        let single = train.iter().any(|e| e.scene.members.len() == 1 && e.scene.contains(i));
        let group = train.iter().any(|e| e.scene.members.len() > 1 && e.scene.contains(i));
        if !single || !group {
            return Err(Error::Input(format!(
                "training data lacks {} images of {}",
                if single { "group" } else { "single" },
                roster.identities[i].id
            )));
        }
    }
    let concepts = roster_concepts(&state, roster)?;
    let mut opt = AdamW::new(cfg.lr, cfg.adamw.clone());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut r = rng::stream(seed, &[rng::tag("train-order")]);
    let mut report = TrainReport {
        epochs: Vec::new(),
        single_recall: 0.0,
        group_recall: 0.0,
    };
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut r);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch) {
            let ex: Vec<&Example> = batch.iter().map(|&i| &train[i]).collect();
            let mut g = Graph::new();
            let bound = state.bind(&mut g, Trainable::Base)?;
            let x = g.constant(stack_images(ex.iter().map(|e| &e.image)));
            let prompts: Vec<Vec<usize>> = ex.iter().map(|e| e.prompt.clone()).collect();
            let logits = state.forward_graph(&mut g, &bound, x, &prompts)?;
            let loss = supervised_loss(&mut g, &state, logits, &ex, roster, &concepts, cfg.caption_weight)?;
            let value = g.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::Divergence {
                    step: epoch,
                    detail: "non-finite training loss".into(),
                });
            }
            total += value * ex.len() as f64;
            let grads = g.backward(loss)?;
            let gs: Vec<_> = bound.params().into_iter().map(|p| grads.get(p).expect("trainable")).cloned().collect();
            let refs: Vec<_> = gs.iter().collect();
            opt.step(&mut state.trainable_mut(Trainable::Base), &refs)?;
        }
        let (single, group) = recognition_recall(&state, validation, &concepts)?;
        let log = EpochLog {
            epoch,
            loss: total / train.len() as f64,
            single_recall: single,
            group_recall: group,
        };
        info!("epoch {epoch}: loss {:.4} single {:.3} group {:.3}", log.loss, single, group);
        report.epochs.push(log);
        report.single_recall = single;
        report.group_recall = group;
        if single >= cfg.target_recall && group >= cfg.target_recall {
            break;
        }
    }
    if report.single_recall < cfg.min_recall {
        return Err(Error::TrainingFailure(format!(
            "single-image recall {:.3} below {:.3} after {} epochs",
            report.single_recall,
            cfg.min_recall,
            report.epochs.len()
        )));
    }
    Ok((state, report))
}
