//! Unlearning methods. The adversarial method alternates a perturbation
//! generator (ascending the forgetting loss) with LoRA adapter updates
//! (descending forgetting + preservation + consistency). Gradient ascent,
//! ascent with a KL anchor, and "unknown"-token preference tuning serve as
//! baselines. Every method changes the adapters only.

mod losses;
#[cfg(test)]
mod tests;

use std::fmt;
use std::io::{BufRead, Write as _};
use std::path::Path;
use std::rc::Rc;
use std::str::FromStr;

use log::debug;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use losses::{
    consistency_loss, consistency_loss_graph, forgetting_loss, forgetting_loss_graph, preservation_loss,
    preservation_loss_graph, AnchorTerm, PROB_FLOOR,
};

use crate::advgen::{perturbed_graph, FrozenEncoder, GeneratorParams, DEFAULT_EPS};
use crate::anchor::{mean_token_embedding, select_anchors, similarity_scores, AnchorConfig, AnchorMode, AnchorSelection};
use crate::data::{caption_targets, Example, UnlearnData};
use crate::error::{Error, Result};
use crate::grad::{Graph, Gradients, Tensor, Var};
use crate::model::{concept_logits_graph, stack_images, ConceptVocab, ModelState, Trainable};
use crate::optim::{AdamW, AdamWConfig, Plateau, PlateauConfig};
use crate::rng;
use crate::train::roster_concepts;
use crate::vcubench::Roster;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Auvic,
    Ga,
    GaKl,
    Po,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Ga, Method::Po, Method::GaKl, Method::Auvic];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Auvic => "auvic",
            Method::Ga => "ga",
            Method::GaKl => "ga_kl",
            Method::Po => "po",
        }
    }

    /// Display label used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            Method::Auvic => "AUVIC",
            Method::Ga => "GA",
            Method::GaKl => "GA+KL",
            Method::Po => "PO",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}' (expected auvic, ga, ga_kl or po)")))
    }
}

/// What the generator ascends.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorObjective {
    ForgetOnly,
    Full,
}

/// Which anchors enter the preservation loss for a sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PreserveScope {
    /// Only selected anchors that appear in the image.
    Present,
    /// Every selected anchor, present or not.
    All,
}

/// Reference distribution of the KL penalty in the ascent-with-KL baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlReference {
    /// Current and frozen original model, both on clean retain images.
    Original,
    /// Current model on noise-perturbed retain images against the frozen
    /// original on the clean ones.
    Perturbed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnlearnConfig {
    pub lambda: f64,
    pub beta: f64,
    pub l_neg: f64,
    pub l_pos: f64,
    pub steps: usize,
    /// Generator updates per round.
    pub gen_steps: usize,
    /// Adapter updates per round.
    pub disc_steps: usize,
    pub batch: usize,
    /// Share of each batch drawn from retain data (methods that use it).
    pub retain_fraction: f64,
    pub lr_generator: f64,
    pub lr_adapter: f64,
    pub adamw: AdamWConfig,
    pub plateau: PlateauConfig,
    pub generator_hidden: usize,
    pub eps: f64,
    pub use_generator: bool,
    pub generator_objective: GeneratorObjective,
    pub preserve_scope: PreserveScope,
    pub anchor: AnchorConfig,
    pub kl_reference: KlReference,
    pub encoder_seed: u64,
    /// Ascent baselines stop early once this share of the forget set is no
    /// longer recognized (checked every `STOP_CHECK_PERIOD` steps).
    pub stop_at_forgetting: Option<f64>,
}

pub const STOP_CHECK_PERIOD: usize = 5;

impl Default for UnlearnConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            beta: 0.5,
            l_neg: 0.0,
            l_pos: 1.0,
            steps: 200,
            gen_steps: 1,
            disc_steps: 1,
            batch: 16,
            retain_fraction: 0.5,
            lr_generator: 1e-3,
            lr_adapter: 2e-4,
            adamw: AdamWConfig::default(),
            plateau: PlateauConfig::default(),
            generator_hidden: 1024,
            eps: DEFAULT_EPS,
            use_generator: true,
            generator_objective: GeneratorObjective::ForgetOnly,
            preserve_scope: PreserveScope::Present,
            anchor: AnchorConfig::default(),
            kl_reference: KlReference::Original,
            encoder_seed: 0,
            stop_at_forgetting: None,
        }
    }
}

impl UnlearnConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) || !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("lambda {} and beta {} must be non-negative", self.lambda, self.beta));
        }
        losses::check_target(self.l_neg, "suppression")?;
        losses::check_target(self.l_pos, "positive")?;
        if self.l_neg >= self.l_pos {
            return bad(format!("suppression target {} must be below positive target {}", self.l_neg, self.l_pos));
        }
        if self.steps == 0 || self.batch == 0 || self.disc_steps == 0 || self.gen_steps == 0 {
            return bad("steps, batch, gen-steps and disc-steps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.retain_fraction) {
            return bad(format!("retain-fraction {} must lie in [0, 1)", self.retain_fraction));
        }
        if !(self.lr_generator >= 0.0) || !(self.lr_adapter >= 0.0) {
            return bad("learning rates must be non-negative".into());
        }
        if !(self.eps > 0.0) || self.generator_hidden == 0 {
            return bad("generator needs a positive budget and hidden width".into());
        }
        if let Some(r) = self.stop_at_forgetting {
            if !(r > 0.0 && r <= 1.0) {
                return bad(format!("stop-at-forgetting {r} must lie in (0, 1]"));
            }
        }
        Ok(())
    }

    fn split(&self) -> (usize, usize) {
        let retain = ((self.batch as f64) * self.retain_fraction).round() as usize;
        let retain = retain.min(self.batch - 1);
        (self.batch - retain, retain)
    }
}

/// Everything one unlearning run needs about its target.
#[derive(Clone, Debug)]
pub struct UnlearnTask {
    pub target: usize,
    pub roster: Roster,
    /// Concept vocabulary of every roster identity, by roster index.
    pub concepts: Vec<ConceptVocab>,
    /// Preserve candidates (roster indices), most similar first.
    pub candidates: Vec<usize>,
    /// Cosine similarity of each candidate's name embedding to the target's.
    pub scores: Vec<f64>,
    pub forget: Vec<Example>,
    pub retain: Vec<Example>,
}

impl UnlearnTask {
    /// Candidates are the `anchor.k` non-target identities whose mean name
    /// embedding in `state` is closest to the target's (all by default).
    pub fn new(state: &ModelState, roster: &Roster, data: UnlearnData, anchor: &AnchorConfig) -> Result<Self> {
        if data.forget.is_empty() {
            return Err(Error::Input("forget set is empty".into()));
        }
        if data.target >= roster.len() {
            return Err(Error::Input(format!("target index {} not in roster", data.target)));
        }
        let embed = |i: usize| mean_token_embedding(&roster.identities[i].name, &state.vocab, &state.base.embed);
        let t = embed(data.target)?;
        let others: Vec<usize> = (0..roster.len()).filter(|&i| i != data.target).collect();
        let vecs = others.iter().map(|&i| embed(i)).collect::<Result<Vec<_>>>()?;
        let s = similarity_scores(&t, &vecs)?;
        let mut order: Vec<usize> = (0..others.len()).collect();
        order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
        order.truncate(anchor.k.unwrap_or(others.len()));
        anchor.validate(order.len())?;
        Ok(Self {
            target: data.target,
            roster: roster.clone(),
            concepts: roster_concepts(state, roster)?,
            candidates: order.iter().map(|&k| others[k]).collect(),
            scores: order.iter().map(|&k| s[k]).collect(),
            forget: data.forget,
            retain: data.retain,
        })
    }

    pub fn target_concept(&self) -> &ConceptVocab {
        &self.concepts[self.target]
    }

    pub fn target_id(&self) -> &str {
        &self.roster.identities[self.target].id
    }

    /// Preservation terms of `selection` for a batch of examples.
    pub fn anchor_terms(&self, examples: &[&Example], selection: &AnchorSelection, scope: PreserveScope) -> Vec<AnchorTerm> {
        let mut out = Vec::new();
        for (b, e) in examples.iter().enumerate() {
            for (&j, &w) in selection.selected.iter().zip(&selection.weights) {
                let c = self.candidates[j];
                if scope == PreserveScope::All || e.scene.contains(c) {
                    out.push(AnchorTerm {
                        sample: b,
                        concept: c,
                        weight: w,
                    });
                }
            }
        }
        out
    }
}

/// One logged optimisation step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub forget: f64,
    pub preserve: f64,
    pub consistency: f64,
    pub total: f64,
    /// Last generator objective of the round, when a generator is used.
    pub generator: Option<f64>,
    pub lr_generator: Option<f64>,
    pub lr_adapter: f64,
    pub anchors: Vec<String>,
    pub anchor_weights: Vec<f64>,
}

/// Append-only per-step log, stored as JSON lines.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub fn push(&mut self, r: StepRecord) {
        self.records.push(r);
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            let line = serde_json::to_string(r).map_err(|e| Error::Contract(format!("log record: {e}")))?;
            out.push_str(&line);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (n, line) in std::io::BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(
                serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?,
            );
        }
        Ok(Self { records })
    }
}

/// Result of an unlearning run.
#[derive(Clone, Debug)]
pub struct Unlearned {
    pub state: ModelState,
    pub log: TrainLog,
    pub generator: Option<GeneratorParams>,
}

/// One batch of inputs to the adversarial objective.
#[derive(Clone, Debug)]
pub struct ObjectiveInputs {
    /// `[n, PIXELS]` clean images.
    pub images: Tensor,
    /// `[n, FEATURE_WIDTH]` frozen-encoder features of `images`.
    pub features: Tensor,
    pub prompts: Vec<Vec<usize>>,
    /// Rows that contain the target and carry the forgetting loss.
    pub forget_rows: Vec<usize>,
    pub terms: Vec<AnchorTerm>,
    /// Clean-image per-slot probabilities under the current model; `None`
    /// drops the consistency term.
    pub p_clean: Option<Tensor>,
}

/// Graph handles of the objective and its parts.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveVars {
    pub total: Var,
    pub forget: Var,
    pub preserve: Var,
    pub consistency: Var,
}

/// Plain values of the objective and its parts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Components {
    pub forget: f64,
    pub preserve: f64,
    pub consistency: f64,
    pub total: f64,
}

impl ObjectiveVars {
    pub fn values(&self, g: &Graph) -> Components {
        let v = |x: Var| g.value(x).data()[0];
        Components {
            forget: v(self.forget),
            preserve: v(self.preserve),
            consistency: v(self.consistency),
            total: v(self.total),
        }
    }
}

/// `L_f + lambda * L_p + beta * L_c` on already-perturbed images `x_adv`.
pub fn objective_graph(
    g: &mut Graph,
    state: &ModelState,
    bound: &crate::model::Bound,
    x_adv: Var,
    inputs: &ObjectiveInputs,
    task: &UnlearnTask,
    cfg: &UnlearnConfig,
) -> Result<ObjectiveVars> {
    let slots = state.geometry.slots;
    let logits = state.forward_graph(g, bound, x_adv, &inputs.prompts)?;
    let forget = forgetting_loss_graph(g, logits, slots, &inputs.forget_rows, task.target_concept(), cfg.l_neg)?;
    let preserve = if inputs.terms.is_empty() {
        g.constant(Tensor::scalar(0.0))
    } else {
        let refs: Vec<&ConceptVocab> = task.concepts.iter().collect();
        let z = concept_logits_graph(g, logits, slots, &refs)?;
        preservation_loss_graph(g, z, &inputs.terms, cfg.l_pos)?
    };
    let consistency = match &inputs.p_clean {
        Some(p) => {
            let p_adv = g.softmax(logits)?;
            consistency_loss_graph(g, p_adv, p)?
        }
        None => g.constant(Tensor::scalar(0.0)),
    };
    let lp = g.scale(preserve, cfg.lambda)?;
    let lc = g.scale(consistency, cfg.beta)?;
    let t = g.add(forget, lp)?;
    let total = g.add(t, lc)?;
    Ok(ObjectiveVars {
        total,
        forget,
        preserve,
        consistency,
    })
}

/// Clean-image per-slot probabilities `[n * slots, V]` under `state`.
pub fn clean_probabilities(state: &ModelState, images: &Tensor, prompts: &[Vec<usize>]) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = state.bind(&mut g, Trainable::Nothing)?;
    let x = g.constant(images.clone());
    let l = state.forward_graph(&mut g, &bound, x, prompts)?;
    let p = g.softmax(l)?;
    Ok(g.value(p).clone())
}

fn collect_grads(grads: &Gradients, vars: &[Var], step: usize, what: &str) -> Result<Vec<Tensor>> {
    let out: Vec<Tensor> = vars
        .iter()
        .map(|&v| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&[0])))
        .collect();
    if out.iter().any(|t| !t.is_finite()) {
        return Err(Error::Divergence {
            step,
            detail: format!("non-finite {what} gradient"),
        });
    }
    Ok(out)
}

/// One ascent step of the generator with the model frozen. Returns the
/// objective value before the update.
pub fn generator_step(
    state: &ModelState,
    phi: &mut GeneratorParams,
    opt: &mut AdamW,
    inputs: &ObjectiveInputs,
    task: &UnlearnTask,
    cfg: &UnlearnConfig,
    step: usize,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars = phi.bind(&mut g, true);
    let bound = state.bind(&mut g, Trainable::Nothing)?;
    let f = g.constant(inputs.features.clone());
    let x = g.constant(inputs.images.clone());
    let x_adv = perturbed_graph(&mut g, &vars, phi.eps, f, x)?;
    let obj = objective_graph(&mut g, state, &bound, x_adv, inputs, task, cfg)?;
    let target = match cfg.generator_objective {
        GeneratorObjective::ForgetOnly => obj.forget,
        GeneratorObjective::Full => obj.total,
    };
    let value = g.value(target).data()[0];
    let loss = g.scale(target, -1.0)?;
    let grads = g.backward(loss)?;
    let gs = collect_grads(&grads, &vars, step, "generator")?;
    let refs: Vec<&Tensor> = gs.iter().collect();
    opt.step(&mut phi.tensors_mut(), &refs)?;
    Ok(value)
}

/// Perturbed images `[n, PIXELS]` from a fixed generator.
pub fn perturbed_batch(phi: &GeneratorParams, features: &Tensor, images: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = phi.bind(&mut g, false);
    let f = g.constant(features.clone());
    let x = g.constant(images.clone());
    let xp = perturbed_graph(&mut g, &vars, phi.eps, f, x)?;
    Ok(g.value(xp).clone())
}

/// One descent step of the adapters on the full objective with the
/// generator fixed (`None` means clean images).
pub fn discriminator_step(
    state: &mut ModelState,
    phi: Option<&GeneratorParams>,
    opt: &mut AdamW,
    inputs: &ObjectiveInputs,
    task: &UnlearnTask,
    cfg: &UnlearnConfig,
    step: usize,
) -> Result<Components> {
    let x_adv = match phi {
        Some(p) => perturbed_batch(p, &inputs.features, &inputs.images)?,
        None => inputs.images.clone(),
    };
    let mut g = Graph::new();
    let bound = state.bind(&mut g, Trainable::Lora)?;
    let x = g.constant(x_adv);
    let obj = objective_graph(&mut g, state, &bound, x, inputs, task, cfg)?;
    let comps = obj.values(&g);
    if !comps.total.is_finite() {
        return Err(Error::Divergence {
            step,
            detail: format!("objective is {}", comps.total),
        });
    }
    let grads = g.backward(obj.total)?;
    let gs = collect_grads(&grads, &bound.params(), step, "adapter")?;
    let refs: Vec<&Tensor> = gs.iter().collect();
    opt.step(&mut state.trainable_mut(Trainable::Lora), &refs)?;
    Ok(comps)
}

/// Cycles through a shuffled index list, reshuffling at each pass.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn take(&mut self, k: usize, r: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        if self.order.is_empty() {
            return out;
        }
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order.shuffle(r);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

struct Sampler<'a> {
    task: &'a UnlearnTask,
    forget: Cycler,
    retain: Cycler,
    rng: ChaCha8Rng,
}

/// Batch members with the forget rows first.
struct Drawn<'a> {
    examples: Vec<&'a Example>,
    forget: Vec<usize>,
    retain: Vec<usize>,
}

impl<'a> Sampler<'a> {
    fn new(task: &'a UnlearnTask, seed: u64) -> Self {
        Self {
            task,
            forget: Cycler::new(task.forget.len()),
            retain: Cycler::new(task.retain.len()),
            rng: rng::stream(seed, &[rng::tag("unlearn-batches")]),
        }
    }

    fn draw(&mut self, forget: usize, retain: usize) -> Drawn<'a> {
        let f = self.forget.take(forget, &mut self.rng);
        let r = self.retain.take(retain, &mut self.rng);
        let mut examples: Vec<&Example> = f.iter().map(|&i| &self.task.forget[i]).collect();
        examples.extend(r.iter().map(|&i| &self.task.retain[i]));
        Drawn {
            examples,
            forget: f,
            retain: r,
        }
    }
}

fn prompts_of(examples: &[&Example]) -> Vec<Vec<usize>> {
    examples.iter().map(|e| e.prompt.clone()).collect()
}

fn stack_rows(rows: impl Iterator<Item = Tensor>, width: usize) -> Result<Tensor> {
    let data: Vec<f64> = rows.flat_map(Tensor::into_data).collect();
    let n = data.len() / width;
    Tensor::new(vec![n, width], data)
}

fn check_base_unchanged(before: &ModelState, after: &ModelState) -> Result<()> {
    if before.base != after.base {
        return Err(Error::Contract("base parameters changed during unlearning".into()));
    }
    Ok(())
}

/// The adversarial generator/adapter game.
pub fn run_auvic(base: &ModelState, task: &UnlearnTask, cfg: &UnlearnConfig, seed: u64) -> Result<Unlearned> {
    cfg.validate()?;
    cfg.anchor.validate(task.candidates.len())?;
    let mut state = base.clone();
    let (n_forget, n_retain) = cfg.split();
    let n_retain = if task.retain.is_empty() { 0 } else { n_retain };

    let encoder = FrozenEncoder::new(cfg.encoder_seed);
    let feats = |set: &[Example]| -> Vec<Tensor> { set.iter().map(|e| encoder.extract_feature(&e.image)).collect() };
    let (forget_feats, retain_feats) = if cfg.use_generator {
        (feats(&task.forget), feats(&task.retain))
    } else {
        (Vec::new(), Vec::new())
    };
    let mut phi = if cfg.use_generator {
        Some(GeneratorParams::new(
            cfg.generator_hidden,
            cfg.eps,
            rng::derive(seed, &[rng::tag("generator")]),
        )?)
    } else {
        None
    };
    let mut opt_g = AdamW::new(cfg.lr_generator, cfg.adamw.clone());
    let mut opt_a = AdamW::new(cfg.lr_adapter, cfg.adamw.clone());
    let mut plateau = Plateau::new(cfg.plateau.clone());
    let mut sampler = Sampler::new(task, seed);
    let mut anchor_rng = rng::stream(seed, &[rng::tag("anchors")]);
    let mut selection: Option<AnchorSelection> = None;
    let mut log = TrainLog::default();

    for step in 0..cfg.steps {
        let redraw = match cfg.anchor.mode {
            AnchorMode::Gumbel => step % cfg.anchor.resample_period == 0,
            AnchorMode::FixedCosine => selection.is_none(),
        };
        if redraw {
            selection = Some(select_anchors(&task.scores, &cfg.anchor, &mut anchor_rng)?);
        }
        let sel = selection.as_ref().expect("drawn at step 0");
        let drawn = sampler.draw(n_forget, n_retain);
        let images = stack_images(drawn.examples.iter().map(|e| &e.image));
        let prompts = prompts_of(&drawn.examples);
        let features = if cfg.use_generator {
            let rows = drawn
                .forget
                .iter()
                .map(|&i| forget_feats[i].clone())
                .chain(drawn.retain.iter().map(|&i| retain_feats[i].clone()));
            stack_rows(rows, crate::advgen::FEATURE_WIDTH)?
        } else {
            Tensor::zeros(&[drawn.examples.len(), crate::advgen::FEATURE_WIDTH])
        };
        let p_clean = if cfg.use_generator {
            Some(clean_probabilities(&state, &images, &prompts)?)
        } else {
            None
        };
        let inputs = ObjectiveInputs {
            images,
            features,
            prompts,
            forget_rows: (0..drawn.forget.len()).collect(),
            terms: task.anchor_terms(&drawn.examples, sel, cfg.preserve_scope),
            p_clean,
        };

        let mut gen_value = None;
        if let Some(phi) = phi.as_mut() {
            for _ in 0..cfg.gen_steps {
                gen_value = Some(generator_step(&state, phi, &mut opt_g, &inputs, task, cfg, step)?);
            }
        }
        let mut comps = None;
        for _ in 0..cfg.disc_steps {
            comps = Some(discriminator_step(&mut state, phi.as_ref(), &mut opt_a, &inputs, task, cfg, step)?);
        }
        let comps = comps.expect("at least one adapter step");
        let lr_adapter = opt_a.lr;
        opt_a.lr = plateau.observe(comps.total, opt_a.lr);
        debug!("step {step}: {comps:?}");
        log.push(StepRecord {
            step,
            forget: comps.forget,
            preserve: comps.preserve,
            consistency: comps.consistency,
            total: comps.total,
            generator: gen_value,
            lr_generator: phi.as_ref().map(|_| opt_g.lr),
            lr_adapter,
            anchors: sel.selected.iter().map(|&j| task.roster.identities[task.candidates[j]].id.clone()).collect(),
            anchor_weights: sel.weights.clone(),
        });
    }
    check_base_unchanged(base, &state)?;
    Ok(Unlearned {
        state,
        log,
        generator: phi,
    })
}

/// Ascent objective of the baselines: target concept BCE toward "present"
/// plus caption cross-entropy of the target's name slots, averaged over
/// the forget rows.
fn ascent_objective(g: &mut Graph, state: &ModelState, logits: Var, examples: &[&Example], task: &UnlearnTask) -> Result<Var> {
    let (s, v) = (state.geometry.slots, state.vocab_size());
    let z = concept_logits_graph(g, logits, s, &[task.target_concept()])?;
    let z = g.gather(z, Rc::new((0..examples.len()).collect()), &[examples.len()])?;
    let bce = g.bce_with_logits(z, &vec![1.0; examples.len()])?;
    let bce = g.mean(bce)?;

    let spc = state.geometry.slots_per_cell();
    let mut idx = Vec::new();
    for (b, e) in examples.iter().enumerate() {
        let targets = caption_targets(&e.scene, &task.roster, &state.vocab, e.task, &state.geometry)?;
        for m in e.scene.members.iter().filter(|m| m.identity == task.target) {
            for slot in m.cell * spc..(m.cell + 1) * spc {
                idx.push((b * s + slot) * v + targets[slot]);
            }
        }
    }
    if idx.is_empty() {
        return Ok(bce);
    }
    let lsm = g.log_softmax(logits)?;
    let n = idx.len();
    let picked = g.gather(lsm, Rc::new(idx), &[n])?;
    let nll = g.mean(picked)?;
    let nll = g.scale(nll, -1.0)?;
    g.add(bce, nll)
}

fn uniform_noise(images: &Tensor, eps: f64, r: &mut ChaCha8Rng) -> Tensor {
    let mut out = images.clone();
    out.data_mut()
        .iter_mut()
        .for_each(|x| *x = (*x + r.gen_range(-eps..=eps)).clamp(0.0, 1.0));
    out
}

fn adapter_update(
    state: &mut ModelState,
    opt: &mut AdamW,
    plateau: &mut Plateau,
    g: &Graph,
    bound: &crate::model::Bound,
    loss: Var,
    step: usize,
) -> Result<f64> {
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::Divergence {
            step,
            detail: format!("loss is {value}"),
        });
    }
    let grads = g.backward(loss)?;
    let gs = collect_grads(&grads, &bound.params(), step, "adapter")?;
    let refs: Vec<&Tensor> = gs.iter().collect();
    opt.step(&mut state.trainable_mut(Trainable::Lora), &refs)?;
    let lr = opt.lr;
    opt.lr = plateau.observe(value, opt.lr);
    Ok(lr)
}

/// Gradient-ascent family: plain ascent, or ascent plus `beta * KL` to the
/// frozen original model on retain samples.
fn run_ascent(base: &ModelState, task: &UnlearnTask, cfg: &UnlearnConfig, seed: u64, with_kl: bool) -> Result<Unlearned> {
    cfg.validate()?;
    let mut state = base.clone();
    let (n_forget, n_retain) = if with_kl && !task.retain.is_empty() {
        cfg.split()
    } else {
        (cfg.batch, 0)
    };
    let mut opt = AdamW::new(cfg.lr_adapter, cfg.adamw.clone());
    let mut plateau = Plateau::new(cfg.plateau.clone());
    let mut sampler = Sampler::new(task, seed);
    let mut noise_rng = rng::stream(seed, &[rng::tag("kl-noise")]);
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let drawn = sampler.draw(n_forget, n_retain);
        let forget: Vec<&Example> = drawn.examples[..drawn.forget.len()].to_vec();
        let retain: Vec<&Example> = drawn.examples[drawn.forget.len()..].to_vec();

        let mut g = Graph::new();
        let bound = state.bind(&mut g, Trainable::Lora)?;
        let x = g.constant(stack_images(forget.iter().map(|e| &e.image)));
        let logits = state.forward_graph(&mut g, &bound, x, &prompts_of(&forget))?;
        let ascent = ascent_objective(&mut g, &state, logits, &forget, task)?;
        let mut loss = g.scale(ascent, -1.0)?;
        let mut kl_value = 0.0;
        if !retain.is_empty() {
            let clean = stack_images(retain.iter().map(|e| &e.image));
            let prompts = prompts_of(&retain);
            let p_orig = clean_probabilities(base, &clean, &prompts)?;
            let xr = match cfg.kl_reference {
                KlReference::Original => clean,
                KlReference::Perturbed => uniform_noise(&clean, cfg.eps, &mut noise_rng),
            };
            let xr = g.constant(xr);
            let lr = state.forward_graph(&mut g, &bound, xr, &prompts)?;
            let p_cur = g.softmax(lr)?;
            let kl = consistency_loss_graph(&mut g, p_cur, &p_orig)?;
            kl_value = g.value(kl).data()[0];
            let kl = g.scale(kl, cfg.beta)?;
            loss = g.add(loss, kl)?;
        }
        let ascent_value = g.value(ascent).data()[0];
        let total = g.value(loss).data()[0];
        let lr_adapter = adapter_update(&mut state, &mut opt, &mut plateau, &g, &bound, loss, step)?;
        log.push(StepRecord {
            step,
            forget: ascent_value,
            preserve: 0.0,
            consistency: kl_value,
            total,
            generator: None,
            lr_generator: None,
            lr_adapter,
            anchors: Vec::new(),
            anchor_weights: Vec::new(),
        });
        if let Some(threshold) = cfg.stop_at_forgetting {
            if (step + 1) % STOP_CHECK_PERIOD == 0 && forget_set_rate(&state, task)? >= threshold {
                break;
            }
        }
    }
    check_base_unchanged(base, &state)?;
    Ok(Unlearned {
        state,
        log,
        generator: None,
    })
}

/// Share of the task's forget images on which the target is not recognized.
pub fn forget_set_rate(state: &ModelState, task: &UnlearnTask) -> Result<f64> {
    let outputs = crate::metrics::outputs_of(state, &task.forget)?;
    crate::metrics::forgetting_rate(&outputs, task.target_concept())
}

pub fn run_ga(base: &ModelState, task: &UnlearnTask, cfg: &UnlearnConfig, seed: u64) -> Result<Unlearned> {
    run_ascent(base, task, cfg, seed, false)
}

pub fn run_ga_kl(base: &ModelState, task: &UnlearnTask, cfg: &UnlearnConfig, seed: u64) -> Result<Unlearned> {
    run_ascent(base, task, cfg, seed, true)
}

/// Preference baseline: every caption slot of a forget query is pushed
/// toward the "unknown" token.
pub fn run_po(base: &ModelState, task: &UnlearnTask, cfg: &UnlearnConfig, seed: u64) -> Result<Unlearned> {
    cfg.validate()?;
    let mut state = base.clone();
    let (s, v) = (state.geometry.slots, state.vocab_size());
    let unknown = state.vocab.unknown();
    let mut opt = AdamW::new(cfg.lr_adapter, cfg.adamw.clone());
    let mut plateau = Plateau::new(cfg.plateau.clone());
    let mut sampler = Sampler::new(task, seed);
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let drawn = sampler.draw(cfg.batch, 0);
        let mut g = Graph::new();
        let bound = state.bind(&mut g, Trainable::Lora)?;
        let x = g.constant(stack_images(drawn.examples.iter().map(|e| &e.image)));
        let logits = state.forward_graph(&mut g, &bound, x, &prompts_of(&drawn.examples))?;
        let rows = drawn.examples.len() * s;
        let lsm = g.log_softmax(logits)?;
        let picked = g.gather(lsm, Rc::new((0..rows).map(|r| r * v + unknown).collect()), &[rows])?;
        let nll = g.mean(picked)?;
        let loss = g.scale(nll, -1.0)?;
        let total = g.value(loss).data()[0];
        let lr_adapter = adapter_update(&mut state, &mut opt, &mut plateau, &g, &bound, loss, step)?;
        log.push(StepRecord {
            step,
            forget: total,
            preserve: 0.0,
            consistency: 0.0,
            total,
            generator: None,
            lr_generator: None,
            lr_adapter,
            anchors: Vec::new(),
            anchor_weights: Vec::new(),
        });
    }
    check_base_unchanged(base, &state)?;
    Ok(Unlearned {
        state,
        log,
        generator: None,
    })
}

pub fn run(method: Method, base: &ModelState, task: &UnlearnTask, cfg: &UnlearnConfig, seed: u64) -> Result<Unlearned> {
    match method {
        Method::Auvic => run_auvic(base, task, cfg, seed),
        Method::Ga => run_ga(base, task, cfg, seed),
        Method::GaKl => run_ga_kl(base, task, cfg, seed),
        Method::Po => run_po(base, task, cfg, seed),
    }
}
