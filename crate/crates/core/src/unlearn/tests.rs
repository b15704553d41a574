use rand::Rng;

use super::*;
use crate::advgen::default_prompt_templates;
use crate::data::{unlearn_data, DataConfig, Prompts};
use crate::grad::grad_check_many;
use crate::model::{Geometry, ModelOutput, Vocab};
use crate::vcubench::{default_query_templates, make_roster};

fn output(rows: usize, cols: usize, vals: Vec<f64>) -> ModelOutput {
    ModelOutput::from_logits(Tensor::new(vec![rows, cols], vals).unwrap())
}

fn bce_oracle(z: f64, t: f64) -> f64 {
    let s = 1.0 / (1.0 + (-z).exp());
    -(t * s.ln() + (1.0 - t) * (1.0 - s).ln())
}

/// Two-identity model with small geometry and a tiny unlearning task.
pub(super) fn micro(seed: u64) -> (ModelState, UnlearnTask) {
    let roster = make_roster(2, 0, seed).unwrap();
    let prompts = Prompts::new(&default_query_templates(), default_prompt_templates()).unwrap();
    let vocab = Vocab::for_roster(&roster.identities, prompts.texts()).unwrap();
    let geo = Geometry {
        width: 8,
        patch: 8,
        slots: 4,
        max_prompt: 32,
        rank: 2,
        alpha: 2.0,
    };
    let state = ModelState::init(geo, vocab, seed).unwrap();
    let cfg = DataConfig {
        forget_singles: 2,
        forget_groups: 2,
        retain_singles: 2,
        retain_groups: 0,
        ..Default::default()
    };
    let data = unlearn_data(&roster, &state.vocab, &prompts, &cfg, 0, seed).unwrap();
    let anchor = AnchorConfig {
        m: 1,
        ..Default::default()
    };
    let task = UnlearnTask::new(&state, &roster, data, &anchor).unwrap();
    (state, task)
}

fn micro_cfg() -> UnlearnConfig {
    UnlearnConfig {
        batch: 4,
        steps: 6,
        generator_hidden: 4,
        preserve_scope: PreserveScope::All,
        anchor: AnchorConfig {
            m: 1,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn micro_inputs(state: &ModelState, task: &UnlearnTask, with_clean: bool) -> ObjectiveInputs {
    let ex: Vec<&Example> = task.forget.iter().take(2).chain(task.retain.iter().take(1)).collect();
    let images = stack_images(ex.iter().map(|e| &e.image));
    let prompts = prompts_of(&ex);
    let enc = FrozenEncoder::new(0);
    let features = enc.batch_features(&ex.iter().map(|e| &e.image).collect::<Vec<_>>());
    let sel = AnchorSelection {
        selected: vec![0],
        weights: vec![1.0],
        distribution: vec![1.0],
        seed: 0,
    };
    let p_clean = with_clean.then(|| clean_probabilities(state, &images, &prompts).unwrap());
    ObjectiveInputs {
        images,
        features,
        prompts,
        forget_rows: vec![0, 1],
        terms: task.anchor_terms(&ex, &sel, PreserveScope::All),
        p_clean,
    }
}

fn randomised(phi: &mut GeneratorParams, state: &mut ModelState, seed: u64) {
    let mut r = rng::stream(seed, &[]);
    phi.w3.data_mut().iter_mut().for_each(|x| *x = r.gen_range(-0.5..0.5));
    phi.b3.data_mut().iter_mut().for_each(|x| *x = r.gen_range(-0.1..0.1));
    for l in &mut state.lora {
        l.b.data_mut().iter_mut().for_each(|x| *x = r.gen_range(-0.3..0.3));
    }
}

#[test]
fn forgetting_loss_examples() {
    let c = ConceptVocab::new("c".into(), vec![1], 3).unwrap();
    let at = |z: f64| output(1, 3, vec![5.0, z, -1.0]);
    assert!((forgetting_loss(&at(0.0), &c, 0.0).unwrap() - 2f64.ln()).abs() < 1e-12);
    assert!(forgetting_loss(&at(-20.0), &c, 0.0).unwrap() < 1e-8);
    let mut r = rng::stream(4, &[]);
    for _ in 0..200 {
        let z = r.gen_range(-8.0..8.0);
        let t = r.gen_range(0.0..=1.0);
        assert!((forgetting_loss(&at(z), &c, t).unwrap() - bce_oracle(z, t)).abs() < 1e-10);
    }
    assert!(matches!(forgetting_loss(&at(0.0), &c, 1.5), Err(Error::Config(_))));
}

#[test]
fn preservation_loss_examples() {
    let a = ConceptVocab::new("a".into(), vec![0], 3).unwrap();
    let b = ConceptVocab::new("b".into(), vec![2], 3).unwrap();
    assert!(preservation_loss(&output(1, 3, vec![20.0, 0.0, 0.0]), &[(&a, 1.0)], 1.0).unwrap() < 1e-8);
    let o = output(1, 3, vec![0.7, -3.0, 0.7]);
    let two = preservation_loss(&o, &[(&a, 0.5), (&b, 0.5)], 1.0).unwrap();
    assert!((two - bce_oracle(0.7, 1.0)).abs() < 1e-12);
    let mut r = rng::stream(5, &[]);
    for _ in 0..100 {
        let vals: Vec<f64> = (0..6).map(|_| r.gen_range(-4.0..4.0)).collect();
        let o = output(2, 3, vals.clone());
        let (wa, wb) = (r.gen_range(0.0..1.0), r.gen_range(0.0..1.0));
        let za = vals[0].max(vals[3]);
        let zb = vals[2].max(vals[5]);
        let brute = wa * bce_oracle(za, 1.0) + wb * bce_oracle(zb, 1.0);
        assert!((preservation_loss(&o, &[(&a, wa), (&b, wb)], 1.0).unwrap() - brute).abs() < 1e-10);
    }
    assert!(preservation_loss(&o, &[], 1.0).is_err());
}

#[test]
fn consistency_loss_examples() {
    let p = Tensor::new(vec![2, 3], vec![0.2, 0.3, 0.5, 0.1, 0.1, 0.8]).unwrap();
    assert!(consistency_loss(&p, &p).unwrap().abs() <= 1e-12);
    let adv = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
    let clean = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
    assert!((consistency_loss(&adv, &clean).unwrap() - 2f64.ln()).abs() < 1e-12);
    let zero = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
    let other = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
    assert!(consistency_loss(&zero, &other).unwrap().is_finite());
    let mut r = rng::stream(6, &[]);
    let mut row = |n: usize| {
        let v: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..1.0f64).powi(3)).collect();
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect::<Vec<_>>()
    };
    for _ in 0..1000 {
        let a = Tensor::new(vec![1, 5], row(5)).unwrap();
        let b = Tensor::new(vec![1, 5], row(5)).unwrap();
        assert!(consistency_loss(&a, &b).unwrap() >= 0.0);
    }
}

#[test]
fn graph_losses_match_value_forms() {
    let mut r = rng::stream(7, &[]);
    let vals: Vec<f64> = (0..2 * 3 * 4).map(|_| r.gen_range(-3.0..3.0)).collect();
    let outs = [
        output(3, 4, vals[..12].to_vec()),
        output(3, 4, vals[12..].to_vec()),
    ];
    let t = ConceptVocab::new("t".into(), vec![1], 4).unwrap();
    let a = ConceptVocab::new("a".into(), vec![2, 3], 4).unwrap();
    let mut g = Graph::new();
    let l = g.constant(Tensor::new(vec![6, 4], vals).unwrap());
    let f = forgetting_loss_graph(&mut g, l, 3, &[0, 1], &t, 0.0).unwrap();
    let expect = (forgetting_loss(&outs[0], &t, 0.0).unwrap() + forgetting_loss(&outs[1], &t, 0.0).unwrap()) / 2.0;
    assert!((g.value(f).data()[0] - expect).abs() < 1e-12);

    let z = concept_logits_graph(&mut g, l, 3, &[&t, &a]).unwrap();
    let terms = [
        AnchorTerm { sample: 0, concept: 1, weight: 0.25 },
        AnchorTerm { sample: 1, concept: 1, weight: 0.75 },
    ];
    let p = preservation_loss_graph(&mut g, z, &terms, 1.0).unwrap();
    let expect = (preservation_loss(&outs[0], &[(&a, 0.25)], 1.0).unwrap()
        + preservation_loss(&outs[1], &[(&a, 0.75)], 1.0).unwrap())
        / 2.0;
    assert!((g.value(p).data()[0] - expect).abs() < 1e-12);

    let q = outs[1].probabilities.clone();
    let q = Tensor::new(vec![3, 4], q.into_data()).unwrap();
    let l0 = g.constant(outs[0].logits.clone());
    let p0 = g.softmax(l0).unwrap();
    let c = consistency_loss_graph(&mut g, p0, &q).unwrap();
    let expect = consistency_loss(&outs[0].probabilities, &q).unwrap();
    assert!((g.value(c).data()[0] - expect).abs() < 1e-12);
}

/// Objective on the micro-model with generator and adapters as variables.
fn objective_fd(part: fn(&ObjectiveVars) -> Var) -> f64 {
    let (mut state, task) = micro(1);
    let cfg = micro_cfg();
    let mut phi = GeneratorParams::new(4, DEFAULT_EPS, 3).unwrap();
    randomised(&mut phi, &mut state, 8);
    let inputs = micro_inputs(&state, &task, true);
    let mut points: Vec<Tensor> = phi.tensors().into_iter().cloned().collect();
    points.extend(state.lora.iter().flat_map(|l| [l.a.clone(), l.b.clone()]));
    grad_check_many(
        |g, v| {
            let bound = state.bind_lora_vars(g, &v[6..])?;
            let f = g.constant(inputs.features.clone());
            let x = g.constant(inputs.images.clone());
            let x_adv = perturbed_graph(g, &v[..6], phi.eps, f, x)?;
            let obj = objective_graph(g, &state, &bound, x_adv, &inputs, &task, &cfg)?;
            Ok(part(&obj))
        },
        &points,
        1e-6,
    )
    .unwrap()
}

#[test]
fn forgetting_gradient_matches_finite_differences() {
    let err = objective_fd(|o| o.forget);
    assert!(err < 1e-4, "{err}");
}

#[test]
fn preservation_gradient_matches_finite_differences() {
    let err = objective_fd(|o| o.preserve);
    assert!(err < 1e-4, "{err}");
}

#[test]
fn consistency_gradient_matches_finite_differences() {
    let err = objective_fd(|o| o.consistency);
    assert!(err < 1e-4, "{err}");
}

#[test]
fn total_gradient_matches_finite_differences() {
    let err = objective_fd(|o| o.total);
    assert!(err < 1e-4, "{err}");
}

fn eval_objective(state: &ModelState, phi: &GeneratorParams, inputs: &ObjectiveInputs, task: &UnlearnTask, cfg: &UnlearnConfig) -> Components {
    let mut g = Graph::new();
    let vars = phi.bind(&mut g, false);
    let bound = state.bind(&mut g, Trainable::Nothing).unwrap();
    let f = g.constant(inputs.features.clone());
    let x = g.constant(inputs.images.clone());
    let xa = perturbed_graph(&mut g, &vars, phi.eps, f, x).unwrap();
    objective_graph(&mut g, state, &bound, xa, inputs, task, cfg).unwrap().values(&g)
}

#[test]
fn degenerate_weights_and_identity_generator() {
    let (mut state, task) = micro(2);
    let mut phi = GeneratorParams::new(4, DEFAULT_EPS, 0).unwrap();
    let inputs = micro_inputs(&state, &task, true);
    let zero_w = UnlearnConfig {
        lambda: 0.0,
        beta: 0.0,
        ..micro_cfg()
    };
    // zero-initialised generator: x' = x so the clean and adversarial branches agree
    let c = eval_objective(&state, &phi, &inputs, &task, &micro_cfg());
    assert!(c.consistency.abs() < 1e-12, "{}", c.consistency);
    randomised(&mut phi, &mut state, 3);
    let inputs = micro_inputs(&state, &task, true);
    let c = eval_objective(&state, &phi, &inputs, &task, &zero_w);
    assert_eq!(c.total, c.forget);
    assert!(c.consistency > 0.0);
}

#[test]
fn generator_ascent_raises_the_target_logit() {
    let (state, task) = micro(3);
    let cfg = UnlearnConfig {
        lr_generator: 1e-2,
        ..micro_cfg()
    };
    let inputs = micro_inputs(&state, &task, false);
    let mut phi = GeneratorParams::new(4, DEFAULT_EPS, 1).unwrap();
    let mut opt = AdamW::new(cfg.lr_generator, cfg.adamw.clone());
    let before = eval_objective(&state, &phi, &inputs, &task, &cfg).forget;
    for s in 0..50 {
        generator_step(&state, &mut phi, &mut opt, &inputs, &task, &cfg, s).unwrap();
    }
    let after = eval_objective(&state, &phi, &inputs, &task, &cfg).forget;
    // a larger forgetting loss means a larger target logit
    assert!(after > before, "{before} -> {after}");
    let xp = perturbed_batch(&phi, &inputs.features, &inputs.images).unwrap();
    for (a, b) in xp.data().iter().zip(inputs.images.data()) {
        assert!((a - b).abs() <= DEFAULT_EPS + 1e-15);
        assert!((0.0..=1.0).contains(a));
    }
}

#[test]
fn plain_gradient_ascent_never_lowers_the_forgetting_loss() {
    let (state, task) = micro(4);
    let cfg = micro_cfg();
    let inputs = micro_inputs(&state, &task, false);
    let mut phi = GeneratorParams::new(4, DEFAULT_EPS, 2).unwrap();
    let mut g = Graph::new();
    let vars = phi.bind(&mut g, true);
    let bound = state.bind(&mut g, Trainable::Nothing).unwrap();
    let f = g.constant(inputs.features.clone());
    let x = g.constant(inputs.images.clone());
    let xa = perturbed_graph(&mut g, &vars, phi.eps, f, x).unwrap();
    let obj = objective_graph(&mut g, &state, &bound, xa, &inputs, &task, &cfg).unwrap();
    let before = g.value(obj.forget).data()[0];
    let grads = g.backward(obj.forget).unwrap();
    let gs: Vec<Tensor> = vars.iter().map(|&v| grads.get(v).unwrap().clone()).collect();
    let dir: f64 = gs.iter().map(|t| t.data().iter().map(|x| x * x).sum::<f64>()).sum();
    assert!(dir >= 0.0);
    for (p, g) in phi.tensors_mut().into_iter().zip(&gs) {
        p.axpy(1e-3, g);
    }
    let after = eval_objective(&state, &phi, &inputs, &task, &cfg).forget;
    assert!(after >= before, "{before} -> {after}");
}

#[test]
fn zero_learning_rate_leaves_the_generator() {
    let (state, task) = micro(5);
    let cfg = micro_cfg();
    let inputs = micro_inputs(&state, &task, false);
    let mut phi = GeneratorParams::new(4, DEFAULT_EPS, 1).unwrap();
    let before = phi.clone();
    let mut opt = AdamW::new(0.0, AdamWConfig { weight_decay: 0.0, ..Default::default() });
    generator_step(&state, &mut phi, &mut opt, &inputs, &task, &cfg, 0).unwrap();
    assert_eq!(phi, before);
}

#[test]
fn discriminator_steps_lower_forgetting_and_freeze_the_base() {
    let (state, task) = micro(6);
    let base = state.clone();
    let mut state = state;
    let cfg = UnlearnConfig {
        lr_adapter: 5e-3,
        ..micro_cfg()
    };
    let inputs = micro_inputs(&state, &task, true);
    let mut phi = GeneratorParams::new(4, DEFAULT_EPS, 1).unwrap();
    let mut dummy = state.clone();
    randomised(&mut phi, &mut dummy, 9);
    let mut opt = AdamW::new(cfg.lr_adapter, cfg.adamw.clone());
    let mut lf = Vec::new();
    for s in 0..100 {
        lf.push(discriminator_step(&mut state, Some(&phi), &mut opt, &inputs, &task, &cfg, s).unwrap().forget);
    }
    assert_eq!(state.base, base.base);
    assert_ne!(state.lora, base.lora);
    let first: f64 = lf[..10].iter().sum::<f64>() / 10.0;
    let last: f64 = lf[90..].iter().sum::<f64>() / 10.0;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn auvic_runs_are_deterministic_and_adapter_only() {
    let (state, task) = micro(7);
    let cfg = micro_cfg();
    let a = run_auvic(&state, &task, &cfg, 11).unwrap();
    let b = run_auvic(&state, &task, &cfg, 11).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.to_jsonl().unwrap(), b.log.to_jsonl().unwrap());
    assert_eq!(a.state, b.state);
    assert_eq!(a.state.base, state.base);
    assert_eq!(a.log.records.len(), cfg.steps);
    let c = run_auvic(&state, &task, &cfg, 12).unwrap();
    assert_ne!(a.log, c.log);
}

#[test]
fn baselines_touch_adapters_only() {
    let (state, task) = micro(8);
    let cfg = micro_cfg();
    for m in [Method::Ga, Method::GaKl, Method::Po] {
        let out = run(m, &state, &task, &cfg, 1).unwrap();
        assert_eq!(out.state.base, state.base, "{m}");
        assert_ne!(out.state.lora, state.lora, "{m}");
        assert_eq!(out.log.records.len(), cfg.steps);
    }
    let perturbed = UnlearnConfig {
        kl_reference: KlReference::Perturbed,
        ..cfg
    };
    run_ga_kl(&state, &task, &perturbed, 1).unwrap();
}

#[test]
fn train_log_round_trips_through_jsonl() {
    let (state, task) = micro(9);
    let out = run_auvic(&state, &task, &micro_cfg(), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("log.jsonl");
    out.log.write(&p).unwrap();
    assert_eq!(TrainLog::read(&p).unwrap(), out.log);
}

#[test]
fn anchor_scope_filters_absent_anchors() {
    let (_, task) = micro(10);
    let sel = AnchorSelection {
        selected: vec![0],
        weights: vec![1.0],
        distribution: vec![1.0],
        seed: 0,
    };
    let ex: Vec<&Example> = task.forget.iter().chain(&task.retain).collect();
    let all = task.anchor_terms(&ex, &sel, PreserveScope::All);
    let present = task.anchor_terms(&ex, &sel, PreserveScope::Present);
    assert_eq!(all.len(), ex.len());
    assert_eq!(present.len(), ex.iter().filter(|e| e.scene.contains(task.candidates[0])).count());
    assert!(!task.candidates.contains(&task.target));
}

#[test]
fn config_validation() {
    let ok = UnlearnConfig::default();
    ok.validate().unwrap();
    for bad in [
        UnlearnConfig { lambda: -1.0, ..ok.clone() },
        UnlearnConfig { l_neg: 1.0, l_pos: 0.5, ..ok.clone() },
        UnlearnConfig { l_pos: 2.0, ..ok.clone() },
        UnlearnConfig { steps: 0, ..ok.clone() },
        UnlearnConfig { retain_fraction: 1.0, ..ok.clone() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
    assert!("auvic".parse::<Method>().is_ok());
    assert!(matches!("siu".parse::<Method>(), Err(Error::Config(_))));
}
