//! Experiment wiring: one configuration object that fixes roster, model,
//! data, benchmark, training and every unlearning method, plus helpers that
//! run each stage from it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::advgen::{default_prompt_templates, load_prompt_templates};
use crate::anchor::AnchorMode;
use crate::data::{generality_set, pretrain_set, unlearn_data, validation_set, DataConfig, Example, Prompts};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_target, grf_f1, ForgettingMatrix, MetricsReport, TargetEvaluation};
use crate::model::{recognized, Geometry, ModelState, Vocab};
use crate::train::{train_base, TrainConfig, TrainReport};
use crate::unlearn::{run, Method, UnlearnConfig, UnlearnTask, Unlearned};
use crate::vcubench::{
    build_benchmark, default_query_templates, make_roster, parse_query_templates, Benchmark, BenchmarkConfig, Category,
    QueryTemplate, Roster,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RosterConfig {
    pub identities: usize,
    pub similar_pairs: usize,
}

impl Default for RosterConfig {
    fn default() -> Self {
        Self {
            identities: 8,
            similar_pairs: 2,
        }
    }
}

/// Per-method unlearning settings; `matrix` drives the collateral
/// forgetting matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodConfigs {
    pub auvic: UnlearnConfig,
    pub ga: UnlearnConfig,
    pub ga_kl: UnlearnConfig,
    pub po: UnlearnConfig,
    pub matrix: UnlearnConfig,
}

impl Default for MethodConfigs {
    fn default() -> Self {
        let base = UnlearnConfig::default();
        Self {
            auvic: base.clone(),
            ga: base.clone(),
            ga_kl: UnlearnConfig {
                beta: 5.0,
                ..base.clone()
            },
            po: base.clone(),
            matrix: UnlearnConfig {
                steps: 400,
                stop_at_forgetting: Some(0.9),
                ..base
            },
        }
    }
}

impl MethodConfigs {
    pub fn get(&self, m: Method) -> &UnlearnConfig {
        match m {
            Method::Auvic => &self.auvic,
            Method::Ga => &self.ga,
            Method::GaKl => &self.ga_kl,
            Method::Po => &self.po,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Targets evaluated by `report`, `ablate` and default `unlearn` runs.
    pub targets: Vec<String>,
    /// Above this share of rejected benchmark samples the base model is
    /// considered inadequate.
    pub max_rejection: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            targets: vec!["id_0".into()],
            max_rejection: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub roster: RosterConfig,
    pub geometry: Geometry,
    pub data: DataConfig,
    pub benchmark: BenchmarkConfig,
    pub train: TrainConfig,
    pub unlearn: MethodConfigs,
    pub eval: EvalConfig,
    /// Optional replacement for the built-in query templates.
    pub query_templates: Option<PathBuf>,
    /// Optional replacement for the built-in prompt-perturbation templates.
    pub prompt_templates: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            roster: RosterConfig::default(),
            geometry: Geometry::default(),
            data: DataConfig::default(),
            benchmark: BenchmarkConfig::default(),
            train: TrainConfig::default(),
            unlearn: MethodConfigs::default(),
            eval: EvalConfig::default(),
            query_templates: None,
            prompt_templates: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("cannot serialise config: {e}")))
    }

    /// Hex SHA-256 of the canonical serialised form.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.data.validate()?;
        self.benchmark.validate()?;
        for m in Method::ALL {
            self.unlearn.get(m).validate()?;
        }
        self.unlearn.matrix.validate()?;
        if self.eval.targets.is_empty() {
            return Err(Error::Config("eval.targets must name at least one identity".into()));
        }
        Ok(())
    }
}

/// An ablation variant of the adversarial method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Full,
    NoGumbel,
    NoAdvPerturb,
    NoBoth,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoGumbel, Variant::NoAdvPerturb, Variant::NoBoth];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "AUVIC",
            Variant::NoGumbel => "w/o Gumbel",
            Variant::NoAdvPerturb => "w/o Adv Perturb",
            Variant::NoBoth => "w/o Both",
        }
    }

    pub fn apply(self, cfg: &UnlearnConfig) -> UnlearnConfig {
        let mut c = cfg.clone();
        if matches!(self, Variant::NoGumbel | Variant::NoBoth) {
            c.anchor.mode = AnchorMode::FixedCosine;
        }
        if matches!(self, Variant::NoAdvPerturb | Variant::NoBoth) {
            c.use_generator = false;
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub target: String,
    pub tfa: f64,
    pub ntra: f64,
    pub grf_f1: f64,
}

/// Outcome of checking benchmark labels against the base model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub checked: usize,
    pub rejected: usize,
    pub rejected_ids: Vec<String>,
}

impl Verification {
    pub fn rate(&self) -> f64 {
        if self.checked == 0 {
            0.0
        } else {
            self.rejected as f64 / self.checked as f64
        }
    }
}

/// Drops benchmark samples in which the base model misses any member and
/// reports how many went. More than `max_rejection` rejected is an error.
pub fn verify_labels(bench: &mut Benchmark, state: &ModelState, max_rejection: f64) -> Result<Verification> {
    let concepts = bench
        .roster
        .identities
        .iter()
        .map(|s| state.concept(s))
        .collect::<Result<Vec<_>>>()?;
    let mut rejected_ids = Vec::new();
    for target in bench.targets() {
        for (s, o) in crate::metrics::benchmark_outputs(state, bench, &target)? {
            let mut ok = true;
            for m in &s.members {
                ok &= recognized(&o, &concepts[m.identity])?;
            }
            if !ok {
                rejected_ids.push(s.id.clone());
            }
        }
    }
    let v = Verification {
        checked: bench.samples.len(),
        rejected: rejected_ids.len(),
        rejected_ids,
    };
    if v.rate() > max_rejection {
        return Err(Error::TrainingFailure(format!(
            "base model misidentifies {:.1}% of benchmark samples",
            100.0 * v.rate()
        )));
    }
    let drop: std::collections::HashSet<&String> = v.rejected_ids.iter().collect();
    bench.retain(|s| !drop.contains(&s.id));
    Ok(v)
}

/// Resolved inputs shared by every stage.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub roster: Roster,
    pub templates: Vec<QueryTemplate>,
    templates_text: Option<String>,
    pub prompts: Prompts,
    pub vocab: Vocab,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let roster = make_roster(config.roster.identities, config.roster.similar_pairs, config.seed)?;
        let (templates, templates_text) = match &config.query_templates {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                (parse_query_templates(&text)?, Some(text))
            }
            None => (default_query_templates(), None),
        };
        let pool = match &config.prompt_templates {
            Some(p) => load_prompt_templates(p)?,
            None => default_prompt_templates(),
        };
        let prompts = Prompts::new(&templates, pool)?;
        let mut texts: Vec<String> = prompts.texts().map(String::from).collect();
        texts.extend(crate::vcubench::template_words(&templates));
        let vocab = Vocab::for_roster(&roster.identities, texts.iter().map(String::as_str))?;
        Ok(Self {
            config,
            roster,
            templates,
            templates_text,
            prompts,
            vocab,
        })
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn benchmark(&self) -> Result<Benchmark> {
        let cfg = BenchmarkConfig {
            seed: self.config.seed,
            ..self.config.benchmark.clone()
        };
        build_benchmark(&self.roster, &cfg, &self.templates, self.templates_text.as_deref())
    }

    pub fn train_base(&self) -> Result<(ModelState, TrainReport)> {
        let seed = self.config.seed;
        let state = ModelState::init(self.config.geometry.clone(), self.vocab.clone(), seed)?;
        let train = pretrain_set(&self.roster, &self.vocab, &self.prompts, &self.config.data, seed)?;
        let val = validation_set(&self.roster, &self.vocab, &self.prompts, &self.config.data, seed)?;
        train_base(state, &self.roster, &train, &val, &self.config.train, seed)
    }

    /// Checks that `state` was built for this experiment's roster and
    /// vocabulary.
    pub fn check_model(&self, state: &ModelState) -> Result<()> {
        if state.vocab != self.vocab {
            return Err(Error::Input("checkpoint vocabulary does not match this configuration".into()));
        }
        Ok(())
    }

    pub fn target_index(&self, id: &str) -> Result<usize> {
        self.roster.index_of(id)
    }

    pub fn task(&self, state: &ModelState, target: usize, data: &DataConfig, cfg: &UnlearnConfig) -> Result<UnlearnTask> {
        let d = unlearn_data(&self.roster, &self.vocab, &self.prompts, data, target, self.config.seed)?;
        UnlearnTask::new(state, &self.roster, d, &cfg.anchor)
    }

    pub fn unlearn_with(&self, base: &ModelState, method: Method, target: usize, cfg: &UnlearnConfig) -> Result<Unlearned> {
        let task = self.task(base, target, &self.config.data, cfg)?;
        run(method, base, &task, cfg, crate::rng::derive(self.config.seed, &[target as u64]))
    }

    pub fn unlearn(&self, base: &ModelState, method: Method, target: usize) -> Result<Unlearned> {
        self.unlearn_with(base, method, target, self.config.unlearn.get(method))
    }

    pub fn generality_set(&self) -> Result<Vec<Example>> {
        generality_set(&self.roster, &self.vocab, &self.prompts, &self.config.data, self.config.seed)
    }

    pub fn evaluate(&self, state: &ModelState, bench: &Benchmark, target: &str, label: &str, held_out: &[Example]) -> Result<TargetEvaluation> {
        evaluate_target(state, bench, target, held_out, label)
    }

    /// Single images of every identity taken from the benchmark's
    /// target-single blocks, with each sample's concept query.
    pub fn identity_singles(&self, bench: &Benchmark) -> Result<Vec<Vec<Example>>> {
        let mut out = vec![Vec::new(); self.roster.len()];
        for s in bench.samples.iter().filter(|s| s.category == Category::TargetSingle) {
            let i = self.roster.index_of(&s.target)?;
            out[i].push(Example {
                scene: crate::vcubench::SceneSpec {
                    members: s.members.clone(),
                    seed: 0,
                },
                image: bench.image(&s.image)?.clone(),
                prompt: self.vocab.encode(&s.decision_query().query)?,
                task: crate::data::Task::Names,
            });
        }
        if let Some(i) = out.iter().position(Vec::is_empty) {
            return Err(Error::Input(format!(
                "benchmark has no target-single images of {}",
                self.roster.identities[i].id
            )));
        }
        Ok(out)
    }

    /// Gradient ascent on each identity's single images in turn, measuring
    /// every identity's forgetting rate afterwards.
    pub fn forgetting_matrix(&self, base: &ModelState, bench: &Benchmark, jobs: usize) -> Result<ForgettingMatrix> {
        let singles = self.identity_singles(bench)?;
        let data = DataConfig {
            forget_groups: 0,
            retain_singles: 0,
            retain_groups: 0,
            ..self.config.data.clone()
        };
        let cfg = &self.config.unlearn.matrix;
        crate::metrics::forgetting_matrix(&self.roster, &singles, jobs, |i| {
            let mut task = self.task(base, i, &data, cfg)?;
            // neutral questions, so the name cannot be read off the prompt
            let mut r = crate::rng::stream(self.config.seed, &[crate::rng::tag("matrix-prompts"), i as u64]);
            for e in &mut task.forget {
                e.prompt = self.prompts.name_prompt(&self.roster, &self.vocab, &mut r)?;
            }
            Ok(run(Method::Ga, base, &task, cfg, crate::rng::derive(self.config.seed, &[i as u64]))?.state)
        })
    }

    pub fn ablation(&self, base: &ModelState, bench: &Benchmark, target: &str, jobs: usize) -> Result<Vec<AblationRow>> {
        let t = self.target_index(target)?;
        let rows = crate::parallel::map(Variant::ALL.len(), jobs, |k| -> Result<AblationRow> {
            let v = Variant::ALL[k];
            let cfg = v.apply(&self.config.unlearn.auvic);
            let out = self.unlearn_with(base, Method::Auvic, t, &cfg)?;
            let outputs = crate::metrics::benchmark_outputs(&out.state, bench, target)?;
            let concepts = crate::train::roster_concepts(&out.state, &self.roster)?;
            let ds = crate::metrics::decisions(&outputs, &self.roster, &concepts)?;
            let c = crate::metrics::EvalCounts::from_decisions(&ds);
            let (tfa, ntra) = (c.tfa()?, c.ntra()?);
            Ok(AblationRow {
                variant: v.label().into(),
                target: target.into(),
                tfa,
                ntra,
                grf_f1: grf_f1(tfa, ntra),
            })
        });
        rows.into_iter().collect()
    }
}

impl Experiment {
    /// Base model and every method on each evaluation target, the ablation
    /// grid per target and, if asked, the forgetting matrix.
    pub fn run_report(
        &self,
        base: &ModelState,
        bench: &Benchmark,
        base_rejection_rate: f64,
        jobs: usize,
        with_matrix: bool,
    ) -> Result<RunReport> {
        let held = self.generality_set()?;
        let mut methods = Vec::new();
        let mut ablation = Vec::new();
        for target in &self.config.eval.targets {
            let t = self.target_index(target)?;
            methods.push(self.evaluate(base, bench, target, "base", &held)?.report);
            let runs = crate::parallel::map(Method::ALL.len(), jobs, |k| -> Result<MetricsReport> {
                let m = Method::ALL[k];
                let out = self.unlearn(base, m, t)?;
                Ok(self.evaluate(&out.state, bench, target, m.label(), &held)?.report)
            });
            for r in runs {
                methods.push(r?);
            }
            ablation.extend(self.ablation(base, bench, target, jobs)?);
        }
        let matrix = if with_matrix {
            Some(self.forgetting_matrix(base, bench, jobs)?)
        } else {
            None
        };
        Ok(RunReport {
            config_hash: self.config.hash()?,
            seed: self.config.seed,
            base_rejection_rate,
            methods,
            ablation,
            matrix,
        })
    }
}

pub fn ablation_markdown(rows: &[AblationRow]) -> String {
    let mut out = String::from("| Variant | Target | TFA | NTRA | GRF-F1 |\n|---|---|---:|---:|---:|\n");
    for r in rows {
        out.push_str(&format!(
            "| {} | {} | {:.2} | {:.2} | {:.2} |\n",
            r.variant, r.target, r.tfa, r.ntra, r.grf_f1
        ));
    }
    out
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,target,tfa,ntra,grf_f1\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.4},{:.4},{:.4}\n", r.variant, r.target, r.tfa, r.ntra, r.grf_f1));
    }
    out
}

/// Every metrics row, ablation row and matrix of a full run. Timing lives
/// elsewhere so identical configurations give identical bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub seed: u64,
    pub base_rejection_rate: f64,
    pub methods: Vec<MetricsReport>,
    pub ablation: Vec<AblationRow>,
    pub matrix: Option<ForgettingMatrix>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let c = ExperimentConfig::default();
        let text = c.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
        assert_eq!(c.hash().unwrap(), ExperimentConfig::from_toml(&text).unwrap().hash().unwrap());
        let partial = ExperimentConfig::from_toml("seed = 3\n[roster]\nidentities = 12\n").unwrap();
        assert_eq!(partial.seed, 3);
        assert_eq!(partial.roster.identities, 12);
        assert_eq!(partial.geometry, Geometry::default());
        assert!(matches!(ExperimentConfig::from_toml("bogus = 1"), Err(Error::Config(_))));
    }

    #[test]
    fn variants_switch_the_right_components() {
        let c = UnlearnConfig::default();
        assert_eq!(Variant::Full.apply(&c), c);
        assert_eq!(Variant::NoGumbel.apply(&c).anchor.mode, AnchorMode::FixedCosine);
        assert!(Variant::NoGumbel.apply(&c).use_generator);
        assert!(!Variant::NoAdvPerturb.apply(&c).use_generator);
        let both = Variant::NoBoth.apply(&c);
        assert!(!both.use_generator && both.anchor.mode == AnchorMode::FixedCosine);
    }

    #[test]
    fn experiment_builds_a_consistent_vocabulary() {
        let e = Experiment::new(ExperimentConfig::default()).unwrap();
        for t in &e.templates {
            if !t.text.contains('{') {
                e.vocab.encode(&t.text).unwrap();
            }
        }
        assert_eq!(e.roster.len(), 8);
    }
}
