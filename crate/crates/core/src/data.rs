//! In-memory training splits: pretraining, unlearning forget/retain sets
//! and the held-out attribute task. Every split draws renders from its own
//! seed stream, disjoint from the evaluation benchmark.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::advgen::perturb_prompt;
use crate::error::{Error, Result};
use crate::model::{Geometry, Vocab};
use crate::rng;
use crate::vcubench::{
    group_scene, render_scene, single_scene, Image, ProbeKind, QueryTemplate, Roster, SceneSpec, Split,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// Caption member names.
    Names,
    /// Caption each member's shape and hue.
    Attributes,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub scene: SceneSpec,
    pub image: Image,
    pub prompt: Vec<usize>,
    pub task: Task,
}

impl Example {
    pub fn members(&self) -> impl Iterator<Item = usize> + '_ {
        self.scene.members.iter().map(|m| m.identity)
    }
}

pub const ATTRIBUTE_PROMPTS: &str = "\
describe the shape and colour of each figure .
what shape and colour is every figure ?
list each shape and colour you can see .
";

/// Prompt sources shared by training, unlearning and evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Prompts {
    pub concept: Vec<String>,
    pub pool: Vec<String>,
    pub attribute: Vec<String>,
}

impl Prompts {
    pub fn new(templates: &[QueryTemplate], pool: Vec<String>) -> Result<Self> {
        let concept: Vec<String> = templates
            .iter()
            .filter(|t| t.kind == ProbeKind::Concept)
            .map(|t| t.text.clone())
            .collect();
        if concept.is_empty() {
            return Err(Error::Config("no concept query template".into()));
        }
        if pool.is_empty() {
            return Err(Error::Config("prompt template pool is empty".into()));
        }
        Ok(Self {
            concept,
            pool,
            attribute: crate::advgen::parse_prompt_templates(ATTRIBUTE_PROMPTS),
        })
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.concept
            .iter()
            .chain(&self.pool)
            .chain(&self.attribute)
            .map(String::as_str)
    }

    /// A plain concept question or a perturbed one naming a random identity.
    pub fn name_prompt(&self, roster: &Roster, vocab: &Vocab, r: &mut impl Rng) -> Result<Vec<usize>> {
        if r.gen_bool(0.5) {
            vocab.encode(self.concept.choose(r).expect("non-empty"))
        } else {
            let who = roster.identities.choose(r).expect("roster is non-empty");
            self.perturbed(&who.name, vocab, r)
        }
    }

    pub fn perturbed(&self, name: &[String], vocab: &Vocab, r: &mut impl Rng) -> Result<Vec<usize>> {
        let words = perturb_prompt(name, &self.pool, r)?;
        words.iter().map(|w| vocab.id(w)).collect()
    }

    pub fn attribute_prompt(&self, vocab: &Vocab, r: &mut impl Rng) -> Result<Vec<usize>> {
        vocab.encode(self.attribute.choose(r).expect("non-empty"))
    }
}

/// Per-slot target tokens: slots `2c, 2c+1` carry the cell-`c` member's two
/// name tokens (or shape, hue); empty cells are padding.
pub fn caption_targets(
    scene: &SceneSpec,
    roster: &Roster,
    vocab: &Vocab,
    task: Task,
    geometry: &Geometry,
) -> Result<Vec<usize>> {
    let spc = geometry.slots_per_cell();
    let mut out = vec![vocab.pad(); geometry.slots];
    for m in &scene.members {
        let spec = &roster.identities[m.identity];
        let words: [&str; 2] = match task {
            Task::Names => [&spec.name[0], &spec.name[1]],
            Task::Attributes => [spec.appearance.shape_name(), spec.appearance.hue_name()],
        };
        for j in 0..spc {
            out[m.cell * spc + j] = vocab.id(words[j.min(1)])?;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub pretrain_singles: usize,
    pub pretrain_groups: usize,
    /// Share of pretraining images that get an attribute prompt.
    pub attribute_fraction: f64,
    pub validation_singles: usize,
    pub validation_groups: usize,
    pub forget_singles: usize,
    pub forget_groups: usize,
    pub retain_singles: usize,
    pub retain_groups: usize,
    pub generality_singles: usize,
    pub generality_groups: usize,
    pub min_group_size: usize,
    pub max_group_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            pretrain_singles: 30,
            pretrain_groups: 480,
            attribute_fraction: 0.25,
            validation_singles: 10,
            validation_groups: 80,
            forget_singles: 30,
            forget_groups: 30,
            retain_singles: 8,
            retain_groups: 60,
            generality_singles: 5,
            generality_groups: 40,
            min_group_size: 2,
            max_group_size: 4,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.attribute_fraction) {
            return Err(Error::Config("attribute-fraction must lie in [0, 1]".into()));
        }
        if self.min_group_size < 2 || self.max_group_size > 4 || self.min_group_size > self.max_group_size {
            return Err(Error::Config("group sizes must satisfy 2 <= min <= max <= 4".into()));
        }
        if self.forget_singles + self.forget_groups == 0 {
            return Err(Error::Config("forget set would be empty".into()));
        }
        Ok(())
    }

    fn sizes(&self) -> (usize, usize) {
        (self.min_group_size, self.max_group_size)
    }
}

fn example(
    scene: SceneSpec,
    roster: &Roster,
    prompt: Vec<usize>,
    task: Task,
) -> Result<Example> {
    Ok(Example {
        image: render_scene(&scene, &roster.identities)?,
        scene,
        prompt,
        task,
    })
}

/// Pretraining images for every identity, mostly with name prompts.
pub fn pretrain_set(
    roster: &Roster,
    vocab: &Vocab,
    prompts: &Prompts,
    cfg: &DataConfig,
    seed: u64,
) -> Result<Vec<Example>> {
    let mut r = rng::stream(seed, &[rng::tag("pretrain-prompts")]);
    let mut scenes = Vec::new();
    for i in 0..roster.len() {
        for k in 0..cfg.pretrain_singles {
            scenes.push(single_scene(seed, Split::Pretrain, i, k));
        }
    }
    for k in 0..cfg.pretrain_groups {
        scenes.push(group_scene(seed, Split::Pretrain, "groups", k, roster.len(), cfg.sizes(), None, None));
    }
    scenes
        .into_iter()
        .map(|s| {
            if r.gen_bool(cfg.attribute_fraction) {
                let p = prompts.attribute_prompt(vocab, &mut r)?;
                example(s, roster, p, Task::Attributes)
            } else {
                let p = prompts.name_prompt(roster, vocab, &mut r)?;
                example(s, roster, p, Task::Names)
            }
        })
        .collect()
}

/// Held-out renders for checking base recognition: singles then groups.
pub fn validation_set(
    roster: &Roster,
    vocab: &Vocab,
    prompts: &Prompts,
    cfg: &DataConfig,
    seed: u64,
) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    let p = vocab.encode(&prompts.concept[0])?;
    for i in 0..roster.len() {
        for k in 0..cfg.validation_singles {
            out.push(example(single_scene(seed, Split::Pretrain, i, 100_000 + k), roster, p.clone(), Task::Names)?);
        }
    }
    for k in 0..cfg.validation_groups {
        let s = group_scene(seed, Split::Pretrain, "validation-groups", k, roster.len(), cfg.sizes(), None, None);
        out.push(example(s, roster, p.clone(), Task::Names)?);
    }
    Ok(out)
}

/// Unlearning data for one target.
#[derive(Clone, Debug)]
pub struct UnlearnData {
    pub target: usize,
    /// Images containing the target, each with a perturbed prompt.
    pub forget: Vec<Example>,
    /// Images without the target.
    pub retain: Vec<Example>,
}

pub fn unlearn_data(
    roster: &Roster,
    vocab: &Vocab,
    prompts: &Prompts,
    cfg: &DataConfig,
    target: usize,
    seed: u64,
) -> Result<UnlearnData> {
    if target >= roster.len() {
        return Err(Error::Input(format!("target index {target} not in roster")));
    }
    let name = &roster.identities[target].name;
    let mut r = rng::stream(seed, &[rng::tag("unlearn-prompts"), target as u64]);
    let mut forget = Vec::new();
    for k in 0..cfg.forget_singles {
        let p = prompts.perturbed(name, vocab, &mut r)?;
        forget.push(example(single_scene(seed, Split::Forget, target, k), roster, p, Task::Names)?);
    }
    let stream = format!("forget-groups-{target}");
    for k in 0..cfg.forget_groups {
        let s = group_scene(seed, Split::Forget, &stream, k, roster.len(), cfg.sizes(), Some(target), None);
        let p = prompts.perturbed(name, vocab, &mut r)?;
        forget.push(example(s, roster, p, Task::Names)?);
    }
    let mut retain = Vec::new();
    for i in (0..roster.len()).filter(|&i| i != target) {
        for k in 0..cfg.retain_singles {
            let p = prompts.name_prompt(roster, vocab, &mut r)?;
            retain.push(example(single_scene(seed, Split::Retain, i, k), roster, p, Task::Names)?);
        }
    }
    let stream = format!("retain-groups-{target}");
    for k in 0..cfg.retain_groups {
        let s = group_scene(seed, Split::Retain, &stream, k, roster.len(), cfg.sizes(), None, Some(target));
        let p = prompts.name_prompt(roster, vocab, &mut r)?;
        retain.push(example(s, roster, p, Task::Names)?);
    }
    Ok(UnlearnData { target, forget, retain })
}

/// Held-out attribute task: fresh renders captioned by shape and hue.
pub fn generality_set(
    roster: &Roster,
    vocab: &Vocab,
    prompts: &Prompts,
    cfg: &DataConfig,
    seed: u64,
) -> Result<Vec<Example>> {
    let mut r = rng::stream(seed, &[rng::tag("generality-prompts")]);
    let mut scenes = Vec::new();
    for i in 0..roster.len() {
        for k in 0..cfg.generality_singles {
            scenes.push(single_scene(seed, Split::Generality, i, k));
        }
    }
    for k in 0..cfg.generality_groups {
        scenes.push(group_scene(seed, Split::Generality, "groups", k, roster.len(), cfg.sizes(), None, None));
    }
    scenes
        .into_iter()
        .map(|s| {
            let p = prompts.attribute_prompt(vocab, &mut r)?;
            example(s, roster, p, Task::Attributes)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vcubench::{default_query_templates, make_roster};

    fn setup() -> (Roster, Vocab, Prompts) {
        let roster = make_roster(8, 2, 0).unwrap();
        let prompts = Prompts::new(&default_query_templates(), crate::advgen::default_prompt_templates()).unwrap();
        let vocab = Vocab::for_roster(&roster.identities, prompts.texts()).unwrap();
        (roster, vocab, prompts)
    }

    #[test]
    fn caption_targets_follow_cells() {
        let (roster, vocab, _) = setup();
        let scene = SceneSpec {
            members: vec![
                crate::vcubench::Placement { identity: 3, cell: 2 },
                crate::vcubench::Placement { identity: 5, cell: 0 },
            ],
            seed: 0,
        };
        let geo = Geometry::default();
        let t = caption_targets(&scene, &roster, &vocab, Task::Names, &geo).unwrap();
        let s3 = &roster.identities[3].name;
        let s5 = &roster.identities[5].name;
        assert_eq!(vocab.decode(&t).unwrap(), [&s5[0], &s5[1], "<pad>", "<pad>", &s3[0], &s3[1], "<pad>", "<pad>"]);
        let a = caption_targets(&scene, &roster, &vocab, Task::Attributes, &geo).unwrap();
        assert_eq!(vocab.token(a[0]).unwrap(), roster.identities[5].appearance.shape_name());
        assert_eq!(vocab.token(a[1]).unwrap(), roster.identities[5].appearance.hue_name());
    }

    #[test]
    fn forget_and_retain_are_split_by_target() {
        let (roster, vocab, prompts) = setup();
        let cfg = DataConfig {
            forget_singles: 3,
            forget_groups: 5,
            retain_singles: 1,
            retain_groups: 5,
            ..Default::default()
        };
        let d = unlearn_data(&roster, &vocab, &prompts, &cfg, 2, 0).unwrap();
        assert_eq!(d.forget.len(), 8);
        assert_eq!(d.retain.len(), 7 + 5);
        let name: Vec<usize> = roster.identities[2].name.iter().map(|t| vocab.id(t).unwrap()).collect();
        for e in &d.forget {
            assert!(e.scene.contains(2));
            assert_eq!(&e.prompt[..2], &name[..]);
        }
        assert!(d.retain.iter().all(|e| !e.scene.contains(2)));
        assert!(matches!(unlearn_data(&roster, &vocab, &prompts, &cfg, 99, 0), Err(Error::Input(_))));
    }

    #[test]
    fn splits_use_distinct_renders() {
        let (roster, vocab, prompts) = setup();
        let cfg = DataConfig {
            pretrain_singles: 2,
            pretrain_groups: 4,
            generality_singles: 2,
            generality_groups: 4,
            ..Default::default()
        };
        let a = pretrain_set(&roster, &vocab, &prompts, &cfg, 0).unwrap();
        let b = generality_set(&roster, &vocab, &prompts, &cfg, 0).unwrap();
        for x in &a {
            assert!(b.iter().all(|y| y.scene.seed != x.scene.seed));
        }
        assert_eq!(a, pretrain_set(&roster, &vocab, &prompts, &cfg, 0).unwrap());
    }
}
