use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ppm;
use super::queries::{make_queries, QueryAnswer, QueryTemplate, ProbeKind, DEFAULT_QUERY_TEMPLATES};
use super::render::{render_scene, Image, Placement, SceneSpec};
use super::roster::Roster;
use super::scenes::{group_scene, single_scene, Split};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    #[serde(rename = "Target-Single")]
    TargetSingle,
    #[serde(rename = "Non-Target-Single")]
    NonTargetSingle,
    #[serde(rename = "Target-Group")]
    TargetGroup,
    #[serde(rename = "Non-Target-Group")]
    NonTargetGroup,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::TargetSingle,
        Category::NonTargetSingle,
        Category::TargetGroup,
        Category::NonTargetGroup,
    ];

    pub fn has_target(self) -> bool {
        matches!(self, Category::TargetSingle | Category::TargetGroup)
    }

    pub fn is_group(self) -> bool {
        matches!(self, Category::TargetGroup | Category::NonTargetGroup)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::TargetSingle => "Target-Single",
            Category::NonTargetSingle => "Non-Target-Single",
            Category::TargetGroup => "Target-Group",
            Category::NonTargetGroup => "Non-Target-Group",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One benchmark item: an image seen from the point of view of one target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub image: String,
    pub target: String,
    pub category: Category,
    pub members: Vec<Placement>,
    pub queries: Vec<QueryAnswer>,
}

impl Sample {
    pub fn contains(&self, identity: usize) -> bool {
        self.members.iter().any(|m| m.identity == identity)
    }

    /// The probe whose answer the recognition decision is read from.
    pub fn decision_query(&self) -> &QueryAnswer {
        self.queries
            .iter()
            .find(|q| q.kind == ProbeKind::Concept)
            .unwrap_or(&self.queries[0])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub seed: u64,
    /// Identity ids to build target blocks for; empty means every identity.
    pub targets: Vec<String>,
    pub singles_per_identity: usize,
    pub target_groups: usize,
    pub non_target_groups: usize,
    pub min_group_size: usize,
    pub max_group_size: usize,
    pub queries_per_image: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            targets: Vec::new(),
            singles_per_identity: 30,
            target_groups: 50,
            non_target_groups: 50,
            min_group_size: 2,
            max_group_size: 4,
            queries_per_image: 20,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        let mins = [
            ("singles-per-identity", self.singles_per_identity, 30),
            ("target-groups", self.target_groups, 50),
            ("non-target-groups", self.non_target_groups, 50),
            ("queries-per-image", self.queries_per_image, 1),
        ];
        for (name, v, min) in mins {
            if v < min {
                return Err(Error::Config(format!("{name} = {v} is below the minimum {min}")));
            }
        }
        if self.min_group_size < 2 || self.max_group_size > 4 || self.min_group_size > self.max_group_size {
            return Err(Error::Config(format!(
                "group sizes must satisfy 2 <= min <= max <= 4, got {}..{}",
                self.min_group_size, self.max_group_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub images: usize,
    pub samples: usize,
    pub queries_per_image: usize,
    pub triples: usize,
    pub identities: Vec<String>,
    /// target -> category -> count
    pub counts: BTreeMap<String, BTreeMap<Category, usize>>,
}

#[derive(Clone, Debug)]
pub struct Benchmark {
    pub roster: Roster,
    pub config: BenchmarkConfig,
    pub samples: Vec<Sample>,
    images: BTreeMap<String, Image>,
    query_templates: String,
}

impl Benchmark {
    pub fn image(&self, name: &str) -> Result<&Image> {
        self.images
            .get(name)
            .ok_or_else(|| Error::Input(format!("image '{name}' missing from benchmark")))
    }

    pub fn image_count(&self) -> usize {
        self.images.len()
    }

    pub fn for_target<'a>(&'a self, target: &'a str) -> impl Iterator<Item = &'a Sample> + 'a {
        self.samples.iter().filter(move |s| s.target == target)
    }

    pub fn category<'a>(&'a self, target: &'a str, c: Category) -> impl Iterator<Item = &'a Sample> + 'a {
        self.for_target(target).filter(move |s| s.category == c)
    }

    pub fn targets(&self) -> Vec<String> {
        let mut t: Vec<String> = self.samples.iter().map(|s| s.target.clone()).collect();
        t.dedup();
        t.sort();
        t.dedup();
        t
    }

    pub fn summary(&self) -> Summary {
        let mut counts: BTreeMap<String, BTreeMap<Category, usize>> = BTreeMap::new();
        for s in &self.samples {
            *counts
                .entry(s.target.clone())
                .or_default()
                .entry(s.category)
                .or_default() += 1;
        }
        Summary {
            images: self.images.len(),
            samples: self.samples.len(),
            queries_per_image: self.config.queries_per_image,
            triples: self.images.len() * self.config.queries_per_image,
            identities: self.roster.identities.iter().map(|s| s.display_name()).collect(),
            counts,
        }
    }

    /// Keeps only the samples accepted by `keep`.
    pub fn retain(&mut self, keep: impl Fn(&Sample) -> bool) {
        self.samples.retain(|s| keep(s));
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let img_dir = dir.join("images");
        fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        for (name, img) in &self.images {
            ppm::write(&img_dir.join(name), img)?;
        }
        let manifest = dir.join("manifest.jsonl");
        let mut buf = Vec::new();
        for s in &self.samples {
            serde_json::to_writer(&mut buf, s).expect("sample serializes");
            buf.push(b'\n');
        }
        fs::write(&manifest, buf).map_err(|e| Error::io(&manifest, e))?;
        write_json(&dir.join("roster.json"), &self.roster)?;
        write_json(&dir.join("summary.json"), &self.summary())?;
        let cfg = dir.join("benchmark.toml");
        let text = toml::to_string(&self.config).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(&cfg, text).map_err(|e| Error::io(&cfg, e))?;
        let tpl = dir.join("templates.txt");
        fs::write(&tpl, &self.query_templates).map_err(|e| Error::io(&tpl, e))?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let roster: Roster = read_json(&dir.join("roster.json"))?;
        let cfg_path = dir.join("benchmark.toml");
        let cfg_text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let config: BenchmarkConfig =
            toml::from_str(&cfg_text).map_err(|e| Error::format(&cfg_path, e.to_string()))?;
        let manifest = dir.join("manifest.jsonl");
        let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let mut samples = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let s: Sample = serde_json::from_str(line)
                .map_err(|e| Error::format(&manifest, format!("line {}: {e}", n + 1)))?;
            samples.push(s);
        }
        let mut images = BTreeMap::new();
        for s in &samples {
            if !images.contains_key(&s.image) {
                images.insert(s.image.clone(), ppm::read(&dir.join("images").join(&s.image))?);
            }
        }
        let tpl = dir.join("templates.txt");
        let query_templates = fs::read_to_string(&tpl).map_err(|e| Error::io(&tpl, e))?;
        Ok(Self {
            roster,
            config,
            samples,
            images,
            query_templates,
        })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(&mut f, value).expect("value serializes");
    f.write_all(b"\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Renders every target block: singles shared across blocks, group scenes
/// drawn per target.
pub fn build_benchmark(roster: &Roster, config: &BenchmarkConfig, templates: &[QueryTemplate], templates_text: Option<&str>) -> Result<Benchmark> {
    config.validate()?;
    if roster.len() < 2 {
        return Err(Error::Config("benchmark needs at least 2 identities".into()));
    }
    let targets: Vec<usize> = if config.targets.is_empty() {
        (0..roster.len()).collect()
    } else {
        config
            .targets
            .iter()
            .map(|t| roster.index_of(t).map_err(|_| Error::Config(format!("unknown target '{t}'"))))
            .collect::<Result<_>>()?
    };
    let ids = &roster.identities;
    let mut images = BTreeMap::new();
    let mut image_queries: BTreeMap<String, Vec<QueryAnswer>> = BTreeMap::new();
    let mut add = |name: &str, scene: &SceneSpec| -> Result<Vec<QueryAnswer>> {
        if !images.contains_key(name) {
            images.insert(name.to_string(), render_scene(scene, ids)?);
            let mut r = rng::stream(scene.seed, &[rng::tag("queries")]);
            let qs = make_queries(scene, ids, templates, config.queries_per_image, &mut r)?;
            image_queries.insert(name.to_string(), qs);
        }
        Ok(image_queries[name].clone())
    };

    let mut singles: Vec<Vec<(String, SceneSpec, Vec<QueryAnswer>)>> = Vec::new();
    for (i, spec) in ids.iter().enumerate() {
        let mut v = Vec::new();
        for k in 0..config.singles_per_identity {
            let scene = single_scene(config.seed, Split::Eval, i, k);
            let name = format!("single_{}_{k:03}.ppm", spec.id);
            let qs = add(&name, &scene)?;
            v.push((name, scene, qs));
        }
        singles.push(v);
    }

    let mut samples = Vec::new();
    let sizes = (config.min_group_size, config.max_group_size);
    for &t in &targets {
        let tid = &ids[t].id;
        let mut push = |category: Category, k: usize, name: &str, scene: &SceneSpec, queries: &[QueryAnswer]| {
            samples.push(Sample {
                id: format!("{tid}/{}/{k:03}", category.as_str()),
                image: name.to_string(),
                target: tid.clone(),
                category,
                members: scene.members.clone(),
                queries: queries.to_vec(),
            });
        };
        for (k, (name, scene, qs)) in singles[t].iter().enumerate() {
            push(Category::TargetSingle, k, name, scene, qs);
        }
        let mut k = 0;
        for (i, block) in singles.iter().enumerate() {
            if i == t {
                continue;
            }
            for (name, scene, qs) in block {
                push(Category::NonTargetSingle, k, name, scene, qs);
                k += 1;
            }
        }
        for k in 0..config.target_groups {
            let scene = group_scene(config.seed, Split::Eval, &format!("with-{tid}"), k, ids.len(), sizes, Some(t), None);
            let name = format!("group_{tid}_with_{k:03}.ppm");
            let qs = add(&name, &scene)?;
            push(Category::TargetGroup, k, &name, &scene, &qs);
        }
        for k in 0..config.non_target_groups {
            let scene = group_scene(config.seed, Split::Eval, &format!("without-{tid}"), k, ids.len(), sizes, None, Some(t));
            let name = format!("group_{tid}_without_{k:03}.ppm");
            let qs = add(&name, &scene)?;
            push(Category::NonTargetGroup, k, &name, &scene, &qs);
        }
    }
    Ok(Benchmark {
        roster: roster.clone(),
        config: config.clone(),
        samples,
        images,
        query_templates: templates_text.unwrap_or(DEFAULT_QUERY_TEMPLATES).to_string(),
    })
}
