//! VQA-style probes attached to every benchmark image.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::render::{SceneSpec, GRID};
use super::roster::IdentitySpec;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    Presence,
    Concept,
    Spatial,
    Commonsense,
}

impl ProbeKind {
    pub const ALL: [ProbeKind; 4] = [
        ProbeKind::Presence,
        ProbeKind::Concept,
        ProbeKind::Spatial,
        ProbeKind::Commonsense,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProbeKind::Presence => "presence",
            ProbeKind::Concept => "concept",
            ProbeKind::Spatial => "spatial",
            ProbeKind::Commonsense => "commonsense",
        }
    }
}

impl fmt::Display for ProbeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProbeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ProbeKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown probe kind '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryTemplate {
    pub kind: ProbeKind,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryAnswer {
    pub kind: ProbeKind,
    pub query: String,
    pub answer: String,
}

pub const DEFAULT_QUERY_TEMPLATES: &str = "\
presence: is {name} in the picture ?
presence: can you see {name} here ?
presence: does this photo show {name} ?
concept: who is in the picture ?
concept: who are the people in this photo ?
concept: name everyone you can see .
spatial: who is on the {side} ?
spatial: who is at the {row} of the picture ?
spatial: who stands in the {corner} corner ?
commonsense: how many people are in the picture ?
commonsense: is this a group photo ?
commonsense: what is {name} doing here ?
";

/// Parses `kind: template` lines; blank lines and `#` comments are skipped.
pub fn parse_query_templates(text: &str) -> Result<Vec<QueryTemplate>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (kind, body) = line
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("template line {}: missing 'kind:'", n + 1)))?;
        out.push(QueryTemplate {
            kind: kind.trim().parse()?,
            text: body.trim().to_string(),
        });
    }
    Ok(out)
}

pub fn load_query_templates(path: &Path) -> Result<Vec<QueryTemplate>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_query_templates(&text)
}

pub fn default_query_templates() -> Vec<QueryTemplate> {
    parse_query_templates(DEFAULT_QUERY_TEMPLATES).expect("built-in templates parse")
}

/// Every word the templates can produce, placeholders expanded.
pub fn template_words(templates: &[QueryTemplate]) -> Vec<String> {
    let mut words = Vec::new();
    for t in templates {
        for w in t.text.split_whitespace() {
            match w {
                "{name}" => {}
                "{side}" => words.extend(["left", "right"].map(String::from)),
                "{row}" => words.extend(["top", "bottom"].map(String::from)),
                "{corner}" => words.extend(["top", "bottom", "left", "right"].map(String::from)),
                w => words.push(w.to_string()),
            }
        }
    }
    words
}

const NUMBER_WORDS: [&str; 5] = ["zero", "one", "two", "three", "four"];

fn names_in(scene: &SceneSpec, roster: &[IdentitySpec], cells: impl Fn(usize) -> bool) -> String {
    let mut ms: Vec<_> = scene.members.iter().filter(|m| cells(m.cell)).collect();
    ms.sort_by_key(|m| m.cell);
    if ms.is_empty() {
        return "nobody".into();
    }
    ms.iter()
        .map(|m| roster[m.identity].display_name())
        .collect::<Vec<_>>()
        .join(" and ")
}

fn instantiate(
    t: &QueryTemplate,
    scene: &SceneSpec,
    roster: &[IdentitySpec],
    rng: &mut impl Rng,
) -> QueryAnswer {
    let mut text = t.text.clone();
    let mut answer = String::new();
    let asked = if rng.gen_bool(0.5) || scene.members.len() == roster.len() {
        scene.members.choose(rng).map(|m| m.identity).unwrap_or(0)
    } else {
        let absent: Vec<usize> = (0..roster.len()).filter(|i| !scene.contains(*i)).collect();
        *absent.choose(rng).unwrap_or(&0)
    };
    let present = scene.contains(asked);
    if text.contains("{name}") {
        text = text.replace("{name}", &roster[asked].display_name());
    }
    if text.contains("{side}") {
        let col = rng.gen_range(0..GRID);
        text = text.replace("{side}", ["left", "right"][col]);
        answer = names_in(scene, roster, |c| c % GRID == col);
    }
    if text.contains("{row}") {
        let row = rng.gen_range(0..GRID);
        text = text.replace("{row}", ["top", "bottom"][row]);
        answer = names_in(scene, roster, |c| c / GRID == row);
    }
    if text.contains("{corner}") {
        let cell = rng.gen_range(0..GRID * GRID);
        let label = format!("{} {}", ["top", "bottom"][cell / GRID], ["left", "right"][cell % GRID]);
        text = text.replace("{corner}", &label);
        answer = names_in(scene, roster, |c| c == cell);
    }
    if answer.is_empty() {
        answer = match t.kind {
            ProbeKind::Presence => if present { "yes" } else { "no" }.to_string(),
            ProbeKind::Concept | ProbeKind::Spatial => names_in(scene, roster, |_| true),
            ProbeKind::Commonsense => {
                if t.text.contains("how many") {
                    NUMBER_WORDS[scene.members.len()].to_string()
                } else if t.text.contains("group") {
                    if scene.members.len() > 1 { "yes" } else { "no" }.to_string()
                } else if present {
                    "posing for the photo".to_string()
                } else {
                    format!("{} is not in the picture", roster[asked].display_name())
                }
            }
        };
    }
    QueryAnswer {
        kind: t.kind,
        query: text,
        answer,
    }
}

/// `count` probes cycling through the four kinds, answers derived from the
/// scene.
pub fn make_queries(
    scene: &SceneSpec,
    roster: &[IdentitySpec],
    templates: &[QueryTemplate],
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<QueryAnswer>> {
    if count == 0 {
        return Err(Error::Config("queries per image must be at least 1".into()));
    }
    let by_kind: Vec<Vec<&QueryTemplate>> = ProbeKind::ALL
        .iter()
        .map(|k| templates.iter().filter(|t| t.kind == *k).collect())
        .collect();
    if let Some(i) = by_kind.iter().position(Vec::is_empty) {
        return Err(Error::Config(format!(
            "no '{}' query template",
            ProbeKind::ALL[i]
        )));
    }
    // concept probe first: it is the query used for recognition decisions
    let order = [1usize, 0, 2, 3];
    Ok((0..count)
        .map(|i| {
            let pool = &by_kind[order[i % 4]];
            let t = pool[rng.gen_range(0..pool.len())];
            instantiate(t, scene, roster, rng)
        })
        .collect())
}
