//! Scene sampling for every data split. Splits draw from disjoint seed
//! streams, so e.g. the evaluation benchmark never shares a render with the
//! data a model was trained or unlearned on.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::render::{Placement, SceneSpec, CELLS};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Pretrain,
    Forget,
    Retain,
    Generality,
    Eval,
}

impl Split {
    fn tag(self) -> u64 {
        rng::tag(match self {
            Split::Pretrain => "pretrain",
            Split::Forget => "forget",
            Split::Retain => "retain",
            Split::Generality => "generality",
            Split::Eval => "eval",
        })
    }
}

pub fn single_scene(seed: u64, split: Split, identity: usize, k: usize) -> SceneSpec {
    let s = rng::derive(seed, &[split.tag(), rng::tag("single"), identity as u64, k as u64]);
    SceneSpec::single(identity, s)
}

/// Group of `min_size..=max_size` distinct identities in distinct cells.
/// `include` is forced in; `exclude` is kept out.
pub fn group_scene(
    seed: u64,
    split: Split,
    stream: &str,
    k: usize,
    n_identities: usize,
    (min_size, max_size): (usize, usize),
    include: Option<usize>,
    exclude: Option<usize>,
) -> SceneSpec {
    let s = rng::derive(seed, &[split.tag(), rng::tag(stream), k as u64]);
    let mut r = rng::stream(s, &[rng::tag("members")]);
    let mut pool: Vec<usize> = (0..n_identities)
        .filter(|i| Some(*i) != include && Some(*i) != exclude)
        .collect();
    pool.shuffle(&mut r);
    let cap = (pool.len() + include.is_some() as usize).min(CELLS);
    let size = r.gen_range(min_size..=max_size).clamp(1, cap.max(1));
    let mut ids: Vec<usize> = include.into_iter().collect();
    ids.extend(pool.into_iter().take(size - ids.len()));
    let mut cells: Vec<usize> = (0..CELLS).collect();
    cells.shuffle(&mut r);
    SceneSpec {
        members: ids
            .into_iter()
            .zip(cells)
            .map(|(identity, cell)| Placement { identity, cell })
            .collect(),
        seed: s,
    }
}
