use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const HUES: usize = 8;
pub const SHAPES: usize = 6;
pub const STRIPE_COUNTS: usize = 5;
pub const ACCENTS: usize = 6;

pub const HUE_NAMES: [&str; HUES] = [
    "red", "orange", "yellow", "green", "teal", "blue", "purple", "pink",
];
pub const SHAPE_NAMES: [&str; SHAPES] = ["circle", "square", "triangle", "diamond", "cross", "ring"];

const FIRST: [&str; 16] = [
    "avo", "bex", "cyr", "dov", "elo", "fen", "gus", "hal", "ira", "jun", "kai", "lev", "mio",
    "nox", "oda", "pim",
];
const LAST: [&str; 16] = [
    "arden", "brook", "crane", "dale", "ellis", "frost", "grove", "hale", "ives", "jett", "knox",
    "lark", "moss", "north", "oakes", "pryce",
];

/// Visual parameters of one synthetic identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Appearance {
    pub hue: u8,
    pub shape: u8,
    pub stripes: u8,
    pub accent: u8,
}

impl Appearance {
    fn as_array(&self) -> [u8; 4] {
        [self.hue, self.shape, self.stripes, self.accent]
    }

    /// Number of differing parameters.
    pub fn distance(&self, other: &Appearance) -> usize {
        self.as_array()
            .iter()
            .zip(other.as_array())
            .filter(|(a, b)| **a != *b)
            .count()
    }

    fn random(rng: &mut impl Rng) -> Self {
        Self {
            hue: rng.gen_range(0..HUES as u8),
            shape: rng.gen_range(0..SHAPES as u8),
            stripes: rng.gen_range(0..STRIPE_COUNTS as u8),
            accent: rng.gen_range(0..ACCENTS as u8),
        }
    }

    pub fn shape_name(&self) -> &'static str {
        SHAPE_NAMES[self.shape as usize]
    }

    pub fn hue_name(&self) -> &'static str {
        HUE_NAMES[self.hue as usize]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentitySpec {
    pub id: String,
    /// Two name tokens.
    pub name: [String; 2],
    pub appearance: Appearance,
    /// Identities sharing a group id form a designated similar pair.
    pub similarity_group: usize,
}

impl IdentitySpec {
    pub fn display_name(&self) -> String {
        format!("{} {}", self.name[0], self.name[1])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Roster {
    pub identities: Vec<IdentitySpec>,
    pub seed: u64,
}

impl Roster {
    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.identities
            .iter()
            .position(|s| s.id == id)
            .ok_or_else(|| Error::Input(format!("unknown identity '{id}'")))
    }

    pub fn get(&self, id: &str) -> Result<&IdentitySpec> {
        self.index_of(id).map(|i| &self.identities[i])
    }

    pub fn are_similar(&self, a: usize, b: usize) -> bool {
        a != b && self.identities[a].similarity_group == self.identities[b].similarity_group
    }

    /// Ordered (a, b) index pairs, a != b, split into designated-similar and
    /// the rest.
    pub fn pair_classes(&self) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
        let mut similar = Vec::new();
        let mut dissimilar = Vec::new();
        for a in 0..self.len() {
            for b in 0..self.len() {
                if a == b {
                    continue;
                }
                if self.are_similar(a, b) {
                    similar.push((a, b));
                } else {
                    dissimilar.push((a, b));
                }
            }
        }
        (similar, dissimilar)
    }
}

fn name_tokens(i: usize) -> [String; 2] {
    let (f, l) = (FIRST[i % FIRST.len()], LAST[(i + i / LAST.len()) % LAST.len()]);
    if i < FIRST.len() {
        [f.to_string(), l.to_string()]
    } else {
        [format!("{f}{}", i / FIRST.len()), format!("{l}{}", i / LAST.len())]
    }
}

const MIN_DISSIMILAR: usize = 3;

/// Builds `n` identities. Identities `2k` and `2k+1` (k < `n_similar_pairs`)
/// differ in exactly one of the subtle parameters (stripes or accent); every
/// other pair differs in at least three parameters.
pub fn make_roster(n: usize, n_similar_pairs: usize, seed: u64) -> Result<Roster> {
    if n < 2 {
        return Err(Error::Config(format!("roster needs at least 2 identities, got {n}")));
    }
    if n_similar_pairs > n / 2 {
        return Err(Error::Config(format!(
            "{n_similar_pairs} similar pairs do not fit in {n} identities"
        )));
    }
    if n > 64 {
        return Err(Error::Config(format!("roster of {n} identities is too large")));
    }
    for attempt in 0..1000u64 {
        let mut r = rng::stream(seed, &[rng::tag("roster"), attempt]);
        if let Some(apps) = try_place(n, n_similar_pairs, &mut r) {
            let identities = apps
                .into_iter()
                .enumerate()
                .map(|(i, appearance)| IdentitySpec {
                    id: format!("id_{i}"),
                    name: name_tokens(i),
                    appearance,
                    similarity_group: if i < 2 * n_similar_pairs { i / 2 } else { i - n_similar_pairs },
                })
                .collect();
            return Ok(Roster { identities, seed });
        }
    }
    Err(Error::Config(format!(
        "could not place {n} identities with {n_similar_pairs} similar pairs"
    )))
}

fn try_place(n: usize, pairs: usize, r: &mut impl Rng) -> Option<Vec<Appearance>> {
    let mut placed: Vec<Appearance> = Vec::with_capacity(n);
    for i in 0..n {
        let partner = if i < 2 * pairs && i % 2 == 1 { Some(placed[i - 1]) } else { None };
        let mut found = None;
        for _ in 0..500 {
            let cand = match partner {
                Some(p) => {
                    let mut c = p;
                    if r.gen_bool(0.5) {
                        // one stripe more or fewer
                        let max = STRIPE_COUNTS as u8 - 1;
                        c.stripes = match c.stripes {
                            0 => 1,
                            s if s == max => s - 1,
                            s if r.gen_bool(0.5) => s + 1,
                            s => s - 1,
                        };
                    } else {
                        c.accent = (c.accent + r.gen_range(1..ACCENTS as u8)) % ACCENTS as u8;
                    }
                    c
                }
                None => Appearance::random(r),
            };
            let ok = placed.iter().enumerate().all(|(j, other)| {
                if partner.is_some() && j == i - 1 {
                    cand.distance(other) == 1
                } else {
                    cand.distance(other) >= MIN_DISSIMILAR
                }
            });
            if ok {
                found = Some(cand);
                break;
            }
        }
        placed.push(found?);
    }
    Some(placed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roster_is_deterministic() {
        assert_eq!(make_roster(8, 2, 42).unwrap(), make_roster(8, 2, 42).unwrap());
        assert_ne!(make_roster(8, 2, 42).unwrap(), make_roster(8, 2, 43).unwrap());
    }

    #[test]
    fn similar_pairs_differ_in_one_parameter_others_in_three() {
        for seed in 0..20 {
            let r = make_roster(8, 3, seed).unwrap();
            for a in 0..8 {
                for b in a + 1..8 {
                    let d = r.identities[a].appearance.distance(&r.identities[b].appearance);
                    if r.are_similar(a, b) {
                        assert_eq!(d, 1, "seed {seed} pair {a},{b}");
                    } else {
                        assert!(d >= 3, "seed {seed} pair {a},{b} distance {d}");
                    }
                }
            }
        }
    }

    #[test]
    fn names_are_unique_tokens() {
        let r = make_roster(12, 4, 1).unwrap();
        let mut toks: Vec<&String> = r.identities.iter().flat_map(|s| s.name.iter()).collect();
        let n = toks.len();
        toks.sort();
        toks.dedup();
        assert_eq!(toks.len(), n);
    }

    #[test]
    fn config_errors() {
        assert!(matches!(make_roster(1, 0, 0), Err(Error::Config(_))));
        assert!(matches!(make_roster(4, 3, 0), Err(Error::Config(_))));
        assert!(make_roster(4, 2, 0).is_ok());
    }

    #[test]
    fn pair_classes_partition_ordered_pairs() {
        let r = make_roster(8, 2, 3).unwrap();
        let (s, d) = r.pair_classes();
        assert_eq!(s.len(), 4);
        assert_eq!(s.len() + d.len(), 56);
    }
}
