//! Anchor sampling for preservation: the concepts closest to the target in
//! embedding space, drawn with Gumbel noise and a tempered softmax.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::Tensor;
use crate::model::Vocab;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnchorMode {
    /// Gumbel-perturbed softmax, re-drawn every `resample_period` steps.
    Gumbel,
    /// The `m` highest raw cosine scores, never re-drawn.
    FixedCosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorConfig {
    pub tau: f64,
    pub m: usize,
    /// Candidate count; `None` uses every non-target identity.
    pub k: Option<usize>,
    pub resample_period: usize,
    pub mode: AnchorMode,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            m: 4,
            k: None,
            resample_period: 1,
            mode: AnchorMode::Gumbel,
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self, candidates: usize) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("anchor temperature {} must be positive", self.tau)));
        }
        if self.m == 0 {
            return Err(Error::Config("anchor count m must be at least 1".into()));
        }
        let k = self.k.unwrap_or(candidates).min(candidates);
        if self.m > k {
            return Err(Error::Config(format!("anchor count m = {} exceeds K = {k}", self.m)));
        }
        if self.resample_period == 0 {
            return Err(Error::Config("resample-period must be at least 1".into()));
        }
        Ok(())
    }
}

/// Selected preserve set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorSelection {
    /// Candidate positions, highest weight first.
    pub selected: Vec<usize>,
    /// Weights of `selected`, renormalised to sum to 1.
    pub weights: Vec<f64>,
    /// Full pre-selection distribution over candidates.
    pub distribution: Vec<f64>,
    pub seed: u64,
}

/// Mean of the embedding rows of a name's tokens.
pub fn mean_token_embedding(name: &[String], vocab: &Vocab, table: &Tensor) -> Result<Vec<f64>> {
    if name.is_empty() {
        return Err(Error::Vocab("empty name".into()));
    }
    let d = table.shape()[1];
    let mut out = vec![0.0; d];
    for t in name {
        let row = table.row(vocab.id(t)?);
        out.iter_mut().zip(row).for_each(|(o, r)| *o += r);
    }
    out.iter_mut().for_each(|o| *o /= name.len() as f64);
    Ok(out)
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Domain("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub fn similarity_scores(target: &[f64], candidates: &[Vec<f64>]) -> Result<Vec<f64>> {
    candidates.iter().map(|c| cosine(target, c)).collect()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn top_m(w: &[f64], m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..w.len()).collect();
    // stable: ties keep the lower index first
    idx.sort_by(|&a, &b| w[b].total_cmp(&w[a]));
    idx.truncate(m);
    idx
}

fn selection(distribution: Vec<f64>, m: usize, seed: u64) -> AnchorSelection {
    let selected = top_m(&distribution, m);
    let mass: f64 = selected.iter().map(|&i| distribution[i]).sum();
    let weights = if mass > 0.0 {
        selected.iter().map(|&i| distribution[i] / mass).collect()
    } else {
        vec![1.0 / m as f64; m]
    };
    AnchorSelection {
        selected,
        weights,
        distribution,
        seed,
    }
}

/// `w = softmax((s + g) / tau)` for given noise `g`; keeps the top `m`.
pub fn select_with_noise(s: &[f64], noise: &[f64], cfg: &AnchorConfig, seed: u64) -> Result<AnchorSelection> {
    cfg.validate(s.len())?;
    if noise.len() != s.len() {
        return Err(Error::Dimension(format!("{} scores, {} noise values", s.len(), noise.len())));
    }
    let z: Vec<f64> = s.iter().zip(noise).map(|(a, g)| (a + g) / cfg.tau).collect();
    Ok(selection(softmax(&z), cfg.m, seed))
}

/// Gumbel draw `g = -log(-log u)`, `u ~ U(0, 1)`.
pub fn gumbel(r: &mut impl Rng) -> f64 {
    let u: f64 = r.gen_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

pub fn select_anchors(s: &[f64], cfg: &AnchorConfig, r: &mut impl Rng) -> Result<AnchorSelection> {
    cfg.validate(s.len())?;
    let seed = r.gen();
    let noise: Vec<f64> = match cfg.mode {
        AnchorMode::Gumbel => {
            let mut nr = crate::rng::stream(seed, &[]);
            (0..s.len()).map(|_| gumbel(&mut nr)).collect()
        }
        AnchorMode::FixedCosine => vec![0.0; s.len()],
    };
    select_with_noise(s, &noise, cfg, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn cfg(tau: f64, m: usize) -> AnchorConfig {
        AnchorConfig {
            tau,
            m,
            ..Default::default()
        }
    }

    #[test]
    fn mean_embedding_examples() {
        let v = Vocab::new(["u", "w"]).unwrap();
        let e = Tensor::new(vec![4, 2], vec![0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 3.0, -4.0]).unwrap();
        assert_eq!(mean_token_embedding(&["u".into()], &v, &e).unwrap(), vec![1.0, 2.0]);
        assert_eq!(mean_token_embedding(&["u".into(), "w".into()], &v, &e).unwrap(), vec![2.0, -1.0]);
        assert!(matches!(mean_token_embedding(&["zz".into()], &v, &e), Err(Error::Vocab(_))));
    }

    #[test]
    fn cosine_examples() {
        let t = vec![1.0, 2.0, -0.5];
        let s = similarity_scores(&t, &[t.clone(), vec![-1.0, -2.0, 0.5], vec![2.0, -1.0, 0.0]]).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-12);
        assert!((s[1] + 1.0).abs() < 1e-12);
        assert!(s[2].abs() < 1e-12);
        assert!(matches!(similarity_scores(&t, &[vec![0.0; 3]]), Err(Error::Domain(_))));
    }

    #[test]
    fn temperature_limits() {
        let s = [0.1, 0.7, -0.3, 0.5];
        let cold = select_with_noise(&s, &[0.0; 4], &cfg(1e-3, 1), 0).unwrap();
        assert!(cold.distribution[1] > 0.999);
        assert_eq!(cold.selected, vec![1]);
        let hot = select_with_noise(&s, &[0.0; 4], &cfg(1e6, 2), 0).unwrap();
        assert!(hot.distribution.iter().all(|w| (w - 0.25).abs() < 1e-4));
        assert!(matches!(select_with_noise(&s, &[0.0; 4], &cfg(0.0, 1), 0), Err(Error::Config(_))));
        assert!(matches!(select_with_noise(&s, &[0.0; 4], &cfg(1.0, 5), 0), Err(Error::Config(_))));
    }

    #[test]
    fn selection_weights_are_normalised() {
        let mut r = rng::stream(3, &[]);
        for _ in 0..200 {
            let s: Vec<f64> = (0..7).map(|_| r.gen_range(-1.0..1.0)).collect();
            let a = select_anchors(&s, &cfg(0.5, 3), &mut r).unwrap();
            assert!((a.distribution.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(a.distribution.iter().all(|&w| w >= 0.0));
            assert!((a.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(a.weights.iter().all(|&w| w > 0.0 && w <= 1.0));
            assert_eq!(a.selected.len(), 3);
        }
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let s = [0.2, 0.1, 0.4, 0.3];
        let a = select_anchors(&s, &cfg(1.0, 2), &mut rng::stream(9, &[])).unwrap();
        let b = select_anchors(&s, &cfg(1.0, 2), &mut rng::stream(9, &[])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fixed_cosine_mode_ignores_noise() {
        let s = [0.2, 0.9, 0.4, 0.3];
        let c = AnchorConfig {
            mode: AnchorMode::FixedCosine,
            m: 2,
            ..Default::default()
        };
        let mut r = rng::stream(0, &[]);
        for _ in 0..20 {
            assert_eq!(select_anchors(&s, &c, &mut r).unwrap().selected, vec![1, 2]);
        }
    }

    #[test]
    fn equal_scores_are_selected_uniformly() {
        let mut r = rng::stream(11, &[]);
        let mut counts = [0usize; 4];
        let n = 100_000;
        for _ in 0..n {
            counts[select_anchors(&[0.3; 4], &cfg(1.0, 1), &mut r).unwrap().selected[0]] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.25).abs() < 0.01, "{counts:?}");
        }
    }

    #[test]
    fn selection_frequency_is_monotone_in_score() {
        let mut r = rng::stream(12, &[]);
        let s = [0.1, 0.4, 0.2, 0.8];
        let n = 20_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[select_anchors(&s, &cfg(0.5, 1), &mut r).unwrap().selected[0]] += 1;
        }
        let order = [0, 2, 1, 3];
        for w in order.windows(2) {
            let (lo, hi) = (counts[w[0]] as f64, counts[w[1]] as f64);
            let sigma = (lo + hi).sqrt();
            assert!(hi + 3.0 * sigma >= lo, "{counts:?}");
            assert!(hi > lo, "{counts:?}");
        }
    }
}
