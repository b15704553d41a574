//! Evaluation: per-sample recognition decisions and the rates built from
//! them, harmonic-mean balance score, held-out attribute accuracy, masked
//! perplexity, caption BLEU and the collateral forgetting matrix.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::data::{caption_targets, Example, Task};
use crate::error::{Error, Result};
use crate::model::{caption_from, concept_logit, recognized, ConceptVocab, ModelOutput, ModelState};
use crate::vcubench::{Benchmark, Category, Roster, Sample, SceneSpec};

/// Recognition decision for one identity in one benchmark sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub sample: String,
    pub target: String,
    pub category: Category,
    pub identity: String,
    pub is_target: bool,
    pub logit: f64,
    pub recognized: bool,
}

/// Numerators and denominators of every rate metric.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    /// Target appearances in target-group images.
    pub n_ct: usize,
    /// ... of which the target was not recognized.
    pub n_non_ct: usize,
    /// Non-target appearances in group images.
    pub n_nt: usize,
    /// ... of which the identity was recognized.
    pub n_correct_nt: usize,
    /// Target single images.
    pub n_total: usize,
    /// ... in which the target was not recognized.
    pub n_forgotten: usize,
}

impl EvalCounts {
    pub fn from_decisions<'a>(ds: impl IntoIterator<Item = &'a Decision>) -> Self {
        let mut c = Self::default();
        for d in ds {
            match (d.category, d.is_target) {
                (Category::TargetGroup, true) => {
                    c.n_ct += 1;
                    c.n_non_ct += !d.recognized as usize;
                }
                (Category::TargetGroup | Category::NonTargetGroup, false) => {
                    c.n_nt += 1;
                    c.n_correct_nt += d.recognized as usize;
                }
                (Category::TargetSingle, true) => {
                    c.n_total += 1;
                    c.n_forgotten += !d.recognized as usize;
                }
                _ => {}
            }
        }
        c
    }

    pub fn tfa(&self) -> Result<f64> {
        percent(self.n_non_ct, self.n_ct, "target-group")
    }

    pub fn ntra(&self) -> Result<f64> {
        percent(self.n_correct_nt, self.n_nt, "non-target")
    }

    /// Fraction in [0, 1].
    pub fn efficacy(&self) -> Result<f64> {
        Ok(percent(self.n_forgotten, self.n_total, "target-single")? / 100.0)
    }
}

fn percent(num: usize, den: usize, what: &str) -> Result<f64> {
    if den == 0 {
        return Err(Error::Contract(format!("no {what} samples to evaluate")));
    }
    Ok(100.0 * num as f64 / den as f64)
}

/// Harmonic mean of target forgetting and non-target retention; zero when
/// both are zero.
pub fn grf_f1(tfa: f64, ntra: f64) -> f64 {
    if tfa + ntra == 0.0 {
        0.0
    } else {
        2.0 * tfa * ntra / (tfa + ntra)
    }
}

/// Share of outputs in which `concept` is not recognized.
pub fn forgetting_rate(outputs: &[ModelOutput], concept: &ConceptVocab) -> Result<f64> {
    if outputs.is_empty() {
        return Err(Error::Contract("forgetting rate of an empty set".into()));
    }
    let mut missed = 0;
    for o in outputs {
        missed += !recognized(o, concept)? as usize;
    }
    Ok(missed as f64 / outputs.len() as f64)
}

/// Outputs of `state` on a set of examples, in order.
pub fn outputs_of(state: &ModelState, examples: &[Example]) -> Result<Vec<ModelOutput>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(32) {
        let imgs: Vec<_> = chunk.iter().map(|e| &e.image).collect();
        let prompts: Vec<_> = chunk.iter().map(|e| e.prompt.clone()).collect();
        out.extend(state.forward_many(&imgs, &prompts)?);
    }
    Ok(out)
}

fn scene_of(sample: &Sample) -> SceneSpec {
    SceneSpec {
        members: sample.members.clone(),
        seed: 0,
    }
}

/// Outputs for every sample of `target`'s block, asked with each sample's
/// concept query.
pub fn benchmark_outputs<'a>(state: &ModelState, bench: &'a Benchmark, target: &str) -> Result<Vec<(&'a Sample, ModelOutput)>> {
    let samples: Vec<&Sample> = bench.samples.iter().filter(|s| s.target == target).collect();
    if samples.is_empty() {
        return Err(Error::Input(format!("benchmark has no samples for target '{target}'")));
    }
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(32) {
        let imgs = chunk.iter().map(|s| bench.image(&s.image)).collect::<Result<Vec<_>>>()?;
        let prompts = chunk
            .iter()
            .map(|s| state.vocab.encode(&s.decision_query().query))
            .collect::<Result<Vec<_>>>()?;
        for (s, o) in chunk.iter().zip(state.forward_many(&imgs, &prompts)?) {
            out.push((*s, o));
        }
    }
    Ok(out)
}

/// One decision per member of every sample in `outputs`.
pub fn decisions(outputs: &[(&Sample, ModelOutput)], roster: &Roster, concepts: &[ConceptVocab]) -> Result<Vec<Decision>> {
    let mut out = Vec::new();
    for (s, o) in outputs {
        let t = roster.index_of(&s.target)?;
        for m in &s.members {
            let z = concept_logit(o, &concepts[m.identity])?;
            out.push(Decision {
                sample: s.id.clone(),
                target: s.target.clone(),
                category: s.category,
                identity: roster.identities[m.identity].id.clone(),
                is_target: m.identity == t,
                logit: z,
                recognized: z > 0.0,
            });
        }
    }
    Ok(out)
}

/// Teacher-forced perplexity of per-slot `reference` tokens. Padding slots
/// are skipped and tokens in `masked` count with probability `1/V`.
pub fn masked_perplexity(probabilities: &crate::grad::Tensor, reference: &[usize], masked: &HashSet<usize>, pad: usize) -> Result<f64> {
    let v = probabilities.shape()[1];
    if reference.len() != probabilities.shape()[0] {
        return Err(Error::Dimension(format!(
            "{} reference tokens for {} slots",
            reference.len(),
            probabilities.shape()[0]
        )));
    }
    let mut nll = 0.0;
    let mut t = 0;
    for (slot, &tok) in reference.iter().enumerate() {
        if tok == pad {
            continue;
        }
        let p = if masked.contains(&tok) {
            1.0 / v as f64
        } else {
            probabilities.at2(slot, tok)
        };
        nll -= p.max(1e-12).ln();
        t += 1;
    }
    if t == 0 {
        return Err(Error::Contract("perplexity of an empty caption".into()));
    }
    Ok((nll / t as f64).exp())
}

/// Sentence BLEU with uniform weights up to order `min(4, |reference|)`,
/// no smoothing, and the usual brevity penalty. Any order without a match
/// gives zero.
pub fn bleu<T: Eq + Hash + Clone>(candidate: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Contract("BLEU needs a non-empty reference".into()));
    }
    let order = reference.len().min(4);
    if candidate.len() < order {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=order {
        let mut counts: HashMap<&[T], usize> = HashMap::new();
        for g in reference.windows(n) {
            *counts.entry(g).or_default() += 1;
        }
        let mut matched = 0;
        let total = candidate.len() - n + 1;
        for g in candidate.windows(n) {
            if let Some(c) = counts.get_mut(g) {
                if *c > 0 {
                    *c -= 1;
                    matched += 1;
                }
            }
        }
        if matched == 0 {
            return Ok(0.0);
        }
        log_sum += (matched as f64 / total as f64).ln();
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    Ok(bp * (log_sum / order as f64).exp())
}

/// Reference caption: the non-padding per-slot targets.
pub fn reference_caption(scene: &SceneSpec, roster: &Roster, state: &ModelState, task: Task) -> Result<Vec<usize>> {
    let t = caption_targets(scene, roster, &state.vocab, task, &state.geometry)?;
    Ok(t.into_iter().filter(|&x| x != state.vocab.pad()).collect())
}

/// Recognition rate and mean caption BLEU of `concept` on its single
/// images.
pub fn recall_and_bleu(state: &ModelState, roster: &Roster, concept: usize, singles: &[Example]) -> Result<(f64, f64)> {
    let own: Vec<Example> = singles
        .iter()
        .filter(|e| e.scene.members.len() == 1 && e.scene.contains(concept))
        .cloned()
        .collect();
    if own.is_empty() {
        return Err(Error::Contract(format!("no single images of identity {concept}")));
    }
    let c = state.concept(&roster.identities[concept])?;
    let outs = outputs_of(state, &own)?;
    let mut hits = 0;
    let mut b = 0.0;
    for (e, o) in own.iter().zip(&outs) {
        hits += recognized(o, &c)? as usize;
        let reference = reference_caption(&e.scene, roster, state, Task::Names)?;
        b += bleu(&caption_from(o, state.vocab.pad()), &reference)?;
    }
    Ok((hits as f64 / own.len() as f64, b / own.len() as f64))
}

/// Fails when a held-out scene also appears in the training data.
pub fn check_disjoint(held_out: &[Example], training: &[Example]) -> Result<()> {
    let seen: HashSet<String> = training.iter().map(|e| format!("{:?}", e.scene)).collect();
    if let Some(e) = held_out.iter().find(|e| seen.contains(&format!("{:?}", e.scene))) {
        return Err(Error::Contract(format!("held-out scene {:?} overlaps the training data", e.scene)));
    }
    Ok(())
}

/// Held-out attribute accuracy: share of figures whose cell slots caption
/// exactly their shape and hue.
pub fn generality(state: &ModelState, roster: &Roster, held_out: &[Example]) -> Result<f64> {
    if held_out.is_empty() {
        return Err(Error::Contract("empty held-out set".into()));
    }
    let spc = state.geometry.slots_per_cell();
    let outs = outputs_of(state, held_out)?;
    let (mut total, mut correct) = (0, 0);
    for (e, o) in held_out.iter().zip(&outs) {
        let targets = caption_targets(&e.scene, roster, &state.vocab, Task::Attributes, &state.geometry)?;
        for m in &e.scene.members {
            total += 1;
            let ok = (m.cell * spc..(m.cell + 1) * spc).all(|s| {
                let row = o.logits.row(s);
                let arg = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
                arg == targets[s]
            });
            correct += ok as usize;
        }
    }
    Ok(correct as f64 / total as f64)
}

/// One row of the results table; rates in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub target: String,
    pub tfa: f64,
    pub ntra: f64,
    pub grf_f1: f64,
    pub efficacy: f64,
    pub generality: f64,
    pub perplexity: f64,
}

/// Decisions plus aggregate metrics for one model and target.
#[derive(Clone, Debug)]
pub struct TargetEvaluation {
    pub decisions: Vec<Decision>,
    pub counts: EvalCounts,
    pub report: MetricsReport,
}

pub fn evaluate_target(
    state: &ModelState,
    bench: &Benchmark,
    target: &str,
    held_out: &[Example],
    method: &str,
) -> Result<TargetEvaluation> {
    let roster = &bench.roster;
    let concepts = roster
        .identities
        .iter()
        .map(|s| state.concept(s))
        .collect::<Result<Vec<_>>>()?;
    let outputs = benchmark_outputs(state, bench, target)?;
    let ds = decisions(&outputs, roster, &concepts)?;
    let counts = EvalCounts::from_decisions(&ds);
    let masked: HashSet<usize> = concepts[roster.index_of(target)?].tokens.iter().copied().collect();
    let mut ppl = 0.0;
    for (s, o) in &outputs {
        let t = caption_targets(&scene_of(s), roster, &state.vocab, Task::Names, &state.geometry)?;
        ppl += masked_perplexity(&o.probabilities, &t, &masked, state.vocab.pad())?;
    }
    let (tfa, ntra) = (counts.tfa()?, counts.ntra()?);
    let report = MetricsReport {
        method: method.to_string(),
        target: target.to_string(),
        tfa,
        ntra,
        grf_f1: grf_f1(tfa, ntra),
        efficacy: 100.0 * counts.efficacy()?,
        generality: 100.0 * generality(state, roster, held_out)?,
        perplexity: ppl / outputs.len() as f64,
    };
    Ok(TargetEvaluation {
        decisions: ds,
        counts,
        report,
    })
}

pub const REPORT_COLUMNS: [&str; 8] = ["method", "target", "tfa", "ntra", "grf_f1", "efficacy", "generality", "perplexity"];

pub fn reports_csv(rows: &[MetricsReport]) -> String {
    let mut out = REPORT_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
            r.method, r.target, r.tfa, r.ntra, r.grf_f1, r.efficacy, r.generality, r.perplexity
        );
    }
    out
}

pub fn reports_markdown(rows: &[MetricsReport]) -> String {
    let mut out = String::from("| Method | Target | TFA | NTRA | GRF-F1 | Efficacy | Generality | Perplexity |\n");
    out.push_str("|---|---|---:|---:|---:|---:|---:|---:|\n");
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} |",
            r.method, r.target, r.tfa, r.ntra, r.grf_f1, r.efficacy, r.generality, r.perplexity
        );
    }
    out
}

pub fn decisions_csv(ds: &[Decision]) -> String {
    let mut out = String::from("sample,target,category,identity,is_target,logit,recognized\n");
    for d in ds {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:e},{}",
            d.sample, d.target, d.category, d.identity, d.is_target, d.logit, d.recognized
        );
    }
    out
}

/// Row `i`: model unlearned on identity `i`; column `j`: forgetting rate of
/// identity `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingMatrix {
    pub identities: Vec<String>,
    pub rates: Vec<Vec<f64>>,
    /// False for rows whose unlearning run failed; their rates are zero.
    pub valid: Vec<bool>,
    /// Single images per identity behind each rate.
    pub n: usize,
}

impl ForgettingMatrix {
    /// Forgetting rate of each identity on its own singles under `state`.
    pub fn row_for(state: &ModelState, roster: &Roster, singles: &[Vec<Example>]) -> Result<Vec<f64>> {
        roster
            .identities
            .iter()
            .zip(singles)
            .map(|(spec, set)| forgetting_rate(&outputs_of(state, set)?, &state.concept(spec)?))
            .collect()
    }

    /// Mean off-diagonal rate over designated-similar pairs and over
    /// dissimilar pairs, both directions, valid rows only.
    pub fn spillover(&self, roster: &Roster) -> (f64, f64) {
        let (sim, dis) = roster.pair_classes();
        let mean = |pairs: &[(usize, usize)]| {
            let vals: Vec<f64> = pairs
                .iter()
                .flat_map(|&(a, b)| [(a, b), (b, a)])
                .filter(|&(i, _)| self.valid[i])
                .map(|(i, j)| self.rates[i][j])
                .collect();
            if vals.is_empty() {
                0.0
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        };
        (mean(&sim), mean(&dis))
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("unlearned,{}\n", self.identities.join(","));
        for (i, row) in self.rates.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
            let _ = writeln!(out, "{},{}", self.identities[i], cells.join(","));
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!("| unlearned | {} |\n", self.identities.join(" | "));
        out.push_str(&format!("|---|{}\n", "---:|".repeat(self.identities.len())));
        for (i, row) in self.rates.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.2}")).collect();
            let flag = if self.valid[i] { "" } else { " (invalid)" };
            let _ = writeln!(out, "| {}{flag} | {} |", self.identities[i], cells.join(" | "));
        }
        out
    }
}

/// Runs `unlearn(i)` for every identity (up to `jobs` at a time) and
/// measures every identity's forgetting rate under each result. A failed
/// run marks its row invalid.
pub fn forgetting_matrix<F>(roster: &Roster, singles: &[Vec<Example>], jobs: usize, unlearn: F) -> Result<ForgettingMatrix>
where
    F: Fn(usize) -> Result<ModelState> + Sync,
{
    if singles.len() != roster.len() || singles.iter().any(Vec::is_empty) {
        return Err(Error::Contract("every identity needs at least one evaluation image".into()));
    }
    let rows = crate::parallel::map(roster.len(), jobs, |i| -> Result<Option<Vec<f64>>> {
        match unlearn(i) {
            Ok(state) => Ok(Some(ForgettingMatrix::row_for(&state, roster, singles)?)),
            Err(Error::Divergence { step, detail }) => {
                log::warn!("unlearning {} diverged at step {step}: {detail}", roster.identities[i].id);
                Ok(None)
            }
            Err(e) => Err(e),
        }
    });
    let mut rates = Vec::new();
    let mut valid = Vec::new();
    for r in rows {
        match r? {
            Some(row) => {
                rates.push(row);
                valid.push(true);
            }
            None => {
                rates.push(vec![0.0; roster.len()]);
                valid.push(false);
            }
        }
    }
    Ok(ForgettingMatrix {
        identities: roster.identities.iter().map(|s| s.id.clone()).collect(),
        rates,
        valid,
        n: singles[0].len(),
    })
}

/// Per-identity (recall, BLEU) keyed by identity id.
pub fn recall_bleu_table(state: &ModelState, roster: &Roster, singles: &[Example]) -> Result<BTreeMap<String, (f64, f64)>> {
    let mut out = BTreeMap::new();
    for (i, spec) in roster.identities.iter().enumerate() {
        out.insert(spec.id.clone(), recall_and_bleu(state, roster, i, singles)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::Tensor;
    use proptest::prelude::*;
    use rand::Rng;

    fn decision(category: Category, is_target: bool, recognized: bool) -> Decision {
        Decision {
            sample: "s".into(),
            target: "id_0".into(),
            category,
            identity: if is_target { "id_0" } else { "id_1" }.into(),
            is_target,
            logit: if recognized { 1.0 } else { -1.0 },
            recognized,
        }
    }

    #[test]
    fn grf_f1_reproduces_published_rows() {
        let rows = [
            (84.48, 30.17, 44.46),
            (49.14, 54.48, 51.67),
            (85.86, 26.55, 40.56),
            (92.35, 63.49, 75.25),
            (93.64, 83.17, 88.10),
        ];
        for (t, n, f) in rows {
            assert!((grf_f1(t, n) - f).abs() <= 0.01, "{t} {n}");
        }
        assert_eq!(grf_f1(0.0, 0.0), 0.0);
        assert!((grf_f1(42.0, 42.0) - 42.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn grf_f1_properties(t in 0.0f64..=100.0, n in 0.0f64..=100.0) {
            let f = grf_f1(t, n);
            prop_assert!((f - grf_f1(n, t)).abs() < 1e-9);
            prop_assert!(f <= 2.0 * t.min(n) + 1e-9);
            prop_assert!(f <= (t + n) / 2.0 + 1e-9);
            if (t - n).abs() > 1e-6 {
                prop_assert!(f < (t + n) / 2.0);
            }
        }
    }

    #[test]
    fn rates_at_the_extremes() {
        let all_forgotten: Vec<Decision> = [Category::TargetSingle, Category::TargetGroup]
            .into_iter()
            .map(|c| decision(c, true, false))
            .collect();
        let c = EvalCounts::from_decisions(&all_forgotten);
        assert_eq!(c.tfa().unwrap(), 100.0);
        assert_eq!(c.efficacy().unwrap(), 1.0);
        assert!(matches!(c.ntra(), Err(Error::Contract(_))));
        let kept = vec![decision(Category::TargetGroup, true, true), decision(Category::NonTargetGroup, false, true)];
        let c = EvalCounts::from_decisions(&kept);
        assert_eq!(c.tfa().unwrap(), 0.0);
        assert_eq!(c.ntra().unwrap(), 100.0);
        let none = vec![decision(Category::NonTargetGroup, false, false)];
        assert_eq!(EvalCounts::from_decisions(&none).ntra().unwrap(), 0.0);
    }

    #[test]
    fn counts_match_a_brute_force_recount() {
        let mut r = crate::rng::stream(0, &[]);
        let ds: Vec<Decision> = (0..500)
            .map(|_| {
                let c = Category::ALL[r.gen_range(0..4)];
                decision(c, r.gen_bool(0.5), r.gen_bool(0.4))
            })
            .collect();
        let c = EvalCounts::from_decisions(&ds);
        let count = |f: &dyn Fn(&Decision) -> bool| ds.iter().filter(|d| f(d)).count();
        let tg = |d: &Decision| d.category == Category::TargetGroup;
        let grp = |d: &Decision| matches!(d.category, Category::TargetGroup | Category::NonTargetGroup);
        let ts = |d: &Decision| d.category == Category::TargetSingle;
        assert_eq!(c.n_ct, count(&|d| tg(d) && d.is_target));
        assert_eq!(c.n_non_ct, count(&|d| tg(d) && d.is_target && !d.recognized));
        assert_eq!(c.n_nt, count(&|d| grp(d) && !d.is_target));
        assert_eq!(c.n_correct_nt, count(&|d| grp(d) && !d.is_target && d.recognized));
        assert_eq!(c.n_total, count(&|d| ts(d) && d.is_target));
        assert_eq!(c.n_forgotten, count(&|d| ts(d) && d.is_target && !d.recognized));
    }

    #[test]
    fn forgetting_rate_recount() {
        let c = ConceptVocab::new("c".into(), vec![0], 2).unwrap();
        let out = |z: f64| ModelOutput::from_logits(Tensor::new(vec![1, 2], vec![z, 0.0]).unwrap());
        assert_eq!(forgetting_rate(&[out(1.0), out(2.0)], &c).unwrap(), 0.0);
        assert_eq!(forgetting_rate(&[out(-1.0), out(0.0)], &c).unwrap(), 1.0);
        let mut r = crate::rng::stream(1, &[]);
        let zs: Vec<f64> = (0..30).map(|_| r.gen_range(-2.0..2.0)).collect();
        let outs: Vec<ModelOutput> = zs.iter().map(|&z| out(z)).collect();
        let missed = zs.iter().filter(|&&z| !(z > 0.0)).count();
        assert_eq!(forgetting_rate(&outs, &c).unwrap(), missed as f64 / 30.0);
        assert!(matches!(forgetting_rate(&[], &c), Err(Error::Contract(_))));
    }

    #[test]
    fn masked_perplexity_oracles() {
        let v = 7;
        let uniform = Tensor::full(&[3, v], 1.0 / v as f64);
        let none = HashSet::new();
        assert!((masked_perplexity(&uniform, &[2, 3, 4], &none, 0).unwrap() - v as f64).abs() < 1e-9);

        let mut r = crate::rng::stream(2, &[]);
        let rows: Vec<f64> = (0..3 * v).map(|_| r.gen_range(0.01..1.0)).collect();
        let all: HashSet<usize> = [2, 3, 4].into_iter().collect();
        let skewed = Tensor::new(vec![3, v], rows).unwrap();
        assert!((masked_perplexity(&skewed, &[2, 3, 4], &all, 0).unwrap() - v as f64).abs() < 1e-9);

        let mut p = Tensor::full(&[3, v], 0.0);
        p.data_mut()[2] = 0.5;
        p.data_mut()[v + 3] = 0.9;
        p.data_mut()[2 * v + 4] = 0.25;
        let masked: HashSet<usize> = [3].into_iter().collect();
        let expect = (-((0.5f64).ln() + (1.0 / v as f64).ln() + (0.25f64).ln()) / 3.0).exp();
        assert!((masked_perplexity(&p, &[2, 3, 4], &masked, 0).unwrap() - expect).abs() < 1e-9);

        // padding slots are skipped; an all-padding caption is an error
        assert!((masked_perplexity(&uniform, &[0, 3, 0], &none, 0).unwrap() - v as f64).abs() < 1e-9);
        assert!(masked_perplexity(&uniform, &[0, 0, 0], &none, 0).is_err());
        // zero probability is floored
        assert!(masked_perplexity(&Tensor::zeros(&[1, v]), &[2], &none, 0).unwrap().is_finite());
    }

    proptest! {
        #[test]
        fn masked_perplexity_is_at_least_one(vals in proptest::collection::vec(0.001f64..1.0, 12), toks in proptest::collection::vec(1usize..4, 3)) {
            let mut p = Tensor::new(vec![3, 4], vals).unwrap();
            for r in 0..3 {
                let s: f64 = p.row(r).iter().sum();
                for c in 0..4 {
                    p.data_mut()[r * 4 + c] /= s;
                }
            }
            prop_assert!(masked_perplexity(&p, &toks, &HashSet::new(), 0).unwrap() >= 1.0 - 1e-12);
        }
    }

    #[test]
    fn bleu_oracles() {
        let s = |t: &str| t.split(' ').map(String::from).collect::<Vec<_>>();
        assert_eq!(bleu(&s("the cat sat"), &s("the cat sat")).unwrap(), 1.0);
        assert_eq!(bleu(&s("a b c d e"), &s("a b c d e")).unwrap(), 1.0);
        assert_eq!(bleu(&s("dog ran off"), &s("the cat sat")).unwrap(), 0.0);
        // hand count: unigrams 3/4, bigrams 2/3, trigrams 1/2; c = 4 > r = 3
        let b = bleu(&s("the cat sat down"), &s("the cat sat")).unwrap();
        let expect = ((0.75f64).ln() + (2.0f64 / 3.0).ln() + (0.5f64).ln()) / 3.0;
        assert!((b - expect.exp()).abs() < 1e-12);
        // brevity penalty: candidate "the cat" vs reference "the cat" + 2 more
        let b = bleu(&s("the cat"), &s("the cat")).unwrap();
        assert_eq!(b, 1.0);
        let short = bleu(&s("x y"), &s("x y z")).unwrap();
        assert_eq!(short, 0.0);
        assert!(bleu::<String>(&[], &[]).is_err());
    }
}
