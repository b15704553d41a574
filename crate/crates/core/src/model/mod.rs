//! Toy multimodal recognizer. A frozen patch/vision/fusion stack maps an
//! image and a prompt to per-slot vocabulary logits; low-rank adapters on
//! the two vision layers are the only weights unlearning may touch.
//!
//! Layout: 4×4 patches are grouped cell by cell, embedded, passed through a
//! two-layer residual MLP, and mean-pooled per cell. Output slot `s` reads
//! cell `s / 2`, so a member's two name tokens land in slots `2c` and `2c+1`.
//! The output head shares the prompt embedding table.

mod checkpoint;
mod vocab;

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{Graph, Tensor, Var};
use crate::rng;
use crate::vcubench::{Image, CELLS, CELL_SIZE, CHANNELS, IMAGE_SIZE, PIXELS};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use vocab::{ConceptVocab, Vocab, PAD, UNKNOWN};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Geometry {
    pub width: usize,
    pub patch: usize,
    pub slots: usize,
    pub max_prompt: usize,
    pub rank: usize,
    pub alpha: f64,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            width: 64,
            patch: 4,
            slots: 8,
            max_prompt: 32,
            rank: 32,
            alpha: 32.0,
        }
    }
}

impl Geometry {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || CELL_SIZE % self.patch != 0 {
            return Err(Error::Config(format!("patch size {} must divide {CELL_SIZE}", self.patch)));
        }
        if self.slots == 0 || self.slots % CELLS != 0 {
            return Err(Error::Config(format!("slots ({}) must be a multiple of {CELLS}", self.slots)));
        }
        if self.width == 0 || self.rank == 0 || self.alpha <= 0.0 {
            return Err(Error::Config("width, rank and alpha must be positive".into()));
        }
        Ok(())
    }

    pub fn patches_per_cell(&self) -> usize {
        (CELL_SIZE / self.patch).pow(2)
    }

    pub fn patches(&self) -> usize {
        CELLS * self.patches_per_cell()
    }

    pub fn patch_dim(&self) -> usize {
        CHANNELS * self.patch * self.patch
    }

    pub fn slots_per_cell(&self) -> usize {
        self.slots / CELLS
    }
}

/// Low-rank update `W0 + (alpha / rank) * B A` on one `d_out × d_in` weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub layer: String,
    pub a: Tensor,
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn new(layer: &str, d_out: usize, d_in: usize, rank: usize, alpha: f64, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let a = (0..rank * d_in).map(|_| rng.gen_range(-bound..bound)).collect();
        Self {
            layer: layer.to_string(),
            a: Tensor::new(vec![rank, d_in], a).expect("shape matches"),
            b: Tensor::zeros(&[d_out, rank]),
            rank,
            alpha,
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn delta(&self) -> Tensor {
        let mut d = crate::grad::matmul(&self.b, &self.a).expect("adapter shapes agree");
        let s = self.scale();
        d.data_mut().iter_mut().for_each(|x| *x *= s);
        d
    }

    pub fn is_identity(&self) -> bool {
        self.b.data().iter().all(|&x| x == 0.0)
    }
}

/// Frozen base weights. Vision weights are stored `d_out × d_in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseParams {
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub vis_w1: Tensor,
    pub vis_b1: Tensor,
    pub vis_w2: Tensor,
    pub vis_b2: Tensor,
    pub embed: Tensor,
    pub fuse_wc: Tensor,
    pub fuse_wq: Tensor,
    pub pos: Tensor,
    pub fuse_b: Tensor,
    pub head_b: Tensor,
}

pub const BASE_NAMES: [&str; 12] = [
    "patch_w", "patch_b", "vis_w1", "vis_b1", "vis_w2", "vis_b2", "embed", "fuse_wc", "fuse_wq",
    "pos", "fuse_b", "head_b",
];

impl BaseParams {
    fn init(g: &Geometry, vocab: usize, r: &mut impl Rng) -> Self {
        let d = g.width;
        let mut uni = |rows: usize, cols: usize, bound: f64| {
            let v = (0..rows * cols).map(|_| r.gen_range(-bound..bound)).collect();
            Tensor::new(vec![rows, cols], v).expect("shape matches")
        };
        let he = |fan_in: usize| (6.0 / fan_in as f64).sqrt();
        Self {
            patch_w: uni(g.patch_dim(), d, he(g.patch_dim())),
            patch_b: Tensor::zeros(&[d]),
            vis_w1: uni(d, d, he(d)),
            vis_b1: Tensor::zeros(&[d]),
            vis_w2: uni(d, d, he(d) * 0.5),
            vis_b2: Tensor::zeros(&[d]),
            embed: uni(vocab, d, 0.5),
            fuse_wc: uni(d, d, he(d)),
            fuse_wq: uni(d, d, he(d)),
            pos: uni(g.slots, d, 0.5),
            fuse_b: Tensor::zeros(&[d]),
            head_b: Tensor::zeros(&[vocab]),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.patch_w, &self.patch_b, &self.vis_w1, &self.vis_b1, &self.vis_w2, &self.vis_b2,
            &self.embed, &self.fuse_wc, &self.fuse_wq, &self.pos, &self.fuse_b, &self.head_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.patch_w, &mut self.patch_b, &mut self.vis_w1, &mut self.vis_b1,
            &mut self.vis_w2, &mut self.vis_b2, &mut self.embed, &mut self.fuse_wc,
            &mut self.fuse_wq, &mut self.pos, &mut self.fuse_b, &mut self.head_b,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub geometry: Geometry,
    pub vocab: Vocab,
    pub base: BaseParams,
    /// One adapter per vision layer, in layer order.
    pub lora: Vec<LoraAdapter>,
}

/// Which parameter group a forward graph should differentiate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    Base,
    Lora,
}

/// Graph handles for every weight used by one forward pass.
#[derive(Clone, Debug)]
pub struct Bound {
    base: Vec<Var>,
    /// Effective vision weights (`W0 + delta`).
    vis: [Var; 2],
    lora: Vec<(Var, Var)>,
    mode: Trainable,
}

impl Bound {
    /// Trainable leaves in the order of [`ModelState::trainable_mut`].
    pub fn params(&self) -> Vec<Var> {
        match self.mode {
            Trainable::Nothing => Vec::new(),
            Trainable::Base => self.base.clone(),
            Trainable::Lora => self.lora.iter().flat_map(|&(a, b)| [a, b]).collect(),
        }
    }
}

/// Logits and per-slot probabilities for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    pub logits: Tensor,
    pub probabilities: Tensor,
}

impl ModelOutput {
    pub fn from_logits(logits: Tensor) -> Self {
        let (rows, v) = (logits.shape()[0], logits.shape()[1]);
        let mut p = vec![0.0; rows * v];
        for r in 0..rows {
            crate::grad::softmax_row(logits.row(r), &mut p[r * v..(r + 1) * v]);
        }
        let probabilities = Tensor::new(vec![rows, v], p).expect("shape matches");
        Self { logits, probabilities }
    }
}

/// `max_{i in V(y)} max_slot logits[slot, i]`.
pub fn concept_logit(output: &ModelOutput, concept: &ConceptVocab) -> Result<f64> {
    let (slots, v) = (output.logits.shape()[0], output.logits.shape()[1]);
    if concept.tokens.is_empty() {
        return Err(Error::Contract(format!("concept '{}' has no tokens", concept.concept)));
    }
    let mut best = f64::NEG_INFINITY;
    for &t in &concept.tokens {
        if t >= v {
            return Err(Error::Vocab(format!("token index {t} out of range {v}")));
        }
        for s in 0..slots {
            best = best.max(output.logits.at2(s, t));
        }
    }
    Ok(best)
}

/// Recognition decision: `sigmoid(z) > 0.5`, i.e. `z > 0`.
pub fn recognized(output: &ModelOutput, concept: &ConceptVocab) -> Result<bool> {
    Ok(concept_logit(output, concept)? > 0.0)
}

/// Row-major `[n, PIXELS]` tensor of a batch of images.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a Image>) -> Tensor {
    let mut data = Vec::new();
    let mut n = 0;
    for img in images {
        data.extend_from_slice(img.data());
        n += 1;
    }
    Tensor::new(vec![n, PIXELS], data).expect("image length is fixed")
}

impl ModelState {
    pub fn init(geometry: Geometry, vocab: Vocab, seed: u64) -> Result<Self> {
        geometry.validate()?;
        if vocab.len() < 2 {
            return Err(Error::Vocab("vocabulary needs at least two tokens".into()));
        }
        let mut r = rng::stream(seed, &[rng::tag("model-init")]);
        let base = BaseParams::init(&geometry, vocab.len(), &mut r);
        let mut state = Self {
            geometry,
            vocab,
            base,
            lora: Vec::new(),
        };
        state.reset_lora(seed);
        Ok(state)
    }

    /// Fresh adapters with `B = 0`.
    pub fn reset_lora(&mut self, seed: u64) {
        let g = &self.geometry;
        let mut r = rng::stream(seed, &[rng::tag("lora-init")]);
        self.lora = ["vis1", "vis2"]
            .iter()
            .map(|name| LoraAdapter::new(name, g.width, g.width, g.rank, g.alpha, &mut r))
            .collect();
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// Mutable parameters of a group, matching [`Bound::params`].
    pub fn trainable_mut(&mut self, mode: Trainable) -> Vec<&mut Tensor> {
        match mode {
            Trainable::Nothing => Vec::new(),
            Trainable::Base => self.base.tensors_mut().into_iter().collect(),
            Trainable::Lora => self.lora.iter_mut().flat_map(|l| [&mut l.a, &mut l.b]).collect(),
        }
    }

    pub fn bind(&self, g: &mut Graph, mode: Trainable) -> Result<Bound> {
        if mode == Trainable::Lora {
            let vars: Vec<Var> = self
                .lora
                .iter()
                .flat_map(|ad| [ad.a.clone(), ad.b.clone()])
                .map(|t| g.param(t))
                .collect();
            return self.bind_lora_vars(g, &vars);
        }
        let base = self.bind_base(g, mode == Trainable::Base);
        let mut vis = [base[2], base[4]];
        for (k, ad) in self.lora.iter().enumerate() {
            if !ad.is_identity() {
                let d = g.constant(ad.delta());
                vis[k] = g.add(vis[k], d)?;
            }
        }
        Ok(Bound {
            base,
            vis,
            lora: Vec::new(),
            mode,
        })
    }

    /// Binds frozen base weights with caller-supplied adapter factors
    /// `[a0, b0, a1, b1]`, so gradients reach whatever those variables are.
    pub fn bind_lora_vars(&self, g: &mut Graph, vars: &[Var]) -> Result<Bound> {
        if vars.len() != 2 * self.lora.len() {
            return Err(Error::Contract(format!(
                "{} adapter variables for {} adapters",
                vars.len(),
                self.lora.len()
            )));
        }
        let base = self.bind_base(g, false);
        let mut vis = [base[2], base[4]];
        let mut lora = Vec::new();
        for (k, ad) in self.lora.iter().enumerate() {
            let (a, b) = (vars[2 * k], vars[2 * k + 1]);
            if g.shape(a) != ad.a.shape() || g.shape(b) != ad.b.shape() {
                return Err(Error::Dimension(format!("adapter {} factor shapes differ", ad.layer)));
            }
            let ba = g.matmul(b, a)?;
            let ba = g.scale(ba, ad.scale())?;
            vis[k] = g.add(vis[k], ba)?;
            lora.push((a, b));
        }
        Ok(Bound {
            base,
            vis,
            lora,
            mode: Trainable::Lora,
        })
    }

    fn bind_base(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.base
            .tensors()
            .into_iter()
            .map(|t| g.leaf(t.clone(), trainable))
            .collect()
    }

    fn check_prompt(&self, prompt: &[usize]) -> Result<()> {
        if prompt.len() > self.geometry.max_prompt {
            return Err(Error::Input(format!(
                "prompt of {} tokens exceeds the maximum {}",
                prompt.len(),
                self.geometry.max_prompt
            )));
        }
        if let Some(t) = prompt.iter().find(|&&t| t >= self.vocab.len()) {
            return Err(Error::Vocab(format!("token index {t} out of range {}", self.vocab.len())));
        }
        Ok(())
    }

    fn patch_index(&self, batch: usize) -> Vec<usize> {
        let g = &self.geometry;
        let per_row = CELL_SIZE / g.patch;
        let mut idx = Vec::with_capacity(batch * g.patches() * g.patch_dim());
        for b in 0..batch {
            for cell in 0..CELLS {
                let (y0, x0) = ((cell / 2) * CELL_SIZE, (cell % 2) * CELL_SIZE);
                for p in 0..g.patches_per_cell() {
                    let (py, px) = (y0 + (p / per_row) * g.patch, x0 + (p % per_row) * g.patch);
                    for c in 0..CHANNELS {
                        for dy in 0..g.patch {
                            for dx in 0..g.patch {
                                idx.push(b * PIXELS + (c * IMAGE_SIZE + py + dy) * IMAGE_SIZE + px + dx);
                            }
                        }
                    }
                }
            }
        }
        idx
    }

    fn affine(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
        let n = g.shape(x)[0];
        let y = g.matmul(x, w)?;
        let bb = g.broadcast_rows(b, n)?;
        g.add(y, bb)
    }

    /// Per-cell visual features `[batch * CELLS, width]` for `[batch, PIXELS]` images.
    pub fn cell_features(&self, g: &mut Graph, bound: &Bound, images: Var) -> Result<Var> {
        let shape = g.shape(images).to_vec();
        if shape.len() != 2 || shape[1] != PIXELS {
            return Err(Error::Dimension(format!("images must be [n, {PIXELS}], got {shape:?}")));
        }
        let geo = &self.geometry;
        let (batch, d) = (shape[0], geo.width);
        let rows = batch * geo.patches();
        let patches = g.gather(images, Rc::new(self.patch_index(batch)), &[rows, geo.patch_dim()])?;
        let h0 = Self::affine(g, patches, bound.base[0], bound.base[1])?;
        let h0 = g.relu(h0)?;
        let w1t = g.transpose(bound.vis[0])?;
        let h1 = Self::affine(g, h0, w1t, bound.base[3])?;
        let h1 = g.relu(h1)?;
        let w2t = g.transpose(bound.vis[1])?;
        let h2 = Self::affine(g, h1, w2t, bound.base[5])?;
        let h2 = g.add(h2, h0)?;
        let h2 = g.relu(h2)?;
        let h2 = g.reshape(h2, &[batch * CELLS, geo.patches_per_cell(), d])?;
        g.mean_axis(h2, 1)
    }

    /// Logits `[batch * slots, V]` for `[batch, PIXELS]` images and one
    /// prompt per image.
    pub fn forward_graph(&self, g: &mut Graph, bound: &Bound, images: Var, prompts: &[Vec<usize>]) -> Result<Var> {
        let batch = g.shape(images)[0];
        if prompts.len() != batch {
            return Err(Error::Dimension(format!("{} prompts for {batch} images", prompts.len())));
        }
        for p in prompts {
            self.check_prompt(p)?;
        }
        let geo = &self.geometry;
        let (d, s, v) = (geo.width, geo.slots, self.vocab.len());
        let cells = self.cell_features(g, bound, images)?;

        let spc = geo.slots_per_cell();
        let slot_cells: Vec<usize> = (0..batch)
            .flat_map(|b| (0..s).flat_map(move |k| (0..d).map(move |j| (b * CELLS + k / spc) * d + j)))
            .collect();
        let cs = g.gather(cells, Rc::new(slot_cells), &[batch * s, d])?;

        let mut counts = vec![0.0; batch * v];
        for (b, p) in prompts.iter().enumerate() {
            for &t in p {
                counts[b * v + t] += 1.0 / p.len() as f64;
            }
        }
        let counts = g.constant(Tensor::new(vec![batch, v], counts)?);
        let q = g.matmul(counts, bound.base[6])?;
        let q_rows: Vec<usize> = (0..batch)
            .flat_map(|b| (0..s).flat_map(move |_| (0..d).map(move |j| b * d + j)))
            .collect();
        let qs = g.gather(q, Rc::new(q_rows), &[batch * s, d])?;
        let pos_rows: Vec<usize> = (0..batch).flat_map(|_| 0..s * d).collect();
        let pos = g.gather(bound.base[9], Rc::new(pos_rows), &[batch * s, d])?;

        let fc = Self::affine(g, cs, bound.base[7], bound.base[10])?;
        let fq = g.matmul(qs, bound.base[8])?;
        let f = g.add(fc, fq)?;
        let f = g.add(f, pos)?;
        let f = g.relu(f)?;
        let et = g.transpose(bound.base[6])?;
        Self::affine(g, f, et, bound.base[11])
    }

    /// Forward pass for a batch without gradient tracking.
    pub fn forward_many(&self, images: &[&Image], prompts: &[Vec<usize>]) -> Result<Vec<ModelOutput>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, Trainable::Nothing)?;
        let x = g.constant(stack_images(images.iter().copied()));
        let logits = self.forward_graph(&mut g, &bound, x, prompts)?;
        Ok(split_logits(g.value(logits), self.geometry.slots))
    }

    pub fn forward(&self, image: &Image, prompt: &[usize]) -> Result<ModelOutput> {
        Ok(self.forward_many(&[image], &[prompt.to_vec()])?.remove(0))
    }

    /// Per-slot argmax tokens with padding removed.
    pub fn generate_caption(&self, image: &Image, prompt: &[usize]) -> Result<Vec<usize>> {
        Ok(caption_from(&self.forward(image, prompt)?, self.vocab.pad()))
    }

    pub fn concept(&self, spec: &crate::vcubench::IdentitySpec) -> Result<ConceptVocab> {
        self.vocab.concept(spec)
    }
}

pub fn split_logits(logits: &Tensor, slots: usize) -> Vec<ModelOutput> {
    let v = logits.shape()[1];
    logits
        .data()
        .chunks(slots * v)
        .map(|c| ModelOutput::from_logits(Tensor::new(vec![slots, v], c.to_vec()).expect("chunk shape")))
        .collect()
}

pub fn caption_from(output: &ModelOutput, pad: usize) -> Vec<usize> {
    let (slots, v) = (output.logits.shape()[0], output.logits.shape()[1]);
    (0..slots)
        .map(|s| {
            let row = output.logits.row(s);
            (0..v).fold(0, |best, i| if row[i] > row[best] { i } else { best })
        })
        .filter(|&t| t != pad)
        .collect()
}

/// Concept logits `[batch, concepts.len()]` as a differentiable max over
/// slots and each concept's tokens.
pub fn concept_logits_graph(
    g: &mut Graph,
    logits: Var,
    slots: usize,
    concepts: &[&ConceptVocab],
) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let (rows, v) = (shape[0], shape[1]);
    if rows % slots != 0 || concepts.is_empty() {
        return Err(Error::Dimension(format!("concept logits of {shape:?} with {slots} slots")));
    }
    let batch = rows / slots;
    let k = concepts.iter().map(|c| c.tokens.len()).max().unwrap_or(0);
    if k == 0 {
        return Err(Error::Contract("concept without tokens".into()));
    }
    let mut idx = Vec::with_capacity(batch * concepts.len() * slots * k);
    for b in 0..batch {
        for c in concepts {
            for s in 0..slots {
                for j in 0..k {
                    // shorter token lists repeat their first token; max is unaffected
                    let t = *c.tokens.get(j).unwrap_or(&c.tokens[0]);
                    if t >= v {
                        return Err(Error::Vocab(format!("token index {t} out of range {v}")));
                    }
                    idx.push((b * slots + s) * v + t);
                }
            }
        }
    }
    let gathered = g.gather(logits, Rc::new(idx), &[batch, concepts.len(), slots * k])?;
    g.max_axis(gathered, 2)
}
