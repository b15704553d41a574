//! The max player: a frozen feature encoder, an MLP that maps features to an
//! ℓ∞-bounded image perturbation, and prompt perturbation by template.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{Graph, Tensor, Var};
use crate::rng;
use crate::vcubench::{Image, CELLS, CELL_SIZE, CHANNELS, IMAGE_SIZE, PIXELS};

pub const FEATURE_WIDTH: usize = 64;
const ENC_PATCH: usize = 4;
const ENC_PER_CELL: usize = FEATURE_WIDTH / CELLS;

/// Seeded random patch projection followed by `tanh` and per-cell mean
/// pooling. Never trained.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenEncoder {
    proj: Tensor,
    bias: Vec<f64>,
    seed: u64,
}

impl FrozenEncoder {
    pub fn new(seed: u64) -> Self {
        let mut r = rng::stream(seed, &[rng::tag("frozen-encoder")]);
        let din = CHANNELS * ENC_PATCH * ENC_PATCH;
        let bound = (3.0 / din as f64).sqrt() * 2.0;
        let w = (0..din * ENC_PER_CELL).map(|_| r.gen_range(-bound..bound)).collect();
        let bias = (0..ENC_PER_CELL).map(|_| r.gen_range(-0.5..0.5)).collect();
        Self {
            proj: Tensor::new(vec![din, ENC_PER_CELL], w).expect("shape matches"),
            bias,
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn extract_feature(&self, image: &Image) -> Tensor {
        self.features_of(image.data()).expect("images have a fixed size")
    }

    /// Feature of a raw channel-major buffer, which must hold `PIXELS` values.
    pub fn features_of(&self, pixels: &[f64]) -> Result<Tensor> {
        if pixels.len() != PIXELS {
            return Err(Error::Input(format!(
                "encoder expects {PIXELS} values, got {}",
                pixels.len()
            )));
        }
        let din = CHANNELS * ENC_PATCH * ENC_PATCH;
        let per_row = CELL_SIZE / ENC_PATCH;
        let n_patches = per_row * per_row;
        // centre on the per-channel median, which is the background level
        let plane = IMAGE_SIZE * IMAGE_SIZE;
        let median: Vec<f64> = (0..CHANNELS)
            .map(|c| {
                let mut v = pixels[c * plane..(c + 1) * plane].to_vec();
                v.sort_by(f64::total_cmp);
                v[plane / 2]
            })
            .collect();
        let mut h = vec![0.0; FEATURE_WIDTH];
        let mut patch = vec![0.0; din];
        for cell in 0..CELLS {
            let (y0, x0) = ((cell / 2) * CELL_SIZE, (cell % 2) * CELL_SIZE);
            for p in 0..n_patches {
                let (py, px) = (y0 + (p / per_row) * ENC_PATCH, x0 + (p % per_row) * ENC_PATCH);
                let mut k = 0;
                for c in 0..CHANNELS {
                    for dy in 0..ENC_PATCH {
                        for dx in 0..ENC_PATCH {
                            patch[k] = pixels[(c * IMAGE_SIZE + py + dy) * IMAGE_SIZE + px + dx] - median[c];
                            k += 1;
                        }
                    }
                }
                for j in 0..ENC_PER_CELL {
                    let mut z = self.bias[j];
                    for (i, x) in patch.iter().enumerate() {
                        z += x * self.proj.data()[i * ENC_PER_CELL + j];
                    }
                    h[cell * ENC_PER_CELL + j] += z.tanh() / n_patches as f64;
                }
            }
        }
        Ok(Tensor::from_vec(h))
    }

    /// `[n, FEATURE_WIDTH]` features of a batch.
    pub fn batch_features(&self, images: &[&Image]) -> Tensor {
        let data = images
            .iter()
            .flat_map(|i| self.extract_feature(i).into_data())
            .collect();
        Tensor::new(vec![images.len(), FEATURE_WIDTH], data).expect("shape matches")
    }
}

/// Generator φ: three affine layers with ReLU between, then `eps * tanh`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
    pub eps: f64,
}

pub const DEFAULT_EPS: f64 = 8.0 / 255.0;

impl GeneratorParams {
    /// Scaled uniform hidden layers and a zero output layer, so a fresh
    /// generator leaves images untouched.
    pub fn new(hidden: usize, eps: f64, seed: u64) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::Config("generator hidden width must be positive".into()));
        }
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::Config(format!("perturbation budget {eps} must be positive")));
        }
        let mut r = rng::stream(seed, &[rng::tag("generator-init")]);
        let mut uni = |rows: usize, cols: usize| {
            let bound = (6.0 / rows as f64).sqrt();
            let v = (0..rows * cols).map(|_| r.gen_range(-bound..bound)).collect();
            Tensor::new(vec![rows, cols], v).expect("shape matches")
        };
        Ok(Self {
            w1: uni(FEATURE_WIDTH, hidden),
            b1: Tensor::zeros(&[hidden]),
            w2: uni(hidden, hidden),
            b2: Tensor::zeros(&[hidden]),
            w3: Tensor::zeros(&[hidden, PIXELS]),
            b3: Tensor::zeros(&[PIXELS]),
            eps,
        })
    }

    pub fn hidden(&self) -> usize {
        self.b1.len()
    }

    pub fn tensors(&self) -> [&Tensor; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.tensors()
            .into_iter()
            .map(|t| g.leaf(t.clone(), trainable))
            .collect()
    }
}

fn affine(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let n = g.shape(x)[0];
    let y = g.matmul(x, w)?;
    let bb = g.broadcast_rows(b, n)?;
    g.add(y, bb)
}

/// δ = ε·tanh(MLP(h)) for `[n, FEATURE_WIDTH]` features; returns `[n, PIXELS]`.
pub fn perturbation_graph(g: &mut Graph, phi: &[Var], eps: f64, feats: Var) -> Result<Var> {
    if g.shape(feats).len() != 2 || g.shape(feats)[1] != FEATURE_WIDTH {
        return Err(Error::Dimension(format!(
            "features must be [n, {FEATURE_WIDTH}], got {:?}",
            g.shape(feats)
        )));
    }
    let h = affine(g, feats, phi[0], phi[1])?;
    let h = g.relu(h)?;
    let h = affine(g, h, phi[2], phi[3])?;
    let h = g.relu(h)?;
    let o = affine(g, h, phi[4], phi[5])?;
    let o = g.tanh(o)?;
    g.scale(o, eps)
}

/// x' = clip(x + δ, 0, 1) for `[n, PIXELS]` images.
pub fn perturbed_graph(g: &mut Graph, phi: &[Var], eps: f64, feats: Var, images: Var) -> Result<Var> {
    let delta = perturbation_graph(g, phi, eps, feats)?;
    let x = g.add(images, delta)?;
    g.clip(x, 0.0, 1.0)
}

pub fn generate_perturbation(h: &Tensor, phi: &GeneratorParams) -> Result<Tensor> {
    if h.len() != FEATURE_WIDTH {
        return Err(Error::Dimension(format!(
            "feature width {} != {FEATURE_WIDTH}",
            h.len()
        )));
    }
    let mut g = Graph::new();
    let vars = phi.bind(&mut g, false);
    let f = g.constant(h.clone().reshaped(&[1, FEATURE_WIDTH])?);
    let d = perturbation_graph(&mut g, &vars, phi.eps, f)?;
    g.value(d).clone().reshaped(&[CHANNELS, IMAGE_SIZE, IMAGE_SIZE])
}

pub fn perturb_image(image: &Image, encoder: &FrozenEncoder, phi: &GeneratorParams) -> Result<Image> {
    Ok(perturb_images(&[image], encoder, phi)?.remove(0))
}

pub fn perturb_images(images: &[&Image], encoder: &FrozenEncoder, phi: &GeneratorParams) -> Result<Vec<Image>> {
    let mut g = Graph::new();
    let vars = phi.bind(&mut g, false);
    let f = g.constant(encoder.batch_features(images));
    let x = g.constant(crate::model::stack_images(images.iter().copied()));
    let xp = perturbed_graph(&mut g, &vars, phi.eps, f, x)?;
    g.value(xp)
        .data()
        .chunks(PIXELS)
        .map(|c| Image::new(c.to_vec()))
        .collect()
}

pub const DEFAULT_PROMPT_TEMPLATES: &str = "\
hello ! is {name} in the picture ?
hi there , who is next to {name} ?
please tell me if {name} appears here .
in other words , can you see {name} ?
the background is plain . is {name} here ?
ignore the colours . who is {name} standing with ?
is {name} in the picture ?
who is in the picture with {name} ?
";

/// One template per non-empty line.
pub fn parse_prompt_templates(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

pub fn load_prompt_templates(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_prompt_templates(&text))
}

pub fn default_prompt_templates() -> Vec<String> {
    parse_prompt_templates(DEFAULT_PROMPT_TEMPLATES)
}

/// Samples a template, fills `{name}`, and prepends the name tokens.
pub fn perturb_prompt(name: &[String], pool: &[String], rng: &mut impl Rng) -> Result<Vec<String>> {
    if pool.is_empty() {
        return Err(Error::Config("prompt template pool is empty".into()));
    }
    let joined = name.join(" ");
    let t = &pool[rng.gen_range(0..pool.len())];
    let mut out: Vec<String> = name.to_vec();
    out.extend(
        t.replace("{name}", &joined)
            .split_whitespace()
            .map(str::to_string),
    );
    Ok(out)
}

#[cfg(test)]
mod tests;
