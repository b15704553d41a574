//! Procedural glyph rendering. Images are 3×32×32, split into a 2×2 grid of
//! 16-pixel cells; each identity occupies at most one cell.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::roster::{Appearance, IdentitySpec};
use crate::error::{Error, Result};
use crate::rng;

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
pub const GRID: usize = 2;
pub const CELLS: usize = GRID * GRID;
pub const CELL_SIZE: usize = IMAGE_SIZE / GRID;
pub const PIXELS: usize = CHANNELS * IMAGE_SIZE * IMAGE_SIZE;

/// Channel-major `3×H×W` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    data: Vec<f64>,
}

impl Image {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.len() != PIXELS {
            return Err(Error::Input(format!(
                "image must hold {PIXELS} values, got {}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Input(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { data })
    }

    pub fn filled(value: f64) -> Self {
        Self {
            data: vec![value.clamp(0.0, 1.0); PIXELS],
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * IMAGE_SIZE + y) * IMAGE_SIZE + x]
    }

    fn set(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        for (c, v) in rgb.iter().enumerate() {
            self.data[(c * IMAGE_SIZE + y) * IMAGE_SIZE + x] = *v;
        }
    }

    fn quantize(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    /// Index into the roster.
    pub identity: usize,
    /// Grid cell, row-major in `0..4`.
    pub cell: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub members: Vec<Placement>,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.members.is_empty() || self.members.len() > CELLS {
            return Err(Error::Layout(format!(
                "scene needs 1..={CELLS} members, got {}",
                self.members.len()
            )));
        }
        for (i, a) in self.members.iter().enumerate() {
            if a.cell >= CELLS {
                return Err(Error::Layout(format!("cell {} out of range", a.cell)));
            }
            for b in &self.members[i + 1..] {
                if a.cell == b.cell {
                    return Err(Error::Layout(format!("two members share cell {}", a.cell)));
                }
                if a.identity == b.identity {
                    return Err(Error::Layout(format!(
                        "identity {} placed twice",
                        a.identity
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn contains(&self, identity: usize) -> bool {
        self.members.iter().any(|m| m.identity == identity)
    }

    pub fn member_at(&self, cell: usize) -> Option<usize> {
        self.members.iter().find(|m| m.cell == cell).map(|m| m.identity)
    }

    /// Single member in a cell and jitter both chosen by `seed`.
    pub fn single(identity: usize, seed: u64) -> Self {
        let cell = rng::stream(seed, &[rng::tag("cell")]).gen_range(0..CELLS);
        Self {
            members: vec![Placement { identity, cell }],
            seed,
        }
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

const ACCENT_RGB: [[f64; 3]; 6] = [
    [1.0, 1.0, 1.0],
    [0.05, 0.05, 0.05],
    [1.0, 0.95, 0.2],
    [0.1, 0.95, 0.95],
    [0.95, 0.1, 0.85],
    [0.55, 0.3, 0.1],
];

fn inside(shape: u8, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs().max(dy.abs()) <= 0.85 * r,
        2 => dy <= 0.8 * r && dy >= -r && dx.abs() <= (dy + r) * 0.6,
        3 => dx.abs() + dy.abs() <= 1.1 * r,
        4 => (dx.abs() <= r * 0.38 && dy.abs() <= r) || (dy.abs() <= r * 0.38 && dx.abs() <= r),
        _ => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= (0.5 * r) * (0.5 * r)
        }
    }
}

fn draw_glyph(img: &mut Image, app: &Appearance, cell: usize, seed: u64) {
    let mut r = rng::stream(seed, &[rng::tag("glyph"), cell as u64]);
    let (cy0, cx0) = ((cell / GRID) * CELL_SIZE, (cell % GRID) * CELL_SIZE);
    let cx = cx0 as f64 + CELL_SIZE as f64 / 2.0 + r.gen_range(-1.5..1.5);
    let cy = cy0 as f64 + CELL_SIZE as f64 / 2.0 + r.gen_range(-1.5..1.5);
    let radius = 5.8 * r.gen_range(0.88..1.1);
    let shade = r.gen_range(0.85..1.0);
    let fill = hsv(app.hue as f64 / 8.0, 0.85, 0.92 * shade);

    let stripes = app.stripes as usize;
    let stripe_rows: Vec<f64> = (0..stripes)
        .map(|j| cy - radius + (j + 1) as f64 * 2.0 * radius / (stripes + 1) as f64)
        .collect();

    for y in cy0..cy0 + CELL_SIZE {
        for x in cx0..cx0 + CELL_SIZE {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            if !inside(app.shape, dx, dy, radius) {
                continue;
            }
            let py = y as f64 + 0.5;
            let striped = stripe_rows.iter().any(|s| (py - s).abs() < 0.6);
            let c = if striped { fill.map(|v| v * 0.45) } else { fill };
            img.set(y, x, c);
        }
    }
    // accent: 2x2 block at the glyph centre
    let (ax, ay) = (cx.round() as isize - 1, cy.round() as isize - 1);
    for y in ay..ay + 2 {
        for x in ax..ax + 2 {
            if (cy0 as isize..(cy0 + CELL_SIZE) as isize).contains(&y)
                && (cx0 as isize..(cx0 + CELL_SIZE) as isize).contains(&x)
            {
                img.set(y as usize, x as usize, ACCENT_RGB[app.accent as usize]);
            }
        }
    }
}

fn background(seed: u64) -> Image {
    let mut r = rng::stream(seed, &[rng::tag("background")]);
    let base: f64 = r.gen_range(0.72..0.9);
    let tint: [f64; 3] = [r.gen_range(-0.04..0.04), r.gen_range(-0.04..0.04), r.gen_range(-0.04..0.04)];
    let mut img = Image::filled(0.0);
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let n: f64 = r.gen_range(-0.03..0.03);
            let rgb = tint.map(|t| (base + t + n).clamp(0.0, 1.0));
            img.set(y, x, rgb);
        }
    }
    img
}

/// Composite every member's glyph into its cell over a seeded background.
pub fn render_scene(scene: &SceneSpec, roster: &[IdentitySpec]) -> Result<Image> {
    scene.validate()?;
    let mut img = background(scene.seed);
    for m in &scene.members {
        let spec = roster
            .get(m.identity)
            .ok_or_else(|| Error::Input(format!("identity index {} not in roster", m.identity)))?;
        draw_glyph(&mut img, &spec.appearance, m.cell, scene.seed);
    }
    img.quantize();
    Ok(img)
}

pub fn render_single(roster: &[IdentitySpec], identity: usize, variation_seed: u64) -> Result<Image> {
    render_scene(&SceneSpec::single(identity, variation_seed), roster)
}

pub fn render_group(scene: &SceneSpec, roster: &[IdentitySpec]) -> Result<Image> {
    render_scene(scene, roster)
}

/// Noise-free render in cell 0, used as the reference view of an identity.
pub fn render_canonical(spec: &IdentitySpec) -> Image {
    let mut img = Image::filled(0.8);
    let app = spec.appearance;
    // seed 0 gives every identity the same jitter
    draw_glyph(&mut img, &app, 0, 0);
    img.quantize();
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vcubench::roster::make_roster;

    #[test]
    fn same_seed_same_pixels_all_in_range() {
        let r = make_roster(8, 2, 1).unwrap();
        for seed in 0..30 {
            let a = render_single(&r.identities, 3, seed).unwrap();
            let b = render_single(&r.identities, 3, seed).unwrap();
            assert_eq!(a, b);
            assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn thirty_seeds_give_thirty_distinct_renders() {
        let r = make_roster(8, 2, 1).unwrap();
        let imgs: Vec<Image> = (0..30).map(|s| render_single(&r.identities, 0, s).unwrap()).collect();
        for i in 0..30 {
            for j in i + 1..30 {
                assert_ne!(imgs[i], imgs[j]);
            }
        }
    }

    #[test]
    fn one_member_group_equals_single() {
        let r = make_roster(8, 2, 1).unwrap();
        let single = SceneSpec::single(2, 99);
        let group = SceneSpec {
            members: single.members.clone(),
            seed: 99,
        };
        assert_eq!(
            render_single(&r.identities, 2, 99).unwrap(),
            render_group(&group, &r.identities).unwrap()
        );
    }

    #[test]
    fn member_order_does_not_matter() {
        let r = make_roster(8, 2, 1).unwrap();
        let members = vec![
            Placement { identity: 0, cell: 0 },
            Placement { identity: 4, cell: 1 },
            Placement { identity: 5, cell: 2 },
            Placement { identity: 7, cell: 3 },
        ];
        let mut rev = members.clone();
        rev.reverse();
        let a = render_group(&SceneSpec { members, seed: 5 }, &r.identities).unwrap();
        let b = render_group(&SceneSpec { members: rev, seed: 5 }, &r.identities).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn overlapping_layout_is_rejected() {
        let r = make_roster(8, 2, 1).unwrap();
        let scene = SceneSpec {
            members: vec![Placement { identity: 0, cell: 1 }, Placement { identity: 1, cell: 1 }],
            seed: 0,
        };
        assert!(matches!(render_group(&scene, &r.identities), Err(Error::Layout(_))));
        let dup = SceneSpec {
            members: vec![Placement { identity: 0, cell: 1 }, Placement { identity: 0, cell: 2 }],
            seed: 0,
        };
        assert!(matches!(dup.validate(), Err(Error::Layout(_))));
    }

    #[test]
    fn image_rejects_out_of_range_pixels() {
        let mut v = vec![0.5; PIXELS];
        v[10] = 1.2;
        assert!(matches!(Image::new(v), Err(Error::Input(_))));
        assert!(Image::new(vec![0.5; 10]).is_err());
    }
}
