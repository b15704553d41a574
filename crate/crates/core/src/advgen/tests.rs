use rand::Rng;

use super::*;
use crate::grad::grad_check_many;
use crate::vcubench::{make_roster, render_canonical, render_single};

fn random_image(r: &mut impl Rng) -> Image {
    Image::new((0..PIXELS).map(|_| r.gen_range(0.0..=1.0)).collect()).unwrap()
}

fn randomise(phi: &mut GeneratorParams, scale: f64, r: &mut impl Rng) {
    for t in phi.tensors_mut() {
        t.data_mut().iter_mut().for_each(|x| *x = r.gen_range(-scale..scale));
    }
}

#[test]
fn encoder_is_deterministic_and_zero_image_is_fixed() {
    let e = FrozenEncoder::new(3);
    let z = Image::filled(0.0);
    assert_eq!(e.extract_feature(&z), e.extract_feature(&z));
    assert_eq!(e.extract_feature(&z), FrozenEncoder::new(3).extract_feature(&z));
    assert_eq!(e.extract_feature(&z).len(), FEATURE_WIDTH);
    assert!(matches!(e.features_of(&[0.0; 5]), Err(Error::Input(_))));
}

#[test]
fn distinct_identities_are_further_apart_than_renders_of_one() {
    let roster = make_roster(8, 2, 0).unwrap();
    let e = FrozenEncoder::new(0);
    // renders land in random cells, so compare features summed over cells
    let pooled = |t: &Tensor| -> Vec<f64> {
        (0..16).map(|j| (0..4).map(|c| t.data()[c * 16 + j]).sum()).collect()
    };
    let feats: Vec<Vec<Vec<f64>>> = (0..8)
        .map(|i| {
            (0..6)
                .map(|s| pooled(&e.extract_feature(&render_single(&roster.identities, i, 1000 + s).unwrap())))
                .collect()
        })
        .collect();
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    };
    let (mut between, mut nb, mut within, mut nw) = (0.0, 0, 0.0, 0);
    for i in 0..8 {
        for a in 0..6 {
            for b in a + 1..6 {
                within += dist(&feats[i][a], &feats[i][b]);
                nw += 1;
            }
            for j in i + 1..8 {
                between += dist(&feats[i][a], &feats[j][a]);
                nb += 1;
            }
        }
    }
    let (between, within) = (between / nb as f64, within / nw as f64);
    assert!(between > within, "between {between} within {within}");
}

#[test]
fn similar_pair_is_nearest_in_feature_space() {
    for seed in 0..30 {
        let roster = make_roster(8, 2, seed).unwrap();
        let e = FrozenEncoder::new(seed);
        let f: Vec<Tensor> = roster.identities.iter().map(|s| e.extract_feature(&render_canonical(s))).collect();
        let d = |a: usize, b: usize| -> f64 {
            f[a].data().iter().zip(f[b].data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
        };
        for (a, b) in [(0, 1), (2, 3)] {
            for c in 4..8 {
                assert!(d(a, b) < d(a, c), "seed {seed}: pair ({a},{b}) vs {c}");
                assert!(d(b, a) < d(b, c), "seed {seed}: pair ({b},{a}) vs {c}");
            }
        }
    }
}

#[test]
fn zero_generator_is_identity() {
    let e = FrozenEncoder::new(1);
    let phi = GeneratorParams::new(32, DEFAULT_EPS, 1).unwrap();
    let mut r = rng::stream(9, &[]);
    for _ in 0..5 {
        let x = random_image(&mut r);
        assert_eq!(perturb_image(&x, &e, &phi).unwrap(), x);
        let d = generate_perturbation(&e.extract_feature(&x), &phi).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn delta_is_bounded_and_saturated_pixels_clip() {
    let e = FrozenEncoder::new(1);
    let mut phi = GeneratorParams::new(16, DEFAULT_EPS, 1).unwrap();
    let mut r = rng::stream(4, &[]);
    randomise(&mut phi, 3.0, &mut r);
    let x = random_image(&mut r);
    let d = generate_perturbation(&e.extract_feature(&x), &phi).unwrap();
    assert!(d.max_abs() <= DEFAULT_EPS);
    assert!(d.max_abs() > 0.9 * DEFAULT_EPS);

    phi.w3.data_mut().iter_mut().for_each(|v| *v = 0.0);
    phi.b3.data_mut().iter_mut().for_each(|v| *v = 5.0);
    let ones = Image::filled(1.0);
    assert_eq!(perturb_image(&ones, &e, &phi).unwrap(), ones);
}

#[test]
fn perturbation_gradient_matches_finite_differences() {
    let mut r = rng::stream(5, &[]);
    let mut phi = GeneratorParams::new(4, DEFAULT_EPS, 2).unwrap();
    randomise(&mut phi, 0.5, &mut r);
    let h = Tensor::new(vec![1, FEATURE_WIDTH], (0..FEATURE_WIDTH).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
    let eps = phi.eps;
    // scale up so the squared norm is not vanishingly small
    let err = grad_check_many(
        |g, v| {
            let f = g.constant(h.clone());
            let d = perturbation_graph(g, v, eps, f)?;
            let d = g.scale(d, 100.0)?;
            let sq = g.mul(d, d)?;
            g.sum(sq)
        },
        &phi.tensors().map(Clone::clone),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn prompt_perturbation_prefix_and_coverage() {
    let name = vec!["avo".to_string(), "arden".to_string()];
    let pool = default_prompt_templates();
    assert_eq!(pool.len(), 8);
    let mut r = rng::stream(0, &[]);
    let mut seen = vec![false; pool.len()];
    for _ in 0..1000 {
        let p = perturb_prompt(&name, &pool, &mut r).unwrap();
        assert_eq!(&p[..2], &name[..]);
        let body = p[2..].join(" ");
        let k = pool
            .iter()
            .position(|t| t.replace("{name}", "avo arden") == body)
            .expect("output comes from a template");
        seen[k] = true;
    }
    assert!(seen.iter().all(|&s| s));

    let one = vec!["who is {name} ?".to_string()];
    let a = perturb_prompt(&name, &one, &mut r).unwrap();
    assert_eq!(a, perturb_prompt(&name, &one, &mut rng::stream(77, &[])).unwrap());
    assert_eq!(a.join(" "), "avo arden who is avo arden ?");
    assert!(matches!(perturb_prompt(&name, &[], &mut r), Err(Error::Config(_))));
}

#[test]
fn bad_generator_configs() {
    assert!(GeneratorParams::new(0, DEFAULT_EPS, 0).is_err());
    assert!(GeneratorParams::new(4, 0.0, 0).is_err());
}

