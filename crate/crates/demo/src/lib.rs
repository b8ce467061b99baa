//! Browser bindings for the capsule-network demo page in `www/`.
//!
//! Each exported function wraps a plain Rust function of the same name with
//! an `_impl` suffix; those are what the native tests exercise.

use capsnet_core::autodiff::{margin_loss_value, MarginConstants};
use capsnet_core::capsnet::{capsule_norms, route, squash};
use capsnet_core::dataset::Label;
use capsnet_core::imaging::{augment, AugmentSpec, PreprocConfig, RawImage};
use capsnet_core::metrics::{auc, confusion, roc_curve};
use capsnet_core::synth::synthetic_fundus;
use capsnet_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

const MARGIN: MarginConstants = MarginConstants {
    m_plus: 0.9,
    m_minus: 0.1,
    lambda: 0.5,
};

fn rgba(img: &RawImage) -> Vec<u8> {
    img.pixels().chunks(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

/// Synthetic fundus image run through the preprocessing pipeline. Returns
/// RGBA bytes of a `size`×`size` image.
pub fn fundus_impl(glaucoma: bool, seed: u64, size: usize, equalize: bool, augment_seed: Option<u64>) -> Result<Vec<u8>, String> {
    let preproc = PreprocConfig {
        target_size: size,
        apply_he: equalize,
        rescale_01: true,
    };
    preproc.validate().map_err(|e| e.to_string())?;
    let label = if glaucoma { Label::Glaucoma } else { Label::Normal };
    let mut img = preproc.prepare(&synthetic_fundus(96, label, seed));
    if let Some(s) = augment_seed {
        img = augment(&img, &AugmentSpec::default(), &mut ChaCha8Rng::seed_from_u64(s));
    }
    Ok(rgba(&img))
}

#[wasm_bindgen]
pub fn fundus(glaucoma: bool, seed: u32, size: u32, equalize: bool, augment_seed: i32) -> Result<Vec<u8>, JsError> {
    let aug = u64::try_from(augment_seed).ok();
    fundus_impl(glaucoma, seed as u64, size as usize, equalize, aug).map_err(|e| JsError::new(&e))
}

/// Output length `‖squash(s)‖` for an input of length `s`.
#[wasm_bindgen]
pub fn squash_length(s: f64) -> f64 {
    let v = squash(&[s]);
    v[0].abs()
}

/// Margin loss of the two class-capsule lengths for the given label.
#[wasm_bindgen]
pub fn margin_loss(normal: f64, glaucoma: f64, label: u32) -> f64 {
    margin_loss_value(&[normal, glaucoma], label.min(1) as usize, MARGIN)
}

/// Routing on `n` random input capsules, a fraction `agree` of which
/// predict a consistent glaucoma capsule while the rest predict noise.
///
/// Returns `[len_normal, len_glaucoma, c_1 ...]` where `c_1` lists, for each
/// iteration, every input capsule's coupling to the glaucoma class.
pub fn routing_impl(n: usize, iters: usize, agree: f64, seed: u64) -> Result<Vec<f64>, String> {
    const D: usize = 8;
    if n == 0 || iters == 0 {
        return Err("need at least one capsule and one iteration".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target: Vec<f64> = (0..D).map(|_| rng.gen_range(-0.3..0.3)).collect();
    let mut u_hat = Vec::with_capacity(n * 2 * D);
    for _ in 0..n {
        let agrees = rng.gen_bool(agree.clamp(0.0, 1.0));
        for class in 0..2 {
            for t in &target {
                let noise = rng.gen_range(-0.3..0.3);
                u_hat.push(if class == 1 && agrees { t + 0.1 * noise } else { noise });
            }
        }
    }
    let (history, v) = route(&u_hat, n, 2, D, iters);
    let caps = Tensor::new(vec![2, D], v).map_err(|e| e.to_string())?;
    let mut out = capsule_norms(&caps);
    for c in history {
        out.extend(c.chunks(2).map(|row| row[1]));
    }
    Ok(out)
}

#[wasm_bindgen]
pub fn routing(n: u32, iters: u32, agree: f64, seed: u32) -> Result<Vec<f64>, JsError> {
    routing_impl(n as usize, iters as usize, agree, seed as u64).map_err(|e| JsError::new(&e))
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>, String> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| format!("bad {what} `{t}`")))
        .collect()
}

/// ROC analysis of free-text scores and 0/1 labels (1 = glaucoma).
///
/// Returns `[auc, acc, sen, spe, tp, tn, fp, fn, fpr_0, tpr_0, ...]`.
pub fn roc_impl(scores: &str, labels: &str, threshold: f64) -> Result<Vec<f64>, String> {
    let s: Vec<f64> = parse_list(scores, "score")?;
    let l: Vec<u8> = parse_list(labels, "label")?;
    if s.len() != l.len() {
        return Err(format!("{} scores but {} labels", s.len(), l.len()));
    }
    let pairs = s
        .into_iter()
        .zip(l)
        .map(|(s, l)| match l {
            0 => Ok((s, Label::Normal)),
            1 => Ok((s, Label::Glaucoma)),
            other => Err(format!("label must be 0 or 1, got {other}")),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let area = auc(&pairs).map_err(|e| e.to_string())?;
    let cm = confusion(&pairs, threshold).map_err(|e| e.to_string())?;
    let mut out = vec![
        area,
        cm.accuracy(),
        cm.sensitivity().0,
        cm.specificity().0,
        cm.tp as f64,
        cm.tn as f64,
        cm.fp as f64,
        cm.fn_ as f64,
    ];
    for (x, y) in roc_curve(&pairs).map_err(|e| e.to_string())? {
        out.extend([x, y]);
    }
    Ok(out)
}

#[wasm_bindgen]
pub fn roc(scores: &str, labels: &str, threshold: f64) -> Result<Vec<f64>, JsError> {
    roc_impl(scores, labels, threshold).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fundus_is_rgba_and_deterministic() {
        let a = fundus_impl(true, 3, 32, true, Some(7)).unwrap();
        assert_eq!(a.len(), 32 * 32 * 4);
        assert!(a.chunks(4).all(|p| p[3] == 255));
        assert_eq!(a, fundus_impl(true, 3, 32, true, Some(7)).unwrap());
        assert_ne!(a, fundus_impl(true, 3, 32, true, None).unwrap());
        assert!(fundus_impl(true, 3, 4, true, None).is_err());
    }

    #[test]
    fn curves() {
        assert_eq!(squash_length(0.0), 0.0);
        assert!((squash_length(1.0) - 0.5).abs() < 1e-12);
        assert!(squash_length(100.0) < 1.0);
        assert!((margin_loss(0.0, 1.0, 0) - 1.215).abs() < 1e-12);
        assert!((margin_loss(0.5, 0.5, 0) - 0.24).abs() < 1e-12);
    }

    #[test]
    fn agreement_attracts_coupling() {
        let out = routing_impl(40, 3, 1.0, 1).unwrap();
        assert_eq!(out.len(), 2 + 3 * 40);
        let first: f64 = out[2..42].iter().sum::<f64>() / 40.0;
        let last: f64 = out[82..].iter().sum::<f64>() / 40.0;
        assert!((first - 0.5).abs() < 1e-12);
        assert!(last > first, "{first} -> {last}");
        assert!(out[1] > out[0]);
        assert!(routing_impl(0, 3, 0.5, 1).is_err());
    }

    #[test]
    fn roc_worked_example() {
        let out = roc_impl("0.1, 0.4, 0.35, 0.8", "0 0 1 1", 0.5).unwrap();
        assert!((out[0] - 0.75).abs() < 1e-12);
        assert_eq!(&out[4..8], &[1.0, 2.0, 0.0, 1.0]);
        assert_eq!(&out[8..10], &[0.0, 0.0]);
        assert_eq!(&out[out.len() - 2..], &[1.0, 1.0]);
        assert!(roc_impl("0.1 0.2", "0", 0.5).is_err());
        assert!(roc_impl("0.1 0.2", "0 2", 0.5).is_err());
        assert!(roc_impl("0.1 x", "0 1", 0.5).is_err());
    }
}
