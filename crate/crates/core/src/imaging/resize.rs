use super::RawImage;

/// Source coordinate for output index `dst` under half-pixel alignment,
/// clamped to the valid sample range.
fn source_coord(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, src - lo as f64)
}

/// Bilinear resize to `target`×`target`.
pub fn resize(img: &RawImage, target: usize) -> RawImage {
    assert!(target >= 1, "resize target must be positive");
    let (w, h) = (img.width(), img.height());
    if w == target && h == target {
        return img.clone();
    }
    let xs: Vec<_> = (0..target).map(|x| source_coord(x, w, target)).collect();
    let ys: Vec<_> = (0..target).map(|y| source_coord(y, h, target)).collect();
    let src = img.pixels();
    let mut out = Vec::with_capacity(target * target * 3);
    for &(y0, y1, ty) in &ys {
        for &(x0, x1, tx) in &xs {
            for c in 0..3 {
                let p = |x: usize, y: usize| src[(y * w + x) * 3 + c] as f64;
                let top = p(x0, y0) * (1.0 - tx) + p(x1, y0) * tx;
                let bottom = p(x0, y1) * (1.0 - tx) + p(x1, y1) * tx;
                let v = top * (1.0 - ty) + bottom * ty;
                out.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    RawImage::new(target, target, out).expect("target > 0")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_resize_is_bitwise() {
        let img = RawImage::from_fn(64, 64, |x, y| [(x * 3) as u8, (y * 4) as u8, ((x * y) % 256) as u8]).unwrap();
        assert_eq!(resize(&img, 64), img);
    }

    #[test]
    fn downscale_shape() {
        let img = RawImage::from_fn(128, 128, |x, _| [x as u8, 0, 255]).unwrap();
        let r = resize(&img, 64);
        assert_eq!((r.width(), r.height(), r.pixels().len()), (64, 64, 64 * 64 * 3));
    }

    /// Independent evaluation of the half-pixel bilinear formula.
    fn bilinear_oracle(img: &RawImage, target: usize, x: usize, y: usize, c: usize) -> u8 {
        let sx = ((x as f64 + 0.5) * img.width() as f64 / target as f64 - 0.5).max(0.0);
        let sy = ((y as f64 + 0.5) * img.height() as f64 / target as f64 - 0.5).max(0.0);
        let sx = sx.min((img.width() - 1) as f64);
        let sy = sy.min((img.height() - 1) as f64);
        let mut acc = 0.0;
        for yy in 0..img.height() {
            for xx in 0..img.width() {
                let wx = (1.0 - (sx - xx as f64).abs()).max(0.0);
                let wy = (1.0 - (sy - yy as f64).abs()).max(0.0);
                acc += wx * wy * img.pixel(xx, yy)[c] as f64;
            }
        }
        acc.round() as u8
    }

    #[test]
    fn two_by_two_upscale_matches_formula() {
        let img = RawImage::new(2, 2, vec![0, 0, 0, 255, 255, 255, 0, 0, 0, 255, 255, 255]).unwrap();
        let r = resize(&img, 4);
        for y in 0..4 {
            let row: Vec<u8> = (0..4).map(|x| r.pixel(x, y)[0]).collect();
            for x in 0..4 {
                for c in 0..3 {
                    assert_eq!(r.pixel(x, y)[c], bilinear_oracle(&img, 4, x, y, c));
                }
            }
            assert!(row.windows(2).all(|p| p[0] <= p[1]));
            assert!(row[1] > 0 && row[1] < 255 && row[2] > 0 && row[2] < 255);
        }
    }

    #[test]
    fn random_resizes_match_formula() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let (w, h) = (rng.gen_range(1..9), rng.gen_range(1..9));
            let img = RawImage::from_fn(w, h, |_, _| [rng.gen(), rng.gen(), rng.gen()]).unwrap();
            let target = rng.gen_range(1..12);
            let r = resize(&img, target);
            for y in 0..target {
                for x in 0..target {
                    for c in 0..3 {
                        let want = bilinear_oracle(&img, target, x, y, c) as i32;
                        // Both sides round the same real value; summation order may flip a .5 tie.
                        assert!((r.pixel(x, y)[c] as i32 - want).abs() <= 1);
                    }
                }
            }
        }
    }
}
