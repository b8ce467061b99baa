use rand::Rng;
use serde::{Deserialize, Serialize};

use super::RawImage;

/// Random geometric augmentation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub enabled: bool,
    pub rotation_deg_range: (f64, f64),
    pub hflip: bool,
    pub vflip: bool,
    pub zoom_range: (f64, f64),
    pub translate_px_range: (f64, f64),
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            enabled: true,
            rotation_deg_range: (-30.0, 30.0),
            hflip: true,
            vflip: true,
            zoom_range: (0.8, 1.2),
            translate_px_range: (0.0, 0.0),
        }
    }
}

impl AugmentSpec {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let ordered = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !ordered(self.rotation_deg_range) || !ordered(self.zoom_range) || !ordered(self.translate_px_range) {
            return Err("augmentation ranges must be finite with lo <= hi".into());
        }
        if self.zoom_range.0 <= 0.0 {
            return Err(format!("zoom range must be positive, got {:?}", self.zoom_range));
        }
        Ok(())
    }

    /// Draws one set of transform parameters. Draw order is fixed so a
    /// given generator state always yields the same outcome.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> AugmentDraw {
        let uniform = |rng: &mut R, (lo, hi): (f64, f64)| if lo == hi { lo } else { rng.gen_range(lo..=hi) };
        let angle_deg = uniform(rng, self.rotation_deg_range);
        let zoom = uniform(rng, self.zoom_range);
        let tx = uniform(rng, self.translate_px_range).round() as i64;
        let ty = uniform(rng, self.translate_px_range).round() as i64;
        let hflip = rng.gen_bool(0.5) && self.hflip;
        let vflip = rng.gen_bool(0.5) && self.vflip;
        AugmentDraw {
            angle_deg,
            zoom,
            tx,
            ty,
            hflip,
            vflip,
        }
    }
}

/// One sampled augmentation outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub angle_deg: f64,
    pub zoom: f64,
    pub tx: i64,
    pub ty: i64,
    pub hflip: bool,
    pub vflip: bool,
}

impl AugmentDraw {
    /// Rotation, zoom, translation, then flips.
    pub fn apply(&self, img: &RawImage) -> RawImage {
        let mut out = rotate(img, self.angle_deg);
        out = zoom(&out, self.zoom);
        out = translate(&out, self.tx, self.ty);
        if self.hflip {
            out = flip_horizontal(&out);
        }
        if self.vflip {
            out = flip_vertical(&out);
        }
        out
    }
}

pub fn augment<R: Rng + ?Sized>(img: &RawImage, spec: &AugmentSpec, rng: &mut R) -> RawImage {
    if !spec.enabled {
        return img.clone();
    }
    spec.sample(rng).apply(img)
}

/// Bilinear sample with edge replication outside the image.
fn sample_clamped(img: &RawImage, sx: f64, sy: f64) -> [u8; 3] {
    let (w, h) = (img.width(), img.height());
    let sx = sx.clamp(0.0, (w - 1) as f64);
    let sy = sy.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (tx, ty) = (sx - x0 as f64, sy - y0 as f64);
    let (a, b, c, d) = (img.pixel(x0, y0), img.pixel(x1, y0), img.pixel(x0, y1), img.pixel(x1, y1));
    let mut out = [0u8; 3];
    for k in 0..3 {
        let top = a[k] as f64 * (1.0 - tx) + b[k] as f64 * tx;
        let bottom = c[k] as f64 * (1.0 - tx) + d[k] as f64 * tx;
        out[k] = (top * (1.0 - ty) + bottom * ty).round().clamp(0.0, 255.0) as u8;
    }
    out
}

fn center(img: &RawImage) -> (f64, f64) {
    ((img.width() as f64 - 1.0) / 2.0, (img.height() as f64 - 1.0) / 2.0)
}

pub(crate) fn rotate(img: &RawImage, angle_deg: f64) -> RawImage {
    if angle_deg == 0.0 {
        return img.clone();
    }
    let (cx, cy) = center(img);
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    RawImage::from_fn(img.width(), img.height(), |x, y| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        // Inverse map: rotate the output coordinate back by -angle.
        let sx = cos * dx + sin * dy + cx;
        let sy = -sin * dx + cos * dy + cy;
        sample_clamped(img, sx, sy)
    })
    .expect("same dimensions")
}

/// Factor > 1 crops the center and scales it up; < 1 shrinks and pads by edge replication.
pub(crate) fn zoom(img: &RawImage, factor: f64) -> RawImage {
    if factor == 1.0 {
        return img.clone();
    }
    let (cx, cy) = center(img);
    RawImage::from_fn(img.width(), img.height(), |x, y| {
        sample_clamped(img, (x as f64 - cx) / factor + cx, (y as f64 - cy) / factor + cy)
    })
    .expect("same dimensions")
}

pub(crate) fn translate(img: &RawImage, tx: i64, ty: i64) -> RawImage {
    if tx == 0 && ty == 0 {
        return img.clone();
    }
    let (w, h) = (img.width() as i64, img.height() as i64);
    RawImage::from_fn(img.width(), img.height(), |x, y| {
        let sx = (x as i64 - tx).clamp(0, w - 1) as usize;
        let sy = (y as i64 - ty).clamp(0, h - 1) as usize;
        img.pixel(sx, sy)
    })
    .expect("same dimensions")
}

pub(crate) fn flip_horizontal(img: &RawImage) -> RawImage {
    let w = img.width();
    RawImage::from_fn(w, img.height(), |x, y| img.pixel(w - 1 - x, y)).expect("same dimensions")
}

pub(crate) fn flip_vertical(img: &RawImage) -> RawImage {
    let h = img.height();
    RawImage::from_fn(img.width(), h, |x, y| img.pixel(x, h - 1 - y)).expect("same dimensions")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_image() -> RawImage {
        RawImage::from_fn(9, 7, |x, y| [(x * 28) as u8, (y * 36) as u8, ((x + y) * 13) as u8]).unwrap()
    }

    #[test]
    fn disabled_is_identity() {
        let img = sample_image();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&img, &AugmentSpec::disabled(), &mut rng), img);
    }

    #[test]
    fn null_ranges_are_identity() {
        let spec = AugmentSpec {
            enabled: true,
            rotation_deg_range: (0.0, 0.0),
            hflip: false,
            vflip: false,
            zoom_range: (1.0, 1.0),
            translate_px_range: (0.0, 0.0),
        };
        let img = sample_image();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            assert_eq!(augment(&img, &spec, &mut rng), img);
        }
    }

    #[test]
    fn hflip_is_involution() {
        let img = sample_image();
        let draw = AugmentDraw {
            angle_deg: 0.0,
            zoom: 1.0,
            tx: 0,
            ty: 0,
            hflip: true,
            vflip: false,
        };
        let once = draw.apply(&img);
        assert_ne!(once, img);
        assert_eq!(draw.apply(&once), img);
        assert_eq!(flip_vertical(&flip_vertical(&img)), img);
    }

    #[test]
    fn seeded_augment_reproducible() {
        let img = sample_image();
        let spec = AugmentSpec {
            translate_px_range: (-2.0, 2.0),
            ..AugmentSpec::default()
        };
        let a = augment(&img, &spec, &mut ChaCha8Rng::seed_from_u64(77));
        let b = augment(&img, &spec, &mut ChaCha8Rng::seed_from_u64(77));
        assert_eq!(a, b);
    }

    #[test]
    fn quarter_turn_on_square_is_exact_permutation() {
        let img = RawImage::from_fn(5, 5, |x, y| [(x * 50) as u8, (y * 50) as u8, 0]).unwrap();
        let r = rotate(&img, 90.0);
        for y in 0..5 {
            for x in 0..5 {
                // Source of output (x, y) under the inverse map is (y, 4 - x).
                assert_eq!(r.pixel(x, y), img.pixel(y, 4 - x));
            }
        }
    }

    #[test]
    fn translate_replicates_edges() {
        let img = sample_image();
        let t = translate(&img, 2, 0);
        assert_eq!(t.pixel(0, 3), img.pixel(0, 3));
        assert_eq!(t.pixel(1, 3), img.pixel(0, 3));
        assert_eq!(t.pixel(5, 3), img.pixel(3, 3));
    }

    #[test]
    fn zoom_in_keeps_center() {
        let img = sample_image();
        let z = zoom(&img, 1.2);
        assert_eq!(z.pixel(4, 3), img.pixel(4, 3));
    }

    #[test]
    fn validation() {
        assert!(AugmentSpec::default().validate().is_ok());
        let bad = AugmentSpec {
            zoom_range: (0.0, 1.0),
            ..AugmentSpec::default()
        };
        assert!(bad.validate().is_err());
        let inverted = AugmentSpec {
            rotation_deg_range: (10.0, -10.0),
            ..AugmentSpec::default()
        };
        assert!(inverted.validate().is_err());
    }
}
