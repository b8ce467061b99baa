use super::RawImage;

/// Equalizes one 8-bit channel through its cumulative histogram:
/// `round((cdf(v) - cdf_min) / (n - cdf_min) * 255)`, where `cdf_min` is the
/// smallest nonzero cdf value. A constant channel is returned unchanged.
pub fn equalize_channel(values: &[u8]) -> Vec<u8> {
    let mut hist = [0usize; 256];
    for &v in values {
        hist[v as usize] += 1;
    }
    let mut cdf = [0usize; 256];
    let mut running = 0;
    for (c, h) in cdf.iter_mut().zip(hist) {
        running += h;
        *c = running;
    }
    let n = values.len();
    let cdf_min = cdf.iter().copied().find(|&c| c > 0).unwrap_or(0);
    if n == cdf_min {
        return values.to_vec();
    }
    let denom = (n - cdf_min) as f64;
    let mut lut = [0u8; 256];
    for (v, slot) in lut.iter_mut().enumerate() {
        if hist[v] > 0 {
            *slot = ((cdf[v] - cdf_min) as f64 / denom * 255.0).round() as u8;
        }
    }
    values.iter().map(|&v| lut[v as usize]).collect()
}

/// Per-channel histogram equalization.
pub fn hist_equalize(img: &RawImage) -> RawImage {
    let planes = [0, 1, 2].map(|c| equalize_channel(&img.channel(c)));
    RawImage::with_channels(img.width(), img.height(), planes)
}
