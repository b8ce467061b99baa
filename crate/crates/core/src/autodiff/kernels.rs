//! Slice-level forward and backward kernels shared by the graph ops.
//!
//! All kernels fix their reduction order per output element, so the
//! data-parallel variants produce bit-identical results to the serial ones.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.height - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width - self.kernel_w) / self.stride + 1
    }

    fn kernel_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }
}

fn conv_forward_filter(g: &ConvGeometry, input: &[f64], kernel_f: &[f64], out_f: &mut [f64]) {
    let (oh, ow, s) = (g.out_h(), g.out_w(), g.stride);
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for a in 0..g.kernel_h {
            for b in 0..g.kernel_w {
                let k = kernel_f[(c * g.kernel_h + a) * g.kernel_w + b];
                for i in 0..oh {
                    let row = &plane[(i * s + a) * g.width..];
                    let out_row = &mut out_f[i * ow..(i + 1) * ow];
                    if s == 1 {
                        for (o, x) in out_row.iter_mut().zip(&row[b..b + ow]) {
                            *o += k * x;
                        }
                    } else {
                        for (j, o) in out_row.iter_mut().enumerate() {
                            *o += k * row[j * s + b];
                        }
                    }
                }
            }
        }
    }
}

/// Valid cross-correlation of `input` [C,H,W] with `kernel` [F,C,kH,kW].
pub fn conv2d_forward(g: &ConvGeometry, input: &[f64], kernel: &[f64], parallel: bool) -> Vec<f64> {
    let plane = g.out_h() * g.out_w();
    let klen = g.kernel_len();
    let mut out = vec![0.0; g.filters * plane];
    #[cfg(feature = "parallel")]
    if parallel {
        out.par_chunks_mut(plane).enumerate().for_each(|(f, out_f)| {
            conv_forward_filter(g, input, &kernel[f * klen..(f + 1) * klen], out_f)
        });
        return out;
    }
    let _ = parallel;
    for (f, out_f) in out.chunks_mut(plane).enumerate() {
        conv_forward_filter(g, input, &kernel[f * klen..(f + 1) * klen], out_f);
    }
    out
}

fn conv_kernel_grad_filter(g: &ConvGeometry, input: &[f64], dout_f: &[f64], dk_f: &mut [f64]) {
    let (oh, ow, s) = (g.out_h(), g.out_w(), g.stride);
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for a in 0..g.kernel_h {
            for b in 0..g.kernel_w {
                let mut acc = 0.0;
                for i in 0..oh {
                    let row = &plane[(i * s + a) * g.width..];
                    let drow = &dout_f[i * ow..(i + 1) * ow];
                    for (j, d) in drow.iter().enumerate() {
                        acc += d * row[j * s + b];
                    }
                }
                dk_f[(c * g.kernel_h + a) * g.kernel_w + b] += acc;
            }
        }
    }
}

fn conv_input_grad_channel(g: &ConvGeometry, c: usize, kernel: &[f64], dout: &[f64], din_c: &mut [f64]) {
    let (oh, ow, s) = (g.out_h(), g.out_w(), g.stride);
    let klen = g.kernel_len();
    for f in 0..g.filters {
        let kernel_fc = &kernel[f * klen + c * g.kernel_h * g.kernel_w..];
        let dout_f = &dout[f * oh * ow..(f + 1) * oh * ow];
        for a in 0..g.kernel_h {
            for b in 0..g.kernel_w {
                let k = kernel_fc[a * g.kernel_w + b];
                for i in 0..oh {
                    let row = &mut din_c[(i * s + a) * g.width..];
                    let drow = &dout_f[i * ow..(i + 1) * ow];
                    for (j, d) in drow.iter().enumerate() {
                        row[j * s + b] += k * d;
                    }
                }
            }
        }
    }
}

/// Returns (d input, d kernel) for upstream gradient `dout` [F,H',W'].
pub fn conv2d_backward(
    g: &ConvGeometry,
    input: &[f64],
    kernel: &[f64],
    dout: &[f64],
    parallel: bool,
) -> (Vec<f64>, Vec<f64>) {
    let plane = g.out_h() * g.out_w();
    let klen = g.kernel_len();
    let in_plane = g.height * g.width;
    let mut dk = vec![0.0; g.filters * klen];
    let mut din = vec![0.0; g.channels * in_plane];
    #[cfg(feature = "parallel")]
    if parallel {
        dk.par_chunks_mut(klen).enumerate().for_each(|(f, dk_f)| {
            conv_kernel_grad_filter(g, input, &dout[f * plane..(f + 1) * plane], dk_f)
        });
        din.par_chunks_mut(in_plane)
            .enumerate()
            .for_each(|(c, din_c)| conv_input_grad_channel(g, c, kernel, dout, din_c));
        return (din, dk);
    }
    let _ = parallel;
    for (f, dk_f) in dk.chunks_mut(klen).enumerate() {
        conv_kernel_grad_filter(g, input, &dout[f * plane..(f + 1) * plane], dk_f);
    }
    for (c, din_c) in din.chunks_mut(in_plane).enumerate() {
        conv_input_grad_channel(g, c, kernel, dout, din_c);
    }
    (din, dk)
}

/// Capsule predictions: `u` [N,Din], `w` [N,J,Dout,Din] -> [N,J,Dout].
pub fn capsule_predict(u: &[f64], w: &[f64], n: usize, j: usize, d_out: usize, d_in: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * j * d_out];
    for i in 0..n {
        let ui = &u[i * d_in..(i + 1) * d_in];
        for cls in 0..j {
            for o in 0..d_out {
                let row = &w[((i * j + cls) * d_out + o) * d_in..][..d_in];
                out[(i * j + cls) * d_out + o] = row.iter().zip(ui).map(|(a, b)| a * b).sum();
            }
        }
    }
    out
}

/// Weighted capsule sum: `u_hat` [N,J,D], `coeffs` [N,J] -> [J,D].
pub fn routing_combine(u_hat: &[f64], coeffs: &[f64], n: usize, j: usize, d: usize) -> Vec<f64> {
    let mut s = vec![0.0; j * d];
    for i in 0..n {
        for cls in 0..j {
            let c = coeffs[i * j + cls];
            let pred = &u_hat[(i * j + cls) * d..][..d];
            for (acc, p) in s[cls * d..(cls + 1) * d].iter_mut().zip(pred) {
                *acc += c * p;
            }
        }
    }
    s
}

/// `s ‖s‖ / (1 + ‖s‖²)` applied to each contiguous vector of length `d`.
pub fn squash(x: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (v, s) in out.chunks_mut(d).zip(x.chunks(d)) {
        let n2: f64 = s.iter().map(|a| a * a).sum();
        if n2 == 0.0 {
            continue;
        }
        let n = n2.sqrt();
        let f = n / (1.0 + n2);
        for (o, a) in v.iter_mut().zip(s) {
            *o = f * a;
        }
    }
    out
}

pub fn squash_backward(x: &[f64], dout: &[f64], d: usize) -> Vec<f64> {
    let mut dx = vec![0.0; x.len()];
    for ((g, s), dv) in dx.chunks_mut(d).zip(x.chunks(d)).zip(dout.chunks(d)) {
        let n2: f64 = s.iter().map(|a| a * a).sum();
        if n2 == 0.0 {
            continue;
        }
        let n = n2.sqrt();
        let denom = 1.0 + n2;
        let f = n / denom;
        let df_over_n = (1.0 - n2) / (denom * denom * n);
        let proj: f64 = s.iter().zip(dv).map(|(a, b)| a * b).sum();
        for ((gi, si), dvi) in g.iter_mut().zip(s).zip(dv) {
            *gi = f * dvi + df_over_n * proj * si;
        }
    }
    dx
}

pub fn l2_norms(x: &[f64], d: usize) -> Vec<f64> {
    x.chunks(d)
        .map(|s| s.iter().map(|a| a * a).sum::<f64>().sqrt())
        .collect()
}
