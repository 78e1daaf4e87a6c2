//! Butterworth IIR design (bilinear transform with prewarping) and
//! zero-phase filtering in second-order sections.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};

/// One biquad `b0 + b1 z⁻¹ + b2 z⁻² / (1 + a1 z⁻¹ + a2 z⁻²)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    fn response(&self, z: Complex64) -> Complex64 {
        let zi = z.inv();
        let num = self.b[0] + zi * (self.b[1] + zi * self.b[2]);
        let den = 1.0 + zi * (self.a[0] + zi * self.a[1]);
        num / den
    }

    /// DC gain `H(1)`.
    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// Direct-form-II-transposed state for a unit step in steady state.
    fn step_state(&self) -> [f64; 2] {
        let g = self.dc_gain();
        let z1 = self.b[2] - self.a[1] * g;
        let z0 = self.b[1] - self.a[0] * g + z1;
        [z0, z1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sos {
    pub sections: Vec<Biquad>,
}

impl Sos {
    pub fn response(&self, freq_hz: f64, fs: f64) -> Complex64 {
        let z = Complex64::from_polar(1.0, 2.0 * PI * freq_hz / fs);
        self.sections.iter().map(|s| s.response(z)).product()
    }

    /// `|H(f)|` of a single (one-directional) pass.
    pub fn magnitude(&self, freq_hz: f64, fs: f64) -> f64 {
        self.response(freq_hz, fs).norm()
    }

    /// Filters `x` causally starting from state `zi` scaled by `x[0]`.
    fn filter_from_steady(&self, x: &mut [f64]) {
        let Some(&x0) = x.first() else { return };
        let mut scale = x0;
        for s in &self.sections {
            let st = s.step_state();
            let (mut z0, mut z1) = (st[0] * scale, st[1] * scale);
            let [b0, b1, b2] = s.b;
            let [a1, a2] = s.a;
            for v in x.iter_mut() {
                let xi = *v;
                let y = b0 * xi + z0;
                z0 = b1 * xi - a1 * y + z1;
                z1 = b2 * xi - a2 * y;
                *v = y;
            }
            scale *= s.dc_gain();
        }
    }

    fn pad_len(&self, n: usize) -> usize {
        (3 * (2 * self.sections.len() + 1)).min(n.saturating_sub(1))
    }

    /// Forward then backward pass over an odd-extended copy of `x`.
    fn forward_backward(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        let pad = self.pad_len(n);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
        self.filter_from_steady(&mut ext);
        ext.reverse();
        self.filter_from_steady(&mut ext);
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }

    /// Zero-phase filtering with magnitude `|H|²`.
    ///
    /// The forward-backward pass is averaged with its mirror image (filter the
    /// reversed signal, reverse back), which makes the result exactly
    /// reversal-equivariant rather than only approximately so near the edges.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        if x.is_empty() {
            return Vec::new();
        }
        let a = self.forward_backward(x);
        let mut rev = x.to_vec();
        rev.reverse();
        let mut b = self.forward_backward(&rev);
        b.reverse();
        a.iter().zip(&b).map(|(u, v)| 0.5 * (u + v)).collect()
    }
}

fn prototype_poles(order: usize) -> Vec<Complex64> {
    (0..order)
        .map(|k| {
            let theta = PI * (2 * k + order + 1) as f64 / (2 * order) as f64;
            Complex64::from_polar(1.0, theta)
        })
        .collect()
}

fn bilinear(p: Complex64, fs: f64) -> Complex64 {
    let fs2 = 2.0 * fs;
    (fs2 + p) / (fs2 - p)
}

fn prewarp(f: f64, fs: f64) -> f64 {
    2.0 * fs * (PI * f / fs).tan()
}

/// Groups digital poles into conjugate pairs (upper-half-plane member first)
/// and real poles.
fn split_poles(poles: &[Complex64]) -> (Vec<Complex64>, Vec<f64>) {
    let mut upper = Vec::new();
    let mut real = Vec::new();
    for p in poles {
        if p.im.abs() <= 1e-12 * p.norm().max(1.0) {
            real.push(p.re);
        } else if p.im > 0.0 {
            upper.push(*p);
        }
    }
    (upper, real)
}

fn check_order(order: usize) -> Result<()> {
    if order == 0 || order % 2 != 0 {
        return Err(Error::invalid(
            "butterworth",
            format!("order {order} must be even and > 0"),
        ));
    }
    Ok(())
}

/// Low-pass Butterworth of even `order`, unity DC gain.
pub fn butter_lowpass(order: usize, cutoff_hz: f64, fs: f64) -> Result<Sos> {
    check_order(order)?;
    if !(cutoff_hz > 0.0 && cutoff_hz < fs / 2.0) {
        return Err(Error::invalid(
            "butterworth",
            format!("cutoff {cutoff_hz} Hz outside (0, {}) Hz", fs / 2.0),
        ));
    }
    let wc = prewarp(cutoff_hz, fs);
    let poles: Vec<_> = prototype_poles(order)
        .into_iter()
        .map(|p| bilinear(p * wc, fs))
        .collect();
    let (upper, _) = split_poles(&poles);
    let sections = upper
        .into_iter()
        .map(|p| {
            let a = [-2.0 * p.re, p.norm_sqr()];
            let g = (1.0 + a[0] + a[1]) / 4.0;
            Biquad {
                b: [g, 2.0 * g, g],
                a,
            }
        })
        .collect();
    Ok(Sos { sections })
}

/// Band-pass Butterworth from a low-pass prototype of even `order` (the
/// digital filter has `2·order` poles); unity gain at the geometric centre.
pub fn butter_bandpass(order: usize, low_hz: f64, high_hz: f64, fs: f64) -> Result<Sos> {
    check_order(order)?;
    if !(low_hz > 0.0 && low_hz < high_hz && high_hz < fs / 2.0) {
        return Err(Error::invalid(
            "bandpass",
            format!("band {low_hz}-{high_hz} Hz invalid for {fs} Hz sampling (need 0 < low < high < {})", fs / 2.0),
        ));
    }
    let (w1, w2) = (prewarp(low_hz, fs), prewarp(high_hz, fs));
    let (w0, bw) = ((w1 * w2).sqrt(), w2 - w1);
    let mut poles = Vec::with_capacity(2 * order);
    for p in prototype_poles(order) {
        let half = p * (bw / 2.0);
        let disc = (half * half - w0 * w0).sqrt();
        poles.push(bilinear(half + disc, fs));
        poles.push(bilinear(half - disc, fs));
    }
    let (upper, real) = split_poles(&poles);
    if !real.is_empty() {
        return Err(Error::invalid(
            "bandpass",
            "band too wide for a biquad decomposition",
        ));
    }
    // Analog centre frequency maps back to this digital frequency.
    let centre = Complex64::from_polar(1.0, 2.0 * (w0 / (2.0 * fs)).atan());
    let sections = upper
        .into_iter()
        .map(|p| {
            let mut s = Biquad {
                b: [1.0, 0.0, -1.0],
                a: [-2.0 * p.re, p.norm_sqr()],
            };
            let g = 1.0 / s.response(centre).norm();
            s.b = [g, 0.0, -g];
            s
        })
        .collect();
    Ok(Sos { sections })
}
