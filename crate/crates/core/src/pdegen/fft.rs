use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Unnormalized forward / inverse transforms of length `n` (inverse divides by n).
pub(crate) struct Fft1 {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex64>,
}

impl Fft1 {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);
        let len = fwd.get_inplace_scratch_len().max(inv.get_inplace_scratch_len());
        Self {
            n,
            fwd,
            inv,
            scratch: vec![Complex64::new(0.0, 0.0); len],
        }
    }

    /// Forward transform of every length-n chunk of `buf`.
    pub fn forward(&mut self, buf: &mut [Complex64]) {
        self.fwd.process_with_scratch(buf, &mut self.scratch);
    }

    pub fn inverse(&mut self, buf: &mut [Complex64]) {
        self.inv.process_with_scratch(buf, &mut self.scratch);
        let s = 1.0 / self.n as f64;
        for v in buf.iter_mut() {
            *v *= s;
        }
    }
}

/// Square n x n transforms, row-major storage.
pub(crate) struct Fft2 {
    n: usize,
    line: Fft1,
    tmp: Vec<Complex64>,
}

impl Fft2 {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            line: Fft1::new(n),
            tmp: vec![Complex64::new(0.0, 0.0); n * n],
        }
    }

    fn transpose(&mut self, buf: &mut [Complex64]) {
        let n = self.n;
        for r in 0..n {
            for c in 0..n {
                self.tmp[c * n + r] = buf[r * n + c];
            }
        }
        buf.copy_from_slice(&self.tmp);
    }

    pub fn forward(&mut self, buf: &mut [Complex64]) {
        self.line.forward(buf);
        self.transpose(buf);
        self.line.forward(buf);
        self.transpose(buf);
    }

    pub fn inverse(&mut self, buf: &mut [Complex64]) {
        self.line.inverse(buf);
        self.transpose(buf);
        self.line.inverse(buf);
        self.transpose(buf);
    }
}

/// Signed integer frequency of FFT bin `m` for length `n`.
pub(crate) fn freq(m: usize, n: usize) -> f64 {
    if m <= n / 2 {
        m as f64
    } else {
        m as f64 - n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_2d() {
        let n = 8;
        let orig: Vec<Complex64> = (0..n * n)
            .map(|i| Complex64::new((i as f64 * 0.37).sin(), 0.0))
            .collect();
        let mut buf = orig.clone();
        let mut f = Fft2::new(n);
        f.forward(&mut buf);
        let dc: f64 = orig.iter().map(|c| c.re).sum();
        assert!((buf[0].re - dc).abs() < 1e-10);
        f.inverse(&mut buf);
        for (a, b) in buf.iter().zip(&orig) {
            assert!((a - b).norm() < 1e-12);
        }
    }
}
