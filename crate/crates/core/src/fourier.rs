//! Centered, orthonormal 2D DFTs per frame.
//!
//! The DC coefficient sits at `(H/2, W/2)` and both directions scale by
//! `1/sqrt(H*W)`, so the transform is unitary. A k-space *line* is one row
//! at fixed phase-encode index `ky` (the image row axis).

use std::cell::RefCell;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::cine::CineSequence;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Complex `[T, H, W]` sequence of centered 2D spectra.
#[derive(Clone, Debug, PartialEq)]
pub struct KSpaceSequence {
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<Complex64>,
}

impl KSpaceSequence {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<Complex64>) -> Result<Self> {
        if frames * height * width != data.len() {
            return Err(Error::invalid(format!(
                "k-space {frames}x{height}x{width} needs {} values, got {}",
                frames * height * width,
                data.len()
            )));
        }
        Ok(KSpaceSequence {
            frames,
            height,
            width,
            data,
        })
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        KSpaceSequence {
            frames,
            height,
            width,
            data: vec![Complex64::new(0.0, 0.0); frames * height * width],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.frames, self.height, self.width)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    fn check_line(&self, t: usize, ky: usize) -> Result<usize> {
        if t >= self.frames || ky >= self.height {
            return Err(Error::invalid(format!(
                "line (t={t}, ky={ky}) outside {}x{} frames/lines",
                self.frames, self.height
            )));
        }
        Ok((t * self.height + ky) * self.width)
    }

    /// Row `ky` of frame `t`.
    pub fn line(&self, t: usize, ky: usize) -> Result<&[Complex64]> {
        let off = self.check_line(t, ky)?;
        Ok(&self.data[off..off + self.width])
    }

    pub fn line_mut(&mut self, t: usize, ky: usize) -> Result<&mut [Complex64]> {
        let off = self.check_line(t, ky)?;
        Ok(&mut self.data[off..off + self.width])
    }

    pub fn frame(&self, t: usize) -> &[Complex64] {
        let n = self.height * self.width;
        &self.data[t * n..(t + 1) * n]
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(n: usize, dir: Direction) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        match dir {
            Direction::Forward => p.plan_fft_forward(n),
            Direction::Inverse => p.plan_fft_inverse(n),
        }
    })
}

pub(crate) fn check_even(height: usize, width: usize) -> Result<()> {
    if height < 2 || width < 2 || !height.is_multiple_of(2) || !width.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "frame size {height}x{width} must be even and at least 2x2"
        )));
    }
    Ok(())
}

/// In-place centered orthonormal 2D DFT of every `height x width` frame in
/// `data`. Dimensions must be even.
pub fn fft2c(data: &mut [Complex64], height: usize, width: usize, dir: Direction) {
    let n = height * width;
    debug_assert_eq!(data.len() % n, 0);
    let row_fft = plan(width, dir);
    let col_fft = plan(height, dir);
    let scale = 1.0 / (n as f64).sqrt();
    let (hh, hw) = (height / 2, width / 2);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![
        Complex64::new(0.0, 0.0);
        row_fft
            .get_inplace_scratch_len()
            .max(col_fft.get_inplace_scratch_len())
    ];
    let mut col = vec![Complex64::new(0.0, 0.0); height];
    for frame in data.chunks_mut(n) {
        // ifftshift (identical to fftshift for even sizes)
        for y in 0..height {
            let sy = (y + hh) % height;
            for x in 0..width {
                buf[y * width + x] = frame[sy * width + (x + hw) % width];
            }
        }
        for row in buf.chunks_mut(width) {
            row_fft.process_with_scratch(row, &mut scratch);
        }
        for x in 0..width {
            for y in 0..height {
                col[y] = buf[y * width + x];
            }
            col_fft.process_with_scratch(&mut col, &mut scratch);
            for y in 0..height {
                buf[y * width + x] = col[y];
            }
        }
        for y in 0..height {
            let sy = (y + hh) % height;
            for x in 0..width {
                frame[y * width + x] = buf[sy * width + (x + hw) % width] * scale;
            }
        }
    }
}

pub fn to_kspace(seq: &CineSequence) -> Result<KSpaceSequence> {
    let (t, h, w) = seq.dims();
    check_even(h, w)?;
    let mut data: Vec<Complex64> = seq.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2c(&mut data, h, w, Direction::Forward);
    KSpaceSequence::new(t, h, w, data)
}

/// Inverse transform keeping the complex image.
pub fn from_kspace_complex(ks: &KSpaceSequence) -> Vec<Complex64> {
    let mut data = ks.data().to_vec();
    fft2c(&mut data, ks.height(), ks.width(), Direction::Inverse);
    data
}

/// Inverse transform, emitting the real part.
pub fn from_kspace(ks: &KSpaceSequence) -> CineSequence {
    let (t, h, w) = ks.dims();
    let data = from_kspace_complex(ks).into_iter().map(|c| c.re).collect();
    CineSequence::new(t, h, w, data).expect("dims preserved")
}

pub fn complex_to_kspace(
    frames: usize,
    height: usize,
    width: usize,
    image: &[Complex64],
) -> Result<KSpaceSequence> {
    check_even(height, width)?;
    let mut data = image.to_vec();
    fft2c(&mut data, height, width, Direction::Forward);
    KSpaceSequence::new(frames, height, width, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn random_seq(t: usize, h: usize, w: usize, seed: u64) -> CineSequence {
        let mut r = rng::stream(seed, &[]);
        CineSequence::new(t, h, w, (0..t * h * w).map(|_| r.random::<f64>()).collect()).unwrap()
    }

    /// Direct O(N^2) centered DFT used as an independent reference.
    fn naive_centered_dft(frame: &[f64], h: usize, w: usize) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); h * w];
        let scale = 1.0 / ((h * w) as f64).sqrt();
        for ky in 0..h {
            for kx in 0..w {
                let (fy, fx) = (ky as f64 - (h / 2) as f64, kx as f64 - (w / 2) as f64);
                let mut acc = Complex64::new(0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let (py, px) = (y as f64 - (h / 2) as f64, x as f64 - (w / 2) as f64);
                        let ang =
                            -2.0 * std::f64::consts::PI * (fy * py / h as f64 + fx * px / w as f64);
                        acc += Complex64::from_polar(frame[y * w + x], ang);
                    }
                }
                out[ky * w + kx] = acc * scale;
            }
        }
        out
    }

    #[test]
    fn matches_naive_dft() {
        let seq = random_seq(2, 8, 6, 11);
        let ks = to_kspace(&seq).unwrap();
        for t in 0..2 {
            let reference = naive_centered_dft(seq.frame(t), 8, 6);
            for (a, b) in ks.frame(t).iter().zip(&reference) {
                assert!((a - b).norm() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn constant_frame_is_dc_only() {
        let seq = CineSequence::new(1, 64, 64, vec![1.0; 64 * 64]).unwrap();
        let ks = to_kspace(&seq).unwrap();
        for ky in 0..64 {
            for (kx, v) in ks.line(0, ky).unwrap().iter().enumerate() {
                if ky == 32 && kx == 32 {
                    assert!((v - Complex64::new(64.0, 0.0)).norm() < 1e-12);
                } else {
                    assert!(v.norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn centered_impulse_is_flat() {
        let (h, w) = (16, 8);
        let mut seq = CineSequence::zeros(1, h, w);
        seq.frame_mut(0)[(h / 2) * w + w / 2] = 1.0;
        let ks = to_kspace(&seq).unwrap();
        let expect = 1.0 / ((h * w) as f64).sqrt();
        for v in ks.data() {
            assert!((v.re - expect).abs() < 1e-14 && v.im.abs() < 1e-14);
        }
    }

    #[test]
    fn zeros_round_trip_to_zeros() {
        let ks = KSpaceSequence::zeros(3, 8, 8);
        assert!(from_kspace(&ks).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn parseval_and_round_trip() {
        let seq = random_seq(5, 32, 16, 3);
        let ks = to_kspace(&seq).unwrap();
        let e_img: f64 = seq.data().iter().map(|v| v * v).sum();
        let e_k: f64 = ks.data().iter().map(|v| v.norm_sqr()).sum();
        assert!(((e_img - e_k) / e_img).abs() < 1e-10);
        let back = from_kspace(&ks);
        let mse: f64 = back
            .data()
            .iter()
            .zip(seq.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / seq.data().len() as f64;
        assert!(mse.sqrt() < 1e-9);
    }

    #[test]
    fn real_input_is_conjugate_symmetric() {
        let (h, w) = (8, 8);
        let ks = to_kspace(&random_seq(1, h, w, 5)).unwrap();
        let f = ks.frame(0);
        for ky in 1..h {
            for kx in 1..w {
                // index k <-> 2*center - k (mod size) with center = size/2
                let (my, mx) = (h - ky, w - kx);
                assert!((f[ky * w + kx] - f[my * w + mx].conj()).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn odd_sizes_are_rejected() {
        assert!(to_kspace(&CineSequence::zeros(1, 7, 8)).is_err());
        assert!(to_kspace(&CineSequence::zeros(1, 8, 1)).is_err());
    }

    #[test]
    fn line_view_reads_back_writes() {
        let mut ks = KSpaceSequence::zeros(2, 4, 4);
        let vals = [Complex64::new(1.0, 2.0); 4];
        ks.line_mut(1, 3).unwrap().copy_from_slice(&vals);
        assert_eq!(ks.line(1, 3).unwrap(), &vals);
        assert!(ks.line(2, 0).is_err());
        assert!(ks.line(0, 4).is_err());
    }

    #[test]
    fn identical_frames_have_identical_lines() {
        let one = random_seq(1, 8, 8, 9);
        let mut two = one.data().to_vec();
        two.extend_from_slice(one.data());
        let ks = to_kspace(&CineSequence::new(2, 8, 8, two).unwrap()).unwrap();
        for ky in 0..8 {
            assert_eq!(ks.line(0, ky).unwrap(), ks.line(1, ky).unwrap());
        }
    }
}
