//! Intensity normalisation and motion-based ROI localisation.
//!
//! Pixels that move periodically with the heart carry energy at the
//! fundamental temporal frequency. A circular Hough transform over the
//! strongest such pixels finds the ventricle centre, around which a square
//! window is cropped.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::cine::CineSequence;
use crate::error::{Error, Result};

pub fn normalize(seq: &CineSequence) -> Result<CineSequence> {
    let (lo, hi) = seq
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if !(hi > lo) {
        return Err(Error::DegenerateInput(
            "cannot normalise a constant sequence".into(),
        ));
    }
    let (t, h, w) = seq.dims();
    let span = hi - lo;
    CineSequence::new(
        t,
        h,
        w,
        seq.data().iter().map(|&v| (v - lo) / span).collect(),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct HarmonicMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl HarmonicMap {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Magnitude of the unnormalised temporal DFT coefficient `k` per pixel.
pub fn temporal_harmonic_map(seq: &CineSequence, k: usize) -> Result<HarmonicMap> {
    let (t, h, w) = seq.dims();
    if t < 4 {
        return Err(Error::invalid(format!(
            "harmonic map needs T >= 4, got {t}"
        )));
    }
    let twiddle: Vec<(f64, f64)> = (0..t)
        .map(|i| {
            let a = -2.0 * PI * (k * i % t) as f64 / t as f64;
            (a.cos(), a.sin())
        })
        .collect();
    let mut re = vec![0.0; h * w];
    let mut im = vec![0.0; h * w];
    for (i, &(c, s)) in twiddle.iter().enumerate() {
        for (p, &v) in seq.frame(i).iter().enumerate() {
            re[p] += v * c;
            im[p] += v * s;
        }
    }
    Ok(HarmonicMap {
        height: h,
        width: w,
        data: re.iter().zip(&im).map(|(a, b)| a.hypot(*b)).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Circle {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
    pub score: f64,
}

/// Value at quantile `q` using the nearest-rank rule.
fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let idx = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
    v[idx]
}

/// Circular Hough transform over pixels at or above the 90th percentile of
/// the map. Each edge pixel votes once per candidate centre per radius; the
/// winner is the accumulator maximum, ties going to the smaller radius and
/// then to row-major order.
pub fn hough_circle_center(map: &HarmonicMap, r_min: usize, r_max: usize) -> Result<Circle> {
    let (h, w) = (map.height, map.width);
    let limit = h.min(w) as f64 / 2.0;
    if r_min <= 2 || r_min > r_max || r_max as f64 >= limit {
        return Err(Error::invalid(format!(
            "radii {r_min}..={r_max} must lie in (2, {limit})"
        )));
    }
    let thr = quantile(&map.data, 0.9);
    let edges: Vec<(usize, usize)> = (0..h * w)
        .filter(|&p| map.data[p] >= thr && map.data[p] > 0.0)
        .map(|p| (p / w, p % w))
        .collect();
    if edges.is_empty() {
        return Err(Error::DegenerateInput(
            "harmonic map has no edge pixels".into(),
        ));
    }
    let mut best: Option<(u32, usize, usize)> = None;
    let mut acc = vec![0u32; h * w];
    let mut cells: Vec<usize> = Vec::new();
    for r in r_min..=r_max {
        acc.fill(0);
        let n_ang = (4.0 * PI * r as f64).ceil() as usize;
        let offsets: Vec<(isize, isize)> = {
            let mut o: Vec<(isize, isize)> = (0..n_ang)
                .map(|i| {
                    let a = 2.0 * PI * i as f64 / n_ang as f64;
                    (
                        (r as f64 * a.sin()).round() as isize,
                        (r as f64 * a.cos()).round() as isize,
                    )
                })
                .collect();
            o.sort_unstable();
            o.dedup();
            o
        };
        for &(y, x) in &edges {
            cells.clear();
            for &(dy, dx) in &offsets {
                let (cy, cx) = (y as isize - dy, x as isize - dx);
                if cy >= 0 && cx >= 0 && (cy as usize) < h && (cx as usize) < w {
                    cells.push(cy as usize * w + cx as usize);
                }
            }
            for &c in &cells {
                acc[c] += 1;
            }
        }
        for (p, &v) in acc.iter().enumerate() {
            if best.is_none_or(|(b, _, _)| v > b) {
                best = Some((v, r, p));
            }
        }
    }
    let (score, r, p) = best.expect("non-empty radius range");
    Ok(Circle {
        cx: (p % w) as f64,
        cy: (p / w) as f64,
        r: r as f64,
        score: score as f64,
    })
}

/// Top-left corner of a `size` window centred on `c`, shifted inward at the
/// borders.
pub fn crop_origin(center: f64, size: usize, extent: usize) -> usize {
    let start = center.round() as i64 - (size / 2) as i64;
    start.clamp(0, (extent - size) as i64) as usize
}

pub fn crop_roi(seq: &CineSequence, center: (f64, f64), size: usize) -> Result<CineSequence> {
    let (t, h, w) = seq.dims();
    if size == 0 || !size.is_multiple_of(2) {
        return Err(Error::invalid(format!("ROI size {size} must be even")));
    }
    if size > h.min(w) {
        return Err(Error::invalid(format!(
            "ROI size {size} exceeds image {h}x{w}"
        )));
    }
    let x0 = crop_origin(center.0, size, w);
    let y0 = crop_origin(center.1, size, h);
    let mut out = CineSequence::zeros(t, size, size);
    for f in 0..t {
        let src = seq.frame(f);
        let dst = out.frame_mut(f);
        for y in 0..size {
            dst[y * size..(y + 1) * size]
                .copy_from_slice(&src[(y0 + y) * w + x0..(y0 + y) * w + x0 + size]);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiConfig {
    pub size: usize,
    pub harmonic: usize,
    pub r_min: usize,
    pub r_max: usize,
}

impl RoiConfig {
    pub fn for_size(size: usize) -> Self {
        RoiConfig {
            size,
            harmonic: 1,
            r_min: (size / 16).max(3),
            r_max: (size * 3 / 8).max(4),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RoiResult {
    pub circle: Circle,
    pub origin: (usize, usize),
    pub cropped: CineSequence,
}

/// Normalise, locate the moving structure and crop around it.
pub fn extract_roi(seq: &CineSequence, cfg: &RoiConfig) -> Result<RoiResult> {
    let norm = normalize(seq)?;
    let map = temporal_harmonic_map(&norm, cfg.harmonic)?;
    let r_max = cfg.r_max.min((norm.height().min(norm.width()) - 1) / 2);
    let circle = hough_circle_center(&map, cfg.r_min, r_max)?;
    let cropped = crop_roi(&norm, (circle.cx, circle.cy), cfg.size)?;
    Ok(RoiResult {
        circle,
        origin: (
            crop_origin(circle.cx, cfg.size, norm.width()),
            crop_origin(circle.cy, cfg.size, norm.height()),
        ),
        cropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, random_params, PhantomParams, PhantomRanges};

    fn ring_map(h: usize, w: usize, rings: &[(f64, f64, f64, f64)]) -> HarmonicMap {
        // (cx, cy, r, fraction of the circumference drawn)
        let mut data = vec![0.0; h * w];
        for &(cx, cy, r, frac) in rings {
            let n = 2000;
            for i in 0..((n as f64 * frac) as usize) {
                let a = 2.0 * PI * i as f64 / n as f64;
                let x = (cx + r * a.cos()).round() as usize;
                let y = (cy + r * a.sin()).round() as usize;
                data[y * w + x] = 1.0;
            }
        }
        HarmonicMap {
            height: h,
            width: w,
            data,
        }
    }

    #[test]
    fn normalize_examples() {
        let s = CineSequence::new(1, 1, 3, vec![2.0, 4.0, 6.0]).unwrap();
        assert_eq!(normalize(&s).unwrap().data(), &[0.0, 0.5, 1.0]);
        let u = CineSequence::new(1, 1, 3, vec![0.0, 0.3, 1.0]).unwrap();
        assert_eq!(normalize(&u).unwrap(), u);
        let once = normalize(&s).unwrap();
        assert_eq!(normalize(&once).unwrap(), once);
        let c = CineSequence::new(1, 1, 2, vec![3.0, 3.0]).unwrap();
        assert!(matches!(normalize(&c), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn harmonic_of_static_is_zero_and_single_tone_is_exact() {
        let (t, h, w) = (8, 2, 2);
        let mut s = CineSequence::zeros(t, h, w);
        for f in 0..t {
            let fr = s.frame_mut(f);
            fr[0] = 0.3;
            fr[3] = 0.5 + 0.2 * (2.0 * PI * f as f64 / t as f64).sin();
        }
        let m = temporal_harmonic_map(&s, 1).unwrap();
        assert!(m.at(0, 0).abs() < 1e-12);
        assert!((m.at(1, 1) - 0.2 * t as f64 / 2.0).abs() < 1e-12);
        assert!(temporal_harmonic_map(&CineSequence::zeros(3, 2, 2), 1).is_err());
    }

    #[test]
    fn harmonic_ignores_per_pixel_offsets() {
        let p = PhantomParams {
            height: 32,
            width: 32,
            frames: 10,
            center: (16.0, 16.0),
            body_axes: (14.0, 13.0),
            epi_radius: 9.0,
            endo_radius_base: 5.0,
            contraction_amplitude: 1.5,
            ..PhantomParams::default()
        };
        let s = generate_phantom(&p).unwrap();
        let mut shifted = s.clone();
        for f in 0..s.frames() {
            for (i, v) in shifted.frame_mut(f).iter_mut().enumerate() {
                *v += (i % 7) as f64 * 0.1;
            }
        }
        let a = temporal_harmonic_map(&s, 1).unwrap();
        let b = temporal_harmonic_map(&shifted, 1).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn phantom_harmonic_peaks_near_endocardium() {
        let p = PhantomParams {
            texture_sigma: 0.0,
            ..PhantomParams::default()
        };
        let s = generate_phantom(&p).unwrap();
        let m = temporal_harmonic_map(&s, 1).unwrap();
        let (arg, _) =
            m.data
                .iter()
                .enumerate()
                .fold((0, f64::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
        let (y, x) = ((arg / 64) as f64, (arg % 64) as f64);
        let d = ((x - p.center.0).powi(2) + (y - p.center.1).powi(2)).sqrt();
        assert!((d - p.endo_radius_base).abs() <= 2.0, "argmax radius {d}");
    }

    #[test]
    fn hough_finds_a_ring() {
        let m = ring_map(64, 64, &[(20.0, 30.0, 10.0, 1.0)]);
        let c = hough_circle_center(&m, 4, 20).unwrap();
        assert!(
            (c.cx - 20.0).abs() <= 1.0 && (c.cy - 30.0).abs() <= 1.0,
            "{c:?}"
        );
        assert!((c.r - 10.0).abs() <= 1.0);
    }

    #[test]
    fn stronger_ring_wins() {
        let m = ring_map(64, 64, &[(18.0, 18.0, 8.0, 0.5), (44.0, 42.0, 8.0, 1.0)]);
        let c = hough_circle_center(&m, 4, 12).unwrap();
        assert!(
            (c.cx - 44.0).abs() <= 1.0 && (c.cy - 42.0).abs() <= 1.0,
            "{c:?}"
        );
    }

    #[test]
    fn hough_rejects_bad_input() {
        let z = HarmonicMap {
            height: 16,
            width: 16,
            data: vec![0.0; 256],
        };
        assert!(matches!(
            hough_circle_center(&z, 3, 6),
            Err(Error::DegenerateInput(_))
        ));
        assert!(hough_circle_center(&z, 2, 6).is_err());
        assert!(hough_circle_center(&z, 3, 8).is_err());
    }

    #[test]
    fn phantom_center_recovered() {
        let p = PhantomParams::default();
        let s = generate_phantom(&p).unwrap();
        let m = temporal_harmonic_map(&s, 1).unwrap();
        let c = hough_circle_center(&m, 4, 24).unwrap();
        assert!(
            (c.cx - 32.0).abs() <= 2.0 && (c.cy - 32.0).abs() <= 2.0,
            "{c:?}"
        );
    }

    #[test]
    fn crop_rules() {
        let mut s = CineSequence::zeros(2, 64, 64);
        s.data_mut()
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = i as f64);
        assert_eq!(crop_roi(&s, (32.0, 32.0), 64).unwrap(), s);
        let mut big = CineSequence::zeros(1, 100, 100);
        big.data_mut()
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = i as f64);
        let c = crop_roi(&big, (5.0, 5.0), 64).unwrap();
        assert_eq!(c.at(0, 0, 0), 0.0);
        assert_eq!(c.at(0, 63, 63), (63 * 100 + 63) as f64);
        let again = crop_roi(&c, (5.0, 5.0), 64).unwrap();
        assert_eq!(again, c);
        assert!(crop_roi(&big, (5.0, 5.0), 102).is_err());
        assert!(crop_roi(&big, (5.0, 5.0), 63).is_err());
    }

    #[test]
    fn roi_contains_epicardium_on_random_phantoms() {
        let (canvas, size) = (96, 64);
        let mut ranges = PhantomRanges::for_size(size);
        ranges.center_jitter = 12.0;
        let cfg = RoiConfig::for_size(size);
        let mut ok = 0;
        for s in 0..100 {
            let p = random_params(canvas, canvas, 20, &ranges, 11, s).unwrap();
            let seq = generate_phantom(&p).unwrap();
            let r = extract_roi(&seq, &cfg).unwrap();
            let (x0, y0) = (r.origin.0 as f64, r.origin.1 as f64);
            let inside = p.center.0 - p.epi_radius >= x0
                && p.center.0 + p.epi_radius <= x0 + size as f64
                && p.center.1 - p.epi_radius >= y0
                && p.center.1 + p.epi_radius <= y0 + size as f64;
            ok += inside as usize;
        }
        assert!(ok >= 95, "{ok}/100");
    }
}
