//! Image quality metrics and the variant-by-input report table.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cine::CineSequence;
use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

pub fn rmse(x: &CineSequence, y: &CineSequence) -> Result<f64> {
    x.same_dims(y)?;
    let n = x.data().len() as f64;
    let s: f64 = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((s / n).sqrt())
}

/// PSNR in dB; identical inputs give `f64::INFINITY`.
pub fn psnr(x: &CineSequence, y: &CineSequence, data_range: f64) -> Result<f64> {
    Ok(psnr_from_rmse(rmse(x, y)?, data_range))
}

pub fn psnr_from_rmse(rmse: f64, data_range: f64) -> f64 {
    if rmse == 0.0 {
        f64::INFINITY
    } else {
        20.0 * (data_range / rmse).log10()
    }
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

// Valid-mode separable filtering of one frame.
fn filter_valid(img: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..k).map(|i| g[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all fully contained 11x11 Gaussian windows of every frame.
pub fn ssim(x: &CineSequence, y: &CineSequence, data_range: f64) -> Result<f64> {
    x.same_dims(y)?;
    let (t, h, w) = x.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs frames of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let g = gaussian_window();
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for f in 0..t {
        let (a, b) = (x.frame(f), y.frame(f));
        let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = a.iter().zip(b).map(|(p, q)| p * q).collect();
        let mu_a = filter_valid(a, h, w, &g);
        let mu_b = filter_valid(b, h, w, &g);
        let e_aa = filter_valid(&aa, h, w, &g);
        let e_bb = filter_valid(&bb, h, w, &g);
        let e_ab = filter_valid(&ab, h, w, &g);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quality {
    pub psnr: f64,
    pub rmse: f64,
    pub ssim: f64,
}

pub fn quality(pred: &CineSequence, gt: &CineSequence) -> Result<Quality> {
    let r = rmse(pred, gt)?;
    Ok(Quality {
        psnr: psnr_from_rmse(r, 1.0),
        rmse: r,
        ssim: ssim(pred, gt, 1.0)?,
    })
}

/// Set-level means. PSNR averages finite per-image values; infinite ones
/// are counted separately and the mean is infinite only when every image
/// is exact.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualitySummary {
    #[serde(with = "inf_float")]
    pub psnr: f64,
    pub rmse: f64,
    pub ssim: f64,
    pub n: usize,
    pub n_exact: usize,
}

impl QualitySummary {
    pub fn from_rows(rows: &[Quality]) -> Self {
        let n = rows.len();
        let finite: Vec<f64> = rows
            .iter()
            .map(|q| q.psnr)
            .filter(|p| p.is_finite())
            .collect();
        let mean = |f: &dyn Fn(&Quality) -> f64| {
            if n == 0 {
                f64::NAN
            } else {
                rows.iter().map(f).sum::<f64>() / n as f64
            }
        };
        let psnr = if finite.is_empty() {
            if n == 0 {
                f64::NAN
            } else {
                f64::INFINITY
            }
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        };
        QualitySummary {
            psnr,
            rmse: mean(&|q| q.rmse),
            ssim: mean(&|q| q.ssim),
            n,
            n_exact: n - finite.len(),
        }
    }
}

mod inf_float {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&super::fmt_float(*v, 6))
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum V {
            N(f64),
            S(String),
        }
        match V::deserialize(d)? {
            V::N(v) => Ok(v),
            V::S(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("bad float {other:?}"))),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityRow {
    pub method: String,
    pub corrupted: QualitySummary,
    pub uncorrupted: QualitySummary,
}

fn fmt_float(v: f64, prec: usize) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v:.prec$}")
    }
}

pub fn report_csv(rows: &[QualityRow]) -> String {
    let mut s = String::from(
        "method,corrupted_psnr,corrupted_rmse,corrupted_ssim,uncorrupted_psnr,uncorrupted_rmse,uncorrupted_ssim\n",
    );
    for r in rows {
        let (c, u) = (&r.corrupted, &r.uncorrupted);
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.method,
            fmt_float(c.psnr, 4),
            fmt_float(c.rmse, 6),
            fmt_float(c.ssim, 6),
            fmt_float(u.psnr, 4),
            fmt_float(u.rmse, 6),
            fmt_float(u.ssim, 6)
        )
        .unwrap();
    }
    s
}

pub fn report_text(rows: &[QualityRow]) -> String {
    let name_w = rows
        .iter()
        .map(|r| r.method.len())
        .max()
        .unwrap_or(6)
        .max(6);
    let mut s = String::new();
    writeln!(
        s,
        "{:name_w$} | {:^26} | {:^26}",
        "", "Corrupted", "Uncorrupted"
    )
    .unwrap();
    writeln!(
        s,
        "{:name_w$} | {:>8} {:>8} {:>8} | {:>8} {:>8} {:>8}",
        "Method", "PSNR", "RMSE", "SSIM", "PSNR", "RMSE", "SSIM"
    )
    .unwrap();
    writeln!(s, "{}", "-".repeat(name_w + 58)).unwrap();
    for r in rows {
        let (c, u) = (&r.corrupted, &r.uncorrupted);
        writeln!(
            s,
            "{:name_w$} | {:>8} {:>8} {:>8} | {:>8} {:>8} {:>8}",
            r.method,
            fmt_float(c.psnr, 2),
            fmt_float(c.rmse, 4),
            fmt_float(c.ssim, 4),
            fmt_float(u.psnr, 2),
            fmt_float(u.rmse, 4),
            fmt_float(u.ssim, 4)
        )
        .unwrap();
    }
    s
}

/// 8-bit binary PGM of one frame; values are clamped to [0, 1].
pub fn write_pgm(path: &Path, frame: &[f64], height: usize, width: usize) -> Result<()> {
    if frame.len() != height * width {
        return Err(Error::invalid("frame length does not match PGM size"));
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(
        frame
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Clean / corrupted / corrected / |difference| panels of one frame.
pub fn dump_panels(
    dir: &Path,
    stem: &str,
    frame: usize,
    clean: &CineSequence,
    corrupted: &CineSequence,
    corrected: &CineSequence,
) -> Result<()> {
    clean.same_dims(corrupted)?;
    clean.same_dims(corrected)?;
    let (_, h, w) = clean.dims();
    let diff: Vec<f64> = corrected
        .frame(frame)
        .iter()
        .zip(clean.frame(frame))
        .map(|(a, b)| (a - b).abs())
        .collect();
    write_pgm(
        &dir.join(format!("{stem}_clean.pgm")),
        clean.frame(frame),
        h,
        w,
    )?;
    write_pgm(
        &dir.join(format!("{stem}_corrupted.pgm")),
        corrupted.frame(frame),
        h,
        w,
    )?;
    write_pgm(
        &dir.join(format!("{stem}_corrected.pgm")),
        corrected.frame(frame),
        h,
        w,
    )?;
    write_pgm(&dir.join(format!("{stem}_absdiff.pgm")), &diff, h, w)
}
