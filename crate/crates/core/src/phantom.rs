//! Synthetic beating-heart cine phantoms.
//!
//! Each frame is a body ellipse containing a myocardial annulus whose inner
//! (endocardial) radius follows `r0 + a*sin(2*pi*t/T + phase)`, with a blood
//! pool inside. Edges are rendered with one-pixel linear coverage so that
//! images vary continuously with the radius, and a static smoothed-noise
//! tissue texture gives every k-space line broadband content.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cine::CineSequence;
use crate::error::{Error, Result};
use crate::io::CktTensor;
use crate::rng::{self, tag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intensities {
    pub background: f64,
    pub body: f64,
    pub myocardium: f64,
    pub blood_pool: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    /// Ventricle centre `(cx, cy)` in pixels.
    pub center: (f64, f64),
    /// Body ellipse semi-axes `(ax, ay)`, centred on the grid.
    pub body_axes: (f64, f64),
    pub epi_radius: f64,
    pub endo_radius_base: f64,
    pub contraction_amplitude: f64,
    pub phase: f64,
    pub intensities: Intensities,
    pub texture_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            height: 64,
            width: 64,
            frames: 50,
            center: (32.0, 32.0),
            body_axes: (29.0, 26.0),
            epi_radius: 18.0,
            endo_radius_base: 10.0,
            contraction_amplitude: 3.0,
            phase: 0.0,
            intensities: Intensities {
                background: 0.05,
                body: 0.4,
                myocardium: 0.2,
                blood_pool: 0.9,
            },
            texture_sigma: 0.04,
            seed: 0,
        }
    }
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        let half = self.height.min(self.width) as f64 / 2.0;
        let (r0, a, re) = (
            self.endo_radius_base,
            self.contraction_amplitude,
            self.epi_radius,
        );
        if self.frames == 0 || self.height < 2 || self.width < 2 {
            return Err(Error::invalid("phantom needs at least one 2x2 frame"));
        }
        if !(a >= 0.0 && r0 - a > 0.0) {
            return Err(Error::invalid(format!(
                "endocardial radius {r0} must exceed contraction amplitude {a} >= 0"
            )));
        }
        if !(r0 + a < re && re < half) {
            return Err(Error::invalid(format!(
                "radii must satisfy r0 + a ({}) < r_epi ({re}) < min(H,W)/2 ({half})",
                r0 + a
            )));
        }
        let i = &self.intensities;
        for (name, v) in [
            ("background", i.background),
            ("body", i.body),
            ("myocardium", i.myocardium),
            ("blood_pool", i.blood_pool),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!(
                    "{name} intensity {v} outside [0, 1]"
                )));
            }
        }
        if !(self.texture_sigma >= 0.0) || self.body_axes.0 <= 0.0 || self.body_axes.1 <= 0.0 {
            return Err(Error::invalid(
                "texture sigma and body axes must be non-negative",
            ));
        }
        Ok(())
    }

    /// Endocardial radius at frame `t` (any integer, so wrap-around can be
    /// checked).
    pub fn endo_radius(&self, t: i64) -> f64 {
        self.endo_radius_base
            + self.contraction_amplitude
                * (2.0 * PI * t as f64 / self.frames as f64 + self.phase).sin()
    }
}

#[inline]
fn coverage(radius: f64, dist: f64) -> f64 {
    (radius - dist + 0.5).clamp(0.0, 1.0)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable blur with clamped borders.
pub(crate) fn blur(img: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| {
                    let xx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                    kv * img[y * w + xx]
                })
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| {
                    let yy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                    kv * tmp[yy * w + x]
                })
                .sum();
        }
    }
    out
}

fn texture(p: &PhantomParams) -> Vec<f64> {
    let (h, w) = (p.height, p.width);
    if p.texture_sigma == 0.0 {
        return vec![0.0; h * w];
    }
    let mut r = rng::stream(p.seed, &[tag::PHANTOM]);
    let noise: Vec<f64> = (0..h * w).map(|_| StandardNormal.sample(&mut r)).collect();
    let smooth = blur(&noise, h, w, 1.0);
    let mean = smooth.iter().sum::<f64>() / smooth.len() as f64;
    let std =
        (smooth.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / smooth.len() as f64).sqrt();
    smooth
        .into_iter()
        .map(|v| (v - mean) / std.max(1e-12) * p.texture_sigma)
        .collect()
}

fn render(p: &PhantomParams, tex: &[f64], t: i64, out: &mut [f64]) {
    let (h, w) = (p.height, p.width);
    let (bx, by) = (w as f64 / 2.0, h as f64 / 2.0);
    let (ax, ay) = p.body_axes;
    let (cx, cy) = p.center;
    let r_t = p.endo_radius(t);
    let i = &p.intensities;
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64, y as f64);
            let e = (((fx - bx) / ax).powi(2) + ((fy - by) / ay).powi(2)).sqrt();
            let cov_body = ((1.0 - e) * ax.min(ay) + 0.5).clamp(0.0, 1.0);
            let d = ((fx - cx).powi(2) + (fy - cy).powi(2)).sqrt();
            let mut v = i.background + cov_body * (i.body - i.background);
            v += coverage(p.epi_radius, d) * (i.myocardium - v);
            // Tissue is textured; the blood pool is homogeneous.
            v += tex[y * w + x] * cov_body;
            v += coverage(r_t, d) * (i.blood_pool - v);
            out[y * w + x] = v.clamp(0.0, 1.0);
        }
    }
}

/// Render a single frame; `t` may lie outside `0..frames`.
pub fn render_frame(p: &PhantomParams, t: i64) -> Result<Vec<f64>> {
    p.validate()?;
    let mut out = vec![0.0; p.height * p.width];
    render(p, &texture(p), t, &mut out);
    Ok(out)
}

pub fn generate_phantom(p: &PhantomParams) -> Result<CineSequence> {
    p.validate()?;
    let tex = texture(p);
    let mut seq = CineSequence::zeros(p.frames, p.height, p.width);
    for t in 0..p.frames {
        render(p, &tex, t as i64, seq.frame_mut(t));
    }
    Ok(seq)
}

/// Per-subject randomisation: radii within +-20%, centre within
/// +-`center_jitter` pixels, intensities within +-0.1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomRanges {
    /// Length that radii are expressed relative to (usually the final
    /// image or ROI size).
    pub scale: f64,
    pub epi_fraction: f64,
    pub endo_fraction: f64,
    pub amplitude_fraction: f64,
    pub radius_jitter: f64,
    pub center_jitter: f64,
    pub intensity_jitter: f64,
    pub texture_sigma: f64,
}

impl PhantomRanges {
    pub fn for_size(size: usize) -> Self {
        PhantomRanges {
            scale: size as f64,
            epi_fraction: 0.26,
            endo_fraction: 0.15,
            amplitude_fraction: 0.05,
            radius_jitter: 0.2,
            center_jitter: 4.0,
            intensity_jitter: 0.1,
            texture_sigma: 0.04,
        }
    }
}

/// Draws valid parameters for one subject from its own RNG stream.
pub fn random_params(
    height: usize,
    width: usize,
    frames: usize,
    ranges: &PhantomRanges,
    master_seed: u64,
    subject: u64,
) -> Result<PhantomParams> {
    let mut r = rng::stream(master_seed, &[tag::PHANTOM, subject]);
    let base = PhantomParams::default().intensities;
    for _ in 0..1000 {
        let mut jit = |v: f64, rel: f64| v * (1.0 + r.random_range(-rel..=rel));
        let s = ranges.scale;
        let epi = jit(ranges.epi_fraction * s, ranges.radius_jitter);
        let endo = jit(ranges.endo_fraction * s, ranges.radius_jitter);
        let amp = jit(ranges.amplitude_fraction * s, ranges.radius_jitter);
        let cj = ranges.center_jitter;
        let center = (
            width as f64 / 2.0 + r.random_range(-cj..=cj),
            height as f64 / 2.0 + r.random_range(-cj..=cj),
        );
        let ij = ranges.intensity_jitter;
        let mut ij = |v: f64| (v + r.random_range(-ij..=ij)).clamp(0.0, 1.0);
        let intensities = Intensities {
            background: ij(base.background),
            body: ij(base.body),
            myocardium: ij(base.myocardium),
            blood_pool: ij(base.blood_pool),
        };
        let p = PhantomParams {
            height,
            width,
            frames,
            center,
            body_axes: (0.46 * width as f64, 0.42 * height as f64),
            epi_radius: epi,
            endo_radius_base: endo,
            contraction_amplitude: amp,
            phase: r.random_range(0.0..2.0 * PI),
            intensities,
            texture_sigma: ranges.texture_sigma,
            seed: r.random(),
        };
        let inside = center.0 - epi > 0.0
            && center.0 + epi < width as f64
            && center.1 - epi > 0.0
            && center.1 + epi < height as f64;
        if p.validate().is_ok() && inside {
            return Ok(p);
        }
    }
    Err(Error::Config(format!(
        "could not draw valid phantom parameters for a {height}x{width} grid"
    )))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Dataset layout. Subjects `0..train` form the training split, the next
/// `val` the validation split and the last `test` the test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// When set, phantoms are rendered on a `canvas x canvas` grid and the
    /// `height x width` ROI is located and cropped automatically.
    pub canvas: Option<usize>,
    pub ranges: PhantomRanges,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn desk(seed: u64) -> Self {
        DatasetSpec {
            train: 40,
            val: 10,
            test: 10,
            frames: 20,
            height: 32,
            width: 32,
            canvas: None,
            ranges: PhantomRanges::for_size(32),
            seed,
        }
    }

    pub fn full(seed: u64) -> Self {
        DatasetSpec {
            train: 200,
            val: 50,
            test: 50,
            frames: 50,
            height: 64,
            width: 64,
            canvas: None,
            ranges: PhantomRanges::for_size(64),
            seed,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    pub fn split_of(&self, id: u64) -> Split {
        let i = id as usize;
        if i < self.train {
            Split::Train
        } else if i < self.train + self.val {
            Split::Val
        } else {
            Split::Test
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train == 0 || self.val == 0 || self.test == 0 {
            return Err(Error::invalid("every split needs at least one subject"));
        }
        if let Some(c) = self.canvas {
            if self.height != self.width || c < self.height {
                return Err(Error::invalid(
                    "ROI extraction needs a square ROI no larger than the canvas",
                ));
            }
        }
        crate::fourier::check_even(self.height, self.width)
    }
}

#[derive(Clone, Debug)]
pub struct Subject {
    pub id: u64,
    pub split: Split,
    pub params: PhantomParams,
    /// ROI origin `(x0, y0)` on the canvas, when ROI extraction ran.
    pub roi_origin: Option<(usize, usize)>,
    pub clean: CineSequence,
}

fn make_subject(spec: &DatasetSpec, id: u64) -> Result<Subject> {
    let (gh, gw) = match spec.canvas {
        Some(c) => (c, c),
        None => (spec.height, spec.width),
    };
    let params = random_params(gh, gw, spec.frames, &spec.ranges, spec.seed, id)?;
    let rendered = generate_phantom(&params)?;
    let (clean, roi_origin) = match spec.canvas {
        Some(_) => {
            let r =
                crate::roi::extract_roi(&rendered, &crate::roi::RoiConfig::for_size(spec.height))?;
            (r.cropped, Some(r.origin))
        }
        None => (rendered, None),
    };
    // Match the on-disk f32 precision so memory and file pipelines agree.
    let (t, h, w) = clean.dims();
    let clean = CineSequence::new(
        t,
        h,
        w,
        clean
            .into_data()
            .into_iter()
            .map(|v| v as f32 as f64)
            .collect(),
    )?;
    Ok(Subject {
        id,
        split: spec.split_of(id),
        params,
        roi_origin,
        clean,
    })
}

/// All subjects in id order. Each subject draws from its own stream, so the
/// result does not depend on the rayon pool size.
pub fn generate_subjects(spec: &DatasetSpec) -> Result<Vec<Subject>> {
    use rayon::prelude::*;
    spec.validate()?;
    (0..spec.total() as u64)
        .into_par_iter()
        .map(|id| make_subject(spec, id))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: u64,
    pub split: Split,
    pub file: String,
    pub params: PhantomParams,
    pub roi_origin: Option<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub tool: String,
    pub kind: String,
    pub spec: DatasetSpec,
    pub subjects: Vec<SubjectEntry>,
}

pub const DATASET_MANIFEST: &str = "manifest.json";

pub fn subject_file(id: u64) -> String {
    format!("subject_{id:04}.ckt")
}

/// Writes one CKT file per subject and `manifest.json` into `dir`.
pub fn build_dataset(spec: &DatasetSpec, dir: &Path) -> Result<DatasetManifest> {
    let subjects = generate_subjects(spec)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(subjects.len());
    for s in &subjects {
        let file = subject_file(s.id);
        CktTensor::from(&s.clean).write(&dir.join(&file))?;
        entries.push(SubjectEntry {
            id: s.id,
            split: s.split,
            file,
            params: s.params.clone(),
            roi_origin: s.roi_origin,
        });
    }
    let manifest = DatasetManifest {
        tool: crate::io::TOOL_VERSION.to_string(),
        kind: "phantom_dataset".into(),
        spec: spec.clone(),
        subjects: entries,
    };
    crate::io::write_json(&dir.join(DATASET_MANIFEST), &manifest)?;
    Ok(manifest)
}

/// Reads a dataset written by [`build_dataset`].
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<Subject>)> {
    let manifest: DatasetManifest = crate::io::read_json(&dir.join(DATASET_MANIFEST))?;
    let subjects = manifest
        .subjects
        .iter()
        .map(|e| {
            Ok(Subject {
                id: e.id,
                split: e.split,
                params: e.params.clone(),
                roi_origin: e.roi_origin,
                clean: CktTensor::read(&dir.join(&e.file))?.to_cine()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, subjects))
}
