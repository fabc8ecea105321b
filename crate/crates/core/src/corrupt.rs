//! Mis-triggering simulation: planned k-space lines are overwritten with the
//! same-ky line of another cardiac phase.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cine::CineSequence;
use crate::error::{Error, Result};
use crate::fourier::{from_kspace, to_kspace, KSpaceSequence};
use crate::tensorlab::Tensor;

/// Severity ladder, in corrupted lines per affected frame.
pub const SEVERITIES: [usize; 5] = [0, 2, 4, 8, 16];

/// Per-(frame, line) trust flags; 1 = trusted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LineMask {
    frames: usize,
    lines: usize,
    flags: Vec<u8>,
}

impl LineMask {
    pub fn ones(frames: usize, lines: usize) -> Self {
        LineMask {
            frames,
            lines,
            flags: vec![1; frames * lines],
        }
    }

    pub fn zeros(frames: usize, lines: usize) -> Self {
        LineMask {
            frames,
            lines,
            flags: vec![0; frames * lines],
        }
    }

    pub fn from_flags(frames: usize, lines: usize, flags: Vec<u8>) -> Result<Self> {
        if flags.len() != frames * lines {
            return Err(Error::invalid(format!(
                "mask of {frames}x{lines} needs {} flags, got {}",
                frames * lines,
                flags.len()
            )));
        }
        if flags.iter().any(|&f| f > 1) {
            return Err(Error::invalid("mask flags must be 0 or 1"));
        }
        Ok(LineMask {
            frames,
            lines,
            flags,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn lines(&self) -> usize {
        self.lines
    }

    pub fn flags(&self) -> &[u8] {
        &self.flags
    }

    pub fn get(&self, t: usize, ky: usize) -> bool {
        self.flags[t * self.lines + ky] == 1
    }

    pub fn set(&mut self, t: usize, ky: usize, trusted: bool) {
        self.flags[t * self.lines + ky] = trusted as u8;
    }

    pub fn count_corrupted(&self) -> usize {
        self.flags.iter().filter(|&&f| f == 0).count()
    }

    pub fn corrupted_in_frame(&self, t: usize) -> usize {
        self.flags[t * self.lines..(t + 1) * self.lines]
            .iter()
            .filter(|&&f| f == 0)
            .count()
    }

    /// Flags as reals, shape `[T, H]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[self.frames, self.lines],
            self.flags.iter().map(|&f| f as f64).collect(),
        )
        .expect("mask shape")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineReplacement {
    pub ky: usize,
    pub source: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionPlan {
    pub frames: usize,
    pub lines: usize,
    pub n_lines: usize,
    /// Replacements per frame, sorted by `ky`; empty for unaffected frames.
    pub replacements: Vec<Vec<LineReplacement>>,
}

impl CorruptionPlan {
    pub fn empty(frames: usize, lines: usize) -> Self {
        CorruptionPlan {
            frames,
            lines,
            n_lines: 0,
            replacements: vec![Vec::new(); frames],
        }
    }

    pub fn total(&self) -> usize {
        self.replacements.iter().map(Vec::len).sum()
    }

    pub fn mask(&self) -> LineMask {
        let mut m = LineMask::ones(self.frames, self.lines);
        for (t, reps) in self.replacements.iter().enumerate() {
            for r in reps {
                m.set(t, r.ky, false);
            }
        }
        m
    }
}

/// Sample a plan: in every affected frame, `n_lines` distinct ky uniformly
/// without replacement; each replaced line takes its content from another
/// frame chosen uniformly among those whose same ky line is not itself
/// replaced (falling back to all other frames when none qualifies), so every
/// copied line still has an intact twin in the corrupted data.
///
/// `frames_affected` restricts corruption to a uniform random subset of
/// frames of that size.
pub fn sample_plan<R: Rng + ?Sized>(
    frames: usize,
    lines: usize,
    n_lines: usize,
    frames_affected: Option<usize>,
    rng: &mut R,
) -> Result<CorruptionPlan> {
    if n_lines > lines {
        return Err(Error::invalid(format!(
            "n_lines {n_lines} exceeds {lines} lines per frame"
        )));
    }
    if n_lines > 0 && frames < 2 {
        return Err(Error::invalid("corruption needs at least two frames"));
    }
    let mut plan = CorruptionPlan::empty(frames, lines);
    plan.n_lines = n_lines;
    if n_lines == 0 {
        return Ok(plan);
    }
    let affected: Vec<usize> = match frames_affected {
        None => (0..frames).collect(),
        Some(k) if k > frames => {
            return Err(Error::invalid(format!(
                "frames_affected {k} exceeds {frames} frames"
            )))
        }
        Some(k) => {
            let mut v = sample(rng, frames, k).into_vec();
            v.sort_unstable();
            v
        }
    };
    let mut planned = vec![false; frames * lines];
    let mut kys: Vec<Vec<usize>> = vec![Vec::new(); frames];
    for &t in &affected {
        let mut k = sample(rng, lines, n_lines).into_vec();
        k.sort_unstable();
        for &ky in &k {
            planned[t * lines + ky] = true;
        }
        kys[t] = k;
    }
    let mut candidates = Vec::with_capacity(frames);
    for &t in &affected {
        for &ky in &kys[t] {
            candidates.clear();
            candidates.extend((0..frames).filter(|&s| s != t && !planned[s * lines + ky]));
            if candidates.is_empty() {
                candidates.extend((0..frames).filter(|&s| s != t));
            }
            let source = candidates[rng.random_range(0..candidates.len())];
            plan.replacements[t].push(LineReplacement { ky, source });
        }
    }
    Ok(plan)
}

/// Apply `plan` to clean k-space: planned lines are copied verbatim from the
/// source frame's clean data.
pub fn corrupt_kspace(
    clean: &KSpaceSequence,
    plan: &CorruptionPlan,
) -> Result<(KSpaceSequence, LineMask)> {
    let (t, h, _) = clean.dims();
    if plan.frames != t || plan.lines != h || plan.replacements.len() != t {
        return Err(Error::invalid(format!(
            "plan for {}x{} does not match k-space with {t} frames and {h} lines",
            plan.frames, plan.lines
        )));
    }
    let mut out = clean.clone();
    for (ft, reps) in plan.replacements.iter().enumerate() {
        for r in reps {
            if r.source == ft || r.source >= t || r.ky >= h {
                return Err(Error::invalid(format!(
                    "bad replacement (t={ft}, ky={}, source={})",
                    r.ky, r.source
                )));
            }
            out.line_mut(ft, r.ky)?
                .copy_from_slice(clean.line(r.source, r.ky)?);
        }
    }
    Ok((out, plan.mask()))
}

#[derive(Clone, Debug)]
pub struct Corrupted {
    pub kspace: KSpaceSequence,
    pub image: CineSequence,
    pub mask: LineMask,
}

pub fn corrupt_sequence(clean: &CineSequence, plan: &CorruptionPlan) -> Result<Corrupted> {
    let ks = to_kspace(clean)?;
    let (kspace, mask) = corrupt_kspace(&ks, plan)?;
    // An empty plan leaves the image itself untouched.
    let image = if plan.total() == 0 {
        clean.clone()
    } else {
        from_kspace(&kspace)
    };
    Ok(Corrupted {
        kspace,
        image,
        mask,
    })
}
