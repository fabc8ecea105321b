//! Central finite-difference checks of analytic gradients.
//!
//! The error for one tensor is `|a - n|_2 / max(|a|_2, |n|_2)` over the
//! checked entries, where `a` is the analytic and `n` the numerical
//! gradient. Large tensors are checked on a fixed pseudo-random subset.
//!
//! Piecewise-linear layers (ReLU, max pooling) make the loss non-smooth. An
//! entry whose central difference at `FD_STEP` disagrees with the one at
//! `FD_STEP / 10` has a kink inside the probe interval; it is re-probed at
//! `FALLBACK_STEP` and counted in [`GradCheck::fallbacks`]. Entries that
//! stay non-smooth are counted in [`GradCheck::kinks`] and fail the check.
//! Smoothness is judged from the loss alone, never from the analytic
//! gradient.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corrupt::sample_plan;
use crate::detect::{detector_input, DetectConfig, DetectNet, HeadKind, InputMode};
use crate::error::Result;
use crate::fourier::to_kspace;
use crate::recon::{dc_layer, DcMode, ReconConfig, ReconNet};
use crate::rng::{self, Rng as StreamRng};
use crate::tensorlab::{Graph, ParamId, Params, Tensor, Var};
use crate::CineSequence;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOLERANCE: f64 = 1e-4;
const MAX_ENTRIES: usize = 48;
/// Step used for entries whose `FD_STEP` interval straddles a kink.
pub const FALLBACK_STEP: f64 = 1e-6;
const KINK_REL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub name: String,
    pub rel_error: f64,
    pub max_abs_error: f64,
    /// Entries compared.
    pub entries: usize,
    /// Compared entries that needed the fallback step.
    pub fallbacks: usize,
    /// Entries skipped because even the fallback interval holds a kink.
    pub kinks: usize,
}

impl GradCheck {
    /// Error below `tol` with no entry skipped.
    pub fn passed(&self, tol: f64) -> bool {
        self.rel_error < tol && self.kinks == 0
    }
}

fn entries(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        let mut r = rng::stream(0x6763, &[len as u64]);
        let mut v = rand::seq::index::sample(&mut r, len, max).into_vec();
        v.sort_unstable();
        v
    }
}

/// Outcome of probing one entry.
#[derive(Clone, Copy)]
enum Probe {
    Smooth(f64),
    /// Smooth only at the fallback step.
    Fallback(f64),
    Kink,
}

fn central(f: &mut dyn FnMut(f64) -> Result<f64>, x: f64, h: f64) -> Result<f64> {
    Ok((f(x + h)? - f(x - h)?) / (2.0 * h))
}

fn agree(a: f64, b: f64) -> bool {
    (a - b).abs() <= KINK_REL * (a.abs() + b.abs()) + 1e-10
}

fn probe(mut f: impl FnMut(f64) -> Result<f64>, x: f64) -> Result<Probe> {
    let coarse = central(&mut f, x, FD_STEP)?;
    let fine = central(&mut f, x, FD_STEP / 10.0)?;
    let out = if agree(coarse, fine) {
        Probe::Smooth(coarse)
    } else {
        let a = central(&mut f, x, FALLBACK_STEP)?;
        let b = central(&mut f, x, FALLBACK_STEP / 10.0)?;
        if agree(a, b) {
            Probe::Fallback(a)
        } else {
            Probe::Kink
        }
    };
    f(x)?;
    Ok(out)
}

fn compare(name: String, pairs: &[(f64, Probe)]) -> GradCheck {
    let kept: Vec<(f64, f64)> = pairs
        .iter()
        .filter_map(|&(a, p)| match p {
            Probe::Smooth(n) | Probe::Fallback(n) => Some((a, n)),
            Probe::Kink => None,
        })
        .collect();
    let diff: f64 = kept
        .iter()
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = kept.iter().map(|(a, _)| a * a).sum::<f64>().sqrt();
    let nn = kept.iter().map(|(_, n)| n * n).sum::<f64>().sqrt();
    let scale = na.max(nn);
    let rel = if scale < 1e-12 { diff } else { diff / scale };
    let max_abs = kept.iter().map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    GradCheck {
        name,
        rel_error: rel,
        max_abs_error: max_abs,
        entries: kept.len(),
        fallbacks: pairs
            .iter()
            .filter(|p| matches!(p.1, Probe::Fallback(_)))
            .count(),
        kinks: pairs.len() - kept.len(),
    }
}

/// Checks gradients with respect to free input tensors. `build` records a
/// scalar loss from the leaf nodes it is given.
pub fn check_inputs<F>(name: &str, leaves: &[Tensor], build: F) -> Result<Vec<GradCheck>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.input(t.clone(), false)).collect();
        let l = build(&mut g, &vars)?;
        g.value(l).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.input(t.clone(), true)).collect();
    let loss = build(&mut g, &vars)?;
    let back = g.backward(loss)?;
    let mut out = Vec::new();
    for (i, leaf) in leaves.iter().enumerate() {
        let zeros = Tensor::zeros(leaf.shape());
        let grad = back.wrt(vars[i]).unwrap_or(&zeros);
        let idx = entries(leaf.len(), MAX_ENTRIES);
        let mut vals = leaves.to_vec();
        let mut pairs = Vec::with_capacity(idx.len());
        for &j in &idx {
            let orig = vals[i].data()[j];
            let n = probe(
                |v| {
                    vals[i].data_mut()[j] = v;
                    eval(&vals)
                },
                orig,
            )?;
            pairs.push((grad.data()[j], n));
        }
        out.push(compare(format!("{name}/input{i}"), &pairs));
    }
    Ok(out)
}

/// Checks gradients with respect to the parameters `ids`.
pub fn check_params<F>(
    name: &str,
    params: &Params,
    ids: &[ParamId],
    build: F,
) -> Result<Vec<GradCheck>>
where
    F: Fn(&mut Graph, &Params) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, params)?;
    let grads = g.backward(loss)?.param_grads(params);
    let mut work = params.clone();
    let mut out = Vec::new();
    for &id in ids {
        let idx = entries(params.get(id).len(), MAX_ENTRIES);
        let mut pairs = Vec::with_capacity(idx.len());
        for &j in &idx {
            let orig = work.get(id).data()[j];
            let n = probe(
                |v| {
                    work.get_mut(id).data_mut()[j] = v;
                    let mut g = Graph::new();
                    let l = build(&mut g, &work)?;
                    g.value(l).item()
                },
                orig,
            )?;
            pairs.push((grads.get(id).data()[j], n));
        }
        out.push(compare(format!("{name}/{}", params.name(id)), &pairs));
    }
    Ok(out)
}

fn randn(shape: &[usize], r: &mut StreamRng) -> Tensor {
    Tensor::randn(shape, 1.0, r)
}

/// `sum(y * c)` with a fixed random `c`, so every output entry carries a
/// distinct upstream gradient.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut r = rng::stream(seed, &[99]);
    let c = g.constant(randn(g.shape(y), &mut r));
    let p = g.mul(y, c)?;
    Ok(g.sum(p))
}

fn random_sequence(t: usize, h: usize, w: usize, r: &mut StreamRng) -> CineSequence {
    CineSequence::new(t, h, w, (0..t * h * w).map(|_| r.random::<f64>()).collect()).expect("dims")
}

/// One check per primitive layer kind, on small random tensors.
pub fn layer_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut r = rng::stream(seed, &[1]);
    let mut out = Vec::new();
    for (stride, pad) in [(1, 1), (2, 0)] {
        let leaves = [
            randn(&[1, 2, 3, 5, 4], &mut r),
            randn(&[3, 2, 3, 3, 3], &mut r),
            randn(&[3], &mut r),
        ];
        out.extend(check_inputs(
            &format!("conv3d(s{stride},p{pad})"),
            &leaves,
            |g, v| {
                let y = g.conv3d(v[0], v[1], v[2], stride, pad)?;
                weighted_sum(g, y, seed)
            },
        )?);
    }
    out.extend(check_inputs(
        "maxpool3d",
        &[randn(&[1, 2, 3, 5, 4], &mut r)],
        |g, v| {
            let y = g.maxpool3d(v[0], [2, 2, 2])?;
            weighted_sum(g, y, seed)
        },
    )?);
    let leaves = [
        randn(&[2, 5], &mut r),
        randn(&[5, 4], &mut r),
        randn(&[4], &mut r),
    ];
    out.extend(check_inputs("dense", &leaves, |g, v| {
        let y = g.dense(v[0], v[1], v[2])?;
        weighted_sum(g, y, seed)
    })?);
    out.extend(check_inputs("relu", &[randn(&[3, 7], &mut r)], |g, v| {
        let y = g.relu(v[0]);
        weighted_sum(g, y, seed)
    })?);
    out.extend(check_inputs(
        "sigmoid",
        &[randn(&[3, 7], &mut r)],
        |g, v| {
            let y = g.sigmoid(v[0]);
            weighted_sum(g, y, seed)
        },
    )?);
    out.extend(check_inputs(
        "dropout",
        &[randn(&[3, 7], &mut r)],
        |g, v| {
            let mut dr = rng::stream(seed, &[2]);
            let y = g.dropout(v[0], 0.2, true, &mut dr)?;
            weighted_sum(g, y, seed)
        },
    )?);
    out.extend(check_inputs(
        "add_mul_scale",
        &[randn(&[2, 3], &mut r), randn(&[2, 3], &mut r)],
        |g, v| {
            let a = g.add(v[0], v[1])?;
            let m = g.mul(a, v[1])?;
            let s = g.scale(m, -1.5);
            weighted_sum(g, s, seed)
        },
    )?);
    out.extend(check_inputs(
        "reshape_permute_select",
        &[randn(&[1, 2, 3, 4, 2], &mut r)],
        |g, v| {
            let p = g.permute(v[0], &[0, 2, 3, 1, 4])?;
            let q = g.reshape(p, &[1, 3, 4, 4])?;
            let s = g.select_channel(q, 1)?;
            weighted_sum(g, s, seed)
        },
    )?);
    let target = randn(&[2, 5], &mut r);
    out.extend(check_inputs("mse", &[randn(&[2, 5], &mut r)], |g, v| {
        g.mse(v[0], &target)
    })?);
    let labels = Tensor::new(
        &[2, 5],
        (0..10).map(|i| (i % 3 == 0) as u8 as f64).collect(),
    )?;
    let probs = Tensor::rand_uniform(&[2, 5], 0.05, 0.95, &mut r);
    out.extend(check_inputs("bce", &[probs], |g, v| g.bce(v[0], &labels))?);
    Ok(out)
}

/// Data-consistency layer in hard and soft modes.
pub fn dc_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut r = rng::stream(seed, &[3]);
    let (t, h, w) = (3, 4, 6);
    let y = to_kspace(&random_sequence(t, h, w, &mut r))?;
    let x = randn(&[1, 2, t, h, w], &mut r);
    let mask = Tensor::new(
        &[t, h],
        (0..t * h).map(|i| (i % 3 != 0) as u8 as f64).collect(),
    )?;
    let mut out = check_inputs("dc_hard", std::slice::from_ref(&x), |g, v| {
        let m = g.constant(mask.clone());
        let o = dc_layer(g, v[0], m, &y, DcMode::Hard)?;
        weighted_sum(g, o, seed)
    })?;
    let wts = Tensor::rand_uniform(&[t, h], 0.05, 0.95, &mut r);
    out.extend(check_inputs("dc_soft", &[x, wts], |g, v| {
        let o = dc_layer(g, v[0], v[1], &y, DcMode::Soft { lambda: 3.0 })?;
        weighted_sum(g, o, seed)
    })?);
    Ok(out)
}

/// Tiny configurations used by the network suites.
pub fn tiny_detect_config(head: HeadKind) -> DetectConfig {
    let mut c = DetectConfig::desk(4, 8, 8);
    c.channels = vec![3, 3, 4, 4];
    if head == HeadKind::Global {
        c.kernel = 5;
        c.pool = [2, 2, 2];
        c.head = HeadKind::Global;
        c.input = InputMode::Image;
    }
    c
}

pub fn tiny_recon_config() -> ReconConfig {
    let mut c = ReconConfig::desk(4, 8, 8);
    c.channels = vec![3, 3];
    c.identity_init = false;
    c
}

struct TinyProblem {
    ks: crate::fourier::KSpaceSequence,
    clean: Tensor,
    labels: Tensor,
}

fn tiny_problem(seed: u64) -> Result<TinyProblem> {
    let mut r = rng::stream(seed, &[4]);
    let clean = random_sequence(4, 8, 8, &mut r);
    let plan = sample_plan(4, 8, 2, None, &mut r)?;
    let c = crate::corrupt::corrupt_sequence(&clean, &plan)?;
    Ok(TinyProblem {
        ks: c.kspace,
        clean: clean.to_tensor(),
        labels: c.mask.to_tensor(),
    })
}

/// Every parameter of the detection network under the BCE loss, with
/// dropout active under a fixed mask.
pub fn detect_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let prob = tiny_problem(seed)?;
    let mut out = Vec::new();
    for head in [HeadKind::PerLine, HeadKind::Global] {
        let mut params = Params::new();
        let mut r = rng::stream(seed, &[5]);
        let net = DetectNet::new(tiny_detect_config(head), &mut params, "detect.", &mut r)?;
        let input = detector_input(&prob.ks, net.config.input);
        let name = format!("detect_{head:?}").to_lowercase();
        out.extend(check_params(&name, &params, &net.param_ids(), |g, p| {
            let mut dr = rng::stream(seed, &[6]);
            let pr = net.forward(g, p, &input, true, &mut dr)?;
            g.bce(pr, &prob.labels)
        })?);
    }
    Ok(out)
}

/// Every parameter of a two-cascade reconstruction network under MSE with
/// soft DC driven by fixed weights.
pub fn recon_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let prob = tiny_problem(seed)?;
    let mut params = Params::new();
    let mut r = rng::stream(seed, &[7]);
    let net = ReconNet::new(tiny_recon_config(), &mut params, "recon.", &mut r)?;
    let w = Tensor::rand_uniform(&[4, 8], 0.0, 1.0, &mut r);
    let target = prob.clean.clone().reshape(&[1, 4, 8, 8])?;
    check_params("recon", &params, &net.param_ids(), |g, p| {
        let wv = g.constant(w.clone());
        let o = net.forward(g, p, &prob.ks, wv, DcMode::Soft { lambda: 5.0 })?;
        let re = g.select_channel(o, 0)?;
        g.mse(re, &target)
    })
}

/// Detection probabilities feeding soft DC inside the reconstruction,
/// under the weighted total loss.
pub fn end2end_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let prob = tiny_problem(seed)?;
    let mut params = Params::new();
    let mut r = rng::stream(seed, &[8]);
    let det = DetectNet::new(
        tiny_detect_config(HeadKind::PerLine),
        &mut params,
        "detect.",
        &mut r,
    )?;
    let rec = ReconNet::new(tiny_recon_config(), &mut params, "recon.", &mut r)?;
    let input = detector_input(&prob.ks, det.config.input);
    let target = prob.clean.clone().reshape(&[1, 4, 8, 8])?;
    let ids: Vec<ParamId> = det.param_ids().into_iter().chain(rec.param_ids()).collect();
    check_params("end2end", &params, &ids, |g, p| {
        let mut dr = rng::stream(seed, &[9]);
        let pr = det.forward(g, p, &input, true, &mut dr)?;
        let o = rec.forward(g, p, &prob.ks, pr, DcMode::Soft { lambda: 5.0 })?;
        let re = g.select_channel(o, 0)?;
        let l_rec = g.mse(re, &target)?;
        let l_det = g.bce(pr, &prob.labels)?;
        crate::train::loss_total_var(g, l_det, l_rec, &crate::train::LossWeights::default())
    })
}

/// All suites in order.
pub fn run_all(seed: u64) -> Result<Vec<GradCheck>> {
    let mut v = layer_suite(seed)?;
    v.extend(dc_suite(seed)?);
    v.extend(detect_suite(seed)?);
    v.extend(recon_suite(seed)?);
    v.extend(end2end_suite(seed)?);
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_suite_passes() {
        let checks = run_all(1).unwrap();
        assert!(checks.len() > 20);
        for c in &checks {
            assert!(c.passed(FD_TOLERANCE), "{c:?}");
        }
    }
}
