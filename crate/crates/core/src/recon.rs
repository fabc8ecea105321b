//! Cascaded reconstruction with data consistency.
//!
//! Each cascade is a residual stack of conv3d layers acting on the
//! two-channel (real, imaginary) image, followed by a data-consistency layer
//! that pulls the k-space of the estimate back towards the measurement on
//! trusted lines.

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cine::CineSequence;
use crate::corrupt::LineMask;
use crate::detect::{he_normal, LineProb};
use crate::error::{Error, Result};
use crate::fourier::{fft2c, from_kspace_complex, Direction, KSpaceSequence};
use crate::tensorlab::{CustomOp, Graph, ParamId, Params, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DcMode {
    /// `X' = m Y + (1 - m) X` with binary `m`.
    Hard,
    /// `X' = (X + w lambda Y) / (1 + w lambda)`.
    Soft { lambda: f64 },
}

pub const DEFAULT_DC_LAMBDA: f64 = 100.0;
/// Soft-DC weight of the desk preset. With small networks the detector's
/// probabilities on corrupted lines stay well above `1 / DEFAULT_DC_LAMBDA`,
/// so a large weight lets corrupted lines dominate training-time DC.
pub const DESK_DC_LAMBDA: f64 = 1.0;

/// Per-line weights entering a DC layer.
#[derive(Clone, Debug)]
pub enum DcWeights<'a> {
    Mask(&'a LineMask),
    Prob(&'a LineProb),
}

impl DcWeights<'_> {
    pub fn to_tensor(&self) -> Tensor {
        match self {
            DcWeights::Mask(m) => m.to_tensor(),
            DcWeights::Prob(p) => p.to_tensor(),
        }
    }
}

/// Image `[1, 2, T, H, W]` to complex frames.
fn to_complex(x: &[f64], plane_len: usize) -> Vec<Complex64> {
    let (re, im) = x.split_at(plane_len);
    re.iter()
        .zip(im)
        .map(|(&a, &b)| Complex64::new(a, b))
        .collect()
}

fn from_complex(z: &[Complex64]) -> Vec<f64> {
    z.iter()
        .map(|c| c.re)
        .chain(z.iter().map(|c| c.im))
        .collect()
}

/// Data-consistency layer as a differentiable operation on
/// `(x_est [1,2,T,H,W], weights [T,H])`.
pub struct DataConsistency {
    measured: KSpaceSequence,
    mode: DcMode,
}

impl DataConsistency {
    pub fn new(measured: KSpaceSequence, mode: DcMode) -> Result<Self> {
        if let DcMode::Soft { lambda } = mode {
            if !(lambda >= 0.0 && lambda.is_finite()) {
                return Err(Error::invalid(format!(
                    "DC lambda {lambda} must be finite and >= 0"
                )));
            }
        }
        Ok(DataConsistency { measured, mode })
    }

    fn check(&self, x: &Tensor, w: &Tensor) -> Result<()> {
        let (t, h, wd) = self.measured.dims();
        if x.shape() != [1, 2, t, h, wd] || w.shape() != [t, h] {
            return Err(Error::invalid(format!(
                "DC expects x [1, 2, {t}, {h}, {wd}] and weights [{t}, {h}], got {:?} and {:?}",
                x.shape(),
                w.shape()
            )));
        }
        if w.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("DC weights must lie in [0, 1]"));
        }
        if self.mode == DcMode::Hard && w.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("hard DC needs a binary mask"));
        }
        Ok(())
    }

    /// Fraction `a` of the estimate kept on each line.
    fn keep(&self, w: f64) -> f64 {
        match self.mode {
            DcMode::Hard => 1.0 - w,
            DcMode::Soft { lambda } => 1.0 / (1.0 + w * lambda),
        }
    }

    pub fn apply(&self, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        self.check(x, w)?;
        if w.data().iter().all(|&wl| self.keep(wl) == 1.0) {
            return Ok(x.clone());
        }
        let (t, h, wd) = self.measured.dims();
        let mut k = to_complex(x.data(), t * h * wd);
        fft2c(&mut k, h, wd, Direction::Forward);
        let y = self.measured.data();
        for (line, &wl) in w.data().iter().enumerate() {
            let a = self.keep(wl);
            for i in line * wd..(line + 1) * wd {
                k[i] = if a == 1.0 {
                    k[i]
                } else if a == 0.0 {
                    y[i]
                } else {
                    a * k[i] + (1.0 - a) * y[i]
                };
            }
        }
        fft2c(&mut k, h, wd, Direction::Inverse);
        Tensor::new(x.shape(), from_complex(&k))
    }
}

impl CustomOp for DataConsistency {
    fn name(&self) -> &'static str {
        "data_consistency"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad_output: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (t, h, wd) = self.measured.dims();
        let n = t * h * wd;
        let mut gk = to_complex(grad_output.data(), n);
        fft2c(&mut gk, h, wd, Direction::Forward);

        let gw = match (needs[1], self.mode) {
            (true, DcMode::Soft { lambda }) => {
                let mut xk = to_complex(x.data(), n);
                fft2c(&mut xk, h, wd, Direction::Forward);
                let y = self.measured.data();
                let data = w
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(line, &wl)| {
                        let s: f64 = (line * wd..(line + 1) * wd)
                            .map(|i| (gk[i].conj() * (y[i] - xk[i])).re)
                            .sum();
                        lambda / (1.0 + wl * lambda).powi(2) * s
                    })
                    .collect();
                Some(Tensor::new(w.shape(), data)?)
            }
            (true, DcMode::Hard) => Some(Tensor::zeros(w.shape())),
            (false, _) => None,
        };
        let gx = if needs[0] {
            for (line, &wl) in w.data().iter().enumerate() {
                let a = self.keep(wl);
                gk[line * wd..(line + 1) * wd]
                    .iter_mut()
                    .for_each(|z| *z *= a);
            }
            fft2c(&mut gk, h, wd, Direction::Inverse);
            Some(Tensor::new(x.shape(), from_complex(&gk))?)
        } else {
            None
        };
        Ok(vec![gx, gw])
    }
}

/// Records a DC layer on `g`.
pub fn dc_layer(
    g: &mut Graph,
    x: Var,
    weights: Var,
    measured: &KSpaceSequence,
    mode: DcMode,
) -> Result<Var> {
    let op = DataConsistency::new(measured.clone(), mode)?;
    let out = op.apply(g.value(x), g.value(weights))?;
    Ok(g.custom(Box::new(op), &[x, weights], out))
}

/// Standalone DC on a two-channel image tensor.
pub fn data_consistency(
    x_est: &Tensor,
    measured: &KSpaceSequence,
    weights: &DcWeights,
    mode: DcMode,
) -> Result<Tensor> {
    DataConsistency::new(measured.clone(), mode)?.apply(x_est, &weights.to_tensor())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub cascades: usize,
    /// Hidden widths of each denoiser; input and output have 2 channels.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub dc_lambda: f64,
    /// Zero the last layer of every denoiser so each starts as the identity.
    pub identity_init: bool,
}

impl ReconConfig {
    pub fn full(frames: usize, height: usize, width: usize) -> Self {
        ReconConfig {
            frames,
            height,
            width,
            cascades: 3,
            channels: vec![32, 32, 32],
            kernel: 3,
            dc_lambda: DEFAULT_DC_LAMBDA,
            identity_init: true,
        }
    }

    pub fn desk(frames: usize, height: usize, width: usize) -> Self {
        ReconConfig {
            cascades: 2,
            channels: vec![16, 16],
            dc_lambda: DESK_DC_LAMBDA,
            ..Self::full(frames, height, width)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cascades == 0 || self.channels.contains(&0) {
            return Err(Error::Config(
                "reconstruction needs >= 1 cascade and non-zero widths".into(),
            ));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel {} must be odd", self.kernel)));
        }
        if !(self.dc_lambda > 0.0) {
            return Err(Error::Config("dc_lambda must be positive".into()));
        }
        crate::fourier::check_even(self.height, self.width)
            .map_err(|e| Error::Config(e.to_string()))
    }

    fn widths(&self) -> Vec<usize> {
        let mut v = vec![2];
        v.extend(&self.channels);
        v.push(2);
        v
    }
}

#[derive(Clone, Debug)]
pub struct ReconNet {
    pub config: ReconConfig,
    layers: Vec<Vec<(ParamId, ParamId)>>,
}

impl ReconNet {
    pub fn new<R: Rng + ?Sized>(
        config: ReconConfig,
        params: &mut Params,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let k = config.kernel;
        let widths = config.widths();
        let mut layers = Vec::new();
        for c in 0..config.cascades {
            let mut cascade = Vec::new();
            for l in 0..widths.len() - 1 {
                let (ci, co) = (widths[l], widths[l + 1]);
                let last = l == widths.len() - 2;
                let w = if last && config.identity_init {
                    Tensor::zeros(&[co, ci, k, k, k])
                } else {
                    he_normal(&[co, ci, k, k, k], ci * k * k * k, rng)
                };
                let w = params.add(format!("{prefix}c{c}.conv{l}.w"), w)?;
                let b = params.add(format!("{prefix}c{c}.conv{l}.b"), Tensor::zeros(&[co]))?;
                cascade.push((w, b));
            }
            layers.push(cascade);
        }
        Ok(ReconNet { config, layers })
    }

    pub fn bind(config: ReconConfig, params: &Params, prefix: &str) -> Result<Self> {
        config.validate()?;
        let n = config.widths().len() - 1;
        let find = |s: String| {
            params
                .find(&s)
                .ok_or_else(|| Error::Config(format!("missing parameter {s}")))
        };
        let layers = (0..config.cascades)
            .map(|c| {
                (0..n)
                    .map(|l| {
                        Ok((
                            find(format!("{prefix}c{c}.conv{l}.w"))?,
                            find(format!("{prefix}c{c}.conv{l}.b"))?,
                        ))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ReconNet { config, layers })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flatten()
            .flat_map(|&(w, b)| [w, b])
            .collect()
    }

    pub fn parameter_count(&self, params: &Params) -> usize {
        self.param_ids()
            .iter()
            .map(|&id| params.get(id).len())
            .sum()
    }

    fn check_dims(&self, y: &KSpaceSequence) -> Result<()> {
        let c = &self.config;
        if y.dims() != (c.frames, c.height, c.width) {
            return Err(Error::invalid(format!(
                "k-space {:?} does not match network {}x{}x{}",
                y.dims(),
                c.frames,
                c.height,
                c.width
            )));
        }
        Ok(())
    }

    /// Records the cascades on `g`; `weights` is a `[T, H]` node. Returns the
    /// two-channel output `[1, 2, T, H, W]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &Params,
        y: &KSpaceSequence,
        weights: Var,
        mode: DcMode,
    ) -> Result<Var> {
        self.check_dims(y)?;
        let (t, h, w) = y.dims();
        let x0 = Tensor::new(&[1, 2, t, h, w], from_complex(&from_kspace_complex(y)))?;
        let mut x = g.constant(x0);
        let pad = self.config.kernel / 2;
        for cascade in &self.layers {
            let mut z = x;
            for (l, &(wid, bid)) in cascade.iter().enumerate() {
                let (wv, bv) = (g.param(params, wid), g.param(params, bid));
                z = g.conv3d(z, wv, bv, 1, pad)?;
                if l + 1 < cascade.len() {
                    z = g.relu(z);
                }
            }
            let sum = g.add(x, z)?;
            x = dc_layer(g, sum, weights, y, mode)?;
        }
        Ok(x)
    }
}

/// Inference: reconstruct from measured k-space, emitting the real channel.
pub fn recon_forward(
    net: &ReconNet,
    params: &Params,
    y: &KSpaceSequence,
    weights: &DcWeights,
    mode: DcMode,
) -> Result<CineSequence> {
    let mut g = Graph::new();
    let w = g.constant(weights.to_tensor());
    let out = net.forward(&mut g, params, y, w, mode)?;
    let re = g.select_channel(out, 0)?;
    let (t, h, wd) = y.dims();
    CineSequence::new(t, h, wd, g.value(re).data().to_vec())
}
