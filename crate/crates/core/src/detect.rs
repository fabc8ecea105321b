//! Per-line corruption detection.
//!
//! [`DetectNet`] is a stack of conv3d / ReLU / dropout / maxpool blocks
//! followed by one dense layer and a sigmoid, producing the probability that
//! each (frame, phase-encode line) is uncorrupted. [`duplicate_line_oracle`]
//! is a non-learned reference that looks for verbatim copies across frames.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cine::CineSequence;
use crate::corrupt::LineMask;
use crate::error::{Error, Result};
use crate::fourier::{from_kspace, to_kspace, KSpaceSequence};
use crate::tensorlab::{Graph, ParamId, Params, Tensor, Var};

/// What the network sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// The image-domain sequence only.
    Image,
    /// Image plus standardised log-magnitudes of the k-space, of its
    /// backward and forward temporal differences and of its second
    /// temporal difference, and a per-line map of the log relative distance
    /// to the closest line at the same `ky` in another frame.
    ImageKspace,
}

impl InputMode {
    pub fn channels(self) -> usize {
        match self {
            InputMode::Image => 1,
            InputMode::ImageKspace => 6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// One dense layer from all flattened features to `T*H` logits.
    Global,
    /// One dense layer shared across lines, mapping the features of each
    /// (t, ky) position to its logit. Requires pooling that keeps T and H.
    PerLine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub input: InputMode,
    pub channels: Vec<usize>,
    /// Odd cubic kernel; padding is `kernel / 2`.
    pub kernel: usize,
    pub pool: [usize; 3],
    pub dropout: f64,
    pub head: HeadKind,
}

impl DetectConfig {
    /// Four blocks of width 8/16/32/64, kernel 5, 2x2x2 pooling, global head.
    pub fn full(frames: usize, height: usize, width: usize) -> Self {
        DetectConfig {
            frames,
            height,
            width,
            input: InputMode::Image,
            channels: vec![8, 16, 32, 64],
            kernel: 5,
            pool: [2, 2, 2],
            dropout: 0.2,
            head: HeadKind::Global,
        }
    }

    /// Sized for single-core training: k-space input channels, pooling
    /// along the readout axis only, per-line head.
    pub fn desk(frames: usize, height: usize, width: usize) -> Self {
        DetectConfig {
            frames,
            height,
            width,
            input: InputMode::ImageKspace,
            channels: vec![8, 8, 8, 8],
            kernel: 3,
            pool: [1, 1, 2],
            dropout: 0.2,
            head: HeadKind::PerLine,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.is_multiple_of(2) || self.kernel == 0 {
            return Err(Error::Config(format!("kernel {} must be odd", self.kernel)));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config(
                "detector needs non-zero channel widths".into(),
            ));
        }
        if self.pool.contains(&0) {
            return Err(Error::Config("pool window components must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} not in [0, 1)",
                self.dropout
            )));
        }
        if self.head == HeadKind::PerLine && (self.pool[0] != 1 || self.pool[1] != 1) {
            return Err(Error::Config(
                "per-line head needs pooling that keeps T and H".into(),
            ));
        }
        crate::fourier::check_even(self.height, self.width)
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Feature shape `[C, T', H', W']` entering the head.
    pub fn feature_shape(&self) -> [usize; 4] {
        let mut d = [self.frames, self.height, self.width];
        for _ in &self.channels {
            for (x, p) in d.iter_mut().zip(self.pool) {
                *x = x.div_ceil(p);
            }
        }
        [*self.channels.last().unwrap(), d[0], d[1], d[2]]
    }
}

#[derive(Clone, Debug)]
pub struct DetectNet {
    pub config: DetectConfig,
    convs: Vec<(ParamId, ParamId)>,
    head: (ParamId, ParamId),
}

/// He-normal initialisation, zero bias.
pub(crate) fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

impl DetectNet {
    /// Registers parameters named `{prefix}conv{i}.w` etc. in `params`.
    pub fn new<R: Rng + ?Sized>(
        config: DetectConfig,
        params: &mut Params,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let k = config.kernel;
        let mut c_in = config.input.channels();
        let mut convs = Vec::new();
        for (i, &c) in config.channels.iter().enumerate() {
            let w = params.add(
                format!("{prefix}conv{i}.w"),
                he_normal(&[c, c_in, k, k, k], c_in * k * k * k, rng),
            )?;
            let b = params.add(format!("{prefix}conv{i}.b"), Tensor::zeros(&[c]))?;
            convs.push((w, b));
            c_in = c;
        }
        let [c, t, h, w] = config.feature_shape();
        let (fan_in, out) = match config.head {
            HeadKind::Global => (c * t * h * w, config.frames * config.height),
            HeadKind::PerLine => (c * w, 1),
        };
        let hw = params.add(
            format!("{prefix}head.w"),
            he_normal(&[fan_in, out], fan_in, rng),
        )?;
        let hb = params.add(format!("{prefix}head.b"), Tensor::zeros(&[out]))?;
        Ok(DetectNet {
            config,
            convs,
            head: (hw, hb),
        })
    }

    /// Rebind to parameters already present in `params` under `prefix`.
    pub fn bind(config: DetectConfig, params: &Params, prefix: &str) -> Result<Self> {
        config.validate()?;
        let find = |n: String| {
            params
                .find(&n)
                .ok_or_else(|| Error::Config(format!("missing parameter {n}")))
        };
        let convs = (0..config.channels.len())
            .map(|i| {
                Ok((
                    find(format!("{prefix}conv{i}.w"))?,
                    find(format!("{prefix}conv{i}.b"))?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let head = (
            find(format!("{prefix}head.w"))?,
            find(format!("{prefix}head.b"))?,
        );
        Ok(DetectNet {
            config,
            convs,
            head,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.convs.iter().flat_map(|&(w, b)| [w, b]).collect();
        v.extend([self.head.0, self.head.1]);
        v
    }

    pub fn parameter_count(&self, params: &Params) -> usize {
        self.param_ids()
            .iter()
            .map(|&id| params.get(id).len())
            .sum()
    }

    /// Records the network on `g` and returns the `[T, H]` probability node.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        params: &Params,
        input: &Tensor,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let c = &self.config;
        let expect = [1, c.input.channels(), c.frames, c.height, c.width];
        if input.shape() != expect {
            return Err(Error::invalid(format!(
                "detector expects input {expect:?}, got {:?}",
                input.shape()
            )));
        }
        let mut x = g.constant(input.clone());
        for &(w, b) in &self.convs {
            let (w, b) = (g.param(params, w), g.param(params, b));
            x = g.conv3d(x, w, b, 1, c.kernel / 2)?;
            x = g.relu(x);
            x = g.dropout(x, c.dropout, training, rng)?;
            x = g.maxpool3d(x, c.pool)?;
        }
        let [fc, ft, fh, fw] = c.feature_shape();
        let (hw, hb) = (g.param(params, self.head.0), g.param(params, self.head.1));
        let logits = match c.head {
            HeadKind::Global => {
                let flat = g.reshape(x, &[1, fc * ft * fh * fw])?;
                g.dense(flat, hw, hb)?
            }
            HeadKind::PerLine => {
                let p = g.permute(x, &[0, 2, 3, 1, 4])?;
                let rows = g.reshape(p, &[ft * fh, fc * fw])?;
                g.dense(rows, hw, hb)?
            }
        };
        let probs = g.sigmoid(logits);
        g.reshape(probs, &[c.frames, c.height])
    }
}

fn standardize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x = (*x - mean) / sd);
}

/// Added to relative line distances before the logarithm.
const NEAREST_FLOOR: f64 = 1e-12;

fn log_magnitude(values: impl Iterator<Item = f64> + Clone) -> Vec<f64> {
    let n = values.clone().count().max(1) as f64;
    let rms = (values.clone().map(|m| m * m).sum::<f64>() / n).sqrt();
    let floor = 1e-6 * rms.max(1e-300);
    let mut out: Vec<f64> = values.map(|m| (m + floor).ln()).collect();
    standardize(&mut out);
    out
}

/// Network input `[1, C, T, H, W]` built from measured k-space.
pub fn detector_input(ks: &KSpaceSequence, mode: InputMode) -> Tensor {
    let (t, h, w) = ks.dims();
    let plane = h * w;
    let image = from_kspace(ks);
    let mut data = image.into_data();
    if mode == InputMode::ImageKspace {
        let d = ks.data();
        data.extend(log_magnitude(d.iter().map(|z| z.norm())));
        let diff = |shift: usize| {
            log_magnitude((0..t * plane).map(move |i| {
                let (f, p) = (i / plane, i % plane);
                let g = (f + shift) % t;
                (d[f * plane + p] - d[g * plane + p]).norm()
            }))
        };
        data.extend(diff(t - 1));
        data.extend(diff(1));
        data.extend(log_magnitude((0..t * plane).map(|i| {
            let (f, p) = (i / plane, i % plane);
            let (a, b) = ((f + t - 1) % t, (f + 1) % t);
            (d[a * plane + p] + d[b * plane + p] - 2.0 * d[f * plane + p]).norm()
        })));
        let mut nearest = vec![0.0; t * h];
        for f in 0..t {
            for y in 0..h {
                let line = |g: usize| &d[g * plane + y * w..g * plane + (y + 1) * w];
                let own: f64 = line(f).iter().map(|z| z.norm_sqr()).sum();
                let closest = (0..t)
                    .filter(|&g| g != f)
                    .map(|g| {
                        line(f)
                            .iter()
                            .zip(line(g))
                            .map(|(a, b)| (a - b).norm_sqr())
                            .sum::<f64>()
                    })
                    .fold(f64::INFINITY, f64::min);
                nearest[f * h + y] = (closest / own.max(1e-300) + NEAREST_FLOOR).ln();
            }
        }
        standardize(&mut nearest);
        data.extend((0..t * plane).map(|i| nearest[(i / plane) * h + (i % plane) / w]));
    }
    Tensor::new(&[1, mode.channels(), t, h, w], data).expect("input shape")
}

/// Per-line probabilities of being uncorrupted.
#[derive(Clone, Debug, PartialEq)]
pub struct LineProb {
    frames: usize,
    lines: usize,
    data: Vec<f64>,
}

impl LineProb {
    pub fn new(frames: usize, lines: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != frames * lines {
            return Err(Error::invalid("probability grid size mismatch"));
        }
        if data.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("probabilities must lie in [0, 1]"));
        }
        Ok(LineProb {
            frames,
            lines,
            data,
        })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [f, l] => Self::new(*f, *l, t.data().to_vec()),
            s => Err(Error::invalid(format!(
                "expected [T, H] probabilities, got {s:?}"
            ))),
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn lines(&self) -> usize {
        self.lines
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, t: usize, ky: usize) -> f64 {
        self.data[t * self.lines + ky]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.frames, self.lines], self.data.clone()).expect("shape")
    }
}

/// Inference-mode probabilities for measured k-space.
pub fn detect_kspace(net: &DetectNet, params: &Params, ks: &KSpaceSequence) -> Result<LineProb> {
    let input = detector_input(ks, net.config.input);
    let mut g = Graph::new();
    let mut unused = crate::rng::stream(0, &[]);
    let p = net.forward(&mut g, params, &input, false, &mut unused)?;
    LineProb::from_tensor(g.value(p))
}

/// Runs the network on an image sequence; dropout is applied only when
/// `training` is set.
pub fn detect_forward<R: Rng + ?Sized>(
    net: &DetectNet,
    params: &Params,
    seq: &CineSequence,
    training: bool,
    rng: &mut R,
) -> Result<LineProb> {
    let (t, h, w) = seq.dims();
    let c = &net.config;
    if (t, h, w) != (c.frames, c.height, c.width) {
        return Err(Error::invalid(format!(
            "sequence {t}x{h}x{w} does not match detector {}x{}x{}",
            c.frames, c.height, c.width
        )));
    }
    let input = detector_input(&to_kspace(seq)?, c.input);
    let mut g = Graph::new();
    let p = net.forward(&mut g, params, &input, training, rng)?;
    LineProb::from_tensor(g.value(p))
}

/// Mask that is 1 where `prob >= tau`.
pub fn threshold_mask(prob: &LineProb, tau: f64) -> Result<LineMask> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid(format!("threshold {tau} not in (0, 1)")));
    }
    LineMask::from_flags(
        prob.frames,
        prob.lines,
        prob.data.iter().map(|&p| (p >= tau) as u8).collect(),
    )
}

fn linf(a: &[num_complex::Complex64], b: &[num_complex::Complex64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.re - y.re).abs().max((x.im - y.im).abs()))
        .fold(0.0, f64::max)
}

fn l2(a: &[num_complex::Complex64], b: &[num_complex::Complex64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).norm_sqr())
        .sum::<f64>()
        .sqrt()
}

/// Flags lines that duplicate another frame's line at the same ky.
///
/// Frames whose lines agree within `eps` (max-norm on re and im) form a
/// cluster. Within each cluster one member is trusted: the one whose line is
/// best predicted from trusted lines of other frames. The prediction for
/// member `m` is a least-squares combination of the [`ORACLE_NEIGHBOURS`]
/// trusted frames that look most like `m` on lines outside every cluster;
/// the weights are fitted on those lines. Clusters at one ky are resolved
/// greedily, most decisive first, and each resolved owner becomes available
/// as a predictor for the rest. A ky whose lines are identical in every
/// frame is left untouched.
pub fn duplicate_line_oracle(ks: &KSpaceSequence, eps: f64) -> Result<LineMask> {
    let (t, h, _) = ks.dims();
    if t < 2 {
        return Err(Error::invalid("duplicate oracle needs at least two frames"));
    }
    let line = |f: usize, ky: usize| ks.line(f, ky).expect("in range");
    // clustered[f * h + ky]: the line belongs to some duplicate cluster.
    let mut clustered = vec![false; t * h];
    let mut groups: Vec<Vec<Vec<usize>>> = vec![Vec::new(); h];
    for ky in 0..h {
        if (1..t).all(|f| linf(line(f, ky), line(0, ky)) <= eps) {
            continue;
        }
        let mut seen = vec![false; t];
        for a in 0..t {
            if seen[a] {
                continue;
            }
            let members: Vec<usize> = std::iter::once(a)
                .chain((a + 1..t).filter(|&b| !seen[b] && linf(line(a, ky), line(b, ky)) <= eps))
                .collect();
            if members.len() > 1 {
                for &m in &members {
                    seen[m] = true;
                    clustered[m * h + ky] = true;
                }
                groups[ky].push(members);
            }
        }
    }
    let clean = |f: usize, k: usize| !clustered[f * h + k];
    // Mean squared line distance between frames over lines clean in both.
    let mut dist = vec![f64::INFINITY; t * t];
    for a in 0..t {
        for b in a + 1..t {
            let (mut d, mut n) = (0.0, 0usize);
            for k in (0..h).filter(|&k| clean(a, k) && clean(b, k)) {
                d += l2(line(a, k), line(b, k)).powi(2);
                n += 1;
            }
            if n > 0 {
                dist[a * t + b] = d / n as f64;
                dist[b * t + a] = d / n as f64;
            }
        }
    }
    let mut mask = LineMask::ones(t, h);
    let score = |ky: usize, m: usize, trusted: &[bool]| -> f64 {
        let mut near: Vec<usize> = (0..t)
            .filter(|&f| trusted[f] && dist[m * t + f].is_finite())
            .collect();
        near.sort_by(|&a, &b| dist[m * t + a].total_cmp(&dist[m * t + b]).then(a.cmp(&b)));
        near.truncate(ORACLE_NEIGHBOURS);
        if near.is_empty() {
            return 0.0;
        }
        let fit: Vec<usize> = (0..h)
            .filter(|&k| k != ky && clean(m, k) && near.iter().all(|&f| clean(f, k)))
            .collect();
        let w = oracle_weights(&near, m, &fit, &line);
        let mut r = 0.0;
        for (x, &v) in line(m, ky).iter().enumerate() {
            let pred: num_complex::Complex64 =
                near.iter().zip(&w).map(|(&f, &c)| line(f, ky)[x] * c).sum();
            r += (v - pred).norm_sqr();
        }
        r.sqrt()
    };
    let mut resolved: Vec<Resolved> = Vec::new();
    for ky in 0..h {
        let mut trusted: Vec<bool> = (0..t).map(|f| clean(f, ky)).collect();
        let mut pending = groups[ky].clone();
        let first = resolved.len();
        while !pending.is_empty() {
            // (confidence, cluster index, owner)
            let mut pick: Option<(f64, usize, usize)> = None;
            for (gi, members) in pending.iter().enumerate() {
                let mut scored: Vec<(f64, usize)> = members
                    .iter()
                    .map(|&m| (score(ky, m, &trusted), m))
                    .collect();
                scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let conf = (scored[1].0 + 1e-300) / (scored[0].0 + 1e-300);
                if pick.is_none_or(|p| conf > p.0) {
                    pick = Some((conf, gi, scored[0].1));
                }
            }
            let (_, gi, owner) = pick.expect("pending is non-empty");
            let members = pending.remove(gi);
            for &m in &members {
                if m != owner {
                    mask.set(m, ky, false);
                }
            }
            trusted[owner] = true;
            resolved.push(Resolved {
                ky,
                members,
                costs: Vec::new(),
                owner,
            });
        }
        // Final costs: every other cluster's owner is trusted.
        for i in first..resolved.len() {
            let mut tr: Vec<bool> = (0..t).map(|f| clean(f, ky)).collect();
            for (j, r) in resolved.iter().enumerate().skip(first) {
                if j != i {
                    tr[r.owner] = true;
                }
            }
            let costs = resolved[i]
                .members
                .iter()
                .map(|&m| (score(ky, m, &tr) + 1e-300).ln())
                .collect();
            resolved[i].costs = costs;
        }
    }
    if let Some(owners) = balanced_owners(&resolved, t) {
        for (r, owner) in resolved.iter().zip(owners) {
            for &m in &r.members {
                mask.set(m, r.ky, m == owner);
            }
        }
    }
    Ok(mask)
}

struct Resolved {
    ky: usize,
    members: Vec<usize>,
    costs: Vec<f64>,
    owner: usize,
}

/// Re-chooses cluster owners so that every frame holds the same number of
/// copies, minimising the summed log-residual cost. The common count is the
/// total number of copies over `t`; returns `None` when no balanced choice
/// exists. Solved as a min-cost flow: source -> cluster (1) -> member (cost)
/// -> frame -> sink, where frame `f` must keep exactly
/// `memberships(f) - copies_per_frame` lines.
fn balanced_owners(resolved: &[Resolved], t: usize) -> Option<Vec<usize>> {
    if resolved.is_empty() {
        return None;
    }
    let copies: usize = resolved.iter().map(|r| r.members.len() - 1).sum();
    if !copies.is_multiple_of(t) {
        return None;
    }
    let per_frame = copies / t;
    let mut keep = vec![0isize; t];
    for r in resolved {
        for &m in &r.members {
            keep[m] += 1;
        }
    }
    for k in &mut keep {
        *k -= per_frame as isize;
        if *k < 0 {
            return None;
        }
    }
    let nc = resolved.len();
    let (src, sink) = (nc + t, nc + t + 1);
    let mut flow = MinCostFlow::new(nc + t + 2);
    let mut choice = Vec::with_capacity(nc);
    for (ci, r) in resolved.iter().enumerate() {
        flow.add_edge(src, ci, 1, 0.0);
        let edges: Vec<usize> = r
            .members
            .iter()
            .zip(&r.costs)
            .map(|(&m, &c)| flow.add_edge(ci, nc + m, 1, c))
            .collect();
        choice.push(edges);
    }
    for (f, &k) in keep.iter().enumerate() {
        if k > 0 {
            flow.add_edge(nc + f, sink, k, 0.0);
        }
    }
    if flow.run(src, sink, nc) < nc {
        return None;
    }
    Some(
        resolved
            .iter()
            .zip(&choice)
            .map(|(r, edges)| {
                let i = edges.iter().position(|&e| flow.used(e)).unwrap_or_else(|| {
                    r.members
                        .iter()
                        .position(|&m| m == r.owner)
                        .expect("owner is a member")
                });
                r.members[i]
            })
            .collect(),
    )
}

/// Successive-shortest-path min-cost flow with Bellman-Ford searches.
struct MinCostFlow {
    head: Vec<Vec<usize>>,
    to: Vec<usize>,
    cap: Vec<isize>,
    cost: Vec<f64>,
}

impl MinCostFlow {
    fn new(n: usize) -> Self {
        MinCostFlow {
            head: vec![Vec::new(); n],
            to: Vec::new(),
            cap: Vec::new(),
            cost: Vec::new(),
        }
    }

    fn add_edge(&mut self, a: usize, b: usize, cap: isize, cost: f64) -> usize {
        let e = self.to.len();
        for (from, to, c, w) in [(a, b, cap, cost), (b, a, 0, -cost)] {
            self.head[from].push(self.to.len());
            self.to.push(to);
            self.cap.push(c);
            self.cost.push(w);
        }
        e
    }

    fn used(&self, e: usize) -> bool {
        self.cap[e] == 0
    }

    /// Pushes up to `want` units; returns the amount sent.
    fn run(&mut self, s: usize, t: usize, want: usize) -> usize {
        let n = self.head.len();
        let mut sent = 0;
        while sent < want {
            let mut dist = vec![f64::INFINITY; n];
            let mut prev = vec![usize::MAX; n];
            dist[s] = 0.0;
            for _ in 0..n {
                let mut changed = false;
                for u in 0..n {
                    if !dist[u].is_finite() {
                        continue;
                    }
                    for &e in &self.head[u] {
                        let v = self.to[e];
                        let d = dist[u] + self.cost[e];
                        if self.cap[e] > 0 && d < dist[v] - 1e-12 {
                            dist[v] = d;
                            prev[v] = e;
                            changed = true;
                        }
                    }
                }
                if !changed {
                    break;
                }
            }
            if !dist[t].is_finite() {
                break;
            }
            let mut v = t;
            while v != s {
                let e = prev[v];
                self.cap[e] -= 1;
                self.cap[e ^ 1] += 1;
                v = self.to[e ^ 1];
            }
            sent += 1;
        }
        sent
    }
}

/// Neighbour frames combined by [`duplicate_line_oracle`].
pub const ORACLE_NEIGHBOURS: usize = 3;

/// Real weights `c` minimising `sum_k |line(m,k) - sum_i c_i line(nb_i,k)|^2`
/// over the lines `fit`. Falls back to equal weights when the system is
/// singular.
fn oracle_weights<'a>(
    nb: &[usize],
    m: usize,
    fit: &[usize],
    line: &dyn Fn(usize, usize) -> &'a [num_complex::Complex64],
) -> Vec<f64> {
    let n = nb.len();
    let mut a = vec![vec![0.0; n + 1]; n];
    for &k in fit {
        for i in 0..n {
            let li = line(nb[i], k);
            for j in 0..n {
                a[i][j] += li
                    .iter()
                    .zip(line(nb[j], k))
                    .map(|(x, y)| (x.conj() * y).re)
                    .sum::<f64>();
            }
            a[i][n] += li
                .iter()
                .zip(line(m, k))
                .map(|(x, y)| (x.conj() * y).re)
                .sum::<f64>();
        }
    }
    let equal = vec![1.0 / n as f64; n];
    // Gaussian elimination with partial pivoting on the normal equations.
    for c in 0..n {
        let p = (c..n)
            .max_by(|&x, &y| a[x][c].abs().total_cmp(&a[y][c].abs()))
            .unwrap();
        a.swap(c, p);
        let scale = a.iter().map(|r| r[c].abs()).fold(0.0, f64::max);
        if a[c][c].abs() <= 1e-12 * scale.max(1e-300) {
            return equal;
        }
        for r in 0..n {
            if r != c {
                let f = a[r][c] / a[c][c];
                for k in c..=n {
                    a[r][k] -= f * a[c][k];
                }
            }
        }
    }
    (0..n).map(|i| a[i][n] / a[i][i]).collect()
}

/// Area under the ROC curve for detecting corrupted lines, scoring each
/// line by `1 - prob` (ties count one half).
pub fn auroc(prob: &LineProb, truth: &LineMask) -> Result<f64> {
    auroc_scores(
        &prob.data.iter().map(|p| 1.0 - p).collect::<Vec<_>>(),
        &truth.flags().iter().map(|&f| f == 0).collect::<Vec<_>>(),
    )
}

/// AUROC of `scores` for binary `positive` labels.
pub fn auroc_scores(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::invalid("scores and labels differ in length"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut rank_sum, mut n_pos) = (0.0, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if positive[k] {
                rank_sum += avg_rank;
                n_pos += 1;
            }
        }
        i = j + 1;
    }
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateInput("AUROC needs both classes".into()));
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}
