//! Planar in-hand pose and the downstream regression head.

use std::f64::consts::{PI, TAU};
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::codec::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::functaset::Functaset;
use crate::inference::LatentPosterior;
use crate::linalg::{gemm_ab, gemm_abt, gemm_atb_acc};
use crate::numerics::{AdamState, RngStream};

/// Wraps an angle into (−π, π].
pub fn wrap_angle(theta: f64) -> f64 {
    let w = theta - TAU * ((theta - PI) / TAU).ceil();
    // ceil can land exactly on −π for inputs a hair above an odd multiple of π.
    if w <= -PI {
        w + TAU
    } else {
        w
    }
}

/// SE(2) pose: position in meters, heading in radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseSE2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl PoseSE2 {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.x, self.y, self.theta]
    }

    /// Rounds every component through f32, the storage precision.
    pub fn to_storage_precision(self) -> Self {
        Self {
            x: self.x as f32 as f64,
            y: self.y as f32 as f64,
            theta: self.theta as f32 as f64,
        }
    }
}

/// `ε = √(δx² + δy² + δθ²)` with `δθ` wrapped into (−π, π].
pub fn pose_error(pred: &PoseSE2, truth: &PoseSE2) -> f64 {
    let dx = pred.x - truth.x;
    let dy = pred.y - truth.y;
    let dt = wrap_angle(pred.theta - truth.theta);
    (dx * dx + dy * dy + dt * dt).sqrt()
}

pub const THED_MAGIC: &[u8; 4] = b"THED";
pub const THED_VERSION: u16 = 1;

/// Fully connected ReLU regressor from a latent to (x, y, θ). Each layer is
/// stored as a row-major `out × in` weight followed by its bias.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    dims: Vec<usize>,
    data: Vec<f64>,
}

fn head_param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

impl HeadParams {
    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("bad head dims {dims:?}")));
        }
        if *dims.last().unwrap() != 3 {
            return Err(Error::dim("head output", 3, *dims.last().unwrap()));
        }
        let n = head_param_count(&dims);
        Ok(Self {
            dims,
            data: vec![0.0; n],
        })
    }

    pub fn from_flat(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let mut h = Self::zeros(dims)?;
        if data.len() != h.data.len() {
            return Err(Error::dim("head parameters", h.data.len(), data.len()));
        }
        h.data = data;
        Ok(h)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    fn offset(&self, layer: usize) -> usize {
        head_param_count(&self.dims[..=layer])
    }

    pub fn weight(&self, layer: usize) -> &[f64] {
        let o = self.offset(layer);
        &self.data[o..o + self.dims[layer + 1] * self.dims[layer]]
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut [f64] {
        let o = self.offset(layer);
        let n = self.dims[layer + 1] * self.dims[layer];
        &mut self.data[o..o + n]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        let o = self.offset(layer) + self.dims[layer + 1] * self.dims[layer];
        &self.data[o..o + self.dims[layer + 1]]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [f64] {
        let o = self.offset(layer) + self.dims[layer + 1] * self.dims[layer];
        let n = self.dims[layer + 1];
        &mut self.data[o..o + n]
    }

    pub fn to_storage_precision(&self) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| v as f32 as f64).collect(),
        }
    }

    /// Raw outputs for `n` row-major inputs. Returns every layer's
    /// activations, the last being the `n × 3` output.
    fn forward_batch(&self, n: usize, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.layers() + 1);
        acts.push(x.to_vec());
        for l in 0..self.layers() {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let mut out = vec![0.0; n * fan_out];
            for row in out.chunks_exact_mut(fan_out) {
                row.copy_from_slice(self.bias(l));
            }
            gemm_abt(n, fan_in, fan_out, &acts[l], self.weight(l), &mut out, true);
            if l + 1 < self.layers() {
                for v in &mut out {
                    *v = v.max(0.0);
                }
            }
            acts.push(out);
        }
        acts
    }

    pub fn forward(&self, z: &[f64]) -> Result<[f64; 3]> {
        if z.len() != self.input_dim() {
            return Err(Error::dim("head input", self.input_dim(), z.len()));
        }
        let out = self.forward_batch(1, z).pop().unwrap();
        Ok([out[0], out[1], out[2]])
    }
}

pub fn predict_pose(head: &HeadParams, z: &[f64]) -> Result<PoseSE2> {
    let [x, y, t] = head.forward(z)?;
    let p = PoseSE2::new(x, y, t);
    if !(p.x.is_finite() && p.y.is_finite() && p.theta.is_finite()) {
        return Err(Error::NonFinite("pose prediction"));
    }
    Ok(p)
}

pub fn predict_batch(head: &HeadParams, zs: &[Vec<f64>]) -> Result<Vec<PoseSE2>> {
    zs.par_iter().map(|z| predict_pose(head, z)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub wrap_angle: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 200,
            batch_size: 32,
            seed: 0,
            hidden: vec![512; 3],
            wrap_angle: true,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("head epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("head lr must be positive".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("head hidden widths must be positive".into()));
        }
        Ok(())
    }

    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        fn parse<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value {v:?} for {k}")))
        }
        for (k, v) in pairs {
            match k.as_str() {
                "lr" => self.lr = parse(k, v)?,
                "epochs" => self.epochs = parse(k, v)?,
                "batch_size" => self.batch_size = parse(k, v)?,
                "seed" => self.seed = parse(k, v)?,
                "wrap_angle" => self.wrap_angle = parse(k, v)?,
                "hidden" => {
                    self.hidden = v
                        .split(',')
                        .map(|s| parse(k, s.trim()))
                        .collect::<Result<_>>()?
                }
                _ => return Err(Error::Config(format!("unknown key {k}"))),
            }
        }
        Ok(())
    }
}

/// Per-dimension mean and standard deviation, with zero spread read as 1.
fn standardization(xs: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = xs[0].len();
    let n = xs.len() as f64;
    let mut mean = vec![0.0; d];
    for x in xs {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v / n;
        }
    }
    let mut sd = vec![0.0; d];
    for x in xs {
        for ((s, v), m) in sd.iter_mut().zip(x).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    for s in &mut sd {
        *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
    }
    (mean, sd)
}

fn residual(pred: &[f64], truth: &[f64; 3], wrap: bool) -> [f64; 3] {
    let dt = pred[2] - truth[2];
    [
        pred[0] - truth[0],
        pred[1] - truth[1],
        if wrap { wrap_angle(dt) } else { dt },
    ]
}

/// Mean over samples and components of squared residuals, θ wrapped.
pub fn head_loss(head: &HeadParams, zs: &[Vec<f64>], poses: &[PoseSE2], wrap: bool) -> Result<f64> {
    if zs.len() != poses.len() || zs.is_empty() {
        return Err(Error::dim("head loss inputs", zs.len(), poses.len()));
    }
    let mut total = 0.0;
    for (z, p) in zs.iter().zip(poses) {
        let out = head.forward(z)?;
        total += residual(&out, &p.as_array(), wrap).iter().map(|r| r * r).sum::<f64>();
    }
    Ok(total / (3 * zs.len()) as f64)
}

/// Latents and pose labels of a functaset; fails on the first unlabeled
/// record.
pub fn labeled_latents(fs: &Functaset) -> Result<(Vec<Vec<f64>>, Vec<PoseSE2>)> {
    let mut zs = Vec::with_capacity(fs.len());
    let mut poses = Vec::with_capacity(fs.len());
    for f in &fs.functas {
        let p = f.pose.ok_or(Error::Unlabeled {
            sample_id: f.sample_id,
        })?;
        zs.push(f.latent().0);
        poses.push(p);
    }
    Ok((zs, poses))
}

/// Trains the head with Adam on the wrapped pose MSE. Inputs are
/// standardized during training and the statistics folded into the first
/// layer afterwards. The returned curve holds each epoch's mean batch loss.
pub fn train_head(fs: &Functaset, cfg: &HeadConfig) -> Result<(HeadParams, Vec<f64>)> {
    let (zs, poses) = labeled_latents(fs)?;
    train_head_on(&zs, &poses, cfg)
}

pub fn train_head_on(
    zs: &[Vec<f64>],
    poses: &[PoseSE2],
    cfg: &HeadConfig,
) -> Result<(HeadParams, Vec<f64>)> {
    cfg.validate()?;
    if zs.is_empty() || zs.len() != poses.len() {
        return Err(Error::Dataset("head training needs one pose per latent".into()));
    }
    let d = zs[0].len();
    if let Some(z) = zs.iter().find(|z| z.len() != d) {
        return Err(Error::LatentDimMismatch {
            header: d,
            found: z.len(),
        });
    }
    let mut dims = vec![d];
    dims.extend(&cfg.hidden);
    dims.push(3);
    let mut head = HeadParams::zeros(dims)?;

    let mut init = RngStream::derive(cfg.seed, 0);
    for l in 0..head.layers() {
        let fan_in = head.dims[l] as f64;
        let gain = if l + 1 < head.layers() { 2.0 } else { 1e-4 };
        let sd = (gain / fan_in).sqrt();
        let w = init.gaussian(head.weight(l).len());
        for (p, g) in head.weight_mut(l).iter_mut().zip(w) {
            *p = sd * g;
        }
    }
    let (mu, sd) = standardization(zs);
    let xs: Vec<f64> = zs
        .iter()
        .flat_map(|z| z.iter().zip(&mu).zip(&sd).map(|((v, m), s)| (v - m) / s))
        .collect();
    let targets: Vec<[f64; 3]> = poses.iter().map(|p| p.as_array()).collect();
    // Start the output at the mean pose.
    let n = zs.len();
    let mean_pose = mean_pose_of(poses);
    head.bias_mut(head.layers() - 1)
        .copy_from_slice(&[mean_pose.x, mean_pose.y, mean_pose.theta]);

    let batch = cfg.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle = RngStream::derive(cfg.seed, 1);
    let mut opt = AdamState::new(head.data.len());
    let mut grads = vec![0.0; head.data.len()];
    let mut xb = vec![0.0; batch * d];
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        shuffle.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for idx in order.chunks(batch) {
            let m = idx.len();
            for (r, &i) in idx.iter().enumerate() {
                xb[r * d..(r + 1) * d].copy_from_slice(&xs[i * d..(i + 1) * d]);
            }
            let loss = head_grads(&head, m, &xb[..m * d], idx.iter().map(|&i| &targets[i]), cfg.wrap_angle, &mut grads);
            if !loss.is_finite() {
                return Err(Error::Divergence { step: epoch });
            }
            epoch_loss += loss;
            batches += 1;
            opt.step(&mut head.data, &grads, cfg.lr)?;
        }
        curve.push(epoch_loss / batches as f64);
    }

    // Fold (z − μ)/σ into the first layer.
    let fan_out = head.dims[1];
    let mut shift = vec![0.0; fan_out];
    {
        let w = head.weight_mut(0);
        for (o, s) in shift.iter_mut().enumerate() {
            for k in 0..d {
                w[o * d + k] /= sd[k];
                *s += w[o * d + k] * mu[k];
            }
        }
    }
    for (b, s) in head.bias_mut(0).iter_mut().zip(shift) {
        *b -= s;
    }
    if !head.data.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("head parameters"));
    }
    Ok((head, curve))
}

/// Loss of one batch and its gradient, written into `grads`.
fn head_grads<'a>(
    head: &HeadParams,
    n: usize,
    x: &[f64],
    targets: impl Iterator<Item = &'a [f64; 3]>,
    wrap: bool,
    grads: &mut [f64],
) -> f64 {
    let acts = head.forward_batch(n, x);
    let out = acts.last().unwrap();
    let scale = 1.0 / (3 * n) as f64;
    let mut delta = vec![0.0; n * 3];
    let mut loss = 0.0;
    for (r, t) in targets.enumerate() {
        let res = residual(&out[r * 3..r * 3 + 3], t, wrap);
        for c in 0..3 {
            loss += res[c] * res[c] * scale;
            delta[r * 3 + c] = 2.0 * res[c] * scale;
        }
    }
    grads.fill(0.0);
    let mut offset_end = grads.len();
    for l in (0..head.layers()).rev() {
        let (fan_in, fan_out) = (head.dims[l], head.dims[l + 1]);
        let start = offset_end - fan_out * fan_in - fan_out;
        let (gw, gb) = grads[start..offset_end].split_at_mut(fan_out * fan_in);
        gemm_atb_acc(n, fan_out, fan_in, &delta, &acts[l], gw);
        for row in delta.chunks_exact(fan_out) {
            for (b, v) in gb.iter_mut().zip(row) {
                *b += v;
            }
        }
        offset_end = start;
        if l > 0 {
            let mut prev = vec![0.0; n * fan_in];
            gemm_ab(n, fan_out, fan_in, &delta, head.weight(l), &mut prev);
            for (p, a) in prev.iter_mut().zip(&acts[l]) {
                if *a <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
    }
    loss
}

/// Arithmetic mean of x and y, circular mean of θ.
pub fn mean_pose_of(poses: &[PoseSE2]) -> PoseSE2 {
    let n = poses.len() as f64;
    let (mut x, mut y, mut s, mut c) = (0.0, 0.0, 0.0, 0.0);
    for p in poses {
        x += p.x;
        y += p.y;
        s += p.theta.sin();
        c += p.theta.cos();
    }
    PoseSE2::new(x / n, y / n, s.atan2(c))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosePosterior {
    pub samples: Vec<PoseSE2>,
    pub mean: PoseSE2,
    /// Sample covariance of (x, y, θ − mean θ wrapped).
    pub covariance: [[f64; 3]; 3],
}

/// Pushes every latent sample through the head.
pub fn pose_posterior(head: &HeadParams, posterior: &LatentPosterior) -> Result<PosePosterior> {
    if posterior.is_empty() {
        return Err(Error::NoValidChains);
    }
    let zs: Vec<Vec<f64>> = posterior.samples().map(|z| z.0.clone()).collect();
    let samples = predict_batch(head, &zs)?;
    let mean = if samples.len() == 1 {
        samples[0]
    } else {
        mean_pose_of(&samples)
    };
    let rows: Vec<[f64; 3]> = samples
        .iter()
        .map(|p| [p.x, p.y, wrap_angle(p.theta - mean.theta)])
        .collect();
    let mut covariance = [[0.0; 3]; 3];
    let n = rows.len();
    if n > 1 {
        let mut centre = [0.0; 3];
        for r in &rows {
            for k in 0..3 {
                centre[k] += r[k] / n as f64;
            }
        }
        for r in &rows {
            for i in 0..3 {
                for j in 0..3 {
                    covariance[i][j] += (r[i] - centre[i]) * (r[j] - centre[j]) / (n - 1) as f64;
                }
            }
        }
    }
    Ok(PosePosterior {
        samples,
        mean,
        covariance,
    })
}

pub fn encode_head(head: &HeadParams) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(THED_MAGIC);
    w.u16(THED_VERSION);
    w.u32(head.dims.len() as u32);
    for &d in &head.dims {
        w.u32(d as u32);
    }
    for &v in &head.data {
        w.f32(v as f32);
    }
    w.finish()
}

pub fn decode_head(bytes: &[u8]) -> Result<HeadParams> {
    let mut r = Reader::new("THED", bytes);
    r.header(THED_MAGIC, THED_VERSION)?;
    let count = r.u32()? as usize;
    if !(2..=64).contains(&count) {
        return Err(Error::format("THED", format!("{count} layer dims")));
    }
    let dims = (0..count)
        .map(|_| r.u32().map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    if dims.contains(&0) || dims[count - 1] != 3 {
        return Err(Error::format("THED", format!("bad layer dims {dims:?}")));
    }
    let n = head_param_count(&dims);
    let data = r.f32_vec(n)?.into_iter().map(f64::from).collect();
    r.finish()?;
    HeadParams::from_flat(dims, data)
}

pub fn save_head(head: &HeadParams, path: &Path) -> Result<()> {
    write_file(path, &encode_head(head))
}

pub fn load_head(path: &Path) -> Result<HeadParams> {
    decode_head(&read_file(path)?)
}

/// One row per prediction: `sample_id,x,y,theta,eps`, with `eps` empty when
/// the truth is unknown.
pub fn write_pose_csv<W: Write>(
    mut out: W,
    rows: &[(u64, PoseSE2, Option<PoseSE2>)],
) -> Result<()> {
    writeln!(out, "sample_id,x,y,theta,eps")?;
    for (id, p, truth) in rows {
        let eps = truth.map_or(String::new(), |t| format!("{:e}", pose_error(p, &t)));
        writeln!(out, "{id},{:e},{:e},{:e},{eps}", p.x, p.y, p.theta)?;
    }
    Ok(())
}
