//! Bi-level meta-learning of the shared trunk.
//!
//! The inner loop fits a per-sample latent by plain gradient descent from
//! `z = 0`; the outer loop takes the reconstruction loss at the fitted latent
//! and updates `θ` and `W` with Adam. Meta-gradients are first order: the
//! inner trajectory is treated as constant.

use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{AdamState, RngStream};
use crate::siren::{
    backward_with, forward_with, grad_z_with, grid_coords, init_trunk, recon_loss, Modulation,
    Scratch, TrunkArch, TrunkParams,
};
use crate::synthgen::TactileImage;

#[derive(Clone, Debug, PartialEq)]
pub struct MetaConfig {
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub batch_size: usize,
    pub outer_steps: usize,
    pub seed: u64,
    /// Reserved for differentiating through the inner loop. Only `false` is
    /// supported.
    pub second_order: bool,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            inner_steps: 3,
            inner_lr: 1e-2,
            outer_lr: 1e-4,
            batch_size: 4,
            outer_steps: 2000,
            seed: 0,
            second_order: false,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inner_steps == 0 {
            return Err(Error::InvalidArgument("inner_steps must be >= 1".into()));
        }
        if !(self.inner_lr > 0.0 && self.outer_lr > 0.0) {
            return Err(Error::InvalidArgument("learning rates must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if self.second_order {
            return Err(Error::InvalidArgument(
                "second-order meta-gradients are not supported".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLogEntry {
    pub step: usize,
    /// Mean post-inner-loop reconstruction loss over the batch.
    pub loss: f64,
    pub wall_secs: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub entries: Vec<TrainLogEntry>,
}

impl TrainLog {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.loss).collect()
    }
}

/// `steps` gradient-descent updates of `z` with the trunk frozen. The loss at
/// each iterate is checked before the update; a non-finite value reports
/// that step index.
pub(crate) fn descend(
    trunk: &TrunkParams,
    coords: &[f64],
    target: &[f64],
    steps: usize,
    lr: f64,
    z0: &[f64],
    scratch: &mut Scratch,
) -> Result<Vec<f64>> {
    let mut z = z0.to_vec();
    for step in 0..steps {
        let (loss, g) = grad_z_with(trunk, &z, coords, target, scratch)?;
        if !loss.is_finite() || !g.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence { step });
        }
        for (zi, gi) in z.iter_mut().zip(&g) {
            *zi -= lr * gi;
        }
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence { step });
        }
    }
    Ok(z)
}

pub(crate) fn loss_at(
    trunk: &TrunkParams,
    coords: &[f64],
    target: &[f64],
    z: &[f64],
    scratch: &mut Scratch,
) -> Result<f64> {
    let mut pred = vec![0.0; target.len()];
    forward_with(trunk, z, coords, &mut pred, scratch)?;
    recon_loss(&pred, target)
}

pub(crate) fn check_image(trunk: &TrunkParams, image: &TactileImage) -> Result<()> {
    let arch = trunk.arch();
    if arch.in_dim != 2 || arch.out_dim != 1 {
        return Err(Error::InvalidArgument(
            "tactile images need a trunk with in_dim 2 and out_dim 1".into(),
        ));
    }
    image.validate()
}

/// Fits a latent to one image: `z ← z − lr·∇z` for exactly `steps` updates.
/// Returns the latent and the reconstruction loss at it.
pub fn inner_fit(
    trunk: &TrunkParams,
    image: &TactileImage,
    steps: usize,
    lr: f64,
    z0: &Modulation,
) -> Result<(Modulation, f64)> {
    check_image(trunk, image)?;
    let coords = grid_coords(image.height, image.width);
    let mut scratch = Scratch::default();
    let z = descend(trunk, &coords, &image.values, steps, lr, z0.as_slice(), &mut scratch)?;
    let loss = loss_at(trunk, &coords, &image.values, &z, &mut scratch)?;
    if !loss.is_finite() {
        return Err(Error::Divergence { step: steps });
    }
    Ok((Modulation(z), loss))
}

pub(crate) fn check_shapes(images: &[TactileImage]) -> Result<(usize, usize)> {
    let first = images
        .first()
        .ok_or_else(|| Error::Dataset("dataset is empty".into()))?;
    let shape = first.shape();
    for img in images {
        if img.shape() != shape {
            return Err(Error::Dataset(format!(
                "sample {} is {}x{}, expected {}x{}",
                img.sample_id, img.height, img.width, shape.0, shape.1
            )));
        }
    }
    Ok(shape)
}

/// One outer update over `batch`. Returns the mean post-inner loss.
pub fn outer_step(
    trunk: &mut TrunkParams,
    batch: &[TactileImage],
    cfg: &MetaConfig,
    opt: &mut AdamState,
) -> Result<f64> {
    cfg.validate()?;
    let (h, w) = check_shapes(batch)?;
    for img in batch {
        check_image(trunk, img)?;
    }
    let coords = grid_coords(h, w);
    let d = trunk.arch().latent_dim;
    let frozen: &TrunkParams = trunk;
    let per_sample: Vec<(f64, Vec<f64>)> = batch
        .par_iter()
        .map_init(Scratch::default, |scratch, img| {
            let z = descend(frozen, &coords, &img.values, cfg.inner_steps, cfg.inner_lr, &vec![0.0; d], scratch)
                .map_err(|e| match e {
                    Error::Divergence { step } => Error::SampleDivergence {
                        sample_id: img.sample_id,
                        step,
                    },
                    other => other,
                })?;
            let g = backward_with(frozen, &z, &coords, &img.values, scratch)?;
            if !g.loss.is_finite() {
                return Err(Error::SampleDivergence {
                    sample_id: img.sample_id,
                    step: cfg.inner_steps,
                });
            }
            Ok((g.loss, g.params.as_flat().to_vec()))
        })
        .collect::<Result<_>>()?;

    // Reduce in sample order so the result does not depend on scheduling.
    let mut grad = vec![0.0; trunk.as_flat().len()];
    let mut loss = 0.0;
    for (l, g) in &per_sample {
        loss += l;
        for (acc, v) in grad.iter_mut().zip(g) {
            *acc += v;
        }
    }
    let inv = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    opt.step(trunk.as_flat_mut(), &grad, cfg.outer_lr)?;
    Ok(loss * inv)
}

/// Seeded mini-batch meta-training. Batches are drawn without replacement
/// from a per-epoch shuffle; a short tail is dropped.
pub fn train_trunk(
    dataset: &[TactileImage],
    arch: TrunkArch,
    cfg: &MetaConfig,
) -> Result<(TrunkParams, TrainLog)> {
    train_trunk_with(dataset, arch, cfg, |_| {})
}

/// As [`train_trunk`], calling `on_step` after every outer step.
pub fn train_trunk_with(
    dataset: &[TactileImage],
    arch: TrunkArch,
    cfg: &MetaConfig,
    mut on_step: impl FnMut(&TrainLogEntry),
) -> Result<(TrunkParams, TrainLog)> {
    cfg.validate()?;
    arch.validate()?;
    check_shapes(dataset)?;
    let mut trunk = init_trunk(arch, &mut RngStream::derive(cfg.seed, 0))?;
    let mut order_rng = RngStream::derive(cfg.seed, 1);
    let mut opt = AdamState::new(trunk.as_flat().len());
    let batch_size = cfg.batch_size.min(dataset.len());
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len();
    let mut log = TrainLog::default();
    let mut batch = Vec::with_capacity(batch_size);

    for step in 0..cfg.outer_steps {
        if cursor + batch_size > order.len() {
            order_rng.shuffle(&mut order);
            cursor = 0;
        }
        batch.clear();
        batch.extend(order[cursor..cursor + batch_size].iter().map(|&i| dataset[i].clone()));
        cursor += batch_size;

        let started = Instant::now();
        let loss = outer_step(&mut trunk, &batch, cfg, &mut opt)?;
        let entry = TrainLogEntry {
            step,
            loss,
            wall_secs: started.elapsed().as_secs_f64(),
        };
        on_step(&entry);
        log.entries.push(entry);
    }
    Ok((trunk, log))
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected key=value", lineno + 1))
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
        }
        out.push((k.replace('-', "_"), v.to_string()));
    }
    Ok(out)
}

impl MetaConfig {
    /// Applies `key=value` overrides; unknown keys are errors.
    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        fn parse<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("invalid value '{v}' for {k}")))
        }
        for (k, v) in pairs {
            match k.as_str() {
                "inner_steps" => self.inner_steps = parse(k, v)?,
                "inner_lr" => self.inner_lr = parse(k, v)?,
                "outer_lr" => self.outer_lr = parse(k, v)?,
                "batch_size" => self.batch_size = parse(k, v)?,
                "outer_steps" => self.outer_steps = parse(k, v)?,
                "seed" => self.seed = parse(k, v)?,
                "second_order" => self.second_order = parse(k, v)?,
                _ => return Err(Error::Config(format!("unknown key '{k}'"))),
            }
        }
        Ok(())
    }
}
