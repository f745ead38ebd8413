//! Latents for new inputs: point estimates, Langevin posterior samples and
//! nearest-neighbour retrieval over a functaset.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::functaset::Functaset;
use crate::metatrain::{check_image, descend, inner_fit, loss_at};
use crate::numerics::RngStream;
use crate::siren::{grad_z_with, grid_coords, Modulation, Scratch, TrunkParams};
use crate::synthgen::TactileImage;

/// Point estimate by plain gradient descent; the same routine the inner loop
/// of training uses.
pub fn infer_point(
    trunk: &TrunkParams,
    image: &TactileImage,
    steps: usize,
    lr: f64,
    z0: &Modulation,
) -> Result<(Modulation, f64)> {
    inner_fit(trunk, image, steps, lr, z0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgldConfig {
    pub chains: usize,
    pub steps: usize,
    pub step_size: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SgldConfig {
    fn default() -> Self {
        Self {
            chains: 100,
            steps: 3,
            step_size: 1e-2,
            sigma: 0.01,
            seed: 0,
        }
    }
}

impl SgldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 || self.steps == 0 {
            return Err(Error::Config("sgld needs at least one chain and one step".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config("sgld step_size must be positive".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config("sgld sigma must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Chain {
    pub index: usize,
    pub z: Modulation,
    pub loss: f64,
}

/// Surviving chains in chain order, plus the indices of chains that diverged.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPosterior {
    pub chains: Vec<Chain>,
    pub invalid: Vec<usize>,
}

impl LatentPosterior {
    pub fn len(&self) -> usize {
        self.chains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chains.is_empty()
    }

    pub fn samples(&self) -> impl Iterator<Item = &Modulation> {
        self.chains.iter().map(|c| &c.z)
    }

    /// CSV with header `chain,dim0..dim{d-1},loss`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let d = self.chains.first().map_or(0, |c| c.z.len());
        let mut header = String::from("chain");
        for k in 0..d {
            header.push_str(&format!(",dim{k}"));
        }
        writeln!(out, "{header},loss")?;
        for c in &self.chains {
            let mut line = c.index.to_string();
            for v in c.z.as_slice() {
                line.push_str(&format!(",{v:e}"));
            }
            writeln!(out, "{line},{:e}", c.loss)?;
        }
        Ok(())
    }
}

/// Independent short Langevin chains from `z0`:
/// `z ← z − η·∇z + √(2η)·σ·ξ`, chain `c` drawing ξ from `RngStream::derive(seed, c)`.
/// A diverging chain is dropped and recorded; the call fails only if every
/// chain diverges.
pub fn sgld_sample(
    trunk: &TrunkParams,
    image: &TactileImage,
    cfg: &SgldConfig,
    z0: &Modulation,
) -> Result<LatentPosterior> {
    cfg.validate()?;
    check_image(trunk, image)?;
    if z0.len() != trunk.arch().latent_dim {
        return Err(Error::dim("initial latent", trunk.arch().latent_dim, z0.len()));
    }
    let coords = grid_coords(image.height, image.width);
    let target = &image.values;
    let eta = cfg.step_size;
    let noise = (2.0 * eta).sqrt() * cfg.sigma;

    // Every chain starts at z0, so the first gradient is shared.
    let mut scratch = Scratch::default();
    let first = grad_z_with(trunk, z0.as_slice(), &coords, target, &mut scratch)?;

    type ChainResult = (usize, Option<(Vec<f64>, f64)>);
    let results: Vec<ChainResult> = (0..cfg.chains)
        .into_par_iter()
        .map_init(Scratch::default, |scratch, c| {
            let mut rng = RngStream::derive(cfg.seed, c as u64);
            let mut xi = vec![0.0; z0.len()];
            let mut z = z0.0.clone();
            for step in 0..cfg.steps {
                let (loss, g) = if step == 0 {
                    first.clone()
                } else {
                    match grad_z_with(trunk, &z, &coords, target, scratch) {
                        Ok(v) => v,
                        Err(_) => return (c, None),
                    }
                };
                if !loss.is_finite() || !g.iter().all(|v| v.is_finite()) {
                    return (c, None);
                }
                for (zi, gi) in z.iter_mut().zip(&g) {
                    *zi -= eta * gi;
                }
                if cfg.sigma > 0.0 {
                    rng.fill_gaussian(&mut xi);
                    for (zi, e) in z.iter_mut().zip(&xi) {
                        *zi += noise * e;
                    }
                }
                if !z.iter().all(|v| v.is_finite()) {
                    return (c, None);
                }
            }
            match loss_at(trunk, &coords, target, &z, scratch) {
                Ok(l) if l.is_finite() => (c, Some((z, l))),
                _ => (c, None),
            }
        })
        .collect();

    let mut post = LatentPosterior {
        chains: Vec::with_capacity(cfg.chains),
        invalid: Vec::new(),
    };
    for (index, r) in results {
        match r {
            Some((z, loss)) => post.chains.push(Chain {
                index,
                z: Modulation(z),
                loss,
            }),
            None => post.invalid.push(index),
        }
    }
    if post.chains.is_empty() {
        return Err(Error::NoValidChains);
    }
    Ok(post)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Neighbor {
    pub sample_id: u64,
    pub distance: f64,
    pub weight: f64,
}

/// The `k` stored latents nearest `z_q` (Euclidean, ties by ascending
/// sample id) with inverse-distance weights. A neighbour closer than 1e-12
/// takes weight 1 and the rest 0.
pub fn knn_query(fs: &Functaset, z_q: &[f64], k: usize) -> Result<Vec<Neighbor>> {
    if k == 0 || k > fs.len() {
        return Err(Error::InvalidArgument(format!(
            "k must be in 1..={}, got {k}",
            fs.len()
        )));
    }
    if z_q.len() != fs.latent_dim {
        return Err(Error::dim("query latent", fs.latent_dim, z_q.len()));
    }
    let mut all: Vec<(f64, u64)> = fs
        .functas
        .par_iter()
        .map(|f| {
            let d2: f64 = f
                .z
                .iter()
                .zip(z_q)
                .map(|(&a, &b)| {
                    let t = a as f64 - b;
                    t * t
                })
                .sum();
            (d2.sqrt(), f.sample_id)
        })
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.truncate(k);

    let exact = all.iter().position(|(d, _)| *d < 1e-12);
    let weights: Vec<f64> = match exact {
        Some(i) => (0..k).map(|j| if j == i { 1.0 } else { 0.0 }).collect(),
        None => {
            let total: f64 = all.iter().map(|(d, _)| 1.0 / d).sum();
            all.iter().map(|(d, _)| (1.0 / d) / total).collect()
        }
    };
    Ok(all
        .into_iter()
        .zip(weights)
        .map(|((distance, sample_id), weight)| Neighbor {
            sample_id,
            distance,
            weight,
        })
        .collect())
}

/// Weighted combination of the neighbours' stored latents.
pub fn blend(fs: &Functaset, neighbors: &[Neighbor]) -> Result<Modulation> {
    let mut z = vec![0.0; fs.latent_dim];
    for n in neighbors {
        let f = fs
            .get(n.sample_id)
            .ok_or_else(|| Error::Dataset(format!("sample {} not in functaset", n.sample_id)))?;
        for (zi, &v) in z.iter_mut().zip(&f.z) {
            *zi += n.weight * v as f64;
        }
    }
    Ok(Modulation(z))
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnnEmbedding {
    pub z: Modulation,
    pub loss: f64,
    pub neighbors: Vec<Neighbor>,
}

/// Warm start from the functaset: `warm_steps` of descent from zero give a
/// query latent, the `k` nearest stored latents are blended, then
/// `refine_steps` of descent polish the blend.
pub fn knn_embed(
    trunk: &TrunkParams,
    fs: &Functaset,
    image: &TactileImage,
    k: usize,
    warm_steps: usize,
    refine_steps: usize,
    lr: f64,
) -> Result<KnnEmbedding> {
    if fs.is_empty() {
        return Err(Error::Dataset("empty functaset".into()));
    }
    check_image(trunk, image)?;
    let d = trunk.arch().latent_dim;
    if fs.latent_dim != d {
        return Err(Error::LatentDimMismatch {
            header: fs.latent_dim,
            found: d,
        });
    }
    let coords = grid_coords(image.height, image.width);
    let mut scratch = Scratch::default();
    let query = descend(trunk, &coords, &image.values, warm_steps, lr, &vec![0.0; d], &mut scratch)?;
    let neighbors = knn_query(fs, &query, k)?;
    let start = blend(fs, &neighbors)?;
    let z = descend(trunk, &coords, &image.values, refine_steps, lr, start.as_slice(), &mut scratch)?;
    let loss = loss_at(trunk, &coords, &image.values, &z, &mut scratch)?;
    if !loss.is_finite() {
        return Err(Error::Divergence { step: refine_steps });
    }
    Ok(KnnEmbedding {
        z: Modulation(z),
        loss,
        neighbors,
    })
}
