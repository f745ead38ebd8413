//! The functaset: one fitted latent per sample, linked to the trunk that
//! decodes it by the trunk file's SHA-256.

use std::collections::HashSet;
use std::path::Path;

use rayon::prelude::*;

use crate::codec::{read_file, read_pose, write_file, write_pose, Reader, Writer};
use crate::error::{Error, Result};
use crate::metatrain::{check_shapes, descend};
use crate::pose::PoseSE2;
use crate::siren::{
    encode_trunk, forward_with, grid_coords, trunk_digest, Modulation, Scratch, TrunkParams,
};
use crate::synthgen::{SensorTag, TactileImage};

pub const TFST_MAGIC: &[u8; 4] = b"TFST";
pub const TFST_VERSION: u16 = 1;
/// Magic, version, latent_dim, H, W, count, digest.
pub const TFST_HEADER_BYTES: usize = 4 + 2 + 4 + 4 + 4 + 8 + 32;
/// PSNR reported when the error is numerically zero.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Bytes per stored record: id, pose, and `d` f32 latents.
pub const fn record_bytes(latent_dim: usize) -> usize {
    8 + 12 + 4 * latent_dim
}

#[derive(Clone, Debug, PartialEq)]
pub struct Functa {
    pub sample_id: u64,
    pub z: Vec<f32>,
    pub pose: Option<PoseSE2>,
}

impl Functa {
    pub fn latent(&self) -> Modulation {
        Modulation(self.z.iter().map(|&v| v as f64).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Functaset {
    pub functas: Vec<Functa>,
    pub trunk_digest: [u8; 32],
    pub latent_dim: usize,
    pub height: usize,
    pub width: usize,
}

pub fn hex(digest: &[u8; 32]) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl Functaset {
    pub fn len(&self) -> usize {
        self.functas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functas.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.functas.len());
        for f in &self.functas {
            if !seen.insert(f.sample_id) {
                return Err(Error::Dataset(format!("duplicate sample id {}", f.sample_id)));
            }
            if f.z.len() != self.latent_dim {
                return Err(Error::LatentDimMismatch {
                    header: self.latent_dim,
                    found: f.z.len(),
                });
            }
        }
        Ok(())
    }

    pub fn get(&self, sample_id: u64) -> Option<&Functa> {
        self.functas.iter().find(|f| f.sample_id == sample_id)
    }

    /// Refuses a trunk whose latent size or digest differs from the one the
    /// functaset was built with. `allow_digest_mismatch` skips the digest test.
    pub fn check_trunk(&self, trunk: &TrunkParams, allow_digest_mismatch: bool) -> Result<()> {
        if trunk.arch().latent_dim != self.latent_dim {
            return Err(Error::LatentDimMismatch {
                header: self.latent_dim,
                found: trunk.arch().latent_dim,
            });
        }
        let digest = trunk_digest(trunk);
        if !allow_digest_mismatch && digest != self.trunk_digest {
            return Err(Error::DigestMismatch {
                expected: hex(&self.trunk_digest),
                found: hex(&digest),
            });
        }
        Ok(())
    }
}

/// Fits one latent per image (`steps` descent updates from zero) and stores
/// it at f32 precision, in dataset order.
pub fn build_functaset(
    trunk: &TrunkParams,
    dataset: &[TactileImage],
    steps: usize,
    lr: f64,
) -> Result<Functaset> {
    let (height, width) = check_shapes(dataset)?;
    let d = trunk.arch().latent_dim;
    let coords = grid_coords(height, width);
    let functas = dataset
        .par_iter()
        .map_init(Scratch::default, |scratch, img| {
            img.validate()?;
            let z = descend(trunk, &coords, &img.values, steps, lr, &vec![0.0; d], scratch)
                .map_err(|e| match e {
                    Error::Divergence { step } => Error::SampleDivergence {
                        sample_id: img.sample_id,
                        step,
                    },
                    other => other,
                })?;
            Ok(Functa {
                sample_id: img.sample_id,
                z: z.iter().map(|&v| v as f32).collect(),
                pose: img.pose.map(PoseSE2::to_storage_precision),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let fs = Functaset {
        functas,
        trunk_digest: trunk_digest(trunk),
        latent_dim: d,
        height,
        width,
    };
    fs.validate()?;
    Ok(fs)
}

/// Decodes a functa over the full `height × width` grid. Values are clamped
/// into the image range.
pub fn reconstruct(
    trunk: &TrunkParams,
    functa: &Functa,
    height: usize,
    width: usize,
) -> Result<TactileImage> {
    if functa.z.len() != trunk.arch().latent_dim {
        return Err(Error::dim("functa latent", trunk.arch().latent_dim, functa.z.len()));
    }
    let coords = grid_coords(height, width);
    let mut values = vec![0.0; height * width * trunk.arch().out_dim];
    forward_with(
        trunk,
        functa.latent().as_slice(),
        &coords,
        &mut values,
        &mut Scratch::default(),
    )?;
    if trunk.arch().out_dim != 1 {
        return Err(Error::InvalidArgument(
            "reconstruction to an image needs out_dim 1".into(),
        ));
    }
    for v in &mut values {
        *v = v.clamp(-1.0, 1.0);
    }
    TactileImage::new(
        functa.sample_id,
        height,
        width,
        values,
        SensorTag::External,
        functa.pose,
    )
}

/// `10·log10(max² / MSE)`, capped at [`PSNR_CAP_DB`] when
/// `MSE < 1e-12·max²`.
pub fn psnr_values(a: &[f64], b: &[f64], max_val: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("psnr operands", a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::InvalidArgument("psnr of empty images".into()));
    }
    if max_val.is_nan() || max_val <= 0.0 {
        return Err(Error::InvalidArgument("psnr max_val must be positive".into()));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    let peak = max_val * max_val;
    if mse < 1e-12 * peak {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (peak / mse).log10())
}

pub fn psnr(a: &TactileImage, b: &TactileImage, max_val: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            "psnr image shape",
            a.height * a.width,
            b.height * b.width,
        ));
    }
    psnr_values(&a.values, &b.values, max_val)
}

/// PSNR of images stored in [−1, 1], after remapping both to [0, 1] with
/// peak 1.
pub fn psnr_unit(a: &TactileImage, b: &TactileImage) -> Result<f64> {
    let remap = |img: &TactileImage| TactileImage {
        values: img.values.iter().map(|v| 0.5 * (v + 1.0)).collect(),
        ..img.clone()
    };
    psnr(&remap(a), &remap(b), 1.0)
}

pub fn encode_functaset(fs: &Functaset) -> Result<Vec<u8>> {
    fs.validate()?;
    let mut w = Writer::new();
    w.bytes(TFST_MAGIC);
    w.u16(TFST_VERSION);
    w.u32(fs.latent_dim as u32);
    w.u32(fs.height as u32);
    w.u32(fs.width as u32);
    w.u64(fs.functas.len() as u64);
    w.bytes(&fs.trunk_digest);
    for f in &fs.functas {
        w.u64(f.sample_id);
        write_pose(&mut w, f.pose);
        for v in &f.z {
            w.f32(*v);
        }
    }
    Ok(w.finish())
}

pub fn decode_functaset(bytes: &[u8]) -> Result<Functaset> {
    let mut r = Reader::new("TFST", bytes);
    r.header(TFST_MAGIC, TFST_VERSION)?;
    let latent_dim = r.u32()? as usize;
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let count = r.u64()?;
    let trunk_digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    if latent_dim == 0 {
        return Err(Error::LatentDimMismatch {
            header: 0,
            found: 0,
        });
    }
    let record = record_bytes(latent_dim);
    let available = r.remaining() / record;
    if (available as u64) < count {
        return Err(Error::Truncated {
            format: "TFST",
            detail: format!("header declares {count} records, {available} present"),
        });
    }
    if r.remaining() != count as usize * record {
        // Whole extra bytes that do not form records mean the header's
        // latent size disagrees with the payload.
        let extra = r.remaining() - count as usize * record;
        return Err(Error::LatentDimMismatch {
            header: latent_dim,
            found: latent_dim + extra / (4 * count.max(1) as usize),
        });
    }
    let mut functas = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let sample_id = r.u64()?;
        let pose = read_pose(&mut r)?;
        let z = r.f32_vec(latent_dim)?;
        functas.push(Functa { sample_id, z, pose });
    }
    r.finish()?;
    let fs = Functaset {
        functas,
        trunk_digest,
        latent_dim,
        height,
        width,
    };
    fs.validate()?;
    Ok(fs)
}

pub fn save_functaset(fs: &Functaset, path: &Path) -> Result<()> {
    write_file(path, &encode_functaset(fs)?)
}

pub fn load_functaset(path: &Path) -> Result<Functaset> {
    decode_functaset(&read_file(path)?)
}

/// Stored size of the learned representation: trunk file plus functaset file.
pub fn representation_bytes(trunk: &TrunkParams, fs: &Functaset) -> Result<usize> {
    Ok(encode_trunk(trunk).len() + encode_functaset(fs)?.len())
}
