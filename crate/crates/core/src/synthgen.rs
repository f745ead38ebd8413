//! Synthetic membrane-indentation data and ingestion of external image pairs.
//!
//! A scene presses a rigid indenter into a flat membrane at an SE(2) pose.
//! The contact capture is the reference capture plus the smoothed indentation
//! depth field plus fresh capture noise; the learning target is the
//! normalized difference of the two.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::codec::{read_file, read_pose, write_file, write_pose, Reader, Writer};
use crate::error::{Error, Result};
use crate::numerics::{mix64, RngStream};
use crate::pose::PoseSE2;

pub const TIMG_MAGIC: &[u8; 4] = b"TIMG";
pub const TIMG_VERSION: u16 = 1;
/// Placement attempts per sample before giving up.
pub const MAX_PLACEMENT_TRIES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum SensorTag {
    BubbleLike = 0,
    GelslimLike = 1,
    External = 2,
}

impl SensorTag {
    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Self::BubbleLike),
            1 => Ok(Self::GelslimLike),
            2 => Ok(Self::External),
            _ => Err(Error::format("TIMG", format!("unknown sensor tag {v}"))),
        }
    }
}

impl FromStr for SensorTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bubble" | "bubble_like" => Ok(Self::BubbleLike),
            "gelslim" | "gelslim_like" => Ok(Self::GelslimLike),
            "external" => Ok(Self::External),
            _ => Err(Error::InvalidArgument(format!("unknown sensor '{s}'"))),
        }
    }
}

/// A normalized tactile image: `height × width` values in [−1, 1], row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TactileImage {
    pub sample_id: u64,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub sensor: SensorTag,
    pub pose: Option<PoseSE2>,
}

impl TactileImage {
    pub fn new(
        sample_id: u64,
        height: usize,
        width: usize,
        values: Vec<f64>,
        sensor: SensorTag,
        pose: Option<PoseSE2>,
    ) -> Result<Self> {
        let img = Self {
            sample_id,
            height,
            width,
            values,
            sensor,
            pose,
        };
        img.validate()?;
        Ok(img)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidArgument("image must be non-empty".into()));
        }
        if self.values.len() != self.height * self.width {
            return Err(Error::dim("image values", self.height * self.width, self.values.len()));
        }
        if !self.values.iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(format!(
                "image {} has values outside [-1, 1]",
                self.sample_id
            )));
        }
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

/// Unnormalized capture in sensor units (meters of membrane displacement
/// for synthetic data, raw intensity for imports).
#[derive(Clone, Debug, PartialEq)]
pub struct RawGrid {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl RawGrid {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IndenterShape {
    Sphere,
    Cylinder,
    BoxEdge,
    Cross,
}

impl FromStr for IndenterShape {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(Self::Sphere),
            "cylinder" => Ok(Self::Cylinder),
            "box_edge" | "box-edge" => Ok(Self::BoxEdge),
            "cross" => Ok(Self::Cross),
            _ => Err(Error::InvalidArgument(format!("unknown indenter shape '{s}'"))),
        }
    }
}

impl fmt::Display for IndenterShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sphere => "sphere",
            Self::Cylinder => "cylinder",
            Self::BoxEdge => "box_edge",
            Self::Cross => "cross",
        })
    }
}

impl IndenterShape {
    /// Indentation depth at local coordinates `(u, v)` (indenter frame).
    ///
    /// `scale` is the characteristic size: sphere radius; cylinder half-length
    /// (radius `scale/2`, axis along `u`); box half-length (half-width
    /// `scale/4`); cross arm half-length (half-width `scale/5`).
    fn depth(self, u: f64, v: f64, scale: f64, press: f64) -> f64 {
        let cap = |r2: f64, radius: f64| {
            if r2 >= radius * radius {
                0.0
            } else {
                (press - (radius - (radius * radius - r2).sqrt())).max(0.0)
            }
        };
        match self {
            Self::Sphere => cap(u * u + v * v, scale),
            Self::Cylinder => {
                if u.abs() <= scale {
                    cap(v * v, 0.5 * scale)
                } else {
                    0.0
                }
            }
            Self::BoxEdge => {
                if u.abs() <= scale && v.abs() <= 0.25 * scale {
                    press
                } else {
                    0.0
                }
            }
            Self::Cross => {
                let arm = 0.2 * scale;
                let bar_u = u.abs() <= scale && v.abs() <= arm;
                let bar_v = v.abs() <= scale && u.abs() <= arm;
                if bar_u || bar_v {
                    press
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub shape: IndenterShape,
    /// Characteristic indenter size, meters.
    pub indenter_scale: f64,
    /// Press depth, meters.
    pub press_depth: f64,
    /// Gaussian smoothing sigma, pixels. Zero disables smoothing.
    pub smoothing_radius: f64,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub theta_range: (f64, f64),
    /// Per-capture noise standard deviation, meters.
    pub noise_amplitude: f64,
    pub seed: u64,
    pub sensor: SensorTag,
    pub height: usize,
    pub width: usize,
    /// Meters per pixel.
    pub pixel_size: f64,
}

impl SceneConfig {
    /// Large, smooth contact patches.
    pub fn bubble_like() -> Self {
        Self {
            shape: IndenterShape::Cylinder,
            indenter_scale: 10e-3,
            press_depth: 2e-3,
            smoothing_radius: 3.0,
            x_range: (-6e-3, 6e-3),
            y_range: (-6e-3, 6e-3),
            theta_range: (-std::f64::consts::FRAC_PI_3, std::f64::consts::FRAC_PI_3),
            noise_amplitude: 1e-5,
            seed: 0,
            sensor: SensorTag::BubbleLike,
            height: 64,
            width: 64,
            pixel_size: 0.5e-3,
        }
    }

    /// Small, sharp contact patches.
    pub fn gelslim_like() -> Self {
        Self {
            smoothing_radius: 1.0,
            noise_amplitude: 5e-6,
            press_depth: 1e-3,
            sensor: SensorTag::GelslimLike,
            ..Self::bubble_like()
        }
    }

    pub fn for_sensor(sensor: SensorTag) -> Self {
        match sensor {
            SensorTag::GelslimLike => Self::gelslim_like(),
            _ => Self::bubble_like(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.height == 0 || self.width == 0 {
            return bad("image size must be positive");
        }
        if !(self.indenter_scale > 0.0 && self.pixel_size > 0.0) {
            return bad("indenter scale and pixel size must be positive");
        }
        if !(self.press_depth >= 0.0 && self.noise_amplitude >= 0.0 && self.smoothing_radius >= 0.0)
        {
            return bad("press depth, noise and smoothing must be non-negative");
        }
        let half_w = 0.5 * self.width as f64 * self.pixel_size;
        let half_h = 0.5 * self.height as f64 * self.pixel_size;
        let within = |(lo, hi): (f64, f64), half: f64| lo <= hi && lo >= -half && hi <= half;
        if !within(self.x_range, half_w) || !within(self.y_range, half_h) {
            return bad("pose position ranges must lie within the image");
        }
        if self.theta_range.0 > self.theta_range.1 {
            return bad("theta range is inverted");
        }
        Ok(())
    }

    /// Sensor-plane position of a pixel center; origin at the image center,
    /// x along columns, y along rows.
    fn pixel_position(&self, row: usize, col: usize) -> (f64, f64) {
        (
            (col as f64 + 0.5 - 0.5 * self.width as f64) * self.pixel_size,
            (row as f64 + 0.5 - 0.5 * self.height as f64) * self.pixel_size,
        )
    }

    fn indentation(&self, pose: &PoseSE2) -> RawGrid {
        let mut grid = RawGrid::zeros(self.height, self.width);
        let (s, c) = pose.theta.sin_cos();
        for row in 0..self.height {
            for col in 0..self.width {
                let (px, py) = self.pixel_position(row, col);
                let (dx, dy) = (px - pose.x, py - pose.y);
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                grid.values[row * self.width + col] =
                    self.shape.depth(u, v, self.indenter_scale, self.press_depth);
            }
        }
        grid
    }
}

/// Separable Gaussian blur, zero padded, truncated at 3σ.
fn smooth(grid: &RawGrid, sigma: f64) -> RawGrid {
    if sigma <= 0.0 {
        return grid.clone();
    }
    let half = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-half..=half)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let (h, w) = (grid.height as isize, grid.width as isize);
    let mut tmp = RawGrid::zeros(grid.height, grid.width);
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                let cc = c + i as isize - half;
                if (0..w).contains(&cc) {
                    acc += k * grid.values[(r * w + cc) as usize];
                }
            }
            tmp.values[(r * w + c) as usize] = acc;
        }
    }
    let mut out = RawGrid::zeros(grid.height, grid.width);
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                let rr = r + i as isize - half;
                if (0..h).contains(&rr) {
                    acc += k * tmp.values[(rr * w + c) as usize];
                }
            }
            out.values[(r * w + c) as usize] = acc;
        }
    }
    out
}

/// Renders the capture pair for a given pose.
pub fn render(cfg: &SceneConfig, pose: &PoseSE2, rng: &mut RngStream) -> Result<(RawGrid, RawGrid)> {
    cfg.validate()?;
    let field = cfg.indentation(pose);
    let n = cfg.height * cfg.width;
    if cfg.press_depth > 0.0 && field.values.iter().all(|&v| v == 0.0) {
        return Err(Error::Placement { tries: 1 });
    }
    let field = smooth(&field, cfg.smoothing_radius);
    let mut reference = RawGrid::zeros(cfg.height, cfg.width);
    let mut contact = field;
    if cfg.noise_amplitude > 0.0 {
        let ref_noise = rng.gaussian(n);
        let contact_noise = rng.gaussian(n);
        for i in 0..n {
            reference.values[i] = cfg.noise_amplitude * ref_noise[i];
            contact.values[i] += reference.values[i] + cfg.noise_amplitude * contact_noise[i];
        }
    }
    Ok((contact, reference))
}

/// Draws a pose uniformly from the configured ranges and renders it.
pub fn gen_sample(cfg: &SceneConfig, rng: &mut RngStream) -> Result<(RawGrid, RawGrid, PoseSE2)> {
    let pose = PoseSE2::new(
        rng.uniform_range(cfg.x_range.0, cfg.x_range.1),
        rng.uniform_range(cfg.y_range.0, cfg.y_range.1),
        rng.uniform_range(cfg.theta_range.0, cfg.theta_range.1),
    );
    let (contact, reference) = render(cfg, &pose, rng)?;
    Ok((contact, reference, pose))
}

fn max_abs_diff(contact: &RawGrid, reference: &RawGrid) -> f64 {
    contact
        .values
        .iter()
        .zip(&reference.values)
        .fold(0.0f64, |m, (c, r)| m.max((c - r).abs()))
}

/// `(contact − reference) / scale`, clamped to [−1, 1]. Without a scale the
/// pair's own max |difference| is used.
pub fn normalize_pair(
    contact: &RawGrid,
    reference: &RawGrid,
    scale: Option<f64>,
) -> Result<TactileImage> {
    if contact.height != reference.height || contact.width != reference.width {
        return Err(Error::dim(
            "capture pair",
            contact.height * contact.width,
            reference.height * reference.width,
        ));
    }
    let scale = match scale {
        Some(s) if s == 0.0 || !s.is_finite() => {
            return Err(Error::InvalidArgument("normalization scale must be nonzero".into()))
        }
        Some(s) => s.abs(),
        None => max_abs_diff(contact, reference),
    };
    let values = contact
        .values
        .iter()
        .zip(&reference.values)
        .map(|(c, r)| {
            if scale == 0.0 {
                0.0
            } else {
                ((c - r) / scale).clamp(-1.0, 1.0)
            }
        })
        .collect();
    TactileImage::new(
        0,
        contact.height,
        contact.width,
        values,
        SensorTag::External,
        None,
    )
}

/// Test-set membership: the `floor(n/10)` ids with the smallest hash.
pub fn split_test_ids(ids: &[u64]) -> BTreeSet<u64> {
    let mut keyed: Vec<(u64, u64)> = ids.iter().map(|&id| (mix64(id ^ 0x05EE_D51D), id)).collect();
    keyed.sort_unstable();
    keyed.iter().take(ids.len() / 10).map(|&(_, id)| id).collect()
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub images: Vec<TactileImage>,
    /// Dataset-wide normalization scale, meters.
    pub scale: f64,
    pub test_ids: BTreeSet<u64>,
}

impl SyntheticDataset {
    pub fn train(&self) -> Vec<TactileImage> {
        self.images
            .iter()
            .filter(|i| !self.test_ids.contains(&i.sample_id))
            .cloned()
            .collect()
    }

    pub fn test(&self) -> Vec<TactileImage> {
        self.images
            .iter()
            .filter(|i| self.test_ids.contains(&i.sample_id))
            .cloned()
            .collect()
    }
}

/// `n` labeled samples with ids `0..n`. Each sample draws from its own stream
/// derived from `(cfg.seed, sample_id)`.
pub fn gen_dataset(cfg: &SceneConfig, n: usize) -> Result<SyntheticDataset> {
    use rayon::prelude::*;
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be >= 1".into()));
    }
    cfg.validate()?;
    let raw: Vec<(RawGrid, RawGrid, PoseSE2)> = (0..n as u64)
        .into_par_iter()
        .map(|id| {
            let mut rng = RngStream::derive(cfg.seed, id);
            for _ in 0..MAX_PLACEMENT_TRIES {
                match gen_sample(cfg, &mut rng) {
                    Err(Error::Placement { .. }) => continue,
                    other => return other,
                }
            }
            Err(Error::Placement {
                tries: MAX_PLACEMENT_TRIES,
            })
        })
        .collect::<Result<_>>()?;
    let scale = raw
        .iter()
        .fold(0.0f64, |m, (c, r, _)| m.max(max_abs_diff(c, r)));
    let images = raw
        .iter()
        .enumerate()
        .map(|(id, (c, r, pose))| {
            let mut img = normalize_pair(c, r, if scale > 0.0 { Some(scale) } else { None })?;
            img.sample_id = id as u64;
            img.sensor = cfg.sensor;
            img.pose = Some(*pose);
            Ok(img)
        })
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<u64> = (0..n as u64).collect();
    Ok(SyntheticDataset {
        images,
        scale,
        test_ids: split_test_ids(&ids),
    })
}

pub fn encode_timg(img: &TactileImage) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(TIMG_MAGIC);
    w.u16(TIMG_VERSION);
    w.u32(img.height as u32);
    w.u32(img.width as u32);
    w.u8(img.sensor as u8);
    write_pose(&mut w, img.pose);
    for v in &img.values {
        w.f32(*v as f32);
    }
    w.finish()
}

/// Decodes a TIMG payload. The id is not stored in the file.
pub fn decode_timg(bytes: &[u8], sample_id: u64) -> Result<TactileImage> {
    let mut r = Reader::new("TIMG", bytes);
    r.header(TIMG_MAGIC, TIMG_VERSION)?;
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let sensor = SensorTag::from_u8(r.u8()?)?;
    let pose = read_pose(&mut r)?;
    let values = r.f32_vec(height * width)?;
    r.finish()?;
    TactileImage::new(
        sample_id,
        height,
        width,
        values.into_iter().map(f64::from).collect(),
        sensor,
        pose,
    )
}

pub fn save_timg(img: &TactileImage, path: &Path) -> Result<()> {
    write_file(path, &encode_timg(img))
}

pub fn load_timg(path: &Path, sample_id: u64) -> Result<TactileImage> {
    decode_timg(&read_file(path)?, sample_id)
}

/// Rounds values and pose through f32 so the image equals its TIMG roundtrip.
pub fn to_storage_precision(mut img: TactileImage) -> TactileImage {
    for v in &mut img.values {
        *v = *v as f32 as f64;
    }
    img.pose = img.pose.map(PoseSE2::to_storage_precision);
    img
}

/// Reads a binary PGM (P5, maxval ≤ 65535) as raw intensities.
pub fn load_pgm(path: &Path) -> Result<RawGrid> {
    use image::ImageDecoder;
    let file = std::io::BufReader::new(
        std::fs::File::open(path).map_err(|e| crate::codec::with_path(path, e))?,
    );
    let decoder = image::codecs::pnm::PnmDecoder::new(file)
        .map_err(|e| Error::format("PGM", e.to_string()))?;
    if decoder.subtype() != image::codecs::pnm::PnmSubtype::Graymap(image::codecs::pnm::SampleEncoding::Binary)
    {
        return Err(Error::format("PGM", "only binary graymaps (P5) are supported"));
    }
    let (width, height) = decoder.dimensions();
    let img = image::DynamicImage::from_decoder(decoder)
        .map_err(|e| Error::format("PGM", e.to_string()))?;
    let values: Vec<f64> = match img {
        image::DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(f64::from).collect(),
        image::DynamicImage::ImageLuma16(buf) => {
            buf.into_raw().into_iter().map(f64::from).collect()
        }
        other => other.to_luma16().into_raw().into_iter().map(f64::from).collect(),
    };
    Ok(RawGrid {
        height: height as usize,
        width: width as usize,
        values,
    })
}

/// Writes a normalized image as a 16-bit P5 graymap, mapping [−1, 1] onto
/// [0, 65535].
pub fn save_pgm(img: &TactileImage, path: &Path) -> Result<()> {
    let mut out = format!("P5\n{} {}\n65535\n", img.width, img.height).into_bytes();
    for v in &img.values {
        let q = (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 65535.0).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    write_file(path, &out)
}
