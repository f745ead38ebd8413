//! Shift-modulated SIREN: `f(x; z)` maps pixel coordinates to values, with a
//! per-sample latent `z` entering every hidden layer as an additive shift
//! `γ = W·z` on the pre-activation.
//!
//! Hidden layer `i` computes `a_i = sin(ω0 · (M_i a_{i-1} + b_i + γ_i))`; the
//! output layer is affine. All gradients are hand-derived reverse mode.

use std::path::Path;

use crate::codec::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::linalg::{gemm_ab, gemm_abt, gemm_atb_acc};
use crate::numerics::RngStream;
use crate::trig;

/// Pixel rows processed per forward/backward block.
const CHUNK_ROWS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrunkArch {
    pub in_dim: usize,
    pub out_dim: usize,
    pub depth: usize,
    pub width: usize,
    pub latent_dim: usize,
    pub omega0: f64,
}

impl Default for TrunkArch {
    fn default() -> Self {
        Self {
            in_dim: 2,
            out_dim: 1,
            depth: 5,
            width: 256,
            latent_dim: 64,
            omega0: 30.0,
        }
    }
}

impl TrunkArch {
    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 {
            return Err(Error::InvalidArgument("in_dim and out_dim must be >= 1".into()));
        }
        if self.depth == 0 || self.width == 0 || self.latent_dim == 0 {
            return Err(Error::InvalidArgument(
                "depth, width and latent_dim must be >= 1".into(),
            ));
        }
        if !(self.omega0 > 0.0 && self.omega0.is_finite()) {
            return Err(Error::InvalidArgument("omega0 must be positive".into()));
        }
        Ok(())
    }

    fn fan_in(&self, layer: usize) -> usize {
        if layer == 0 {
            self.in_dim
        } else {
            self.width
        }
    }

    /// Total shift count, `L·h`.
    pub fn shift_dim(&self) -> usize {
        self.depth * self.width
    }

    fn layout(&self) -> Layout {
        let mut offset = 0;
        let mut hidden = Vec::with_capacity(self.depth);
        for i in 0..self.depth {
            let w = offset;
            offset += self.width * self.fan_in(i);
            let b = offset;
            offset += self.width;
            hidden.push((w, b));
        }
        let out_w = offset;
        offset += self.out_dim * self.width;
        let out_b = offset;
        offset += self.out_dim;
        let modulation = offset;
        offset += self.shift_dim() * self.latent_dim;
        Layout {
            hidden,
            out_w,
            out_b,
            modulation,
            total: offset,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    hidden: Vec<(usize, usize)>,
    out_w: usize,
    out_b: usize,
    modulation: usize,
    total: usize,
}

/// Trunk weights and the modulation map `W`, stored flat in file order:
/// each hidden layer's weights (row-major, `width × fan_in`) then bias,
/// output weights and bias, then `W` (row-major, `L·h × d`).
#[derive(Clone, Debug, PartialEq)]
pub struct TrunkParams {
    arch: TrunkArch,
    layout: Layout,
    data: Vec<f64>,
}

impl TrunkParams {
    pub fn zeros(arch: TrunkArch) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        let data = vec![0.0; layout.total];
        Ok(Self { arch, layout, data })
    }

    pub fn from_flat(arch: TrunkArch, data: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        if data.len() != layout.total {
            return Err(Error::dim("trunk parameters", layout.total, data.len()));
        }
        Ok(Self { arch, layout, data })
    }

    pub fn arch(&self) -> &TrunkArch {
        &self.arch
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn layer_weight(&self, i: usize) -> &[f64] {
        let (w, b) = self.layout.hidden[i];
        &self.data[w..b]
    }

    pub fn layer_weight_mut(&mut self, i: usize) -> &mut [f64] {
        let (w, b) = self.layout.hidden[i];
        &mut self.data[w..b]
    }

    pub fn layer_bias(&self, i: usize) -> &[f64] {
        let (_, b) = self.layout.hidden[i];
        &self.data[b..b + self.arch.width]
    }

    pub fn layer_bias_mut(&mut self, i: usize) -> &mut [f64] {
        let (_, b) = self.layout.hidden[i];
        let width = self.arch.width;
        &mut self.data[b..b + width]
    }

    pub fn output_weight(&self) -> &[f64] {
        &self.data[self.layout.out_w..self.layout.out_b]
    }

    pub fn output_weight_mut(&mut self) -> &mut [f64] {
        &mut self.data[self.layout.out_w..self.layout.out_b]
    }

    pub fn output_bias(&self) -> &[f64] {
        &self.data[self.layout.out_b..self.layout.modulation]
    }

    pub fn output_bias_mut(&mut self) -> &mut [f64] {
        &mut self.data[self.layout.out_b..self.layout.modulation]
    }

    /// The modulation map `W`, row-major `(L·h) × d`.
    pub fn modulation(&self) -> &[f64] {
        &self.data[self.layout.modulation..]
    }

    pub fn modulation_mut(&mut self) -> &mut [f64] {
        &mut self.data[self.layout.modulation..]
    }

    /// Trunk weights without `W`.
    pub fn theta(&self) -> &[f64] {
        &self.data[..self.layout.modulation]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Order-sensitive checksum of the parameter bits.
    pub fn checksum(&self) -> u64 {
        self.data.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
            (h ^ v.to_bits()).wrapping_mul(0x0100_0000_01b3)
        })
    }

    /// `γ = W·z`.
    pub fn shifts(&self, z: &[f64]) -> Vec<f64> {
        let d = self.arch.latent_dim;
        self.modulation()
            .chunks_exact(d)
            .map(|row| row.iter().zip(z).map(|(w, z)| w * z).sum())
            .collect()
    }
}

/// A per-sample latent modulation vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Modulation(pub Vec<f64>);

impl Modulation {
    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl From<Vec<f64>> for Modulation {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// SIREN initialization. First layer `U(±1/in_dim)`, later layers and the
/// output layer `U(±√(6/fan_in)/ω0)`, zero biases, `W ~ U(±1/√d)`.
pub fn init_trunk(arch: TrunkArch, rng: &mut RngStream) -> Result<TrunkParams> {
    let mut trunk = TrunkParams::zeros(arch)?;
    for i in 0..arch.depth {
        let bound = if i == 0 {
            1.0 / arch.in_dim as f64
        } else {
            (6.0 / arch.fan_in(i) as f64).sqrt() / arch.omega0
        };
        for w in trunk.layer_weight_mut(i) {
            *w = rng.uniform_range(-bound, bound);
        }
    }
    let bound = (6.0 / arch.width as f64).sqrt() / arch.omega0;
    for w in trunk.output_weight_mut() {
        *w = rng.uniform_range(-bound, bound);
    }
    let bound = 1.0 / (arch.latent_dim as f64).sqrt();
    for w in trunk.modulation_mut() {
        *w = rng.uniform_range(-bound, bound);
    }
    Ok(trunk)
}

/// Pixel-center coordinates in `[-1, 1]²`, row-major, as flat `(x, y)` pairs.
pub fn grid_coords(height: usize, width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(height * width * 2);
    for row in 0..height {
        let y = 2.0 * (row as f64 + 0.5) / height as f64 - 1.0;
        for col in 0..width {
            let x = 2.0 * (col as f64 + 0.5) / width as f64 - 1.0;
            out.push(x);
            out.push(y);
        }
    }
    out
}

/// Mean squared error over all values.
pub fn recon_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::dim("reconstruction target", pred.len(), target.len()));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("empty reconstruction".into()));
    }
    let sse: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sse / pred.len() as f64)
}

/// Gradients of the reconstruction loss.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub loss: f64,
    /// Same layout as the trunk: `θ` gradients followed by the `W` gradient.
    pub params: TrunkParams,
    pub z: Vec<f64>,
}

impl Gradients {
    pub fn theta(&self) -> &[f64] {
        self.params.theta()
    }

    pub fn modulation(&self) -> &[f64] {
        self.params.modulation()
    }
}

/// Reusable buffers for chunked evaluation. One per concurrent worker.
#[derive(Default)]
pub struct Scratch {
    acts: Vec<Vec<f64>>,
    coss: Vec<Vec<f64>>,
    out: Vec<f64>,
    d_out: Vec<f64>,
    d_act: Vec<f64>,
    d_pre: Vec<f64>,
}

impl Scratch {
    fn prepare(&mut self, arch: &TrunkArch, keep_cos: bool) {
        let cap = CHUNK_ROWS * arch.width;
        self.acts.resize_with(arch.depth, Vec::new);
        for a in &mut self.acts {
            a.resize(cap, 0.0);
        }
        if keep_cos {
            self.coss.resize_with(arch.depth, Vec::new);
            for c in &mut self.coss {
                c.resize(cap, 0.0);
            }
            self.d_act.resize(cap, 0.0);
            self.d_pre.resize(cap, 0.0);
            self.d_out.resize(CHUNK_ROWS * arch.out_dim, 0.0);
        }
        self.out.resize(CHUNK_ROWS * arch.out_dim, 0.0);
    }
}

fn check_inputs(trunk: &TrunkParams, z: &[f64], coords: &[f64]) -> Result<usize> {
    let arch = trunk.arch();
    if z.len() != arch.latent_dim {
        return Err(Error::dim("latent modulation", arch.latent_dim, z.len()));
    }
    if !z.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("latent modulation"));
    }
    if !coords.len().is_multiple_of(arch.in_dim) {
        return Err(Error::dim("coordinates", arch.in_dim, coords.len() % arch.in_dim));
    }
    Ok(coords.len() / arch.in_dim)
}

/// Hidden stack plus output for one chunk of `rows` coordinates.
fn forward_chunk(
    trunk: &TrunkParams,
    gamma: &[f64],
    coords: &[f64],
    rows: usize,
    scratch: &mut Scratch,
    keep_cos: bool,
) {
    let arch = *trunk.arch();
    let (h, w0) = (arch.width, arch.omega0);
    for i in 0..arch.depth {
        let fan_in = arch.fan_in(i);
        let (done, rest) = scratch.acts.split_at_mut(i);
        let act = &mut rest[0][..rows * h];
        let input: &[f64] = if i == 0 {
            coords
        } else {
            &done[i - 1][..rows * fan_in]
        };
        gemm_abt(rows, fan_in, h, input, trunk.layer_weight(i), act, false);
        let bias = trunk.layer_bias(i);
        let shift = &gamma[i * h..(i + 1) * h];
        for arow in act.chunks_exact_mut(h) {
            for j in 0..h {
                arow[j] = w0 * (arow[j] + bias[j] + shift[j]);
            }
        }
        if keep_cos {
            trig::sin_cos_in_place(act, &mut scratch.coss[i][..rows * h]);
        } else {
            trig::sin_in_place(act);
        }
    }
    let out = &mut scratch.out[..rows * arch.out_dim];
    gemm_abt(
        rows,
        h,
        arch.out_dim,
        &scratch.acts[arch.depth - 1][..rows * h],
        trunk.output_weight(),
        out,
        false,
    );
    let ob = trunk.output_bias();
    for orow in out.chunks_exact_mut(arch.out_dim) {
        for (o, b) in orow.iter_mut().zip(ob) {
            *o += b;
        }
    }
}

/// Forward pass with caller-provided scratch. `out` receives `N·out_dim` values.
pub fn forward_with(
    trunk: &TrunkParams,
    z: &[f64],
    coords: &[f64],
    out: &mut [f64],
    scratch: &mut Scratch,
) -> Result<()> {
    let n = check_inputs(trunk, z, coords)?;
    let arch = *trunk.arch();
    if out.len() != n * arch.out_dim {
        return Err(Error::dim("forward output", n * arch.out_dim, out.len()));
    }
    let gamma = trunk.shifts(z);
    scratch.prepare(&arch, false);
    let mut start = 0;
    while start < n {
        let rows = CHUNK_ROWS.min(n - start);
        let c = &coords[start * arch.in_dim..(start + rows) * arch.in_dim];
        forward_chunk(trunk, &gamma, c, rows, scratch, false);
        out[start * arch.out_dim..(start + rows) * arch.out_dim]
            .copy_from_slice(&scratch.out[..rows * arch.out_dim]);
        start += rows;
    }
    Ok(())
}

/// `f(coords; z)`, flat `N·out_dim` output.
pub fn forward(trunk: &TrunkParams, z: &Modulation, coords: &[f64]) -> Result<Vec<f64>> {
    let n = check_inputs(trunk, z.as_slice(), coords)?;
    let mut out = vec![0.0; n * trunk.arch().out_dim];
    forward_with(trunk, z.as_slice(), coords, &mut out, &mut Scratch::default())?;
    Ok(out)
}

/// Shared reverse pass. With `param_grads = None` only `γ` and `z` gradients
/// are formed; the `z` path is identical either way.
fn loss_and_grads(
    trunk: &TrunkParams,
    z: &[f64],
    coords: &[f64],
    target: &[f64],
    mut param_grads: Option<&mut TrunkParams>,
    scratch: &mut Scratch,
) -> Result<(f64, Vec<f64>)> {
    let n = check_inputs(trunk, z, coords)?;
    let arch = *trunk.arch();
    let (h, od, w0) = (arch.width, arch.out_dim, arch.omega0);
    if target.len() != n * od {
        return Err(Error::dim("reconstruction target", n * od, target.len()));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("no coordinates".into()));
    }
    let gamma = trunk.shifts(z);
    let mut grad_gamma = vec![0.0; arch.shift_dim()];
    scratch.prepare(&arch, true);
    let scale = 2.0 / (n * od) as f64;
    let mut sse = 0.0;

    let mut start = 0;
    while start < n {
        let rows = CHUNK_ROWS.min(n - start);
        let c = &coords[start * arch.in_dim..(start + rows) * arch.in_dim];
        let t = &target[start * od..(start + rows) * od];
        forward_chunk(trunk, &gamma, c, rows, scratch, true);

        let d_out = &mut scratch.d_out[..rows * od];
        for ((d, y), t) in d_out.iter_mut().zip(&scratch.out[..rows * od]).zip(t) {
            let r = y - t;
            sse += r * r;
            *d = scale * r;
        }
        if let Some(g) = param_grads.as_deref_mut() {
            let last = &scratch.acts[arch.depth - 1][..rows * h];
            gemm_atb_acc(rows, od, h, d_out, last, g.output_weight_mut());
            let gb = g.output_bias_mut();
            for drow in d_out.chunks_exact(od) {
                for (b, d) in gb.iter_mut().zip(drow) {
                    *b += d;
                }
            }
        }
        gemm_ab(rows, od, h, d_out, trunk.output_weight(), &mut scratch.d_act[..rows * h]);

        for i in (0..arch.depth).rev() {
            let d_pre = &mut scratch.d_pre[..rows * h];
            let d_act = &scratch.d_act[..rows * h];
            let cos = &scratch.coss[i][..rows * h];
            let gg = &mut grad_gamma[i * h..(i + 1) * h];
            for ((prow, arow), crow) in d_pre
                .chunks_exact_mut(h)
                .zip(d_act.chunks_exact(h))
                .zip(cos.chunks_exact(h))
            {
                for j in 0..h {
                    let v = arow[j] * w0 * crow[j];
                    prow[j] = v;
                    gg[j] += v;
                }
            }
            let fan_in = arch.fan_in(i);
            if let Some(g) = param_grads.as_deref_mut() {
                let input: &[f64] = if i == 0 {
                    c
                } else {
                    &scratch.acts[i - 1][..rows * fan_in]
                };
                gemm_atb_acc(rows, h, fan_in, d_pre, input, g.layer_weight_mut(i));
            }
            if i > 0 {
                gemm_ab(
                    rows,
                    h,
                    fan_in,
                    d_pre,
                    trunk.layer_weight(i),
                    &mut scratch.d_act[..rows * fan_in],
                );
            }
        }
        start += rows;
    }

    let loss = sse / (n * od) as f64;
    let d = arch.latent_dim;
    let mut grad_z = vec![0.0; d];
    for (row, gg) in trunk.modulation().chunks_exact(d).zip(&grad_gamma) {
        for (gz, w) in grad_z.iter_mut().zip(row) {
            *gz += w * gg;
        }
    }
    if let Some(g) = param_grads {
        for i in 0..arch.depth {
            g.layer_bias_mut(i)
                .copy_from_slice(&grad_gamma[i * h..(i + 1) * h]);
        }
        for (row, gg) in g.modulation_mut().chunks_exact_mut(d).zip(&grad_gamma) {
            for (gw, zv) in row.iter_mut().zip(z) {
                *gw = gg * zv;
            }
        }
    }
    Ok((loss, grad_z))
}

/// Loss plus gradients for `θ`, `W`, and `z`.
pub fn backward_with(
    trunk: &TrunkParams,
    z: &[f64],
    coords: &[f64],
    target: &[f64],
    scratch: &mut Scratch,
) -> Result<Gradients> {
    let mut params = TrunkParams::zeros(*trunk.arch())?;
    let (loss, z) = loss_and_grads(trunk, z, coords, target, Some(&mut params), scratch)?;
    Ok(Gradients { loss, params, z })
}

pub fn backward(
    trunk: &TrunkParams,
    z: &Modulation,
    coords: &[f64],
    target: &[f64],
) -> Result<Gradients> {
    backward_with(trunk, z.as_slice(), coords, target, &mut Scratch::default())
}

/// Loss and `∂loss/∂z` only.
pub fn grad_z_with(
    trunk: &TrunkParams,
    z: &[f64],
    coords: &[f64],
    target: &[f64],
    scratch: &mut Scratch,
) -> Result<(f64, Vec<f64>)> {
    loss_and_grads(trunk, z, coords, target, None, scratch)
}

pub fn grad_z_only(
    trunk: &TrunkParams,
    z: &Modulation,
    coords: &[f64],
    target: &[f64],
) -> Result<(f64, Vec<f64>)> {
    grad_z_with(trunk, z.as_slice(), coords, target, &mut Scratch::default())
}

pub const TTRK_MAGIC: &[u8; 4] = b"TTRK";
pub const TTRK_VERSION: u16 = 1;

/// Serializes the trunk: magic, version, five u32 shape fields, f32 `ω0`,
/// then every parameter as f32 in layout order.
pub fn encode_trunk(trunk: &TrunkParams) -> Vec<u8> {
    let a = trunk.arch();
    let mut w = Writer::new();
    w.bytes(TTRK_MAGIC);
    w.u16(TTRK_VERSION);
    for v in [a.in_dim, a.out_dim, a.depth, a.width, a.latent_dim] {
        w.u32(v as u32);
    }
    w.f32(a.omega0 as f32);
    for v in trunk.as_flat() {
        w.f32(*v as f32);
    }
    w.finish()
}

pub fn decode_trunk(bytes: &[u8]) -> Result<TrunkParams> {
    let mut r = Reader::new("TTRK", bytes);
    r.header(TTRK_MAGIC, TTRK_VERSION)?;
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let arch = TrunkArch {
        in_dim: dims[0],
        out_dim: dims[1],
        depth: dims[2],
        width: dims[3],
        latent_dim: dims[4],
        omega0: r.f32()? as f64,
    };
    arch.validate()
        .map_err(|e| Error::format("TTRK", e.to_string()))?;
    let data = r.f32_vec(arch.param_count())?;
    r.finish()?;
    TrunkParams::from_flat(arch, data.into_iter().map(f64::from).collect())
}

pub fn save_trunk(trunk: &TrunkParams, path: &Path) -> Result<()> {
    write_file(path, &encode_trunk(trunk))
}

pub fn load_trunk(path: &Path) -> Result<TrunkParams> {
    decode_trunk(&read_file(path)?)
}

/// SHA-256 of the serialized trunk.
pub fn trunk_digest(trunk: &TrunkParams) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    Sha256::digest(encode_trunk(trunk)).into()
}

impl TrunkParams {
    /// Rounds every parameter (and `ω0`) through f32 so the trunk equals its
    /// TTRK roundtrip.
    pub fn to_storage_precision(&self) -> Self {
        let mut arch = self.arch;
        arch.omega0 = arch.omega0 as f32 as f64;
        let data = self.data.iter().map(|v| *v as f32 as f64).collect();
        Self {
            arch,
            layout: self.layout.clone(),
            data,
        }
    }
}
