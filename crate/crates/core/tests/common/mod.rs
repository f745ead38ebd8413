#![allow(dead_code)]

use tactfunc::siren::{TrunkArch, TrunkParams};

/// Scalar SIREN evaluation straight from the definition; shares no code with
/// the library's chunked GEMM path.
pub fn naive_forward(trunk: &TrunkParams, z: &[f64], coords: &[f64]) -> Vec<f64> {
    let arch: TrunkArch = *trunk.arch();
    let d = arch.latent_dim;
    let h = arch.width;
    let w = trunk.modulation();
    let gamma: Vec<f64> = (0..arch.depth * h)
        .map(|r| (0..d).map(|k| w[r * d + k] * z[k]).sum())
        .collect();
    let mut out = Vec::new();
    for x in coords.chunks(arch.in_dim) {
        let mut a = x.to_vec();
        for i in 0..arch.depth {
            let m = trunk.layer_weight(i);
            let b = trunk.layer_bias(i);
            let fan = a.len();
            a = (0..h)
                .map(|j| {
                    let pre: f64 = (0..fan).map(|k| m[j * fan + k] * a[k]).sum::<f64>()
                        + b[j]
                        + gamma[i * h + j];
                    (arch.omega0 * pre).sin()
                })
                .collect();
        }
        let mo = trunk.output_weight();
        let bo = trunk.output_bias();
        for o in 0..arch.out_dim {
            out.push((0..h).map(|k| mo[o * h + k] * a[k]).sum::<f64>() + bo[o]);
        }
    }
    out
}

pub fn naive_loss(trunk: &TrunkParams, z: &[f64], coords: &[f64], target: &[f64]) -> f64 {
    let pred = naive_forward(trunk, z, coords);
    pred.iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len() as f64
}

/// Relative error with a floor tied to the group's gradient scale, so that
/// components many orders below the group maximum are judged absolutely.
pub fn rel_err(analytic: f64, numeric: f64, scale: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6 * scale).max(1e-300);
    (analytic - numeric).abs() / denom
}

#[derive(Debug, Default, Clone, Copy)]
pub struct GroupErrors {
    pub theta: f64,
    pub modulation: f64,
    pub z: f64,
}

impl GroupErrors {
    pub fn max(&self) -> f64 {
        self.theta.max(self.modulation).max(self.z)
    }
}

/// Central differences with step `h` for every parameter of `θ`, `W`, and `z`.
pub fn finite_difference_errors(
    trunk: &TrunkParams,
    z: &[f64],
    coords: &[f64],
    target: &[f64],
    grads: &tactfunc::siren::Gradients,
    h: f64,
) -> GroupErrors {
    let n_theta = trunk.theta().len();
    let flat = trunk.as_flat().to_vec();
    let mut numeric = vec![0.0; flat.len()];
    let mut probe = trunk.clone();
    for i in 0..flat.len() {
        probe.as_flat_mut()[i] = flat[i] + h;
        let up = naive_loss(&probe, z, coords, target);
        probe.as_flat_mut()[i] = flat[i] - h;
        let down = naive_loss(&probe, z, coords, target);
        probe.as_flat_mut()[i] = flat[i];
        numeric[i] = (up - down) / (2.0 * h);
    }
    let mut zp = z.to_vec();
    let mut numeric_z = vec![0.0; z.len()];
    for k in 0..z.len() {
        zp[k] = z[k] + h;
        let up = naive_loss(trunk, &zp, coords, target);
        zp[k] = z[k] - h;
        let down = naive_loss(trunk, &zp, coords, target);
        zp[k] = z[k];
        numeric_z[k] = (up - down) / (2.0 * h);
    }
    let analytic = grads.params.as_flat();
    let group = |a: &[f64], n: &[f64]| {
        let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        a.iter()
            .zip(n)
            .map(|(&a, &n)| rel_err(a, n, scale))
            .fold(0.0f64, f64::max)
    };
    GroupErrors {
        theta: group(&analytic[..n_theta], &numeric[..n_theta]),
        modulation: group(&analytic[n_theta..], &numeric[n_theta..]),
        z: group(&grads.z, &numeric_z),
    }
}
