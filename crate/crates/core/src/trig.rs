//! Branch-free sine/cosine for activation slices.
//!
//! Three-part Cody–Waite reduction by π/2 followed by the fdlibm kernel
//! polynomials on [-π/4, π/4]. Accurate to a few ulp for |x| < 2^20; larger
//! arguments fall back to `std`.

#![allow(clippy::excessive_precision)]

const INV_PIO2: f64 = std::f64::consts::FRAC_2_PI;
const PIO2_1: f64 = 1.570_796_326_734_125_6e0;
const PIO2_2: f64 = 6.077_100_506_303_966e-11;
const PIO2_3: f64 = 2.022_266_248_711_166_5e-21;
/// 1.5·2^52: adding and subtracting rounds to the nearest integer.
const ROUND_MAGIC: f64 = 6_755_399_441_055_744.0;
const REDUCE_LIMIT: f64 = 1_048_576.0;

const S1: f64 = -1.666_666_666_666_663_2e-1;
const S2: f64 = 8.333_333_333_322_49e-3;
const S3: f64 = -1.984_126_982_985_795e-4;
const S4: f64 = 2.755_731_370_707_006_8e-6;
const S5: f64 = -2.505_076_025_340_686_3e-8;
const S6: f64 = 1.589_690_995_211_55e-10;

const C1: f64 = 4.166_666_666_666_660_2e-2;
const C2: f64 = -1.388_888_888_887_411e-3;
const C3: f64 = 2.480_158_728_947_673e-5;
const C4: f64 = -2.755_731_435_139_066_3e-7;
const C5: f64 = 2.087_572_321_298_175e-9;
const C6: f64 = -1.135_964_755_778_819_5e-11;

#[inline(always)]
fn kernel(x: f64) -> (f64, f64) {
    let t = x * INV_PIO2 + ROUND_MAGIC;
    let quadrant = t.to_bits() & 3;
    let k = t - ROUND_MAGIC;
    let r = ((x - k * PIO2_1) - k * PIO2_2) - k * PIO2_3;
    let r2 = r * r;
    let s = r + r * r2 * (S1 + r2 * (S2 + r2 * (S3 + r2 * (S4 + r2 * (S5 + r2 * S6)))));
    let c = 1.0 - 0.5 * r2
        + r2 * r2 * (C1 + r2 * (C2 + r2 * (C3 + r2 * (C4 + r2 * (C5 + r2 * C6)))));
    let swap = quadrant & 1 == 1;
    let (sv, cv) = if swap { (c, -s) } else { (s, c) };
    let sin_neg = quadrant & 2 == 2;
    (
        if sin_neg { -sv } else { sv },
        if sin_neg { -cv } else { cv },
    )
}

fn in_range(xs: &[f64]) -> bool {
    xs.iter().fold(true, |ok, x| ok & (x.abs() < REDUCE_LIMIT))
}

/// Replaces each `x` in `xs` with `sin(x)` and writes `cos(x)` into `cos`.
pub fn sin_cos_in_place(xs: &mut [f64], cos: &mut [f64]) {
    debug_assert_eq!(xs.len(), cos.len());
    if in_range(xs) {
        for (x, c) in xs.iter_mut().zip(cos.iter_mut()) {
            let (s, co) = kernel(*x);
            *x = s;
            *c = co;
        }
    } else {
        for (x, c) in xs.iter_mut().zip(cos.iter_mut()) {
            let (s, co) = x.sin_cos();
            *x = s;
            *c = co;
        }
    }
}

/// Replaces each `x` with `sin(x)`.
pub fn sin_in_place(xs: &mut [f64]) {
    if in_range(xs) {
        for x in xs.iter_mut() {
            *x = kernel(*x).0;
        }
    } else {
        for x in xs.iter_mut() {
            *x = x.sin();
        }
    }
}
