//! Procedural person-like chips used by the synthetic scenarios and the
//! learned-comparator training sets.
//!
//! An [`Appearance`] fixes the identity (clothing colors and pattern). A
//! [`Nuisance`] draws per-frame photometric and geometric perturbations that
//! make raw pixel differences unreliable while leaving identity recoverable.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::model::Chip;

pub const NATIVE_CHIP_SIZE: usize = 48;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Appearance {
    pub shirt: [f64; 3],
    pub pants: [f64; 3],
    pub skin: [f64; 3],
    /// 0 solid shirt, 1 horizontal stripes, 2 two-tone vertical split.
    pub pattern: u8,
}

impl Appearance {
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let mut color = || {
            [
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
            ]
        };
        let shirt = color();
        let pants = color();
        let tone = rng.random_range(0.45..0.8);
        Self {
            shirt,
            pants,
            skin: [tone, tone * 0.8, tone * 0.65],
            pattern: rng.random_range(0..3),
        }
    }

    /// Distance used to keep sampled identity sets visually separable.
    pub fn distance(&self, other: &Appearance) -> f64 {
        let d = |a: &[f64; 3], b: &[f64; 3]| -> f64 {
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
        };
        let pattern = if self.pattern == other.pattern { 0.0 } else { 0.05 };
        (d(&self.shirt, &other.shirt) + d(&self.pants, &other.pants) + pattern).sqrt()
    }

    /// A copy whose clothing colors are moved by at most `amount` per channel.
    pub fn jittered<R: Rng>(&self, amount: f64, rng: &mut R) -> Self {
        let mut out = *self;
        for v in out.shirt.iter_mut().chain(out.pants.iter_mut()) {
            *v = (*v + rng.random_range(-amount..=amount)).clamp(0.05, 0.95);
        }
        out
    }
}

/// `count` identities whose pairwise [`Appearance::distance`] is at least
/// `min_distance` (best effort after a bounded number of draws).
pub fn distinct_appearances<R: Rng>(count: usize, min_distance: f64, rng: &mut R) -> Vec<Appearance> {
    let mut out: Vec<Appearance> = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        let cand = Appearance::random(rng);
        attempts += 1;
        if attempts > 10_000 || out.iter().all(|a| a.distance(&cand) >= min_distance) {
            out.push(cand);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nuisance {
    pub gain: f64,
    pub cast: [f64; 3],
    pub noise_std: f64,
    pub shift_x: i32,
    pub shift_y: i32,
    pub background: [f64; 3],
}

impl Nuisance {
    pub fn none() -> Self {
        Self {
            gain: 1.0,
            cast: [0.0; 3],
            noise_std: 0.0,
            shift_x: 0,
            shift_y: 0,
            background: [0.5; 3],
        }
    }

    /// Per-frame perturbation; `strength` in `[0, 1]` scales every component.
    pub fn random<R: Rng>(strength: f64, rng: &mut R) -> Self {
        let s = strength.clamp(0.0, 1.0);
        let max_shift = (3.0 * s).round() as i32;
        let g = rng.random_range(0.3..0.7);
        Self {
            gain: 1.0 + s * rng.random_range(-0.2..=0.2),
            cast: [
                s * rng.random_range(-0.08..=0.08),
                s * rng.random_range(-0.08..=0.08),
                s * rng.random_range(-0.08..=0.08),
            ],
            noise_std: s * 0.04,
            shift_x: rng.random_range(-max_shift..=max_shift),
            shift_y: rng.random_range(-max_shift..=max_shift),
            background: [g, g * rng.random_range(0.9..1.1), g * rng.random_range(0.85..1.05)],
        }
    }
}

/// Renders a `size`×`size` RGB chip. Values are quantized to multiples of
/// 1/255 so that 8-bit image round trips are exact.
pub fn render_chip<R: Rng>(app: &Appearance, nuisance: &Nuisance, size: usize, rng: &mut R) -> Chip {
    let n = size as f64;
    let noise = Normal::new(0.0, nuisance.noise_std.max(1e-12)).expect("valid std");
    let mut pixels = Vec::with_capacity(size * size * 3);
    for py in 0..size {
        for px in 0..size {
            // normalized body coordinates after the shift
            let u = (px as f64 + 0.5 - nuisance.shift_x as f64) / n;
            let v = (py as f64 + 0.5 - nuisance.shift_y as f64) / n;
            let base = body_color(app, &nuisance.background, u, v);
            for c in 0..3 {
                let mut val = base[c] * nuisance.gain + nuisance.cast[c];
                if nuisance.noise_std > 0.0 {
                    val += noise.sample(rng);
                }
                pixels.push(quantize(val));
            }
        }
    }
    Chip::new(size, size, 3, pixels).expect("rendered chip is valid")
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn body_color(app: &Appearance, background: &[f64; 3], u: f64, v: f64) -> [f64; 3] {
    let (hx, hy, hr) = (0.5, 0.16, 0.11);
    if (u - hx).powi(2) + (v - hy).powi(2) <= hr * hr {
        return app.skin;
    }
    if (0.28..=0.72).contains(&u) && (0.27..0.6).contains(&v) {
        return match app.pattern {
            1 if ((v - 0.27) / 0.055) as i32 % 2 == 1 => darker(&app.shirt),
            2 if u > 0.5 => darker(&app.shirt),
            _ => app.shirt,
        };
    }
    let leg = (0.3..=0.47).contains(&u) || (0.53..=0.7).contains(&u);
    if leg && (0.6..=0.95).contains(&v) {
        return app.pants;
    }
    *background
}

fn darker(c: &[f64; 3]) -> [f64; 3] {
    [c[0] * 0.55, c[1] * 0.55, c[2] * 0.55]
}
