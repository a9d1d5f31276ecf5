//! Seeded synthetic scenes and orbit cameras for desk-scale experiments.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::render::Camera;
use crate::rng;
use crate::splat::{GaussianSplat, SplatCloud, SplatError, SH_C0};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Independent splats uniform in the box.
    Random,
    /// Splats clustered around a regular grid of blobs, one colour per blob.
    BlobGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub splat_count: usize,
    /// Positions lie in `[-extent, extent]³`.
    pub extent: f32,
    /// Range of each stored log scale.
    pub log_scale_range: [f32; 2],
    /// Range of activated opacity.
    pub opacity_range: [f32; 2],
    /// Standard deviation of degree-1 SH coefficients.
    pub sh_amplitude: f32,
    /// Factor applied per additional SH degree.
    pub sh_decay: f32,
    pub sh_degree: u8,
    pub preset: Preset,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            splat_count: 1000,
            extent: 1.0,
            log_scale_range: [-4.5, -2.5],
            opacity_range: [0.3, 0.95],
            sh_amplitude: 0.15,
            sh_decay: 0.5,
            sh_degree: 3,
            preset: Preset::Random,
            seed: 0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Splat(#[from] SplatError),
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Spec(m.to_string()));
        if !(self.extent > 0.0 && self.extent.is_finite()) {
            return bad("extent must be positive");
        }
        let [s0, s1] = self.log_scale_range;
        if !(s0 <= s1 && s0.is_finite() && s1.is_finite()) {
            return bad("log scale range must be finite and ordered");
        }
        let [o0, o1] = self.opacity_range;
        if !(0.0 < o0 && o0 <= o1 && o1 < 1.0) {
            return bad("opacity range must satisfy 0 < lo <= hi < 1");
        }
        if !(self.sh_amplitude >= 0.0 && self.sh_decay >= 0.0) {
            return bad("sh amplitude and decay must be non-negative");
        }
        if self.sh_degree > 3 {
            return Err(SplatError::InvalidShDegree(self.sh_degree).into());
        }
        Ok(())
    }
}

fn logit(p: f32) -> f32 {
    (p / (1.0 - p)).ln()
}

fn random_quaternion<R: Rng>(r: &mut R) -> [f32; 4] {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| r.sample(StandardNormal));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-6 {
            return q.map(|v| (v / n) as f32);
        }
    }
}

/// DC coefficients that evaluate to `rgb` with no higher-order terms.
fn dc_for_colour(rgb: [f64; 3]) -> [f32; 3] {
    rgb.map(|c| ((c - 0.5) / SH_C0) as f32)
}

fn fill_sh<R: Rng>(s: &mut GaussianSplat, spec: &SceneSpec, r: &mut R) {
    for ch in 0..3 {
        let mut j = 0;
        for l in 1..=usize::from(spec.sh_degree) {
            let sd = f64::from(spec.sh_amplitude) * f64::from(spec.sh_decay).powi(l as i32 - 1);
            let dist = Normal::new(0.0, sd).expect("sd is finite and non-negative");
            for _ in 0..2 * l + 1 {
                s.sh_rest[ch * 15 + j] = dist.sample(r) as f32;
                j += 1;
            }
        }
    }
}

/// Generate a cloud; identical specs give identical clouds.
pub fn generate_cloud(spec: &SceneSpec) -> Result<SplatCloud, SynthError> {
    spec.validate()?;
    let mut r = rng::stream(spec.seed, &[0x5ce7e]);
    let e = spec.extent;
    let [s0, s1] = spec.log_scale_range;
    let [o0, o1] = spec.opacity_range;
    let scale = |r: &mut rand_chacha::ChaCha8Rng| if s0 == s1 { s0 } else { r.random_range(s0..s1) };
    let opacity = |r: &mut rand_chacha::ChaCha8Rng| logit(if o0 == o1 { o0 } else { r.random_range(o0..o1) });

    let grid = 3usize;
    let blob_colour = |b: usize| -> [f64; 3] {
        let (i, j, k) = (b % grid, (b / grid) % grid, b / (grid * grid));
        let lvl = |v: usize| 0.15 + 0.7 * v as f64 / (grid - 1) as f64;
        [lvl(i), lvl(j), lvl(k)]
    };
    let blob_centre = |b: usize| -> [f32; 3] {
        let (i, j, k) = (b % grid, (b / grid) % grid, b / (grid * grid));
        let at = |v: usize| e * (-0.6 + 1.2 * v as f32 / (grid - 1) as f32);
        [at(i), at(j), at(k)]
    };

    let splats = (0..spec.splat_count)
        .map(|n| {
            let mut s = GaussianSplat {
                log_scale: [scale(&mut r), scale(&mut r), scale(&mut r)],
                opacity: opacity(&mut r),
                rotation: random_quaternion(&mut r),
                ..Default::default()
            };
            match spec.preset {
                Preset::Random => {
                    s.position = [r.random_range(-e..=e), r.random_range(-e..=e), r.random_range(-e..=e)];
                    s.color_dc = dc_for_colour([
                        r.random_range(0.05..0.95),
                        r.random_range(0.05..0.95),
                        r.random_range(0.05..0.95),
                    ]);
                }
                Preset::BlobGrid => {
                    let b = n % (grid * grid * grid);
                    let c = blob_centre(b);
                    let spread = Normal::new(0.0, f64::from(e) * 0.12).expect("finite");
                    s.position = c.map(|v| v + spread.sample(&mut r) as f32);
                    let jitter = Normal::new(0.0, 0.03).expect("finite");
                    s.color_dc = dc_for_colour(blob_colour(b).map(|v| (v + jitter.sample(&mut r)).clamp(0.0, 1.0)));
                }
            }
            fill_sh(&mut s, spec, &mut r);
            s
        })
        .collect();
    Ok(SplatCloud::new(splats, spec.sh_degree)?)
}

/// `n` cameras evenly spaced on the circle of radius `radius` in the z = 0
/// plane, all looking at the origin with +z up. Camera 0 sits at
/// `(radius, 0, 0)`. Square images with a 60° horizontal field of view.
pub fn generate_orbit_cameras(n: usize, radius: f64, image_size: u32) -> Vec<Camera> {
    let size = f64::from(image_size);
    let f = 0.5 * size / (PI / 6.0).tan();
    (0..n)
        .map(|i| {
            let theta = 2.0 * PI * i as f64 / n as f64;
            let c = [radius * theta.cos(), radius * theta.sin(), 0.0];
            // rows: right, down, forward
            let fwd = [-theta.cos(), -theta.sin(), 0.0];
            let right = [-theta.sin(), theta.cos(), 0.0];
            let down = [0.0, 0.0, -1.0];
            let rows = [right, down, fwd];
            let t: [f64; 3] = rows.map(|row| -(row[0] * c[0] + row[1] * c[1] + row[2] * c[2]));
            let mut view = [0.0; 16];
            for (k, row) in rows.iter().enumerate() {
                view[4 * k..4 * k + 3].copy_from_slice(row);
                view[4 * k + 3] = t[k];
            }
            view[15] = 1.0;
            Camera {
                view,
                fx: f,
                fy: f,
                cx: 0.5 * (size - 1.0),
                cy: 0.5 * (size - 1.0),
                width: image_size,
                height: image_size,
                near: 0.01,
            }
        })
        .collect()
}
