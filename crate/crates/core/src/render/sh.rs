//! Real spherical harmonics up to degree 3, in the 3DGS sign convention.

use crate::splat::{SH_C0, SH_REST_LEN};

use super::RenderError;

const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Number of basis functions through degree 3.
pub const SH_BASIS_LEN: usize = 16;
/// Coefficients per channel excluding DC.
pub const SH_REST_PER_CHANNEL: usize = 15;

/// All 16 basis values at a unit direction.
pub fn sh_basis(dir: [f64; 3]) -> [f64; SH_BASIS_LEN] {
    let [x, y, z] = dir;
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, yz, xz) = (x * y, y * z, x * z);
    [
        SH_C0,
        -SH_C1 * y,
        SH_C1 * z,
        -SH_C1 * x,
        SH_C2[0] * xy,
        SH_C2[1] * yz,
        SH_C2[2] * (2.0 * zz - xx - yy),
        SH_C2[3] * xz,
        SH_C2[4] * (xx - yy),
        SH_C3[0] * y * (3.0 * xx - yy),
        SH_C3[1] * xy * z,
        SH_C3[2] * y * (4.0 * zz - xx - yy),
        SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
        SH_C3[4] * x * (4.0 * zz - xx - yy),
        SH_C3[5] * z * (xx - yy),
        SH_C3[6] * x * (xx - 3.0 * yy),
    ]
}

/// Colour from DC and higher-order coefficients, including the +0.5 offset
/// and without clamping.
pub fn eval_sh_basis(dc: &[f64; 3], sh_rest: &[f64; SH_REST_LEN], basis: &[f64; SH_BASIS_LEN]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (ch, o) in out.iter_mut().enumerate() {
        let rest = &sh_rest[ch * SH_REST_PER_CHANNEL..(ch + 1) * SH_REST_PER_CHANNEL];
        let mut acc = basis[0] * dc[ch];
        for (b, c) in basis[1..].iter().zip(rest) {
            acc += b * c;
        }
        *o = acc + 0.5;
    }
    out
}

/// Evaluate view-dependent colour; `view_dir` must be unit length within 1e-6.
pub fn eval_sh(dc: &[f64; 3], sh_rest: &[f64; SH_REST_LEN], view_dir: [f64; 3]) -> Result<[f64; 3], RenderError> {
    let n = (view_dir[0].powi(2) + view_dir[1].powi(2) + view_dir[2].powi(2)).sqrt();
    if !((n - 1.0).abs() <= 1e-6) {
        return Err(RenderError::NonUnitDirection(n));
    }
    Ok(eval_sh_basis(dc, sh_rest, &sh_basis(view_dir)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dc_only_colour() {
        let dc = [1.0, -2.0, 0.5];
        let rest = [0.0; SH_REST_LEN];
        for dir in [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.6, 0.0, -0.8]] {
            let c = eval_sh(&dc, &rest, dir).unwrap();
            for ch in 0..3 {
                assert!((c[ch] - (0.282_094_791_77 * dc[ch] + 0.5)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn degree_one_z_coefficient() {
        let mut rest = [0.0; SH_REST_LEN];
        let a = 0.7;
        // basis index 2 (z-aligned) of channel 1
        rest[SH_REST_PER_CHANNEL + 1] = a;
        let up = eval_sh(&[0.0; 3], &rest, [0.0, 0.0, 1.0]).unwrap();
        let down = eval_sh(&[0.0; 3], &rest, [0.0, 0.0, -1.0]).unwrap();
        assert!((up[1] - down[1] - 2.0 * a * 0.488_602_511_9).abs() < 1e-9);
        assert_eq!(up[0], down[0]);
        assert_eq!(up[2], down[2]);
    }

    #[test]
    fn rejects_non_unit_direction() {
        assert!(matches!(
            eval_sh(&[0.0; 3], &[0.0; SH_REST_LEN], [0.0, 0.0, 2.0]),
            Err(RenderError::NonUnitDirection(_))
        ));
    }

    /// Gram matrix of the basis over the sphere by tensor-product quadrature
    /// (Gauss-Legendre would do; a fine midpoint rule in cos(theta) and phi is
    /// plenty for polynomials of degree 6).
    #[test]
    fn basis_is_orthonormal() {
        let (nt, np) = (400, 400);
        let mut gram = [[0.0f64; SH_BASIS_LEN]; SH_BASIS_LEN];
        let w = (2.0 / nt as f64) * (2.0 * std::f64::consts::PI / np as f64);
        for i in 0..nt {
            let ct = -1.0 + (i as f64 + 0.5) * 2.0 / nt as f64;
            let st = (1.0 - ct * ct).sqrt();
            for j in 0..np {
                let phi = (j as f64 + 0.5) * 2.0 * std::f64::consts::PI / np as f64;
                let b = sh_basis([st * phi.cos(), st * phi.sin(), ct]);
                for a in 0..SH_BASIS_LEN {
                    for c in 0..SH_BASIS_LEN {
                        gram[a][c] += w * b[a] * b[c];
                    }
                }
            }
        }
        for a in 0..SH_BASIS_LEN {
            for c in 0..SH_BASIS_LEN {
                let want = if a == c { 1.0 } else { 0.0 };
                assert!((gram[a][c] - want).abs() < 1e-4, "({a},{c}) = {}", gram[a][c]);
            }
        }
    }

    #[test]
    fn addition_theorem() {
        // sum of squared basis values is (L+1)^2 / 4pi for every direction
        for dir in [[0.0, 0.0, 1.0], [0.48, 0.6, 0.64], [-1.0, 0.0, 0.0]] {
            let s: f64 = sh_basis(dir).iter().map(|b| b * b).sum();
            assert!((s - 16.0 / (4.0 * std::f64::consts::PI)).abs() < 1e-12);
        }
    }
}
