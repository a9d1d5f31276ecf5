//! Gaussian splat records in their stored (pre-activation) form.
//!
//! Every field is kept exactly as the 3DGS checkpoint stores it: opacity as a
//! logit, scales as logarithms, rotation as an unnormalized `(w, x, y, z)`
//! quaternion. Activation happens only when a splat is rendered.

use thiserror::Error;

use crate::linalg::{mat3_mul, transpose3, Mat3};

/// Number of higher-order SH coefficients at degree 3 (15 per channel).
pub const SH_REST_LEN: usize = 45;
/// Stored reals per splat: position, opacity, scale, rotation, DC colour, SH rest.
pub const PARAMS_PER_SPLAT: usize = 3 + 1 + 3 + 4 + 3 + SH_REST_LEN;

/// Degree-0 real spherical harmonic constant.
pub const SH_C0: f64 = 0.282_094_791_773_878_1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplatError {
    #[error("rotation quaternion has zero norm")]
    ZeroQuaternion,
    #[error("sh degree {0} is outside 0..=3")]
    InvalidShDegree(u8),
}

/// One splat, all values as stored on disk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianSplat {
    pub position: [f32; 3],
    /// Opacity logit; activated by the logistic sigmoid.
    pub opacity: f32,
    /// Per-axis log scale; activated by `exp`.
    pub log_scale: [f32; 3],
    /// Quaternion in `(w, x, y, z)` order; activated by normalization.
    pub rotation: [f32; 4],
    pub color_dc: [f32; 3],
    /// Channel-major SH coefficients: `sh_rest[ch * 15 + j]` is basis `j + 1`
    /// of channel `ch`. Entries beyond the cloud's degree are zero.
    pub sh_rest: [f32; SH_REST_LEN],
}

impl Default for GaussianSplat {
    fn default() -> Self {
        Self {
            position: [0.0; 3],
            opacity: 0.0,
            log_scale: [0.0; 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            color_dc: [0.0; 3],
            sh_rest: [0.0; SH_REST_LEN],
        }
    }
}

/// Splat attributes after activation, in `f64`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivatedSplat {
    pub position: [f64; 3],
    pub opacity: f64,
    pub scale: [f64; 3],
    pub rotation: [f64; 4],
    pub color_dc: [f64; 3],
    pub sh_rest: [f64; SH_REST_LEN],
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Unit quaternion from raw parameters.
pub fn normalize_quaternion(q: [f32; 4]) -> Result<[f64; 4], SplatError> {
    let q = q.map(f64::from);
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(SplatError::ZeroQuaternion);
    }
    Ok(q.map(|v| v / n))
}

/// Rotation matrix of a unit `(w, x, y, z)` quaternion.
pub fn quaternion_to_matrix(q: [f64; 4]) -> Mat3 {
    let [w, x, y, z] = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// World-space covariance `R S Sᵀ Rᵀ` from raw log-scales and quaternion.
pub fn covariance3d(log_scale: [f32; 3], rotation: [f32; 4]) -> Result<Mat3, SplatError> {
    let r = quaternion_to_matrix(normalize_quaternion(rotation)?);
    let s = log_scale.map(|v| f64::from(v).exp());
    // R·S scales the columns of R
    let mut m = r;
    for row in m.iter_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v *= s[j];
        }
    }
    let mut cov = mat3_mul(&m, &transpose3(&m));
    // exact symmetry regardless of summation order
    for i in 0..3 {
        for j in (i + 1)..3 {
            let avg = 0.5 * (cov[i][j] + cov[j][i]);
            cov[i][j] = avg;
            cov[j][i] = avg;
        }
    }
    Ok(cov)
}

impl GaussianSplat {
    pub fn activate(&self) -> Result<ActivatedSplat, SplatError> {
        Ok(ActivatedSplat {
            position: self.position.map(f64::from),
            opacity: sigmoid(f64::from(self.opacity)),
            scale: self.log_scale.map(|v| f64::from(v).exp()),
            rotation: normalize_quaternion(self.rotation)?,
            color_dc: self.color_dc.map(f64::from),
            sh_rest: self.sh_rest.map(f64::from),
        })
    }

    pub fn covariance(&self) -> Result<Mat3, SplatError> {
        covariance3d(self.log_scale, self.rotation)
    }
}

/// Number of stored SH-rest coefficients for a given degree.
pub fn sh_rest_len(degree: u8) -> usize {
    let d = usize::from(degree);
    3 * ((d + 1) * (d + 1) - 1)
}

/// Coefficients per channel (excluding DC) for a given degree.
pub fn sh_rest_per_channel(degree: u8) -> usize {
    sh_rest_len(degree) / 3
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplatCloud {
    pub splats: Vec<GaussianSplat>,
    sh_degree: u8,
}

impl SplatCloud {
    pub fn new(splats: Vec<GaussianSplat>, sh_degree: u8) -> Result<Self, SplatError> {
        if sh_degree > 3 {
            return Err(SplatError::InvalidShDegree(sh_degree));
        }
        Ok(Self { splats, sh_degree })
    }

    pub fn empty(sh_degree: u8) -> Result<Self, SplatError> {
        Self::new(Vec::new(), sh_degree)
    }

    pub fn sh_degree(&self) -> u8 {
        self.sh_degree
    }

    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }

    /// Raw parameter bytes of the uncompressed model (59 f32 per splat).
    pub fn uncompressed_bytes(&self) -> u64 {
        self.splats.len() as u64 * PARAMS_PER_SPLAT as u64 * 4
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sym3_eigenvalues;
    use proptest::prelude::*;

    fn assert_mat_close(a: &Mat3, b: &Mat3, tol: f64) {
        for i in 0..3 {
            for j in 0..3 {
                assert!((a[i][j] - b[i][j]).abs() <= tol, "{a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn parameter_count() {
        assert_eq!(PARAMS_PER_SPLAT, 59);
        assert_eq!(sh_rest_len(3), 45);
        assert_eq!(sh_rest_len(0), 0);
        assert_eq!(sh_rest_len(1), 9);
    }

    #[test]
    fn identity_covariance() {
        let cov = covariance3d([0.0; 3], [1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_mat_close(&cov, &crate::linalg::IDENTITY3, 1e-15);
    }

    #[test]
    fn scaled_covariance() {
        let cov = covariance3d([2f32.ln(), 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]).unwrap();
        let want = [[4.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert_mat_close(&cov, &want, 1e-6);
    }

    #[test]
    fn zero_quaternion_rejected() {
        assert_eq!(covariance3d([0.0; 3], [0.0; 4]), Err(SplatError::ZeroQuaternion));
        let s = GaussianSplat {
            rotation: [0.0; 4],
            ..Default::default()
        };
        assert!(s.activate().is_err());
    }

    #[test]
    fn activation_of_zero_splat() {
        let s = GaussianSplat::default();
        let a = s.activate().unwrap();
        assert_eq!(a.opacity, 0.5);
        assert_eq!(a.scale, [1.0; 3]);
    }

    #[test]
    fn opacity_saturates() {
        let s = GaussianSplat {
            opacity: 20.0,
            ..Default::default()
        };
        assert!(s.activate().unwrap().opacity > 1.0 - 1e-8);
    }

    #[test]
    fn quaternion_normalized() {
        let s = GaussianSplat {
            rotation: [2.0, 0.0, 0.0, 0.0],
            ..Default::default()
        };
        assert_eq!(s.activate().unwrap().rotation, [1.0, 0.0, 0.0, 0.0]);
    }

    /// Rotation matrix built from axis-angle via Rodrigues' formula, independent
    /// of the quaternion algebra above.
    fn rodrigues(q: [f64; 4]) -> Mat3 {
        let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        let [w, x, y, z] = q.map(|v| v / n);
        let s = (x * x + y * y + z * z).sqrt();
        let angle = 2.0 * s.atan2(w);
        if s < 1e-15 {
            return crate::linalg::IDENTITY3;
        }
        let k = [x / s, y / s, z / s];
        let kx = [[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]];
        let kx2 = mat3_mul(&kx, &kx);
        let mut r = crate::linalg::IDENTITY3;
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] += angle.sin() * kx[i][j] + (1.0 - angle.cos()) * kx2[i][j];
            }
        }
        r
    }

    fn brute_force_cov(s: [f32; 3], q: [f32; 4]) -> Mat3 {
        let r = rodrigues(q.map(f64::from));
        let scale = s.map(|v| f64::from(v).exp());
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    out[i][j] += r[i][k] * scale[k] * scale[k] * r[j][k];
                }
            }
        }
        out
    }

    fn quat() -> impl Strategy<Value = [f32; 4]> {
        prop::array::uniform4(-1.0f32..1.0).prop_filter("nonzero", |q| q.iter().map(|v| v * v).sum::<f32>() > 1e-3)
    }

    proptest! {
        #[test]
        fn covariance_matches_oracle(s in prop::array::uniform3(-3.0f32..3.0), q in quat()) {
            let got = covariance3d(s, q).unwrap();
            let want = brute_force_cov(s, q);
            let scale = want.iter().flatten().fold(1.0f64, |m, v| m.max(v.abs()));
            for i in 0..3 {
                for j in 0..3 {
                    prop_assert!((got[i][j] - want[i][j]).abs() <= 1e-10 * scale);
                }
            }
        }

        #[test]
        fn covariance_symmetric_psd(s in prop::array::uniform3(-10.0f32..10.0), q in quat()) {
            let cov = covariance3d(s, q).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    prop_assert!((cov[i][j] - cov[j][i]).abs() <= 1e-9);
                }
            }
            let ev = sym3_eigenvalues(&cov);
            // relative to the spectrum, since exp(20) entries carry ~1e-7 absolute noise
            let scale = ev[2].abs().max(1.0);
            prop_assert!(ev[0] >= -1e-9 * scale, "{ev:?}");
        }

        #[test]
        fn covariance_sign_invariant(s in prop::array::uniform3(-10.0f32..10.0), q in quat()) {
            let a = covariance3d(s, q).unwrap();
            let b = covariance3d(s, q.map(|v| -v)).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    prop_assert!((a[i][j] - b[i][j]).abs() <= 1e-9);
                }
            }
        }

        #[test]
        fn activation_monotone(a in -30.0f32..30.0, b in -30.0f32..30.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assume!(lo < hi);
            let sl = sigmoid(f64::from(lo));
            let sh = sigmoid(f64::from(hi));
            prop_assert!(sl <= sh);
            prop_assert!(sl > 0.0 && sh < 1.0 || hi > 20.0);
            prop_assert!(f64::from(lo).exp() < f64::from(hi).exp());
        }
    }
}
