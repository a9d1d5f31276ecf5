//! CPU reference renderer for Gaussian splats.
//!
//! Splats are projected with the local affine approximation of the pinhole
//! map, sorted front to back, and alpha-composited per pixel. Pixel centres
//! sit at integer coordinates. The backward pass covers colour only.

mod camera;
mod image;
mod raster;
pub mod sh;

use thiserror::Error;

use crate::linalg::{mat3_mul, transpose3, Mat2, Mat3, Vec3};
use crate::splat::{quaternion_to_matrix, ActivatedSplat, SplatError};

pub use self::image::Image;
pub use camera::{load_cameras, save_cameras, Camera};
pub use raster::{render, render_colour_backward, BlendWeights, Frame, RenderOptions, RenderStats};
pub use sh::{eval_sh, sh_basis};

/// Low-pass dilation added to both diagonal entries of the 2D covariance.
pub const COV2D_DILATION: f64 = 0.3;
pub const ALPHA_MAX: f64 = 0.99;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
pub const TRANSMITTANCE_MIN: f64 = 1e-4;
/// 2D covariances with a smaller determinant are skipped.
pub const SINGULAR_DET: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("view direction has norm {0}, expected 1")]
    NonUnitDirection(f64),
    #[error(transparent)]
    Splat(#[from] SplatError),
    #[error("image buffer has {got} values, expected {expected}")]
    ImageSize { expected: usize, got: usize },
    #[error("colour buffer has {got} entries, expected {expected}")]
    ColourCount { expected: usize, got: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("camera file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("png encoding: {0}")]
    Png(#[from] ::image::ImageError),
}

/// A splat after projection into one camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedSplat {
    /// Pixel coordinates of the projected centre.
    pub mean: [f64; 2],
    /// Image-space covariance, dilation included.
    pub cov: Mat2,
    /// View-space z.
    pub depth: f64,
    /// SH colour before clamping.
    pub colour: [f64; 3],
    pub opacity: f64,
    /// Unit direction from the camera centre to the splat.
    pub view_dir: Vec3,
}

pub(crate) fn activated_covariance(a: &ActivatedSplat) -> Mat3 {
    let r = quaternion_to_matrix(a.rotation);
    let mut m = r;
    for row in m.iter_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v *= a.scale[j];
        }
    }
    mat3_mul(&m, &transpose3(&m))
}

/// Project one activated splat; `None` when it lies at or behind the near plane.
pub fn project(a: &ActivatedSplat, cam: &Camera) -> Option<ProjectedSplat> {
    let p = cam.to_view_space(&a.position);
    let z = p[2];
    if !(z > cam.near) {
        return None;
    }
    let w = cam.rotation();
    let cov_view = mat3_mul(&mat3_mul(&w, &activated_covariance(a)), &transpose3(&w));
    // Jacobian of (fx x/z + cx, fy y/z + cy) at the view-space point
    let j = [
        [cam.fx / z, 0.0, -cam.fx * p[0] / (z * z)],
        [0.0, cam.fy / z, -cam.fy * p[1] / (z * z)],
    ];
    let mut cov = [[0.0; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            let mut acc = 0.0;
            for k in 0..3 {
                for l in 0..3 {
                    acc += j[r][k] * cov_view[k][l] * j[c][l];
                }
            }
            cov[r][c] = acc;
        }
    }
    let off = 0.5 * (cov[0][1] + cov[1][0]);
    cov[0][1] = off;
    cov[1][0] = off;
    cov[0][0] += COV2D_DILATION;
    cov[1][1] += COV2D_DILATION;

    let center = cam.center();
    let d = [
        a.position[0] - center[0],
        a.position[1] - center[1],
        a.position[2] - center[2],
    ];
    let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    let view_dir = [d[0] / n, d[1] / n, d[2] / n];
    let colour = sh::eval_sh_basis(&a.color_dc, &a.sh_rest, &sh_basis(view_dir));

    Some(ProjectedSplat {
        mean: [cam.fx * p[0] / z + cam.cx, cam.fy * p[1] / z + cam.cy],
        cov,
        depth: z,
        colour,
        opacity: a.opacity,
        view_dir,
    })
}
