use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::linalg::{Mat3, Vec3};

use super::RenderError;

/// Pinhole camera. `view` is the row-major 4x4 world-to-camera transform
/// (camera looks along +z, +y points down the image).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub view: [f64; 16],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub near: f64,
}

impl Camera {
    pub fn validate(&self) -> Result<(), RenderError> {
        let bad = |msg: &str| Err(RenderError::InvalidCamera(msg.to_string()));
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad("focal lengths must be positive");
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be at least 1x1");
        }
        if !(self.near > 0.0) {
            return bad("near plane must be positive");
        }
        if self.view.iter().chain([&self.cx, &self.cy]).any(|v| !v.is_finite()) {
            return bad("non-finite camera parameter");
        }
        Ok(())
    }

    pub fn rotation(&self) -> Mat3 {
        let v = &self.view;
        [[v[0], v[1], v[2]], [v[4], v[5], v[6]], [v[8], v[9], v[10]]]
    }

    pub fn translation(&self) -> Vec3 {
        [self.view[3], self.view[7], self.view[11]]
    }

    pub fn to_view_space(&self, p: &Vec3) -> Vec3 {
        let v = &self.view;
        [
            v[0] * p[0] + v[1] * p[1] + v[2] * p[2] + v[3],
            v[4] * p[0] + v[5] * p[1] + v[6] * p[2] + v[7],
            v[8] * p[0] + v[9] * p[1] + v[10] * p[2] + v[11],
        ]
    }

    /// World-space camera centre, `-Rᵀ t` for a rigid view transform.
    pub fn center(&self) -> Vec3 {
        let r = self.rotation();
        let t = self.translation();
        [
            -(r[0][0] * t[0] + r[1][0] * t[1] + r[2][0] * t[2]),
            -(r[0][1] * t[0] + r[1][1] * t[1] + r[2][1] * t[2]),
            -(r[0][2] * t[0] + r[1][2] * t[1] + r[2][2] * t[2]),
        ]
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CameraFile {
    One(Camera),
    Many(Vec<Camera>),
}

/// Read cameras from a JSON file holding one camera object or an array.
pub fn load_cameras(path: impl AsRef<Path>) -> Result<Vec<Camera>, RenderError> {
    let text = fs::read_to_string(path)?;
    let cams = match serde_json::from_str(&text)? {
        CameraFile::One(c) => vec![c],
        CameraFile::Many(v) => v,
    };
    for c in &cams {
        c.validate()?;
    }
    Ok(cams)
}

pub fn save_cameras(cams: &[Camera], path: impl AsRef<Path>) -> Result<(), RenderError> {
    fs::write(path, serde_json::to_string_pretty(cams)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> Camera {
        Camera {
            view: [
                1.0, 0.0, 0.0, 0.5, //
                0.0, 1.0, 0.0, -1.0, //
                0.0, 0.0, 1.0, 4.0, //
                0.0, 0.0, 0.0, 1.0,
            ],
            fx: 100.0,
            fy: 100.0,
            cx: 32.0,
            cy: 32.0,
            width: 64,
            height: 64,
            near: 0.01,
        }
    }

    #[test]
    fn center_inverts_translation() {
        let c = cam();
        let center = c.center();
        assert_eq!(center, [-0.5, 1.0, -4.0]);
        assert_eq!(c.to_view_space(&center), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn validation() {
        assert!(cam().validate().is_ok());
        let mut c = cam();
        c.fx = 0.0;
        assert!(c.validate().is_err());
        let mut c = cam();
        c.width = 0;
        assert!(c.validate().is_err());
        let mut c = cam();
        c.near = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_single_or_list() {
        let dir = tempfile::tempdir().unwrap();
        let one = dir.path().join("one.json");
        fs::write(&one, serde_json::to_string(&cam()).unwrap()).unwrap();
        assert_eq!(load_cameras(&one).unwrap(), vec![cam()]);
        let many = dir.path().join("many.json");
        save_cameras(&[cam(), cam()], &many).unwrap();
        assert_eq!(load_cameras(&many).unwrap().len(), 2);
    }
}
