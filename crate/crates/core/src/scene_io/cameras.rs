//! `cameras.json`: a list of pinhole cameras with world-to-camera poses.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Mat3, Vec3};

/// One record of `cameras.json`. `R` is row-major, world-to-camera, +z forward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub image: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
}

impl CameraRecord {
    pub fn rotation(&self) -> Mat3 {
        Mat3::from_row_slice(&self.r)
    }

    pub fn translation(&self) -> Vec3 {
        Vec3::from_column_slice(&self.t)
    }
}

pub fn read_cameras(path: &Path) -> Result<Vec<CameraRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingAsset(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
}

pub fn write_cameras(records: &[CameraRecord], path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(records)
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Orthonormality and handedness check for a rotation matrix.
pub fn check_rotation(r: &Mat3, tol: f64) -> Result<()> {
    let err = (r.transpose() * r - Mat3::identity()).abs().max();
    if err > tol {
        return Err(Error::Validation(format!(
            "rotation is not orthonormal (|RᵀR - I| = {err:.3e})"
        )));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > tol {
        return Err(Error::Validation(format!("rotation determinant is {det}")));
    }
    Ok(())
}
