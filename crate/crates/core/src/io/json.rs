//! Strict JSON readers/writers for configs and reports.
//!
//! Schemas reject unknown keys (catching config typos before they silently
//! change an experiment) and report the JSON path of any type mismatch.
//! Omitted optional keys take their defaults and are echoed back when the
//! document is written.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::camera::CameraIntrinsics;
use crate::error::{Error, Result};

/// Reads any strict-schema JSON document.
pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
        path: path.display().to_string(),
        message: format!("at {}: {}", e.path(), e.inner()),
    })
}

/// Writes a JSON document with a trailing newline.
pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Schema {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

/// On-disk camera document: intrinsics plus the image size they belong to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraFile {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<f64>,
    pub width: usize,
    pub height: usize,
}

impl CameraFile {
    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            baseline: self.baseline,
        }
    }
}

/// Reads an intrinsics JSON document and validates it.
pub fn read_camera_file(path: impl AsRef<Path>) -> Result<CameraFile> {
    let file: CameraFile = read_json(&path)?;
    file.intrinsics().validate()?;
    if file.width == 0 || file.height == 0 {
        return Err(Error::Schema {
            path: path.as_ref().display().to_string(),
            message: "width and height must be positive".into(),
        });
    }
    Ok(file)
}
