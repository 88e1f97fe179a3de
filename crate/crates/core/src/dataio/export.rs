//! `export-windows` dump: `windows.bin` holds one fixed-size little-endian
//! `f64` record per window, `windows.json` declares the record layout.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SampleWindow;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowIndex {
    pub count: usize,
    pub record_bytes: usize,
    pub blob: String,
    pub fields: Vec<FieldSpec>,
}

impl WindowIndex {
    fn record_len(&self) -> usize {
        self.fields.iter().map(|f| f.shape.iter().product::<usize>()).sum()
    }
}

pub fn export_windows(windows: &[SampleWindow], dir: &Path) -> Result<WindowIndex> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (w, h) = windows.first().map(|w| w.frame_a.image.dims()).unwrap_or((0, 0));
    let n_imu = windows.first().map(|w| w.imu.len()).unwrap_or(0);
    let field = |name: &str, shape: Vec<usize>| FieldSpec {
        name: name.into(),
        dtype: "f64le".into(),
        shape,
    };
    let mut index = WindowIndex {
        count: windows.len(),
        record_bytes: 0,
        blob: "windows.bin".into(),
        fields: vec![
            field("timestamps", vec![2]),
            field("frame_a", vec![h, w]),
            field("frame_b", vec![h, w]),
            field("imu", vec![n_imu, 7]),
            field("target", vec![6]),
        ],
    };
    index.record_bytes = 8 * index.record_len();
    let mut blob = Vec::with_capacity(index.record_bytes * windows.len());
    let mut put = |v: f64| blob.extend_from_slice(&v.to_le_bytes());
    for win in windows {
        if win.frame_a.image.dims() != (w, h) || win.frame_b.image.dims() != (w, h) || win.imu.len() != n_imu {
            return Err(Error::Validation("windows have inconsistent shapes".into()));
        }
        put(win.frame_a.timestamp);
        put(win.frame_b.timestamp);
        win.frame_a.image.data().iter().for_each(|&v| put(v));
        win.frame_b.image.data().iter().for_each(|&v| put(v));
        for s in &win.imu {
            put(s.timestamp);
            s.channels().iter().for_each(|&v| put(v));
        }
        win.target.to_array().iter().for_each(|&v| put(v));
    }
    let bpath = dir.join(&index.blob);
    fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))?;
    let ipath = dir.join("windows.json");
    fs::write(&ipath, serde_json::to_vec_pretty(&index)?).map_err(|e| Error::io(&ipath, e))?;
    Ok(index)
}

/// Reads the index and the raw records (one `Vec<f64>` per window).
pub fn read_exported_windows(dir: &Path) -> Result<(WindowIndex, Vec<Vec<f64>>)> {
    let ipath = dir.join("windows.json");
    let index: WindowIndex =
        serde_json::from_slice(&fs::read(&ipath).map_err(|e| Error::io(&ipath, e))?)?;
    let bpath = dir.join(&index.blob);
    let bytes = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    if bytes.len() != index.record_bytes * index.count {
        return Err(Error::Load {
            path: bpath,
            message: format!("{} bytes, index declares {}", bytes.len(), index.record_bytes * index.count),
        });
    }
    let records = bytes
        .chunks_exact(index.record_bytes.max(1))
        .map(|rec| rec.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        .collect();
    Ok((index, records))
}
