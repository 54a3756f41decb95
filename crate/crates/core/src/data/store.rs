//! Dataset directories: one PPM/PGM triple per sample plus `manifest.csv`.

use std::fs;
use std::path::{Path, PathBuf};

use super::pnm::{read_pgm, read_ppm, write_pgm, write_ppm};
use super::SceneSample;
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.csv";

/// File locations of one sample, relative to the dataset directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplePaths {
    pub rgb: PathBuf,
    pub depth: PathBuf,
    pub mask: PathBuf,
}

impl SamplePaths {
    pub fn for_id(id: &str) -> Self {
        Self {
            rgb: format!("{id}_rgb.ppm").into(),
            depth: format!("{id}_depth.pgm").into(),
            mask: format!("{id}_mask.pgm").into(),
        }
    }
}

pub fn save_sample(dir: &Path, sample: &SceneSample) -> Result<SamplePaths> {
    let paths = SamplePaths::for_id(&sample.id);
    write_ppm(dir.join(&paths.rgb), &sample.rgb)?;
    write_pgm(dir.join(&paths.depth), &sample.depth)?;
    write_pgm(dir.join(&paths.mask), &sample.mask)?;
    Ok(paths)
}

pub fn load_sample(dir: &Path, id: &str, paths: &SamplePaths) -> Result<SceneSample> {
    let mask_path = dir.join(&paths.mask);
    let mask = read_pgm(&mask_path)?;
    if let Some(i) = mask.data().iter().position(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::format(&mask_path, i as u64, "mask is not binary (0 or 255)"));
    }
    let sample = SceneSample {
        id: id.to_owned(),
        rgb: read_ppm(dir.join(&paths.rgb))?,
        depth: read_pgm(dir.join(&paths.depth))?,
        mask,
    };
    sample.validate()?;
    Ok(sample)
}

/// Writes every sample and the manifest, creating `dir` if needed.
pub fn save_dataset(dir: &Path, samples: &[SceneSample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = dir.join(MANIFEST);
    let csv_err = |e: csv::Error| Error::format(&manifest, 0, e.to_string());
    let mut w = csv::Writer::from_path(&manifest).map_err(csv_err)?;
    w.write_record(["id", "rgb", "depth", "mask"]).map_err(csv_err)?;
    for s in samples {
        let p = save_sample(dir, s)?;
        let cell = |p: &Path| p.to_string_lossy().into_owned();
        w.write_record([s.id.clone(), cell(&p.rgb), cell(&p.depth), cell(&p.mask)])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))
}

/// Reads `manifest.csv` and every sample it lists, in manifest order.
pub fn load_dataset(dir: &Path) -> Result<Vec<SceneSample>> {
    let manifest = dir.join(MANIFEST);
    let mut r = csv::Reader::from_path(&manifest).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(&manifest, io),
        other => Error::format(&manifest, 0, format!("{other:?}")),
    })?;
    let headers = r
        .headers()
        .map_err(|e| Error::format(&manifest, 0, e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["id", "rgb", "depth", "mask"] {
        return Err(Error::format(&manifest, 0, "expected header id,rgb,depth,mask"));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| {
            let offset = e.position().map_or(0, |p| p.byte());
            Error::format(&manifest, offset, e.to_string())
        })?;
        let paths = SamplePaths {
            rgb: rec[1].into(),
            depth: rec[2].into(),
            mask: rec[3].into(),
        };
        out.push(load_sample(dir, &rec[0], &paths)?);
    }
    Ok(out)
}
