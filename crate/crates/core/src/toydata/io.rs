//! On-disk dataset layout (`manifest.json` + `pixels.f32`) and binary PGM.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Demographics, ImageRecord, LabelState, Provenance, N_LABELS};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PIXELS_FILE: &str = "pixels.f32";
pub const DATASET_FORMAT: &str = "synthsupp-dataset-1";

#[derive(Serialize, Deserialize)]
struct RecordMeta {
    id: u64,
    patient_id: u64,
    label_states: [LabelState; N_LABELS],
    demographics: Demographics,
    provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    image_size: usize,
    pixel_file: String,
    label_names: Vec<String>,
    records: Vec<RecordMeta>,
}

/// Writes the manifest and a little-endian f32 pixel blob, records in order,
/// each record row-major.
pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let plane = data.image_size * data.image_size;
    let mut blob = BufWriter::new(File::create(dir.join(PIXELS_FILE))?);
    for r in &data.records {
        if r.pixels.len() != plane {
            return Err(Error::Format(format!("record {} has {} pixels, expected {plane}", r.id, r.pixels.len())));
        }
        for v in &r.pixels {
            blob.write_all(&v.to_le_bytes())?;
        }
    }
    blob.flush()?;
    let manifest = Manifest {
        format: DATASET_FORMAT.into(),
        image_size: data.image_size,
        pixel_file: PIXELS_FILE.into(),
        label_names: super::LABEL_NAMES.iter().map(|s| s.to_string()).collect(),
        records: data
            .records
            .iter()
            .map(|r| RecordMeta {
                id: r.id,
                patient_id: r.patient_id,
                label_states: r.label_states,
                demographics: r.demographics,
                provenance: r.provenance,
            })
            .collect(),
    };
    let mut w = BufWriter::new(File::create(dir.join(MANIFEST_FILE))?);
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest = serde_json::from_reader(BufReader::new(File::open(dir.join(MANIFEST_FILE))?))?;
    if manifest.format != DATASET_FORMAT {
        return Err(Error::Format(format!("unsupported dataset format {:?}", manifest.format)));
    }
    let plane = manifest.image_size * manifest.image_size;
    let mut bytes = Vec::new();
    File::open(dir.join(&manifest.pixel_file))?.read_to_end(&mut bytes)?;
    if bytes.len() != plane * manifest.records.len() * 4 {
        return Err(Error::Format(format!(
            "pixel blob holds {} bytes, expected {} for {} records",
            bytes.len(),
            plane * manifest.records.len() * 4,
            manifest.records.len()
        )));
    }
    let records = manifest
        .records
        .into_iter()
        .zip(bytes.chunks_exact(plane * 4))
        .map(|(m, chunk)| {
            let pixels: Vec<f32> = chunk.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Format(format!("record {} has pixels outside [0,1]", m.id)));
            }
            Ok(ImageRecord {
                id: m.id,
                patient_id: m.patient_id,
                pixels,
                label_states: m.label_states,
                demographics: m.demographics,
                provenance: m.provenance,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset { image_size: manifest.image_size, records })
}

/// 8-bit binary graymap; values are clamped to `[0, 1]` and rounded.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[f32]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::InvalidArgument(format!("{} pixels for a {width}x{height} image", pixels.len())));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// Reads an 8-bit P5 file into `(width, height, pixels in [0,1])`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = Vec::new();
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    while header.len() < 4 {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(bad("truncated header"));
        }
        let content = line.split('#').next().unwrap_or("");
        header.extend(content.split_whitespace().map(str::to_owned));
    }
    if header[0] != "P5" {
        return Err(bad("not a binary graymap"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (width, height, maxval) = (num(&header[1])?, num(&header[2])?, num(&header[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit graymaps are supported"));
    }
    let mut bytes = vec![0u8; width * height];
    r.read_exact(&mut bytes)?;
    Ok((width, height, bytes.iter().map(|&b| b as f32 / maxval as f32).collect()))
}
