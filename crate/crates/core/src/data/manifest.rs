//! `image,patient_id,target` CSV manifests.

use std::collections::HashSet;
use std::io::Read;
use std::path::Path;

use serde::Deserialize;

use super::Record;
use crate::error::{Error, Result};

#[derive(Deserialize)]
struct Row {
    image: String,
    patient_id: String,
    target: String,
}

/// Parses a manifest, resolving each image to `image_dir/<image>.png`.
/// Image files are not touched.
pub fn parse_manifest(reader: impl Read, image_dir: &Path) -> Result<Vec<Record>> {
    let mut csv = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = csv.headers()?.clone();
    for column in ["image", "patient_id", "target"] {
        if !headers.iter().any(|h| h == column) {
            return Err(Error::Parse { line: 1, detail: format!("missing column `{column}`") });
        }
    }
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for row in csv.deserialize::<Row>() {
        let row = row
            .map_err(|e| Error::Parse { line: e.position().map_or(0, |p| p.line() as usize), detail: e.to_string() })?;
        let line = records.len() + 2;
        let target = match row.target.as_str() {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::Validation(format!(
                    "line {line}: target `{other}` for image {} is not 0 or 1",
                    row.image
                )))
            }
        };
        if row.image.is_empty() || row.patient_id.is_empty() {
            return Err(Error::Parse { line, detail: "empty image or patient_id".into() });
        }
        if !seen.insert(row.image.clone()) {
            return Err(Error::Validation(format!("line {line}: duplicate image id {}", row.image)));
        }
        let file =
            if Path::new(&row.image).extension().is_some() { row.image.clone() } else { format!("{}.png", row.image) };
        records.push(Record { path: image_dir.join(file), image_id: row.image, patient_id: row.patient_id, target });
    }
    Ok(records)
}

/// Parses `csv_path` and checks that every image file exists.
pub fn load_manifest(csv_path: &Path, image_dir: &Path) -> Result<Vec<Record>> {
    let file = std::fs::File::open(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let records = parse_manifest(std::io::BufReader::new(file), image_dir)?;
    let missing: Vec<&str> = records.iter().filter(|r| !r.path.is_file()).map(|r| r.image_id.as_str()).collect();
    if !missing.is_empty() {
        let shown = missing.iter().take(10).copied().collect::<Vec<_>>().join(", ");
        return Err(Error::Validation(format!("{} image file(s) missing: {shown}", missing.len())));
    }
    Ok(records)
}
