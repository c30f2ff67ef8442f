use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::ImageTriple;
use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// One manifest line. Paths are relative to the dataset directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub sketch_path: String,
    pub color_path: String,
    pub mask_path: String,
}

/// Writes every triple as three 8-bit PNGs plus a manifest ordered by id.
pub fn write_dataset(dir: &Path, triples: &[ImageTriple]) -> Result<Vec<ManifestRecord>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut sorted: Vec<&ImageTriple> = triples.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut records = Vec::with_capacity(sorted.len());
    let mut out = String::new();
    for t in sorted {
        let rec = ManifestRecord {
            id: t.id.clone(),
            sketch_path: format!("{}_sketch.png", t.id),
            color_path: format!("{}_color.png", t.id),
            mask_path: format!("{}_mask.png", t.id),
        };
        t.sketch.save_png(&dir.join(&rec.sketch_path))?;
        t.color.save_png(&dir.join(&rec.color_path))?;
        t.mask.save_png(&dir.join(&rec.mask_path))?;
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
        records.push(rec);
    }
    let path = dir.join(MANIFEST_FILE);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(&path, e))?;
    Ok(records)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRecord>> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

pub fn load_dataset(dir: &Path) -> Result<Vec<ImageTriple>> {
    read_manifest(dir)?
        .into_iter()
        .map(|r| {
            Ok(ImageTriple {
                sketch: ImageTensor::load_png(&dir.join(&r.sketch_path), 1)?,
                color: ImageTensor::load_png(&dir.join(&r.color_path), 3)?,
                mask: ImageTensor::load_png(&dir.join(&r.mask_path), 1)?,
                id: r.id,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_synthetic_triple, SceneSpec};

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let triples: Vec<_> = (0..2)
            .map(|i| gen_synthetic_triple(&SceneSpec::random(i, 16), format!("{i:06}")).unwrap())
            .collect();
        let recs = write_dataset(dir.path(), &triples).unwrap();
        assert_eq!(recs.len(), 2);
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back[1].id, "000001");
        assert_eq!(back[0].mask, triples[0].mask);
    }
}
