//! JSON-lines manifests of cross-view pairs. Image paths are stored relative
//! to the manifest's directory.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metadata::RawMetadata;
use crate::models::CrossViewPair;
use crate::pixels::Image;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.jsonl", self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub ground_path: String,
    pub satellite_path: String,
    pub lat: f64,
    pub lon: f64,
    pub month: u32,
    pub species_id: u32,
}

impl ManifestRow {
    pub fn meta(&self) -> Result<RawMetadata> {
        RawMetadata::new(self.lat, self.lon, self.month)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub split: Split,
    /// Directory that relative image paths resolve against.
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for r in &self.rows {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::util::write_atomic(path, &self.to_jsonl()?)
    }

    /// Parses without touching the filesystem beyond `path` itself.
    pub fn parse(text: &str, split: Split, root: PathBuf, path: &Path) -> Result<Self> {
        let mut rows = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: ManifestRow = serde_json::from_str(line)
                .map_err(|e| Error::Format { path: path.into(), reason: format!("line {}: {e}", i + 1) })?;
            if !seen.insert(row.id.clone()) {
                return Err(Error::Format { path: path.into(), reason: format!("duplicate id `{}`", row.id) });
            }
            rows.push(row);
        }
        Ok(Self { split, root, rows })
    }

    /// Loads and checks that every referenced image exists.
    pub fn load(path: &Path, split: Split) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(e).context(format!("reading {}", path.display())))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self::parse(&text, split, root, path)?;
        for r in &m.rows {
            for rel in [&r.ground_path, &r.satellite_path] {
                if !m.resolve(rel).is_file() {
                    return Err(Error::Format { path: path.into(), reason: format!("row `{}` references missing file {rel}", r.id) });
                }
            }
        }
        Ok(m)
    }

    pub fn num_species(&self) -> usize {
        self.rows.iter().map(|r| r.species_id as usize + 1).max().unwrap_or(0)
    }

    /// Decodes every pair, resampling to the given square sizes.
    pub fn load_pairs<F: Scalar>(&self, ground_size: usize, satellite_size: usize) -> Result<Vec<CrossViewPair<F>>> {
        self.rows
            .iter()
            .map(|r| {
                Ok(CrossViewPair {
                    ground: Image::load(&self.resolve(&r.ground_path))?.resize(ground_size, ground_size),
                    satellite: Image::load(&self.resolve(&r.satellite_path))?.resize(satellite_size, satellite_size),
                    meta: Some(r.meta()?),
                    species: Some(r.species_id as usize),
                })
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.context(format!("loading {} split", self.split.name())))
    }
}

/// `train.jsonl` + `test.jsonl` in one directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Manifest,
    pub test: Manifest,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            train: Manifest::load(&dir.join(Split::Train.file_name()), Split::Train)?,
            test: Manifest::load(&dir.join(Split::Test.file_name()), Split::Test)?,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.train.save(&dir.join(Split::Train.file_name()))?;
        self.test.save(&dir.join(Split::Test.file_name()))
    }

    pub fn num_species(&self) -> usize {
        self.train.num_species().max(self.test.num_species())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_row() -> impl Strategy<Value = ManifestRow> {
        ("[a-z0-9]{1,8}", -89.0f64..89.0, -180.0f64..180.0, 1u32..=12, 0u32..50).prop_map(|(id, lat, lon, month, s)| ManifestRow {
            ground_path: format!("ground/{id}.png"),
            satellite_path: format!("satellite/{id}.png"),
            id,
            lat,
            lon,
            month,
            species_id: s,
        })
    }

    proptest! {
        #[test]
        fn jsonl_round_trip(rows in proptest::collection::vec(arb_row(), 0..20)) {
            let mut seen = HashSet::new();
            let rows: Vec<_> = rows.into_iter().filter(|r| seen.insert(r.id.clone())).collect();
            let m = Manifest { split: Split::Test, root: PathBuf::from("r"), rows };
            let text = String::from_utf8(m.to_jsonl().unwrap()).unwrap();
            let back = Manifest::parse(&text, Split::Test, PathBuf::from("r"), Path::new("x")).unwrap();
            prop_assert_eq!(back, m);
        }
    }

    #[test]
    fn duplicate_ids_and_missing_files_rejected() {
        let line = r#"{"id":"a","ground_path":"g.png","satellite_path":"s.png","lat":1.0,"lon":2.0,"month":3,"species_id":0}"#;
        let twice = format!("{line}\n{line}\n");
        assert!(Manifest::parse(&twice, Split::Train, PathBuf::new(), Path::new("m")).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train.jsonl");
        std::fs::write(&p, format!("{line}\n")).unwrap();
        assert!(matches!(Manifest::load(&p, Split::Train), Err(Error::Format { .. })));
    }
}
