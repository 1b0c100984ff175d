//! Dataset manifests: the JSON index binding sample ids to tensor files.
//!
//! Validation is all-or-nothing: a manifest either loads with every record
//! checked against its tensor headers, or nothing is returned.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::tensorfile;
use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    /// T x D_I class-token track.
    pub frames: String,
    /// L_q x D_I question word embeddings.
    pub question: String,
    /// D_I event-description embedding.
    pub description: String,
    /// C x D_I answer-candidate embeddings.
    pub candidates: String,
    /// Correct candidate, 0-based in [0, C).
    pub answer: usize,
    /// Optional planted keyframe timestamps, 1-based ascending (synthetic
    /// data normally ships these in a sidecar instead).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<Vec<usize>>,
    /// Cached pseudo-labels w, 1-based ascending.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pseudo_labels: Option<Vec<usize>>,
    /// Content hash of the description embedding the cache was computed
    /// from; a mismatch invalidates `pseudo_labels`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub description_hash: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub t: usize,
    pub l_q: usize,
    pub d_i: usize,
    pub c: usize,
    pub samples: Vec<SampleRecord>,
}

/// A validated manifest plus the directory its relative paths resolve from.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples.is_empty()
    }

    pub fn path_of(&self, relative: &str) -> PathBuf {
        self.root.join(relative)
    }

    pub fn load_frames(&self, record: &SampleRecord) -> Result<Tensor> {
        tensorfile::read_tensor(&self.path_of(&record.frames))
    }

    pub fn load_question(&self, record: &SampleRecord) -> Result<Tensor> {
        tensorfile::read_tensor(&self.path_of(&record.question))
    }

    pub fn load_description(&self, record: &SampleRecord) -> Result<Tensor> {
        tensorfile::read_tensor(&self.path_of(&record.description))
    }

    pub fn load_candidates(&self, record: &SampleRecord) -> Result<Tensor> {
        tensorfile::read_tensor(&self.path_of(&record.candidates))
    }
}

/// FNV-1a over a byte stream; cheap, stable, and good enough to detect a
/// swapped description embedding.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

pub fn description_hash(dataset_root: &Path, record: &SampleRecord) -> Result<String> {
    let bytes = fs::read(dataset_root.join(&record.description))?;
    Ok(content_hash(&bytes))
}

fn check_timestamps(what: &str, id: &str, ts: &[usize], t: usize) -> Result<()> {
    let mut prev = 0usize;
    for &w in ts {
        if w < 1 || w > t {
            return Err(Error::Manifest(format!(
                "sample {id}: {what} timestamp {w} outside [1, {t}]"
            )));
        }
        if w <= prev {
            return Err(Error::Manifest(format!(
                "sample {id}: {what} timestamps must be ascending and distinct"
            )));
        }
        prev = w;
    }
    Ok(())
}

fn check_extents(
    id: &str,
    field: &str,
    path: &Path,
    expected: &[usize],
) -> Result<()> {
    let (extents, _) = tensorfile::read_header(path).map_err(|e| match e {
        Error::NotFound(m) => Error::NotFound(format!("sample {id}, field {field}: {m}")),
        other => Error::Manifest(format!("sample {id}, field {field}: {other}")),
    })?;
    if extents != expected {
        return Err(Error::Manifest(format!(
            "sample {id}, field {field}: extents {extents:?} disagree with manifest's {expected:?}"
        )));
    }
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(format!("manifest {}", path.display()))
        } else {
            Error::Io(e)
        }
    })?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));

    let mut seen = BTreeSet::new();
    for record in &manifest.samples {
        if !seen.insert(record.id.clone()) {
            return Err(Error::Manifest(format!("duplicate sample id {}", record.id)));
        }
        check_extents(
            &record.id,
            "frames",
            &root.join(&record.frames),
            &[manifest.t, manifest.d_i],
        )?;
        check_extents(
            &record.id,
            "question",
            &root.join(&record.question),
            &[manifest.l_q, manifest.d_i],
        )?;
        check_extents(
            &record.id,
            "description",
            &root.join(&record.description),
            &[manifest.d_i],
        )?;
        check_extents(
            &record.id,
            "candidates",
            &root.join(&record.candidates),
            &[manifest.c, manifest.d_i],
        )?;
        if record.answer >= manifest.c {
            return Err(Error::Manifest(format!(
                "sample {}: answer index {} outside [0, {})",
                record.id, record.answer, manifest.c
            )));
        }
        if let Some(gt) = &record.ground_truth {
            check_timestamps("ground-truth", &record.id, gt, manifest.t)?;
        }
        if let Some(w) = &record.pseudo_labels {
            check_timestamps("pseudo-label", &record.id, w, manifest.t)?;
        }
    }
    Ok(Dataset { root, manifest })
}

pub fn save_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Precision;

    fn write_sample(dir: &Path, id: &str, t: usize, l_q: usize, d_i: usize, c: usize) -> SampleRecord {
        let frames = format!("{id}.frames.gcgt");
        let question = format!("{id}.question.gcgt");
        let description = format!("{id}.description.gcgt");
        let candidates = format!("{id}.candidates.gcgt");
        let mk = |extents: Vec<usize>| {
            let n: usize = extents.iter().product();
            Tensor::new(extents, vec![0.5; n], Precision::P32).unwrap()
        };
        tensorfile::write_tensor(&mk(vec![t, d_i]), &dir.join(&frames)).unwrap();
        tensorfile::write_tensor(&mk(vec![l_q, d_i]), &dir.join(&question)).unwrap();
        tensorfile::write_tensor(&mk(vec![d_i]), &dir.join(&description)).unwrap();
        tensorfile::write_tensor(&mk(vec![c, d_i]), &dir.join(&candidates)).unwrap();
        SampleRecord {
            id: id.to_string(),
            frames,
            question,
            description,
            candidates,
            answer: 0,
            ground_truth: None,
            pseudo_labels: None,
            description_hash: None,
        }
    }

    #[test]
    fn empty_sample_array_loads() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = Manifest {
            t: 32,
            l_q: 8,
            d_i: 32,
            c: 5,
            samples: vec![],
        };
        let path = dir.path().join("manifest.json");
        save_manifest(&manifest, &path).unwrap();
        let ds = load_manifest(&path).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn valid_record_loads() {
        let dir = tempfile::tempdir().unwrap();
        let rec = write_sample(dir.path(), "s0", 32, 8, 32, 5);
        let manifest = Manifest {
            t: 32,
            l_q: 8,
            d_i: 32,
            c: 5,
            samples: vec![rec],
        };
        let path = dir.path().join("manifest.json");
        save_manifest(&manifest, &path).unwrap();
        let ds = load_manifest(&path).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(
            ds.load_frames(&ds.manifest.samples[0]).unwrap().extents(),
            &[32, 32]
        );
    }

    #[test]
    fn extent_mismatch_names_sample_and_field() {
        let dir = tempfile::tempdir().unwrap();
        // File declares T=16 under a T=32 manifest.
        let rec = write_sample(dir.path(), "bad", 16, 8, 32, 5);
        let manifest = Manifest {
            t: 32,
            l_q: 8,
            d_i: 32,
            c: 5,
            samples: vec![rec],
        };
        let path = dir.path().join("manifest.json");
        save_manifest(&manifest, &path).unwrap();
        match load_manifest(&path) {
            Err(Error::Manifest(msg)) => {
                assert!(msg.contains("bad") && msg.contains("frames"), "{msg}");
            }
            other => panic!("expected manifest error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_id_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let rec = write_sample(dir.path(), "dup", 8, 4, 8, 3);
        let manifest = Manifest {
            t: 8,
            l_q: 4,
            d_i: 8,
            c: 3,
            samples: vec![rec.clone(), rec],
        };
        let path = dir.path().join("manifest.json");
        save_manifest(&manifest, &path).unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::Manifest(_))));
    }

    #[test]
    fn missing_manifest_is_not_found() {
        assert!(matches!(
            load_manifest(Path::new("/nonexistent/manifest.json")),
            Err(Error::NotFound(_))
        ));
    }

    #[test]
    fn bad_pseudo_labels_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = write_sample(dir.path(), "s0", 8, 4, 8, 3);
        rec.pseudo_labels = Some(vec![2, 2]);
        let manifest = Manifest {
            t: 8,
            l_q: 4,
            d_i: 8,
            c: 3,
            samples: vec![rec],
        };
        let path = dir.path().join("manifest.json");
        save_manifest(&manifest, &path).unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::Manifest(_))));
    }
}
