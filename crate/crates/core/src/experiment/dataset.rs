//! Dataset directories: NIfTI volume/mask pairs listed in `manifest.csv`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::evaluation::GroundTruthLesion;
use crate::morphology::{centroid, connected_components};
use crate::record::{Domain, SampleRecord};
use crate::volume::{load_mask, load_volume, save_mask, save_volume};
use crate::Scalar;

use super::ExperimentError;

pub const MANIFEST: &str = "manifest.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Real,
    Synthetic,
}

/// One manifest row. Paths are relative to the dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub domain: Domain,
    pub origin: Origin,
    pub volume: String,
    pub mask: String,
    pub sx: f64,
    pub sy: f64,
    pub sz: f64,
}

impl ManifestEntry {
    pub fn spacing(&self) -> [f64; 3] {
        [self.sx, self.sy, self.sz]
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self, ExperimentError> {
        let path = root.join(MANIFEST);
        let file = fs::File::open(&path).map_err(|e| ExperimentError::io(&path, e))?;
        let entries: Vec<ManifestEntry> = csv::Reader::from_reader(file).deserialize().collect::<csv::Result<_>>()?;
        Ok(Self { root: root.to_owned(), entries })
    }

    /// Writes every record as `subjects/<id>.nii.gz` plus `subjects/<id>_mask.nii.gz`.
    pub fn write<T: Scalar>(root: &Path, records: &[(SampleRecord<T>, Origin)]) -> Result<Self, ExperimentError> {
        let dir = root.join("subjects");
        fs::create_dir_all(&dir).map_err(|e| ExperimentError::io(&dir, e))?;
        let mut entries = Vec::with_capacity(records.len());
        for (r, origin) in records {
            let volume = format!("subjects/{}.nii.gz", r.subject_id);
            let mask = format!("subjects/{}_mask.nii.gz", r.subject_id);
            save_volume(&r.volume, root.join(&volume))?;
            save_mask(&r.mask, r.volume.spacing(), root.join(&mask))?;
            let [sx, sy, sz] = r.volume.spacing();
            entries.push(ManifestEntry {
                subject_id: r.subject_id.clone(),
                domain: r.domain,
                origin: *origin,
                volume,
                mask,
                sx,
                sy,
                sz,
            });
        }
        let path = root.join(MANIFEST);
        let file = fs::File::create(&path).map_err(|e| ExperimentError::io(&path, e))?;
        let mut wr = csv::Writer::from_writer(file);
        for e in &entries {
            wr.serialize(e)?;
        }
        wr.flush().map_err(|e| ExperimentError::io(&path, e))?;
        Ok(Self { root: root.to_owned(), entries })
    }

    pub fn load<T: Scalar>(&self, e: &ManifestEntry) -> Result<SampleRecord<T>, ExperimentError> {
        let volume = load_volume(self.root.join(&e.volume))?;
        let mask = load_mask(self.root.join(&e.mask))?;
        mask.check_pairs_with(&volume)?;
        Ok(SampleRecord { volume, mask, domain: e.domain, subject_id: e.subject_id.clone() })
    }

    pub fn select(&self, domain: Domain, origin: Origin) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.domain == domain && e.origin == origin).collect()
    }

    pub fn spacing_of(&self, subject_id: &str) -> Option<[f64; 3]> {
        self.entries.iter().find(|e| e.subject_id == subject_id).map(ManifestEntry::spacing)
    }
}

/// One lesion per connected mask component, at its voxel centroid.
pub fn lesions_from_mask<T>(r: &SampleRecord<T>) -> Vec<GroundTruthLesion> {
    connected_components(&r.mask)
        .into_iter()
        .map(|c| {
            let mut g = GroundTruthLesion::new(&r.subject_id, centroid(&c));
            g.voxels = Some(c);
            g
        })
        .collect()
}

/// Splits real pathological subjects (sorted by id) into training and test sets.
/// The test set holds `round(n * test_fraction)` subjects, at least one when
/// `test_fraction > 0` and at most `n - 1`.
pub fn split_train_test<'a>(entries: &[&'a ManifestEntry], test_fraction: f64) -> (Vec<&'a ManifestEntry>, Vec<&'a ManifestEntry>) {
    let mut sorted = entries.to_vec();
    sorted.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
    let n = sorted.len();
    let mut n_test = (n as f64 * test_fraction).round() as usize;
    if test_fraction > 0.0 && n >= 2 {
        n_test = n_test.clamp(1, n - 1);
    }
    let test = sorted.split_off(n - n_test.min(n));
    (sorted, test)
}
