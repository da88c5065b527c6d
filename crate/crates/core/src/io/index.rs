use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_array, read_bytes, read_calibration, resolve, write_array, write_atomic, ArrayData, IoError, PacsArray, Result};
use crate::csi::CsiTensor;
use crate::train::{Clip, Dataset, RawClip, SampleMeta};

pub const INDEX_SCHEMA: u32 = 1;

/// One clip: labels plus the files holding its data. Paths are relative to
/// the index file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    #[serde(flatten)]
    pub meta: SampleMeta,
    pub frames: usize,
    /// One complex `[antennas, subcarriers, samples]` array per receiver.
    pub csi: Vec<PathBuf>,
    /// `[frames, J, 3]` f64 (mm).
    pub poses: PathBuf,
    pub calibration: PathBuf,
    /// `[N_r, frames, S, S]` f32 feature maps, once preprocessed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub schema_version: u32,
    pub sample_rate_hz: f64,
    pub subcarrier_freqs_hz: Vec<f64>,
    /// Side of the cached feature maps, once preprocessed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map_size: Option<usize>,
    /// Sorted by id.
    pub entries: Vec<IndexEntry>,
    /// Directory the entry paths are relative to.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetIndex {
    pub fn new(sample_rate_hz: f64, subcarrier_freqs_hz: Vec<f64>, root: &Path) -> Self {
        Self {
            schema_version: INDEX_SCHEMA,
            sample_rate_hz,
            subcarrier_freqs_hz,
            map_size: None,
            entries: Vec::new(),
            root: root.to_path_buf(),
        }
    }

    /// Parses and canonicalises an index; does not touch the referenced files.
    pub fn from_json(text: &str, root: &Path) -> Result<Self> {
        let mut idx: DatasetIndex = serde_json::from_str(text)?;
        if idx.schema_version != INDEX_SCHEMA {
            return Err(IoError::Parse(format!(
                "unsupported schema_version {} (expected {INDEX_SCHEMA})",
                idx.schema_version
            )));
        }
        idx.root = root.to_path_buf();
        idx.canonicalize()?;
        Ok(idx)
    }

    /// Sorts entries by id and checks id uniqueness.
    pub fn canonicalize(&mut self) -> Result<()> {
        self.entries.sort_by_key(|e| e.meta.id);
        for w in self.entries.windows(2) {
            if w[0].meta.id == w[1].meta.id {
                return Err(IoError::DuplicateId(w[0].meta.id));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("index serialises");
        s.push('\n');
        s
    }

    pub fn path(&self, rel: &Path) -> PathBuf {
        resolve(&self.root.join("index.json"), rel)
    }

    /// Calibration files used by each layout id (one per recording session).
    pub fn calibrations(&self) -> BTreeMap<usize, BTreeSet<PathBuf>> {
        let mut out: BTreeMap<usize, BTreeSet<PathBuf>> = BTreeMap::new();
        for e in &self.entries {
            out.entry(e.meta.layout).or_default().insert(e.calibration.clone());
        }
        out
    }

    pub fn metas(&self) -> Vec<SampleMeta> {
        self.entries.iter().map(|e| e.meta.clone()).collect()
    }

    /// Every referenced file must exist.
    pub fn check_files(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            let files = e.csi.iter().chain([&e.poses, &e.calibration]).chain(e.features.as_ref());
            for f in files {
                let p = self.path(f);
                if seen.insert(p.clone()) && !p.is_file() {
                    return Err(IoError::MissingFile(p));
                }
            }
        }
        Ok(())
    }

    /// Loads, canonicalises and checks that every referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_bytes(path)?;
        let text = std::str::from_utf8(&bytes).map_err(|e| IoError::Parse(format!("{}: {e}", path.display())))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let idx = Self::from_json(text, &root)?;
        idx.check_files()?;
        Ok(idx)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }

    fn entry(&self, id: usize) -> Result<&IndexEntry> {
        self.entries
            .binary_search_by_key(&id, |e| e.meta.id)
            .map(|i| &self.entries[i])
            .map_err(|_| IoError::Parse(format!("no entry with id {id}")))
    }

    pub fn read_raw_clip(&self, id: usize) -> Result<RawClip> {
        let e = self.entry(id)?;
        let layout = read_calibration(&self.path(&e.calibration))?.layout;
        if layout.n_receivers() != e.csi.len() {
            return Err(IoError::Parse(format!(
                "clip {id}: {} CSI files for {} receivers",
                e.csi.len(),
                layout.n_receivers()
            )));
        }
        let csi = e
            .csi
            .iter()
            .map(|f| {
                let data = read_array(&self.path(f))?.into_c64_3()?;
                CsiTensor::new(data, self.sample_rate_hz, self.subcarrier_freqs_hz.clone())
                    .map_err(|err| IoError::Train(err.into()))
            })
            .collect::<Result<Vec<_>>>()?;
        let poses = read_array(&self.path(&e.poses))?;
        if poses.dims.len() != 3 || poses.dims[0] != e.frames || poses.dims[2] != 3 {
            return Err(IoError::Parse(format!("clip {id}: pose array has dims {:?}", poses.dims)));
        }
        Ok(RawClip {
            meta: e.meta.clone(),
            layout,
            frames: e.frames,
            csi,
            poses: poses.into_f64()?,
        })
    }

    /// Featurised clip from the cached maps.
    pub fn read_clip(&self, id: usize) -> Result<Clip> {
        let e = self.entry(id)?;
        let (Some(size), Some(features)) = (self.map_size, &e.features) else {
            return Err(IoError::Parse(format!("clip {id} has not been preprocessed")));
        };
        let layout = read_calibration(&self.path(&e.calibration))?.layout;
        let maps = read_array(&self.path(features))?.into_f32()?;
        let poses = read_array(&self.path(&e.poses))?.into_f64()?;
        Ok(Clip::new(e.meta.clone(), layout, e.frames, size, maps, poses)?)
    }

    pub fn read_dataset(&self) -> Result<Dataset> {
        let size = self
            .map_size
            .ok_or_else(|| IoError::Parse("index has no feature cache; run preprocess first".into()))?;
        let clips = self.entries.iter().map(|e| self.read_clip(e.meta.id)).collect::<Result<Vec<_>>>()?;
        Ok(Dataset::new(clips, size)?)
    }

    /// Writes a clip's CSI and poses under `clips/` and appends its entry.
    pub fn add_raw_clip(&mut self, raw: &RawClip, calibration: &Path) -> Result<()> {
        let id = raw.meta.id;
        let mut csi = Vec::with_capacity(raw.csi.len());
        for (rx, t) in raw.csi.iter().enumerate() {
            let rel = PathBuf::from(format!("clips/{id:05}_rx{rx}.pacs"));
            let d = t.data();
            let (a, m, n) = d.dim();
            let arr = PacsArray::new(vec![a, m, n], ArrayData::C64(d.iter().copied().collect()))?;
            write_array(&self.path(&rel), &arr)?;
            csi.push(rel);
        }
        let poses = PathBuf::from(format!("clips/{id:05}_pose.pacs"));
        let joints = raw.poses.len() / (3 * raw.frames.max(1));
        let arr = PacsArray::new(vec![raw.frames, joints, 3], ArrayData::F64(raw.poses.clone()))?;
        write_array(&self.path(&poses), &arr)?;
        self.entries.push(IndexEntry {
            meta: raw.meta.clone(),
            frames: raw.frames,
            csi,
            poses,
            calibration: calibration.to_path_buf(),
            features: None,
        });
        Ok(())
    }

    /// Writes the feature maps of `clip` under `features/` and links them.
    pub fn set_features(&mut self, clip: &Clip, map_size: usize) -> Result<()> {
        if self.map_size.is_some_and(|s| s != map_size) {
            return Err(IoError::Parse(format!(
                "feature cache already uses {}-pixel maps",
                self.map_size.unwrap()
            )));
        }
        let rel = PathBuf::from(format!("features/{:05}.pacs", clip.meta.id));
        let dims = vec![clip.layout.n_receivers(), clip.frames, map_size, map_size];
        write_array(&self.path(&rel), &PacsArray::new(dims, ArrayData::F32(clip.maps.clone()))?)?;
        let id = clip.meta.id;
        let pos = self
            .entries
            .binary_search_by_key(&id, |e| e.meta.id)
            .map_err(|_| IoError::Parse(format!("no entry with id {id}")))?;
        self.entries[pos].features = Some(rel);
        self.map_size = Some(map_size);
        Ok(())
    }
}
