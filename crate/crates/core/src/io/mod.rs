//! File formats: PACS binary arrays, calibration documents, dataset indices,
//! model checkpoints, reports and SVG charts.

mod array;
mod calibration;
mod checkpoint;
mod index;
mod plot;
mod report;

pub use array::{decode_array, encode_array, read_array, write_array, ArrayData, PacsArray, PACS_VERSION};
pub use calibration::{
    calibrate_session, read_calibration, read_session, write_calibration, BoardObservation, Calibration,
    CalibrationSession, SessionPair, CALIBRATION_SCHEMA,
};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use index::{DatasetIndex, IndexEntry, INDEX_SCHEMA};
pub use plot::{bar_chart_svg, line_chart_svg};
pub use report::{read_report, read_report_body, write_report, REPORT_HEADER_PREFIX};

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found} (expected {expected})")]
    BadVersion { found: u16, expected: u16 },
    #[error("unknown dtype code {0}")]
    BadDtype(u8),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("duplicate sample id {0}")]
    DuplicateId(usize),
    #[error("referenced file does not exist: {0}")]
    MissingFile(PathBuf),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error(transparent)]
    Net(#[from] crate::net::NetError),
    #[error(transparent)]
    Train(#[from] crate::train::TrainError),
}

impl From<serde_json::Error> for IoError {
    fn from(e: serde_json::Error) -> Self {
        IoError::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, IoError>;

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes through a sibling temporary file and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    drop(f);
    fs::rename(&tmp, path).map_err(io)
}

/// Resolves `rel` against the directory holding `anchor`.
pub(crate) fn resolve(anchor: &Path, rel: &Path) -> PathBuf {
    if rel.is_absolute() {
        return rel.to_path_buf();
    }
    match anchor.parent() {
        Some(dir) => dir.join(rel),
        None => rel.to_path_buf(),
    }
}
