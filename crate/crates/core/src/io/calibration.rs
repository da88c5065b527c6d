use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{Matrix4, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::{read_bytes, write_atomic, IoError, Result};
use crate::geometry::{
    chain_unify, solve_pnp, unify_layout, BoardPair, DeviceLayout, Distortion, DistanceMeasurement, Intrinsics,
    RigidTransform, UnifyOptions,
};

pub const CALIBRATION_SCHEMA: u32 = 1;

/// Unified device coordinates of one layout plus the transforms that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub layout: DeviceLayout,
    pub transforms: BTreeMap<String, RigidTransform>,
}

impl Calibration {
    pub fn from_layout(layout: DeviceLayout) -> Self {
        Self {
            layout,
            transforms: BTreeMap::new(),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CalibrationDoc {
    schema_version: u32,
    tx: [f64; 3],
    rxs: Vec<[f64; 3]>,
    #[serde(default)]
    transforms: BTreeMap<String, [[f64; 4]; 4]>,
}

fn check_schema(found: u32) -> Result<()> {
    if found == CALIBRATION_SCHEMA {
        Ok(())
    } else {
        Err(IoError::Parse(format!(
            "unsupported schema_version {found} (expected {CALIBRATION_SCHEMA})"
        )))
    }
}

fn v3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

fn rows(t: &RigidTransform) -> [[f64; 4]; 4] {
    let m = t.to_homogeneous();
    std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]))
}

impl Calibration {
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: CalibrationDoc = serde_json::from_str(text)?;
        check_schema(doc.schema_version)?;
        let layout = DeviceLayout::new(v3(doc.tx), doc.rxs.into_iter().map(v3).collect())?;
        let transforms = doc
            .transforms
            .into_iter()
            .map(|(name, r)| {
                let m = Matrix4::from_fn(|i, j| r[i][j]);
                Ok((name, RigidTransform::from_homogeneous(&m)?))
            })
            .collect::<Result<_>>()?;
        Ok(Self { layout, transforms })
    }

    /// Canonical text: keys sorted, shortest round-trip float formatting.
    pub fn to_json(&self) -> String {
        let v = |p: &Vector3<f64>| [p.x, p.y, p.z];
        let doc = CalibrationDoc {
            schema_version: CALIBRATION_SCHEMA,
            tx: v(&self.layout.tx),
            rxs: self.layout.rxs.iter().map(v).collect(),
            transforms: self.transforms.iter().map(|(k, t)| (k.clone(), rows(t))).collect(),
        };
        let mut s = serde_json::to_string_pretty(&doc).expect("calibration serialises");
        s.push('\n');
        s
    }
}

pub fn read_calibration(path: &Path) -> Result<Calibration> {
    let bytes = read_bytes(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| IoError::Parse(format!("{}: {e}", path.display())))?;
    Calibration::from_json(text)
}

pub fn write_calibration(path: &Path, c: &Calibration) -> Result<()> {
    write_atomic(path, c.to_json().as_bytes())
}

/// Board corners in board coordinates (m) with their detected pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoardObservation {
    pub points: Vec<[f64; 3]>,
    pub pixels: Vec<[f64; 2]>,
}

impl BoardObservation {
    fn correspondences(&self) -> Result<Vec<(Vector3<f64>, Vector2<f64>)>> {
        if self.points.len() != self.pixels.len() {
            return Err(IoError::Parse(format!(
                "{} board points but {} pixels",
                self.points.len(),
                self.pixels.len()
            )));
        }
        Ok(self
            .points
            .iter()
            .zip(&self.pixels)
            .map(|(p, q)| (v3(*p), Vector2::new(q[0], q[1])))
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum Distance {
    Direct { meters: f64 },
    Grid { squares: f64, square_size: f64 },
    Pixel { pixels: f64, meters_per_pixel: f64 },
}

impl From<Distance> for DistanceMeasurement {
    fn from(d: Distance) -> Self {
        match d {
            Distance::Direct { meters } => DistanceMeasurement::Direct { meters },
            Distance::Grid { squares, square_size } => DistanceMeasurement::Grid { squares, square_size },
            Distance::Pixel {
                pixels,
                meters_per_pixel,
            } => DistanceMeasurement::Pixel {
                pixels,
                meters_per_pixel,
            },
        }
    }
}

impl From<DistanceMeasurement> for Distance {
    fn from(d: DistanceMeasurement) -> Self {
        match d {
            DistanceMeasurement::Direct { meters } => Distance::Direct { meters },
            DistanceMeasurement::Grid { squares, square_size } => Distance::Grid { squares, square_size },
            DistanceMeasurement::Pixel {
                pixels,
                meters_per_pixel,
            } => Distance::Pixel {
                pixels,
                meters_per_pixel,
            },
        }
    }
}

/// One TX–RX pair: the world board and the auxiliary board as seen by one
/// camera, plus the measured TX–RX distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionPair {
    pub world_board: BoardObservation,
    pub aux_board: BoardObservation,
    #[serde(with = "distance_serde")]
    pub distance: DistanceMeasurement,
}

mod distance_serde {
    use super::{Distance, DistanceMeasurement};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(d: &DistanceMeasurement, s: S) -> Result<S::Ok, S::Error> {
        Distance::from(*d).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DistanceMeasurement, D::Error> {
        Distance::deserialize(d).map(Into::into)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct IntrinsicsDoc {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    #[serde(default)]
    skew: f64,
    /// (k1, k2, p1, p2).
    #[serde(default)]
    distortion: [f64; 4],
}

/// Raw inputs of a calibration run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSession {
    pub schema_version: u32,
    #[serde(with = "intrinsics_serde")]
    pub intrinsics: Intrinsics,
    pub pairs: Vec<SessionPair>,
    #[serde(default = "default_merge")]
    pub merge_tolerance: f64,
    #[serde(default = "default_threshold")]
    pub inconsistency_threshold: f64,
}

fn default_merge() -> f64 {
    UnifyOptions::default().merge_tolerance
}

fn default_threshold() -> f64 {
    UnifyOptions::default().inconsistency_threshold
}

mod intrinsics_serde {
    use super::{Distortion, Intrinsics, IntrinsicsDoc};
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(k: &Intrinsics, s: S) -> Result<S::Ok, S::Error> {
        let d = k.distortion;
        IntrinsicsDoc {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            skew: k.skew,
            distortion: [d.k1, d.k2, d.p1, d.p2],
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Intrinsics, D::Error> {
        let doc = IntrinsicsDoc::deserialize(d)?;
        let [k1, k2, p1, p2] = doc.distortion;
        Ok(Intrinsics::new(doc.fx, doc.fy, doc.cx, doc.cy)
            .map_err(D::Error::custom)?
            .with_skew(doc.skew)
            .with_distortion(Distortion { k1, k2, p1, p2 }))
    }
}

pub fn read_session(path: &Path) -> Result<CalibrationSession> {
    let session: CalibrationSession = serde_json::from_slice(&read_bytes(path)?)?;
    check_schema(session.schema_version)?;
    Ok(session)
}

/// Solves both board poses of every pair and unifies the layout. The
/// auxiliary-to-world transform of pair `i` is kept as `pair{i}.b1_to_b`.
pub fn calibrate_session(session: &CalibrationSession) -> Result<Calibration> {
    let mut pairs = Vec::with_capacity(session.pairs.len());
    let mut transforms = BTreeMap::new();
    for (i, p) in session.pairs.iter().enumerate() {
        let b = solve_pnp(&p.world_board.correspondences()?, &session.intrinsics)?.transform;
        let b1 = solve_pnp(&p.aux_board.correspondences()?, &session.intrinsics)?.transform;
        transforms.insert(format!("pair{i}.b1_to_b"), chain_unify(&b, &b1));
        pairs.push(BoardPair {
            t_c_to_b: b,
            t_c_to_b1: b1,
            distance: p.distance,
        });
    }
    let opts = UnifyOptions {
        merge_tolerance: session.merge_tolerance,
        inconsistency_threshold: session.inconsistency_threshold,
    };
    Ok(Calibration {
        layout: unify_layout(&pairs, &opts)?,
        transforms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::GeometryError;

    fn sample() -> Calibration {
        let layout = DeviceLayout::new(
            Vector3::new(0.1, -0.2, 1.0),
            vec![Vector3::new(3.0, 0.0, 1.0), Vector3::new(0.3, 2.9, 0.9)],
        )
        .unwrap();
        let mut c = Calibration::from_layout(layout);
        c.transforms.insert(
            "pair0.b1_to_b".into(),
            RigidTransform::from_axis_angle(&Vector3::new(0.3, -1.0, 0.2), 0.7, Vector3::new(1.0 / 3.0, 2.0, -0.5)),
        );
        c.transforms.insert("a".into(), RigidTransform::identity());
        c
    }

    #[test]
    fn identity_transform_reads_back() {
        let text = r#"{"schema_version": 1, "tx": [0, 0, 1], "rxs": [[1, 0, 1]],
            "transforms": {"id": [[1,0,0,0],[0,1,0,0],[0,0,1,0],[0,0,0,1]]}}"#;
        let c = Calibration::from_json(text).unwrap();
        assert_eq!(c.transforms["id"], RigidTransform::identity());
    }

    #[test]
    fn round_trip_is_exact_and_canonical() {
        let c = sample();
        let back = Calibration::from_json(&c.to_json()).unwrap();
        assert_eq!(back.layout.tx, c.layout.tx);
        assert_eq!(back.layout.rxs, c.layout.rxs);
        for (k, t) in &c.transforms {
            assert!(back.transforms[k].max_abs_diff(t) <= 1e-12);
        }
        assert_eq!(back.to_json(), c.to_json());
    }

    #[test]
    fn canonical_form_of_a_hand_written_file() {
        let messy = r#"{ "transforms": {"z": [[1,0,0,0.5],[0,1,0,0],[0,0,1,0],[0,0,0,1]],
            "b": [[1,0,0,0],[0,1,0,0],[0,0,1,0],[0,0,0,1]]},
            "rxs": [[2.50, 0, 1]], "tx": [0, 0, 1.0], "schema_version": 1 }"#;
        let canon = Calibration::from_json(messy).unwrap().to_json();
        assert_eq!(Calibration::from_json(&canon).unwrap().to_json(), canon);
        assert!(canon.find("\"b\"").unwrap() < canon.find("\"z\"").unwrap());
        assert!(canon.contains("2.5"));
    }

    #[test]
    fn rejects_bad_documents() {
        let coincident = r#"{"schema_version": 1, "tx": [1, 0, 1], "rxs": [[1, 0, 1]]}"#;
        assert!(matches!(Calibration::from_json(coincident), Err(IoError::Geometry(_))));
        let scaled = r#"{"schema_version": 1, "tx": [0, 0, 1], "rxs": [[1, 0, 1]],
            "transforms": {"s": [[2,0,0,0],[0,1,0,0],[0,0,1,0],[0,0,0,1]]}}"#;
        assert!(matches!(
            Calibration::from_json(scaled),
            Err(IoError::Geometry(GeometryError::NonRotation { .. }))
        ));
        let version = r#"{"schema_version": 2, "tx": [0, 0, 1], "rxs": [[1, 0, 1]]}"#;
        assert!(matches!(Calibration::from_json(version), Err(IoError::Parse(_))));
        assert!(matches!(Calibration::from_json("{"), Err(IoError::Parse(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cal.json");
        write_calibration(&path, &sample()).unwrap();
        assert_eq!(read_calibration(&path).unwrap().to_json(), sample().to_json());
    }

    #[test]
    fn session_distance_kinds_parse() {
        let text = r#"{"schema_version": 1, "intrinsics": {"fx": 800, "fy": 800, "cx": 320, "cy": 240},
            "pairs": [{"world_board": {"points": [], "pixels": []}, "aux_board": {"points": [], "pixels": []},
                       "distance": {"kind": "grid", "squares": 10, "square_size": 0.03}}]}"#;
        let s: CalibrationSession = serde_json::from_str(text).unwrap();
        assert_eq!(
            s.pairs[0].distance,
            DistanceMeasurement::Grid {
                squares: 10.0,
                square_size: 0.03
            }
        );
        assert_eq!(s.inconsistency_threshold, 0.05);
        let again: CalibrationSession = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(again, s);
        assert!(calibrate_session(&s).is_err());
    }
}
