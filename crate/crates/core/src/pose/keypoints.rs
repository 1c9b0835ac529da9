use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_KEYPOINT_COUNT: usize = 127;
pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.05;

/// 2D keypoints of one video frame with per-point validity.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointFrame {
    pub frame_index: usize,
    points: Vec<[f64; 2]>,
    valid: Vec<bool>,
}

impl KeypointFrame {
    pub fn new(frame_index: usize, points: Vec<[f64; 2]>, valid: Vec<bool>) -> Result<Self> {
        if points.len() != valid.len() {
            return Err(Error::Schema(format!(
                "{} points but {} validity flags",
                points.len(),
                valid.len()
            )));
        }
        Ok(Self {
            frame_index,
            points,
            valid,
        })
    }

    /// All points valid.
    pub fn from_points(frame_index: usize, points: Vec<[f64; 2]>) -> Self {
        let valid = vec![true; points.len()];
        Self {
            frame_index,
            points,
            valid,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn point(&self, i: usize) -> Option<[f64; 2]> {
        self.valid[i].then(|| self.points[i])
    }

    pub(crate) fn points_mut(&mut self) -> &mut [[f64; 2]] {
        &mut self.points
    }
}

#[derive(Serialize, Deserialize)]
struct PersonRecord {
    pose_keypoints_2d: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    people: Vec<PersonRecord>,
}

/// Loads keypoints from either a JSON array of frame records or a directory
/// of one-record-per-file JSON documents (read in file-name order).
///
/// A frame record is `{"people": [{"pose_keypoints_2d": [x0, y0, c0, x1, ...]}]}`.
/// Only the first person is used; a record with no people yields an
/// all-invalid frame.
pub fn load_keypoints(path: impl AsRef<Path>, count: usize, threshold: f64) -> Result<Vec<KeypointFrame>> {
    let path = path.as_ref();
    let values: Vec<serde_json::Value> = if path.is_dir() {
        let mut files: Vec<_> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        files
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let text = std::fs::read_to_string(f).map_err(|e| Error::io(f, e))?;
                serde_json::from_str(&text).map_err(|e| Error::Parse {
                    frame: i,
                    message: e.to_string(),
                })
            })
            .collect::<Result<_>>()?
    } else {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
            frame: 0,
            message: e.to_string(),
        })?;
        match doc {
            serde_json::Value::Array(items) => items,
            _ => {
                return Err(Error::Schema(
                    "keypoint file must be a JSON array of frame records".into(),
                ))
            }
        }
    };
    values
        .into_iter()
        .enumerate()
        .map(|(i, v)| parse_frame(i, v, count, threshold))
        .collect()
}

fn parse_frame(index: usize, value: serde_json::Value, count: usize, threshold: f64) -> Result<KeypointFrame> {
    let record: FrameRecord = serde_json::from_value(value).map_err(|e| Error::Parse {
        frame: index,
        message: e.to_string(),
    })?;
    let Some(person) = record.people.first() else {
        return KeypointFrame::new(index, vec![[0.0, 0.0]; count], vec![false; count]);
    };
    let flat = &person.pose_keypoints_2d;
    if flat.len() % 3 != 0 {
        return Err(Error::Parse {
            frame: index,
            message: format!("{} values is not a list of (x, y, c) triples", flat.len()),
        });
    }
    if flat.len() / 3 != count {
        return Err(Error::Schema(format!(
            "frame {index}: expected {count} keypoints, got {}",
            flat.len() / 3
        )));
    }
    let mut points = Vec::with_capacity(count);
    let mut valid = Vec::with_capacity(count);
    for t in flat.chunks(3) {
        points.push([t[0], t[1]]);
        valid.push(t[2] >= threshold && t[2] > 0.0 && t[0].is_finite() && t[1].is_finite());
    }
    KeypointFrame::new(index, points, valid)
}

/// Writes frames as a JSON array of records; valid points get confidence 1.
pub fn save_keypoints(path: impl AsRef<Path>, frames: &[KeypointFrame]) -> Result<()> {
    let path = path.as_ref();
    let records: Vec<FrameRecord> = frames
        .iter()
        .map(|f| FrameRecord {
            people: vec![PersonRecord {
                pose_keypoints_2d: f
                    .points
                    .iter()
                    .zip(&f.valid)
                    .flat_map(|(p, &v)| [p[0], p[1], if v { 1.0 } else { 0.0 }])
                    .collect(),
            }],
        })
        .collect();
    let text = serde_json::to_string(&records).map_err(|e| Error::Schema(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &tempfile::TempDir, body: &str) -> std::path::PathBuf {
        let p = dir.path().join("k.json");
        std::fs::write(&p, body).unwrap();
        p
    }

    fn record(n: usize, conf: f64) -> String {
        let vals: Vec<String> = (0..n).map(|i| format!("{i}.0, {}.5, {conf}", i * 2)).collect();
        format!("{{\"people\": [{{\"pose_keypoints_2d\": [{}]}}]}}", vals.join(", "))
    }

    #[test]
    fn two_frames_of_127_points() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, &format!("[{}, {}]", record(127, 0.9), record(127, 0.9)));
        let frames = load_keypoints(&p, 127, DEFAULT_CONFIDENCE_THRESHOLD).unwrap();
        assert_eq!(frames.len(), 2);
        assert!(frames.iter().all(|f| f.len() == 127 && f.valid().iter().all(|&v| v)));
        assert_eq!(frames[1].frame_index, 1);
        assert_eq!(frames[0].points()[3], [3.0, 6.5]);
    }

    #[test]
    fn zero_confidence_marks_everything_invalid() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, &format!("[{}]", record(127, 0.0)));
        let frames = load_keypoints(&p, 127, DEFAULT_CONFIDENCE_THRESHOLD).unwrap();
        assert!(frames[0].valid().iter().all(|&v| !v));
    }

    #[test]
    fn short_frame_is_a_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, &format!("[{}]", record(126, 1.0)));
        assert!(matches!(
            load_keypoints(&p, 127, DEFAULT_CONFIDENCE_THRESHOLD),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn malformed_record_names_the_frame() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, &format!("[{}, {{\"people\": 3}}]", record(2, 1.0)));
        match load_keypoints(&p, 2, 0.05) {
            Err(Error::Parse { frame, .. }) => assert_eq!(frame, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn save_then_load_preserves_points_and_validity() {
        let dir = tempfile::tempdir().unwrap();
        let f = KeypointFrame::new(0, vec![[1.25, 2.5], [3.0, -4.0]], vec![true, false]).unwrap();
        let p = dir.path().join("out.json");
        save_keypoints(&p, std::slice::from_ref(&f)).unwrap();
        let back = load_keypoints(&p, 2, 0.05).unwrap();
        assert_eq!(back[0], f);
    }

    #[test]
    fn directory_of_frames_in_name_order() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("b.json"), record(1, 1.0).replace("0.0, 0.5", "9.0, 9.0")).unwrap();
        std::fs::write(dir.path().join("a.json"), record(1, 1.0)).unwrap();
        let frames = load_keypoints(dir.path(), 1, 0.05).unwrap();
        assert_eq!(frames[0].points()[0], [0.0, 0.5]);
        assert_eq!(frames[1].points()[0], [9.0, 9.0]);
    }
}
