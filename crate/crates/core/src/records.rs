//! JSONL record types exchanged between pipeline stages.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, TrackDelta};
use crate::linker::{Detection, Tracklet};

/// Ground-truth object in one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub frame: usize,
    pub class: usize,
    pub track_id: u64,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

/// Raw detector output: a box and its full class distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub frame: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub scores: Vec<f64>,
}

impl From<&Detection> for DetectionRecord {
    fn from(d: &Detection) -> Self {
        DetectionRecord {
            frame: d.frame,
            bbox: d.bbox,
            scores: d.scores.clone(),
        }
    }
}

impl From<DetectionRecord> for Detection {
    fn from(r: DetectionRecord) -> Self {
        Detection::new(r.frame, r.bbox, r.scores)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackletRecord {
    pub frame: usize,
    pub stride: usize,
    pub box_t: BBox,
    pub delta: TrackDelta,
    pub box_next: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next_scores: Option<Vec<f64>>,
}

impl From<&Tracklet> for TrackletRecord {
    fn from(t: &Tracklet) -> Self {
        TrackletRecord {
            frame: t.frame,
            stride: t.stride,
            box_t: t.box_t,
            delta: t.delta,
            box_next: t.box_next,
            next_scores: t.next_scores.clone(),
        }
    }
}

impl From<TrackletRecord> for Tracklet {
    fn from(r: TrackletRecord) -> Self {
        Tracklet {
            frame: r.frame,
            stride: r.stride,
            box_t: r.box_t,
            delta: r.delta,
            box_next: r.box_next,
            next_scores: r.next_scores,
        }
    }
}

/// Class-specific scored box, as emitted after NMS and (optionally) linking.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredRecord {
    pub frame: usize,
    pub class: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    /// Tube the box belongs to, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tube: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TubeRecord {
    pub class: usize,
    pub tube: usize,
    /// Linking objective before rescoring.
    pub score: f64,
    pub frames: Vec<usize>,
    pub boxes: Vec<BBox>,
    /// Rescored class scores of the members.
    pub scores: Vec<f64>,
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::format(path, e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads one JSON value per non-empty line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", n + 1))))
        .collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn annotation_wire_format() {
        let a = AnnotationRecord {
            frame: 3,
            class: 2,
            track_id: 7,
            bbox: BBox::new(1.5, 2.0, 3.0, 4.0),
        };
        let s = serde_json::to_string(&a).unwrap();
        assert_eq!(s, r#"{"frame":3,"class":2,"track_id":7,"box":[1.5,2.0,3.0,4.0]}"#);
        assert_eq!(serde_json::from_str::<AnnotationRecord>(&s).unwrap(), a);
    }

    #[test]
    fn jsonl_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let recs = vec![
            DetectionRecord {
                frame: 0,
                bbox: BBox::new(0.1, 0.2, 1.0 / 3.0, 7.0),
                scores: vec![0.1, 0.2, 0.7],
            },
            DetectionRecord {
                frame: 1,
                bbox: BBox::new(1e-17, 5.0, 2.0, 2.0),
                scores: vec![1.0 / 7.0, 6.0 / 7.0],
            },
        ];
        write_jsonl(&path, &recs).unwrap();
        assert_eq!(read_jsonl::<DetectionRecord>(&path).unwrap(), recs);
    }

    #[test]
    fn bad_line_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(&path, "{\"frame\":0,\"class\":1,\"track_id\":1,\"box\":[1,1,1,1]}\n{oops}\n").unwrap();
        let err = read_jsonl::<AnnotationRecord>(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn tracklet_conversion() {
        let t = Tracklet::from_delta(2, 4, BBox::new(5.0, 5.0, 2.0, 2.0), TrackDelta::new(0.5, 0.0, 0.0, 0.0))
            .unwrap()
            .with_next_scores(vec![0.5, 0.5]);
        let rec = TrackletRecord::from(&t);
        assert_eq!(Tracklet::from(rec), t);
    }
}
