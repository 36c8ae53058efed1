//! JSONL persistence for sequence records: one JSON object per line with
//! nested `frames x joints x coord` arrays, so files stay greppable and
//! diffable. Read errors carry the 1-based line number.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Camera, DataError, SequenceRecord};

#[derive(Serialize, Deserialize)]
struct RecordJson {
    n_frames: usize,
    joints: usize,
    pose2d: Vec<Vec<[f64; 2]>>,
    pose3d: Vec<Vec<[f64; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    camera: Option<Camera>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    root_abs: Option<Vec<[f64; 3]>>,
    #[serde(default)]
    seed: u64,
}

impl RecordJson {
    fn from_record(r: &SequenceRecord) -> Self {
        let nest2 = |flat: &[f64]| -> Vec<Vec<[f64; 2]>> {
            flat.chunks(r.joints * 2)
                .map(|frame| frame.chunks(2).map(|p| [p[0], p[1]]).collect())
                .collect()
        };
        let nest3 = |flat: &[f64]| -> Vec<Vec<[f64; 3]>> {
            flat.chunks(r.joints * 3)
                .map(|frame| frame.chunks(3).map(|p| [p[0], p[1], p[2]]).collect())
                .collect()
        };
        Self {
            n_frames: r.n_frames,
            joints: r.joints,
            pose2d: nest2(&r.pose2d),
            pose3d: nest3(&r.pose3d),
            camera: r.camera,
            root_abs: r
                .root_abs
                .as_ref()
                .map(|flat| flat.chunks(3).map(|p| [p[0], p[1], p[2]]).collect()),
            seed: r.seed,
        }
    }

    fn into_record(self, line: usize) -> Result<SequenceRecord, DataError> {
        let fail = |msg: String| Err(DataError::Parse { line, msg });
        if self.pose2d.len() != self.n_frames || self.pose3d.len() != self.n_frames {
            return fail(format!(
                "{} 2d / {} 3d frames, header says {}",
                self.pose2d.len(),
                self.pose3d.len(),
                self.n_frames
            ));
        }
        for (t, frame) in self.pose2d.iter().enumerate() {
            if frame.len() != self.joints {
                return fail(format!("pose2d frame {t} has {} joints, header says {}", frame.len(), self.joints));
            }
        }
        for (t, frame) in self.pose3d.iter().enumerate() {
            if frame.len() != self.joints {
                return fail(format!("pose3d frame {t} has {} joints, header says {}", frame.len(), self.joints));
            }
        }
        if let Some(root) = &self.root_abs {
            if root.len() != self.n_frames {
                return fail(format!("root_abs has {} frames, header says {}", root.len(), self.n_frames));
            }
        }
        Ok(SequenceRecord {
            n_frames: self.n_frames,
            joints: self.joints,
            pose2d: self.pose2d.into_iter().flatten().flatten().collect(),
            pose3d: self.pose3d.into_iter().flatten().flatten().collect(),
            camera: self.camera,
            root_abs: self
                .root_abs
                .map(|frames| frames.into_iter().flatten().collect()),
            seed: self.seed,
        })
    }
}

pub fn write_dataset(records: &[SequenceRecord], path: &Path) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        let json = serde_json::to_string(&RecordJson::from_record(r))
            .map_err(|e| DataError::Parse { line: 0, msg: e.to_string() })?;
        writeln!(w, "{json}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<SequenceRecord>, DataError> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let json: RecordJson = serde_json::from_str(&text)
            .map_err(|e| DataError::Parse { line: line_no, msg: e.to_string() })?;
        records.push(json.into_record(line_no)?);
    }
    Ok(records)
}
