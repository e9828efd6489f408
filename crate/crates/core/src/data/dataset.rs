//! On-disk dataset layout:
//!
//! ```text
//! <root>/manifest.json
//! <root>/<seq>/frames/000001.ppm ...
//! <root>/<seq>/groundtruth.txt      one "x,y,w,h" line per frame
//! <root>/<seq>/attributes.txt       one tag per line
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bbox::XywhBox;
use crate::data::image::Frame;
use crate::data::synth::Sequence;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub name: String,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub attributes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub night: bool,
    pub seed: u64,
    pub sequences: Vec<SequenceEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub sequences: Vec<Sequence>,
}

pub fn frame_path(root: &Path, seq: &str, index: usize) -> PathBuf {
    root.join(seq).join("frames").join(format!("{:06}.ppm", index + 1))
}

/// Formats boxes as `x,y,w,h` lines. Values use the shortest representation
/// that parses back to the same `f64`.
pub fn format_boxes(boxes: &[XywhBox]) -> String {
    let mut s = String::new();
    for b in boxes {
        s.push_str(&format!("{},{},{},{}\n", b.x, b.y, b.w, b.h));
    }
    s
}

/// Parses `x,y,w,h` lines (commas, tabs or spaces as separators).
pub fn parse_boxes(text: &str, path: &Path) -> Result<Vec<XywhBox>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect();
        if fields.len() != 4 {
            return Err(err(format!("expected 4 fields, found {}", fields.len())));
        }
        let mut v = [0.0; 4];
        for (k, f) in fields.iter().enumerate() {
            v[k] = f
                .parse::<f64>()
                .map_err(|_| err(format!("not a number: `{f}`")))?;
            if !v[k].is_finite() {
                return Err(err(format!("non-finite value `{f}`")));
            }
        }
        out.push(XywhBox::new(v[0], v[1], v[2], v[3]));
    }
    Ok(out)
}

pub fn read_boxes(path: &Path) -> Result<Vec<XywhBox>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_boxes(&text, path)
}

fn parse_groundtruth(path: &Path) -> Result<Vec<XywhBox>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let boxes = parse_boxes(&text, path)?;
    for (i, b) in boxes.iter().enumerate() {
        if !(b.w > 0.0 && b.h > 0.0) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("groundtruth width and height must be positive, got {b:?}"),
            });
        }
    }
    Ok(boxes)
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn write_dataset(sequences: &[Sequence], root: &Path, night: bool, seed: u64) -> Result<DatasetManifest> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut entries = Vec::with_capacity(sequences.len());
    for seq in sequences {
        if seq.frames.len() != seq.groundtruth.len() {
            return Err(Error::Data(format!(
                "sequence `{}` has {} frames but {} groundtruth boxes",
                seq.name,
                seq.frames.len(),
                seq.groundtruth.len()
            )));
        }
        let frames_dir = root.join(&seq.name).join("frames");
        fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
        for (i, f) in seq.frames.iter().enumerate() {
            f.write_ppm(&frame_path(root, &seq.name, i))?;
        }
        write_file(
            &root.join(&seq.name).join("groundtruth.txt"),
            format_boxes(&seq.groundtruth).as_bytes(),
        )?;
        let mut attrs = seq.attributes.join("\n");
        if !attrs.is_empty() {
            attrs.push('\n');
        }
        write_file(&root.join(&seq.name).join("attributes.txt"), attrs.as_bytes())?;
        let (width, height) = seq
            .frames
            .first()
            .map(|f| (f.width, f.height))
            .unwrap_or((0, 0));
        entries.push(SequenceEntry {
            name: seq.name.clone(),
            frames: seq.frames.len(),
            width,
            height,
            attributes: seq.attributes.clone(),
        });
    }
    let manifest = DatasetManifest {
        version: 1,
        night,
        seed,
        sequences: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    write_file(&root.join(MANIFEST_FILE), json.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_sequence(root: &Path, entry: &SequenceEntry) -> Result<Sequence> {
    let dir = root.join(&entry.name);
    let gt_path = dir.join("groundtruth.txt");
    let groundtruth = parse_groundtruth(&gt_path)?;
    if groundtruth.len() != entry.frames {
        return Err(Error::Data(format!(
            "sequence `{}`: manifest lists {} frames, groundtruth has {} lines",
            entry.name,
            entry.frames,
            groundtruth.len()
        )));
    }
    let attr_path = dir.join("attributes.txt");
    let attributes = match fs::read_to_string(&attr_path) {
        Ok(t) => t
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(Error::io(&attr_path, e)),
    };
    let frames = (0..entry.frames)
        .map(|i| Frame::read_ppm(&frame_path(root, &entry.name, i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Sequence {
        name: entry.name.clone(),
        frames,
        groundtruth,
        attributes,
    })
}

pub fn read_dataset(root: &Path) -> Result<Dataset> {
    let manifest = read_manifest(root)?;
    let sequences = manifest
        .sequences
        .iter()
        .map(|e| read_sequence(root, e))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        manifest,
        sequences,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_dataset, DatasetSpec};

    #[test]
    fn write_then_read_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec::new(2, 5, 21, true);
        let seqs = generate_dataset(&spec).unwrap();
        write_dataset(&seqs, dir.path(), true, 21).unwrap();
        let ds = read_dataset(dir.path()).unwrap();
        assert_eq!(ds.sequences, seqs);
        assert!(ds.manifest.night);
    }

    #[test]
    fn manifest_count_matches_directory_scan() {
        let dir = tempfile::tempdir().unwrap();
        let seqs = generate_dataset(&DatasetSpec::new(3, 3, 1, false)).unwrap();
        let m = write_dataset(&seqs, dir.path(), false, 1).unwrap();
        let dirs = fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_type().unwrap().is_dir())
            .count();
        assert_eq!(m.sequences.len(), dirs);
    }

    #[test]
    fn groundtruth_line_format() {
        let b = parse_boxes("10,20,30,40\n", Path::new("gt")).unwrap();
        assert_eq!(b, vec![XywhBox::new(10.0, 20.0, 30.0, 40.0)]);
        let b = parse_boxes("1.5\t2 3,4\n", Path::new("gt")).unwrap();
        assert_eq!(b, vec![XywhBox::new(1.5, 2.0, 3.0, 4.0)]);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("groundtruth.txt");
        fs::write(&p, "1,2,3,4\n1,2,x,4\n").unwrap();
        match parse_groundtruth(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        fs::write(&p, "1,2,3,4\n5,6,7\n").unwrap();
        assert!(matches!(parse_groundtruth(&p), Err(Error::Parse { line: 2, .. })));
        fs::write(&p, "1,2,0,4\n").unwrap();
        assert!(matches!(parse_groundtruth(&p), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn box_text_round_trip_is_exact() {
        let boxes = vec![
            XywhBox::new(0.1 + 0.2, 1.0 / 3.0, 12.345678901234567, 1e-3),
            XywhBox::new(10.0, 20.0, 30.0, 40.0),
        ];
        let back = parse_boxes(&format_boxes(&boxes), Path::new("b")).unwrap();
        assert_eq!(back, boxes);
    }
}
