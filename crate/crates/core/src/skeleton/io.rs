// JSON-lines sample files and the NTU `.skeleton` text format.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DatasetSplit, SkeletonGraph, SkeletonSequence};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sidecar file describing every JSON-lines split in a directory.
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataManifest {
    #[serde(rename = "V")]
    pub v: usize,
    #[serde(rename = "C")]
    pub c: usize,
    pub classes: usize,
}

impl DataManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&path, e))
    }
}

/// One line: `coords` nests as `T × M × V × C`.
#[derive(Serialize, Deserialize)]
struct SampleLine {
    label: usize,
    coords: Vec<Vec<Vec<Vec<f64>>>>,
}

fn split_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "split".into())
}

/// Reads a JSON-lines split, validating against its directory manifest and
/// the declared body graph. Blank lines are skipped; `T` may vary per line.
pub fn load_jsonl(path: &Path, graph: &SkeletonGraph) -> Result<DatasetSplit> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let manifest = DataManifest::read(dir)?;
    if manifest.v != graph.joints() {
        return Err(Error::Schema(format!(
            "manifest declares V={} but graph has {} joints",
            manifest.v,
            graph.joints()
        )));
    }
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let lineno = n + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message,
        };
        let rec: SampleLine = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let seq = decode(&rec.coords, rec.label, &manifest).map_err(|e| match e {
            Error::Schema(m) => Error::Schema(format!("{}:{lineno}: {m}", path.display())),
            other => other,
        })?;
        samples.push(seq);
    }
    DatasetSplit::new(split_name(path), manifest.classes, samples)
}

fn decode(coords: &[Vec<Vec<Vec<f64>>>], label: usize, manifest: &DataManifest) -> Result<SkeletonSequence> {
    let t = coords.len();
    if t == 0 {
        return Err(Error::Schema("sample has no frames".into()));
    }
    let m = coords[0].len();
    let (v, c) = (manifest.v, manifest.c);
    if label >= manifest.classes {
        return Err(Error::Schema(format!("label {label} ≥ class count {}", manifest.classes)));
    }
    let mut out = Tensor::zeros([c, t, v, m]);
    for (ti, frame) in coords.iter().enumerate() {
        if frame.len() != m {
            return Err(Error::Schema(format!("frame {ti} has {} bodies, expected {m}", frame.len())));
        }
        for (mi, body) in frame.iter().enumerate() {
            if body.len() != v {
                return Err(Error::Schema(format!(
                    "frame {ti} body {mi} has {} joints, expected {v}",
                    body.len()
                )));
            }
            for (vi, joint) in body.iter().enumerate() {
                if joint.len() != c {
                    return Err(Error::Schema(format!(
                        "frame {ti} joint {vi} has {} channels, expected {c}",
                        joint.len()
                    )));
                }
                for (ci, &x) in joint.iter().enumerate() {
                    out.set(&[ci, ti, vi, mi], x);
                }
            }
        }
    }
    SkeletonSequence::new(out, label)
}

/// Writes a split as JSON-lines plus the directory manifest.
pub fn write_jsonl(split: &DatasetSplit, path: &Path) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let (mut v, mut c) = (0, 3);
    for s in split.samples() {
        (v, c) = (s.joints(), s.channels());
        let coords = (0..s.frames())
            .map(|t| {
                (0..s.bodies())
                    .map(|m| (0..v).map(|j| (0..c).map(|ci| s.at(ci, t, j, m)).collect()).collect())
                    .collect()
            })
            .collect();
        serde_json::to_writer(&mut w, &SampleLine { label: s.label, coords })?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    DataManifest {
        v,
        c,
        classes: split.class_count,
    }
    .write(dir)
}

const NTU_JOINTS: usize = 25;

/// Whitespace-token reader that remembers line numbers.
struct Lines {
    path: PathBuf,
    lines: Vec<(usize, String)>,
    pos: usize,
}

impl Lines {
    fn next(&mut self) -> Result<(usize, &str)> {
        match self.lines.get(self.pos) {
            Some((n, l)) => {
                self.pos += 1;
                Ok((*n, l.as_str()))
            }
            None => Err(Error::Parse {
                path: self.path.clone(),
                line: self.lines.last().map_or(0, |l| l.0) + 1,
                message: "unexpected end of file".into(),
            }),
        }
    }

    fn count(&mut self, what: &str) -> Result<usize> {
        let path = self.path.clone();
        let (n, l) = self.next()?;
        l.trim().parse().map_err(|_| Error::Parse {
            path,
            line: n,
            message: format!("expected {what}, found `{}`", l.trim()),
        })
    }
}

/// Action label from an `A###` token in the file name, zero-based.
fn ntu_label(path: &Path) -> Result<usize> {
    let name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let bytes = name.as_bytes();
    for i in 0..bytes.len().saturating_sub(3) {
        if bytes[i] == b'A' && bytes[i + 1..i + 4].iter().all(u8::is_ascii_digit) {
            let code: usize = name[i + 1..i + 4].parse().expect("three digits");
            if code == 0 {
                return Err(Error::Format(format!("action code A000 in `{name}`")));
            }
            return Ok(code - 1);
        }
    }
    Err(Error::Format(format!("no A### action token in `{name}`")))
}

/// Parses an NTU RGB+D `.skeleton` file into `[3, T, 25, M]` coordinates, with
/// `M` the largest body count seen in any frame.
pub fn parse_ntu_skeleton(path: &Path) -> Result<SkeletonSequence> {
    let label = ntu_label(path)?;
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = Lines {
        path: path.to_path_buf(),
        lines: text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| (i + 1, l.to_string()))
            .collect(),
        pos: 0,
    };
    let frames = lines.count("frame count")?;
    if frames == 0 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "file has zero frames".into(),
        });
    }
    // per frame, per body, 25 xyz triples
    let mut parsed: Vec<Vec<Vec<[f64; 3]>>> = Vec::with_capacity(frames);
    for _ in 0..frames {
        let bodies = lines.count("body count")?;
        let mut frame = Vec::with_capacity(bodies);
        for _ in 0..bodies {
            lines.next()?; // body metadata
            let joints = lines.count("joint count")?;
            if joints != NTU_JOINTS {
                return Err(Error::Format(format!(
                    "{}: body with {joints} joints, expected {NTU_JOINTS}",
                    path.display()
                )));
            }
            let mut body = Vec::with_capacity(NTU_JOINTS);
            for _ in 0..NTU_JOINTS {
                let path_buf = path.to_path_buf();
                let (n, l) = lines.next()?;
                let vals: Vec<f64> = l
                    .split_whitespace()
                    .take(3)
                    .map(str::parse)
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::Parse {
                        path: path_buf.clone(),
                        line: n,
                        message: format!("bad joint coordinate: {e}"),
                    })?;
                if vals.len() < 3 {
                    return Err(Error::Parse {
                        path: path_buf,
                        line: n,
                        message: "joint line has fewer than 3 values".into(),
                    });
                }
                body.push([vals[0], vals[1], vals[2]]);
            }
            frame.push(body);
        }
        parsed.push(frame);
    }
    let m = parsed.iter().map(Vec::len).max().unwrap_or(0).max(1);
    let mut coords = Tensor::zeros([3, frames, NTU_JOINTS, m]);
    for (t, frame) in parsed.iter().enumerate() {
        for (mi, body) in frame.iter().enumerate() {
            for (v, xyz) in body.iter().enumerate() {
                for (c, &x) in xyz.iter().enumerate() {
                    coords.set(&[c, t, v, mi], x);
                }
            }
        }
    }
    SkeletonSequence::new(coords, label)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_comes_from_action_token() {
        assert_eq!(ntu_label(Path::new("S001C001P001R001A043.skeleton")).unwrap(), 42);
        assert!(ntu_label(Path::new("noaction.skeleton")).is_err());
    }
}
