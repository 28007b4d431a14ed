//! Line-delimited dataset manifests.
//!
//! Attribute manifest:
//!
//! ```text
//! facerel-manifest v1 attributes
//! <image-path> <landmark-path> <dataset-id> <20 labels: 0, 1 or ?>
//! ```
//!
//! Pair manifest (`split` is `train`, `test` or `video`):
//!
//! ```text
//! facerel-manifest v1 pairs <split>
//! <image-path> <x,y,w,h> <x,y,w,h> <8 labels: 0 or 1>
//! ```
//!
//! Box `x`, `y` are pixels and `w`, `h` fractions of the image size. Paths
//! are relative to the manifest's directory and may not contain whitespace.
//! Blank lines and lines starting with `#` are ignored.

use std::collections::HashSet;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};

use facerel_core::data::{FaceBox, NUM_ATTRIBUTES, NUM_RELATIONS};

use crate::error::{RunError, RunResult};

pub const MANIFEST_VERSION: u32 = 1;
const MAGIC: &str = "facerel-manifest";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}: {message}")]
pub struct ManifestError {
    pub line: usize,
    pub message: String,
}

fn err<T>(line: usize, message: impl Into<String>) -> Result<T, ManifestError> {
    Err(ManifestError {
        line,
        message: message.into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
    Video,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Video => "video",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            "video" => Some(Split::Video),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributeRecord {
    pub image: PathBuf,
    pub landmarks: PathBuf,
    pub dataset_id: String,
    pub labels: Vec<Option<bool>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub image: PathBuf,
    pub left: FaceBox,
    pub right: FaceBox,
    pub relations: [bool; NUM_RELATIONS],
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttributeManifest {
    pub records: Vec<AttributeRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairManifest {
    pub split: Split,
    pub records: Vec<PairRecord>,
}

/// Non-comment lines after the header, with 1-based line numbers.
fn body_lines<'a>(text: &'a str, kind: &str) -> Result<(Vec<String>, Vec<(usize, &'a str)>), ManifestError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let Some((_, header)) = lines.next() else {
        return err(1, "empty file: missing manifest header");
    };
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.first() != Some(&MAGIC) {
        return err(1, format!("expected header starting with `{MAGIC}`"));
    }
    let version = fields.get(1).and_then(|v| v.strip_prefix('v')).and_then(|v| v.parse::<u32>().ok());
    match version {
        Some(MANIFEST_VERSION) => {}
        Some(v) => return err(1, format!("unsupported manifest version {v} (supported: {MANIFEST_VERSION})")),
        None => return err(1, "missing or malformed version field"),
    }
    if fields.get(2) != Some(&kind) {
        return err(1, format!("expected a `{kind}` manifest, found `{}`", fields.get(2).unwrap_or(&"")));
    }
    let extra = fields[3..].iter().map(|s| s.to_string()).collect();
    let body = lines.filter(|(_, l)| !l.is_empty() && !l.starts_with('#')).collect();
    Ok((extra, body))
}

fn parse_bool(tok: &str, line: usize, what: &str, allow_missing: bool) -> Result<Option<bool>, ManifestError> {
    match tok {
        "0" => Ok(Some(false)),
        "1" => Ok(Some(true)),
        "?" if allow_missing => Ok(None),
        _ => err(line, format!("{what}: label `{tok}` is not 0, 1{}", if allow_missing { " or ?" } else { "" })),
    }
}

fn parse_box(tok: &str, line: usize, what: &str) -> Result<FaceBox, ManifestError> {
    let v: Vec<f64> = tok
        .split(',')
        .map(|s| s.parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| ManifestError {
            line,
            message: format!("{what} `{tok}`: {e}"),
        })?;
    if v.len() != 4 {
        return err(line, format!("{what} `{tok}` must have 4 comma-separated fields"));
    }
    if !v.iter().all(|x| x.is_finite()) || v[2] <= 0.0 || v[3] <= 0.0 || v[0] < 0.0 || v[1] < 0.0 {
        return err(line, format!("{what} `{tok}` needs finite x, y >= 0 and w, h > 0"));
    }
    Ok(FaceBox {
        x: v[0],
        y: v[1],
        w: v[2],
        h: v[3],
    })
}

impl AttributeManifest {
    pub fn parse(text: &str) -> Result<Self, ManifestError> {
        let (extra, body) = body_lines(text, "attributes")?;
        if !extra.is_empty() {
            return err(1, format!("unexpected header fields {extra:?}"));
        }
        let mut records = Vec::with_capacity(body.len());
        for (line, l) in body {
            let tok: Vec<&str> = l.split_whitespace().collect();
            if tok.len() != 3 + NUM_ATTRIBUTES {
                return err(line, format!("expected {} fields, found {}", 3 + NUM_ATTRIBUTES, tok.len()));
            }
            let labels = tok[3..]
                .iter()
                .enumerate()
                .map(|(i, t)| parse_bool(t, line, &format!("attribute {i}"), true))
                .collect::<Result<_, _>>()?;
            records.push(AttributeRecord {
                image: PathBuf::from(tok[0]),
                landmarks: PathBuf::from(tok[1]),
                dataset_id: tok[2].to_string(),
                labels,
            });
        }
        Ok(Self { records })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{MAGIC} v{MANIFEST_VERSION} attributes\n");
        for r in &self.records {
            write!(s, "{} {} {}", r.image.display(), r.landmarks.display(), r.dataset_id).unwrap();
            for l in &r.labels {
                s.push_str(match l {
                    Some(true) => " 1",
                    Some(false) => " 0",
                    None => " ?",
                });
            }
            s.push('\n');
        }
        s
    }
}

fn box_token(b: &FaceBox) -> String {
    format!("{},{},{},{}", b.x, b.y, b.w, b.h)
}

impl PairManifest {
    pub fn parse(text: &str) -> Result<Self, ManifestError> {
        let (extra, body) = body_lines(text, "pairs")?;
        let split = match extra.as_slice() {
            [s] => Split::parse(s).ok_or_else(|| ManifestError {
                line: 1,
                message: format!("unknown split `{s}` (expected train, test or video)"),
            })?,
            _ => return err(1, "pair manifest header needs exactly one split tag"),
        };
        let mut records = Vec::with_capacity(body.len());
        for (line, l) in body {
            let tok: Vec<&str> = l.split_whitespace().collect();
            if tok.len() != 3 + NUM_RELATIONS {
                return err(line, format!("expected {} fields, found {}", 3 + NUM_RELATIONS, tok.len()));
            }
            let mut relations = [false; NUM_RELATIONS];
            for (i, t) in tok[3..].iter().enumerate() {
                relations[i] = parse_bool(t, line, &format!("relation {i}"), false)?.unwrap_or(false);
            }
            records.push(PairRecord {
                image: PathBuf::from(tok[0]),
                left: parse_box(tok[1], line, "left box")?,
                right: parse_box(tok[2], line, "right box")?,
                relations,
            });
        }
        Ok(Self { split, records })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{MAGIC} v{MANIFEST_VERSION} pairs {}\n", self.split);
        for r in &self.records {
            write!(s, "{} {} {}", r.image.display(), box_token(&r.left), box_token(&r.right)).unwrap();
            for &v in &r.relations {
                s.push_str(if v { " 1" } else { " 0" });
            }
            s.push('\n');
        }
        s
    }
}

/// Pairs are identified by image path and the unordered box pair.
fn pair_key(r: &PairRecord) -> (PathBuf, [String; 2]) {
    let mut boxes = [box_token(&r.left), box_token(&r.right)];
    boxes.sort();
    (r.image.clone(), boxes)
}

/// Rejects a test pair that also appears in the training manifest.
pub fn check_disjoint(train: &PairManifest, test: &PairManifest) -> RunResult<()> {
    let seen: HashSet<_> = train.records.iter().map(pair_key).collect();
    if let Some((i, r)) = test.records.iter().enumerate().find(|(_, r)| seen.contains(&pair_key(r))) {
        return Err(RunError::validation(format!(
            "held-out pair {i} ({}) also appears in the training split",
            r.image.display()
        )));
    }
    Ok(())
}

/// Resolves a manifest-relative path.
pub fn resolve(manifest: &Path, entry: &Path) -> PathBuf {
    if entry.is_absolute() {
        entry.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(entry)
    }
}
