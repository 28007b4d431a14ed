//! Binary PGM (P5, 8-bit) images and landmark text files.

use std::fmt::Write as _;

use facerel_core::data::{Landmarks, Region};
use facerel_core::image::GrayImage;

use crate::error::{RunError, RunResult};

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.to_u8());
    out
}

pub fn decode_pgm(bytes: &[u8]) -> RunResult<GrayImage> {
    let bad = |m: &str| RunError::validation(format!("PGM: {m}"));
    // header: magic, width, height, maxval separated by whitespace, `#` comments allowed
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| bad("non-ASCII header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad(&format!("unsupported magic `{}` (expected P5)", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad header number `{s}`")));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad(&format!("maxval {maxval} unsupported (expected 255)")));
    }
    // exactly one whitespace byte separates the header from the raster
    let data = &bytes[(i + 1).min(bytes.len())..];
    if data.len() != w * h {
        return Err(bad(&format!("raster has {} bytes, expected {}", data.len(), w * h)));
    }
    Ok(GrayImage::from_u8(w, h, data)?)
}

const LANDMARK_HEADER: &str = "facerel-landmarks v1";

/// One `x y upper|lower` line per point, coordinates normalized to the face box.
pub fn encode_landmarks(lm: &Landmarks) -> String {
    let mut s = format!("{LANDMARK_HEADER}\n");
    for (&(x, y), r) in lm.points.iter().zip(&lm.regions) {
        let region = match r {
            Region::Upper => "upper",
            Region::Lower => "lower",
        };
        writeln!(s, "{x} {y} {region}").unwrap();
    }
    s
}

pub fn decode_landmarks(text: &str) -> RunResult<Landmarks> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == LANDMARK_HEADER => {}
        _ => return Err(RunError::validation(format!("landmarks line 1: expected `{LANDMARK_HEADER}`"))),
    }
    let mut points = Vec::new();
    let mut regions = Vec::new();
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |m: String| RunError::validation(format!("landmarks line {}: {m}", i + 1));
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() != 3 {
            return Err(bad(format!("expected `x y region`, found {} fields", tok.len())));
        }
        let coord = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("`{s}`: {e}")));
        points.push((coord(tok[0])?, coord(tok[1])?));
        regions.push(match tok[2] {
            "upper" => Region::Upper,
            "lower" => Region::Lower,
            other => return Err(bad(format!("unknown region `{other}`"))),
        });
    }
    Ok(Landmarks::new(points, regions)?)
}
