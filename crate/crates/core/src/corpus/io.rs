//! On-disk formats: `FEATMAT1` feature matrices and tab-separated manifests.
//!
//! Feature file layout (little-endian):
//!
//! ```text
//! magic   8 bytes  "FEATMAT1"
//! rows    u32
//! cols    u32
//! data    rows * cols f32, row-major
//! ```
//!
//! Manifest: one utterance per line,
//! `utt_id<TAB>speaker<TAB>domain<TAB>num_frames<TAB>relative_path`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{FeatureChunk, UtteranceRecord};
use crate::error::{Error, Result};

pub const FEATMAT_MAGIC: &[u8; 8] = b"FEATMAT1";

/// Writes `bytes` to `path` through a temporary sibling and a rename, so a
/// reader never observes a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn encode_featmat(rows: usize, cols: usize, data: &[f32]) -> Vec<u8> {
    assert_eq!(rows * cols, data.len());
    let mut out = Vec::with_capacity(16 + data.len() * 4);
    out.extend_from_slice(FEATMAT_MAGIC);
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes a feature file into `(rows, cols, data)`.
pub fn decode_featmat(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    if bytes.len() < 16 || &bytes[..8] != FEATMAT_MAGIC {
        return Err(Error::format(path, "missing FEATMAT1 header"));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() != rows * cols * 4 {
        return Err(Error::format(
            path,
            format!(
                "{rows}x{cols} matrix needs {} data bytes, found {}",
                rows * cols * 4,
                body.len()
            ),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((rows, cols, data))
}

pub fn write_featmat(path: &Path, rows: usize, cols: usize, data: &[f32]) -> Result<()> {
    write_atomic(path, &encode_featmat(rows, cols, data))
}

pub fn read_featmat(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_featmat(path, &bytes)
}

pub fn write_chunk(path: &Path, chunk: &FeatureChunk) -> Result<()> {
    write_featmat(path, chunk.frames(), chunk.bins(), chunk.data())
}

pub fn read_chunk(path: &Path) -> Result<FeatureChunk> {
    let (rows, cols, data) = read_featmat(path)?;
    FeatureChunk::new(rows, cols, data).map_err(|e| Error::format(path, e.to_string()))
}

/// A parsed manifest together with the directory its relative paths are
/// resolved against.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<UtteranceRecord>,
}

impl Manifest {
    pub fn feature_path(&self, rec: &UtteranceRecord) -> PathBuf {
        self.root.join(&rec.feature_path)
    }

    /// Number of distinct speaker labels (max label + 1).
    pub fn num_speakers(&self) -> usize {
        self.records.iter().map(|r| r.speaker + 1).max().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

pub fn format_manifest(records: &[UtteranceRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            r.utt_id,
            r.speaker,
            r.domain,
            r.num_frames,
            r.feature_path.display()
        ));
    }
    s
}

pub fn parse_manifest(path: &Path, text: &str) -> Result<Vec<UtteranceRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::format(path, format!("line {}: {msg}", i + 1));
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(bad(&format!("expected 5 tab-separated fields, got {}", fields.len())));
        }
        let speaker = fields[1].parse().map_err(|_| bad("speaker is not an integer"))?;
        let domain = fields[2].parse().map_err(|e: Error| bad(&e.to_string()))?;
        let num_frames: usize = fields[3].parse().map_err(|_| bad("num_frames is not an integer"))?;
        if num_frames == 0 {
            return Err(bad("num_frames must be positive"));
        }
        out.push(UtteranceRecord {
            utt_id: fields[0].to_string(),
            speaker,
            domain,
            num_frames,
            feature_path: PathBuf::from(fields[4]),
        });
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[UtteranceRecord]) -> Result<()> {
    write_atomic(path, format_manifest(records).as_bytes())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let records = parse_manifest(path, &text)?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    Ok(Manifest { root, records })
}

/// Loads every feature matrix of a manifest, checking frame counts against
/// the manifest entries.
pub fn load_features(manifest: &Manifest) -> Result<Vec<FeatureChunk>> {
    manifest
        .records
        .iter()
        .map(|r| {
            let path = manifest.feature_path(r);
            let chunk = read_chunk(&path)?;
            if chunk.frames() != r.num_frames {
                return Err(Error::format(
                    &path,
                    format!(
                        "manifest says {} frames for {}, file has {}",
                        r.num_frames,
                        r.utt_id,
                        chunk.frames()
                    ),
                ));
            }
            Ok(chunk)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Domain;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn featmat_round_trip(rows in 1usize..6, cols in 1usize..6, seed in any::<u32>()) {
            let data: Vec<f32> = (0..rows * cols).map(|i| (i as f32 + seed as f32).sin()).collect();
            let bytes = encode_featmat(rows, cols, &data);
            prop_assert_eq!(bytes.len(), 16 + rows * cols * 4);
            let (r, c, d) = decode_featmat(Path::new("x"), &bytes).unwrap();
            prop_assert_eq!((r, c), (rows, cols));
            prop_assert_eq!(d, data);
        }
    }

    #[test]
    fn featmat_header_is_bit_exact() {
        let bytes = encode_featmat(2, 1, &[1.0, -2.0]);
        assert_eq!(&bytes[..8], b"FEATMAT1");
        assert_eq!(&bytes[8..12], &[2, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &[1, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
    }

    #[test]
    fn truncated_featmat_rejected() {
        let mut bytes = encode_featmat(2, 2, &[0.0; 4]);
        bytes.pop();
        assert!(decode_featmat(Path::new("x"), &bytes).is_err());
        assert!(decode_featmat(Path::new("x"), b"FEATMAT2xxxxxxxx").is_err());
    }

    #[test]
    fn manifest_round_trip_and_errors() {
        let recs = vec![UtteranceRecord {
            utt_id: "u1".into(),
            speaker: 3,
            domain: Domain::Target,
            num_frames: 400,
            feature_path: PathBuf::from("feats/u1.feat"),
        }];
        let text = format_manifest(&recs);
        assert_eq!(text, "u1\t3\ttarget\t400\tfeats/u1.feat\n");
        assert_eq!(parse_manifest(Path::new("m"), &text).unwrap(), recs);
        assert!(parse_manifest(Path::new("m"), "u1\t3\tsomewhere\t400\tp\n").is_err());
        assert!(parse_manifest(Path::new("m"), "u1\t3\ttarget\t0\tp\n").is_err());
        assert!(parse_manifest(Path::new("m"), "u1\t3\ttarget\n").is_err());
    }
}
