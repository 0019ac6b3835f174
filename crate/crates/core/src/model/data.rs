//! Calibration/eval data: one JSON record per line,
//!
//! ```json
//! {"spans":[{"modality":"visual","len":9},{"modality":"language","len":4}],
//!  "embeddings_file":"calib.bin","row_offset":0,"dim":32}
//! ```
//!
//! with every sequence's rows stored in a shared little-endian f32 blob
//! that sits next to the JSONL file. Modality ids are assigned in order of
//! first appearance within the file.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModalityId, Span, TokenSequence};
use crate::tensor::Matrix;

#[derive(Debug, Serialize, Deserialize)]
struct SpanRecord {
    modality: String,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct SequenceRecord {
    spans: Vec<SpanRecord>,
    embeddings_file: String,
    row_offset: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dim: Option<usize>,
}

/// Writes `seqs` as JSONL at `path` with their rows in `blob_name` (a file
/// name in the same directory).
pub fn write_sequences(path: impl AsRef<Path>, blob_name: &str, seqs: &[TokenSequence]) -> Result<()> {
    let path = path.as_ref();
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut blob = Vec::new();
    let mut lines = Vec::new();
    let mut row_offset = 0;
    for s in seqs {
        for x in s.embeddings().as_slice() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
        let rec = SequenceRecord {
            spans: s
                .spans()
                .iter()
                .map(|sp| SpanRecord {
                    modality: sp.modality.name.clone(),
                    len: sp.len,
                })
                .collect(),
            embeddings_file: blob_name.to_string(),
            row_offset,
            dim: Some(s.dim()),
        };
        row_offset += s.len();
        lines.push(serde_json::to_string(&rec).expect("record serializes"));
    }
    let blob_path = dir.join(blob_name);
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for l in lines {
        writeln!(f, "{l}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Reads every record of a JSONL file. `dim` is required when records do
/// not carry their own width; when both are present they must agree.
pub fn read_sequences(path: impl AsRef<Path>, dim: Option<usize>) -> Result<Vec<TokenSequence>> {
    let path = path.as_ref();
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut blobs: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    let mut registry: Vec<String> = Vec::new();
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = |msg: String| Error::format(path, format!("line {}: {msg}", lineno + 1));
        let rec: SequenceRecord = serde_json::from_str(line).map_err(|e| at(e.to_string()))?;
        let width = match (rec.dim, dim) {
            (Some(a), Some(b)) if a != b => return Err(at(format!("record width {a} but expected {b}"))),
            (Some(a), _) | (None, Some(a)) => a,
            (None, None) => return Err(at("record has no `dim` and none was supplied".into())),
        };
        if rec.embeddings_file.contains('/') || rec.embeddings_file.contains('\\') {
            return Err(at(format!("embeddings_file `{}` must be a bare file name", rec.embeddings_file)));
        }
        if !blobs.contains_key(&rec.embeddings_file) {
            let p = dir.join(&rec.embeddings_file);
            let bytes = fs::read(&p).map_err(|e| Error::format(&p, format!("unreadable blob: {e}")))?;
            blobs.insert(rec.embeddings_file.clone(), bytes);
        }
        let bytes = &blobs[&rec.embeddings_file];

        let n: usize = rec.spans.iter().map(|s| s.len).sum();
        let start = rec.row_offset * width * 4;
        let end = start + n * width * 4;
        if end > bytes.len() {
            return Err(Error::format(
                dir.join(&rec.embeddings_file),
                format!("line {}: rows {}..{} exceed blob", lineno + 1, rec.row_offset, rec.row_offset + n),
            ));
        }
        let data = bytes[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut spans = Vec::with_capacity(rec.spans.len());
        let mut cursor = 0;
        for s in rec.spans {
            let id = match registry.iter().position(|m| *m == s.modality) {
                Some(i) => i,
                None => {
                    registry.push(s.modality.clone());
                    registry.len() - 1
                }
            };
            spans.push(Span {
                modality: ModalityId::new(id as u16, s.modality),
                start: cursor,
                len: s.len,
            });
            cursor += s.len;
        }
        let seq = TokenSequence::new(Matrix::from_vec(n, width, data)?, spans).map_err(|e| at(e.to_string()))?;
        out.push(seq);
    }
    Ok(out)
}
