//! On-disk formats: the binary embedding file, the tab-separated manifest,
//! and small `key = value` / two-column text sidecars.
//!
//! Embedding file layout (all little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "MXEB"
//! 4       4     u32 version (1)
//! 8       4     u32 dim
//! 12      8     u64 rows
//! 20      4*rows*dim  f32 values, row-major
//! ```
//!
//! Manifests written after refinement carry a `# refined` line; such files
//! may hold a single-camera pid under several videos.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::{DatasetManifest, EmbeddingMatrix, SampleRecord, Source, Split};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"MXEB";
pub const EMBEDDING_VERSION: u32 = 1;
pub const EMBEDDING_HEADER_LEN: usize = 20;

pub fn encode_embeddings(m: &EmbeddingMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(EMBEDDING_HEADER_LEN + 4 * m.as_slice().len());
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingMatrix> {
    let (m, used) = decode_embeddings_prefix(bytes)?;
    if bytes.len() > used {
        return Err(Error::DimMismatch {
            expected: used,
            actual: bytes.len(),
        });
    }
    Ok(m)
}

/// Decodes one embedding block from the front of `bytes` and returns it with
/// the number of bytes it occupied. Trailing bytes are left alone.
pub fn decode_embeddings_prefix(bytes: &[u8]) -> Result<(EmbeddingMatrix, usize)> {
    if bytes.len() < 4 || &bytes[..4] != EMBEDDING_MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < EMBEDDING_HEADER_LEN {
        return Err(Error::TruncatedFile {
            expected: EMBEDDING_HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != EMBEDDING_VERSION {
        return Err(Error::BadVersion(version));
    }
    let dim = u32_at(8) as usize;
    let rows = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let expected = (EMBEDDING_HEADER_LEN as u64)
        .saturating_add(rows.saturating_mul(dim as u64).saturating_mul(4));
    if (bytes.len() as u64) < expected {
        return Err(Error::TruncatedFile {
            expected,
            actual: bytes.len() as u64,
        });
    }
    if dim == 0 && rows > 0 {
        return Err(Error::DimMismatch {
            expected: 1,
            actual: 0,
        });
    }
    let used = expected as usize;
    let data = bytes[EMBEDDING_HEADER_LEN..used]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((EmbeddingMatrix::new(dim, data)?, used))
}

pub fn write_embeddings(m: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_embeddings(m)).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes)
}

/// Like [`read_embeddings`], but also checks the dimensionality.
pub fn read_embeddings_with_dim(path: impl AsRef<Path>, dim: usize) -> Result<EmbeddingMatrix> {
    let m = read_embeddings(path)?;
    if m.rows() > 0 && m.dim() != dim {
        return Err(Error::DimMismatch {
            expected: dim,
            actual: m.dim(),
        });
    }
    Ok(m)
}

fn parse_err(origin: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: origin.to_string(),
        line,
        message: message.into(),
    }
}

pub fn format_manifest(manifest: &DatasetManifest) -> String {
    let c = manifest.counts();
    let mut out = String::new();
    out.push_str("# sample_id\tpid\tsource\tcontext_id\tsplit\n");
    if manifest.is_refined() {
        out.push_str("# refined\n");
    }
    let _ = writeln!(
        out,
        "# counts\tn_m={}\tn_s={}\tm_m={}\tm_s={}\tk_m={}",
        c.n_m, c.n_s, c.m_m, c.m_s, c.k_m
    );
    for r in manifest.records() {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            r.sample_id,
            r.pid,
            r.source.tag(),
            r.context_id,
            r.split.tag()
        );
    }
    out
}

/// Parses manifest text. A `# counts` comment, when present, must agree
/// with the counts recomputed from the records.
pub fn parse_manifest(text: &str, origin: &str) -> Result<DatasetManifest> {
    let mut records = Vec::new();
    let mut header_counts: Option<(usize, Vec<(String, usize)>)> = None;
    let mut refined = false;
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if comment.trim() == "refined" {
                refined = true;
                continue;
            }
            let mut parts = comment.split('\t');
            if parts.next().map(str::trim) == Some("counts") {
                let mut pairs = Vec::new();
                for p in parts {
                    let (k, v) = p
                        .split_once('=')
                        .ok_or_else(|| parse_err(origin, lineno, "malformed counts entry"))?;
                    let v = v
                        .trim()
                        .parse()
                        .map_err(|_| parse_err(origin, lineno, "count is not an integer"))?;
                    pairs.push((k.trim().to_string(), v));
                }
                header_counts = Some((lineno, pairs));
            }
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(parse_err(
                origin,
                lineno,
                format!("expected 5 tab-separated fields, found {}", fields.len()),
            ));
        }
        let int = |s: &str, what: &str| -> Result<u64> {
            s.trim()
                .parse()
                .map_err(|_| parse_err(origin, lineno, format!("invalid {what} `{s}`")))
        };
        let source = Source::from_tag(fields[2].trim())
            .ok_or_else(|| parse_err(origin, lineno, format!("invalid source `{}`", fields[2])))?;
        let split = Split::from_tag(fields[4].trim())
            .ok_or_else(|| parse_err(origin, lineno, format!("invalid split `{}`", fields[4])))?;
        let context = int(fields[3], "context_id")?;
        let context_id = u32::try_from(context)
            .map_err(|_| parse_err(origin, lineno, "context_id out of range"))?;
        records.push(SampleRecord {
            sample_id: int(fields[0], "sample_id")?,
            pid: int(fields[1], "pid")?,
            source,
            context_id,
            split,
        });
    }
    let manifest = if refined {
        DatasetManifest::new_refined(records)?
    } else {
        DatasetManifest::new(records)?
    };
    if let Some((lineno, pairs)) = header_counts {
        let c = manifest.counts();
        for (k, v) in pairs {
            let actual = match k.as_str() {
                "n_m" => c.n_m,
                "n_s" => c.n_s,
                "m_m" => c.m_m,
                "m_s" => c.m_s,
                "k_m" => c.k_m,
                other => return Err(parse_err(origin, lineno, format!("unknown count `{other}`"))),
            };
            if actual != v {
                return Err(parse_err(
                    origin,
                    lineno,
                    format!("header says {k}={v} but records give {actual}"),
                ));
            }
        }
    }
    Ok(manifest)
}

pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_manifest(manifest)).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, &path.display().to_string())
}

/// Ordered `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str, origin: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| parse_err(origin, idx + 1, "expected `key = value`"))?;
        out.push((idx + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parses a two-column integer table with a header line, e.g. `row_index\tpid`.
pub fn parse_int_pairs(text: &str, origin: &str, header: [&str; 2]) -> Result<Vec<(u64, u64)>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) => {
            let cols: Vec<&str> = h.split('\t').map(str::trim).collect();
            if cols != header {
                return Err(parse_err(origin, 1, format!("expected header `{}`", header.join("\t"))));
            }
        }
        None => return Err(parse_err(origin, 1, "missing header")),
    }
    let mut out = Vec::new();
    for (idx, line) in lines {
        if line.starts_with('#') {
            continue;
        }
        let mut it = line.split('\t');
        let mut next = || -> Result<u64> {
            it.next()
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| parse_err(origin, idx + 1, "expected two integers"))
        };
        let a = next()?;
        let b = next()?;
        out.push((a, b));
    }
    Ok(out)
}

pub fn format_int_pairs(header: [&str; 2], pairs: impl IntoIterator<Item = (u64, u64)>) -> String {
    let mut out = format!("{}\t{}\n", header[0], header[1]);
    for (a, b) in pairs {
        let _ = writeln!(out, "{a}\t{b}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_matrix_is_header_only() {
        let m = EmbeddingMatrix::zeros(8, 0);
        let bytes = encode_embeddings(&m);
        assert_eq!(bytes.len(), EMBEDDING_HEADER_LEN);
        let back = decode_embeddings(&bytes).unwrap();
        assert_eq!(back.dim(), 8);
        assert_eq!(back.rows(), 0);
    }

    #[test]
    fn byte_layout() {
        let m = EmbeddingMatrix::new(3, vec![1.0, -2.0, 0.5, 3.25, 0.0, 7.0]).unwrap();
        let b = encode_embeddings(&m);
        assert_eq!(&b[0..4], b"MXEB");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &3u32.to_le_bytes());
        assert_eq!(&b[12..20], &2u64.to_le_bytes());
        for (k, v) in m.as_slice().iter().enumerate() {
            let o = 20 + 4 * k;
            assert_eq!(&b[o..o + 4], &v.to_le_bytes());
        }
        assert_eq!(b.len(), 20 + 24);
        let again = encode_embeddings(&decode_embeddings(&b).unwrap());
        assert_eq!(b, again);
    }

    #[test]
    fn decode_errors() {
        assert!(matches!(decode_embeddings(b"XXXX"), Err(Error::BadMagic)));
        let m = EmbeddingMatrix::new(2, vec![1.0, 2.0]).unwrap();
        let b = encode_embeddings(&m);
        assert!(matches!(
            decode_embeddings(&b[..b.len() - 1]),
            Err(Error::TruncatedFile { .. })
        ));
        assert!(matches!(decode_embeddings(&b[..10]), Err(Error::TruncatedFile { .. })));
        let mut long = b.clone();
        long.extend_from_slice(&[0, 0, 0, 0]);
        assert!(matches!(decode_embeddings(&long), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn manifest_three_records() {
        let text = "# a comment\n\
                    # counts\tn_m=2\tn_s=1\tm_m=1\tm_s=1\tk_m=2\n\
                    0\t1\tM\t0\ttrain\n\
                    1\t1\tM\t1\ttrain\n\
                    2\t9\tS\t4\ttrain\n";
        let m = parse_manifest(text, "t").unwrap();
        assert_eq!(m.counts().n_m, 2);
        assert_eq!(m.counts().n_s, 1);
        let again = parse_manifest(&format_manifest(&m), "t").unwrap();
        assert_eq!(again, m);

        let wrong = text.replace("n_s=1", "n_s=3");
        assert!(matches!(parse_manifest(&wrong, "t"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn manifest_errors_carry_line_numbers() {
        let text = "0\t1\tM\t0\ttrain\n1\t1\tX\t0\ttrain\n";
        assert!(matches!(parse_manifest(text, "t"), Err(Error::Parse { line: 2, .. })));
        let text = "0\t5\tS\t0\ttrain\n1\t5\tS\t1\ttrain\n";
        assert!(matches!(parse_manifest(text, "t"), Err(Error::CrossVideoPid { .. })));
        let refined = parse_manifest(&format!("# refined\n{text}"), "t").unwrap();
        assert!(refined.is_refined());
        assert_eq!(parse_manifest(&format_manifest(&refined), "t").unwrap(), refined);
        let empty = parse_manifest("", "t").unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn int_pairs() {
        let text = format_int_pairs(["row_index", "pid"], [(0, 7), (1, 9)]);
        let back = parse_int_pairs(&text, "t", ["row_index", "pid"]).unwrap();
        assert_eq!(back, vec![(0, 7), (1, 9)]);
        assert!(parse_int_pairs(&text, "t", ["sample_id", "true_pid"]).is_err());
    }
}
