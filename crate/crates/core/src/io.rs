//! Binary trace (`.mtrc`) and head (`.mthd`) files, and JSON-lines manifests.
//!
//! Trace layout, all little-endian:
//!
//! ```text
//! "MTRC" | version u32 = 1 | L H n d V u32 | flags u32 (bit 0: final logits)
//! token_ids  n × u32
//! mask       n × u8
//! hidden     (L+1)·n·d × f32   layer, position, dimension
//! attention  L·H·n·n × f32     layer, head, query, key
//! logits     n·V × f32         only if flags & 1
//! ```
//!
//! Head layout:
//!
//! ```text
//! "MTHD" | version u32 = 1 | d V u32 | norm_kind u32 (0 layernorm, 1 rmsnorm, 2 identity)
//! epsilon f32 | gain d × f32 | bias d × f32 | unembed d·V × f32 (row d-major)
//! has_unembed_bias u32 | unembed_bias V × f32 (only if has_unembed_bias = 1)
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::trace::{
    validate_trace, DatasetManifest, Label, ManifestEntry, ModelHead, NormKind, SequenceTrace,
    TraceDims,
};

pub const TRACE_MAGIC: [u8; 4] = *b"MTRC";
pub const HEAD_MAGIC: [u8; 4] = *b"MTHD";
pub const FORMAT_VERSION: u32 = 1;
pub const TRACE_HEADER_LEN: u64 = 32;
const FLAG_LOGITS: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn dim_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::DimOverflow)
}

/// Serializes a trace into its exact on-disk bytes.
pub fn encode_trace(trace: &SequenceTrace) -> Result<Vec<u8>> {
    validate_trace(trace).into_result()?;
    let dims = trace.dims();
    let mut out =
        Vec::with_capacity(expected_trace_len(dims, trace.final_logits().is_some())? as usize);
    out.extend_from_slice(&TRACE_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    for v in [
        dims.n_layers,
        dims.n_heads,
        dims.seq_len,
        dims.hidden_dim,
        dims.vocab_size,
    ] {
        put_u32(&mut out, dim_u32(v)?);
    }
    let flags = if trace.final_logits().is_some() {
        FLAG_LOGITS
    } else {
        0
    };
    put_u32(&mut out, flags);
    for &id in trace.token_ids() {
        put_u32(&mut out, id);
    }
    out.extend_from_slice(trace.mask());
    put_f32s(&mut out, trace.hidden_states());
    put_f32s(&mut out, trace.attentions());
    if let Some(logits) = trace.final_logits() {
        put_f32s(&mut out, logits);
    }
    Ok(out)
}

/// Writes a validated trace and returns the number of bytes written.
pub fn write_trace<W: Write>(trace: &SequenceTrace, mut dest: W) -> Result<u64> {
    let bytes = encode_trace(trace)?;
    dest.write_all(&bytes)?;
    dest.flush()?;
    Ok(bytes.len() as u64)
}

pub fn write_trace_file(trace: &SequenceTrace, path: impl AsRef<Path>) -> Result<u64> {
    let path = path.as_ref();
    File::create(path)
        .map_err(Error::from)
        .and_then(|f| write_trace(trace, BufWriter::new(f)))
        .map_err(|e| e.in_file(path))
}

/// Total file length implied by a header.
pub fn expected_trace_len(dims: &TraceDims, has_logits: bool) -> Result<u64> {
    let n = dims.seq_len as u64;
    let f32s = |count: Option<u64>| {
        count
            .and_then(|c| c.checked_mul(4))
            .ok_or(Error::DimOverflow)
    };
    let hidden = f32s(
        (dims.n_layers as u64 + 1)
            .checked_mul(n)
            .and_then(|x| x.checked_mul(dims.hidden_dim as u64)),
    )?;
    let attn = f32s(
        (dims.n_layers as u64)
            .checked_mul(dims.n_heads as u64)
            .and_then(|x| x.checked_mul(n))
            .and_then(|x| x.checked_mul(n)),
    )?;
    let logits = if has_logits {
        f32s(n.checked_mul(dims.vocab_size as u64))?
    } else {
        0
    };
    [n * 4, n, hidden, attn, logits]
        .iter()
        .try_fold(TRACE_HEADER_LEN, |acc, &x| acc.checked_add(x))
        .ok_or(Error::DimOverflow)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize) -> &'a [u8] {
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        out
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take(4).try_into().unwrap())
    }

    fn f32(&mut self) -> f32 {
        f32::from_le_bytes(self.take(4).try_into().unwrap())
    }

    fn f32s(&mut self, count: usize) -> Vec<f32> {
        self.take(count * 4)
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    }
}

fn check_len(expected: u64, found: u64) -> Result<()> {
    if found < expected {
        Err(Error::Truncated { expected, found })
    } else if found > expected {
        Err(Error::TrailingBytes { expected, found })
    } else {
        Ok(())
    }
}

fn check_magic(bytes: &[u8], magic: [u8; 4]) -> Result<()> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            expected: 8,
            found: bytes.len() as u64,
        });
    }
    let got: [u8; 4] = bytes[..4].try_into().unwrap();
    if got != magic {
        return Err(Error::BadMagic(got));
    }
    Ok(())
}

/// Parses a complete trace file image.
pub fn decode_trace(bytes: &[u8]) -> Result<SequenceTrace> {
    check_magic(bytes, TRACE_MAGIC)?;
    if (bytes.len() as u64) < TRACE_HEADER_LEN {
        return Err(Error::Truncated {
            expected: TRACE_HEADER_LEN,
            found: bytes.len() as u64,
        });
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let version = cur.u32();
    if version != FORMAT_VERSION {
        return Err(Error::BadVersion(version));
    }
    let mut raw = [0usize; 5];
    for r in raw.iter_mut() {
        *r = cur.u32() as usize;
    }
    let dims = TraceDims::new(raw[0], raw[1], raw[2], raw[3], raw[4]);
    let flags = cur.u32();
    if flags & !FLAG_LOGITS != 0 {
        return Err(Error::InvalidArgument(format!(
            "unknown trace flags {flags:#x}"
        )));
    }
    dims.check()?;
    let has_logits = flags & FLAG_LOGITS != 0;
    check_len(expected_trace_len(&dims, has_logits)?, bytes.len() as u64)?;

    let n = dims.seq_len;
    let token_ids = (0..n).map(|_| cur.u32()).collect();
    let mask = cur.take(n).to_vec();
    let hidden = cur.f32s(dims.hidden_len());
    let attn = cur.f32s(dims.attention_len());
    let logits = has_logits.then(|| cur.f32s(dims.logits_len()));
    SequenceTrace::new(dims, token_ids, mask, hidden, attn, logits)
}

pub fn read_trace<R: Read>(mut source: R) -> Result<SequenceTrace> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    decode_trace(&bytes)
}

pub fn read_trace_file(path: impl AsRef<Path>) -> Result<SequenceTrace> {
    let path = path.as_ref();
    std::fs::read(path)
        .map_err(Error::from)
        .and_then(|b| decode_trace(&b))
        .map_err(|e| e.in_file(path))
}

pub fn encode_head(head: &ModelHead) -> Result<Vec<u8>> {
    head.check()?;
    let mut out = Vec::new();
    out.extend_from_slice(&HEAD_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, dim_u32(head.hidden_dim)?);
    put_u32(&mut out, dim_u32(head.vocab_size)?);
    put_u32(&mut out, head.norm_kind.code());
    out.extend_from_slice(&head.norm_epsilon.to_le_bytes());
    put_f32s(&mut out, &head.gain);
    put_f32s(&mut out, &head.bias);
    put_f32s(&mut out, &head.unembed);
    match &head.unembed_bias {
        Some(b) => {
            put_u32(&mut out, 1);
            put_f32s(&mut out, b);
        }
        None => put_u32(&mut out, 0),
    }
    Ok(out)
}

pub fn write_head<W: Write>(head: &ModelHead, mut dest: W) -> Result<u64> {
    let bytes = encode_head(head)?;
    dest.write_all(&bytes)?;
    dest.flush()?;
    Ok(bytes.len() as u64)
}

pub fn write_head_file(head: &ModelHead, path: impl AsRef<Path>) -> Result<u64> {
    let path = path.as_ref();
    File::create(path)
        .map_err(Error::from)
        .and_then(|f| write_head(head, BufWriter::new(f)))
        .map_err(|e| e.in_file(path))
}

pub fn decode_head(bytes: &[u8]) -> Result<ModelHead> {
    const FIXED: u64 = 24;
    check_magic(bytes, HEAD_MAGIC)?;
    let found = bytes.len() as u64;
    if found < FIXED {
        return Err(Error::Truncated {
            expected: FIXED,
            found,
        });
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let version = cur.u32();
    if version != FORMAT_VERSION {
        return Err(Error::BadVersion(version));
    }
    let d = cur.u32() as u64;
    let v = cur.u32() as u64;
    let norm_kind = NormKind::from_code(cur.u32())?;
    let norm_epsilon = cur.f32();
    if d == 0 || v == 0 {
        return Err(Error::InvalidDims(format!("head dims d={d}, V={v}")));
    }
    let body = d
        .checked_mul(v)
        .and_then(|dv| dv.checked_add(2 * d))
        .and_then(|x| x.checked_mul(4))
        .ok_or(Error::DimOverflow)?;
    let without_bias = FIXED + body + 4;
    if found < without_bias {
        return Err(Error::Truncated {
            expected: without_bias,
            found,
        });
    }
    let (d, v) = (d as usize, v as usize);
    let gain = cur.f32s(d);
    let bias = cur.f32s(d);
    let unembed = cur.f32s(d * v);
    let has_bias = cur.u32();
    let expected = match has_bias {
        0 => without_bias,
        1 => without_bias + 4 * v as u64,
        other => return Err(Error::InvalidArgument(format!("unembed bias flag {other}"))),
    };
    check_len(expected, found)?;
    let unembed_bias = (has_bias == 1).then(|| cur.f32s(v));
    let head = ModelHead {
        hidden_dim: d,
        vocab_size: v,
        norm_kind,
        norm_epsilon,
        gain,
        bias,
        unembed,
        unembed_bias,
    };
    head.check()?;
    Ok(head)
}

pub fn read_head<R: Read>(mut source: R) -> Result<ModelHead> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    decode_head(&bytes)
}

pub fn read_head_file(path: impl AsRef<Path>) -> Result<ModelHead> {
    let path = path.as_ref();
    std::fs::read(path)
        .map_err(Error::from)
        .and_then(|b| decode_head(&b))
        .map_err(|e| e.in_file(path))
}

/// Parses line-delimited JSON manifest entries, in file order. Blank lines
/// are skipped.
pub fn read_manifest<R: BufRead>(source: R) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    let mut ids = std::collections::HashSet::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| Error::Manifest {
                line: lineno,
                message: e.to_string(),
            })?;
        let field = |key: &str| -> Result<String> {
            match value.get(key) {
                Some(serde_json::Value::String(s)) => Ok(s.clone()),
                Some(_) => Err(Error::Manifest {
                    line: lineno,
                    message: format!("key {key:?} must be a string"),
                }),
                None => Err(Error::Manifest {
                    line: lineno,
                    message: format!("missing key {key:?}"),
                }),
            }
        };
        let label_str = field("label")?;
        let label = Label::parse(&label_str).ok_or(Error::UnknownLabel {
            line: lineno,
            label: label_str,
        })?;
        let text = match value.get("text") {
            None | Some(serde_json::Value::Null) => None,
            Some(_) => Some(field("text")?),
        };
        let entry = ManifestEntry {
            trace: field("trace")?,
            label,
            group: field("group")?,
            id: field("id")?,
            text,
        };
        if !ids.insert(entry.id.clone()) {
            return Err(Error::DuplicateId(entry.id));
        }
        entries.push(entry);
    }
    Ok(entries)
}

/// Reads a manifest file; trace paths resolve against its directory.
pub fn read_manifest_file(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::from(e).in_file(path))?;
    let entries = read_manifest(BufReader::new(file)).map_err(|e| e.in_file(path))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    DatasetManifest::new(entries, base)
}

pub fn write_manifest<W: Write>(entries: &[ManifestEntry], mut dest: W) -> Result<()> {
    for e in entries {
        serde_json::to_writer(&mut dest, e)?;
        dest.write_all(b"\n")?;
    }
    dest.flush()?;
    Ok(())
}

pub fn write_manifest_file(entries: &[ManifestEntry], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    File::create(path)
        .map_err(Error::from)
        .and_then(|f| write_manifest(entries, BufWriter::new(f)))
        .map_err(|e| e.in_file(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::testing::uniform_trace;

    fn small_trace(with_logits: bool) -> SequenceTrace {
        let t = uniform_trace(TraceDims::new(1, 1, 2, 2, 4), 2);
        let logits = with_logits.then(|| (0..8).map(|i| i as f32 * 0.5).collect());
        SequenceTrace::new(
            *t.dims(),
            t.token_ids().to_vec(),
            t.mask().to_vec(),
            t.hidden_states().to_vec(),
            t.attentions().to_vec(),
            logits,
        )
        .unwrap()
    }

    fn identity_head(d: usize, v: usize) -> ModelHead {
        let mut unembed = vec![0.0; d * v];
        for i in 0..d.min(v) {
            unembed[i * v + i] = 1.0;
        }
        ModelHead {
            hidden_dim: d,
            vocab_size: v,
            norm_kind: NormKind::Identity,
            norm_epsilon: 1e-5,
            gain: vec![1.0; d],
            bias: vec![0.0; d],
            unembed,
            unembed_bias: None,
        }
    }

    #[test]
    fn trace_size_matches_layout_arithmetic() {
        // 32 header + 2·4 ids + 2·1 mask + 2·2·2·4 hidden + 1·1·2·2·4 attention
        let mut buf = Vec::new();
        assert_eq!(write_trace(&small_trace(false), &mut buf).unwrap(), 90);
        assert_eq!(buf.len(), 90);
        let mut buf = Vec::new();
        assert_eq!(write_trace(&small_trace(true), &mut buf).unwrap(), 90 + 32);
    }

    #[test]
    fn trace_round_trip_rewrites_identically() {
        let bytes = encode_trace(&small_trace(true)).unwrap();
        let back = read_trace(bytes.as_slice()).unwrap();
        assert_eq!(back, small_trace(true));
        assert_eq!(encode_trace(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupt_traces_are_rejected() {
        let mut bytes = encode_trace(&small_trace(false)).unwrap();
        let header = bytes[..32].to_vec();
        assert!(matches!(
            decode_trace(&header),
            Err(Error::Truncated { .. })
        ));
        assert!(decode_trace(&header)
            .unwrap_err()
            .to_string()
            .starts_with("truncated payload"));

        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(
            decode_trace(&longer),
            Err(Error::TrailingBytes { .. })
        ));

        bytes[3] = b'X';
        let err = decode_trace(&bytes).unwrap_err();
        assert!(err.to_string().starts_with("bad magic"), "{err}");

        let mut bytes = encode_trace(&small_trace(false)).unwrap();
        bytes[4] = 2;
        assert!(matches!(decode_trace(&bytes), Err(Error::BadVersion(2))));

        // Absurd dims must not allocate or panic.
        let mut bytes = encode_trace(&small_trace(false)).unwrap();
        bytes[16..20].copy_from_slice(&u32::MAX.to_le_bytes());
        bytes[20..24].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode_trace(&bytes).is_err());
    }

    #[test]
    fn invalid_trace_is_not_written() {
        let t = uniform_trace(TraceDims::new(1, 1, 2, 2, 4), 1);
        assert!(matches!(encode_trace(&t), Err(Error::InvalidTrace(_))));
    }

    #[test]
    fn head_round_trip_preserves_zeros() {
        let head = identity_head(3, 5);
        let bytes = encode_head(&head).unwrap();
        let back = decode_head(&bytes).unwrap();
        assert_eq!(back, head);
        assert!(back
            .unembed
            .iter()
            .filter(|&&x| x == 0.0)
            .all(|x| x.to_bits() == 0));
        assert_eq!(encode_head(&back).unwrap(), bytes);

        let mut with_bias = head.clone();
        with_bias.unembed_bias = Some(vec![0.5; 5]);
        let bytes = encode_head(&with_bias).unwrap();
        assert_eq!(decode_head(&bytes).unwrap(), with_bias);
    }

    #[test]
    fn unknown_norm_kind() {
        let mut bytes = encode_head(&identity_head(2, 2)).unwrap();
        bytes[16..20].copy_from_slice(&3u32.to_le_bytes());
        let err = decode_head(&bytes).unwrap_err();
        assert_eq!(err.to_string(), "unknown norm kind 3");
    }

    #[test]
    fn head_truncation() {
        let bytes = encode_head(&identity_head(2, 3)).unwrap();
        assert!(matches!(
            decode_head(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn manifest_parsing() {
        let one = r#"{"trace":"a.mtrc","label":"member","group":"wiki","id":"a"}"#;
        let entries = read_manifest(one.as_bytes()).unwrap();
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0].label, Label::Member);
        assert_eq!(entries[0].group, "wiki");

        let bad = r#"{"trace":"a.mtrc","label":"train","group":"wiki","id":"a"}"#;
        let err = read_manifest(bad.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("unknown label"), "{err}");

        let dup = format!("{one}\n{one}\n");
        assert_eq!(
            read_manifest(dup.as_bytes()).unwrap_err().to_string(),
            "duplicate id a"
        );

        let missing = r#"{"trace":"a.mtrc","label":"member","id":"a"}"#;
        assert!(read_manifest(missing.as_bytes())
            .unwrap_err()
            .to_string()
            .contains("missing key"));
    }

    #[test]
    fn manifest_round_trip_keeps_order_and_text() {
        let entries = vec![
            ManifestEntry {
                trace: "b.mtrc".into(),
                label: Label::Neighbor,
                group: "g".into(),
                id: "b".into(),
                text: Some("hello".into()),
            },
            ManifestEntry {
                trace: "a.mtrc".into(),
                label: Label::Nonmember,
                group: "g".into(),
                id: "a".into(),
                text: None,
            },
        ];
        let mut buf = Vec::new();
        write_manifest(&entries, &mut buf).unwrap();
        assert_eq!(read_manifest(buf.as_slice()).unwrap(), entries);
    }
}
