//! RTRC binary encoding.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RTRC" | version u32 | meta_len u32 | meta JSON | n_records u64
//! per record:
//!   id_len u16 | id UTF-8 | correctness u8 | K u32 | n_boundaries u32
//!   per boundary:
//!     kind u8 | step_index u32 | f32[n_layers * dim] | aux_len u32 | aux JSON
//! crc32 u32   (over every preceding byte)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use super::{validate_all, BoundaryKind, BoundaryRecord, Correctness, TraceExample, TraceMeta};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"RTRC";
pub const FORMAT_VERSION: u32 = 1;

/// Validate and write a trace file. Returns the number of bytes written.
pub fn write_traces(meta: &TraceMeta, examples: &[TraceExample], path: &Path) -> Result<u64> {
    let bytes = encode_traces(meta, examples)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(bytes.len() as u64)
}

/// Read, checksum and validate a trace file.
pub fn read_traces(path: &Path) -> Result<(TraceMeta, Vec<TraceExample>)> {
    let bytes = fs::read(path)?;
    decode_traces(&bytes)
}

/// Validate then encode to bytes.
pub fn encode_traces(meta: &TraceMeta, examples: &[TraceExample]) -> Result<Vec<u8>> {
    validate_all(meta, examples)?;
    encode_traces_unchecked(meta, examples)
}

/// Encode without invariant checks. Shapes must still agree with `meta`.
#[doc(hidden)]
pub fn encode_traces_unchecked(meta: &TraceMeta, examples: &[TraceExample]) -> Result<Vec<u8>> {
    let per_boundary = meta.n_layers * meta.dim * 4 + 1 + 4 + 4 + 2;
    let approx: usize = examples
        .iter()
        .map(|e| e.example_id.len() + 11 + e.boundaries.len() * per_boundary)
        .sum();
    let mut out = Vec::with_capacity(64 + approx);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_json(&mut out, &serde_json::to_vec(meta)?)?;
    out.extend_from_slice(&(examples.len() as u64).to_le_bytes());
    for ex in examples {
        let id = ex.example_id.as_bytes();
        let id_len = u16::try_from(id.len())
            .map_err(|_| Error::invalid_example(&ex.example_id, "example_id", "too long"))?;
        out.extend_from_slice(&id_len.to_le_bytes());
        out.extend_from_slice(id);
        out.push(ex.correctness.code());
        out.extend_from_slice(&ex.step_count.to_le_bytes());
        out.extend_from_slice(&(ex.boundaries.len() as u32).to_le_bytes());
        for b in &ex.boundaries {
            if b.activations.dim() != (meta.n_layers, meta.dim) {
                return Err(Error::DimensionMismatch(format!(
                    "example `{}`: activations {:?} vs metadata ({}, {})",
                    ex.example_id,
                    b.activations.dim(),
                    meta.n_layers,
                    meta.dim
                )));
            }
            out.push(b.kind.code());
            out.extend_from_slice(&b.step_index.to_le_bytes());
            for v in b.activations.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            if b.aux.is_empty() {
                put_json(&mut out, b"{}")?;
            } else {
                put_json(&mut out, &serde_json::to_vec(&b.aux)?)?;
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub(crate) fn put_json(out: &mut Vec<u8>, json: &[u8]) -> Result<()> {
    let len = u32::try_from(json.len())
        .map_err(|_| Error::InvalidInput("JSON block exceeds 4 GiB".into()))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(json);
    Ok(())
}

/// Parse, checksum and validate an in-memory trace file.
pub fn decode_traces(bytes: &[u8]) -> Result<(TraceMeta, Vec<TraceExample>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic {
            found: magic,
            expected: MAGIC,
        });
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    if bytes.len() < 12 {
        return Err(Error::Truncated {
            offset: 8,
            needed: 4,
            available: bytes.len() - 8,
        });
    }
    // Everything but the footer is payload.
    let body_end = bytes.len() - 4;
    let mut r = Reader {
        buf: &bytes[..body_end],
        pos: 8,
    };

    let meta_off = r.pos;
    let meta_json = r.len_prefixed()?;
    let meta: TraceMeta = serde_json::from_slice(meta_json).map_err(|e| Error::Malformed {
        what: "metadata JSON",
        offset: meta_off,
        detail: e.to_string(),
    })?;
    meta.validate()?;
    let floats_per_boundary = meta
        .n_layers
        .checked_mul(meta.dim)
        .ok_or_else(|| Error::InvalidMeta("n_layers × dim overflows".into()))?;

    let n_records = r.u64()?;
    // Smallest possible record is 11 bytes; reject counts the payload cannot hold.
    if n_records > (r.remaining() / 11) as u64 {
        return Err(Error::Truncated {
            offset: r.pos,
            needed: (n_records as usize).saturating_mul(11),
            available: r.remaining(),
        });
    }
    let mut examples = Vec::with_capacity(n_records as usize);
    for _ in 0..n_records {
        let id_off = r.pos;
        let id_len = r.u16()? as usize;
        let id = std::str::from_utf8(r.take(id_len)?)
            .map_err(|e| Error::Malformed {
                what: "example_id",
                offset: id_off + 2,
                detail: e.to_string(),
            })?
            .to_owned();
        let c_off = r.pos;
        let c = r.u8()?;
        let correctness = Correctness::from_code(c).ok_or_else(|| Error::Malformed {
            what: "correctness code",
            offset: c_off,
            detail: format!("unknown code {c}"),
        })?;
        let step_count = r.u32()?;
        let n_boundaries = r.u32()? as usize;
        let min_boundary = 1 + 4 + 4 * floats_per_boundary + 4;
        if n_boundaries > r.remaining() / min_boundary {
            return Err(Error::Truncated {
                offset: r.pos,
                needed: n_boundaries.saturating_mul(min_boundary),
                available: r.remaining(),
            });
        }
        let mut boundaries = Vec::with_capacity(n_boundaries);
        for _ in 0..n_boundaries {
            let k_off = r.pos;
            let k = r.u8()?;
            let kind = BoundaryKind::from_code(k).ok_or_else(|| Error::Malformed {
                what: "boundary kind",
                offset: k_off,
                detail: format!("unknown code {k}"),
            })?;
            let step_index = r.u32()?;
            let raw = r.take(4 * floats_per_boundary)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let activations =
                Array2::from_shape_vec((meta.n_layers, meta.dim), data).expect("length checked");
            let aux_off = r.pos;
            let aux_json = r.len_prefixed()?;
            let aux: BTreeMap<String, f64> =
                serde_json::from_slice(aux_json).map_err(|e| Error::Malformed {
                    what: "aux feature JSON",
                    offset: aux_off,
                    detail: e.to_string(),
                })?;
            boundaries.push(BoundaryRecord {
                kind,
                step_index,
                activations,
                aux,
            });
        }
        examples.push(TraceExample {
            example_id: id,
            step_count,
            correctness,
            boundaries,
        });
    }
    if r.remaining() != 0 {
        return Err(Error::Malformed {
            what: "record section",
            offset: r.pos,
            detail: format!("{} trailing bytes before checksum", r.remaining()),
        });
    }
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    validate_all(&meta, &examples)?;
    Ok((meta, examples))
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn position(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated {
                offset: self.pos,
                needed: n,
                available: self.remaining(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub(crate) fn len_prefixed(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::tests::tiny_example;
    use proptest::prelude::*;

    fn meta(l: usize, d: usize) -> TraceMeta {
        TraceMeta::new("model", "data", l, d)
    }

    #[test]
    fn smallest_trace_has_fixed_size() {
        let m = meta(2, 4);
        let ex = tiny_example("x", 1, 2, 4);
        let bytes = encode_traces(&m, std::slice::from_ref(&ex)).unwrap();
        let meta_len = serde_json::to_vec(&m).unwrap().len();
        let boundary = 1 + 4 + 2 * 4 * 4 + 4 + 2;
        let expected = 4 + 4 + 4 + meta_len + 8 + (2 + 1 + 1 + 4 + 4) + 2 * boundary + 4;
        assert_eq!(bytes.len(), expected);
        let (m2, back) = decode_traces(&bytes).unwrap();
        assert_eq!(m2, m);
        assert_eq!(back, vec![ex]);
    }

    #[test]
    fn nan_write_is_rejected() {
        let m = meta(2, 4);
        let mut ex = tiny_example("bad", 2, 2, 4);
        ex.boundaries[0].activations[[0, 0]] = f32::INFINITY;
        let err = encode_traces(&m, &[ex]).unwrap_err().to_string();
        assert!(err.contains("boundary[step 1]"), "{err}");
    }

    #[test]
    fn truncation_reports_offset() {
        let m = meta(2, 4);
        let bytes = encode_traces(&m, &[tiny_example("a", 3, 2, 4)]).unwrap();
        let cut = &bytes[..bytes.len() - 30];
        match decode_traces(cut) {
            Err(Error::Truncated { offset, .. }) => assert!(offset > 0),
            other => panic!("expected truncation, got {other:?}"),
        }
        assert!(matches!(
            decode_traces(&bytes[..6]),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn bad_magic_and_version() {
        let m = meta(2, 4);
        let mut bytes = encode_traces(&m, &[tiny_example("a", 1, 2, 4)]).unwrap();
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(decode_traces(&wrong), Err(Error::BadMagic { .. })));
        bytes[4] = 9;
        assert!(matches!(
            decode_traces(&bytes),
            Err(Error::UnsupportedVersion(9))
        ));
    }

    #[test]
    fn non_contiguous_steps_fail_validation_on_read() {
        let m = meta(2, 4);
        let mut ex = tiny_example("gap", 3, 2, 4);
        ex.boundaries.remove(1);
        ex.step_count = 2;
        let bytes = encode_traces_unchecked(&m, &[ex]).unwrap();
        let err = decode_traces(&bytes).unwrap_err().to_string();
        assert!(err.contains("non-contiguous step indices"), "{err}");
    }

    #[test]
    fn aux_features_round_trip() {
        let m = meta(1, 3);
        let mut ex = tiny_example("aux", 2, 1, 3);
        ex.boundaries[1].aux.insert("entropy".into(), 0.125);
        ex.boundaries[1].aux.insert("answer_rank".into(), 3.0);
        let bytes = encode_traces(&m, std::slice::from_ref(&ex)).unwrap();
        assert_eq!(decode_traces(&bytes).unwrap().1[0], ex);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.rtrc");
        let m = meta(3, 5);
        let exs: Vec<_> = (1..=4)
            .map(|k| tiny_example(&format!("e{k}"), k, 3, 5))
            .collect();
        let n = write_traces(&m, &exs, &path).unwrap();
        assert_eq!(n, std::fs::metadata(&path).unwrap().len());
        let (m2, back) = read_traces(&path).unwrap();
        assert_eq!((m2, back), (m, exs));
    }

    fn arb_example(l: usize, d: usize) -> impl Strategy<Value = TraceExample> {
        (
            1u32..5,
            any::<bool>(),
            proptest::collection::vec(any::<f32>(), l * d * 6),
        )
            .prop_map(move |(k, has_term, pool)| {
                let mut it = pool
                    .into_iter()
                    .map(|v| if v.is_finite() { v } else { 0.5 })
                    .cycle();
                let mut next = || Array2::from_shape_fn((l, d), |_| it.next().unwrap_or(0.0));
                let mut boundaries: Vec<_> =
                    (1..=k).map(|s| BoundaryRecord::step(s, next())).collect();
                if has_term {
                    boundaries.push(BoundaryRecord::term(next()));
                }
                TraceExample {
                    example_id: format!("p{k}"),
                    step_count: k,
                    correctness: if has_term {
                        Correctness::Correct
                    } else {
                        Correctness::Unknown
                    },
                    boundaries,
                }
            })
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(exs in proptest::collection::vec(arb_example(2, 3), 0..6)) {
            let m = meta(2, 3);
            let bytes = encode_traces(&m, &exs).unwrap();
            let (_, back) = decode_traces(&bytes).unwrap();
            prop_assert_eq!(back.len(), exs.len());
            for (a, b) in exs.iter().zip(&back) {
                for (ba, bb) in a.boundaries.iter().zip(&b.boundaries) {
                    let bits_a: Vec<u32> = ba.activations.iter().map(|v| v.to_bits()).collect();
                    let bits_b: Vec<u32> = bb.activations.iter().map(|v| v.to_bits()).collect();
                    prop_assert_eq!(bits_a, bits_b);
                }
            }
        }

        #[test]
        fn single_byte_corruption_is_detected(pos in 0usize..10_000, flip in 1u8..=255) {
            let m = meta(2, 3);
            let exs: Vec<_> = (1..=3).map(|k| tiny_example(&format!("e{k}"), k, 2, 3)).collect();
            let mut bytes = encode_traces(&m, &exs).unwrap();
            let i = pos % bytes.len();
            bytes[i] ^= flip;
            prop_assert!(decode_traces(&bytes).is_err());
        }
    }
}
