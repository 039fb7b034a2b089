//! On-disk formats for embedding sets.
//!
//! EMB1 binary layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "EMB1"
//! version u32      1
//! n       u64      row count
//! d       u32      feature dimension
//! d_in    u32      raw-input dimension, 0 when absent
//! dtype   u8       0 = f32, 1 = f64
//! flags   u8       reserved, 0
//! features    n*d values, row-major
//! raw_inputs  n*d_in values, row-major (present iff d_in > 0)
//! meta_len    u64
//! metadata    UTF-8 JSON array of n objects {"id","modality","sample_id"[,"tag"]}
//! ```
//!
//! f32 payloads are upcast to f64 on load; the writer always emits f64.
//! The optional per-object `"tag"` key carries the set's source tag so a
//! round trip preserves it; files without it load with an empty tag.
//!
//! CSV layout: header `id,modality,sample_id,f0..f{d-1}[,x0..x{d_in-1}]`,
//! one row per sample. Floats are printed in shortest round-trip form, so
//! values survive a round trip exactly; the source tag is not stored.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Modality;

use super::{EmbeddingSet, SampleMeta};

const MAGIC: &[u8; 4] = b"EMB1";
const VERSION: u32 = 1;

/// Supported serialization formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileFormat {
    Emb1,
    Csv,
}

#[derive(Serialize, Deserialize)]
struct MetaRecord {
    id: usize,
    modality: String,
    sample_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tag: Option<String>,
}

/// Loads and validates an embedding set from `path` in the given format.
pub fn load_embedding_set(path: impl AsRef<Path>, format: FileFormat) -> Result<EmbeddingSet> {
    let file = File::open(path.as_ref())?;
    let mut reader = BufReader::new(file);
    match format {
        FileFormat::Emb1 => read_emb1(&mut reader),
        FileFormat::Csv => read_csv(&mut reader),
    }
}

/// Writes an embedding set to `path` in the given format.
pub fn save_embedding_set(
    set: &EmbeddingSet,
    path: impl AsRef<Path>,
    format: FileFormat,
) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut writer = BufWriter::new(file);
    match format {
        FileFormat::Emb1 => write_emb1(set, &mut writer)?,
        FileFormat::Csv => write_csv(set, &mut writer)?,
    }
    writer.flush()?;
    Ok(())
}

fn write_emb1<W: Write>(set: &EmbeddingSet, w: &mut W) -> Result<()> {
    let n = set.len() as u64;
    let d = set.dim() as u32;
    let d_in = set.input_dim() as u32;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&n.to_le_bytes())?;
    w.write_all(&d.to_le_bytes())?;
    w.write_all(&d_in.to_le_bytes())?;
    w.write_all(&[1u8, 0u8])?; // dtype = f64, flags reserved
    for v in set.features().iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    if let Some(raw) = set.raw_inputs() {
        for v in raw.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    let tag = set.source_tag();
    let records: Vec<MetaRecord> = set
        .meta()
        .iter()
        .map(|m| MetaRecord {
            id: m.identity_id,
            modality: m.modality.as_str().to_string(),
            sample_id: m.sample_id,
            tag: if tag.is_empty() { None } else { Some(tag.to_string()) },
        })
        .collect();
    let json = serde_json::to_vec(&records)
        .map_err(|e| Error::Format(format!("metadata encoding failed: {e}")))?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    Ok(())
}

fn read_exact_or_format<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Format(format!("truncated file while reading {what}")))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or_format(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact_or_format(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

fn read_matrix<R: Read>(r: &mut R, n: usize, d: usize, dtype: u8, what: &str) -> Result<Array2<f64>> {
    // No up-front capacity from header-declared sizes: a corrupt header must
    // fail at read_exact, not in the allocator.
    let mut values = Vec::new();
    match dtype {
        0 => {
            let mut b = [0u8; 4];
            for _ in 0..n * d {
                read_exact_or_format(r, &mut b, what)?;
                values.push(f64::from(f32::from_le_bytes(b)));
            }
        }
        1 => {
            let mut b = [0u8; 8];
            for _ in 0..n * d {
                read_exact_or_format(r, &mut b, what)?;
                values.push(f64::from_le_bytes(b));
            }
        }
        other => return Err(Error::Format(format!("unknown dtype code {other}"))),
    }
    Array2::from_shape_vec((n, d), values)
        .map_err(|e| Error::Format(format!("bad {what} shape: {e}")))
}

fn read_emb1<R: Read>(r: &mut R) -> Result<EmbeddingSet> {
    let mut magic = [0u8; 4];
    read_exact_or_format(r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic bytes {magic:?}, expected \"EMB1\"")));
    }
    let version = read_u32(r, "version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let n = read_u64(r, "row count")? as usize;
    let d = read_u32(r, "feature dimension")? as usize;
    let d_in = read_u32(r, "input dimension")? as usize;
    let mut dtype_flags = [0u8; 2];
    read_exact_or_format(r, &mut dtype_flags, "dtype/flags")?;
    let dtype = dtype_flags[0];

    let features = read_matrix(r, n, d, dtype, "features")?;
    let raw_inputs =
        if d_in > 0 { Some(read_matrix(r, n, d_in, dtype, "raw inputs")?) } else { None };

    let meta_len = read_u64(r, "metadata length")?;
    let mut json = Vec::new();
    r.take(meta_len).read_to_end(&mut json).map_err(|e| Error::Format(e.to_string()))?;
    if json.len() as u64 != meta_len {
        return Err(Error::Format(format!(
            "metadata declared {meta_len} bytes but only {} present",
            json.len()
        )));
    }
    let records: Vec<MetaRecord> = serde_json::from_slice(&json)
        .map_err(|e| Error::Format(format!("metadata JSON parse failed: {e}")))?;
    if records.len() != n {
        return Err(Error::Data(format!(
            "metadata holds {} records but header declares n={n}",
            records.len()
        )));
    }
    let tag = records.iter().find_map(|rec| rec.tag.clone()).unwrap_or_default();
    let meta = records
        .iter()
        .map(|rec| {
            Ok(SampleMeta {
                identity_id: rec.id,
                modality: rec.modality.parse()?,
                sample_id: rec.sample_id,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EmbeddingSet::new(features, meta, raw_inputs, tag)
}

fn write_csv<W: Write>(set: &EmbeddingSet, w: &mut W) -> Result<()> {
    let d = set.dim();
    let d_in = set.input_dim();
    let mut header = String::from("id,modality,sample_id");
    for j in 0..d {
        header.push_str(&format!(",f{j}"));
    }
    for j in 0..d_in {
        header.push_str(&format!(",x{j}"));
    }
    writeln!(w, "{header}")?;
    for (i, m) in set.meta().iter().enumerate() {
        let mut line = format!("{},{},{}", m.identity_id, m.modality, m.sample_id);
        for v in set.features().row(i).iter() {
            line.push(',');
            line.push_str(&v.to_string());
        }
        if let Some(raw) = set.raw_inputs() {
            for v in raw.row(i).iter() {
                line.push(',');
                line.push_str(&v.to_string());
            }
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

fn read_csv<R: Read>(r: &mut R) -> Result<EmbeddingSet> {
    let mut text = String::new();
    r.read_to_string(&mut text).map_err(|_| Error::Format("file is not valid UTF-8".into()))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Format("missing CSV header".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "id" || cols[1] != "modality" || cols[2] != "sample_id" {
        return Err(Error::Format(format!("bad CSV header {header:?}")));
    }
    let d = cols[3..].iter().take_while(|c| c.starts_with('f')).count();
    let d_in = cols[3 + d..].len();
    for (j, c) in cols[3..3 + d].iter().enumerate() {
        if **c != format!("f{j}") {
            return Err(Error::Format(format!("feature column {j} is named {c:?}")));
        }
    }
    for (j, c) in cols[3 + d..].iter().enumerate() {
        if **c != format!("x{j}") {
            return Err(Error::Format(format!("input column {j} is named {c:?}")));
        }
    }

    let mut meta = Vec::new();
    let mut feat_values = Vec::new();
    let mut raw_values = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::Data(format!(
                "row {} has {} fields, expected {}",
                lineno + 2,
                fields.len(),
                cols.len()
            )));
        }
        let parse_usize = |s: &str, what: &str| {
            s.parse::<usize>().map_err(|_| Error::Data(format!("bad {what} value {s:?}")))
        };
        let identity_id = parse_usize(fields[0], "id")?;
        let modality: Modality = fields[1].parse()?;
        let sample_id = parse_usize(fields[2], "sample_id")?;
        meta.push(SampleMeta { identity_id, modality, sample_id });
        for field in &fields[3..] {
            let v: f64 =
                field.parse().map_err(|_| Error::Data(format!("bad float value {field:?}")))?;
            if !v.is_finite() {
                return Err(Error::Data(format!("non-finite value {field:?}")));
            }
        }
        for field in &fields[3..3 + d] {
            feat_values.push(field.parse::<f64>().unwrap());
        }
        for field in &fields[3 + d..] {
            raw_values.push(field.parse::<f64>().unwrap());
        }
    }
    let n = meta.len();
    let features = Array2::from_shape_vec((n, d), feat_values)
        .map_err(|e| Error::Format(format!("bad feature shape: {e}")))?;
    let raw_inputs = if d_in > 0 {
        Some(
            Array2::from_shape_vec((n, d_in), raw_values)
                .map_err(|e| Error::Format(format!("bad raw input shape: {e}")))?,
        )
    } else {
        None
    };
    EmbeddingSet::new(features, meta, raw_inputs, "")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use std::io::Cursor;

    fn sample_set() -> EmbeddingSet {
        let feats = arr2(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, 0.0]]);
        let meta = vec![
            SampleMeta { identity_id: 0, modality: Modality::Rgb, sample_id: 0 },
            SampleMeta { identity_id: 0, modality: Modality::Ir, sample_id: 1 },
            SampleMeta { identity_id: 1, modality: Modality::Sketch, sample_id: 2 },
            SampleMeta { identity_id: 1, modality: Modality::Text, sample_id: 3 },
        ];
        EmbeddingSet::new(feats, meta, None, "cloud").unwrap()
    }

    fn emb1_round_trip(set: &EmbeddingSet) -> EmbeddingSet {
        let mut buf = Vec::new();
        write_emb1(set, &mut buf).unwrap();
        read_emb1(&mut Cursor::new(buf)).unwrap()
    }

    #[test]
    fn emb1_round_trip_is_bit_exact() {
        let set = sample_set();
        let back = emb1_round_trip(&set);
        assert_eq!(set, back);
    }

    #[test]
    fn emb1_preserves_raw_inputs_and_tag() {
        let feats = arr2(&[[1.0, 2.0], [3.0, 4.0]]);
        let raw = arr2(&[[0.5, -0.25, 0.125], [9.0, 8.0, 7.0]]);
        let meta = vec![
            SampleMeta { identity_id: 0, modality: Modality::Rgb, sample_id: 0 },
            SampleMeta { identity_id: 0, modality: Modality::Text, sample_id: 1 },
        ];
        let set = EmbeddingSet::new(feats, meta, Some(raw), "synthetic").unwrap();
        let back = emb1_round_trip(&set);
        assert_eq!(set, back);
        assert_eq!(back.source_tag(), "synthetic");
    }

    #[test]
    fn emb1_empty_set_round_trips() {
        let set = EmbeddingSet::new(Array2::zeros((0, 3)), vec![], None, "").unwrap();
        let back = emb1_round_trip(&set);
        assert_eq!(set, back);
    }

    #[test]
    fn emb1_rejects_bad_magic() {
        let mut buf = Vec::new();
        write_emb1(&sample_set(), &mut buf).unwrap();
        buf[0] = b'X';
        let err = read_emb1(&mut Cursor::new(buf));
        assert!(matches!(err, Err(Error::Format(_))));
    }

    #[test]
    fn emb1_rejects_missing_feature_rows() {
        // Declare n = 10 in the header of a 4-row file.
        let mut buf = Vec::new();
        write_emb1(&sample_set(), &mut buf).unwrap();
        buf[8..16].copy_from_slice(&10u64.to_le_bytes());
        let err = read_emb1(&mut Cursor::new(buf));
        assert!(err.is_err());
    }

    #[test]
    fn emb1_rejects_metadata_count_mismatch() {
        let set = sample_set();
        let mut buf = Vec::new();
        write_emb1(&set, &mut buf).unwrap();
        // Rewrite the metadata segment with one record dropped.
        let records = vec![MetaRecord {
            id: 0,
            modality: "rgb".into(),
            sample_id: 0,
            tag: None,
        }];
        let json = serde_json::to_vec(&records).unwrap();
        let meta_len_pos = 4 + 4 + 8 + 4 + 4 + 2 + set.len() * set.dim() * 8;
        buf.truncate(meta_len_pos);
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        let err = read_emb1(&mut Cursor::new(buf));
        assert!(matches!(err, Err(Error::Data(_))));
    }

    #[test]
    fn emb1_loads_f32_payload_with_upcast() {
        // Hand-build an f32 file: n=1, d=2, no raw inputs.
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&1u64.to_le_bytes());
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.extend_from_slice(&0u32.to_le_bytes());
        buf.push(0); // dtype f32
        buf.push(0);
        buf.extend_from_slice(&1.5f32.to_le_bytes());
        buf.extend_from_slice(&(-0.25f32).to_le_bytes());
        let json = br#"[{"id":0,"modality":"rgb","sample_id":0}]"#;
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(json);
        let set = read_emb1(&mut Cursor::new(buf)).unwrap();
        assert_eq!(set.features()[[0, 0]], 1.5);
        assert_eq!(set.features()[[0, 1]], -0.25);
        assert_eq!(set.source_tag(), "");
    }

    #[test]
    fn csv_round_trip_is_value_exact() {
        let feats = arr2(&[[0.1, 2.0f64.sqrt()], [std::f64::consts::PI, -1e-300]]);
        let raw = arr2(&[[1.0 / 3.0], [7.0e200]]);
        let meta = vec![
            SampleMeta { identity_id: 0, modality: Modality::Rgb, sample_id: 0 },
            SampleMeta { identity_id: 0, modality: Modality::Ir, sample_id: 1 },
        ];
        let set = EmbeddingSet::new(feats, meta, Some(raw), "").unwrap();
        let mut buf = Vec::new();
        write_csv(&set, &mut buf).unwrap();
        let back = read_csv(&mut Cursor::new(buf)).unwrap();
        assert_eq!(set, back);
    }

    #[test]
    fn csv_header_matches_contract() {
        let set = sample_set();
        let mut buf = Vec::new();
        write_csv(&set, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("id,modality,sample_id,f0,f1\n"));
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn csv_rejects_bad_header() {
        let err = read_csv(&mut Cursor::new(b"pid,mod,sid,f0\n".to_vec()));
        assert!(matches!(err, Err(Error::Format(_))));
    }

    #[test]
    fn csv_rejects_non_finite_value() {
        let err = read_csv(&mut Cursor::new(b"id,modality,sample_id,f0\n0,rgb,0,NaN\n".to_vec()));
        assert!(matches!(err, Err(Error::Data(_))));
    }
}
