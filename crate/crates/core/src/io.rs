//! File formats for score vectors, block scores, projection reports and kept
//! sets. Every file carries the tool version and contract fingerprint.

use std::io::{BufRead, Read, Write};

use serde::Serialize;

use crate::contract::{KeptSet, Provenance, ScoreVector, StageTag};
use crate::error::FormatError;
use crate::projection::ProjectionReport;
use crate::value::BlockScoreVector;
use crate::TOOL_VERSION;

const BINARY_MAGIC: &str = "kvss-scores";

fn stage_name(tag: StageTag) -> String {
    match serde_json::to_value(tag) {
        Ok(serde_json::Value::String(s)) => s,
        _ => unreachable!("stage tags serialize as strings"),
    }
}

fn parse_stage(s: &str) -> Result<StageTag, FormatError> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| FormatError::Parse(format!("unknown stage tag {s:?}")))
}

fn header_fields(s: &ScoreVector) -> String {
    format!(
        "version={TOOL_VERSION} fingerprint={} stage={} reserved_tail={}",
        s.contract_fingerprint,
        stage_name(s.stage_tag),
        s.reserved_tail
    )
}

struct Header {
    fingerprint: String,
    stage: StageTag,
    reserved_tail: usize,
    len: Option<usize>,
}

fn parse_header(line: &str) -> Result<Header, FormatError> {
    let mut fingerprint = None;
    let mut stage = None;
    let mut reserved_tail = None;
    let mut len = None;
    for field in line.split_whitespace() {
        let Some((key, value)) = field.split_once('=') else { continue };
        let bad = || FormatError::Parse(format!("bad header field {field:?}"));
        match key {
            "fingerprint" => fingerprint = Some(value.to_string()),
            "stage" => stage = Some(parse_stage(value)?),
            "reserved_tail" => reserved_tail = Some(value.parse().map_err(|_| bad())?),
            "len" => len = Some(value.parse().map_err(|_| bad())?),
            _ => {}
        }
    }
    match (fingerprint, stage, reserved_tail) {
        (Some(fingerprint), Some(stage), Some(reserved_tail)) => Ok(Header {
            fingerprint,
            stage,
            reserved_tail,
            len,
        }),
        _ => Err(FormatError::Parse(format!("score header is missing fields: {line:?}"))),
    }
}

/// `# kvss ...` header line followed by `index,score` rows.
pub fn write_scores_csv<W: Write>(mut w: W, s: &ScoreVector) -> Result<(), FormatError> {
    writeln!(w, "# kvss {}", header_fields(s))?;
    writeln!(w, "index,score")?;
    for (i, v) in s.values.iter().enumerate() {
        writeln!(w, "{i},{v}")?;
    }
    Ok(())
}

pub fn read_scores_csv<R: Read>(r: R) -> Result<ScoreVector, FormatError> {
    let mut reader = std::io::BufReader::new(r);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    let header = parse_header(first.trim_start_matches('#'))?;
    let mut rdr = csv::Reader::from_reader(reader);
    let mut values = Vec::new();
    for (row, rec) in rdr.deserialize::<(usize, f64)>().enumerate() {
        let (i, v) = rec?;
        if i != row {
            return Err(FormatError::Parse(format!("expected index {row}, found {i}")));
        }
        values.push(v);
    }
    Ok(ScoreVector::new(values, header.stage, header.reserved_tail, header.fingerprint)?)
}

/// Header line, then `len` little-endian f64 values.
pub fn write_scores_binary<W: Write>(mut w: W, s: &ScoreVector) -> Result<(), FormatError> {
    writeln!(w, "{BINARY_MAGIC} {} len={}", header_fields(s), s.len())?;
    for v in &s.values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_scores_binary<R: Read>(r: R) -> Result<ScoreVector, FormatError> {
    let mut reader = std::io::BufReader::new(r);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    if !first.starts_with(BINARY_MAGIC) {
        return Err(FormatError::Parse("missing binary score header".into()));
    }
    let header = parse_header(&first)?;
    let len = header.len.ok_or_else(|| FormatError::Parse("binary header lacks len".into()))?;
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    if bytes.len() != 8 * len {
        return Err(FormatError::Parse(format!("expected {} payload bytes, found {}", 8 * len, bytes.len())));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok(ScoreVector::new(values, header.stage, header.reserved_tail, header.fingerprint)?)
}

/// `block_start,block_end,score[,D_1..D_M]`.
pub fn write_block_scores_csv<W: Write>(mut w: W, b: &BlockScoreVector) -> Result<(), FormatError> {
    writeln!(
        w,
        "# kvss version={TOOL_VERSION} fingerprint={} variant={} eps_a={} eps_mu={}",
        b.contract_fingerprint,
        b.variant.label(),
        b.eps_a,
        b.eps_mu
    )?;
    let groups = b.per_group.as_ref().map_or(0, |g| g.len());
    let mut head = String::from("block_start,block_end,score");
    for m in 1..=groups {
        head.push_str(&format!(",D_{m}"));
    }
    writeln!(w, "{head}")?;
    for (n, (range, score)) in b.blocks.iter().zip(&b.scores).enumerate() {
        write!(w, "{},{},{score}", range.start, range.end)?;
        if let Some(per_group) = &b.per_group {
            for g in per_group {
                write!(w, ",{}", g[n])?;
            }
        }
        writeln!(w)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    tool_version: &'a str,
    contract_fingerprint: &'a str,
    #[serde(flatten)]
    body: &'a T,
}

/// Pretty JSON with version and fingerprint at the top level.
pub fn stamped_json<T: Serialize>(fingerprint: &str, body: &T) -> Result<String, FormatError> {
    let mut s = serde_json::to_string_pretty(&Stamped {
        tool_version: TOOL_VERSION,
        contract_fingerprint: fingerprint,
        body,
    })?;
    s.push('\n');
    Ok(s)
}

pub fn report_json(report: &ProjectionReport) -> Result<String, FormatError> {
    stamped_json(&report.kept.contract_fingerprint, report)
}

#[derive(Serialize)]
struct KeptBody<'a> {
    k: usize,
    indices: &'a [usize],
    provenance: &'a [Provenance],
}

/// Minimal kept-set document: identical selections give identical bytes.
pub fn kept_json(kept: &KeptSet, k: usize) -> Result<String, FormatError> {
    stamped_json(
        &kept.contract_fingerprint,
        &KeptBody {
            k,
            indices: &kept.indices,
            provenance: &kept.provenance,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ScoreVector {
        ScoreVector::new(vec![0.1, -2.5, 1e-300, 3.0], StageTag::Combined, 1, "00ff00ff00ff00ff").unwrap()
    }

    #[test]
    fn csv_round_trip() {
        let mut buf = Vec::new();
        write_scores_csv(&mut buf, &sample()).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("# kvss version="));
        assert_eq!(read_scores_csv(buf.as_slice()).unwrap(), sample());
    }

    #[test]
    fn binary_round_trip() {
        let mut buf = Vec::new();
        write_scores_binary(&mut buf, &sample()).unwrap();
        assert_eq!(read_scores_binary(buf.as_slice()).unwrap(), sample());
        buf.pop();
        assert!(matches!(read_scores_binary(buf.as_slice()), Err(FormatError::Parse(_))));
    }

    #[test]
    fn kept_json_is_stamped() {
        let kept = KeptSet::from_entries([(3, Provenance::Block)], "abc");
        let text = kept_json(&kept, 1).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["contract_fingerprint"], "abc");
        assert_eq!(v["tool_version"], TOOL_VERSION);
        assert_eq!(v["indices"][0], 3);
    }
}
