//! Logprob dump replay: loading per-position top-k logprobs recorded
//! from two models and replaying them as policies.
//!
//! Dump format is newline-delimited JSON. The first line is a header:
//!
//! ```text
//! {"meta": {"vocab_size": 8, "a_name": "base", "b_name": "rl", "top_p": 0.7, "temperature": 1.0}}
//! ```
//!
//! and every following line is one token position:
//!
//! ```text
//! {"seq_id": "q0-s0", "pos": 0, "sampled": 3, "a_top": [[3, -0.1], [1, -2.5]], "b_top": [[3, -0.2], [0, -2.0]]}
//! ```
//!
//! Logprobs are natural-log, non-increasing within a record, and each
//! side's exponentiated sum must not exceed 1 + 1e-6. Positions are
//! contiguous from 0 within each `seq_id`. Numeric fields may be written
//! as integers or floats.
//!
//! Replay policies are defined only on the recorded trajectories: a query
//! off the recorded path is an error rather than a fallback, since the
//! analyses condition on the recorded reference path and a silent
//! fallback would corrupt statistics.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use crate::accum::CompensatedSum;
use crate::dist::{Distribution, TokenId};

use super::{Policy, PolicyError, Prefix, Trajectory};

pub const EXP_SUM_SLACK: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("io error reading dump: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: schema violation in field {field:?}: {message}")]
    Schema {
        line: usize,
        field: String,
        message: String,
    },
}

impl DumpError {
    fn parse(line: usize, message: impl Into<String>) -> Self {
        DumpError::Parse {
            line,
            message: message.into(),
        }
    }

    fn schema(line: usize, field: &str, message: impl Into<String>) -> Self {
        DumpError::Schema {
            line,
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DumpMeta {
    pub vocab_size: u32,
    pub a_name: String,
    pub b_name: String,
    pub top_p: f64,
    pub temperature: f64,
}

/// One recorded token position.
#[derive(Debug, Clone, PartialEq)]
pub struct DumpRecord {
    pub pos: usize,
    pub sampled: TokenId,
    pub a_top: Vec<(TokenId, f64)>,
    pub b_top: Vec<(TokenId, f64)>,
}

/// Which recorded model a replay policy serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplaySide {
    A,
    B,
}

/// A validated logprob dump, grouped by sequence id.
#[derive(Debug, Clone)]
pub struct LogprobDump {
    pub meta: DumpMeta,
    sequences: BTreeMap<String, Vec<DumpRecord>>,
}

fn field<'v>(v: &'v Value, name: &str, line: usize) -> Result<&'v Value, DumpError> {
    v.get(name)
        .ok_or_else(|| DumpError::parse(line, format!("missing field {name:?}")))
}

fn as_f64(v: &Value, name: &str, line: usize) -> Result<f64, DumpError> {
    v.as_f64()
        .ok_or_else(|| DumpError::parse(line, format!("field {name:?} is not a number")))
}

/// Accepts both integer and float spellings of a non-negative integer.
fn as_index(v: &Value, name: &str, line: usize) -> Result<u64, DumpError> {
    if let Some(u) = v.as_u64() {
        return Ok(u);
    }
    if let Some(f) = v.as_f64() {
        if f >= 0.0 && f.fract() == 0.0 && f <= u64::MAX as f64 {
            return Ok(f as u64);
        }
    }
    Err(DumpError::parse(
        line,
        format!("field {name:?} is not a non-negative integer"),
    ))
}

fn as_str<'v>(v: &'v Value, name: &str, line: usize) -> Result<&'v str, DumpError> {
    v.as_str()
        .ok_or_else(|| DumpError::parse(line, format!("field {name:?} is not a string")))
}

fn parse_top(
    v: &Value,
    name: &str,
    line: usize,
    vocab_size: u32,
) -> Result<Vec<(TokenId, f64)>, DumpError> {
    let arr = v
        .as_array()
        .ok_or_else(|| DumpError::parse(line, format!("field {name:?} is not an array")))?;
    if arr.is_empty() {
        return Err(DumpError::schema(line, name, "top-k list is empty"));
    }
    let mut out = Vec::with_capacity(arr.len());
    for entry in arr {
        let pair = entry.as_array().filter(|p| p.len() == 2).ok_or_else(|| {
            DumpError::parse(
                line,
                format!("entries of {name:?} must be [token, logprob]"),
            )
        })?;
        let token = as_index(&pair[0], name, line)?;
        let logprob = as_f64(&pair[1], name, line)?;
        if token >= vocab_size as u64 {
            return Err(DumpError::schema(
                line,
                name,
                format!("token {token} out of range for vocab_size {vocab_size}"),
            ));
        }
        if !logprob.is_finite() || logprob > 0.0 {
            return Err(DumpError::schema(
                line,
                name,
                format!("logprob {logprob} is not a finite non-positive number"),
            ));
        }
        out.push((TokenId(token as u32), logprob));
    }
    for pair in out.windows(2) {
        if pair[1].1 > pair[0].1 {
            return Err(DumpError::schema(
                line,
                name,
                format!(
                    "logprobs must be non-increasing: {} follows {}",
                    pair[1].1, pair[0].1
                ),
            ));
        }
    }
    let mut seen: Vec<TokenId> = out.iter().map(|&(t, _)| t).collect();
    seen.sort_unstable();
    for w in seen.windows(2) {
        if w[0] == w[1] {
            return Err(DumpError::schema(
                line,
                name,
                format!("duplicate token {} in top-k list", w[0]),
            ));
        }
    }
    let mut exp_sum = CompensatedSum::new();
    for &(_, lp) in &out {
        exp_sum.add(lp.exp());
    }
    let exp_sum = exp_sum.value();
    if exp_sum > 1.0 + EXP_SUM_SLACK {
        return Err(DumpError::schema(
            line,
            name,
            format!("exponentiated logprobs sum to {exp_sum} > 1 + {EXP_SUM_SLACK}"),
        ));
    }
    Ok(out)
}

/// Parses and validates a dump from a buffered reader.
pub fn read_dump(reader: impl BufRead) -> Result<LogprobDump, DumpError> {
    let mut lines = reader.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| DumpError::parse(1, "empty dump: missing header line"))?;
    let header: Value = serde_json::from_str(&header?)
        .map_err(|e| DumpError::parse(1, format!("invalid JSON: {e}")))?;
    let meta_v = field(&header, "meta", 1)?;
    let vocab_size = as_index(field(meta_v, "vocab_size", 1)?, "vocab_size", 1)?;
    if vocab_size == 0 || vocab_size > u32::MAX as u64 {
        return Err(DumpError::schema(
            1,
            "vocab_size",
            format!("vocab_size {vocab_size} out of range"),
        ));
    }
    let vocab_size = vocab_size as u32;
    let meta = DumpMeta {
        vocab_size,
        a_name: as_str(field(meta_v, "a_name", 1)?, "a_name", 1)?.to_string(),
        b_name: as_str(field(meta_v, "b_name", 1)?, "b_name", 1)?.to_string(),
        top_p: as_f64(field(meta_v, "top_p", 1)?, "top_p", 1)?,
        temperature: as_f64(field(meta_v, "temperature", 1)?, "temperature", 1)?,
    };

    let mut sequences: BTreeMap<String, Vec<DumpRecord>> = BTreeMap::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line)
            .map_err(|e| DumpError::parse(line_no, format!("invalid JSON: {e}")))?;
        let seq_id = as_str(field(&v, "seq_id", line_no)?, "seq_id", line_no)?.to_string();
        let pos = as_index(field(&v, "pos", line_no)?, "pos", line_no)? as usize;
        let sampled = as_index(field(&v, "sampled", line_no)?, "sampled", line_no)?;
        if sampled >= vocab_size as u64 {
            return Err(DumpError::schema(
                line_no,
                "sampled",
                format!("token {sampled} out of range for vocab_size {vocab_size}"),
            ));
        }
        let a_top = parse_top(field(&v, "a_top", line_no)?, "a_top", line_no, vocab_size)?;
        let b_top = parse_top(field(&v, "b_top", line_no)?, "b_top", line_no, vocab_size)?;
        let records = sequences.entry(seq_id).or_default();
        if pos != records.len() {
            return Err(DumpError::schema(
                line_no,
                "pos",
                format!(
                    "positions must be contiguous from 0: expected {} got {pos}",
                    records.len()
                ),
            ));
        }
        records.push(DumpRecord {
            pos,
            sampled: TokenId(sampled as u32),
            a_top,
            b_top,
        });
    }
    Ok(LogprobDump { meta, sequences })
}

/// Loads and validates a dump file.
pub fn load_dump(path: impl AsRef<Path>) -> Result<LogprobDump, DumpError> {
    let file = std::fs::File::open(path)?;
    read_dump(std::io::BufReader::new(file))
}

impl LogprobDump {
    pub fn sequence_ids(&self) -> impl Iterator<Item = &str> {
        self.sequences.keys().map(String::as_str)
    }

    pub fn records(&self, seq_id: &str) -> Option<&[DumpRecord]> {
        self.sequences.get(seq_id).map(Vec::as_slice)
    }

    pub fn num_sequences(&self) -> usize {
        self.sequences.len()
    }

    pub fn num_positions(&self) -> usize {
        self.sequences.values().map(Vec::len).sum()
    }

    /// Recorded trajectories (sampled-token paths), sorted by sequence id.
    pub fn trajectories(&self) -> Vec<Trajectory> {
        self.sequences
            .iter()
            .map(|(seq_id, records)| {
                Trajectory::new(seq_id.clone(), records.iter().map(|r| r.sampled).collect())
            })
            .collect()
    }

    /// Replay policies for the two recorded models, in `(a, b)` order.
    pub fn as_policies(&self) -> (ReplayPolicy<'_>, ReplayPolicy<'_>) {
        (
            ReplayPolicy {
                dump: self,
                side: ReplaySide::A,
            },
            ReplayPolicy {
                dump: self,
                side: ReplaySide::B,
            },
        )
    }

    /// Writes a dump in the on-disk format. Sequences are emitted in
    /// sorted order with contiguous positions.
    pub fn write(&self, mut w: impl Write) -> std::io::Result<()> {
        #[derive(Serialize)]
        struct Header<'a> {
            meta: &'a DumpMeta,
        }
        #[derive(Serialize)]
        struct Line<'a> {
            seq_id: &'a str,
            pos: usize,
            sampled: u32,
            a_top: Vec<(u32, f64)>,
            b_top: Vec<(u32, f64)>,
        }
        let header = serde_json::to_string(&Header { meta: &self.meta })?;
        writeln!(w, "{header}")?;
        for (seq_id, records) in &self.sequences {
            for r in records {
                let line = Line {
                    seq_id,
                    pos: r.pos,
                    sampled: r.sampled.0,
                    a_top: r.a_top.iter().map(|&(t, lp)| (t.0, lp)).collect(),
                    b_top: r.b_top.iter().map(|&(t, lp)| (t.0, lp)).collect(),
                };
                writeln!(w, "{}", serde_json::to_string(&line)?)?;
            }
        }
        Ok(())
    }

    /// Assembles a dump from in-memory records (validating the same
    /// invariants as the parser, without line context).
    pub fn from_records(
        meta: DumpMeta,
        records: impl IntoIterator<Item = (String, DumpRecord)>,
    ) -> Result<Self, DumpError> {
        let mut buf = Vec::new();
        let dump = LogprobDump {
            meta,
            sequences: {
                let mut m: BTreeMap<String, Vec<DumpRecord>> = BTreeMap::new();
                for (seq_id, r) in records {
                    m.entry(seq_id).or_default().push(r);
                }
                m
            },
        };
        dump.write(&mut buf).map_err(DumpError::Io)?;
        read_dump(std::io::BufReader::new(buf.as_slice()))
    }
}

/// Replays one recorded model's stored top-k distributions. Defined only
/// on prefixes lying along a recorded trajectory.
pub struct ReplayPolicy<'a> {
    dump: &'a LogprobDump,
    side: ReplaySide,
}

impl ReplayPolicy<'_> {
    pub fn side(&self) -> ReplaySide {
        self.side
    }

    pub fn model_name(&self) -> &str {
        match self.side {
            ReplaySide::A => &self.dump.meta.a_name,
            ReplaySide::B => &self.dump.meta.b_name,
        }
    }
}

impl Policy for ReplayPolicy<'_> {
    fn vocab_size(&self) -> u32 {
        self.dump.meta.vocab_size
    }

    fn next_dist(&self, prefix: Prefix<'_>) -> Result<Distribution, PolicyError> {
        let off_path = || PolicyError::PrefixNotRecorded {
            seq_id: prefix.seq_id.to_string(),
            pos: prefix.tokens.len(),
        };
        let records = self
            .dump
            .sequences
            .get(prefix.seq_id)
            .ok_or_else(off_path)?;
        let pos = prefix.tokens.len();
        if pos >= records.len() {
            return Err(off_path());
        }
        let on_path = prefix
            .tokens
            .iter()
            .zip(records.iter())
            .all(|(&tok, rec)| tok == rec.sampled);
        if !on_path {
            return Err(off_path());
        }
        let top = match self.side {
            ReplaySide::A => &records[pos].a_top,
            ReplaySide::B => &records[pos].b_top,
        };
        Ok(Distribution::from_logprobs(self.dump.meta.vocab_size, top)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_dump_text() -> String {
        concat!(
            r#"{"meta": {"vocab_size": 8, "a_name": "base", "b_name": "rl", "top_p": 0.7, "temperature": 1}}"#,
            "\n",
            r#"{"seq_id": "s0", "pos": 0, "sampled": 3, "a_top": [[3, -0.35667494393873245], [1, -1.2039728043259361]], "b_top": [[3, -0.2231435513142097], [0, -1.6094379124341003]]}"#,
            "\n",
            r#"{"seq_id": "s0", "pos": 1, "sampled": 1, "a_top": [[1, -0.6931471805599453], [2, -0.6931471805599453]], "b_top": [[1, -0.1053605156578263], [5, -2.3025850929940455]]}"#,
            "\n",
        )
        .to_string()
    }

    #[test]
    fn parses_well_formed_dump() {
        let dump = read_dump(sample_dump_text().as_bytes()).unwrap();
        assert_eq!(dump.meta.vocab_size, 8);
        assert_eq!(dump.num_sequences(), 1);
        assert_eq!(dump.num_positions(), 2);
        let traj = dump.trajectories();
        assert_eq!(traj[0].tokens, vec![TokenId(3), TokenId(1)]);
    }

    #[test]
    fn accepts_integer_and_float_number_forms() {
        let text = concat!(
            r#"{"meta": {"vocab_size": 4.0, "a_name": "a", "b_name": "b", "top_p": 1, "temperature": 1}}"#,
            "\n",
            r#"{"seq_id": "s", "pos": 0.0, "sampled": 2.0, "a_top": [[2, -1]], "b_top": [[2.0, -1.0]]}"#,
            "\n",
        );
        let dump = read_dump(text.as_bytes()).unwrap();
        assert_eq!(dump.meta.vocab_size, 4);
        assert_eq!(dump.records("s").unwrap()[0].sampled, TokenId(2));
    }

    #[test]
    fn rejects_ascending_logprobs_with_line_number() {
        let text = concat!(
            r#"{"meta": {"vocab_size": 4, "a_name": "a", "b_name": "b", "top_p": 1, "temperature": 1}}"#,
            "\n",
            r#"{"seq_id": "s", "pos": 0, "sampled": 0, "a_top": [[0, -2.0], [1, -1.0]], "b_top": [[0, -1.0]]}"#,
            "\n",
        );
        match read_dump(text.as_bytes()).unwrap_err() {
            DumpError::Schema { line, field, .. } => {
                assert_eq!(line, 2);
                assert_eq!(field, "a_top");
            }
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_excess_probability_mass() {
        let text = concat!(
            r#"{"meta": {"vocab_size": 4, "a_name": "a", "b_name": "b", "top_p": 1, "temperature": 1}}"#,
            "\n",
            r#"{"seq_id": "s", "pos": 0, "sampled": 0, "a_top": [[0, -0.1], [1, -0.1]], "b_top": [[0, -1.0]]}"#,
            "\n",
        );
        assert!(matches!(
            read_dump(text.as_bytes()).unwrap_err(),
            DumpError::Schema { line: 2, .. }
        ));
    }

    #[test]
    fn rejects_non_contiguous_positions() {
        let text = concat!(
            r#"{"meta": {"vocab_size": 4, "a_name": "a", "b_name": "b", "top_p": 1, "temperature": 1}}"#,
            "\n",
            r#"{"seq_id": "s", "pos": 1, "sampled": 0, "a_top": [[0, -1.0]], "b_top": [[0, -1.0]]}"#,
            "\n",
        );
        assert!(matches!(
            read_dump(text.as_bytes()).unwrap_err(),
            DumpError::Schema { line: 2, field, .. } if field == "pos"
        ));
    }

    #[test]
    fn rejects_malformed_json_with_line_number() {
        let text = concat!(
            r#"{"meta": {"vocab_size": 4, "a_name": "a", "b_name": "b", "top_p": 1, "temperature": 1}}"#,
            "\n",
            "not json\n",
        );
        assert!(matches!(
            read_dump(text.as_bytes()).unwrap_err(),
            DumpError::Parse { line: 2, .. }
        ));
    }

    #[test]
    fn replay_returns_renormalized_stored_mass() {
        let dump = read_dump(sample_dump_text().as_bytes()).unwrap();
        let (a, _b) = dump.as_policies();
        let d = a.next_dist(Prefix::new("s0", &[])).unwrap();
        // Stored: exp(-0.3566..) = 0.7, exp(-1.2039..) = 0.3; z = 1.0.
        assert!((d.prob(TokenId(3)) - 0.7).abs() < 1e-9);
        assert!((d.prob(TokenId(1)) - 0.3).abs() < 1e-9);
    }

    #[test]
    fn replay_rejects_off_trajectory_queries() {
        let dump = read_dump(sample_dump_text().as_bytes()).unwrap();
        let (a, b) = dump.as_policies();
        // Wrong token at position 0.
        let err = a.next_dist(Prefix::new("s0", &[TokenId(7)])).unwrap_err();
        assert!(matches!(err, PolicyError::PrefixNotRecorded { .. }));
        // Past the end of the recording.
        let err = b
            .next_dist(Prefix::new("s0", &[TokenId(3), TokenId(1)]))
            .unwrap_err();
        assert!(matches!(err, PolicyError::PrefixNotRecorded { .. }));
        // Unknown sequence.
        let err = b.next_dist(Prefix::new("nope", &[])).unwrap_err();
        assert!(matches!(err, PolicyError::PrefixNotRecorded { .. }));
    }

    #[test]
    fn write_then_read_roundtrips() {
        let dump = read_dump(sample_dump_text().as_bytes()).unwrap();
        let mut buf = Vec::new();
        dump.write(&mut buf).unwrap();
        let again = read_dump(buf.as_slice()).unwrap();
        assert_eq!(again.meta, dump.meta);
        assert_eq!(again.records("s0"), dump.records("s0"));
    }
}
