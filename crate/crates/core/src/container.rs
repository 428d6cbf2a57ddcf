//! Plain-text containers for recordings, feature matrices and alignment paths.
//!
//! All formats are line oriented: a magic line, `key value` header lines, then
//! row-major numbers separated by single spaces. Floats are written with the
//! shortest representation that round-trips exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::align::AlignmentPath;
use crate::error::{Error, Result};
use crate::signals::{EmgRecording, FeatureMatrix, SpeechMode};

const EMG_MAGIC: &str = "# ssr-emg v1";
const FEAT_MAGIC: &str = "# ssr-features v1";

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn write_row(out: &mut String, row: impl IntoIterator<Item = f64>) {
    let mut first = true;
    for v in row {
        if !first {
            out.push(' ');
        }
        first = false;
        write!(out, "{v}").unwrap();
    }
    out.push('\n');
}

fn parse_row(path: &Path, line: &str, expected: usize) -> Result<Vec<f64>> {
    let vals = line
        .split_ascii_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| format_err(path, format!("bad number `{t}`: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    if vals.len() != expected {
        return Err(format_err(path, format!("expected {expected} values, found {}", vals.len())));
    }
    Ok(vals)
}

struct Header<'a> {
    path: &'a Path,
    fields: Vec<(&'a str, &'a str)>,
}

impl<'a> Header<'a> {
    fn get(&self, key: &str) -> Result<&'a str> {
        self.fields
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| format_err(self.path, format!("missing header field `{key}`")))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|e| format_err(self.path, format!("field `{key}`: {e}")))
    }
}

/// Splits `text` into its header and the remaining body lines.
fn split_header<'a>(
    path: &'a Path,
    text: &'a str,
    magic: &str,
    n_fields: usize,
) -> Result<(Header<'a>, std::str::Lines<'a>)> {
    let mut lines = text.lines();
    if lines.next() != Some(magic) {
        return Err(format_err(path, format!("missing `{magic}` magic line")));
    }
    let mut fields = Vec::with_capacity(n_fields);
    for _ in 0..n_fields {
        let line = lines
            .next()
            .ok_or_else(|| format_err(path, "truncated header"))?;
        let (k, v) = line
            .split_once(' ')
            .ok_or_else(|| format_err(path, format!("malformed header line `{line}`")))?;
        fields.push((k, v));
    }
    Ok((Header { path, fields }, lines))
}

pub fn emg_to_string(rec: &EmgRecording) -> String {
    let mut out = String::new();
    writeln!(out, "{EMG_MAGIC}").unwrap();
    writeln!(out, "channels {}", rec.channels()).unwrap();
    writeln!(out, "sample_rate_hz {}", rec.sample_rate_hz).unwrap();
    writeln!(out, "session_id {}", rec.session_id).unwrap();
    writeln!(out, "utterance_id {}", rec.utterance_id).unwrap();
    writeln!(out, "mode {}", rec.mode.as_str()).unwrap();
    writeln!(out, "samples {}", rec.len()).unwrap();
    for row in rec.samples().rows() {
        write_row(&mut out, row.iter().copied());
    }
    out
}

pub fn write_emg(path: &Path, rec: &EmgRecording) -> Result<()> {
    fs::write(path, emg_to_string(rec))?;
    Ok(())
}

pub fn read_emg(path: &Path) -> Result<EmgRecording> {
    let text = fs::read_to_string(path)?;
    let (header, mut body) = split_header(path, &text, EMG_MAGIC, 6)?;
    let channels: usize = header.parse("channels")?;
    let len: usize = header.parse("samples")?;
    let mut samples = Array2::zeros((channels, len));
    for c in 0..channels {
        let line = body
            .next()
            .ok_or_else(|| format_err(path, format!("missing samples for channel {c}")))?;
        let row = parse_row(path, line, len)?;
        samples.row_mut(c).assign(&ndarray::Array1::from(row));
    }
    EmgRecording::new(
        samples,
        header.parse("sample_rate_hz")?,
        header.get("session_id")?,
        header.get("utterance_id")?,
        header.parse("mode")?,
    )
    .map_err(|e| format_err(path, e.to_string()))
}

/// Reads the CSV variant: one column per channel, one row per sample, with an
/// optional non-numeric header row. Metadata is supplied by the caller.
pub fn read_emg_csv(
    path: &Path,
    sample_rate_hz: f64,
    session_id: &str,
    utterance_id: &str,
    mode: SpeechMode,
) -> Result<EmgRecording> {
    let text = fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|t| t.trim().parse::<f64>()).collect();
        match parsed {
            Ok(vals) => {
                if let Some(first) = rows.first() {
                    if first.len() != vals.len() {
                        return Err(format_err(path, format!("row {i} has {} columns, expected {}", vals.len(), first.len())));
                    }
                }
                rows.push(vals);
            }
            Err(_) if i == 0 => continue,
            Err(e) => return Err(format_err(path, format!("row {i}: {e}"))),
        }
    }
    if rows.is_empty() {
        return Err(format_err(path, "no samples"));
    }
    let channels = rows[0].len();
    let samples = Array2::from_shape_fn((channels, rows.len()), |(c, t)| rows[t][c]);
    EmgRecording::new(samples, sample_rate_hz, session_id, utterance_id, mode)
}

pub fn write_emg_csv(path: &Path, rec: &EmgRecording) -> Result<()> {
    let mut out = String::new();
    let header: Vec<String> = (0..rec.channels()).map(|c| format!("ch{c}")).collect();
    writeln!(out, "{}", header.join(",")).unwrap();
    for t in 0..rec.len() {
        let row: Vec<String> = rec.samples().column(t).iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", row.join(",")).unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn features_to_string(m: &FeatureMatrix) -> String {
    let mut out = String::new();
    writeln!(out, "{FEAT_MAGIC}").unwrap();
    writeln!(out, "frames {}", m.frames()).unwrap();
    writeln!(out, "dims {}", m.dims()).unwrap();
    writeln!(out, "frame_stride_s {}", m.frame_stride_s).unwrap();
    writeln!(out, "frame_length_s {}", m.frame_length_s).unwrap();
    writeln!(out, "labels {}", m.dim_labels().join("\t")).unwrap();
    for row in m.data().rows() {
        write_row(&mut out, row.iter().copied());
    }
    out
}

pub fn write_features(path: &Path, m: &FeatureMatrix) -> Result<()> {
    fs::write(path, features_to_string(m))?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    let text = fs::read_to_string(path)?;
    let (header, body) = split_header(path, &text, FEAT_MAGIC, 5)?;
    let frames: usize = header.parse("frames")?;
    let dims: usize = header.parse("dims")?;
    let labels: Vec<String> = if dims == 0 {
        Vec::new()
    } else {
        header.get("labels")?.split('\t').map(str::to_string).collect()
    };
    let mut data = Array2::zeros((frames, dims));
    let mut count = 0;
    for (f, line) in body.enumerate() {
        if f >= frames {
            return Err(format_err(path, "more rows than `frames`"));
        }
        data.row_mut(f).assign(&ndarray::Array1::from(parse_row(path, line, dims)?));
        count += 1;
    }
    if count != frames {
        return Err(format_err(path, format!("expected {frames} rows, found {count}")));
    }
    FeatureMatrix::new(data, labels, header.parse("frame_stride_s")?, header.parse("frame_length_s")?)
        .map_err(|e| format_err(path, e.to_string()))
}

/// Two integer columns `i j`, one pair per line, preceded by a `# cost` comment.
pub fn path_to_string(path: &AlignmentPath) -> String {
    let mut out = format!("# cost {}\n", path.total_cost);
    for (i, j) in &path.pairs {
        writeln!(out, "{i} {j}").unwrap();
    }
    out
}

pub fn write_path(file: &Path, path: &AlignmentPath) -> Result<()> {
    fs::write(file, path_to_string(path))?;
    Ok(())
}

pub fn read_path(file: &Path) -> Result<AlignmentPath> {
    let text = fs::read_to_string(file)?;
    let mut total_cost = None;
    let mut pairs = Vec::new();
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("# cost ") {
            total_cost = Some(rest.parse::<f64>().map_err(|e| format_err(file, e.to_string()))?);
            continue;
        }
        let mut it = line.split_ascii_whitespace().map(str::parse::<usize>);
        match (it.next(), it.next(), it.next()) {
            (Some(Ok(i)), Some(Ok(j)), None) => pairs.push((i, j)),
            _ => return Err(format_err(file, format!("bad pair line `{line}`"))),
        }
    }
    Ok(AlignmentPath {
        pairs,
        total_cost: total_cost.ok_or_else(|| format_err(file, "missing cost line"))?,
    })
}
