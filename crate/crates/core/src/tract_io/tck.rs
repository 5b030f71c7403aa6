//! MRtrix `.tck` track files, Float32LE payload only.
//!
//! Layout: a text header starting with `mrtrix tracks`, `key: value` lines,
//! and an `END` line. `file: . <offset>` points at the binary payload, a
//! run of little-endian f32 triplets where an all-NaN triplet closes a
//! streamline and an all-+Inf triplet ends the stream.

use super::TractIoError;
use crate::geometry::{FiberCluster, Point3, Streamline};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

const MAGIC: &str = "mrtrix tracks";

struct Header {
    datatype: Option<String>,
    offset: Option<usize>,
    count: Option<usize>,
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<Header, TractIoError> {
    let mut header = Header {
        datatype: None,
        offset: None,
        count: None,
    };
    let mut lines = bytes.split(|&b| b == b'\n');
    let first = lines.next().unwrap_or_default();
    if !first.starts_with(MAGIC.as_bytes()) {
        return Err(TractIoError::MissingMagic { path: path.into() });
    }
    let malformed = |reason: String| TractIoError::MalformedHeader {
        path: path.into(),
        reason,
    };
    for raw in lines {
        let line = std::str::from_utf8(raw)
            .map_err(|_| malformed("non-UTF-8 header line".into()))?
            .trim_end_matches('\r');
        if line == "END" {
            return Ok(header);
        }
        let Some((key, value)) = line.split_once(':') else {
            continue;
        };
        let value = value.trim();
        match key.trim() {
            "datatype" => header.datatype = Some(value.to_string()),
            "count" => header.count = value.parse().ok(),
            "file" => {
                let mut parts = value.split_whitespace();
                if parts.next() != Some(".") {
                    return Err(malformed(format!("detached payload '{value}'")));
                }
                let offset = parts
                    .next()
                    .and_then(|o| o.parse().ok())
                    .ok_or_else(|| malformed(format!("bad file offset '{value}'")))?;
                header.offset = Some(offset);
            }
            _ => {}
        }
    }
    Err(malformed("missing END line".into()))
}

/// Reads one `.tck` file as a cluster named after the file stem.
pub fn read_tck(path: impl AsRef<Path>) -> Result<FiberCluster, TractIoError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| TractIoError::io(path, e))?;
    let header = parse_header(path, &bytes)?;

    match header.datatype.as_deref() {
        Some("Float32LE") => {}
        other => {
            return Err(TractIoError::UnsupportedDatatype {
                path: path.into(),
                datatype: other.unwrap_or("<missing>").to_string(),
            })
        }
    }
    let offset = header.offset.ok_or_else(|| TractIoError::MalformedHeader {
        path: path.into(),
        reason: "missing 'file' entry".into(),
    })?;
    if offset > bytes.len() {
        return Err(TractIoError::TruncatedPayload { path: path.into() });
    }

    let payload = &bytes[offset..];
    let mut streamlines = Vec::new();
    let mut current: Vec<Point3> = Vec::new();
    let mut terminated_at = None;
    let flush = |current: &mut Vec<Point3>, streamlines: &mut Vec<Streamline>| {
        if current.is_empty() {
            return Ok(());
        }
        let index = streamlines.len();
        Streamline::new(std::mem::take(current))
            .map(|s| streamlines.push(s))
            .map_err(|source| TractIoError::InvalidStreamline {
                path: path.into(),
                index,
                source,
            })
    };
    for (i, chunk) in payload.chunks_exact(12).enumerate() {
        let v = [0, 4, 8].map(|o| f32::from_le_bytes(chunk[o..o + 4].try_into().unwrap()));
        if v.iter().all(|c| c.is_nan()) {
            flush(&mut current, &mut streamlines)?;
        } else if v.iter().all(|c| *c == f32::INFINITY) {
            flush(&mut current, &mut streamlines)?;
            terminated_at = Some((i + 1) * 12);
            break;
        } else {
            current.push(Point3::new(v[0] as f64, v[1] as f64, v[2] as f64));
        }
    }
    let Some(consumed) = terminated_at else {
        return Err(TractIoError::TruncatedPayload { path: path.into() });
    };
    if consumed < payload.len() {
        log::warn!(
            "{}: ignoring {} trailing byte(s) after the terminator",
            path.display(),
            payload.len() - consumed
        );
    }
    if let Some(count) = header.count {
        if count != streamlines.len() {
            log::warn!(
                "{}: header count {} but {} streamline(s) read",
                path.display(),
                count,
                streamlines.len()
            );
        }
    }
    if streamlines.is_empty() {
        return Err(TractIoError::EmptyFile { path: path.into() });
    }
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(FiberCluster::new(id, "", streamlines).expect("non-empty"))
}

fn header_text(count: usize) -> String {
    let body = format!("{MAGIC}\ndatatype: Float32LE\ncount: {count}\n");
    // The offset's digit count feeds back into the header length.
    let mut offset = body.len() + "file: . \nEND\n".len() + 1;
    loop {
        let text = format!("{body}file: . {offset}\nEND\n");
        if text.len() == offset {
            return text;
        }
        offset = text.len();
    }
}

/// Writes a cluster, quantizing every coordinate to f32.
pub fn write_tck(cluster: &FiberCluster, path: impl AsRef<Path>) -> Result<(), TractIoError> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| TractIoError::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut write = |bytes: &[u8]| out.write_all(bytes).map_err(|e| TractIoError::io(path, e));

    write(header_text(cluster.n_streamlines()).as_bytes())?;
    let mut triplet = |v: [f32; 3]| {
        let mut buf = [0u8; 12];
        for (i, c) in v.iter().enumerate() {
            buf[i * 4..i * 4 + 4].copy_from_slice(&c.to_le_bytes());
        }
        write(&buf)
    };
    for s in cluster.streamlines() {
        for p in s.points() {
            triplet([p.x as f32, p.y as f32, p.z as f32])?;
        }
        triplet([f32::NAN; 3])?;
    }
    triplet([f32::INFINITY; 3])?;
    out.flush().map_err(|e| TractIoError::io(path, e))
}
