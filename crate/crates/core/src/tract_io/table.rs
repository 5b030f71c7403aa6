use super::TractIoError;
use crate::geometry::ShapeVector;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

pub const SHAPE_CSV_HEADER: &str =
    "subject_id,cluster_id,length,span,volume,total_surface_area,irregularity";

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeRow {
    pub subject_id: String,
    pub cluster_id: String,
    pub shape: ShapeVector,
}

/// Formats with 6 significant digits, `%g` style.
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    if (-5..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{v:.5e}")
    }
}

pub fn write_shape_csv(rows: &[ShapeRow], path: impl AsRef<Path>) -> Result<(), TractIoError> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| TractIoError::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut text = String::with_capacity(64 * (rows.len() + 1));
    text.push_str(SHAPE_CSV_HEADER);
    text.push('\n');
    for row in rows {
        text.push_str(&row.subject_id);
        text.push(',');
        text.push_str(&row.cluster_id);
        for v in row.shape.to_array() {
            text.push(',');
            text.push_str(&format_sig6(v));
        }
        text.push('\n');
    }
    out.write_all(text.as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| TractIoError::io(path, e))
}

pub fn read_shape_csv(path: impl AsRef<Path>) -> Result<Vec<ShapeRow>, TractIoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| TractIoError::io(path, e))?;
    let schema = |line: usize, field: &str, message: String| TractIoError::SchemaError {
        path: path.into(),
        line: Some(line),
        field: field.to_string(),
        message,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.starts_with('#') && !l.trim().is_empty());
    match lines.next() {
        Some((_, header)) if header.trim() == SHAPE_CSV_HEADER => {}
        Some((n, _)) => return Err(schema(n, "header", format!("expected '{SHAPE_CSV_HEADER}'"))),
        None => return Err(schema(1, "header", "empty file".into())),
    }
    let mut rows = Vec::new();
    for (n, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(schema(n, "row", format!("expected 7 fields, found {}", fields.len())));
        }
        let mut values = [0.0; 5];
        for (k, value) in values.iter_mut().enumerate() {
            *value = fields[k + 2].trim().parse().map_err(|_| {
                schema(n, ShapeVector::NAMES[k], format!("not a number: '{}'", fields[k + 2]))
            })?;
        }
        rows.push(ShapeRow {
            subject_id: fields[0].to_string(),
            cluster_id: fields[1].to_string(),
            shape: ShapeVector::from_array(values),
        });
    }
    Ok(rows)
}
