//! CSV files for annotations, detections and FROC curves.
//!
//! Numbers are written with Rust's shortest round-trip decimal formatting,
//! so values read back bit-exactly.

use std::path::Path;

use super::{DetectionRecord, FrocCurve, GtRecord};
use crate::error::{Error, Result};
use crate::volume::WorldPoint;

const ANNOTATION_HEADER: [&str; 5] = ["scan_id", "x_mm", "y_mm", "z_mm", "radius_mm"];
const DETECTION_HEADER: [&str; 6] = ["scan_id", "x_mm", "y_mm", "z_mm", "size_mm", "probability"];
const FROC_HEADER: [&str; 3] = ["tolerance_mm", "fp_per_scan", "sensitivity"];

fn format_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => format_err(path, line, format!("{other:?}")),
    }
}

/// Rows after validating the header; each row comes with its line number.
fn read_rows(path: &Path, header: &[&str]) -> Result<Vec<(usize, csv::StringRecord)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let got = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if got.iter().ne(header.iter().copied()) {
        return Err(format_err(
            path,
            1,
            format!(
                "expected header {:?}, found {:?}",
                header.join(","),
                got.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.len() != header.len() {
            return Err(format_err(
                path,
                line,
                format!("expected {} fields, found {}", header.len(), rec.len()),
            ));
        }
        rows.push((line, rec));
    }
    Ok(rows)
}

fn num(path: &Path, line: usize, rec: &csv::StringRecord, i: usize, name: &str) -> Result<f64> {
    let v: f64 = rec[i].parse().map_err(|_| {
        format_err(
            path,
            line,
            format!("column {name}: not a number: {:?}", &rec[i]),
        )
    })?;
    if !v.is_finite() {
        return Err(format_err(
            path,
            line,
            format!("column {name}: non-finite value"),
        ));
    }
    Ok(v)
}

fn write_rows(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_annotations(path: &Path) -> Result<Vec<GtRecord>> {
    read_rows(path, &ANNOTATION_HEADER)?
        .into_iter()
        .map(|(line, r)| {
            let radius = num(path, line, &r, 4, "radius_mm")?;
            if radius <= 0.0 {
                return Err(format_err(path, line, "column radius_mm: must be positive"));
            }
            Ok(GtRecord {
                scan_id: r[0].to_string(),
                center: WorldPoint::new(
                    num(path, line, &r, 1, "x_mm")?,
                    num(path, line, &r, 2, "y_mm")?,
                    num(path, line, &r, 3, "z_mm")?,
                ),
                radius,
            })
        })
        .collect()
}

pub fn write_annotations(path: &Path, records: &[GtRecord]) -> Result<()> {
    write_rows(
        path,
        &ANNOTATION_HEADER,
        records.iter().map(|g| {
            vec![
                g.scan_id.clone(),
                g.center.x.to_string(),
                g.center.y.to_string(),
                g.center.z.to_string(),
                g.radius.to_string(),
            ]
        }),
    )
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    read_rows(path, &DETECTION_HEADER)?
        .into_iter()
        .map(|(line, r)| {
            let probability = num(path, line, &r, 5, "probability")?;
            if !(0.0..=1.0).contains(&probability) {
                return Err(format_err(path, line, "column probability: outside [0, 1]"));
            }
            Ok(DetectionRecord {
                scan_id: r[0].to_string(),
                point: WorldPoint::new(
                    num(path, line, &r, 1, "x_mm")?,
                    num(path, line, &r, 2, "y_mm")?,
                    num(path, line, &r, 3, "z_mm")?,
                ),
                size: num(path, line, &r, 4, "size_mm")?,
                probability,
            })
        })
        .collect()
}

pub fn write_detections(path: &Path, records: &[DetectionRecord]) -> Result<()> {
    write_rows(
        path,
        &DETECTION_HEADER,
        records.iter().map(|d| {
            vec![
                d.scan_id.clone(),
                d.point.x.to_string(),
                d.point.y.to_string(),
                d.point.z.to_string(),
                d.size.to_string(),
                d.probability.to_string(),
            ]
        }),
    )
}

pub fn write_froc(path: &Path, curves: &[FrocCurve]) -> Result<()> {
    write_rows(
        path,
        &FROC_HEADER,
        curves.iter().flat_map(|c| {
            c.points
                .iter()
                .map(move |&(fp, s)| vec![c.tolerance.to_string(), fp.to_string(), s.to_string()])
        }),
    )
}

/// Curves in file order, grouped by tolerance.
pub fn read_froc(path: &Path) -> Result<Vec<FrocCurve>> {
    let mut curves: Vec<FrocCurve> = Vec::new();
    for (line, r) in read_rows(path, &FROC_HEADER)? {
        let t = num(path, line, &r, 0, "tolerance_mm")?;
        let p = (
            num(path, line, &r, 1, "fp_per_scan")?,
            num(path, line, &r, 2, "sensitivity")?,
        );
        match curves.last_mut() {
            Some(c) if c.tolerance == t => c.points.push(p),
            _ => curves.push(FrocCurve {
                tolerance: t,
                points: vec![p],
            }),
        }
    }
    Ok(curves)
}
