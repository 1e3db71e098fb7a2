use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::TimeSeriesDataset;
use crate::{Error, Result};

/// Reads a CSV whose rows are timesteps and columns are channels, with an
/// optional trailing `0/1` label column.
///
/// A first row containing any non-numeric cell is taken as a header. Error
/// coordinates are 1-based file rows and columns.
pub fn load_csv(path: &Path, has_labels: bool) -> Result<TimeSeriesDataset> {
    let file = File::open(path)?;
    let mut ds = parse_csv(file, has_labels)?;
    ds.provenance = path.display().to_string();
    Ok(ds)
}

pub fn parse_csv<R: Read>(reader: R, has_labels: bool) -> Result<TimeSeriesDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut names: Option<Vec<String>> = None;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut width: Option<usize> = None;
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Csv {
            row,
            column: 0,
            message: e.to_string(),
        })?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        if i == 0 && record.iter().any(|c| c.parse::<f64>().is_err()) {
            names = Some(record.iter().map(str::to_string).collect());
            width = Some(record.len());
            continue;
        }
        match width {
            Some(w) if w != record.len() => {
                return Err(Error::Csv {
                    row,
                    column: record.len().min(w) + 1,
                    message: format!("expected {w} columns, found {}", record.len()),
                })
            }
            _ => width = Some(record.len()),
        }
        let channels = record.len() - usize::from(has_labels);
        if channels == 0 {
            return Err(Error::Csv {
                row,
                column: 1,
                message: "row has no channel columns".into(),
            });
        }
        for (c, cell) in record.iter().enumerate() {
            let column = c + 1;
            if has_labels && c == channels {
                let label = match cell {
                    "0" | "0.0" | "false" => false,
                    "1" | "1.0" | "true" => true,
                    other => {
                        return Err(Error::Csv {
                            row,
                            column,
                            message: format!("label must be 0 or 1, found '{other}'"),
                        })
                    }
                };
                labels.push(label);
            } else {
                let v: f64 = cell.parse().map_err(|_| Error::Csv {
                    row,
                    column,
                    message: format!("'{cell}' is not a number"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Csv {
                        row,
                        column,
                        message: format!("'{cell}' is not finite"),
                    });
                }
                values.push(v);
            }
        }
    }
    let width = match width {
        Some(w) if !values.is_empty() => w,
        _ => return Err(Error::Data("csv contains no data rows".into())),
    };
    let dim = width - usize::from(has_labels);
    let mut ds = TimeSeriesDataset::new(values, dim, has_labels.then_some(labels))?;
    if let Some(names) = names {
        ds.channel_names = names.into_iter().take(dim).collect();
    }
    Ok(ds)
}

/// Writes `ds` with a header row; labels, when present, go last as `0/1`.
/// Floats use the shortest representation that parses back exactly.
pub fn write_csv(ds: &TimeSeriesDataset, path: &Path) -> Result<()> {
    write_csv_to(ds, File::create(path)?)
}

pub fn write_csv_to<W: Write>(ds: &TimeSeriesDataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut header = ds.channel_names.clone();
    if ds.labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header).map_err(csv_err)?;
    let mut fields = Vec::with_capacity(ds.dim + 1);
    for t in 0..ds.len() {
        fields.clear();
        fields.extend(ds.row(t).iter().map(|v| v.to_string()));
        if let Some(l) = &ds.labels {
            fields.push(if l[t] { "1" } else { "0" }.to_string());
        }
        w.write_record(&fields).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
