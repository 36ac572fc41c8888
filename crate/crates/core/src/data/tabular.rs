use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};

use super::{Dataset, Labels};

/// Reads a numeric CSV with a header row. `label_column` names the label.
///
/// Labels that are all in {-1, +1} become [`Labels::Signs`]; labels that are
/// all nonnegative integers become class ids; anything else is a regression
/// target.
pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<Dataset> {
    let file =
        std::fs::File::open(path.as_ref()).map_err(|e| Error::Io(format!("{}: {e}", path.as_ref().display())))?;
    parse_csv(file, label_column)
}

pub fn parse_csv(reader: impl Read, label_column: &str) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::Parse(format!("no column named {label_column:?}")))?;
    let dim = headers.len() - 1;
    if dim == 0 {
        return Err(Error::Parse("CSV needs at least one feature column".into()));
    }

    let mut features = Vec::new();
    let mut raw_labels = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        // Row numbers count the header as row 1.
        let row = r + 2;
        let record = record.map_err(|e| Error::Parse(format!("row {row}: {e}")))?;
        for (c, cell) in record.iter().enumerate() {
            let value: f64 = cell
                .parse()
                .map_err(|_| Error::Parse(format!("row {row}, column {:?}: {cell:?} is not a number", &headers[c])))?;
            if c == label_idx {
                raw_labels.push(value);
            } else {
                features.push(value);
            }
        }
    }
    if raw_labels.is_empty() {
        return Err(Error::Parse("CSV has no data rows".into()));
    }

    let labels = if raw_labels.iter().all(|&v| v == 1.0 || v == -1.0) {
        Labels::Signs(raw_labels)
    } else if raw_labels.iter().all(|&v| v >= 0.0 && v.fract() == 0.0) {
        let ids: Vec<usize> = raw_labels.iter().map(|&v| v as usize).collect();
        let num_classes = ids.iter().max().map_or(1, |&m| m + 1);
        Labels::Classes { ids, num_classes }
    } else {
        Labels::Targets(raw_labels)
    };
    Dataset::new(features, dim, labels)
}
