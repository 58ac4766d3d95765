use std::path::Path;

use crate::error::{Error, Result};

use super::LogisticObjective;

/// Loads `label,f1,...,fd` rows (label in {0, 1}) into a logistic objective.
///
/// Line numbers in errors are 1-based and count the header line when
/// `header` is set.
pub fn load_csv_dataset(path: impl AsRef<Path>, header: bool, l2: f64) -> Result<LogisticObjective> {
    let file = std::fs::File::open(path.as_ref())?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut width: Option<usize> = None;
    for (k, record) in reader.records().enumerate() {
        let line = record
            .as_ref()
            .ok()
            .and_then(|r| r.position())
            .map(|p| p.line() as usize)
            .unwrap_or(k + 1 + usize::from(header));
        let record = record.map_err(|e| Error::Dataset {
            line,
            message: e.to_string(),
        })?;
        if record.len() < 2 {
            return Err(Error::Dataset {
                line,
                message: format!("expected a label and at least one feature, found {} fields", record.len()),
            });
        }
        let label_text = &record[0];
        let label = match label_text.parse::<f64>() {
            Ok(v) if v == 0.0 => 0u8,
            Ok(v) if v == 1.0 => 1u8,
            _ => {
                return Err(Error::Dataset {
                    line,
                    message: format!("label must be 0 or 1, got `{label_text}`"),
                })
            }
        };
        let features = record
            .iter()
            .skip(1)
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Dataset {
                        line,
                        message: format!("malformed feature `{f}`"),
                    })
            })
            .collect::<Result<Vec<f64>>>()?;
        match width {
            None => width = Some(features.len()),
            Some(w) if w != features.len() => {
                return Err(Error::Dataset {
                    line,
                    message: format!(
                        "dimension mismatch: expected {w} features, found {}",
                        features.len()
                    ),
                })
            }
            Some(_) => {}
        }
        rows.push(features);
        labels.push(label);
    }
    if rows.is_empty() {
        return Err(Error::Dataset {
            line: 0,
            message: "dataset is empty".into(),
        });
    }
    LogisticObjective::new(rows, labels, l2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::GradientOracle;
    use std::io::Write;

    fn write(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_valid_file() {
        let f = write("1,0.5,2.0\n0,-1.0,0.25\n");
        let obj = load_csv_dataset(f.path(), false, 0.1).unwrap();
        assert_eq!(obj.n_samples(), 2);
        assert_eq!(obj.dim(), 2);
    }

    #[test]
    fn header_is_skipped() {
        let f = write("label,a\n1,0.5\n0,1.5\n1,2.0\n");
        let obj = load_csv_dataset(f.path(), true, 0.1).unwrap();
        assert_eq!(obj.n_samples(), 3);
    }

    #[test]
    fn non_binary_label_reports_line() {
        let f = write("1,0.5\n2,0.1\n");
        match load_csv_dataset(f.path(), false, 0.1) {
            Err(Error::Dataset { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("label"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ragged_rows_are_a_dimension_error() {
        let f = write("1,0.5,1.0\n0,0.1\n");
        match load_csv_dataset(f.path(), false, 0.1) {
            Err(Error::Dataset { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("dimension"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_and_empty() {
        let f = write("1,abc\n");
        assert!(matches!(
            load_csv_dataset(f.path(), false, 0.1),
            Err(Error::Dataset { line: 1, .. })
        ));
        let f = write("");
        assert!(matches!(
            load_csv_dataset(f.path(), false, 0.1),
            Err(Error::Dataset { .. })
        ));
    }
}
