//! CSV with header `f0,f1,...,f{D-1},label`.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Domain, LabeledDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub num_classes: usize,
    /// Expected feature count; inferred from the header when `None`.
    #[serde(default)]
    pub num_features: Option<usize>,
    pub domain: Domain,
}

/// Reads a labeled dataset. Data rows are numbered from 1 in errors.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let file_err = |message: String| Error::CsvFile {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| file_err(e.to_string()))?;

    let header = reader.headers().map_err(|e| file_err(e.to_string()))?.clone();
    let d = header.len().saturating_sub(1);
    let expected: Vec<String> = (0..d)
        .map(|j| format!("f{j}"))
        .chain(std::iter::once("label".to_string()))
        .collect();
    if d == 0 || header.iter().map(str::trim).ne(expected.iter().map(String::as_str)) {
        return Err(file_err(format!(
            "header must be `f0,...,f{{D-1}},label`, found `{}`",
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    if let Some(want) = schema.num_features {
        if want != d {
            return Err(file_err(format!("expected {want} feature columns, header has {d}")));
        }
    }

    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let row_err = |message: String| Error::CsvRow {
            path: path.to_path_buf(),
            row,
            message,
        };
        let record = record.map_err(|e| row_err(e.to_string()))?;
        if record.len() != d + 1 {
            return Err(row_err(format!("expected {} fields, found {}", d + 1, record.len())));
        }
        for (j, cell) in record.iter().take(d).enumerate() {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| row_err(format!("non-numeric value `{cell}` in column f{j}")))?;
            if !v.is_finite() {
                return Err(row_err(format!("non-finite value in column f{j}")));
            }
            values.push(v);
        }
        let cell = record[d].trim();
        let label: usize = cell
            .parse()
            .map_err(|_| row_err(format!("label `{cell}` is not a non-negative integer")))?;
        if label >= schema.num_classes {
            return Err(row_err(format!(
                "label {label} out of range for {} classes",
                schema.num_classes
            )));
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(file_err("no data rows".into()));
    }
    let features = Array2::from_shape_vec((labels.len(), d), values).map_err(|e| Error::Shape(e.to_string()))?;
    LabeledDataset::new(features, labels, schema.num_classes, schema.domain)
}

/// Writes `ds` in the format read by [`load_csv`]. Floats are written in
/// shortest round-trip form.
pub fn write_csv(ds: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::CsvFile {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let d = ds.dim();
    let mut header: Vec<String> = (0..d).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    let csv_err = |e: csv::Error| Error::CsvFile {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    writer.write_record(&header).map_err(csv_err)?;
    for (row, &label) in ds.features().rows().into_iter().zip(ds.labels_unguarded()) {
        let mut fields: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        fields.push(label.to_string());
        writer.write_record(&fields).map_err(csv_err)?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::io::Write;

    fn schema(k: usize) -> CsvSchema {
        CsvSchema {
            num_classes: k,
            num_features: None,
            domain: Domain::Source,
        }
    }

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn reads_well_formed_file() {
        let f = write("f0,f1,label\n0.5,1,0\n-2,3e-1,1\n4,5,2\n");
        let ds = load_csv(f.path(), &schema(3)).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.features(), array![[0.5, 1.0], [-2.0, 0.3], [4.0, 5.0]]);
        assert_eq!(ds.labels(), &[0, 1, 2]);
    }

    #[test]
    fn crlf_accepted() {
        let f = write("f0,label\r\n1.0,1\r\n2.0,0\r\n");
        let ds = load_csv(f.path(), &schema(2)).unwrap();
        assert_eq!(ds.labels(), &[1, 0]);
    }

    #[test]
    fn non_numeric_cell_names_row() {
        let f = write("f0,f1,label\n1,2,0\n1,abc,1\n");
        let err = load_csv(f.path(), &schema(2)).unwrap_err();
        assert!(matches!(err, Error::CsvRow { row: 2, .. }), "{err}");
        assert!(err.to_string().contains("row 2"));
    }

    #[test]
    fn header_and_label_errors() {
        let f = write("a,b,label\n1,2,0\n");
        assert!(matches!(load_csv(f.path(), &schema(2)), Err(Error::CsvFile { .. })));

        let f = write("f0,f1,label\n1,2,0\n1,2,5\n");
        assert!(matches!(load_csv(f.path(), &schema(2)), Err(Error::CsvRow { row: 2, .. })));

        let mut s = schema(2);
        s.num_features = Some(3);
        let f = write("f0,f1,label\n1,2,0\n");
        assert!(load_csv(f.path(), &s).is_err());

        assert!(load_csv("/nonexistent/file.csv", &schema(2)).is_err());
    }

    #[test]
    fn round_trip() {
        let feats = array![[0.1, -1.0 / 3.0], [1e-300, 12345.678], [f64::MIN_POSITIVE, 2.0]];
        let ds = LabeledDataset::new(feats, vec![1, 0, 1], 2, Domain::Target).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_csv(&ds, f.path()).unwrap();
        let mut s = schema(2);
        s.domain = Domain::Target;
        let back = load_csv(f.path(), &s).unwrap();
        assert_eq!(back.features(), ds.features());
        assert_eq!(back.labels_unguarded(), ds.labels_unguarded());
        assert_eq!(ds.label_reads(), 0);
    }
}
