//! Labeled series CSV files.

use std::fs;
use std::path::{Path, PathBuf};

use pmad_core::data::{parse_filename, SeriesRecord};

use crate::error::{Error, Result};

/// Reads one `{index}_{Dataset}_id_{id}_{Subdomain}_tr_{n}_1st_{m}.csv`
/// file. The `Label` column holds 0/1; the value column is the first
/// other column. Row numbers in errors count data rows from 1.
pub fn load_series(path: &Path) -> Result<SeriesRecord> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::format(path, "file name is not valid UTF-8"))?;
    let meta = parse_filename(name)?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let headers = reader.headers().map_err(|e| Error::format(path, e.to_string()))?.clone();
    let label_col = headers
        .iter()
        .position(|h| h == "Label")
        .ok_or_else(|| Error::format(path, "missing `Label` column"))?;
    let value_col = (0..headers.len())
        .find(|&i| i != label_col)
        .ok_or_else(|| Error::format(path, "missing value column"))?;

    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Row { path: path.into(), row, message: e.to_string() })?;
        let bad = |message: String| Error::Row { path: path.into(), row, message };
        let raw_v = rec.get(value_col).unwrap_or("");
        let v: f64 = raw_v.parse().map_err(|_| bad(format!("value `{raw_v}` is not a number")))?;
        if !v.is_finite() {
            return Err(bad(format!("value `{raw_v}` is not finite")));
        }
        let raw_l = rec.get(label_col).unwrap_or("");
        let l = match raw_l.parse::<f64>() {
            Ok(x) if x == 0.0 || x == 1.0 => x as u8,
            _ => return Err(bad(format!("label `{raw_l}` is not 0 or 1"))),
        };
        values.push(v);
        labels.push(l);
    }
    Ok(SeriesRecord::new(&meta, values, labels, path.display().to_string())?)
}

/// Writes `Data,Label` rows; values use shortest round-trip formatting.
pub fn save_series(record: &SeriesRecord, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(["Data", "Label"]).map_err(|e| csv_io(path, e))?;
    for (v, l) in record.values.iter().zip(&record.labels) {
        w.write_record([v.to_string(), l.to_string()]).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Every `*.csv` in `dir`, sorted by file name.
pub fn load_corpus(dir: &Path) -> Result<Vec<SeriesRecord>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::format(dir, "no .csv series found"));
    }
    files.iter().map(|p| load_series(p)).collect()
}

/// Writes each record under its own file name; returns the paths.
pub fn write_corpus(records: &[SeriesRecord], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    records
        .iter()
        .map(|r| {
            let name = Path::new(&r.source_file).file_name().map(PathBuf::from).unwrap_or_else(|| PathBuf::from(&r.source_file));
            let path = dir.join(name);
            save_series(r, &path)?;
            Ok(path)
        })
        .collect()
}

pub(crate) fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use pmad_core::synth::default_suite;

    #[test]
    fn reads_minimal_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("001_NAB_id_1_Facility_tr_1_1st_1.csv");
        fs::write(&p, "value,Label\n1.0,0\n2.0,1\n").unwrap();
        let r = load_series(&p).unwrap();
        assert_eq!(r.values, vec![1.0, 2.0]);
        assert_eq!(r.labels, vec![0, 1]);
        assert_eq!((r.dataset.as_str(), r.subdomain.as_str()), ("NAB", "Facility"));
    }

    #[test]
    fn reports_offending_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("001_NAB_id_1_Facility_tr_2_1st_3.csv");
        fs::write(&p, "value,Label\n1,0\n2,0\n3,0\n4,0\n5,2\n6,0\n").unwrap();
        let msg = load_series(&p).unwrap_err().to_string();
        assert!(msg.contains("row 5"), "{msg}");
        fs::write(&p, "value,Label\n1,0\nNaN,0\n3,1\n").unwrap();
        assert!(load_series(&p).unwrap_err().to_string().contains("row 2"));
        fs::write(&p, "value,Anomaly\n1,0\n2,1\n").unwrap();
        assert!(load_series(&p).unwrap_err().to_string().contains("Label"));
    }

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let suite = default_suite(9).unwrap();
        write_corpus(&suite, dir.path()).unwrap();
        let back = load_corpus(dir.path()).unwrap();
        assert_eq!(back.len(), suite.len());
        for (a, b) in suite.iter().zip(&back) {
            assert_eq!(a.values, b.values);
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.series_id(), b.series_id());
        }
    }
}
