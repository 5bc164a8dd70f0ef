//! CSV input and output.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use super::HarnessError;

/// Reads observations from a CSV with header `t,y` and `t = 1..T`.
pub fn ingest_csv(path: &Path) -> Result<Vec<f64>, HarnessError> {
    let file = File::open(path).map_err(|e| HarnessError::io(path, e))?;
    ingest_reader(file)
}

pub fn ingest_reader<R: std::io::Read>(input: R) -> Result<Vec<f64>, HarnessError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header = rdr.headers().map_err(|e| HarnessError::MalformedCsv(e.to_string()))?;
    if header.len() != 2 || &header[0] != "t" || &header[1] != "y" {
        return Err(HarnessError::MalformedCsv(format!("expected header `t,y`, got `{}`", header.iter().collect::<Vec<_>>().join(","))));
    }
    let mut y = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| HarnessError::MalformedCsv(e.to_string()))?;
        let t: usize = rec[0].parse().map_err(|_| HarnessError::MalformedCsv(format!("bad time index `{}`", &rec[0])))?;
        if t != i + 1 {
            return Err(HarnessError::NonContiguousTime { expected: i + 1, found: t });
        }
        let v: f64 = rec[1].parse().map_err(|_| HarnessError::MalformedCsv(format!("bad value `{}` at t = {t}", &rec[1])))?;
        if !v.is_finite() {
            return Err(HarnessError::MalformedCsv(format!("non-finite value at t = {t}")));
        }
        y.push(v);
    }
    if y.is_empty() {
        return Err(HarnessError::MalformedCsv("no observations".into()));
    }
    Ok(y)
}

/// Writes a header and rows; floats use the shortest round-trip form.
pub fn write_table<I, R>(path: &Path, header: &[&str], rows: I) -> Result<(), HarnessError>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let file = File::create(path).map_err(|e| HarnessError::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let wrap = |e: csv::Error| HarnessError::MalformedCsv(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(wrap)?;
    for row in rows {
        w.write_record(row.into_iter().collect::<Vec<_>>()).map_err(wrap)?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

/// Writes a `t,<name>` series indexed from 1.
pub fn write_series(path: &Path, name: &str, values: &[f64]) -> Result<(), HarnessError> {
    write_table(path, &["t", name], values.iter().enumerate().map(|(i, v)| [(i + 1).to_string(), v.to_string()]))
}

/// Reads any headed CSV into its header and string rows.
pub fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), HarnessError> {
    let file = File::open(path).map_err(|e| HarnessError::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let wrap = |e: csv::Error| HarnessError::MalformedCsv(format!("{}: {e}", path.display()));
    let header = rdr.headers().map_err(wrap)?.iter().map(String::from).collect();
    let rows = rdr
        .records()
        .map(|r| r.map(|r| r.iter().map(String::from).collect()).map_err(wrap))
        .collect::<Result<_, _>>()?;
    Ok((header, rows))
}

pub fn ensure_dir(dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_well_formed_file() {
        let y = ingest_reader("t,y\n1,0.5\n2,-1e-3\n3,2\n".as_bytes()).unwrap();
        assert_eq!(y, vec![0.5, -1e-3, 2.0]);
    }

    #[test]
    fn rejects_gaps_and_garbage() {
        let e = ingest_reader("t,y\n1,0.5\n3,1\n".as_bytes()).unwrap_err();
        assert!(matches!(e, HarnessError::NonContiguousTime { expected: 2, found: 3 }));
        for bad in ["x,y\n1,2\n", "t,y\n1,abc\n", "t,y\n", "t,y\n1,NaN\n", "t,y\n1\n"] {
            assert!(matches!(ingest_reader(bad.as_bytes()), Err(HarnessError::MalformedCsv(_))), "{bad}");
        }
    }

    #[test]
    fn series_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("y.csv");
        let y = vec![0.1 + 0.2, -1.0 / 3.0, 1e-300, 12345.678901234567];
        write_series(&p, "y", &y).unwrap();
        assert_eq!(ingest_csv(&p).unwrap(), y);
    }
}
