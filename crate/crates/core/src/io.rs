//! CSV formats for survey datasets, tract marginals, synthetic populations
//! and benchmark tables. All writers use a fixed header and LF line endings.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use crate::codebook::{Code, Codebook, DatasetError, RejectReason, Row, SurveyDataset};
use crate::ipf::{MarginalRow, SyntheticIndividual, SyntheticPopulation};
use crate::sae::{BenchmarkTable, SaeError};

/// Name of the optional design-weight column of a survey CSV.
pub const WEIGHT_COLUMN: &str = "_WEIGHT";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error("header mismatch: expected `{expected}`, found `{found}`")]
    Header { expected: String, found: String },
    #[error("line {line}: invalid record: {}", .reasons.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    InvalidRow {
        line: u64,
        reasons: Vec<RejectReason>,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Sae(#[from] SaeError),
}

impl IoError {
    fn at(path: &Path, source: std::io::Error) -> Self {
        IoError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

fn csv_err(e: csv::Error) -> IoError {
    let line = e.position().map_or(0, |p| p.line());
    IoError::Csv {
        line,
        message: e.to_string(),
    }
}

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(r)
}

fn parse_cell<T: std::str::FromStr>(cell: &str, line: u64, column: &str) -> Result<T, IoError> {
    cell.parse().map_err(|_| IoError::Csv {
        line,
        message: format!("column `{column}`: cannot parse `{cell}`"),
    })
}

/// Zero-pads all-digit tract ids shorter than 11 characters (leading zeros
/// dropped by spreadsheet tools); other ids are only trimmed.
pub fn normalize_geoid(raw: &str) -> String {
    let s = raw.trim().trim_matches('"');
    if !s.is_empty() && s.len() < 11 && s.bytes().all(|b| b.is_ascii_digit()) {
        format!("{s:0>11}")
    } else {
        s.to_string()
    }
}

fn open(path: &Path) -> Result<File, IoError> {
    File::open(path).map_err(|e| IoError::at(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>, IoError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| IoError::at(dir, e))?;
        }
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| IoError::at(path, e))
}

// ---- survey datasets -------------------------------------------------------

pub fn survey_header(codebook: &Codebook, weighted: bool) -> String {
    let mut h: Vec<&str> = codebook.names().collect();
    if weighted {
        h.push(WEIGHT_COLUMN);
    }
    h.join(",")
}

pub(crate) fn format_row(row: &[Code]) -> String {
    let cells: Vec<String> = row.iter().map(ToString::to_string).collect();
    cells.join(",")
}

pub fn write_survey<W: Write>(dataset: &SurveyDataset, mut w: W) -> std::io::Result<()> {
    let weighted = dataset.weights().is_some();
    writeln!(w, "{}", survey_header(dataset.codebook(), weighted))?;
    for (i, row) in dataset.rows().iter().enumerate() {
        if weighted {
            // `{}` on f64 is the shortest representation that round-trips
            writeln!(w, "{},{}", format_row(row), dataset.weight(i))?;
        } else {
            writeln!(w, "{}", format_row(row))?;
        }
    }
    w.flush()
}

pub fn write_survey_file(dataset: &SurveyDataset, path: &Path) -> Result<(), IoError> {
    write_survey(dataset, create(path)?).map_err(|e| IoError::at(path, e))
}

/// Reads a survey CSV whose header is the codebook variables in order plus
/// an optional trailing `_WEIGHT` column. Any out-of-range row is an error.
pub fn read_survey<R: Read>(
    r: R,
    codebook: Arc<Codebook>,
    provenance: impl Into<String>,
) -> Result<SurveyDataset, IoError> {
    let mut rdr = reader(r);
    let header: Vec<String> = rdr
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(String::from)
        .collect();
    let names: Vec<&str> = codebook.names().collect();
    let weighted =
        header.len() == names.len() + 1 && header.last().map(String::as_str) == Some(WEIGHT_COLUMN);
    let var_cols = if weighted {
        &header[..names.len()]
    } else {
        &header[..]
    };
    if var_cols != names.as_slice() {
        return Err(IoError::Header {
            expected: survey_header(&codebook, false),
            found: header.join(","),
        });
    }
    let mut rows = Vec::new();
    let mut weights = weighted.then(Vec::new);
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line());
        let mut row = Vec::with_capacity(names.len());
        for (cell, name) in rec.iter().zip(&names) {
            row.push(parse_cell::<Code>(cell, line, name)?);
        }
        let reasons: Vec<RejectReason> = codebook
            .variables()
            .iter()
            .zip(&row)
            .filter(|(v, c)| !v.contains(**c))
            .map(|(v, &code)| RejectReason::OutOfRange {
                variable: v.name.clone(),
                code,
            })
            .collect();
        if !reasons.is_empty() {
            return Err(IoError::InvalidRow { line, reasons });
        }
        rows.push(row);
        if let Some(w) = &mut weights {
            w.push(parse_cell::<f64>(&rec[names.len()], line, WEIGHT_COLUMN)?);
        }
    }
    Ok(SurveyDataset::from_rows(
        codebook, rows, weights, provenance,
    )?)
}

pub fn read_survey_file(path: &Path, codebook: Arc<Codebook>) -> Result<SurveyDataset, IoError> {
    let provenance = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_survey(open(path)?, codebook, provenance)
}

// ---- marginals ---------------------------------------------------------------

pub const MARGINALS_HEADER: &str = "geoid,variable,code,count";

pub fn read_marginals<R: Read>(r: R) -> Result<Vec<MarginalRow>, IoError> {
    let mut rdr = reader(r);
    let header: Vec<String> = rdr
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(String::from)
        .collect();
    if header.join(",") != MARGINALS_HEADER {
        return Err(IoError::Header {
            expected: MARGINALS_HEADER.into(),
            found: header.join(","),
        });
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line());
        out.push(MarginalRow {
            geoid: normalize_geoid(&rec[0]),
            variable: rec[1].to_string(),
            code: parse_cell(&rec[2], line, "code")?,
            count: parse_cell(&rec[3], line, "count")?,
            line: line as usize,
        });
    }
    Ok(out)
}

pub fn read_marginals_file(path: &Path) -> Result<Vec<MarginalRow>, IoError> {
    read_marginals(open(path)?)
}

pub fn write_marginals<W: Write>(rows: &[MarginalRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{MARGINALS_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.geoid, r.variable, r.code, r.count)?;
    }
    w.flush()
}

// ---- populations -------------------------------------------------------------

pub fn population_header(codebook: &Codebook) -> String {
    format!("person_id,geoid,{}", survey_header(codebook, false))
}

/// Writes individuals in geoid-then-person_id order.
pub fn write_population<W: Write>(pop: &SyntheticPopulation, mut w: W) -> std::io::Result<()> {
    writeln!(w, "{}", population_header(pop.codebook()))?;
    let mut order: Vec<&SyntheticIndividual> = pop.individuals.iter().collect();
    // synthesized populations are already ordered; this only matters for
    // hand-assembled ones
    if !order
        .windows(2)
        .all(|p| (&p[0].geoid, p[0].person_id) <= (&p[1].geoid, p[1].person_id))
    {
        order.sort_by(|a, b| (&a.geoid, a.person_id).cmp(&(&b.geoid, b.person_id)));
    }
    for ind in order {
        writeln!(
            w,
            "{},{},{}",
            ind.person_id,
            ind.geoid,
            format_row(&ind.values)
        )?;
    }
    w.flush()
}

pub fn write_population_file(pop: &SyntheticPopulation, path: &Path) -> Result<(), IoError> {
    write_population(pop, create(path)?).map_err(|e| IoError::at(path, e))
}

pub fn read_population<R: Read>(
    r: R,
    codebook: Arc<Codebook>,
    provenance: impl Into<String>,
) -> Result<SyntheticPopulation, IoError> {
    let mut rdr = reader(r);
    let header: Vec<String> = rdr
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(String::from)
        .collect();
    let expected = population_header(&codebook);
    if header.join(",") != expected {
        return Err(IoError::Header {
            expected,
            found: header.join(","),
        });
    }
    let names: Vec<&str> = codebook.names().collect();
    let mut shared_rows: HashMap<Vec<Code>, Row> = HashMap::new();
    let mut shared_geoids: HashMap<String, Arc<str>> = HashMap::new();
    let mut individuals = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line());
        let person_id: u64 = parse_cell(&rec[0], line, "person_id")?;
        let geoid = normalize_geoid(&rec[1]);
        let mut row = Vec::with_capacity(names.len());
        for (cell, name) in rec.iter().skip(2).zip(&names) {
            row.push(parse_cell::<Code>(cell, line, name)?);
        }
        let reasons: Vec<RejectReason> = codebook
            .variables()
            .iter()
            .zip(&row)
            .filter(|(v, c)| !v.contains(**c))
            .map(|(v, &code)| RejectReason::OutOfRange {
                variable: v.name.clone(),
                code,
            })
            .collect();
        if !reasons.is_empty() {
            return Err(IoError::InvalidRow { line, reasons });
        }
        let values = shared_rows
            .entry(row)
            .or_insert_with_key(|k| Row::from(k.as_slice()))
            .clone();
        let geoid = shared_geoids
            .entry(geoid)
            .or_insert_with_key(|k| Arc::from(k.as_str()))
            .clone();
        individuals.push(SyntheticIndividual {
            person_id,
            geoid,
            values,
        });
    }
    Ok(SyntheticPopulation::new(
        codebook,
        individuals,
        provenance,
        0,
    ))
}

pub fn read_population_file(
    path: &Path,
    codebook: Arc<Codebook>,
) -> Result<SyntheticPopulation, IoError> {
    let provenance = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_population(open(path)?, codebook, provenance)
}

// ---- benchmarks ----------------------------------------------------------------

pub const BENCHMARK_HEADER: &str = "geoid,value";

/// Reads a `geoid,value` table. Percent-scaled tables are rescaled by
/// [`BenchmarkTable::new`].
pub fn read_benchmark<R: Read>(r: R, source: impl Into<String>) -> Result<BenchmarkTable, IoError> {
    let mut rdr = reader(r);
    let header: Vec<String> = rdr
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(String::from)
        .collect();
    if header.join(",") != BENCHMARK_HEADER {
        return Err(IoError::Header {
            expected: BENCHMARK_HEADER.into(),
            found: header.join(","),
        });
    }
    let mut values = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line());
        values.push((
            normalize_geoid(&rec[0]),
            parse_cell::<f64>(&rec[1], line, "value")?,
        ));
    }
    Ok(BenchmarkTable::new(source, values)?)
}

pub fn read_benchmark_file(
    path: &Path,
    source: impl Into<String>,
) -> Result<BenchmarkTable, IoError> {
    read_benchmark(open(path)?, source)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cb() -> Arc<Codebook> {
        Arc::new(
            Codebook::from_json_str(
                r#"{"variables":[{"name":"sex","codes":[1,2],"role":"demographic"},
                                 {"name":"insurance","codes":[1,4,88],"role":"health"}]}"#,
            )
            .unwrap(),
        )
    }

    #[test]
    fn geoid_normalization() {
        assert_eq!(normalize_geoid("8031000100"), "08031000100");
        assert_eq!(normalize_geoid(" 08031000100 "), "08031000100");
        assert_eq!(normalize_geoid("tract-A"), "tract-A");
    }

    #[test]
    fn survey_roundtrip_weighted() {
        let ds = SurveyDataset::from_rows(
            cb(),
            vec![vec![1, 88], vec![2, 4]],
            Some(vec![0.1 + 0.2, 3.0]),
            "s",
        )
        .unwrap();
        let mut buf = Vec::new();
        write_survey(&ds, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            text,
            "sex,insurance,_WEIGHT\n1,88,0.30000000000000004\n2,4,3\n"
        );
        let back = read_survey(&buf[..], cb(), "s").unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn survey_errors_carry_line_numbers() {
        let err = read_survey("sex,insurance\n1,88\n2,99\n".as_bytes(), cb(), "s").unwrap_err();
        assert!(matches!(err, IoError::InvalidRow { line: 3, .. }), "{err}");
        let err = read_survey("insurance,sex\n1,88\n".as_bytes(), cb(), "s").unwrap_err();
        assert!(matches!(err, IoError::Header { .. }));
        let err = read_survey("sex,insurance\n1,x\n".as_bytes(), cb(), "s").unwrap_err();
        assert!(matches!(err, IoError::Csv { line: 2, .. }));
    }

    #[test]
    fn marginals_parse() {
        let rows =
            read_marginals("geoid,variable,code,count\n8001000100,sex,1,10\n".as_bytes()).unwrap();
        assert_eq!(rows[0].geoid, "08001000100");
        assert_eq!(rows[0].line, 2);
        assert_eq!(rows[0].count, 10.0);
        assert!(read_marginals("geoid,var,code,count\n".as_bytes()).is_err());
    }

    #[test]
    fn population_roundtrip() {
        let ds = SurveyDataset::from_rows(cb(), vec![vec![1, 88], vec![2, 4]], None, "s").unwrap();
        let mut inds = crate::ipf::expand(&ds, &[2, 1], "00000000001", 1).unwrap();
        inds.extend(crate::ipf::expand(&ds, &[0, 2], "00000000002", 4).unwrap());
        let pop = SyntheticPopulation::new(cb(), inds, "s", 0);
        let mut buf = Vec::new();
        write_population(&pop, &mut buf).unwrap();
        let back = read_population(&buf[..], cb(), "s").unwrap();
        assert_eq!(back.individuals, pop.individuals);
        assert!(String::from_utf8(buf)
            .unwrap()
            .starts_with("person_id,geoid,sex,insurance\n1,00000000001,1,88\n"));
    }
}
