//! Flat-file formats: the observation CSV and the JSON configuration files.

use std::fs;
use std::io::Write;
use std::path::Path;

use iee_core::dataset::{DatasetError, LongitudinalDataset, RawRow};
use iee_core::grouping::{ExplicitLabel, GroupingSpec};
use iee_core::simulation::ScenarioSpec;
use serde::Deserialize;

use crate::error::CliError;

const FIXED_COLUMNS: [&str; 3] = ["subject", "visit", "y"];

/// A dataset together with its covariate column names.
#[derive(Debug, Clone)]
pub struct Table {
    pub dataset: LongitudinalDataset,
    pub covariate_names: Vec<String>,
}

/// Reads `subject,visit,y,x1,...,xp`, one row per observation.
pub fn read_csv(path: &Path) -> Result<Table, CliError> {
    let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    read_csv_from(file, &path.display().to_string())
}

pub fn read_csv_from(reader: impl std::io::Read, name: &str) -> Result<Table, CliError> {
    let fail = |line: Option<u64>, msg: String| {
        CliError::Input(match line {
            Some(l) => format!("{name}, line {l}: {msg}"),
            None => format!("{name}: {msg}"),
        })
    };
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| fail(Some(1), e.to_string()))?
        .clone();
    let names: Vec<&str> = header.iter().collect();
    if names.len() < 4 || names[..3] != FIXED_COLUMNS {
        return Err(fail(
            Some(1),
            "header must be `subject,visit,y,x1,...,xp` with at least one covariate".into(),
        ));
    }
    let covariate_names: Vec<String> = names[3..].iter().map(|s| s.to_string()).collect();
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line());
            fail(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let number = |col: usize| -> Result<f64, CliError> {
            let raw = &record[col];
            raw.parse::<f64>().map_err(|_| {
                fail(
                    Some(line),
                    format!("column `{}`: `{raw}` is not a number", names[col]),
                )
            })
        };
        let visit = record[1].parse::<usize>().map_err(|_| {
            fail(
                Some(line),
                format!("column `visit`: `{}` is not a positive integer", &record[1]),
            )
        })?;
        let covariates = (3..record.len())
            .map(number)
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(RawRow {
            subject: record[0].to_string(),
            visit,
            response: number(2)?,
            covariates,
        });
        lines.push(line);
    }
    let dataset = LongitudinalDataset::from_rows(&rows).map_err(|e| match row_of(&e) {
        Some(row) => {
            let msg = e.to_string();
            let stripped = msg
                .strip_prefix(&format!("row {row}: "))
                .unwrap_or(&msg)
                .to_string();
            fail(Some(lines[row]), stripped)
        }
        None => fail(None, e.to_string()),
    })?;
    Ok(Table {
        dataset,
        covariate_names,
    })
}

fn row_of(e: &DatasetError) -> Option<usize> {
    match e {
        DatasetError::DuplicateVisit { row, .. }
        | DatasetError::CovariateArity { row, .. }
        | DatasetError::NonFinite { row, .. }
        | DatasetError::InvalidVisit { row, .. } => Some(*row),
        _ => None,
    }
}

/// Writes the dataset in the format [`read_csv`] accepts. Values are
/// printed in shortest round-trip form, so reading back is exact.
pub fn write_csv(table: &Table, out: impl Write) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<&str> = FIXED_COLUMNS.to_vec();
    header.extend(table.covariate_names.iter().map(String::as_str));
    w.write_record(&header)?;
    for s in table.dataset.subjects() {
        for (a, visit) in s.visits.iter().enumerate() {
            let mut record = vec![s.id.clone(), visit.to_string(), s.responses[a].to_string()];
            record.extend(s.covariates.row(a).iter().map(|x| x.to_string()));
            w.write_record(&record)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
enum GroupingFile {
    PairOnly,
    ByCovariate { column: String },
    Explicit { labels: Vec<LabelEntry> },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelEntry {
    subject: SubjectId,
    j: usize,
    k: usize,
    l: i64,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum SubjectId {
    Text(String),
    Number(i64),
}

impl SubjectId {
    fn into_string(self) -> String {
        match self {
            SubjectId::Text(s) => s,
            SubjectId::Number(n) => n.to_string(),
        }
    }
}

/// Parses a grouping document, resolving covariate names against the CSV
/// header.
pub fn parse_grouping(
    text: &str,
    covariate_names: &[String],
    name: &str,
) -> Result<GroupingSpec, CliError> {
    let file: GroupingFile =
        serde_json::from_str(text).map_err(|e| CliError::Input(format!("{name}: {e}")))?;
    Ok(match file {
        GroupingFile::PairOnly => GroupingSpec::PairOnly,
        GroupingFile::ByCovariate { column } => {
            let index = covariate_names
                .iter()
                .position(|c| *c == column)
                .ok_or_else(|| {
                    CliError::Input(format!(
                        "{name}: column `{column}` is not a covariate (have {})",
                        covariate_names.join(", ")
                    ))
                })?;
            GroupingSpec::ByCovariate { column: index }
        }
        GroupingFile::Explicit { labels } => GroupingSpec::Explicit {
            labels: labels
                .into_iter()
                .map(|e| ExplicitLabel {
                    subject: e.subject.into_string(),
                    j: e.j,
                    k: e.k,
                    label: e.l,
                })
                .collect(),
        },
    })
}

pub fn read_grouping(path: &Path, covariate_names: &[String]) -> Result<GroupingSpec, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_grouping(&text, covariate_names, &path.display().to_string())
}

pub fn read_scenario(path: &Path) -> Result<ScenarioSpec, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let spec: ScenarioSpec = serde_json::from_str(&text).map_err(|e| CliError::io(path, e))?;
    spec.validate().map_err(|e| CliError::io(path, e))?;
    Ok(spec)
}

/// Writes `contents` to `path`, or to standard output when `path` is `None`.
pub fn emit(path: Option<&Path>, contents: &str) -> Result<(), CliError> {
    match path {
        Some(p) => fs::write(p, contents).map_err(|e| CliError::io(p, e)),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(contents.as_bytes())
                .and_then(|_| out.flush())
                .map_err(|e| CliError::Input(format!("stdout: {e}")))
        }
    }
}
