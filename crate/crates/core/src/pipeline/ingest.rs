use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PipelineConfig, PipelineError, Stage};
use crate::areal::io::{read_weights_csv, zones_from_geojson};
use crate::areal::{build_weight_matrix, ChangeLog, WeightMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct YearCounts {
    pub births: Option<u64>,
    pub deaths: Option<u64>,
}

/// Raw counts keyed by district then year.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CountTable(pub BTreeMap<String, BTreeMap<i32, YearCounts>>);

impl CountTable {
    pub fn get(&self, district: &str, year: i32) -> Option<&YearCounts> {
        self.0.get(district)?.get(&year)
    }

    pub fn births(&self, district: &str, year: i32) -> Option<u64> {
        self.get(district, year)?.births
    }

    pub fn deaths(&self, district: &str, year: i32) -> Option<u64> {
        self.get(district, year)?.deaths
    }

    pub fn districts(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn records(&self) -> usize {
        self.0.values().map(BTreeMap::len).sum()
    }
}

pub struct IngestedData {
    pub counts: CountTable,
    pub change_log: ChangeLog,
    pub epochs: BTreeMap<i32, WeightMatrix>,
    /// Districts on the final boundaries, in id order.
    pub targets: Vec<String>,
}

fn column(headers: &csv::StringRecord, name: &str, file: &str) -> Result<usize, PipelineError> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| PipelineError::Schema {
            file: file.into(),
            line: 1,
            detail: format!("missing column `{name}`"),
        })
}

fn parse_count(raw: &str, name: &str, file: &str, line: u64) -> Result<Option<u64>, PipelineError> {
    let raw = raw.trim();
    if raw.is_empty() || raw.eq_ignore_ascii_case("na") {
        return Ok(None);
    }
    let value: i64 = raw.parse().map_err(|_| PipelineError::Parse {
        file: file.into(),
        line,
        detail: format!("{name} `{raw}` is not an integer"),
    })?;
    if value < 0 {
        return Err(PipelineError::Schema {
            file: file.into(),
            line,
            detail: format!("negative {name} {value}"),
        });
    }
    Ok(Some(value as u64))
}

fn parse_year(raw: &str, file: &str, line: u64) -> Result<i32, PipelineError> {
    raw.trim().parse().map_err(|_| PipelineError::Parse {
        file: file.into(),
        line,
        detail: format!("year `{}` is not an integer", raw.trim()),
    })
}

/// Reads `district_id,year,births,deaths`. Empty or `NA` counts are missing.
pub fn read_counts(reader: impl Read, file: &str) -> Result<CountTable, PipelineError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| PipelineError::Parse {
            file: file.into(),
            line: 1,
            detail: e.to_string(),
        })?
        .clone();
    let id_col = column(&headers, "district_id", file)?;
    let year_col = column(&headers, "year", file)?;
    let births_col = column(&headers, "births", file)?;
    let deaths_col = column(&headers, "deaths", file)?;

    let mut table = CountTable::default();
    let mut seen: BTreeMap<(String, i32), u64> = BTreeMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| PipelineError::Parse {
            file: file.into(),
            line: e.position().map_or(0, |p| p.line()),
            detail: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |c: usize| record.get(c).unwrap_or("");
        let district = field(id_col).to_string();
        if district.is_empty() {
            return Err(PipelineError::Schema {
                file: file.into(),
                line,
                detail: "empty district_id".into(),
            });
        }
        let year = parse_year(field(year_col), file, line)?;
        let births = parse_count(field(births_col), "births", file, line)?;
        let deaths = parse_count(field(deaths_col), "deaths", file, line)?;
        if let Some(&first_line) = seen.get(&(district.clone(), year)) {
            return Err(PipelineError::DuplicateKey {
                file: file.into(),
                line,
                first_line,
                district,
                year,
            });
        }
        seen.insert((district.clone(), year), line);
        table.0.entry(district).or_default().insert(year, YearCounts { births, deaths });
    }
    Ok(table)
}

/// Reads `district_id,year`.
pub fn read_change_log(reader: impl Read, file: &str) -> Result<ChangeLog, PipelineError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| PipelineError::Parse {
            file: file.into(),
            line: 1,
            detail: e.to_string(),
        })?
        .clone();
    let id_col = column(&headers, "district_id", file)?;
    let year_col = column(&headers, "year", file)?;
    let mut entries = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| PipelineError::Parse {
            file: file.into(),
            line: e.position().map_or(0, |p| p.line()),
            detail: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let year = parse_year(record.get(year_col).unwrap_or(""), file, line)?;
        entries.push((record.get(id_col).unwrap_or("").to_string(), year));
    }
    ChangeLog::new(entries).map_err(|e| PipelineError::Schema {
        file: file.into(),
        line: 0,
        detail: e.to_string(),
    })
}

fn open(config: &PipelineConfig, path: &Path) -> Result<(std::fs::File, String), PipelineError> {
    let full = config.resolve(path);
    let file = std::fs::File::open(&full).map_err(|e| PipelineError::io(Stage::Ingest, &full, e))?;
    Ok((file, path.display().to_string()))
}

fn read_text(config: &PipelineConfig, path: &Path) -> Result<String, PipelineError> {
    let full = config.resolve(path);
    std::fs::read_to_string(&full).map_err(|e| PipelineError::io(Stage::Ingest, &full, e))
}

/// Loads every configured input. Boundary files are turned into weight
/// matrices against the target boundaries.
pub fn ingest(config: &PipelineConfig) -> Result<IngestedData, PipelineError> {
    let (file, name) = open(config, &config.inputs.counts)?;
    let counts = read_counts(file, &name)?;
    let change_log = match &config.inputs.change_log {
        Some(path) => {
            let (file, name) = open(config, path)?;
            read_change_log(file, &name)?
        }
        None => ChangeLog::default(),
    };

    let mut epochs = BTreeMap::new();
    for (year, path) in PipelineConfig::epoch_paths(&config.inputs.weights)? {
        let (file, name) = open(config, &path)?;
        let matrix = read_weights_csv(file).map_err(|e| PipelineError::Schema {
            file: name,
            line: 0,
            detail: e.to_string(),
        })?;
        epochs.insert(year, matrix.with_epochs(year, config.period[1]));
    }
    if let Some(target_path) = &config.inputs.targets {
        let geo = |path: &Path, epoch: i32| {
            zones_from_geojson(&read_text(config, path)?, &config.inputs.id_property, "epoch", Some(epoch)).map_err(
                |e| PipelineError::Schema {
                    file: path.display().to_string(),
                    line: 0,
                    detail: e.to_string(),
                },
            )
        };
        let targets = geo(target_path, config.period[1])?;
        for (year, path) in PipelineConfig::epoch_paths(&config.inputs.boundaries)? {
            let sources = geo(&path, year)?;
            let matrix = build_weight_matrix(&sources, &targets)
                .map_err(|e| PipelineError::stage(Stage::Interpolate, format!("epoch {year}: {e}")))?;
            epochs.insert(year, matrix.with_epochs(year, config.period[1]));
        }
    }

    let targets: Vec<String> = if epochs.is_empty() {
        counts.districts().cloned().collect()
    } else {
        epochs
            .values()
            .flat_map(|m| m.target_ids.iter().cloned())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    };
    Ok(IngestedData {
        counts,
        change_log,
        epochs,
        targets,
    })
}
