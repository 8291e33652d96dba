//! CSV ingestion.
//!
//! A header row is required with a `t` column plus the model's value columns: `y` for
//! `poisson_growth` and `linear_gaussian`, `S` and `I` for `sir`, `n` and `y` for
//! `rw2_binomial`. Other columns are ignored. Empty cells and `NA` are missing values; rows
//! without any model value are skipped.

use std::path::Path;

use slam_core::models::{BuiltinModel, Model, Observation, Observations, TimeGrid};

use crate::CliError;

/// Model value columns in file order.
pub fn value_columns(model: &BuiltinModel) -> &'static [&'static str] {
    match model {
        BuiltinModel::PoissonGrowth(_) | BuiltinModel::LinearGaussian(_) => &["y"],
        BuiltinModel::Sir(_) => &["S", "I"],
        BuiltinModel::Rw2Binomial(_) => &["n", "y"],
    }
}

/// Names of the latent coordinates, used as path column headers.
pub fn path_columns(model: &BuiltinModel) -> &'static [&'static str] {
    match model {
        BuiltinModel::PoissonGrowth(_) | BuiltinModel::LinearGaussian(_) => &["y"],
        BuiltinModel::Sir(_) => &["S", "I"],
        BuiltinModel::Rw2Binomial(_) => &["x", "slope"],
    }
}

fn cell(record: &csv::StringRecord, idx: usize, row: usize, col: &str) -> Result<Option<f64>, CliError> {
    let s = record.get(idx).unwrap_or("").trim();
    if s.is_empty() || s == "NA" {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|_| CliError::Data(format!("row {row}, column {col}: cannot parse {s:?}")))
}

/// Reads the data rows into a grid with one point per row and the matching observations.
pub fn load(path: &Path, model: &BuiltinModel) -> Result<(TimeGrid, Observations), CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?
        .clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Data(format!("{}: missing column {name:?}", path.display())))
    };
    let t_col = find("t")?;
    let cols = value_columns(model)
        .iter()
        .map(|c| find(c).map(|i| (i, *c)))
        .collect::<Result<Vec<_>, _>>()?;

    let mut times = Vec::new();
    let mut points = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let row = r + 2;
        let rec = rec.map_err(|e| CliError::Data(format!("row {row}: {e}")))?;
        let values = cols
            .iter()
            .map(|&(i, c)| cell(&rec, i, row, c))
            .collect::<Result<Vec<_>, _>>()?;
        if values.iter().all(Option::is_none) {
            continue;
        }
        let t = cell(&rec, t_col, row, "t")?.ok_or_else(|| CliError::Data(format!("row {row}: missing t")))?;
        let obs = match model {
            BuiltinModel::Rw2Binomial(_) => Observation {
                values: vec![values[1], None],
                trials: values[0],
            },
            _ => Observation { values, trials: None },
        };
        model
            .check_observation(&obs)
            .map_err(|e| CliError::Data(format!("row {row}: {e}")))?;
        times.push(t);
        points.push(obs);
    }
    if times.is_empty() {
        return Err(CliError::Data(format!("{}: no data rows", path.display())));
    }
    let grid = TimeGrid::from_data_times(times).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok((grid, Observations { points }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use slam_core::models::{rw2_binomial_model, sir_model};
    use std::io::Write;

    fn file(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn reads_sir_with_missing_values() {
        let f = file("t,S,I,note\n0,762,1,x\n1,,3,\n1.5,NA,NA,skip\n2,, 8,\n");
        let (grid, obs) = load(f.path(), &sir_model()).unwrap();
        assert_eq!(grid.times(), &[0.0, 1.0, 2.0]);
        assert_eq!(obs.points[1].values, vec![None, Some(3.0)]);
    }

    #[test]
    fn reads_binomial_counts() {
        let f = file("day,t,n,y\n1,1,2,0\n2,2,2,1\n");
        let (_, obs) = load(f.path(), &rw2_binomial_model(1e6)).unwrap();
        assert_eq!(obs.points[1].trials, Some(2.0));
        assert_eq!(obs.points[1].values, vec![Some(1.0), None]);
    }

    #[test]
    fn data_errors() {
        let m = sir_model();
        for text in ["t,S,I\n", "t,S\n0,1\n", "t,S,I\n0,abc,1\n", "t,S,I\n1,5,1\n0,5,1\n", "t,S,I\n0,-5,1\n"] {
            let f = file(text);
            assert!(matches!(load(f.path(), &m), Err(CliError::Data(_))), "{text}");
        }
        let f = file("t,S,I\n");
        match load(f.path(), &m) {
            Err(CliError::Data(msg)) => assert!(msg.contains("no data rows")),
            other => panic!("{other:?}"),
        }
    }
}
