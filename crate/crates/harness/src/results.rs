use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One metric value. `config_hash` names the run that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub config_hash: String,
    pub scenario: String,
    pub metric: String,
    pub value: f64,
    pub budget: Option<usize>,
    pub loss: Option<String>,
    pub defense: Option<String>,
    /// Free-form qualifier such as `tau=1.5` or `bits=8`.
    pub setting: Option<String>,
}

pub const CSV_HEADER: [&str; 8] = ["config_hash", "scenario", "metric", "value", "budget", "loss", "defense", "setting"];

impl ResultRow {
    pub fn fields(&self) -> [String; 8] {
        let opt = |o: &Option<String>| o.clone().unwrap_or_default();
        [
            self.config_hash.clone(),
            self.scenario.clone(),
            self.metric.clone(),
            self.value.to_string(),
            self.budget.map(|b| b.to_string()).unwrap_or_default(),
            opt(&self.loss),
            opt(&self.defense),
            opt(&self.setting),
        ]
    }
}

pub fn write_rows(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record(r.fields())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<ResultRow>, _>>()?)
}

pub fn write_json_lines(path: &Path, lines: &[serde_json::Value]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for l in lines {
        writeln!(f, "{l}")?;
    }
    Ok(())
}
