use std::fs;
use std::path::PathBuf;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::results::{ResultRow, CSV_HEADER};
use crate::scenarios::run;

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub csv: PathBuf,
    pub runs: Vec<(String, Vec<ResultRow>)>,
}

/// One run per value of `axis`, in parallel, merged into one CSV whose
/// first two columns name the axis and its value.
pub fn sweep(base: &ExperimentConfig, axis: &str, values: &[String]) -> Result<SweepOutput> {
    let values: Vec<String> = values.iter().map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(HarnessError::Usage("sweep needs at least one value".into()));
    }
    let configs = values.iter().map(|v| base.with_override(axis, v)).collect::<Result<Vec<_>>>()?;
    let outputs = configs.par_iter().map(run).collect::<Vec<_>>();
    let outputs = outputs.into_iter().collect::<Result<Vec<_>>>()?;

    let mut h = Sha256::new();
    h.update(base.clone().resolve()?.hash());
    h.update(axis);
    for v in &values {
        h.update([0]);
        h.update(v);
    }
    let tag = hex::encode(h.finalize())[..12].to_string();
    let dir = base.out_dir.join(format!("sweep-{}-{tag}", base.scenario.name()));
    fs::create_dir_all(&dir)?;
    let csv = dir.join("results.csv");
    let mut w = csv::Writer::from_path(&csv)?;
    let mut header = vec!["axis", "axis_value"];
    header.extend(CSV_HEADER);
    w.write_record(&header)?;
    for (v, out) in values.iter().zip(&outputs) {
        for r in &out.rows {
            let mut rec = vec![axis.to_string(), v.clone()];
            rec.extend(r.fields());
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    let runs = values.into_iter().zip(outputs).map(|(v, o)| (v, o.rows)).collect();
    Ok(SweepOutput { csv, runs })
}
