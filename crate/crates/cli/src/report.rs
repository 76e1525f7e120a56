//! `report`: per-metric mean and standard deviation across run directories.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;

use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories, each holding a manifest.json.
    #[arg(required = true)]
    pub dirs: Vec<PathBuf>,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// One long-format output row.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct AggregateRow {
    pub metric: String,
    pub iteration: u64,
    pub mean: f64,
    pub std: f64,
    pub algo: String,
}

#[derive(Default)]
struct Table {
    metrics: Vec<String>,
    values: BTreeMap<(String, usize, u64), Vec<f64>>,
}

impl Table {
    fn metric_index(&mut self, name: &str) -> usize {
        match self.metrics.iter().position(|m| m == name) {
            Some(i) => i,
            None => {
                self.metrics.push(name.to_string());
                self.metrics.len() - 1
            }
        }
    }

    fn add_run(&mut self, dir: &Path) -> CliResult<()> {
        let manifest = RunManifest::load(dir)?;
        let path = dir.join(&manifest.metrics_csv);
        let name = path.display().to_string();
        let mut reader = csv::Reader::from_path(&path).map_err(|e| CliError::input(&name, e))?;
        let headers = reader.headers().map_err(|e| CliError::input(&name, e))?.clone();
        let it_col = headers
            .iter()
            .position(|h| h == "iteration")
            .ok_or_else(|| CliError::Input(format!("{name}: no iteration column")))?;
        let cols: Vec<(usize, usize)> =
            headers.iter().enumerate().filter(|(i, _)| *i != it_col).map(|(i, h)| (i, self.metric_index(h))).collect();
        for record in reader.records() {
            let record = record.map_err(|e| CliError::input(&name, e))?;
            let it: u64 = record[it_col].parse().map_err(|e| CliError::input(&name, e))?;
            for &(c, m) in &cols {
                // Empty and non-numeric cells (e.g. no exact return) are skipped.
                if let Ok(v) = record[c].parse::<f64>() {
                    self.values.entry((manifest.algo.clone(), m, it)).or_default().push(v);
                }
            }
        }
        Ok(())
    }
}

/// Sample standard deviation; 0 for a single value.
fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    (mean, (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

pub fn aggregate(dirs: &[PathBuf]) -> CliResult<Vec<AggregateRow>> {
    let mut table = Table::default();
    for d in dirs {
        table.add_run(d)?;
    }
    Ok(table
        .values
        .iter()
        .map(|((algo, m, it), xs)| {
            let (mean, std) = mean_std(xs);
            AggregateRow { metric: table.metrics[*m].clone(), iteration: *it, mean, std, algo: algo.clone() }
        })
        .collect())
}

pub fn cmd_report(args: &ReportArgs) -> CliResult<()> {
    let rows = aggregate(&args.dirs)?;
    let sink: Box<dyn std::io::Write> = match &args.out {
        Some(p) => Box::new(std::fs::File::create(p)?),
        None => Box::new(std::io::stdout()),
    };
    let mut w = csv::Writer::from_writer(sink);
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
