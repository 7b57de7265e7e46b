//! Per-peer gradient-computation cost model and the published cost tables.
//!
//! Serverless: `(lambda_rate * num_batches + ec2_rate) * computation_time`.
//! Instance: `ec2_rate * computation_time`.
//!
//! The serverless formula charges every batch's function rate for the whole
//! computation time rather than per invocation. It is kept as is; the summed
//! per-invocation billing from the executor is reported next to it.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance for matching published cost cells, USD.
pub const TABLE_TOLERANCE_USD: f64 = 0.0001;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    Serverless,
    Instance,
}

impl Architecture {
    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::Serverless => "serverless",
            Architecture::Instance => "instance",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostInputs {
    pub num_batches: usize,
    pub lambda_rate_usd_per_s: f64,
    pub ec2_rate_usd_per_s: f64,
    pub computation_time_s: f64,
    pub lambda_memory_mb: u32,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub architecture: Architecture,
    pub cost_per_peer_usd: f64,
    pub inputs: CostInputs,
    /// Sum of per-invocation billing, when the run measured one.
    pub measured_lambda_billing_usd: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Comparison {
    pub cost_ratio: f64,
    pub time_reduction_pct: f64,
}

fn non_negative(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::Validation(format!("{name} must be finite and >= 0, got {v}")))
    }
}

pub fn serverless_cost(inputs: &CostInputs) -> Result<f64> {
    non_negative("lambda rate", inputs.lambda_rate_usd_per_s)?;
    non_negative("EC2 rate", inputs.ec2_rate_usd_per_s)?;
    non_negative("computation time", inputs.computation_time_s)?;
    if inputs.num_batches == 0 {
        return Err(Error::Validation("serverless cost needs at least one batch".into()));
    }
    Ok((inputs.lambda_rate_usd_per_s * inputs.num_batches as f64 + inputs.ec2_rate_usd_per_s)
        * inputs.computation_time_s)
}

pub fn instance_cost(ec2_rate_usd_per_s: f64, computation_time_s: f64) -> Result<f64> {
    non_negative("EC2 rate", ec2_rate_usd_per_s)?;
    non_negative("computation time", computation_time_s)?;
    Ok(ec2_rate_usd_per_s * computation_time_s)
}

pub fn serverless_report(inputs: CostInputs, measured_lambda_billing_usd: Option<f64>) -> Result<CostReport> {
    Ok(CostReport {
        architecture: Architecture::Serverless,
        cost_per_peer_usd: serverless_cost(&inputs)?,
        inputs,
        measured_lambda_billing_usd,
    })
}

pub fn instance_report(inputs: CostInputs) -> Result<CostReport> {
    Ok(CostReport {
        architecture: Architecture::Instance,
        cost_per_peer_usd: instance_cost(inputs.ec2_rate_usd_per_s, inputs.computation_time_s)?,
        inputs,
        measured_lambda_billing_usd: None,
    })
}

/// Cost ratio serverless/instance and the percentage of compute time saved.
pub fn compare_architectures(serverless: &CostReport, instance: &CostReport) -> Result<Comparison> {
    let it = instance.inputs.computation_time_s;
    if instance.cost_per_peer_usd == 0.0 {
        return Err(Error::Division("instance cost is zero".into()));
    }
    if it == 0.0 {
        return Err(Error::Division("instance computation time is zero".into()));
    }
    Ok(Comparison {
        cost_ratio: serverless.cost_per_peer_usd / instance.cost_per_peer_usd,
        time_reduction_pct: 100.0 * (it - serverless.inputs.computation_time_s) / it,
    })
}

/// One column of a published cost table.
#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct PaperCostRow {
    pub architecture: Architecture,
    pub batch_size: usize,
    pub num_batches: Option<usize>,
    pub instance_type: String,
    pub lambda_memory_mb: Option<u32>,
    pub time_s: f64,
    pub ec2_rate_usd_per_s: f64,
    pub lambda_rate_usd_per_s: Option<f64>,
    pub published_cost_usd: f64,
}

const PAPER_TABLES: &str = include_str!("../data/paper_cost_tables.csv");

pub fn paper_cost_rows() -> Vec<PaperCostRow> {
    csv::Reader::from_reader(PAPER_TABLES.as_bytes())
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .expect("bundled cost table parses")
}

impl PaperCostRow {
    pub fn inputs(&self) -> CostInputs {
        CostInputs {
            num_batches: self.num_batches.unwrap_or(1),
            lambda_rate_usd_per_s: self.lambda_rate_usd_per_s.unwrap_or(0.0),
            ec2_rate_usd_per_s: self.ec2_rate_usd_per_s,
            computation_time_s: self.time_s,
            lambda_memory_mb: self.lambda_memory_mb.unwrap_or(0),
            batch_size: self.batch_size,
        }
    }

    pub fn report(&self) -> Result<CostReport> {
        match self.architecture {
            Architecture::Serverless => serverless_report(self.inputs(), None),
            Architecture::Instance => instance_report(self.inputs()),
        }
    }
}

/// Optional rate overrides for the table reproduction.
#[derive(Clone, Copy, Debug, Default)]
pub struct RateOverrides {
    pub lambda_rate_usd_per_s: Option<f64>,
    pub ec2_rate_usd_per_s: Option<f64>,
}

impl RateOverrides {
    pub fn is_empty(&self) -> bool {
        self.lambda_rate_usd_per_s.is_none() && self.ec2_rate_usd_per_s.is_none()
    }
}

#[derive(Clone, Debug)]
pub struct ReproducedCell {
    pub row: PaperCostRow,
    pub report: CostReport,
}

impl ReproducedCell {
    pub fn deviation_usd(&self) -> f64 {
        (self.report.cost_per_peer_usd - self.row.published_cost_usd).abs()
    }

    pub fn matches(&self) -> bool {
        self.deviation_usd() <= TABLE_TOLERANCE_USD
    }
}

#[derive(Clone, Debug)]
pub struct PaperTables {
    pub cells: Vec<ReproducedCell>,
    pub overridden: bool,
}

impl PaperTables {
    pub fn reproduce(overrides: RateOverrides) -> Result<Self> {
        let cells = paper_cost_rows()
            .into_iter()
            .map(|mut row| {
                if let Some(r) = overrides.ec2_rate_usd_per_s {
                    row.ec2_rate_usd_per_s = r;
                }
                if let (Some(r), Architecture::Serverless) = (overrides.lambda_rate_usd_per_s, row.architecture) {
                    row.lambda_rate_usd_per_s = Some(r);
                }
                Ok(ReproducedCell {
                    report: row.report()?,
                    row,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            cells,
            overridden: !overrides.is_empty(),
        })
    }

    fn column(&self, arch: Architecture) -> Vec<&ReproducedCell> {
        self.cells.iter().filter(|c| c.row.architecture == arch).collect()
    }

    pub fn mismatches(&self) -> Vec<&ReproducedCell> {
        self.cells.iter().filter(|c| !c.matches()).collect()
    }

    /// Serverless/instance comparison at one batch size.
    pub fn comparison(&self, batch_size: usize) -> Result<Comparison> {
        let find = |arch| {
            self.cells
                .iter()
                .find(|c| c.row.architecture == arch && c.row.batch_size == batch_size)
                .ok_or_else(|| Error::Validation(format!("no {} column for batch size {batch_size}", arch.as_str())))
        };
        compare_architectures(&find(Architecture::Serverless)?.report, &find(Architecture::Instance)?.report)
    }

    /// Both tables laid out as published: one column per batch size, with
    /// the reproduced cost row followed by the published value and deviation.
    pub fn render(&self) -> String {
        fn line(out: &mut String, label: &str, cells: &[String]) {
            let _ = write!(out, "| {label:<48} |");
            for c in cells {
                let _ = write!(out, " {c:>12} |");
            }
            out.push('\n');
        }
        let usd = |v: f64, places: usize| format!("${v:.places$}");
        let mut out = String::new();

        let s = self.column(Architecture::Serverless);
        out.push_str("Time and Cost Evaluation of Compute Gradients (with Serverless)\n");
        line(&mut out, "Batch Size", &s.iter().map(|c| c.row.batch_size.to_string()).collect::<Vec<_>>());
        line(&mut out, "Number of batches", &s.iter().map(|c| c.report.inputs.num_batches.to_string()).collect::<Vec<_>>());
        line(&mut out, "Instance Type", &s.iter().map(|c| c.row.instance_type.clone()).collect::<Vec<_>>());
        line(&mut out, "Lambda Memory size", &s.iter().map(|c| format!("{} MB", c.report.inputs.lambda_memory_mb)).collect::<Vec<_>>());
        line(&mut out, "Time to Compute Gradients (seconds)", &s.iter().map(|c| format!("{}", c.row.time_s)).collect::<Vec<_>>());
        line(&mut out, "Estimated EC2 instance Cost (USD / seconds)", &s.iter().map(|c| usd(c.report.inputs.ec2_rate_usd_per_s, 8)).collect::<Vec<_>>());
        line(&mut out, "Estimated Lambda Cost (USD / seconds)", &s.iter().map(|c| usd(c.report.inputs.lambda_rate_usd_per_s, 7)).collect::<Vec<_>>());
        self.cost_rows(&mut out, &s, line);
        out.push('\n');

        let i = self.column(Architecture::Instance);
        out.push_str("Time and Cost Evaluation of Compute Gradients (without Serverless)\n");
        line(&mut out, "batch size", &i.iter().map(|c| c.row.batch_size.to_string()).collect::<Vec<_>>());
        line(&mut out, "Instance Type", &i.iter().map(|c| c.row.instance_type.clone()).collect::<Vec<_>>());
        line(&mut out, "Time to Compute Gradients (seconds)", &i.iter().map(|c| format!("{}", c.row.time_s)).collect::<Vec<_>>());
        line(&mut out, "Estimated EC2 instance Cost (USD / seconds)", &i.iter().map(|c| usd(c.report.inputs.ec2_rate_usd_per_s, 8)).collect::<Vec<_>>());
        self.cost_rows(&mut out, &i, line);
        out
    }

    fn cost_rows(&self, out: &mut String, cells: &[&ReproducedCell], line: fn(&mut String, &str, &[String])) {
        line(out, "Estimated Compute Gradients Cost per Peer (USD)", &cells.iter().map(|c| format!("${:.5}", c.report.cost_per_peer_usd)).collect::<Vec<_>>());
        if self.overridden {
            return;
        }
        line(out, "  published", &cells.iter().map(|c| format!("${:.5}", c.row.published_cost_usd)).collect::<Vec<_>>());
        line(
            out,
            "  deviation",
            &cells
                .iter()
                .map(|c| format!("{}{:.5}", if c.matches() { "" } else { "!" }, c.deviation_usd()))
                .collect::<Vec<_>>(),
        );
    }
}
