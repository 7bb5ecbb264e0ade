//! Evaluation report: aggregation, Table-1 layout rendering and the
//! directional checks stamped in the footer.

use std::fmt::Write as _;

use pqlabel_core::pool::Condition;
use pqlabel_core::shifts::SuiteKind;

use crate::config::{AcceptanceConfig, Head};
use crate::data_io::{render_csv, CsvTable, Stamp};
use crate::error::{Error, Result};

/// Accuracy and mean entropy of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metric {
    pub accuracy: f64,
    pub entropy: f64,
}

/// One shift spec's metrics for one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecResult {
    pub spec: String,
    pub metric: Metric,
}

/// Per-seed breakdown of one (suite, condition, head) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub specs: Vec<SpecResult>,
}

impl SeedRun {
    /// Unweighted mean over specs.
    pub fn suite_metric(&self) -> Metric {
        let n = self.specs.len() as f64;
        Metric {
            accuracy: self.specs.iter().map(|s| s.metric.accuracy).sum::<f64>() / n,
            entropy: self.specs.iter().map(|s| s.metric.entropy).sum::<f64>() / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Done(Vec<SeedRun>),
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub suite: SuiteKind,
    pub condition: Condition,
    pub head: Head,
    pub outcome: Outcome,
}

/// Mean and sample standard deviation over seeds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub entropy: f64,
    pub entropy_sd: f64,
    pub accuracy: f64,
    pub accuracy_sd: f64,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl Cell {
    pub fn summary(&self) -> Option<Summary> {
        let Outcome::Done(runs) = &self.outcome else { return None };
        let metrics: Vec<Metric> = runs.iter().map(SeedRun::suite_metric).collect();
        let (entropy, entropy_sd) = mean_sd(&metrics.iter().map(|m| m.entropy).collect::<Vec<_>>());
        let (accuracy, accuracy_sd) = mean_sd(&metrics.iter().map(|m| m.accuracy).collect::<Vec<_>>());
        Some(Summary { entropy, entropy_sd, accuracy, accuracy_sd })
    }
}

/// Training-label disagreement of one condition for one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Disagreement {
    pub condition: Condition,
    pub seed: u64,
    pub rate: f64,
    /// The noisy_single rate, when that condition's labels are available.
    pub target: Option<f64>,
    /// pool_frac actually used (differs from the config after calibration).
    pub pool_frac: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
    /// Displayed, not asserted.
    Reported,
    /// Required cells missing or failed.
    NotEvaluated,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::Reported => "REPORTED",
            Verdict::NotEvaluated => "NOT EVALUATED",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub id: &'static str,
    pub verdict: Verdict,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub stamp: Stamp,
    pub heads: Vec<Head>,
    pub conditions: Vec<Condition>,
    pub suites: Vec<SuiteKind>,
    pub cells: Vec<Cell>,
    pub disagreement: Vec<Disagreement>,
    /// Free-form lines shown under the tables.
    pub notes: Vec<String>,
    pub checks: Vec<Check>,
}

impl EvalReport {
    pub fn cell(&self, suite: SuiteKind, condition: Condition, head: Head) -> Option<&Cell> {
        self.cells.iter().find(|c| c.suite == suite && c.condition == condition && c.head == head)
    }

    pub fn summary(&self, suite: SuiteKind, condition: Condition, head: Head) -> Option<Summary> {
        self.cell(suite, condition, head).and_then(Cell::summary)
    }

    // ------------------------------------------------------------ CSV

    fn table_header(&self) -> Vec<String> {
        let mut h = vec!["suite".to_string(), "condition".to_string()];
        for head in &self.heads {
            for col in ["entropy", "entropy_sd", "accuracy", "accuracy_sd"] {
                h.push(format!("{}_{col}", head.as_str()));
            }
        }
        h
    }

    /// Table-1 layout: one row per (suite, condition), four columns per
    /// head. Failed cells hold `FAILED`.
    pub fn render_table_csv(&self) -> Result<String> {
        let mut rows = Vec::new();
        for &suite in &self.suites {
            for &condition in &self.conditions {
                let mut row = vec![suite.as_str().to_string(), condition.as_str().to_string()];
                for &head in &self.heads {
                    match self.summary(suite, condition, head) {
                        Some(s) => row.extend(
                            [s.entropy, s.entropy_sd, s.accuracy, s.accuracy_sd].iter().map(|v| format!("{v}")),
                        ),
                        None => row.extend(std::iter::repeat_n("FAILED".to_string(), 4)),
                    }
                }
                rows.push(row);
            }
        }
        render_csv(Some(&self.stamp), &self.table_header(), rows)
    }

    /// `suite,condition,head,seed,entropy,accuracy` per seed.
    pub fn render_seeds_csv(&self) -> Result<String> {
        let mut rows = Vec::new();
        for cell in &self.cells {
            if let Outcome::Done(runs) = &cell.outcome {
                for run in runs {
                    let m = run.suite_metric();
                    rows.push(vec![
                        cell.suite.as_str().to_string(),
                        cell.condition.as_str().to_string(),
                        cell.head.as_str().to_string(),
                        run.seed.to_string(),
                        format!("{}", m.entropy),
                        format!("{}", m.accuracy),
                    ]);
                }
            }
        }
        render_csv(Some(&self.stamp), &["suite", "condition", "head", "seed", "entropy", "accuracy"], rows)
    }

    /// Per shift spec values: `suite,spec,condition,head,seed,entropy,accuracy`.
    pub fn render_breakdown_csv(&self) -> Result<String> {
        let mut rows = Vec::new();
        for cell in &self.cells {
            if let Outcome::Done(runs) = &cell.outcome {
                for run in runs {
                    for s in &run.specs {
                        rows.push(vec![
                            cell.suite.as_str().to_string(),
                            s.spec.clone(),
                            cell.condition.as_str().to_string(),
                            cell.head.as_str().to_string(),
                            run.seed.to_string(),
                            format!("{}", s.metric.entropy),
                            format!("{}", s.metric.accuracy),
                        ]);
                    }
                }
            }
        }
        render_csv(Some(&self.stamp), &["suite", "spec", "condition", "head", "seed", "entropy", "accuracy"], rows)
    }

    pub fn render_disagreement_csv(&self) -> Result<String> {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v}"));
        let rows = self.disagreement.iter().map(|d| {
            vec![
                d.condition.as_str().to_string(),
                d.seed.to_string(),
                format!("{}", d.rate),
                opt(d.target),
                opt(d.target.map(|t| d.rate - t)),
                opt(d.pool_frac),
            ]
        });
        render_csv(Some(&self.stamp), &["condition", "seed", "rate", "target", "delta", "pool_frac"], rows)
    }

    // ------------------------------------------------------- Markdown

    pub fn render_markdown(&self) -> String {
        let mut md = String::new();
        let seeds: Vec<String> = self.stamp.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(md, "# Prediction uncertainty under training label conditions\n");
        let _ = writeln!(md, "Config digest: `{}`  ", self.stamp.digest);
        let _ = writeln!(md, "Seeds: {}\n", seeds.join(", "));
        let _ = writeln!(md, "Cells are mean ± sample standard deviation over seeds. Entropy in bits.\n");
        for &suite in &self.suites {
            let _ = writeln!(md, "## {}\n", suite.title());
            let mut header = String::from("| Training labels |");
            let mut rule = String::from("| --- |");
            for head in &self.heads {
                let _ = write!(header, " {} Entropy (↓) | {} Accuracy (↑) |", head.title(), head.title());
                rule.push_str(" --- | --- |");
            }
            let _ = writeln!(md, "{header}\n{rule}");
            for &condition in &self.conditions {
                let mut row = format!("| {} |", condition.title());
                for &head in &self.heads {
                    match self.cell(suite, condition, head) {
                        Some(cell) => match (&cell.outcome, cell.summary()) {
                            (_, Some(s)) => {
                                let _ = write!(
                                    row,
                                    " {:.4} ± {:.4} | {:.4} ± {:.4} |",
                                    s.entropy, s.entropy_sd, s.accuracy, s.accuracy_sd
                                );
                            }
                            (Outcome::Failed(_), None) | (Outcome::Done(_), None) => row.push_str(" FAILED | FAILED |"),
                        },
                        None => row.push_str(" FAILED | FAILED |"),
                    }
                }
                let _ = writeln!(md, "{row}");
            }
            md.push('\n');
        }
        let failures: Vec<&Cell> =
            self.cells.iter().filter(|c| matches!(c.outcome, Outcome::Failed(_))).collect();
        if !failures.is_empty() {
            let _ = writeln!(md, "### Failed cells\n");
            for c in failures {
                if let Outcome::Failed(msg) = &c.outcome {
                    let _ = writeln!(md, "- {} / {} / {}: {msg}", c.suite.as_str(), c.condition.as_str(), c.head.as_str());
                }
            }
            md.push('\n');
        }
        if !self.disagreement.is_empty() {
            let _ = writeln!(md, "## Training label disagreement\n");
            let _ = writeln!(md, "| Condition | Seed | Rate | Target | Delta | pool_frac |\n| --- | --- | --- | --- | --- | --- |");
            let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
            for d in &self.disagreement {
                let _ = writeln!(
                    md,
                    "| {} | {} | {:.4} | {} | {} | {} |",
                    d.condition.title(),
                    d.seed,
                    d.rate,
                    opt(d.target),
                    opt(d.target.map(|t| d.rate - t)),
                    opt(d.pool_frac)
                );
            }
            md.push('\n');
        }
        if !self.notes.is_empty() {
            let _ = writeln!(md, "## Notes\n");
            for n in &self.notes {
                let _ = writeln!(md, "- {n}");
            }
            md.push('\n');
        }
        if !self.checks.is_empty() {
            let _ = writeln!(md, "## Checks\n");
            for c in &self.checks {
                let _ = writeln!(md, "- **{}** {}: {}", c.verdict.as_str(), c.id, c.detail);
            }
        }
        md
    }
}

/// One parsed row of `report.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub suite: SuiteKind,
    pub condition: Condition,
    /// `None` for failed cells.
    pub cells: Vec<(Head, Option<Summary>)>,
}

pub fn parse_table_csv(text: &str) -> Result<(Option<Stamp>, Vec<TableRow>)> {
    let table = CsvTable::parse(text, "report.csv")?;
    let bad = |m: String| Error::format("report.csv", m);
    let heads = table.header[2..]
        .chunks(4)
        .map(|c| {
            let name = c[0].strip_suffix("_entropy").ok_or_else(|| bad(format!("unexpected column {}", c[0])))?;
            Head::parse(name)
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = table
        .rows
        .iter()
        .map(|r| {
            if r.len() != 2 + 4 * heads.len() {
                return Err(bad("row width does not match header".into()));
            }
            let suite = match r[0].as_str() {
                "rotation" => SuiteKind::Rotation,
                "corruption" => SuiteKind::Corruption,
                s => return Err(bad(format!("unknown suite {s}"))),
            };
            let condition = Condition::parse(&r[1])?;
            let cells = heads
                .iter()
                .zip(r[2..].chunks(4))
                .map(|(&h, v)| {
                    if v.iter().all(|x| x == "FAILED") {
                        return Ok((h, None));
                    }
                    let f = |i: usize| v[i].parse::<f64>().map_err(|_| bad(format!("bad number {}", v[i])));
                    Ok((h, Some(Summary { entropy: f(0)?, entropy_sd: f(1)?, accuracy: f(2)?, accuracy_sd: f(3)? })))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(TableRow { suite, condition, cells })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((table.stamp, rows))
}

fn fmt(v: f64) -> String {
    format!("{v:.4}")
}

/// Evaluates the label-noise, framework-efficacy and ordering checks on
/// the vanilla head, plus the head side-by-side under noisy_single.
pub fn evaluate_checks(report: &EvalReport, margins: &AcceptanceConfig) -> Vec<Check> {
    use Condition::{Clean, NoisySingle, PqMulti};
    let v = Head::Vanilla;
    let get = |suite, cond| report.summary(suite, cond, v);
    let both = [SuiteKind::Rotation, SuiteKind::Corruption];
    let mut checks = Vec::new();

    let noise = both
        .iter()
        .map(|&s| {
            let (c, n) = (get(s, Clean)?, get(s, NoisySingle)?);
            let ok = n.entropy - c.entropy >= margins.noise_entropy_gap && c.accuracy - n.accuracy >= margins.noise_accuracy_gap;
            Some((ok, format!(
                "{}: entropy {} -> {} (gap {}, need {}), accuracy {} -> {} (drop {}, need {})",
                s.as_str(),
                fmt(c.entropy),
                fmt(n.entropy),
                fmt(n.entropy - c.entropy),
                margins.noise_entropy_gap,
                fmt(c.accuracy),
                fmt(n.accuracy),
                fmt(c.accuracy - n.accuracy),
                margins.noise_accuracy_gap
            )))
        })
        .collect::<Option<Vec<_>>>();
    checks.push(verdict_of("label-noise effect (clean vs noisy_single, vanilla)", noise));

    let pq = both
        .iter()
        .map(|&s| {
            let (n, p) = (get(s, NoisySingle)?, get(s, PqMulti)?);
            let ok = n.entropy - p.entropy >= margins.pq_entropy_gap && p.accuracy >= n.accuracy - margins.pq_accuracy_tolerance;
            Some((ok, format!(
                "{}: entropy noisy {} vs pq {} (reduction {}, need {}), accuracy noisy {} vs pq {} (tolerance {})",
                s.as_str(),
                fmt(n.entropy),
                fmt(p.entropy),
                fmt(n.entropy - p.entropy),
                margins.pq_entropy_gap,
                fmt(n.accuracy),
                fmt(p.accuracy),
                margins.pq_accuracy_tolerance
            )))
        })
        .collect::<Option<Vec<_>>>();
    checks.push(verdict_of("framework efficacy (pq_multi vs noisy_single, vanilla)", pq));

    let order = (|| {
        let s = SuiteKind::Rotation;
        let (c, p, n) = (get(s, Clean)?, get(s, PqMulti)?, get(s, NoisySingle)?);
        Some(vec![(
            c.entropy < p.entropy && p.entropy < n.entropy,
            format!("rotation entropy clean {} < pq_multi {} < noisy_single {}", fmt(c.entropy), fmt(p.entropy), fmt(n.entropy)),
        )])
    })();
    checks.push(verdict_of("entropy ordering (vanilla, rotations)", order));

    let mut side = Vec::new();
    for &suite in &report.suites {
        let cells = report.conditions.len() * report.heads.len();
        let rendered = report.cells.iter().filter(|c| c.suite == suite).count();
        let vals: Vec<String> = Head::ALL
            .iter()
            .map(|&h| {
                report
                    .summary(suite, NoisySingle, h)
                    .map_or(format!("{} n/a", h.as_str()), |s| format!("{} {}", h.as_str(), fmt(s.entropy)))
            })
            .collect();
        side.push(format!("{}: noisy_single entropy {}; {rendered}/{cells} cells rendered", suite.as_str(), vals.join(", ")));
    }
    checks.push(Check { id: "head response to label noise", verdict: Verdict::Reported, detail: side.join("; ") });
    checks
}

fn verdict_of(id: &'static str, parts: Option<Vec<(bool, String)>>) -> Check {
    match parts {
        None => Check { id, verdict: Verdict::NotEvaluated, detail: "required cells missing or failed".into() },
        Some(parts) => Check {
            id,
            verdict: if parts.iter().all(|p| p.0) { Verdict::Pass } else { Verdict::Fail },
            detail: parts.into_iter().map(|p| p.1).collect::<Vec<_>>().join("; "),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(seed: u64, vals: &[(f64, f64)]) -> SeedRun {
        SeedRun {
            seed,
            specs: vals
                .iter()
                .enumerate()
                .map(|(i, &(a, e))| SpecResult { spec: format!("s{i}"), metric: Metric { accuracy: a, entropy: e } })
                .collect(),
        }
    }

    #[test]
    fn summary_is_mean_and_sample_sd_of_suite_means() {
        let cell = Cell {
            suite: SuiteKind::Rotation,
            condition: Condition::Clean,
            head: Head::Vanilla,
            outcome: Outcome::Done(vec![run(0, &[(1.0, 0.0), (0.0, 1.0)]), run(1, &[(1.0, 1.0), (1.0, 1.0)])]),
        };
        let s = cell.summary().unwrap();
        assert_eq!((s.accuracy, s.entropy), (0.75, 0.75));
        assert!((s.accuracy_sd - (0.125f64).sqrt()).abs() < 1e-15);
        assert!(Cell { outcome: Outcome::Failed("x".into()), ..cell }.summary().is_none());
    }

    #[test]
    fn single_seed_has_zero_sd() {
        assert_eq!(mean_sd(&[3.0]), (3.0, 0.0));
    }
}
