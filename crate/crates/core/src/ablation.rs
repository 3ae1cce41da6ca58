//! Multi-seed grid of model variants × data regimes.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datagen::{Corpus, DomainCatalog};
use crate::error::{Error, Result};
use crate::metrics::{percent, Metrics};
use crate::model::Variant;
use crate::trainer::{encode_examples, evaluate, train, EnablementRandomizer, TrainConfig};

/// A named corpus (e.g. `biased`, `unbiased`).
pub struct Regime<'a> {
    pub name: String,
    pub catalog: &'a DomainCatalog,
    pub corpus: &'a Corpus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationPlan {
    pub seeds: Vec<u64>,
    /// Cells to run as `(regime name, model number)`; the full grid when
    /// empty.
    pub cells: Vec<(String, u8)>,
    pub base: TrainConfig,
}

impl AblationPlan {
    pub fn full_grid(regimes: &[&str], seeds: Vec<u64>, base: TrainConfig) -> Self {
        Self {
            seeds,
            cells: regimes.iter().flat_map(|r| (1..=6).map(move |m| (r.to_string(), m))).collect(),
            base,
        }
    }
}

/// Outcome of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub regime: String,
    pub model: u8,
    pub seed: u64,
    pub test: Option<Metrics>,
    pub best_epoch: Option<usize>,
    pub failure: Option<String>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; 0 with fewer than two runs.
    pub stdev: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let stdev = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, stdev }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub regime: String,
    pub model: u8,
    pub label: String,
    pub runs: usize,
    pub failed_seeds: Vec<u64>,
    pub top1: Summary,
    pub mrr: Summary,
    pub top3: Summary,
}

impl GridCell {
    pub fn failed(&self) -> bool {
        self.runs == 0
    }
}

/// An expected ordering of mean test top-1 between two models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionalCheck {
    pub regime: String,
    pub better: u8,
    pub worse: u8,
    pub better_mean: Option<f64>,
    pub worse_mean: Option<f64>,
    /// `None` when either cell is missing or failed.
    pub holds: Option<bool>,
}

/// Orderings checked on every report: on the unbiased regime (2) ≥ (1) and
/// (4) ≥ (2); on the biased regime (6) ≥ (4).
pub const EXPECTED_ORDERINGS: [(&str, u8, u8); 3] = [("unbiased", 2, 1), ("unbiased", 4, 2), ("biased", 6, 4)];

/// The cells that the expected orderings compare.
pub fn ordering_cells() -> Vec<(String, u8)> {
    let mut cells: Vec<(String, u8)> = Vec::new();
    for (regime, a, b) in EXPECTED_ORDERINGS {
        for m in [b, a] {
            if !cells.iter().any(|(r, x)| r == regime && *x == m) {
                cells.push((regime.to_string(), m));
            }
        }
    }
    cells
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub base_config: TrainConfig,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub runs: Vec<RunRecord>,
    pub cells: Vec<GridCell>,
    pub checks: Vec<DirectionalCheck>,
    pub seconds: f64,
}

impl AblationReport {
    pub fn cell(&self, regime: &str, model: u8) -> Option<&GridCell> {
        self.cells.iter().find(|c| c.regime == regime && c.model == model)
    }

    pub fn inversions(&self) -> Vec<&DirectionalCheck> {
        self.checks.iter().filter(|c| c.holds == Some(false)).collect()
    }

    /// Table with one row per model and Top1/MRR/Top3 per regime, as
    /// percentages `mean±stdev`.
    pub fn render(&self) -> String {
        let mut regimes: Vec<&str> = Vec::new();
        for c in &self.cells {
            if !regimes.contains(&c.regime.as_str()) {
                regimes.push(&c.regime);
            }
        }
        let mut models: Vec<u8> = self.cells.iter().map(|c| c.model).collect();
        models.sort_unstable();
        models.dedup();

        const W: usize = 14;
        let mut out = String::new();
        let _ = write!(out, "{:<28}", "");
        for r in &regimes {
            let _ = write!(out, "| {:<w$}", r, w = 3 * W);
        }
        out.push('\n');
        let _ = write!(out, "{:<28}", "model");
        for _ in &regimes {
            let _ = write!(out, "| {:<W$}{:<W$}{:<W$}", "Top1", "MRR", "Top3");
        }
        out.push('\n');
        for m in models {
            let label = Variant::table(m).map(|v| v.to_string()).unwrap_or_default();
            let _ = write!(out, "{:<28}", format!("({m}) {label}"));
            for r in &regimes {
                match self.cell(r, m) {
                    Some(c) if !c.failed() => {
                        for s in [&c.top1, &c.mrr, &c.top3] {
                            let _ = write!(out, "{:<W$}", format!("{}±{}", percent(s.mean), percent(s.stdev)));
                        }
                        let _ = write!(out, "{}", if c.failed_seeds.is_empty() { "" } else { "!" });
                    }
                    Some(_) => {
                        let _ = write!(out, "{:<w$}", "FAILED", w = 3 * W);
                    }
                    None => {
                        let _ = write!(out, "{:<w$}", "-", w = 3 * W);
                    }
                }
                out.push(' ');
            }
            out.push('\n');
        }
        let _ = writeln!(out, "\n{} seed(s): {:?}", self.seeds.len(), self.seeds);
        for c in &self.checks {
            let status = match c.holds {
                Some(true) => "ok",
                Some(false) => "INVERTED",
                None => "not evaluated",
            };
            let fmt = |v: Option<f64>| v.map_or("-".to_string(), percent);
            let _ = writeln!(
                out,
                "{}: ({}) {} ≥ ({}) {}  {status}",
                c.regime,
                c.better,
                fmt(c.better_mean),
                c.worse,
                fmt(c.worse_mean)
            );
        }
        out
    }
}

/// Trains every planned cell for every seed and evaluates on the regime's
/// test split. Runs that fail numerically are recorded and skipped; other
/// errors abort. `on_run` observes each finished run.
pub fn ablate(regimes: &[Regime<'_>], plan: &AblationPlan, mut on_run: impl FnMut(&RunRecord)) -> Result<AblationReport> {
    plan.base.validate()?;
    if plan.seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    if let Some(first) = regimes.first() {
        if regimes.iter().any(|r| r.catalog.names() != first.catalog.names()) {
            return Err(Error::Invalid("all regimes must share one domain catalog".into()));
        }
    }
    let started = std::time::Instant::now();
    let mut runs = Vec::new();
    for (regime_name, model) in &plan.cells {
        let regime = regimes
            .iter()
            .find(|r| &r.name == regime_name)
            .ok_or_else(|| Error::Config(format!("no corpus for regime `{regime_name}`")))?;
        if Variant::table(*model).is_none() {
            return Err(Error::Config(format!("model must be 1–6, got {model}")));
        }
        for &seed in &plan.seeds {
            let run_start = std::time::Instant::now();
            let config = TrainConfig {
                model: *model,
                variant: None,
                seed,
                ..plan.base.clone()
            };
            let result = train(&config, regime.catalog, regime.corpus).and_then(|outcome| {
                let test = encode_examples(&regime.corpus.test, &outcome.checkpoint.vocab)?;
                let (metrics, _) = evaluate(&outcome.model(), &test, &mut EnablementRandomizer::new(0.0))?;
                Ok((metrics, outcome.report.best_epoch))
            });
            let (test, best_epoch, failure) = match result {
                Ok((m, e)) => (Some(m), e, None),
                Err(e) if e.is_numerical() => (None, None, Some(e.to_string())),
                Err(e) => return Err(e),
            };
            let record = RunRecord {
                regime: regime_name.clone(),
                model: *model,
                seed,
                test,
                best_epoch,
                failure,
                seconds: run_start.elapsed().as_secs_f64(),
            };
            on_run(&record);
            runs.push(record);
        }
    }
    Ok(summarize(plan, runs, started.elapsed().as_secs_f64()))
}

/// Aggregates run records into grid cells and directional checks.
pub fn summarize(plan: &AblationPlan, runs: Vec<RunRecord>, seconds: f64) -> AblationReport {
    let cells: Vec<GridCell> = plan
        .cells
        .iter()
        .map(|(regime, model)| {
            let mine: Vec<&RunRecord> = runs.iter().filter(|r| &r.regime == regime && r.model == *model).collect();
            let ok: Vec<Metrics> = mine.iter().filter_map(|r| r.test).collect();
            let pick = |f: fn(&Metrics) -> f64| Summary::of(&ok.iter().map(f).collect::<Vec<_>>());
            GridCell {
                regime: regime.clone(),
                model: *model,
                label: Variant::table(*model).map(|v| v.to_string()).unwrap_or_default(),
                runs: ok.len(),
                failed_seeds: mine.iter().filter(|r| r.test.is_none()).map(|r| r.seed).collect(),
                top1: pick(|m| m.top1),
                mrr: pick(|m| m.mrr),
                top3: pick(|m| m.top3),
            }
        })
        .collect();
    let mean = |regime: &str, model: u8| {
        cells
            .iter()
            .find(|c| c.regime == regime && c.model == model && !c.failed())
            .map(|c| c.top1.mean)
    };
    let checks = EXPECTED_ORDERINGS
        .iter()
        .map(|&(regime, better, worse)| {
            let (b, w) = (mean(regime, better), mean(regime, worse));
            DirectionalCheck {
                regime: regime.to_string(),
                better,
                worse,
                better_mean: b,
                worse_mean: w,
                holds: b.zip(w).map(|(b, w)| b >= w),
            }
        })
        .collect();
    AblationReport {
        config_hash: plan.base.hash(),
        base_config: plan.base.clone(),
        seeds: plan.seeds.clone(),
        runs,
        cells,
        checks,
        seconds,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(regime: &str, model: u8, seed: u64, top1: Option<f64>) -> RunRecord {
        RunRecord {
            regime: regime.into(),
            model,
            seed,
            test: top1.map(|t| Metrics {
                top1: t,
                mrr: t,
                top3: t,
                count: 10,
            }),
            best_epoch: Some(0),
            failure: top1.is_none().then(|| "diverged".into()),
            seconds: 0.0,
        }
    }

    #[test]
    fn sample_stdev() {
        let s = Summary::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.stdev - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(Summary::of(&[7.0]).stdev, 0.0);
    }

    #[test]
    fn grid_shape_checks_and_failures() {
        let plan = AblationPlan::full_grid(&["unbiased", "biased"], vec![1, 2], TrainConfig::default());
        assert_eq!(plan.cells.len(), 12);
        let mut runs = Vec::new();
        for (r, m) in &plan.cells {
            for s in [1, 2] {
                let top1 = match (r.as_str(), *m) {
                    ("unbiased", 1) => Some(0.9),
                    ("unbiased", 2) => Some(0.8),
                    ("biased", 5) => None,
                    _ => Some(0.5 + f64::from(*m) / 100.0),
                };
                runs.push(record(r, *m, s, top1));
            }
        }
        let report = summarize(&plan, runs, 0.0);
        assert_eq!(report.cells.len(), 12);
        assert!(report.cell("biased", 5).unwrap().failed());
        let inv = report.inversions();
        assert_eq!(inv.len(), 2);
        assert_eq!((inv[0].better, inv[0].worse), (2, 1));
        let text = report.render();
        assert!(text.contains("FAILED"));
        assert!(text.contains("INVERTED"));
        assert!(text.contains("90.00±0.00"));
        assert!(text.contains("(4) sgmd, spvs, sdst"));
    }
}
