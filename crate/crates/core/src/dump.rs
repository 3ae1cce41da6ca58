//! Side-by-side attention weights of several models on selected utterances.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::datagen::{DomainCatalog, Example};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::trainer::encode_examples;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainWeights {
    pub domain: String,
    /// One weight per model, in model order.
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpRow {
    pub utterance: String,
    pub ground_truth: String,
    pub enabled: Vec<DomainWeights>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub models: Vec<String>,
    pub rows: Vec<DumpRow>,
    pub notice: Option<String>,
}

/// Up to `k` examples that the last model predicts correctly and every other
/// model gets wrong, with each model's attention weight per enabled domain.
pub fn dump_attention(
    checkpoints: &[(String, Checkpoint)],
    catalog: &DomainCatalog,
    examples: &[Example],
    k: usize,
) -> Result<AttentionDump> {
    let Some((_, last)) = checkpoints.last() else {
        return Err(Error::Invalid("at least one checkpoint is required".into()));
    };
    for (label, c) in checkpoints {
        if c.domains != last.domains || c.domains != catalog.names() {
            return Err(Error::Invalid(format!("checkpoint `{label}` uses a different domain catalog")));
        }
    }
    let models: Vec<(Model, Vec<_>)> = checkpoints
        .iter()
        .map(|(_, c)| Ok((c.model(), encode_examples(examples, &c.vocab)?)))
        .collect::<Result<_>>()?;
    let (last_i, others) = (models.len() - 1, &models[..models.len() - 1]);

    let mut rows = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        if rows.len() >= k {
            break;
        }
        let correct = |(m, enc): &(Model, Vec<_>)| -> Result<bool> { Ok(m.predict(&enc[i])?.top() == ex.label) };
        if !correct(&models[last_i])? {
            continue;
        }
        let mut missed_by_all = true;
        for m in others {
            if correct(m)? {
                missed_by_all = false;
                break;
            }
        }
        if !missed_by_all {
            continue;
        }
        let per_model = models
            .iter()
            .map(|(m, enc)| m.attention(&enc[i]))
            .collect::<Result<Vec<_>>>()?;
        let enabled = ex
            .enabled
            .iter()
            .enumerate()
            .map(|(j, &d)| {
                Ok(DomainWeights {
                    domain: catalog.name_of(d)?.to_string(),
                    weights: per_model.iter().map(|a| a.weights[j]).collect(),
                })
            })
            .collect::<Result<_>>()?;
        rows.push(DumpRow {
            utterance: ex.text.clone(),
            ground_truth: catalog.name_of(ex.label)?.to_string(),
            enabled,
        });
    }
    let notice = rows
        .is_empty()
        .then(|| "no example is predicted correctly by the last model and missed by all others".to_string());
    Ok(AttentionDump {
        models: checkpoints.iter().map(|(l, _)| l.clone()).collect(),
        rows,
        notice,
    })
}

impl AttentionDump {
    /// Utterance, ground truth, then one line per enabled domain with a
    /// weight column per model.
    pub fn render(&self) -> String {
        let mut out = String::new();
        if let Some(n) = &self.notice {
            let _ = writeln!(out, "{n}");
            return out;
        }
        let width = self
            .rows
            .iter()
            .flat_map(|r| r.enabled.iter().map(|d| d.domain.len()))
            .max()
            .unwrap_or(6)
            .max(6);
        for row in &self.rows {
            let _ = writeln!(out, "utterance:    {}", row.utterance);
            let _ = writeln!(out, "ground truth: {}", row.ground_truth);
            let _ = write!(out, "  {:<width$}", "domain");
            for m in &self.models {
                let _ = write!(out, " {m:>10}");
            }
            out.push('\n');
            for d in &row.enabled {
                let mark = if d.domain == row.ground_truth { "*" } else { " " };
                let _ = write!(out, "{mark} {:<width$}", d.domain);
                for w in &d.weights {
                    let _ = write!(out, " {w:>10.4}");
                }
                out.push('\n');
            }
            out.push('\n');
        }
        out
    }
}
