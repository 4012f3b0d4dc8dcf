//! In-process simulation of the site/server protocols.
//!
//! Sites and the server exchange only [`SiteMessage`]s; every message is
//! appended to a [`MessageLog`] that serialises to JSON lines and can be
//! audited for record-level payloads or replayed to recompute the estimate.

mod fedavg;
mod protocol;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::Result;
use crate::estimators::{SiteAggregates, SiteCorrection, TargetTerm};
use crate::nuisance::OutcomeModel;
use crate::ratio::RatioModelWire;

pub use fedavg::{run_fedavg, Averaging, FedAvgResult, FedConfig, LearningRate};
pub use protocol::{
    algorithm2_reference, replay_algorithm1, replay_algorithm2, run_algorithm1, run_algorithm2, Alg2Config, OutcomeTraining,
    PropensitySource,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Party {
    Server,
    Site(usize),
}

/// The payload schema. No variant can hold an individual's `(x, z, y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum MessageKind {
    /// A site's fitted ratio models and arm counts.
    PublishRatioModel {
        treated: Option<RatioModelWire>,
        control: Option<RatioModelWire>,
        n_treated: usize,
        n_control: usize,
    },
    /// IPW sums for CLB-IPW.
    Aggregates(SiteAggregates),
    /// Residual corrections of one cross-fitting fold and the number of
    /// units they cover.
    Corrections { fold: usize, correction: SiteCorrection, n_units: usize },
    /// Outcome-model parameters: a broadcast from the server, or a site's
    /// locally updated parameters with the arm counts they were trained on.
    ModelParams { fold: usize, m1: OutcomeModel, m0: OutcomeModel, counts: Option<[usize; 2]>, loss: Option<f64> },
    /// Full-batch gradients of a site's loss and its arm counts.
    GradientUpdate { fold: usize, grad1: Vec<f64>, grad0: Vec<f64>, counts: [usize; 2], loss: f64 },
    /// The server's outcome-model contrast over the target sample.
    TargetMeanTerm { fold: usize, term: TargetTerm },
}

impl MessageKind {
    pub fn name(&self) -> &'static str {
        match self {
            MessageKind::PublishRatioModel { .. } => "publish_ratio_model",
            MessageKind::Aggregates(_) => "aggregates",
            MessageKind::Corrections { .. } => "corrections",
            MessageKind::ModelParams { .. } => "model_params",
            MessageKind::GradientUpdate { .. } => "gradient_update",
            MessageKind::TargetMeanTerm { .. } => "target_mean_term",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteMessage {
    pub round: usize,
    pub from: Party,
    pub to: Party,
    #[serde(flatten)]
    pub body: MessageKind,
}

/// Ordered record of every message exchanged in one run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MessageLog {
    pub messages: Vec<SiteMessage>,
}

impl MessageLog {
    pub fn push(&mut self, round: usize, from: Party, to: Party, body: MessageKind) {
        self.messages.push(SiteMessage { round, from, to, body });
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn count(&self, name: &str) -> usize {
        self.messages.iter().filter(|m| m.body.name() == name).count()
    }

    pub fn to_lines(&self) -> Result<Vec<String>> {
        self.messages.iter().map(|m| Ok(serde_json::to_string(m)?)).collect()
    }

    pub fn from_lines<S: AsRef<str>>(lines: &[S]) -> Result<Self> {
        let messages = lines
            .iter()
            .filter(|l| !l.as_ref().trim().is_empty())
            .map(|l| Ok(serde_json::from_str(l.as_ref())?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { messages })
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        for line in self.to_lines()? {
            writeln!(f, "{line}")?;
        }
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let lines = BufReader::new(fs::File::open(path)?).lines().collect::<std::io::Result<Vec<_>>>()?;
        Self::from_lines(&lines)
    }
}

/// Arrays longer than this in a payload are treated as record-level data.
pub const MAX_PAYLOAD_ARRAY: usize = 64;

const KNOWN_KINDS: [&str; 6] =
    ["publish_ratio_model", "aggregates", "corrections", "model_params", "gradient_update", "target_mean_term"];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub ok: bool,
    pub violations: Vec<String>,
}

/// Scans serialised messages for payloads that could carry individual
/// records: unknown message kinds, arrays whose length could grow with a
/// site's sample size, and objects shaped like a unit record.
pub fn audit_messages<S: AsRef<str>>(lines: &[S]) -> AuditReport {
    let mut violations = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        let value: Value = match serde_json::from_str(line.as_ref()) {
            Ok(v) => v,
            Err(e) => {
                violations.push(format!("message {i}: unparseable ({e})"));
                continue;
            }
        };
        match value.get("kind").and_then(Value::as_str) {
            Some(kind) if KNOWN_KINDS.contains(&kind) => {}
            other => violations.push(format!("message {i}: unknown kind {other:?}")),
        }
        scan(&value, &format!("message {i}"), &mut violations);
    }
    AuditReport { ok: violations.is_empty(), violations }
}

pub fn audit_log(log: &MessageLog) -> Result<AuditReport> {
    Ok(audit_messages(&log.to_lines()?))
}

fn scan(v: &Value, path: &str, out: &mut Vec<String>) {
    match v {
        Value::Array(items) => {
            if items.len() > MAX_PAYLOAD_ARRAY {
                out.push(format!("{path}: array of length {} exceeds the aggregate schema", items.len()));
            }
            for (i, item) in items.iter().enumerate() {
                scan(item, &format!("{path}[{i}]"), out);
            }
        }
        Value::Object(map) => {
            let record_like = map.contains_key("x") && (map.contains_key("y") || map.contains_key("z") || map.contains_key("arm"));
            if record_like || map.contains_key("records") {
                out.push(format!("{path}: record-level payload"));
            }
            for (k, item) in map {
                scan(item, &format!("{path}.{k}"), out);
            }
        }
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Arm;
    use crate::estimators::ArmSums;
    use crate::ratio::FeatureMap;

    fn sample_message() -> SiteMessage {
        SiteMessage {
            round: 3,
            from: Party::Site(2),
            to: Party::Server,
            body: MessageKind::Aggregates(SiteAggregates {
                site_id: 2,
                treated: ArmSums::from_pairs(&[(1.0 / 3.0, 0.1), (2.0, -7.25)]),
                control: ArmSums::default(),
                floored: 0,
            }),
        }
    }

    #[test]
    fn wire_format_has_kind_and_payload() {
        let line = serde_json::to_string(&sample_message()).unwrap();
        let v: Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["kind"], "aggregates");
        assert_eq!(v["round"], 3);
        assert_eq!(v["from"]["site"], 2);
        assert!(v.get("payload").is_some());
    }

    #[test]
    fn messages_round_trip_exactly() {
        let log = MessageLog {
            messages: vec![
                sample_message(),
                SiteMessage {
                    round: 0,
                    from: Party::Server,
                    to: Party::Site(1),
                    body: MessageKind::ModelParams {
                        fold: 1,
                        m1: OutcomeModel { arm: Arm::Treated, psi: FeatureMap::IdentityPlusIntercept, theta: vec![0.1, 1.0 / 7.0] },
                        m0: OutcomeModel { arm: Arm::Control, psi: FeatureMap::IdentityPlusIntercept, theta: vec![-3e-300, 2.5] },
                        counts: None,
                        loss: None,
                    },
                },
            ],
        };
        let back = MessageLog::from_lines(&log.to_lines().unwrap()).unwrap();
        assert_eq!(back, log);
    }

    #[test]
    fn audit_accepts_schema_messages() {
        let lines = vec![serde_json::to_string(&sample_message()).unwrap()];
        assert!(audit_messages(&lines).ok);
    }

    #[test]
    fn audit_flags_injected_records() {
        let mut lines = vec![serde_json::to_string(&sample_message()).unwrap()];
        lines.push(r#"{"round":0,"from":{"site":1},"to":"server","kind":"raw","payload":{"x":[0.1,0.2],"z":1,"y":3.0}}"#.into());
        let long: Vec<f64> = (0..500).map(f64::from).collect();
        lines.push(serde_json::json!({"round":0,"from":"server","to":{"site":1},"kind":"aggregates","payload":{"values": long}}).to_string());
        let report = audit_messages(&lines);
        assert!(!report.ok);
        assert!(report.violations.iter().any(|v| v.contains("message 1") && v.contains("unknown kind")));
        assert!(report.violations.iter().any(|v| v.contains("message 1") && v.contains("record-level")));
        assert!(report.violations.iter().any(|v| v.contains("message 2") && v.contains("length 500")));
    }
}
