//! Ablation over relation heads, context-update depth and relation subsets.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rpkg::{write_rpkg, Relation, RelationalPriorKnowledgeGraph};
use crate::toy::model::ModelConfig;
use crate::toy::task::ToyTaskSpec;
use crate::toy::train::{final_metrics, fmt_f64, train, Metrics, TrainConfig};

/// Identity of a training run: hex SHA-256 prefix over the canonical JSON
/// of everything that influences its result, plus the prior graph bytes
/// for models that read them.
pub fn config_hash(
    spec: &ToyTaskSpec,
    model: &ModelConfig,
    train: &TrainConfig,
    rpkg: Option<&RelationalPriorKnowledgeGraph<f64>>,
) -> Result<String> {
    #[derive(Serialize)]
    struct Key<'a> {
        spec: &'a ToyTaskSpec,
        model: &'a ModelConfig,
        train: &'a TrainConfig,
    }
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&Key { spec, model, train })?);
    if let (false, Some(g)) = (model.baseline, rpkg) {
        h.update(write_rpkg(g)?);
    }
    let digest = h.finalize();
    Ok(digest[..8].iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationCase {
    /// Which axis the case varies: `heads`, `layers` or `relations`.
    pub study: String,
    pub model: ModelConfig,
}

/// The three studies: heads {1,2,4} with one layer, layers {1,2,3} with two
/// heads, and each single relation plus all three with two heads and one
/// layer. Ten cases.
pub fn standard_grid(base: &ModelConfig) -> Vec<AblationCase> {
    let with = |study: &str, heads, layers, relations: &[Relation]| AblationCase {
        study: study.into(),
        model: ModelConfig {
            baseline: false,
            heads,
            layers,
            relations: relations.to_vec(),
            ..base.clone()
        },
    };
    let mut grid = Vec::with_capacity(10);
    for h in [1, 2, 4] {
        grid.push(with("heads", h, 1, &Relation::ALL));
    }
    for l in [1, 2, 3] {
        grid.push(with("layers", 2, l, &Relation::ALL));
    }
    for r in Relation::ALL {
        grid.push(with("relations", 2, 1, &[r]));
    }
    grid.push(with("relations", 2, 1, &Relation::ALL));
    grid
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub study: String,
    pub config_hash: String,
    pub heads: usize,
    pub layers: usize,
    pub relations: Vec<Relation>,
    pub metrics: Metrics,
    pub wall_time_s: f64,
}

impl AblationRow {
    pub fn new(
        case: &AblationCase,
        config_hash: String,
        metrics: Metrics,
        wall_time_s: f64,
    ) -> Self {
        AblationRow {
            study: case.study.clone(),
            config_hash,
            heads: case.model.heads,
            layers: case.model.layers,
            relations: case.model.relations.clone(),
            metrics,
            wall_time_s,
        }
    }
}

/// Trains and evaluates every case in order. The reference configuration
/// belongs to all three studies; cases sharing a config hash are trained
/// once and reported under each study.
pub fn run_ablation(
    cases: &[AblationCase],
    spec: &ToyTaskSpec,
    rpkg: &RelationalPriorKnowledgeGraph<f64>,
    config: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    if cases.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    let mut done: BTreeMap<String, (Metrics, f64)> = BTreeMap::new();
    let mut rows = Vec::with_capacity(cases.len());
    for case in cases {
        let hash = config_hash(spec, &case.model, config, Some(rpkg))?;
        let (metrics, secs) = match done.get(&hash) {
            Some(hit) => hit.clone(),
            None => {
                let start = Instant::now();
                let (_, log) = train(spec, Some(rpkg), &case.model, config)?;
                let metrics = final_metrics(&log).expect("last step is evaluated").clone();
                let hit = (metrics, start.elapsed().as_secs_f64());
                done.insert(hash.clone(), hit.clone());
                hit
            }
        };
        rows.push(AblationRow::new(case, hash, metrics, secs));
    }
    Ok(rows)
}

const HEADER: &str =
    "config_hash,study,heads,layers,relations,overall_acc,ambiguous_acc,duplicate_detection_rate";

fn row_line(r: &AblationRow) -> String {
    let rel: Vec<&str> = r.relations.iter().map(|x| x.name()).collect();
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    format!(
        "{},{},{},{},{},{},{},{}",
        r.config_hash,
        r.study,
        r.heads,
        r.layers,
        rel.join("+"),
        fmt_f64(r.metrics.overall_acc),
        opt(r.metrics.ambiguous_acc),
        opt(r.metrics.duplicate_detection_rate),
    )
}

/// Merges `rows` into an existing `ablation.csv` text. Rows are keyed by
/// config hash and study: known keys are replaced in place, new ones are
/// appended.
pub fn merge_ablation_csv(existing: Option<&str>, rows: &[AblationRow]) -> Result<String> {
    let mut order: Vec<String> = Vec::new();
    let mut lines: BTreeMap<String, String> = BTreeMap::new();
    if let Some(text) = existing {
        let mut it = text.lines();
        match it.next() {
            Some(h) if h == HEADER => {}
            _ => {
                return Err(Error::Format(
                    "existing ablation table has an unexpected header".into(),
                ))
            }
        }
        for line in it.filter(|l| !l.is_empty()) {
            let key = line.splitn(3, ',').take(2).collect::<Vec<_>>().join(",");
            if lines.insert(key.clone(), line.to_owned()).is_none() {
                order.push(key);
            }
        }
    }
    for r in rows {
        let key = format!("{},{}", r.config_hash, r.study);
        if lines.insert(key.clone(), row_line(r)).is_none() {
            order.push(key);
        }
    }
    let mut out = format!("{HEADER}\n");
    for key in &order {
        let _ = writeln!(out, "{}", lines[key]);
    }
    Ok(out)
}

/// Wall-clock seconds per row, kept apart from the deterministic table.
pub fn timings_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("config_hash,study,wall_time_s\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{:.3}", r.config_hash, r.study, r.wall_time_s);
    }
    out
}
