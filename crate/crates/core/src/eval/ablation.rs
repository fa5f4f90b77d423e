//! Grids of continual-training runs sharing one pretrained base.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::eval::report::{compare, evaluate, EvalReport, ForgettingDelta};
use crate::model::{FusionMode, Model};
use crate::par::{map_jobs, Exec};
use crate::train::trainer::csv_err;
use crate::train::{apply_freeze, continual_train, FreezeStrategy, MixSpec, TrainConfig};

/// One varied setting and the values it takes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", content = "values", rename_all = "snake_case", deny_unknown_fields)]
pub enum Axis {
    FreezeStrategy(Vec<FreezeStrategy>),
    FusionWeight(Vec<f64>),
    NExperts(Vec<usize>),
    /// `[original, new]` token budgets.
    DataRatio(Vec<[u64; 2]>),
}

impl Axis {
    pub fn name(&self) -> &'static str {
        match self {
            Axis::FreezeStrategy(_) => "freeze_strategy",
            Axis::FusionWeight(_) => "fusion_weight",
            Axis::NExperts(_) => "n_experts",
            Axis::DataRatio(_) => "data_ratio",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Axis::FreezeStrategy(v) => v.len(),
            Axis::FusionWeight(v) => v.len(),
            Axis::NExperts(v) => v.len(),
            Axis::DataRatio(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn apply(&self, i: usize, s: &mut PointSettings) -> String {
        match self {
            Axis::FreezeStrategy(v) => {
                s.strategy = v[i];
                v[i].label().to_string()
            }
            Axis::FusionWeight(v) => {
                s.fusion_weight = v[i];
                v[i].to_string()
            }
            Axis::NExperts(v) => {
                s.n_experts = v[i];
                v[i].to_string()
            }
            Axis::DataRatio(v) => {
                s.data_ratio = v[i];
                format!("{}:{}", v[i][0], v[i][1])
            }
        }
    }
}

/// Everything that defines one CT job apart from the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointSettings {
    /// 0 keeps the base dense (dense-CT baseline).
    pub n_experts: usize,
    pub top_k: usize,
    pub fusion_weight: f64,
    pub fusion_mode: FusionMode,
    pub strategy: FreezeStrategy,
    /// `[original, new]` token budgets.
    pub data_ratio: [u64; 2],
}

impl Default for PointSettings {
    fn default() -> Self {
        PointSettings {
            n_experts: 2,
            top_k: 1,
            fusion_weight: 0.5,
            fusion_mode: FusionMode::Fixed,
            strategy: FreezeStrategy::EmbeddingAndExperts,
            data_ratio: [2, 20],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    #[serde(default)]
    pub axes: Vec<Axis>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub base: PointSettings,
    pub train: TrainConfig,
}

impl AblationGrid {
    pub fn from_toml(text: &str) -> Result<Self> {
        let grid: AblationGrid = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("ablation grid has no seeds"));
        }
        if let Some(a) = self.axes.iter().find(|a| a.is_empty()) {
            return Err(Error::config(format!("axis {} has no values", a.name())));
        }
        let mut seen = Vec::new();
        for a in &self.axes {
            if seen.contains(&a.name()) {
                return Err(Error::config(format!("axis {} given twice", a.name())));
            }
            seen.push(a.name());
        }
        Ok(())
    }

    /// Cartesian product of the axes, first axis slowest. No axes gives the
    /// single base point.
    pub fn points(&self) -> Vec<(PointSettings, Vec<(String, String)>)> {
        let mut out = vec![(self.base.clone(), Vec::new())];
        for axis in &self.axes {
            let mut next = Vec::with_capacity(out.len() * axis.len());
            for (s, labels) in &out {
                for i in 0..axis.len() {
                    let mut s = s.clone();
                    let mut labels = labels.clone();
                    labels.push((axis.name().to_string(), axis.apply(i, &mut s)));
                    next.push((s, labels));
                }
            }
            out = next;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub point_id: usize,
    pub seed: u64,
    pub axis_values: Vec<(String, String)>,
    pub settings: PointSettings,
    pub report: EvalReport,
    pub delta: ForgettingDelta,
}

/// Mean metrics over every row sharing one axis value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendRow {
    pub axis: String,
    pub value: String,
    pub runs: usize,
    pub original_score: f64,
    pub expanded_score: f64,
    pub original_delta: f64,
    pub expanded_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub base_report: EvalReport,
    pub rows: Vec<AblationRow>,
    pub trends: Vec<TrendRow>,
}

impl AblationResult {
    /// Rows of one seed, in point order.
    pub fn seed_rows(&self, seed: u64) -> Vec<&AblationRow> {
        self.rows.iter().filter(|r| r.seed == seed).collect()
    }

    pub fn results_csv(&self) -> Result<String> {
        let langs: Vec<&String> = self.base_report.per_language_ppl.keys().collect();
        let axes: Vec<&String> = self.rows.first().map(|r| r.axis_values.iter().map(|(k, _)| k).collect()).unwrap_or_default();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["point_id".to_string(), "seed".to_string()];
        header.extend(axes.iter().map(|a| a.to_string()));
        header.extend(langs.iter().map(|l| format!("ppl_{l}")));
        header.extend(["original_score", "expanded_score", "original_delta", "expanded_delta"].map(String::from));
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let mut row = vec![r.point_id.to_string(), r.seed.to_string()];
            row.extend(r.axis_values.iter().map(|(_, v)| v.clone()));
            row.extend(langs.iter().map(|l| r.report.per_language_ppl[*l].to_string()));
            row.extend(
                [r.report.original_score, r.report.expanded_score, r.delta.original_delta, r.delta.expanded_delta]
                    .map(|x| x.to_string()),
            );
            w.write_record(&row).map_err(csv_err)?;
        }
        into_string(w)
    }

    pub fn trends_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for t in &self.trends {
            w.serialize(t).map_err(csv_err)?;
        }
        into_string(w)
    }
}

fn into_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn trends(rows: &[AblationRow]) -> Vec<TrendRow> {
    let mut groups: Vec<(usize, &str, &str, Vec<&AblationRow>)> = Vec::new();
    for r in rows {
        for (a, (axis, value)) in r.axis_values.iter().enumerate() {
            match groups.iter_mut().find(|g| g.0 == a && g.2 == value) {
                Some(g) => g.3.push(r),
                None => groups.push((a, axis, value, vec![r])),
            }
        }
    }
    groups.sort_by_key(|g| g.0);
    groups
        .into_iter()
        .map(|(_, axis, value, rs)| {
            let mean = |f: fn(&AblationRow) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / rs.len() as f64;
            TrendRow {
                axis: axis.to_string(),
                value: value.to_string(),
                runs: rs.len(),
                original_score: mean(|r| r.report.original_score),
                expanded_score: mean(|r| r.report.expanded_score),
                original_delta: mean(|r| r.delta.original_delta),
                expanded_delta: mean(|r| r.delta.expanded_delta),
            }
        })
        .collect()
}

/// Builds, freezes and continually trains one grid point from `base`.
pub fn run_point(base: &Model, corpus: &Corpus, s: &PointSettings, train: &TrainConfig, seed: u64) -> Result<(Model, EvalReport)> {
    let mut model = if s.n_experts > 0 {
        let mut m = base.upcycle(s.n_experts, s.top_k, s.fusion_weight, seed)?;
        m.config.fusion_mode = s.fusion_mode;
        m
    } else {
        base.clone()
    };
    let is_moe = model.is_moe();
    apply_freeze(&mut model.params, s.strategy, is_moe)?;
    let mix = MixSpec::by_role(corpus, s.data_ratio[0], s.data_ratio[1])?;
    let cfg = TrainConfig { seed, eval_every: 0, ..train.clone() };
    let log = continual_train(&mut model, corpus, &mix, &cfg)?;
    let report = log.last_eval().cloned().expect("a run always records a final evaluation");
    Ok((model, report))
}

/// One CT+eval job per (point, seed). Every job starts from `base` and uses
/// the same seeds, so points differ only in their settings. Writes
/// `results.csv` and `trends.csv` to `out_dir` atomically when given.
pub fn run_ablation(
    grid: &AblationGrid,
    base: &Model,
    corpus: &Corpus,
    out_dir: Option<&Path>,
    exec: Exec,
) -> Result<AblationResult> {
    grid.validate()?;
    if base.is_moe() {
        return Err(Error::contract("ablation base must be a dense checkpoint"));
    }
    let base_report = evaluate(base, corpus, grid.train.eval_tokens)?;
    let points = grid.points();
    let jobs: Vec<(usize, u64)> = (0..points.len()).flat_map(|p| grid.seeds.iter().map(move |&s| (p, s))).collect();
    let outcomes = map_jobs(exec, jobs, |(p, seed)| {
        let (settings, labels) = &points[p];
        run_point(base, corpus, settings, &grid.train, seed).and_then(|(_, report)| {
            let delta = compare(&base_report, &report)?;
            Ok(AblationRow { point_id: p, seed, axis_values: labels.clone(), settings: settings.clone(), report, delta })
        })
    });
    let rows = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    let result = AblationResult { trends: trends(&rows), base_report, rows };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join("results.csv"), result.results_csv()?.as_bytes())?;
        write_atomic(&dir.join("trends.csv"), result.trends_csv()?.as_bytes())?;
    }
    Ok(result)
}
