//! Repeated-seed experiment runs, NLL and imputation tables, rank
//! averaging and pair-plot export.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{train_model, RunConfig};
use crate::data::{drop_half, ColumnKind, Dataset, Schema};
use crate::error::{Error, Result};
use crate::model::{conditional_nll, is_nll, ModelKind, TabularModel};
use crate::rng::{self, derive_seed};

/// Mean with a standard error when at least two values exist.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub stderr: Option<f64>,
    pub values: Vec<f64>,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n.max(1) as f64;
        let stderr = (n >= 2).then(|| {
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        });
        Stat {
            mean,
            stderr,
            values: values.to_vec(),
        }
    }

    pub fn display(&self) -> String {
        match self.stderr {
            Some(se) => format!("{:.2}±{:.2}", self.mean, se),
            None => format!("{:.2}", self.mean),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub dataset: String,
    pub model_kind: ModelKind,
    pub seeds: Vec<u64>,
    pub generation_nll: Stat,
    pub conditional_nll: Stat,
    pub imputation_rmse: Stat,
    pub wall_clock_secs: f64,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub run: RunConfig,
    pub n_seeds: usize,
    pub train_fraction: f64,
    pub master_seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            run: RunConfig::default(),
            n_seeds: 5,
            train_fraction: 0.9,
            master_seed: 0,
        }
    }
}

/// Scores of one trained model on one test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub generation_nll: f64,
    pub conditional_nll: f64,
    pub imputation_rmse: f64,
}

/// Generation NLL, conditional NLL with half the cells hidden, and the
/// imputation error on those hidden cells.
pub fn evaluate(model: &dyn TabularModel, test: &Dataset, samples: usize, seed: u64) -> Result<Evaluation> {
    let generation_nll = is_nll(model, test, samples, derive_seed(seed, &[0x61]))?;
    let observed = drop_half(test.mask(), derive_seed(seed, &[0x62]));
    let conditional_nll = conditional_nll(model, test, &observed, samples, derive_seed(seed, &[0x63]))?;
    let predictions = impute_hidden(model, test, &observed)?;
    let imputation_rmse = imputation_rmse(test, &predictions, &observed)?;
    Ok(Evaluation {
        generation_nll,
        conditional_nll,
        imputation_rmse,
    })
}

/// Likelihood-mode imputations for the cells present in `data` but hidden by
/// `observed`; `None` elsewhere.
pub fn impute_hidden(model: &dyn TabularModel, data: &Dataset, observed: &[bool]) -> Result<Vec<Option<f64>>> {
    let d = data.width();
    let mut out = vec![None; data.rows() * d];
    for r in 0..data.rows() {
        let base = data.row_mask(r);
        let obs: Vec<bool> = (0..d).map(|c| base[c] && observed[r * d + c]).collect();
        if (0..d).all(|c| !base[c] || obs[c]) {
            continue;
        }
        let filled = model.impute(data.row(r), &obs)?;
        for c in 0..d {
            if base[c] && !obs[c] {
                out[r * d + c] = Some(filled[c]);
            }
        }
    }
    Ok(out)
}

/// `(1/D) √(Σ_d Σ_n SE_nd / N_d)` over the cells present in `truth` and
/// hidden by `observed`; categorical errors use one-hot vectors. Columns
/// without hidden cells do not count towards `D`.
pub fn imputation_rmse(truth: &Dataset, predictions: &[Option<f64>], observed: &[bool]) -> Result<f64> {
    let d = truth.width();
    let n = truth.rows() * d;
    if predictions.len() != n || observed.len() != n {
        return Err(Error::shape("imputation_rmse", &[&[predictions.len()], &[observed.len()], &[n]]));
    }
    let mut se = vec![0.0; d];
    let mut count = vec![0usize; d];
    for i in 0..n {
        let c = i % d;
        let hidden = truth.mask()[i] && !observed[i];
        match (hidden, predictions[i]) {
            (true, Some(p)) => {
                se[c] += squared_error(&truth.schema, c, truth.cells()[i], p);
                count[c] += 1;
            }
            (false, None) => {}
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "predictions must cover exactly the hidden cells (row {}, column {c})",
                    i / d
                )))
            }
        }
    }
    let used: Vec<usize> = (0..d).filter(|&c| count[c] > 0).collect();
    if used.is_empty() {
        return Err(Error::NoObservedCells("no hidden cells to score".into()));
    }
    let inner: f64 = used.iter().map(|&c| se[c] / count[c] as f64).sum();
    Ok(inner.sqrt() / used.len() as f64)
}

fn squared_error(schema: &Schema, c: usize, truth: f64, pred: f64) -> f64 {
    match schema.columns[c].kind {
        ColumnKind::Categorical { .. } => {
            if truth == pred {
                0.0
            } else {
                2.0
            }
        }
        _ => (truth - pred) * (truth - pred),
    }
}

pub fn run_suite(dataset_id: &str, data: &Dataset, kinds: &[ModelKind], config: &SuiteConfig) -> Result<Vec<RunReport>> {
    let mut reports = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let mut run = config.run.clone();
        run.model = kind;
        run.validate()?;
        let config_hash = run.hash()?;
        let start = Instant::now();
        let seeds: Vec<u64> = (0..config.n_seeds as u64).map(|s| derive_seed(config.master_seed, &[s])).collect();
        let (mut gen, mut cond, mut imp) = (Vec::new(), Vec::new(), Vec::new());
        for &seed in &seeds {
            let (train, test) = data.split(config.train_fraction, derive_seed(seed, &[0x64]))?;
            let model = train_model(&run, &train, seed)?;
            let e = evaluate(&model, &test, run.importance_samples, seed)?;
            log::info!(
                "{dataset_id} {} seed {seed}: gen {:.3} cond {:.3} rmse {:.4}",
                kind.name(),
                e.generation_nll,
                e.conditional_nll,
                e.imputation_rmse
            );
            gen.push(e.generation_nll);
            cond.push(e.conditional_nll);
            imp.push(e.imputation_rmse);
        }
        reports.push(RunReport {
            dataset: dataset_id.to_string(),
            model_kind: kind,
            seeds,
            generation_nll: Stat::of(&gen),
            conditional_nll: Stat::of(&cond),
            imputation_rmse: Stat::of(&imp),
            wall_clock_secs: start.elapsed().as_secs_f64(),
            config_hash,
        });
    }
    Ok(reports)
}

/// Average rank per method (columns) over datasets (rows), lower scores
/// ranking first and ties sharing the mean of their positions.
pub fn average_ranks(scores: &[Vec<f64>]) -> Result<Vec<Stat>> {
    let m = scores.first().map(Vec::len).unwrap_or(0);
    if m == 0 || scores.iter().any(|r| r.len() != m) {
        return Err(Error::InvalidArgument("rank table must be rectangular and non-empty".into()));
    }
    let mut per_method = vec![Vec::with_capacity(scores.len()); m];
    for row in scores {
        for (j, r) in tied_ranks(row).into_iter().enumerate() {
            per_method[j].push(r);
        }
    }
    Ok(per_method.iter().map(|v| Stat::of(v)).collect())
}

/// 1-based ranks with ties averaged.
pub fn tied_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Plain-text table: one row per dataset, one column per model kind.
pub fn format_table(reports: &[RunReport], metric: fn(&RunReport) -> &Stat) -> String {
    let mut datasets: Vec<&str> = Vec::new();
    let mut kinds: Vec<ModelKind> = Vec::new();
    for r in reports {
        if !datasets.contains(&r.dataset.as_str()) {
            datasets.push(&r.dataset);
        }
        if !kinds.contains(&r.model_kind) {
            kinds.push(r.model_kind);
        }
    }
    let mut out = format!("{:<12}", "Method");
    for k in &kinds {
        out.push_str(&format!("{:>16}", k.name()));
    }
    out.push('\n');
    for ds in datasets {
        out.push_str(&format!("{ds:<12}"));
        for k in &kinds {
            let cell = reports
                .iter()
                .find(|r| r.dataset == ds && r.model_kind == *k)
                .map(|r| metric(r).display())
                .unwrap_or_else(|| "-".into());
            out.push_str(&format!("{cell:>16}"));
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Pair plots

pub const HISTOGRAM_BINS: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub column: String,
    /// Bin edges for continuous kinds, class grid points for discrete ones.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSamples {
    pub x: String,
    pub y: String,
    pub points: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairPlot {
    pub columns: Vec<String>,
    pub histograms: Vec<Histogram>,
    pub pairs: Vec<PairSamples>,
}

/// Position of a normalized value on `[0, 1]`; discrete classes go to an
/// evenly spaced grid.
pub fn plot_coordinate(schema: &Schema, c: usize, v: f64) -> f64 {
    let k = schema.columns[c].cardinality();
    if schema.columns[c].kind.is_discrete() && k > 1 {
        v / (k - 1) as f64
    } else {
        v
    }
}

/// Histograms and pairwise points over `dims` for `rows × D` normalized values.
pub fn pairplot_from_rows(schema: &Schema, rows: &[Vec<f64>], dims: &[usize]) -> Result<PairPlot> {
    let d = schema.width();
    if let Some(&bad) = dims.iter().find(|&&c| c >= d) {
        return Err(Error::InvalidArgument(format!("column {bad} out of range 0..{d}")));
    }
    let histograms = dims
        .iter()
        .map(|&c| {
            let spec = &schema.columns[c];
            let k = spec.cardinality();
            if spec.kind.is_discrete() {
                let mut counts = vec![0; k];
                for r in rows {
                    counts[r[c] as usize] += 1;
                }
                let edges = (0..k).map(|j| plot_coordinate(schema, c, j as f64)).collect();
                Histogram {
                    column: spec.name.clone(),
                    edges,
                    counts,
                }
            } else {
                let mut counts = vec![0; HISTOGRAM_BINS];
                for r in rows {
                    let b = ((r[c].clamp(0.0, 1.0) * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
                    counts[b] += 1;
                }
                let edges = (0..=HISTOGRAM_BINS).map(|j| j as f64 / HISTOGRAM_BINS as f64).collect();
                Histogram {
                    column: spec.name.clone(),
                    edges,
                    counts,
                }
            }
        })
        .collect();
    let mut pairs = Vec::new();
    for (a, &ca) in dims.iter().enumerate() {
        for &cb in &dims[a + 1..] {
            pairs.push(PairSamples {
                x: schema.columns[ca].name.clone(),
                y: schema.columns[cb].name.clone(),
                points: rows
                    .iter()
                    .map(|r| [plot_coordinate(schema, ca, r[ca]), plot_coordinate(schema, cb, r[cb])])
                    .collect(),
            });
        }
    }
    Ok(PairPlot {
        columns: dims.iter().map(|&c| schema.columns[c].name.clone()).collect(),
        histograms,
        pairs,
    })
}

/// Pair-plot tables from `n` model samples.
pub fn pairplot_export(model: &dyn TabularModel, n: usize, dims: &[usize], seed: u64) -> Result<PairPlot> {
    let draws = model.sample(n, &mut rng::stream(seed, &[0x65]))?;
    let rows: Vec<Vec<f64>> = draws.into_iter().map(|d| d.x).collect();
    pairplot_from_rows(model.schema(), &rows, dims)
}

/// Pair-plot tables of fully observed data rows.
pub fn pairplot_data(data: &Dataset, dims: &[usize]) -> Result<PairPlot> {
    let rows: Vec<Vec<f64>> = (0..data.rows())
        .filter(|&r| dims.iter().all(|&c| data.observed(r, c)))
        .map(|r| data.row(r).to_vec())
        .collect();
    pairplot_from_rows(&data.schema, &rows, dims)
}
