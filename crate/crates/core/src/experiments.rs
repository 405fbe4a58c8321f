//! Monte Carlo trials against the closed-form risks, with CSV and JSON output.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algorithms::{
    oracle_one_step, run_pipeline, skew_projection_check, spectral_init, IterationConfig,
};
use crate::error::{Error, Result};
use crate::group::loss;
use crate::lower_bound::mean_and_stderr;
use crate::model::{generate_instance, SyncParams};
use crate::rng;
use crate::theory;

/// Version tag of the results CSV and summary JSON.
pub const RESULTS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Spectral initialization plus iterations; value is the final loss.
    Pipeline,
    /// One projection step from the truth; value is the mean node error.
    Oracle,
    /// Loss of the spectral initialization alone.
    SpectralOnly,
    /// Variance ratio of the skew part of the averaged noise.
    SkewCheck,
}

/// Acceptance band on `observed / theory`. These are calibration choices
/// for finite `n`, not exact constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ToleranceBand {
    pub lower: f64,
    pub upper: f64,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Pipeline => "pipeline",
            Mode::Oracle => "oracle",
            Mode::SpectralOnly => "spectral-only",
            Mode::SkewCheck => "skew-check",
        }
    }

    pub fn tolerance(self) -> Option<ToleranceBand> {
        match self {
            Mode::Pipeline => Some(ToleranceBand { lower: 0.85, upper: 1.25 }),
            Mode::Oracle | Mode::SkewCheck => Some(ToleranceBand { lower: 0.9, upper: 1.1 }),
            Mode::SpectralOnly => None,
        }
    }

    fn theory_formula(self) -> &'static str {
        match self {
            Mode::SkewCheck => "1/2",
            _ => "sigma^2 d (d-1) / (2 n p)",
        }
    }

    /// Reference value the observed quantity is divided by.
    pub fn theory(self, params: &SyncParams) -> f64 {
        match self {
            Mode::SkewCheck => 0.5,
            _ => theory::minimax_risk(params.n, params.d, params.p, params.sigma),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExperimentSpec {
    /// `params.seed` is the master seed; trial `k` runs with
    /// `derive_seed(master, k)`.
    pub params: SyncParams,
    pub trials: usize,
    pub iteration: IterationConfig,
    pub mode: Mode,
}

impl ExperimentSpec {
    pub fn new(params: SyncParams, trials: usize, iteration: IterationConfig, mode: Mode) -> Result<Self> {
        let spec = Self {
            params,
            trials,
            iteration,
            mode,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.trials == 0 {
            return Err(Error::invalid("trials", "trials >= 1 required"));
        }
        if matches!(self.mode, Mode::Oracle | Mode::SkewCheck) && self.params.sigma <= 0.0 {
            return Err(Error::invalid("sigma", "sigma > 0 required for this mode"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRecord {
    pub trial_index: usize,
    pub seed_used: u64,
    /// Per-iteration losses (pipeline with recording), otherwise empty.
    pub losses: Vec<f64>,
    /// The mode's scalar result; `NaN` for a flagged trial.
    pub value: f64,
    pub theory: f64,
    /// `value / theory`; `None` when the theory value is zero.
    pub ratio: Option<f64>,
    /// Eigensolver failure, or an oracle trial where every node was flagged.
    pub flagged: bool,
    /// Oracle nodes whose neighbour sum was singular.
    pub flagged_nodes: usize,
    /// Skew check only: largest `|diag K_i|`.
    pub max_abs_diagonal: Option<f64>,
}

fn ratio(value: f64, theory: f64) -> Option<f64> {
    (theory > 0.0 && value.is_finite()).then(|| value / theory)
}

fn run_trial(spec: &ExperimentSpec, k: usize) -> Result<TrialRecord> {
    let seed = rng::derive_seed(spec.params.seed, k as u64);
    let params = spec.params.with_seed(seed);
    let instance = generate_instance(&params)?;
    let theory = spec.mode.theory(&params);
    let mut rec = TrialRecord {
        trial_index: k,
        seed_used: seed,
        losses: Vec::new(),
        value: f64::NAN,
        theory,
        ratio: None,
        flagged: false,
        flagged_nodes: 0,
        max_abs_diagonal: None,
    };
    let eigen_failed = |e: &Error| matches!(e, Error::EigenFailure { .. });
    match spec.mode {
        Mode::Pipeline => match run_pipeline(&instance, &spec.iteration) {
            Ok(t) => {
                rec.value = t.final_loss;
                rec.losses = t.losses;
            }
            Err(e) if eigen_failed(&e) => rec.flagged = true,
            Err(e) => return Err(e),
        },
        Mode::SpectralOnly => match spectral_init(&instance) {
            Ok(z) => rec.value = loss(&z, instance.truth(), params.group),
            Err(e) if eigen_failed(&e) => rec.flagged = true,
            Err(e) => return Err(e),
        },
        Mode::Oracle => {
            let out = oracle_one_step(&instance)?;
            rec.flagged_nodes = out.flagged_count();
            rec.value = out.mean_error();
            rec.flagged = rec.flagged_nodes == params.n;
        }
        Mode::SkewCheck => {
            let s = skew_projection_check(&instance)?;
            rec.value = s.variance_ratio;
            rec.max_abs_diagonal = Some(s.max_abs_diagonal);
            rec.flagged = s.nodes_used == 0;
        }
    }
    if rec.flagged {
        rec.value = f64::NAN;
    }
    rec.ratio = ratio(rec.value, theory);
    Ok(rec)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub trials: usize,
    /// Trials entering the statistics (unflagged).
    pub used_trials: usize,
    pub mean: f64,
    pub std_error: f64,
    pub min: f64,
    pub max: f64,
    pub theory: f64,
    /// `mean / theory`.
    pub mean_ratio: Option<f64>,
    pub flagged_trials: usize,
    pub flagged_nodes: usize,
    /// `flagged_trials / trials`.
    pub flag_rate: f64,
    /// Oracle mode: flagged nodes over all nodes.
    pub node_flag_rate: f64,
    pub max_abs_diagonal: Option<f64>,
    pub tolerance: Option<ToleranceBand>,
    pub within_tolerance: Option<bool>,
}

impl Summary {
    /// Worst of the trial-level and node-level flag rates.
    pub fn failure_rate(&self) -> f64 {
        self.flag_rate.max(self.node_flag_rate)
    }

    fn from_records(spec: &ExperimentSpec, records: &[TrialRecord]) -> Self {
        let used: Vec<f64> = records.iter().filter(|r| !r.flagged).map(|r| r.value).collect();
        let (mean, std_error) = if used.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            mean_and_stderr(&used)
        };
        let theory = spec.mode.theory(&spec.params);
        let flagged_trials = records.iter().filter(|r| r.flagged).count();
        let flagged_nodes: usize = records.iter().map(|r| r.flagged_nodes).sum();
        let mean_ratio = ratio(mean, theory);
        let tolerance = spec.mode.tolerance();
        let max_abs_diagonal = records
            .iter()
            .filter_map(|r| r.max_abs_diagonal)
            .reduce(f64::max);
        Summary {
            trials: records.len(),
            used_trials: used.len(),
            mean,
            std_error,
            min: used.iter().copied().reduce(f64::min).unwrap_or(f64::NAN),
            max: used.iter().copied().reduce(f64::max).unwrap_or(f64::NAN),
            theory,
            mean_ratio,
            flagged_trials,
            flagged_nodes,
            flag_rate: flagged_trials as f64 / records.len() as f64,
            node_flag_rate: match spec.mode {
                Mode::Oracle => flagged_nodes as f64 / (records.len() * spec.params.n) as f64,
                _ => 0.0,
            },
            max_abs_diagonal,
            tolerance,
            within_tolerance: tolerance
                .zip(mean_ratio)
                .map(|(t, r)| r >= t.lower && r <= t.upper),
        }
    }
}

fn build_pool(workers: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        if w == 0 {
            return Err(Error::invalid("workers", "workers >= 1 required"));
        }
        builder = builder.num_threads(w);
    }
    builder
        .build()
        .map_err(|e| Error::Io(format!("cannot start worker pool: {e}")))
}

/// Run every trial on a pool of `workers` threads (default: all cores).
/// Records come back ordered by trial index and do not depend on the
/// worker count.
pub fn run_experiment(spec: &ExperimentSpec, workers: Option<usize>) -> Result<(Vec<TrialRecord>, Summary)> {
    spec.validate()?;
    let pool = build_pool(workers)?;
    let records = pool.install(|| {
        (0..spec.trials)
            .into_par_iter()
            .map(|k| run_trial(spec, k))
            .collect::<Result<Vec<_>>>()
    })?;
    let summary = Summary::from_records(spec, &records);
    Ok((records, summary))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepField {
    N,
    P,
    Sigma,
    D,
}

impl SweepField {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepField::N => "n",
            SweepField::P => "p",
            SweepField::Sigma => "sigma",
            SweepField::D => "d",
        }
    }

    fn apply(self, params: &SyncParams, value: f64) -> Result<SyncParams> {
        let mut out = *params;
        let as_count = |name: &'static str| {
            if value.fract() == 0.0 && value >= 0.0 && value <= u32::MAX as f64 {
                Ok(value as usize)
            } else {
                Err(Error::invalid(name, format!("integer sweep value required, got {value}")))
            }
        };
        match self {
            SweepField::N => out.n = as_count("n")?,
            SweepField::D => out.d = as_count("d")?,
            SweepField::P => out.p = value,
            SweepField::Sigma => out.sigma = value,
        }
        out.validate()?;
        Ok(out)
    }
}

impl std::str::FromStr for SweepField {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "n" => Ok(SweepField::N),
            "p" => Ok(SweepField::P),
            "sigma" => Ok(SweepField::Sigma),
            "d" => Ok(SweepField::D),
            other => Err(Error::invalid(
                "sweep",
                format!("field must be one of n, p, sigma, d; got `{other}`"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub field: SweepField,
    pub value: f64,
    pub summary: Summary,
}

/// One summary per sweep point. Each field is varied on its own with the
/// others held at `base`; all points share the master seed.
pub fn rate_sweep(
    base: &ExperimentSpec,
    sweep: &[(SweepField, Vec<f64>)],
    workers: Option<usize>,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for (field, values) in sweep {
        for &value in values {
            let spec = ExperimentSpec {
                params: field.apply(&base.params, value)?,
                ..*base
            };
            let (_, summary) = run_experiment(&spec, workers)?;
            rows.push(SweepRow {
                field: *field,
                value,
                summary,
            });
        }
    }
    Ok(rows)
}

#[derive(Serialize)]
struct CsvRow {
    trial: usize,
    iter: usize,
    loss: f64,
    theory: f64,
    ratio: Option<f64>,
    flagged: bool,
    schema_version: u32,
}

/// One row per trial and recorded iteration (a single row when nothing was
/// recorded): `trial, iter, loss, theory, ratio, flagged, schema_version`.
pub fn write_results_csv<W: Write>(records: &[TrialRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for rec in records {
        let rows: Vec<(usize, f64)> = if rec.losses.is_empty() {
            vec![(rec.losses.len(), rec.value)]
        } else {
            rec.losses.iter().copied().enumerate().collect()
        };
        for (iter, loss) in rows {
            w.serialize(CsvRow {
                trial: rec.trial_index,
                iter,
                loss,
                theory: rec.theory,
                ratio: ratio(loss, rec.theory),
                flagged: rec.flagged,
                schema_version: RESULTS_SCHEMA_VERSION,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Spec echo, aggregate fields and tolerance metadata.
pub fn summary_json(spec: &ExperimentSpec, summary: &Summary) -> serde_json::Value {
    serde_json::json!({
        "schema_version": RESULTS_SCHEMA_VERSION,
        "spec": spec,
        "summary": summary,
        "tolerance": {
            "theory_formula": spec.mode.theory_formula(),
            "band": spec.mode.tolerance(),
            "note": "bands are finite-sample calibration choices on mean/theory",
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::GroupKind;

    fn spec(n: usize, sigma: f64, trials: usize, mode: Mode) -> ExperimentSpec {
        let params = SyncParams::new(n, 3, 1.0, sigma, GroupKind::Orthogonal, 5).unwrap();
        ExperimentSpec::new(params, trials, IterationConfig::new(5, true).unwrap(), mode).unwrap()
    }

    #[test]
    fn validation() {
        let params = SyncParams::new(10, 2, 1.0, 0.0, GroupKind::Rotation, 0).unwrap();
        let it = IterationConfig::new(3, false).unwrap();
        assert!(ExperimentSpec::new(params, 0, it, Mode::Pipeline).is_err());
        assert!(ExperimentSpec::new(params, 1, it, Mode::Oracle).is_err());
        assert!(ExperimentSpec::new(params, 1, it, Mode::Pipeline).is_ok());
    }

    #[test]
    fn single_trial_summary_equals_record() {
        let (recs, s) = run_experiment(&spec(60, 0.5, 1, Mode::Pipeline), Some(1)).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(s.mean, recs[0].value);
        assert_eq!(s.min, recs[0].value);
        assert_eq!(s.max, recs[0].value);
        assert_eq!(s.mean_ratio, recs[0].ratio);
        assert_eq!(s.std_error, 0.0);
        assert_eq!(recs[0].losses.len(), 6);
    }

    #[test]
    fn deterministic_across_worker_counts() {
        for mode in [Mode::Pipeline, Mode::Oracle, Mode::SpectralOnly, Mode::SkewCheck] {
            let sp = spec(50, 0.7, 4, mode);
            let (a, sa) = run_experiment(&sp, Some(1)).unwrap();
            let (b, sb) = run_experiment(&sp, Some(3)).unwrap();
            assert_eq!(a, b);
            assert_eq!(sa, sb);
            for (k, r) in a.iter().enumerate() {
                assert_eq!(r.trial_index, k);
                assert_eq!(r.seed_used, rng::derive_seed(5, k as u64));
            }
        }
    }

    #[test]
    fn noiseless_pipeline_has_no_ratio() {
        let (recs, s) = run_experiment(&spec(40, 0.0, 2, Mode::Pipeline), None).unwrap();
        assert!(s.mean <= 1e-8);
        assert!(recs.iter().all(|r| r.ratio.is_none()));
        assert_eq!(s.within_tolerance, None);
    }

    #[test]
    fn csv_layout() {
        let (recs, _) = run_experiment(&spec(30, 0.5, 2, Mode::Pipeline), None).unwrap();
        let mut buf = Vec::new();
        write_results_csv(&recs, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next(),
            Some("trial,iter,loss,theory,ratio,flagged,schema_version")
        );
        assert_eq!(lines.count(), 12);

        let (recs, _) = run_experiment(&spec(30, 0.5, 2, Mode::Oracle), None).unwrap();
        let mut buf = Vec::new();
        write_results_csv(&recs, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);
    }

    #[test]
    fn summary_json_carries_metadata() {
        let sp = spec(30, 0.5, 2, Mode::Oracle);
        let (_, s) = run_experiment(&sp, None).unwrap();
        let v = summary_json(&sp, &s);
        assert_eq!(v["schema_version"], 1);
        assert_eq!(v["spec"]["mode"], "oracle");
        assert_eq!(v["spec"]["params"]["n"], 30);
        assert_eq!(v["tolerance"]["band"]["lower"], 0.9);
        assert!(v["summary"]["mean"].is_number());
    }

    #[test]
    fn sweep_rows_follow_the_request() {
        let base = spec(40, 0.5, 2, Mode::Oracle);
        let rows = rate_sweep(
            &base,
            &[(SweepField::Sigma, vec![0.5, 1.0]), (SweepField::D, vec![2.0])],
            None,
        )
        .unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[2].field, SweepField::D);
        assert!(rate_sweep(&base, &[(SweepField::N, vec![40.5])], None).is_err());
        assert!(rate_sweep(&base, &[(SweepField::D, vec![1.0])], None).is_err());
    }
}
