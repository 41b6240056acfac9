//! Trial orchestration.
//!
//! A trial draws `N_S + 1` independent channel realizations, labels the first
//! `N_S` with the grid oracle, prompts the backend with them, and scores the
//! parsed answer on the last one next to the baselines:
//!
//! * `prop1`: the model's allocation, or both transmitters off when the
//!   completion cannot be parsed or the backend call failed.
//! * `prop2`: whichever of `prop1` and binary power control scores higher
//!   (binary on ties).
//! * `optimal`, `binary`, `random`: the reference strategies.
//!
//! Every trial owns an RNG stream derived from `(master_seed, N_S, trial_id)`,
//! so results do not depend on how trials are scheduled.

mod report;

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{BackendConfig, BackendError, CompletionBackend};
use crate::channel::{ChannelGains, SystemParams};
use crate::codec::{build_prompt, encode_episode, parse_response, Episode, GainDomain, ParseOutcome};
use crate::objectives::{evaluate, ObjectiveKind, PowerAllocation};
use crate::solvers::{solve_binary, solve_grid, solve_grid_with_value, solve_random, BinaryOptions, GridSpec};

pub use report::{
    read_trial_csv, render_svg, summarize, write_csv, write_dataset_csv, write_plots, write_summary_csv, TrialRow,
    SUMMARY_CSV, SUMMARY_HEADER, TRIALS_CSV, TRIAL_HEADER,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Backend(BackendError),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl From<BackendError> for HarnessError {
    fn from(e: BackendError) -> Self {
        match e {
            BackendError::Config(msg) => HarnessError::Config(msg),
            other => HarnessError::Backend(other),
        }
    }
}

/// Everything needed to reproduce an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub params: SystemParams,
    pub objective: ObjectiveKind,
    pub n_shots_list: Vec<usize>,
    pub n_trials: usize,
    pub master_seed: u64,
    pub grid: GridSpec,
    pub binary_opts: BinaryOptions,
    pub backend: BackendConfig,
    pub gain_domain: GainDomain,
    /// Worker threads for trial preparation and scoring; 0 uses all cores.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            params: SystemParams::default(),
            objective: ObjectiveKind::SumEe,
            n_shots_list: vec![25, 50, 100, 150, 200],
            n_trials: 500,
            master_seed: 0,
            grid: GridSpec::default(),
            binary_opts: BinaryOptions::default(),
            backend: BackendConfig::default(),
            gain_domain: GainDomain::Db,
            workers: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.params.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.n_trials == 0 {
            return Err(HarnessError::Config("n_trials must be at least 1".into()));
        }
        if self.n_shots_list.is_empty() || self.n_shots_list.contains(&0) {
            return Err(HarnessError::Config("n_shots_list must be non-empty with entries >= 1".into()));
        }
        if self.grid.levels < 2 {
            return Err(HarnessError::Config("grid.levels must be at least 2".into()));
        }
        self.backend.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Prop1,
    Prop2,
    Optimal,
    Binary,
    Random,
}

impl Strategy {
    pub const ALL: [Strategy; 5] =
        [Strategy::Prop1, Strategy::Prop2, Strategy::Optimal, Strategy::Binary, Strategy::Random];

    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Prop1 => "prop1",
            Strategy::Prop2 => "prop2",
            Strategy::Optimal => "optimal",
            Strategy::Binary => "binary",
            Strategy::Random => "random",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyOutcome {
    pub alloc: PowerAllocation,
    pub value: f64,
    /// `value / optimal value`; 1 when the optimum itself is 0.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: usize,
    pub n_shots: usize,
    pub objective: ObjectiveKind,
    pub parse_ok: bool,
    /// Why `prop1` fell back to zero power, when it did.
    pub failure: Option<String>,
    /// Indexed by [`Strategy`] order.
    pub outcomes: [StrategyOutcome; 5],
}

impl TrialRecord {
    pub fn outcome(&self, s: Strategy) -> &StrategyOutcome {
        &self.outcomes[s.index()]
    }
}

/// Aggregate of one strategy at one `N_S`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub n_shots: usize,
    pub objective: ObjectiveKind,
    pub strategy: Strategy,
    pub mean_value: f64,
    pub mean_ratio: f64,
    pub parse_failure_rate: f64,
    pub n_trials: usize,
}

/// RNG for one trial, derived by hashing the seed triple.
pub fn trial_rng(master_seed: u64, n_shots: usize, trial_id: usize) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(b"powerllm/trial");
    hasher.update(master_seed.to_le_bytes());
    hasher.update((n_shots as u64).to_le_bytes());
    hasher.update((trial_id as u64).to_le_bytes());
    ChaCha8Rng::from_seed(hasher.finalize().into())
}

/// A trial up to the point where the model is asked.
#[derive(Debug, Clone)]
pub struct PreparedTrial {
    pub trial_id: usize,
    pub n_shots: usize,
    pub episode: Episode,
    /// `Err` carries the reason the episode could not be rendered.
    pub prompt: Result<String, String>,
    pub random_alloc: PowerAllocation,
}

/// Samples and labels the episode and draws the random baseline.
pub fn prepare_trial<R: rand::Rng + ?Sized>(
    cfg: &RunConfig,
    n_shots: usize,
    trial_id: usize,
    rng: &mut R,
) -> PreparedTrial {
    let params = &cfg.params;
    let shots = (0..n_shots)
        .map(|_| {
            let g = ChannelGains::sample(params, rng);
            (g, solve_grid(cfg.objective, &g, params, cfg.grid))
        })
        .collect();
    let query = ChannelGains::sample(params, rng);
    let episode = Episode { shots, query };
    let prompt = encode_episode(&episode, params.p_max, cfg.gain_domain)
        .and_then(|enc| build_prompt(&enc))
        .map_err(|e| e.to_string());
    let raw = solve_random(params, rng);
    let random_alloc = PowerAllocation::new(cfg.grid.snap(raw.watts[0], params.p_max), cfg.grid.snap(raw.watts[1], params.p_max));
    PreparedTrial { trial_id, n_shots, episode, prompt, random_alloc }
}

/// Scores a prepared trial given the backend's answer.
pub fn finish_trial(
    cfg: &RunConfig,
    prepared: &PreparedTrial,
    completion: Option<Result<String, BackendError>>,
) -> TrialRecord {
    let params = &cfg.params;
    let kind = cfg.objective;
    let query = &prepared.episode.query;

    let outcome = match (&prepared.prompt, completion) {
        (Err(reason), _) => ParseOutcome::Failure(reason.clone()),
        (Ok(_), Some(Ok(text))) => parse_response(&text, params.p_max),
        (Ok(_), Some(Err(e))) => ParseOutcome::Failure(e.to_string()),
        (Ok(_), None) => ParseOutcome::Failure("no completion".into()),
    };
    let parse_ok = outcome.is_ok();
    let failure = match &outcome {
        ParseOutcome::Failure(reason) => Some(reason.clone()),
        ParseOutcome::Allocation(_) => None,
    };

    let (opt_alloc, opt_value) = solve_grid_with_value(kind, query, params, cfg.grid);
    let prop1 = outcome.allocation();
    let binary = solve_binary(kind, query, params, cfg.binary_opts);
    let prop1_value = evaluate(kind, query, &prop1, params);
    let binary_value = evaluate(kind, query, &binary, params);
    let (prop2, prop2_value) =
        if prop1_value > binary_value { (prop1, prop1_value) } else { (binary, binary_value) };
    let random_value = evaluate(kind, query, &prepared.random_alloc, params);

    let ratio = |v: f64| if opt_value > 0.0 { v / opt_value } else { 1.0 };
    let o = |alloc, value| StrategyOutcome { alloc, value, ratio: ratio(value) };
    TrialRecord {
        trial_id: prepared.trial_id,
        n_shots: prepared.n_shots,
        objective: kind,
        parse_ok,
        failure,
        outcomes: [
            o(prop1, prop1_value),
            o(prop2, prop2_value),
            o(opt_alloc, opt_value),
            o(binary, binary_value),
            o(prepared.random_alloc, random_value),
        ],
    }
}

/// Runs a single trial end to end. Only fatal backend errors (configuration,
/// replay drift) are returned; everything else is recorded in the trial.
pub fn run_trial<R: rand::Rng + ?Sized>(
    cfg: &RunConfig,
    backend: &dyn CompletionBackend,
    n_shots: usize,
    trial_id: usize,
    rng: &mut R,
) -> Result<TrialRecord, HarnessError> {
    let prepared = prepare_trial(cfg, n_shots, trial_id, rng);
    let completion = match &prepared.prompt {
        Ok(prompt) => {
            let result = backend.complete(&cfg.backend.request(prompt.as_str()));
            match result {
                Err(e) if e.is_fatal() => return Err(e.into()),
                other => Some(other),
            }
        }
        Err(_) => None,
    };
    Ok(finish_trial(cfg, &prepared, completion))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub records: Vec<TrialRecord>,
    pub summaries: Vec<SummaryRow>,
}

/// Runs every `(N_S, trial)` combination. Records come back ordered by the
/// position of `N_S` in the config, then by trial id.
pub fn run_experiment(cfg: &RunConfig, backend: &dyn CompletionBackend) -> Result<ExperimentOutput, HarnessError> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| HarnessError::Config(format!("worker pool: {e}")))?;
    pool.install(|| {
        let mut records = Vec::with_capacity(cfg.n_shots_list.len() * cfg.n_trials);
        for &n_shots in &cfg.n_shots_list {
            let prepared: Vec<PreparedTrial> = (0..cfg.n_trials)
                .into_par_iter()
                .map(|t| prepare_trial(cfg, n_shots, t, &mut trial_rng(cfg.master_seed, n_shots, t)))
                .collect();

            let issued: Vec<usize> = (0..prepared.len()).filter(|&i| prepared[i].prompt.is_ok()).collect();
            let requests: Vec<_> = issued
                .iter()
                .map(|&i| cfg.backend.request(prepared[i].prompt.as_deref().expect("issued")))
                .collect();
            let mut completions: Vec<Option<Result<String, BackendError>>> =
                prepared.iter().map(|_| None).collect();
            for (i, result) in issued.into_iter().zip(backend.complete_batch(&requests)) {
                if let Err(e) = &result {
                    if e.is_fatal() {
                        return Err(HarnessError::from(result.unwrap_err()));
                    }
                }
                completions[i] = Some(result);
            }

            let batch: Vec<TrialRecord> = prepared
                .par_iter()
                .zip(completions.into_par_iter())
                .map(|(p, c)| finish_trial(cfg, p, c))
                .collect();
            records.extend(batch);
        }
        let rows: Vec<TrialRow> = records.iter().flat_map(TrialRow::from_record).collect();
        let summaries = summarize(&rows);
        Ok(ExperimentOutput { records, summaries })
    })
}

/// One oracle-labeled channel realization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub gains: ChannelGains,
    pub alloc: PowerAllocation,
    pub value: f64,
}

/// `count` independent realizations labeled by the grid oracle.
pub fn generate_dataset(
    params: &SystemParams,
    objective: ObjectiveKind,
    grid: GridSpec,
    count: usize,
    seed: u64,
) -> Vec<LabeledSample> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = trial_rng(seed, 0, i);
            let gains = ChannelGains::sample(params, &mut rng);
            let (alloc, value) = solve_grid_with_value(objective, &gains, params, grid);
            LabeledSample { gains, alloc, value }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MalformedMock, NnMock};
    use crate::codec::{decode_power, encode_power};

    fn small_cfg(objective: ObjectiveKind) -> RunConfig {
        RunConfig {
            objective,
            n_shots_list: vec![10],
            n_trials: 20,
            grid: GridSpec::new(21).unwrap(),
            ..Default::default()
        }
    }

    #[test]
    fn malformed_backend_falls_back_to_binary() {
        let cfg = small_cfg(ObjectiveKind::SumEe);
        for t in 0..10 {
            let rec = run_trial(&cfg, &MalformedMock, 5, t, &mut trial_rng(1, 5, t)).unwrap();
            assert!(!rec.parse_ok);
            assert_eq!(rec.outcome(Strategy::Prop1).value, 0.0);
            assert_eq!(rec.outcome(Strategy::Prop2), rec.outcome(Strategy::Binary));
        }
    }

    #[test]
    fn duplicated_query_reproduces_label() {
        // A query equal to a shot is answered with that shot's label, so prop1
        // lands within the quantization gap of the oracle.
        let cfg = RunConfig { grid: GridSpec::default(), ..small_cfg(ObjectiveKind::SumEe) };
        let params = cfg.params;
        let mut prepared = prepare_trial(&cfg, 8, 0, &mut trial_rng(3, 8, 0));
        let (shot_gains, label) = prepared.episode.shots[4];
        prepared.episode.query = shot_gains;
        let enc = encode_episode(&prepared.episode, params.p_max, cfg.gain_domain).unwrap();
        prepared.prompt = build_prompt(&enc).map_err(|e| e.to_string());
        let answer = NnMock.complete(&cfg.backend.request(prepared.prompt.clone().unwrap()));
        let rec = finish_trial(&cfg, &prepared, Some(answer));
        assert!(rec.parse_ok);
        let quantized = decode_power(encode_power(&label, params.p_max), params.p_max);
        let expected = evaluate(cfg.objective, &shot_gains, &quantized, &params);
        assert_eq!(rec.outcome(Strategy::Prop1).value, expected);
        let label_value = evaluate(cfg.objective, &shot_gains, &label, &params);
        assert!((rec.outcome(Strategy::Prop1).value - label_value).abs() <= 1e-12 * label_value);
    }

    #[test]
    fn trial_invariants_hold() {
        for kind in [ObjectiveKind::SumSe, ObjectiveKind::SumEe] {
            let cfg = small_cfg(kind);
            let out = run_experiment(&cfg, &NnMock).unwrap();
            assert_eq!(out.records.len(), 20);
            for rec in &out.records {
                let v = |s| rec.outcome(s).value;
                assert_eq!(v(Strategy::Prop2), v(Strategy::Prop1).max(v(Strategy::Binary)));
                assert!(v(Strategy::Optimal) >= v(Strategy::Prop2));
                assert!(v(Strategy::Binary) >= 0.0);
                for s in Strategy::ALL {
                    let r = rec.outcome(s).ratio;
                    assert!((0.0..=1.0).contains(&r), "{s:?} ratio {r}");
                    assert!(rec.outcome(s).alloc.is_feasible(cfg.params.p_max));
                }
            }
            assert_eq!(out.summaries.len(), 5);
        }
    }

    #[test]
    fn trial_streams_are_independent_of_scheduling() {
        let cfg = small_cfg(ObjectiveKind::SumSe);
        let parallel = run_experiment(&cfg, &NnMock).unwrap();
        let sequential = run_experiment(&RunConfig { workers: 1, ..cfg.clone() }, &NnMock).unwrap();
        assert_eq!(parallel, sequential);
        let single = run_trial(&cfg, &NnMock, 10, 7, &mut trial_rng(cfg.master_seed, 10, 7)).unwrap();
        assert_eq!(single, parallel.records[7]);
    }

    #[test]
    fn rng_streams_differ_by_every_key() {
        use rand::Rng;
        let draw = |s, n, t| trial_rng(s, n, t).random::<u64>();
        let base = draw(1, 2, 3);
        assert_eq!(base, draw(1, 2, 3));
        assert_ne!(base, draw(2, 2, 3));
        assert_ne!(base, draw(1, 3, 3));
        assert_ne!(base, draw(1, 2, 4));
    }

    #[test]
    fn config_validation() {
        assert!(RunConfig::default().validate().is_ok());
        let bad = RunConfig { n_trials: 0, ..Default::default() };
        assert!(matches!(bad.validate(), Err(HarnessError::Config(_))));
        let bad = RunConfig { n_shots_list: vec![10, 0], ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = RunConfig { n_shots_list: vec![], ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn dataset_is_labeled_by_oracle() {
        let params = SystemParams::default();
        let data = generate_dataset(&params, ObjectiveKind::SumSe, GridSpec::new(11).unwrap(), 5, 9);
        assert_eq!(data.len(), 5);
        for s in &data {
            assert_eq!(evaluate(ObjectiveKind::SumSe, &s.gains, &s.alloc, &params), s.value);
        }
        assert_eq!(data, generate_dataset(&params, ObjectiveKind::SumSe, GridSpec::new(11).unwrap(), 5, 9));
    }
}
