//! Experiment grids plus the socket-level integration run.
//!
//! Grid points are independent and may run in parallel. Each owns its
//! ledger and RNG sub-streams; rows come back in grid order.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::chainsim::{BlockTiming, ChainConfig, GasSchedule, SimTime, TokenAmount, FEE_SINK};
use crate::channel::{Chain, CHANNEL_CONTRACT};
use crate::crypto::{Address, KeyPair};
use crate::net::{EdgeServer, ProxyServer, TcpNetwork};
use crate::node::{
    run_task_prefixes, run_tasks, EdgeConfig, EdgeService, LocalNetwork, NodeError, RunOptions,
    SessionMode, SessionReport, TerminalSession,
};
use crate::pricing::{quantize_ether, PriceFeed, PriceModel};
use crate::proxy::{greedy_select, Candidate, Proxy, ProxyConfig};
use crate::seed::{subseed, substream};

/// Sub-stream tags, so experiments never share random numbers.
const TAG_TIME: u64 = 1;
const TAG_GAS: u64 = 2;
const TAG_COST: u64 = 3;
const TAG_BLOCKS: u64 = 4;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("run aborted: {0}")]
    Aborted(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Node(#[from] NodeError),
}

impl HarnessError {
    /// 2 for usage errors, 1 for everything that went wrong while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            _ => 1,
        }
    }
}

fn usage(msg: impl Into<String>) -> HarnessError {
    HarnessError::Usage(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    ChannelBenefitTime,
    ChannelBenefitGas,
    CostMin,
}

impl Experiment {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::ChannelBenefitTime => "channel_benefit_time",
            Self::ChannelBenefitGas => "channel_benefit_gas",
            Self::CostMin => "cost_min",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Block layout used by the time experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimingModel {
    /// Exponential gaps with mean equal to the interval; the expected wait
    /// for the next block is a full interval from any submission time.
    #[default]
    Poisson,
    /// Blocks exactly on the `k × interval` grid.
    Fixed,
}

fn one_or_many<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(u8),
        Many(Vec<u8>),
    }
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(x) => vec![x],
        OneOrMany::Many(v) => v,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Restricts `channel-benefit` to one of its two halves.
    pub experiment: Option<Experiment>,
    /// Defaults to 1, 5, …, 50 for channel benefit and 5, …, 20 for cost-min.
    pub task_counts: Option<Vec<u64>>,
    pub block_intervals_s: Vec<f64>,
    pub gas_prices_gwei: Vec<u64>,
    pub repetitions: u32,
    pub edge_counts: Vec<usize>,
    #[serde(alias = "price_scheme", deserialize_with = "one_or_many")]
    pub price_schemes: Vec<u8>,
    pub seed: u64,
    pub output_path: Option<PathBuf>,
    pub t_service_s: f64,
    /// Edges registered for the channel-benefit sessions.
    pub channel_edges: usize,
    pub block_timing: TimingModel,
    pub gas_schedule: GasSchedule,
    pub edge_deposit: TokenAmount,
    pub terminal_deposit: TokenAmount,
    pub proxy_fee: TokenAmount,
    pub strict_paper_digest: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: None,
            task_counts: None,
            block_intervals_s: vec![5.0, 10.0, 15.0],
            gas_prices_gwei: vec![1, 4, 7],
            repetitions: 100,
            edge_counts: vec![5, 10, 15, 20],
            price_schemes: vec![1, 2, 3],
            seed: 2019,
            output_path: None,
            t_service_s: 14.9,
            channel_edges: 3,
            block_timing: TimingModel::Poisson,
            gas_schedule: GasSchedule::default(),
            edge_deposit: TokenAmount::from_ether(1),
            terminal_deposit: TokenAmount::from_ether(2),
            proxy_fee: TokenAmount::ZERO,
            strict_paper_digest: false,
        }
    }
}

pub fn default_channel_task_counts() -> Vec<u64> {
    std::iter::once(1).chain((5..=50).step_by(5)).collect()
}

pub fn default_cost_task_counts() -> Vec<u64> {
    vec![5, 10, 15, 20]
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self, HarnessError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.repetitions == 0 {
            return Err(usage("repetitions must be at least 1"));
        }
        if let Some(t) = &self.task_counts {
            if t.is_empty() || t.contains(&0) {
                return Err(usage("task_counts must be non-empty and positive"));
            }
        }
        if self.block_intervals_s.is_empty()
            || self
                .block_intervals_s
                .iter()
                .any(|&i| !(i >= 0.001 && i.is_finite()))
        {
            return Err(usage("block_intervals_s must be non-empty and positive"));
        }
        if self.gas_prices_gwei.is_empty() || self.gas_prices_gwei.contains(&0) {
            return Err(usage("gas_prices_gwei must be non-empty and positive"));
        }
        if self.edge_counts.is_empty() || self.edge_counts.contains(&0) {
            return Err(usage("edge_counts must be non-empty and at least 1"));
        }
        if self.price_schemes.is_empty() {
            return Err(usage("price_schemes must be non-empty"));
        }
        for &s in &self.price_schemes {
            PriceModel::scheme(s).map_err(|e| usage(e.to_string()))?;
        }
        if !(self.t_service_s >= 0.0 && self.t_service_s.is_finite()) {
            return Err(usage("t_service_s must be non-negative"));
        }
        if self.channel_edges == 0 {
            return Err(usage("channel_edges must be at least 1"));
        }
        let g = &self.gas_schedule;
        if g.transfer_gas == 0 || g.open_gas == 0 || g.close_gas == 0 {
            return Err(usage("gas units must be positive"));
        }
        ProxyConfig {
            edge_deposit: self.edge_deposit,
            fee: self.proxy_fee,
            strict_paper_digest: self.strict_paper_digest,
        }
        .validate()
        .map_err(|e| usage(e.to_string()))
    }

    fn channel_task_counts(&self) -> Vec<u64> {
        self.task_counts
            .clone()
            .unwrap_or_else(default_channel_task_counts)
    }

    fn cost_task_counts(&self) -> Vec<u64> {
        self.task_counts
            .clone()
            .unwrap_or_else(default_cost_task_counts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    S,
    Ether,
}

/// One averaged grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRow {
    pub experiment: Experiment,
    pub mode: &'static str,
    pub tasks: u64,
    pub interval_s: Option<f64>,
    pub gas_price_gwei: Option<u64>,
    pub edges: Option<usize>,
    pub scheme: Option<u8>,
    pub mean: f64,
    pub stddev: f64,
    pub unit: Unit,
    /// Per-repetition measurements the mean was taken over.
    pub samples: Vec<f64>,
}

/// Sample mean and (n − 1) standard deviation.
pub fn mean_stddev(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    if samples.windows(2).all(|w| w[0] == w[1]) {
        // Keep constant series exact instead of picking up rounding noise.
        return (samples[0], 0.0);
    }
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl ExperimentRow {
    #[allow(clippy::too_many_arguments)]
    fn new(
        experiment: Experiment,
        mode: &'static str,
        tasks: u64,
        interval_s: Option<f64>,
        gas_price_gwei: Option<u64>,
        edges: Option<usize>,
        scheme: Option<u8>,
        unit: Unit,
        samples: Vec<f64>,
    ) -> Self {
        let (mean, stddev) = mean_stddev(&samples);
        Self {
            experiment,
            mode,
            tasks,
            interval_s,
            gas_price_gwei,
            edges,
            scheme,
            mean,
            stddev,
            unit,
            samples,
        }
    }

    /// Standard error of the mean.
    pub fn std_error(&self) -> f64 {
        self.stddev / (self.samples.len() as f64).sqrt()
    }
}

pub const CSV_HEADER: [&str; 10] = [
    "experiment",
    "mode",
    "tasks",
    "interval_s",
    "gas_price_gwei",
    "edges",
    "scheme",
    "mean",
    "stddev",
    "unit",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_csv<W: Write>(rows: &[ExperimentRow], out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| HarnessError::Io(std::io::Error::other(e));
    w.write_record(CSV_HEADER).map_err(err)?;
    for r in rows {
        w.write_record([
            r.experiment.to_string(),
            r.mode.to_string(),
            r.tasks.to_string(),
            opt(r.interval_s),
            opt(r.gas_price_gwei),
            opt(r.edges),
            opt(r.scheme),
            r.mean.to_string(),
            r.stddev.to_string(),
            match r.unit {
                Unit::S => "s".into(),
                Unit::Ether => "ether".into(),
            },
        ])
        .map_err(err)?;
    }
    w.flush()?;
    Ok(())
}

/// Keys shared by every repetition of an experiment.
struct Actors {
    proxy: KeyPair,
    user: KeyPair,
    edges: Vec<KeyPair>,
}

impl Actors {
    fn new(n_edges: usize) -> Self {
        Self {
            proxy: KeyPair::from_label("tollnet/proxy"),
            user: KeyPair::from_label("tollnet/terminal"),
            edges: (0..n_edges)
                .map(|i| KeyPair::from_label(&format!("tollnet/edge/{i}")))
                .collect(),
        }
    }
}

struct SessionSpec {
    mode: SessionMode,
    task_counts: Vec<u64>,
    chain: ChainConfig,
    model: PriceModel,
    price_seed: u64,
}

fn scaled_deposit(floor: TokenAmount, tasks: u64, model: &PriceModel) -> TokenAmount {
    floor.max(quantize_ether(tasks as f64 * model.price_ceiling()))
}

/// One terminal session per task count on a fresh in-memory network.
///
/// Sessions share their common prefix, so every count sees the same block
/// schedule and price draws as it would if run on its own.
fn run_sessions(
    cfg: &ExperimentConfig,
    actors: &Actors,
    spec: &SessionSpec,
) -> Result<Vec<(u64, SessionReport)>, HarnessError> {
    let longest = spec.task_counts.iter().copied().max().unwrap_or(0);
    let edge_deposit = scaled_deposit(cfg.edge_deposit, longest, &spec.model);
    let user_deposit = scaled_deposit(cfg.terminal_deposit, longest, &spec.model);
    let plenty = TokenAmount::from_ether(1_000_000);
    let mut genesis = vec![
        (actors.proxy.address(), plenty),
        (actors.user.address(), plenty),
    ];
    genesis.extend(
        actors
            .edges
            .iter()
            .map(|e| (e.address(), TokenAmount::from_ether(1))),
    );
    let proxy_config = ProxyConfig {
        edge_deposit,
        fee: cfg.proxy_fee,
        strict_paper_digest: cfg.strict_paper_digest,
    };
    let chain =
        Chain::new(spec.chain, genesis, proxy_config.digest_mode()).map_err(NodeError::from)?;
    let supply = chain.ledger().total_supply();
    let proxy =
        Proxy::new(actors.proxy.clone(), proxy_config, spec.price_seed).map_err(NodeError::from)?;
    let mut net = LocalNetwork::new(chain, proxy);
    let edge_config = EdgeConfig {
        service_time: SimTime::from_secs_f64(cfg.t_service_s),
        ..EdgeConfig::default()
    };
    for key in &actors.edges {
        net.add_edge(EdgeService::new(key.clone(), edge_config), spec.model)?;
    }

    let mut session = TerminalSession::new(actors.user.clone(), spec.mode);
    let opts = RunOptions {
        withdraw_on_last: true,
        forge_at: None,
    };
    if spec.mode == SessionMode::Pc {
        session.open(&mut net, user_deposit)?;
    }
    let forks = run_task_prefixes(&mut session, &mut net, &spec.task_counts, opts)?;
    let mut out = Vec::with_capacity(forks.len());
    for (n, report, net) in forks {
        if net.chain().ledger().total_supply() != supply {
            return Err(HarnessError::Invariant(
                "total supply changed during a session".into(),
            ));
        }
        if spec.mode == SessionMode::Pc {
            let l = net
                .proxy()
                .user_ledger(&actors.user.address())
                .ok_or_else(|| {
                    HarnessError::Invariant("proxy holds no claim for the terminal".into())
                })?;
            if l.best_claim != report.total_paid()
                || l.best_claim - l.relayed_to_edges != l.fees_retained
            {
                return Err(HarnessError::Invariant(
                    "relay accounting does not balance".into(),
                ));
            }
            if net
                .chain()
                .collateral(&actors.user.address(), &actors.proxy.address())
                != TokenAmount::ZERO
            {
                return Err(HarnessError::Invariant(
                    "terminal channel still funded after withdrawal".into(),
                ));
            }
        }
        out.push((n, report));
    }
    Ok(out)
}

const MODES: [SessionMode; 2] = [SessionMode::Pc, SessionMode::Wpc];

/// Runs `measure` over every (case, repetition) pair, in parallel, and
/// returns `samples[case][count index][rep]` with counts in ascending order.
fn sample_grid<C: Sync>(
    cases: &[C],
    repetitions: u32,
    measure: impl Fn(&C, u64) -> Result<Vec<(u64, f64)>, HarnessError> + Sync,
) -> Result<Vec<Vec<Vec<f64>>>, HarnessError> {
    let jobs: Vec<(usize, u64)> = (0..cases.len())
        .flat_map(|c| (0..u64::from(repetitions)).map(move |r| (c, r)))
        .collect();
    let results: Vec<Vec<(u64, f64)>> = jobs
        .par_iter()
        .map(|&(c, rep)| measure(&cases[c], rep))
        .collect::<Result<_, _>>()?;
    let mut grid: Vec<Vec<Vec<f64>>> = vec![Vec::new(); cases.len()];
    for (&(c, _), per_count) in jobs.iter().zip(results) {
        let cell = &mut grid[c];
        if cell.is_empty() {
            cell.resize(per_count.len(), Vec::new());
        }
        for (i, (_, v)) in per_count.into_iter().enumerate() {
            cell[i].push(v);
        }
    }
    Ok(grid)
}

fn sorted_counts(counts: &[u64]) -> Vec<u64> {
    let mut v = counts.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

/// Total completion time per (tasks, interval, mode).
pub fn run_channel_benefit_time(
    cfg: &ExperimentConfig,
) -> Result<Vec<ExperimentRow>, HarnessError> {
    cfg.validate()?;
    let actors = Actors::new(cfg.channel_edges);
    let model = PriceModel::scheme(cfg.price_schemes[0]).expect("validated");
    let task_counts = cfg.channel_task_counts();
    let counts = sorted_counts(&task_counts);
    let mut cases = Vec::new();
    for &interval in &cfg.block_intervals_s {
        for mode in MODES {
            cases.push((interval, mode));
        }
    }
    let grid = sample_grid(&cases, cfg.repetitions, |&(interval, mode), rep| {
        let interval_ms = SimTime::from_secs_f64(interval).millis();
        let block_timing = match cfg.block_timing {
            TimingModel::Poisson => BlockTiming::Poisson {
                seed: subseed(
                    cfg.seed,
                    &[TAG_TIME, TAG_BLOCKS, interval_ms, mode as u64, rep],
                ),
            },
            TimingModel::Fixed => BlockTiming::Fixed,
        };
        let spec = SessionSpec {
            mode,
            task_counts: counts.clone(),
            chain: ChainConfig {
                block_interval: SimTime::from_millis(interval_ms),
                gas_price: TokenAmount::from_gwei(1),
                gas_schedule: cfg.gas_schedule,
                block_timing,
            },
            model,
            price_seed: subseed(cfg.seed, &[TAG_TIME, interval_ms, rep]),
        };
        Ok(run_sessions(cfg, &actors, &spec)?
            .into_iter()
            .map(|(n, r)| (n, r.total_time.as_secs_f64()))
            .collect())
    })?;

    let mut rows = Vec::new();
    for &n in &task_counts {
        let i = counts.binary_search(&n).expect("from the same list");
        for (c, &(interval, mode)) in cases.iter().enumerate() {
            rows.push(ExperimentRow::new(
                Experiment::ChannelBenefitTime,
                mode.label(),
                n,
                Some(interval),
                None,
                None,
                None,
                Unit::S,
                grid[c][i].clone(),
            ));
        }
    }
    Ok(rows)
}

/// Total gas fee per (tasks, gas price, mode).
///
/// Gas units do not depend on the gas price, so each session runs once at
/// the highest configured price and its metered units are priced at every
/// grid price.
pub fn run_channel_benefit_gas(cfg: &ExperimentConfig) -> Result<Vec<ExperimentRow>, HarnessError> {
    cfg.validate()?;
    let actors = Actors::new(cfg.channel_edges);
    let model = PriceModel::scheme(cfg.price_schemes[0]).expect("validated");
    let run_price = TokenAmount::from_gwei(u128::from(
        *cfg.gas_prices_gwei.iter().max().expect("validated"),
    ));
    let task_counts = cfg.channel_task_counts();
    let counts = sorted_counts(&task_counts);
    let grid = sample_grid(&MODES, cfg.repetitions, |&mode, rep| {
        let spec = SessionSpec {
            mode,
            task_counts: counts.clone(),
            chain: ChainConfig {
                block_interval: SimTime::from_secs(15),
                gas_price: run_price,
                gas_schedule: cfg.gas_schedule,
                block_timing: BlockTiming::Fixed,
            },
            model,
            price_seed: subseed(cfg.seed, &[TAG_GAS, rep]),
        };
        run_sessions(cfg, &actors, &spec)?
            .into_iter()
            .map(|(n, r)| {
                if run_price.checked_mul(u128::from(r.gas_units)) != Some(r.gas_fee) {
                    return Err(HarnessError::Invariant(format!(
                        "fee {} differs from metered gas {} x {}",
                        r.gas_fee, r.gas_units, run_price
                    )));
                }
                Ok((n, r.gas_units as f64))
            })
            .collect()
    })?;

    let mut rows = Vec::new();
    for &n in &task_counts {
        let i = counts.binary_search(&n).expect("from the same list");
        for &price in &cfg.gas_prices_gwei {
            for (m, mode) in MODES.iter().enumerate() {
                let samples = grid[m][i]
                    .iter()
                    .map(|&units| {
                        TokenAmount::from_gwei(u128::from(price) * units as u128).as_ether_f64()
                    })
                    .collect();
                rows.push(ExperimentRow::new(
                    Experiment::ChannelBenefitGas,
                    mode.label(),
                    n,
                    None,
                    Some(price),
                    None,
                    None,
                    Unit::Ether,
                    samples,
                ));
            }
        }
    }
    Ok(rows)
}

/// Runs the time and/or gas halves as selected by `cfg.experiment`.
pub fn run_channel_benefit(cfg: &ExperimentConfig) -> Result<Vec<ExperimentRow>, HarnessError> {
    let mut rows = Vec::new();
    match cfg.experiment {
        None => {
            rows.extend(run_channel_benefit_time(cfg)?);
            rows.extend(run_channel_benefit_gas(cfg)?);
        }
        Some(Experiment::ChannelBenefitTime) => rows.extend(run_channel_benefit_time(cfg)?),
        Some(Experiment::ChannelBenefitGas) => rows.extend(run_channel_benefit_gas(cfg)?),
        Some(Experiment::CostMin) => {
            return Err(usage("experiment cost_min is run by the cost-min command"))
        }
    }
    check_channel_benefit(&rows)?;
    Ok(rows)
}

/// Grid-wide checks: PC gas identical everywhere for a given price, WPC gas
/// strictly increasing in task count.
pub fn check_channel_benefit(rows: &[ExperimentRow]) -> Result<(), HarnessError> {
    let gas: Vec<&ExperimentRow> = rows
        .iter()
        .filter(|r| r.experiment == Experiment::ChannelBenefitGas)
        .collect();
    let mut prices: Vec<u64> = gas.iter().filter_map(|r| r.gas_price_gwei).collect();
    prices.sort_unstable();
    prices.dedup();
    for p in prices {
        let at = |mode: &str| {
            let mut v: Vec<&ExperimentRow> = gas
                .iter()
                .copied()
                .filter(|r| r.gas_price_gwei == Some(p) && r.mode == mode)
                .collect();
            v.sort_by_key(|r| r.tasks);
            v
        };
        let pc = at("PC");
        if pc.windows(2).any(|w| w[0].mean != w[1].mean) {
            return Err(HarnessError::Invariant(format!(
                "PC gas varies with task count at {p} Gwei"
            )));
        }
        let wpc = at("WPC");
        if wpc
            .windows(2)
            .any(|w| w[0].tasks < w[1].tasks && w[0].mean >= w[1].mean)
        {
            return Err(HarnessError::Invariant(format!(
                "WPC gas not increasing in task count at {p} Gwei"
            )));
        }
    }
    Ok(())
}

/// Per-task quote totals under greedy (CM) and random (WCM) edge choice.
pub fn cost_min_repetition(
    tasks: u64,
    edges: usize,
    model: PriceModel,
    seed: u64,
) -> (TokenAmount, TokenAmount) {
    let mut feeds: Vec<PriceFeed> = (0..edges)
        .map(|i| {
            let mut a = [0u8; 20];
            a[12..].copy_from_slice(&(i as u64).to_be_bytes());
            PriceFeed::new(Address(a), model, seed, i as u64).expect("validated model")
        })
        .collect();
    let mut pick = substream(seed, &[0x7069_636b]);
    let mut cm = TokenAmount::ZERO;
    let mut wcm = TokenAmount::ZERO;
    let mut quotes = Vec::with_capacity(edges);
    for _ in 0..tasks {
        quotes.clear();
        quotes.extend(feeds.iter_mut().enumerate().map(|(i, f)| {
            let q = f.advance();
            Candidate {
                edge: q.edge,
                price: q.price,
                registration_seq: i as u64,
            }
        }));
        cm = cm + greedy_select(&quotes).expect("at least one edge").price;
        wcm = wcm + quotes[pick.random_range(0..edges)].price;
    }
    (cm, wcm)
}

/// Greedy (CM) against random (WCM) cost, plus their difference, per grid point.
pub fn run_cost_min(cfg: &ExperimentConfig) -> Result<Vec<ExperimentRow>, HarnessError> {
    cfg.validate()?;
    if matches!(cfg.experiment, Some(e) if e != Experiment::CostMin) {
        return Err(usage("cost-min only runs experiment cost_min"));
    }
    let mut points = Vec::new();
    for &n in &cfg.cost_task_counts() {
        for &e in &cfg.edge_counts {
            for &s in &cfg.price_schemes {
                points.push((n, e, s));
            }
        }
    }
    let rows: Vec<Vec<ExperimentRow>> = points
        .par_iter()
        .map(|&(n, e, s)| {
            let model = PriceModel::scheme(s).expect("validated");
            let (mut cm, mut wcm, mut saved) = (Vec::new(), Vec::new(), Vec::new());
            for rep in 0..u64::from(cfg.repetitions) {
                let seed = subseed(cfg.seed, &[TAG_COST, n, e as u64, u64::from(s), rep]);
                let (c, w) = cost_min_repetition(n, e, model, seed);
                cm.push(c.as_ether_f64());
                wcm.push(w.as_ether_f64());
                saved.push((w - c).as_ether_f64());
            }
            let row = |mode, samples| {
                ExperimentRow::new(
                    Experiment::CostMin,
                    mode,
                    n,
                    None,
                    None,
                    Some(e),
                    Some(s),
                    Unit::Ether,
                    samples,
                )
            };
            vec![row("CM", cm), row("WCM", wcm), row("SAVED", saved)]
        })
        .collect();
    let rows: Vec<ExperimentRow> = rows.into_iter().flatten().collect();
    check_cost_min(&rows)?;
    Ok(rows)
}

/// Below this many repetitions the standard error is too rough to test.
pub const MIN_REPS_FOR_TREND_CHECK: usize = 30;

/// Saved cost must not fall with more edges by more than 3 standard errors.
pub fn check_cost_min(rows: &[ExperimentRow]) -> Result<(), HarnessError> {
    let saved: Vec<&ExperimentRow> = rows.iter().filter(|r| r.mode == "SAVED").collect();
    for r in &saved {
        if r.edges == Some(1) && r.samples.iter().any(|&x| x != 0.0) {
            return Err(HarnessError::Invariant(
                "saving with a single edge must be zero".into(),
            ));
        }
    }
    for a in &saved {
        for b in &saved {
            let comparable = a.tasks == b.tasks && a.scheme == b.scheme && a.edges < b.edges;
            if !comparable || a.samples.len() < MIN_REPS_FOR_TREND_CHECK {
                continue;
            }
            let tol = 3.0 * (a.std_error().powi(2) + b.std_error().powi(2)).sqrt();
            if b.mean < a.mean - tol {
                return Err(HarnessError::Invariant(format!(
                    "saved cost fell from {} ({} edges) to {} ({} edges) at {} tasks, scheme {}",
                    a.mean,
                    a.edges.unwrap_or(0),
                    b.mean,
                    b.edges.unwrap_or(0),
                    a.tasks,
                    a.scheme.unwrap_or(0)
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegrationConfig {
    pub tasks: u64,
    pub edges: usize,
    pub seed: u64,
    pub withdraw: bool,
    pub forge_at: Option<u64>,
    pub block_interval_s: f64,
    pub gas_price_gwei: u64,
    pub t_service_s: f64,
    pub price_scheme: u8,
    pub terminal_deposit: TokenAmount,
    pub output_path: Option<PathBuf>,
}

impl Default for IntegrationConfig {
    fn default() -> Self {
        Self {
            tasks: 5,
            edges: 3,
            seed: 2019,
            withdraw: false,
            forge_at: None,
            block_interval_s: 15.0,
            gas_price_gwei: 1,
            t_service_s: 14.9,
            price_scheme: 1,
            terminal_deposit: TokenAmount::from_ether(2),
            output_path: None,
        }
    }
}

impl IntegrationConfig {
    pub fn from_json_file(path: &Path) -> Result<Self, HarnessError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.tasks == 0 || self.edges == 0 {
            return Err(usage("tasks and edges must be at least 1"));
        }
        if !(self.block_interval_s >= 0.001 && self.block_interval_s.is_finite()) {
            return Err(usage("block_interval_s must be positive"));
        }
        if self.gas_price_gwei == 0 {
            return Err(usage("gas_price_gwei must be positive"));
        }
        if !(self.t_service_s >= 0.0 && self.t_service_s.is_finite()) {
            return Err(usage("t_service_s must be non-negative"));
        }
        PriceModel::scheme(self.price_scheme).map_err(|e| usage(e.to_string()))?;
        if self.terminal_deposit.is_zero() {
            return Err(usage("terminal_deposit must be positive"));
        }
        Ok(())
    }
}

/// Final balance of one account after the integration run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccountBalance {
    pub role: String,
    pub address: Address,
    pub balance: TokenAmount,
}

#[derive(Debug, Clone)]
pub struct IntegrationReport {
    pub session: SessionReport,
    pub balances: Vec<AccountBalance>,
    pub user_channel_collateral: TokenAmount,
}

pub fn write_balances_csv<W: Write>(
    balances: &[AccountBalance],
    out: W,
) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| HarnessError::Io(std::io::Error::other(e));
    w.write_record(["role", "address", "balance_wei"])
        .map_err(err)?;
    for b in balances {
        w.write_record([b.role.clone(), b.address.to_string(), b.balance.to_string()])
            .map_err(err)?;
    }
    w.flush()?;
    Ok(())
}

fn expect_eq(what: &str, got: TokenAmount, want: TokenAmount) -> Result<(), HarnessError> {
    if got == want {
        Ok(())
    } else {
        Err(HarnessError::Invariant(format!(
            "{what}: ledger has {got} wei, expected {want} wei"
        )))
    }
}

/// The whole deployment talking over local sockets.
///
/// Registers the edges, opens every channel, runs the terminal's PC tasks,
/// lets each paid edge cash out, then checks every balance to the wei
/// against amounts predicted from the terminal's own task records.
pub fn run_integration(cfg: &IntegrationConfig) -> Result<IntegrationReport, HarnessError> {
    cfg.validate()?;
    let model = PriceModel::scheme(cfg.price_scheme).expect("validated");
    let actors = Actors::new(cfg.edges);
    let chain_config = ChainConfig {
        block_interval: SimTime::from_secs_f64(cfg.block_interval_s),
        gas_price: TokenAmount::from_gwei(u128::from(cfg.gas_price_gwei)),
        gas_schedule: GasSchedule::default(),
        block_timing: BlockTiming::Fixed,
    };
    let proxy_funds = TokenAmount::from_ether(10);
    let user_funds = TokenAmount::from_ether(10);
    let edge_funds = TokenAmount::from_ether(1);
    let mut genesis = vec![
        (actors.proxy.address(), proxy_funds),
        (actors.user.address(), user_funds),
    ];
    genesis.extend(actors.edges.iter().map(|e| (e.address(), edge_funds)));
    let proxy_config = ProxyConfig::default();
    let chain = Arc::new(Mutex::new(
        Chain::new(chain_config, genesis, proxy_config.digest_mode()).map_err(NodeError::from)?,
    ));
    let supply = chain.lock().expect("fresh lock").ledger().total_supply();

    let proxy =
        Proxy::new(actors.proxy.clone(), proxy_config, cfg.seed).map_err(NodeError::from)?;
    let proxy_server = ProxyServer::spawn("127.0.0.1:0", proxy, chain.clone())?;
    let proxy_addr = proxy_server.local_addr().to_string();
    let edge_config = EdgeConfig {
        service_time: SimTime::from_secs_f64(cfg.t_service_s),
        ..EdgeConfig::default()
    };
    let mut edge_servers = Vec::new();
    for key in &actors.edges {
        let server = EdgeServer::spawn(
            "127.0.0.1:0",
            EdgeService::new(key.clone(), edge_config),
            chain.clone(),
        )?;
        server.register(&proxy_addr, Some(model))?;
        edge_servers.push(server);
    }

    let outcome = (|| -> Result<IntegrationReport, HarnessError> {
        {
            let c = chain.lock().expect("chain lock");
            for key in &actors.edges {
                expect_eq(
                    "edge channel collateral",
                    c.collateral(&actors.proxy.address(), &key.address()),
                    proxy_config.edge_deposit,
                )?;
            }
        }
        let mut net = TcpNetwork::new(proxy_addr.clone(), actors.proxy.address(), chain.clone());
        let mut session = TerminalSession::new(actors.user.clone(), SessionMode::Pc);
        let open = session.open(&mut net, cfg.terminal_deposit)?;
        let opts = RunOptions {
            withdraw_on_last: cfg.withdraw,
            forge_at: cfg.forge_at,
        };
        let report = match run_tasks(&mut session, &mut net, cfg.tasks, opts) {
            Ok(r) => r,
            Err(e) => {
                // Nothing may have been promised to any edge beyond what the
                // proxy accepted from the terminal.
                let accepted = proxy_server
                    .proxy()
                    .user_ledger(&actors.user.address())
                    .map(|l| l.best_claim)
                    .unwrap_or_default();
                let owed: TokenAmount = actors
                    .edges
                    .iter()
                    .map(|k| proxy_server.proxy().edge_cumulative(&k.address()))
                    .sum();
                let held: TokenAmount = edge_servers
                    .iter()
                    .map(|s| {
                        s.service()
                            .best_claim()
                            .map(|a| a.cumulative_value)
                            .unwrap_or_default()
                    })
                    .sum();
                if owed != accepted || held != accepted {
                    return Err(HarnessError::Invariant(format!(
                        "after abort edges hold {held} wei of claims but the proxy accepted {accepted} wei"
                    )));
                }
                return Err(HarnessError::Aborted(format!(
                    "{e}; edges hold exactly the {accepted} wei accepted before the failure"
                )));
            }
        };

        // Every paid edge cashes out its best claim.
        let mut c = chain.lock().expect("chain lock");
        let mut edge_close_fees = Vec::new();
        for server in &edge_servers {
            let svc = server.service();
            if svc.best_claim().is_none() {
                edge_close_fees.push(TokenAmount::ZERO);
                continue;
            }
            let at = c.clock();
            let handle = svc.close(&mut c, at)?;
            let receipt = c.wait(handle).map_err(NodeError::from)?;
            if !receipt.succeeded() {
                return Err(HarnessError::Invariant(format!(
                    "edge close reverted: {:?}",
                    receipt.status
                )));
            }
            edge_close_fees.push(receipt.fee);
        }

        // Expected balances from the terminal's records and the gas schedule.
        let gas = |units: u64| {
            chain_config
                .gas_price
                .checked_mul(u128::from(units))
                .expect("small")
        };
        let sched = chain_config.gas_schedule;
        let paid = report.total_paid();
        let deposit = cfg.terminal_deposit;
        let per_edge: Vec<TokenAmount> = actors
            .edges
            .iter()
            .map(|k| {
                report
                    .tasks
                    .iter()
                    .filter(|t| t.edge == k.address())
                    .map(|t| t.price)
                    .sum()
            })
            .collect();
        let closed_edges = per_edge.iter().filter(|p| !p.is_zero()).count() as u128;
        let n_edges = actors.edges.len() as u128;
        let edge_deposit = proxy_config.edge_deposit;
        let user_close_fee = if cfg.withdraw {
            gas(sched.close_gas)
        } else {
            TokenAmount::ZERO
        };

        let want_user = if cfg.withdraw {
            user_funds - gas(sched.open_gas) - paid
        } else {
            user_funds - gas(sched.open_gas) - deposit
        };
        let want_proxy = {
            let locked = edge_deposit.checked_mul(n_edges).expect("small");
            let refunds = edge_deposit.checked_mul(closed_edges).expect("small") - paid;
            let income = if cfg.withdraw {
                paid
            } else {
                TokenAmount::ZERO
            };
            proxy_funds - locked - gas(sched.open_gas * n_edges as u64) + refunds + income
                - user_close_fee
        };
        let want_escrow = {
            let user_side = if cfg.withdraw {
                TokenAmount::ZERO
            } else {
                deposit
            };
            edge_deposit
                .checked_mul(n_edges - closed_edges)
                .expect("small")
                + user_side
        };
        let total_close = edge_close_fees.iter().copied().sum::<TokenAmount>() + user_close_fee;
        let want_sink = gas(sched.open_gas * (n_edges as u64 + 1)) + total_close;

        let user_addr = actors.user.address();
        let proxy_addr_l = actors.proxy.address();
        expect_eq("terminal balance", c.balance(&user_addr), want_user)?;
        expect_eq("proxy balance", c.balance(&proxy_addr_l), want_proxy)?;
        for ((key, owed), fee) in actors.edges.iter().zip(&per_edge).zip(&edge_close_fees) {
            expect_eq(
                "edge balance",
                c.balance(&key.address()),
                edge_funds + *owed - *fee,
            )?;
        }
        expect_eq("channel escrow", c.balance(&CHANNEL_CONTRACT), want_escrow)?;
        expect_eq("fee sink", c.balance(&FEE_SINK), want_sink)?;
        expect_eq("total supply", c.ledger().total_supply(), supply)?;
        if open.fee != gas(sched.open_gas) {
            return Err(HarnessError::Invariant(
                "terminal open fee differs from schedule".into(),
            ));
        }
        let collateral = c.collateral(&user_addr, &proxy_addr_l);
        let want_collateral = if cfg.withdraw {
            TokenAmount::ZERO
        } else {
            deposit
        };
        expect_eq("terminal channel collateral", collateral, want_collateral)?;

        let mut balances = vec![
            AccountBalance {
                role: "proxy".into(),
                address: proxy_addr_l,
                balance: c.balance(&proxy_addr_l),
            },
            AccountBalance {
                role: "terminal".into(),
                address: user_addr,
                balance: c.balance(&user_addr),
            },
        ];
        for (i, key) in actors.edges.iter().enumerate() {
            balances.push(AccountBalance {
                role: format!("edge{i}"),
                address: key.address(),
                balance: c.balance(&key.address()),
            });
        }
        balances.push(AccountBalance {
            role: "escrow".into(),
            address: CHANNEL_CONTRACT,
            balance: c.balance(&CHANNEL_CONTRACT),
        });
        balances.push(AccountBalance {
            role: "fee_sink".into(),
            address: FEE_SINK,
            balance: c.balance(&FEE_SINK),
        });
        Ok(IntegrationReport {
            session: report,
            balances,
            user_channel_collateral: collateral,
        })
    })();

    for s in edge_servers {
        s.shutdown();
    }
    proxy_server.shutdown();
    outcome
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(reps: u32) -> ExperimentConfig {
        ExperimentConfig {
            task_counts: Some(vec![1, 5, 10]),
            repetitions: reps,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn default_grid_values() {
        assert_eq!(
            default_channel_task_counts(),
            vec![1, 5, 10, 15, 20, 25, 30, 35, 40, 45, 50]
        );
        let c = ExperimentConfig::default();
        assert_eq!(c.repetitions, 100);
        assert_eq!(c.block_intervals_s, vec![5.0, 10.0, 15.0]);
        assert_eq!(c.gas_prices_gwei, vec![1, 4, 7]);
        c.validate().unwrap();
    }

    #[test]
    fn config_parses_scalar_or_list_scheme() {
        let a: ExperimentConfig = serde_json::from_str(r#"{"price_scheme": 3}"#).unwrap();
        assert_eq!(a.price_schemes, vec![3]);
        let b: ExperimentConfig = serde_json::from_str(r#"{"price_schemes": [1, 2]}"#).unwrap();
        assert_eq!(b.price_schemes, vec![1, 2]);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn invalid_configs_are_usage_errors() {
        let cases = [
            ExperimentConfig {
                repetitions: 0,
                ..ExperimentConfig::default()
            },
            ExperimentConfig {
                task_counts: Some(vec![]),
                ..ExperimentConfig::default()
            },
            ExperimentConfig {
                edge_counts: vec![0],
                ..ExperimentConfig::default()
            },
            ExperimentConfig {
                price_schemes: vec![4],
                ..ExperimentConfig::default()
            },
        ];
        for c in cases {
            assert_eq!(c.validate().unwrap_err().exit_code(), 2);
        }
    }

    #[test]
    fn mean_and_stddev() {
        let (m, s) = mean_stddev(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - 1.2909944487358056).abs() < 1e-15);
        assert_eq!(mean_stddev(&[7.0]), (7.0, 0.0));
    }

    #[test]
    fn gas_rows_match_schedule_arithmetic() {
        let rows = run_channel_benefit_gas(&small(3)).unwrap();
        assert_eq!(rows.len(), 3 * 3 * 2);
        for r in &rows {
            let p = r.gas_price_gwei.unwrap() as f64;
            let want = match r.mode {
                "PC" => 183_000.0 * p * 1e-9,
                _ => r.tasks as f64 * 16_100.0 * p * 1e-9,
            };
            assert!((r.mean - want).abs() < 1e-15, "{r:?}");
            assert_eq!(r.stddev, 0.0);
            assert_eq!(r.samples.len(), 3);
        }
    }

    #[test]
    fn row_mean_is_mean_of_samples() {
        let rows = run_channel_benefit_time(&ExperimentConfig {
            task_counts: Some(vec![3]),
            block_intervals_s: vec![5.0],
            repetitions: 4,
            ..ExperimentConfig::default()
        })
        .unwrap();
        for r in rows {
            assert_eq!(
                r.mean,
                r.samples.iter().sum::<f64>() / r.samples.len() as f64
            );
            assert_eq!(r.samples.len(), 4);
        }
    }

    #[test]
    fn fixed_grid_time_follows_deterministic_model() {
        // On the fixed grid every wait is at most one interval.
        let cfg = ExperimentConfig {
            task_counts: Some(vec![4]),
            block_intervals_s: vec![10.0],
            repetitions: 1,
            block_timing: TimingModel::Fixed,
            ..ExperimentConfig::default()
        };
        let rows = run_channel_benefit_time(&cfg).unwrap();
        let pc = rows.iter().find(|r| r.mode == "PC").unwrap().mean;
        let wpc = rows.iter().find(|r| r.mode == "WPC").unwrap().mean;
        assert!(pc > 4.0 * 14.9 && pc <= 4.0 * 14.9 + 20.0, "{pc}");
        assert!(wpc > 4.0 * 14.9 && wpc <= 4.0 * (14.9 + 10.0), "{wpc}");
    }

    #[test]
    fn single_edge_saves_nothing() {
        for s in 1..=3 {
            let model = PriceModel::scheme(s).unwrap();
            for seed in 0..20 {
                let (cm, wcm) = cost_min_repetition(10, 1, model, seed);
                assert_eq!(cm, wcm);
            }
        }
    }

    #[test]
    fn greedy_never_costs_more_than_random() {
        let model = PriceModel::scheme(1).unwrap();
        for seed in 0..50 {
            let (cm, wcm) = cost_min_repetition(7, 6, model, seed);
            assert!(cm <= wcm);
        }
    }

    #[test]
    fn cost_min_rows_are_grid_ordered_and_deterministic() {
        let cfg = ExperimentConfig {
            task_counts: Some(vec![5, 10]),
            edge_counts: vec![1, 5],
            repetitions: 5,
            ..ExperimentConfig::default()
        };
        let a = run_cost_min(&cfg).unwrap();
        let b = run_cost_min(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2 * 2 * 3 * 3);
        let keys: Vec<_> = a.iter().map(|r| (r.tasks, r.edges, r.scheme)).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        for r in a.iter().filter(|r| r.edges == Some(1) && r.mode == "SAVED") {
            assert_eq!(r.mean, 0.0);
        }
    }

    #[test]
    fn csv_has_fixed_header_and_blank_unused_columns() {
        let rows = vec![ExperimentRow::new(
            Experiment::ChannelBenefitGas,
            "PC",
            50,
            None,
            Some(7),
            None,
            None,
            Unit::Ether,
            vec![0.001281, 0.001281],
        )];
        let mut out = Vec::new();
        write_csv(&rows, &mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "experiment,mode,tasks,interval_s,gas_price_gwei,edges,scheme,mean,stddev,unit\n\
             channel_benefit_gas,PC,50,,7,,,0.001281,0,ether\n"
        );
    }

    #[test]
    fn trend_check_catches_a_falling_saving() {
        let row = |edges, samples: Vec<f64>| {
            ExperimentRow::new(
                Experiment::CostMin,
                "SAVED",
                5,
                None,
                None,
                Some(edges),
                Some(1),
                Unit::Ether,
                samples,
            )
        };
        let flat = vec![row(5, vec![0.5; 40]), row(10, vec![0.5; 40])];
        check_cost_min(&flat).unwrap();
        let mut falling = vec![row(5, vec![0.5; 40]), row(10, vec![0.2; 40])];
        falling[0].samples[0] = 0.51;
        let (m, s) = mean_stddev(&falling[0].samples);
        falling[0].mean = m;
        falling[0].stddev = s;
        assert!(matches!(
            check_cost_min(&falling),
            Err(HarnessError::Invariant(_))
        ));
        let nonzero_single = vec![row(1, vec![0.1])];
        assert!(check_cost_min(&nonzero_single).is_err());
    }
}
