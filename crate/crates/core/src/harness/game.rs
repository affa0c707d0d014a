// SPDX-License-Identifier: Apache-2.0

//! Snapshot game: a challenger runs one of two access patterns per round, the adversary sees
//! the snapshot difference and guesses which.

use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use rand_core::{CryptoRngCore, RngCore};

use super::report::Record;
use super::stats;
use crate::block_store::{diff, BlockStore, DeviceGeometry, Fill, Region, RegionCounts, Snapshot};
use crate::crypto::{seeded_rng, KdfParams};
use crate::device::{Device, FormatOptions, PhiPolicy, RuntimeConfig};
use crate::error::{Error, Result};
use crate::freemaps::BitmapMode;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AccessOp {
    PubWrite { id: u64, data: Vec<u8> },
    PubRead { id: u64 },
    HidWrite { id: u64, data: Vec<u8> },
    HidRead { id: u64 },
}

/// Ordered logical operations.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AccessPattern(pub Vec<AccessOp>);

impl AccessPattern {
    pub fn public_writes(&self) -> impl Iterator<Item = (u64, &[u8])> {
        self.0.iter().filter_map(|op| match op {
            AccessOp::PubWrite { id, data } => Some((*id, data.as_slice())),
            _ => None,
        })
    }

    pub fn hidden_write_count(&self) -> u64 {
        self.0
            .iter()
            .filter(|op| matches!(op, AccessOp::HidWrite { .. }))
            .count() as u64
    }
}

/// Hidden writes a pattern may carry given its public writes.
pub fn hidden_budget(phi: PhiPolicy, public_writes: u64) -> u64 {
    match phi {
        PhiPolicy::PerWrite(n) => public_writes * u64::from(n),
        PhiPolicy::EveryNth(n) => public_writes / u64::from(n.max(1)),
        PhiPolicy::UpdatesOnly => 0,
    }
}

/// Both patterns issue the same public writes and stay within the hidden-write budget.
pub fn check_pair(o0: &AccessPattern, o1: &AccessPattern, phi: PhiPolicy) -> Result<()> {
    if !o0.public_writes().eq(o1.public_writes()) {
        return Err(Error::IllegalPattern("public writes differ".into()));
    }
    let budget = hidden_budget(phi, o0.public_writes().count() as u64);
    for (name, p) in [("first", o0), ("second", o1)] {
        if p.hidden_write_count() > budget {
            return Err(Error::IllegalPattern(format!(
                "{name} pattern has {} hidden writes, budget {budget}",
                p.hidden_write_count()
            )));
        }
    }
    Ok(())
}

/// What the adversary learns from one snapshot difference.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Observation {
    pub changed: Vec<u64>,
    pub regions: RegionCounts,
}

impl Observation {
    pub fn from_changed(g: &DeviceGeometry, changed: BTreeSet<u64>) -> Self {
        let mut regions = RegionCounts::default();
        for &i in &changed {
            let r = g.region_of(i).expect("index inside device");
            regions.set(r, regions.get(r) + 1);
        }
        Observation {
            changed: changed.into_iter().collect(),
            regions,
        }
    }
}

/// Observations of one round: one per snapshot taken.
pub type RoundView = Vec<Observation>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Granularity {
    #[default]
    PerRound,
    PerOperation,
}

/// A guessing strategy over snapshot differences.
pub trait Distinguisher {
    fn name(&self) -> &str;

    /// One round on an adversary-owned device where the coin is known.
    fn train(&mut self, _round: &RoundView, _b: bool) {}

    /// Guess for the last round of `history`.
    fn guess(&mut self, history: &[RoundView], rng: &mut dyn RngCore) -> bool;
}

/// Always answers the same bit.
pub struct Constant(pub bool);

impl Distinguisher for Constant {
    fn name(&self) -> &str {
        "constant"
    }

    fn guess(&mut self, _: &[RoundView], _: &mut dyn RngCore) -> bool {
        self.0
    }
}

fn union_changed(round: &RoundView) -> BTreeSet<u64> {
    round
        .iter()
        .flat_map(|o| o.changed.iter().copied())
        .collect()
}

fn round_regions(round: &RoundView) -> RegionCounts {
    round
        .iter()
        .fold(RegionCounts::default(), |a, o| a + o.regions)
}

fn coin_on_tie(score: f64, rng: &mut dyn RngCore) -> bool {
    if score == 0.0 {
        rng.gen()
    } else {
        score > 0.0
    }
}

/// Naive Bayes over which blocks changed, one Bernoulli per block and class.
#[derive(Default)]
pub struct FrequencyClassifier {
    counts: [HashMap<u64, u64>; 2],
    rounds: [u64; 2],
}

impl FrequencyClassifier {
    fn rate(&self, class: usize, block: u64) -> f64 {
        let c = self.counts[class].get(&block).copied().unwrap_or(0) as f64;
        (c + 0.5) / (self.rounds[class] as f64 + 1.0)
    }
}

impl Distinguisher for FrequencyClassifier {
    fn name(&self) -> &str {
        "frequency"
    }

    fn train(&mut self, round: &RoundView, b: bool) {
        let class = usize::from(b);
        self.rounds[class] += 1;
        for i in union_changed(round) {
            *self.counts[class].entry(i).or_insert(0) += 1;
        }
    }

    fn guess(&mut self, history: &[RoundView], rng: &mut dyn RngCore) -> bool {
        let changed = union_changed(history.last().expect("current round"));
        let mut blocks: BTreeSet<u64> = self.counts[0]
            .keys()
            .chain(self.counts[1].keys())
            .copied()
            .collect();
        blocks.extend(&changed);
        let mut score = (self.rounds[1] as f64 + 1.0).ln() - (self.rounds[0] as f64 + 1.0).ln();
        for b in blocks {
            let (p0, p1) = (self.rate(0, b), self.rate(1, b));
            score += if changed.contains(&b) {
                (p1 / p0).ln()
            } else {
                ((1.0 - p1) / (1.0 - p0)).ln()
            };
        }
        coin_on_tie(score, rng)
    }
}

/// Compares the number of changed blocks against per-class empirical histograms.
#[derive(Default)]
pub struct CardinalityComparator {
    hist: [HashMap<usize, u64>; 2],
    rounds: [u64; 2],
}

impl Distinguisher for CardinalityComparator {
    fn name(&self) -> &str {
        "cardinality"
    }

    fn train(&mut self, round: &RoundView, b: bool) {
        let class = usize::from(b);
        self.rounds[class] += 1;
        *self.hist[class]
            .entry(union_changed(round).len())
            .or_insert(0) += 1;
    }

    fn guess(&mut self, history: &[RoundView], rng: &mut dyn RngCore) -> bool {
        let n = union_changed(history.last().expect("current round")).len();
        let p = |c: usize| {
            (self.hist[c].get(&n).copied().unwrap_or(0) as f64 + 0.5)
                / (self.rounds[c] as f64 + 1.0)
        };
        coin_on_tie(p(1).ln() - p(0).ln(), rng)
    }
}

/// Gaussian naive Bayes over per-region changed counts.
#[derive(Default)]
pub struct RegionHistogram {
    sum: [[f64; 11]; 2],
    sq: [[f64; 11]; 2],
    rounds: [u64; 2],
}

impl Distinguisher for RegionHistogram {
    fn name(&self) -> &str {
        "region-histogram"
    }

    fn train(&mut self, round: &RoundView, b: bool) {
        let class = usize::from(b);
        self.rounds[class] += 1;
        for (i, &v) in round_regions(round).0.iter().enumerate() {
            self.sum[class][i] += v as f64;
            self.sq[class][i] += (v as f64).powi(2);
        }
    }

    fn guess(&mut self, history: &[RoundView], rng: &mut dyn RngCore) -> bool {
        let x = round_regions(history.last().expect("current round"));
        let mut score = 0.0;
        for (i, &v) in x.0.iter().enumerate() {
            let mut ll = [0.0; 2];
            for (c, l) in ll.iter_mut().enumerate() {
                let n = self.rounds[c].max(1) as f64;
                let mean = self.sum[c][i] / n;
                let var = (self.sq[c][i] / n - mean * mean).max(0.0) + 0.25;
                *l = -0.5 * ((v as f64 - mean).powi(2) / var + var.ln());
            }
            score += ll[1] - ll[0];
        }
        coin_on_tie(score, rng)
    }
}

/// Device and schedule for one game.
#[derive(Clone, Debug)]
pub struct GameConfig {
    pub blocks: u64,
    pub block_size: usize,
    pub k: usize,
    pub bitmap: BitmapMode,
    pub runtime: RuntimeConfig,
    pub granularity: Granularity,
    pub public_writes_per_round: usize,
    pub hidden_writes_per_round: usize,
    pub training_rounds: usize,
    pub seed: u64,
}

impl Default for GameConfig {
    fn default() -> Self {
        GameConfig {
            blocks: 1024,
            block_size: 512,
            k: 5,
            bitmap: BitmapMode::OnDisk,
            runtime: RuntimeConfig::default(),
            granularity: Granularity::PerRound,
            public_writes_per_round: 4,
            hidden_writes_per_round: 4,
            training_rounds: 500,
            seed: 1,
        }
    }
}

/// Outcome of a game.
#[derive(Clone, Debug)]
pub struct GameResult {
    pub distinguisher: String,
    pub rounds: u64,
    pub wins: u64,
    /// Mean number of changed blocks per round, by coin value.
    pub mean_changed: [f64; 2],
    pub ci95: (f64, f64),
    /// Two-sided p-value of the win count under a fair coin.
    pub p_value: f64,
}

impl GameResult {
    pub fn win_rate(&self) -> f64 {
        self.wins as f64 / self.rounds.max(1) as f64
    }

    /// Whether the 95% interval contains one half.
    pub fn indistinguishable(&self) -> bool {
        self.ci95.0 <= 0.5 && 0.5 <= self.ci95.1
    }

    pub fn record(&self, test: &str) -> Record {
        Record::new(
            test,
            self.win_rate(),
            Some(self.p_value),
            self.indistinguishable(),
        )
        .detail(format!(
            "distinguisher={} rounds={} wins={} ci95=[{:.4},{:.4}] changed0={:.2} changed1={:.2}",
            self.distinguisher,
            self.rounds,
            self.wins,
            self.ci95.0,
            self.ci95.1,
            self.mean_changed[0],
            self.mean_changed[1]
        ))
    }
}

/// A dual-volume device prepared for the game.
pub struct GameDevice {
    pub device: Device,
    last: Snapshot,
    granularity: Granularity,
}

impl GameDevice {
    pub fn new(config: &GameConfig, rng: &mut dyn CryptoRngCore) -> Result<Self> {
        let g = DeviceGeometry::new(config.blocks, config.block_size)?;
        let store = BlockStore::memory(g, Fill::Random(rng))?;
        let mut opts = FormatOptions::new(b"public", Some(b"hidden")).with_kdf(KdfParams::FAST);
        opts.k = config.k;
        opts.bitmap = config.bitmap;
        let mut device = Device::format(store, &opts, config.runtime, rng)?;
        let last = device.store_mut().snapshot()?;
        Ok(GameDevice {
            device,
            last,
            granularity: config.granularity,
        })
    }

    fn observe(&mut self) -> Result<Observation> {
        let now = self.device.store_mut().snapshot()?;
        let changed = diff(&self.last, &now)?;
        self.last = now;
        Ok(Observation::from_changed(self.device.geometry(), changed))
    }

    /// Runs `pattern` and returns the resulting snapshot differences.
    pub fn execute(
        &mut self,
        pattern: &AccessPattern,
        rng: &mut dyn CryptoRngCore,
    ) -> Result<RoundView> {
        let mut view = Vec::new();
        for op in &pattern.0 {
            match op {
                AccessOp::PubWrite { id, data } => self.device.public_write(*id, data, rng)?,
                AccessOp::PubRead { id } => ignore_unwritten(self.device.public_read(*id))?,
                AccessOp::HidWrite { id, data } => self.device.hidden_write(*id, data)?,
                AccessOp::HidRead { id } => ignore_unwritten(self.device.hidden_read(*id))?,
            }
            if self.granularity == Granularity::PerOperation {
                view.push(self.observe()?);
            }
        }
        if self.granularity == Granularity::PerRound {
            view.push(self.observe()?);
        }
        Ok(view)
    }
}

fn ignore_unwritten(r: Result<Vec<u8>>) -> Result<()> {
    match r {
        Ok(_) | Err(Error::Unwritten(_)) => Ok(()),
        Err(e) => Err(e),
    }
}

fn random_block(size: usize, rng: &mut dyn RngCore) -> Vec<u8> {
    let mut b = vec![0u8; size];
    rng.fill_bytes(&mut b);
    b
}

/// The default adversary schedule: `p` public writes to random ids, the second pattern
/// additionally queueing `h` hidden writes, one before each of the first `h` public writes
/// (cycling when `h > p`).
pub fn standard_pair(
    p: usize,
    h: usize,
    public_capacity: u64,
    hidden_capacity: u64,
    block_size: usize,
    rng: &mut dyn RngCore,
) -> (AccessPattern, AccessPattern) {
    let publics: Vec<AccessOp> = (0..p)
        .map(|_| AccessOp::PubWrite {
            id: rng.gen_range(0..public_capacity),
            data: random_block(block_size, rng),
        })
        .collect();
    let mut hidden: Vec<Vec<AccessOp>> = vec![Vec::new(); p.max(1)];
    for j in 0..h {
        hidden[j % p.max(1)].push(AccessOp::HidWrite {
            id: rng.gen_range(0..hidden_capacity),
            data: random_block(block_size, rng),
        });
    }
    let o0 = AccessPattern(publics.clone());
    let mut o1 = Vec::new();
    for (i, op) in publics.into_iter().enumerate() {
        o1.append(&mut hidden[i]);
        o1.push(op);
    }
    (o0, AccessPattern(o1))
}

fn next_pair(
    config: &GameConfig,
    dev: &GameDevice,
    rng: &mut dyn RngCore,
) -> (AccessPattern, AccessPattern) {
    standard_pair(
        config.public_writes_per_round,
        config.hidden_writes_per_round,
        dev.device.public_capacity(),
        dev.device.hidden_capacity().expect("dual-volume device"),
        config.block_size,
        rng,
    )
}

/// Plays `rounds` rounds against `adversary` after training it on a separate device.
pub fn run_game(
    config: &GameConfig,
    rounds: usize,
    adversary: &mut dyn Distinguisher,
) -> Result<GameResult> {
    let mut rng = seeded_rng(config.seed);
    let mut coins = seeded_rng(config.seed ^ 0x5eed_c011);
    let mut trainer = GameDevice::new(config, &mut rng)?;
    for _ in 0..config.training_rounds {
        let (o0, o1) = next_pair(config, &trainer, &mut rng);
        check_pair(&o0, &o1, config.runtime.phi)?;
        let b: bool = coins.gen();
        let view = trainer.execute(if b { &o1 } else { &o0 }, &mut rng)?;
        adversary.train(&view, b);
    }
    drop(trainer);

    let mut challenger = GameDevice::new(config, &mut rng)?;
    let mut history = Vec::with_capacity(rounds);
    let mut wins = 0u64;
    let mut changed = [(0u64, 0u64); 2];
    for _ in 0..rounds {
        let (o0, o1) = next_pair(config, &challenger, &mut rng);
        check_pair(&o0, &o1, config.runtime.phi)?;
        let b: bool = coins.gen();
        let view = challenger.execute(if b { &o1 } else { &o0 }, &mut rng)?;
        let c = &mut changed[usize::from(b)];
        c.0 += union_changed(&view).len() as u64;
        c.1 += 1;
        history.push(view);
        if adversary.guess(&history, &mut rng) == b {
            wins += 1;
        }
    }
    let n = rounds as u64;
    let z = (wins as f64 - n as f64 / 2.0) / (n as f64 / 4.0).sqrt().max(f64::MIN_POSITIVE);
    Ok(GameResult {
        distinguisher: adversary.name().to_string(),
        rounds: n,
        wins,
        mean_changed: changed.map(|(s, c)| s as f64 / c.max(1) as f64),
        ci95: stats::wilson(wins, n, 0.95),
        p_value: stats::two_sided_p(z),
    })
}

/// The built-in distinguishers, freshly constructed.
pub fn builtin_distinguishers() -> Vec<Box<dyn Distinguisher>> {
    vec![
        Box::new(FrequencyClassifier::default()),
        Box::new(CardinalityComparator::default()),
        Box::new(RegionHistogram::default()),
    ]
}

/// Runs every built-in distinguisher on `config`.
pub fn run_battery(config: &GameConfig, rounds: usize) -> Result<Vec<GameResult>> {
    builtin_distinguishers()
        .into_iter()
        .map(|mut d| run_game(config, rounds, d.as_mut()))
        .collect()
}

/// Changed data-region blocks in `obs`, relative to the data region.
pub fn data_changes(g: &DeviceGeometry, obs: &Observation) -> Vec<u64> {
    let range = g.region_range(Region::Data);
    obs.changed
        .iter()
        .filter(|i| range.contains(i))
        .map(|i| i - range.start)
        .collect()
}
