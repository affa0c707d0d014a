// SPDX-License-Identifier: Apache-2.0

//! Reusable experiments: mode replay, hidden-write uniformity, touch probabilities, stash
//! occupancy and I/O scaling.

use rand::Rng;
use rand_core::CryptoRngCore;

use super::report::Record;
use super::stats::{self, ChiSquare};
use crate::block_store::{
    BlockStore, DeviceGeometry, Fill, OpLabel, Region, RegionCounts, WriteTrace,
};
use crate::crypto::{seeded_rng, KdfParams, KeyRole, VolumeKey};
use crate::device::{hidden_shape, Device, FormatOptions, RuntimeConfig};
use crate::error::{Error, Result};
use crate::freemaps::BitmapMode;
use crate::oram::{DlOram, OramConfig};

/// Blocks written per hidden write: each of the `1 + depth` runs has `k` rounds of
/// six writes plus a header write, and the root pointer is written once.
pub fn closed_form_t(k: usize, depth: usize, bitmap: BitmapMode) -> u64 {
    let per_round = match bitmap {
        BitmapMode::OnDisk => 6,
        BitmapMode::InMemory => 4,
    };
    (1 + depth as u64) * (per_round * k as u64 + 1) + 1
}

/// Tree levels for `ids` ids: one leaf level plus `ceil(log_bi(leaves))` internal levels.
pub fn predicted_depth(ids: u64, beta_leaf: usize, beta_internal: usize) -> usize {
    let leaves = ids.div_ceil(beta_leaf as u64) as f64;
    if leaves <= 1.0 {
        return 1;
    }
    1 + (leaves.ln() / (beta_internal as f64).ln() - 1e-12).ceil() as usize
}

fn random_block(size: usize, rng: &mut dyn CryptoRngCore) -> Vec<u8> {
    let mut b = vec![0u8; size];
    rng.fill_bytes(&mut b);
    b
}

fn memory_device(
    blocks: u64,
    block_size: usize,
    hidden: bool,
    rng: &mut dyn CryptoRngCore,
) -> Result<Device> {
    let g = DeviceGeometry::new(blocks, block_size)?;
    let store = BlockStore::memory(g, Fill::Random(rng))?;
    format_device(store, hidden, RuntimeConfig::default(), rng)
}

fn format_device(
    store: BlockStore,
    hidden: bool,
    config: RuntimeConfig,
    rng: &mut dyn CryptoRngCore,
) -> Result<Device> {
    let opts = FormatOptions::new(b"public", hidden.then_some(b"hidden".as_slice()))
        .with_kdf(KdfParams::FAST);
    Device::format(store, &opts, config, rng)
}

fn traced<T>(
    dev: &mut Device,
    label: OpLabel,
    f: impl FnOnce(&mut Device) -> Result<T>,
) -> Result<(T, WriteTrace)> {
    dev.store_mut().begin_trace(label)?;
    let out = f(dev);
    let trace = dev.store_mut().end_trace()?;
    Ok((out?, trace))
}

/// Per-operation write shapes of one public script on a single-volume and a dual-volume device.
#[derive(Clone, Debug)]
pub struct ModeReplay {
    pub ops: usize,
    pub hidden_writes: u64,
    /// Operations whose region-tagged write counts differ between modes.
    pub mismatches: usize,
    pub first_mismatch: Option<(usize, RegionCounts, RegionCounts)>,
    /// Queueing a hidden write caused device I/O.
    pub queue_io: bool,
    /// Distinct blocks, distinct data blocks and distinct metadata blocks written per operation,
    /// single-volume first.
    pub distinct: [[Vec<u64>; 3]; 2],
}

fn distinct_counts(g: &DeviceGeometry, t: &WriteTrace) -> [u64; 3] {
    let touched = t.touched();
    let data = g.region_range(Region::Data);
    let d = touched.iter().filter(|i| data.contains(i)).count() as u64;
    [touched.len() as u64, d, touched.len() as u64 - d]
}

/// Replays `ops` public writes to random ids on both modes; the dual-volume device also queues
/// one hidden write before each public write.
pub fn mode_replay(blocks: u64, block_size: usize, ops: usize, seed: u64) -> Result<ModeReplay> {
    let mut script_rng = seeded_rng(seed);
    let mut ra = seeded_rng(seed.wrapping_add(1));
    let mut rb = seeded_rng(seed.wrapping_add(2));
    let mut a = memory_device(blocks, block_size, false, &mut ra)?;
    let mut b = memory_device(blocks, block_size, true, &mut rb)?;
    let g = *a.geometry();
    let pub_cap = a.public_capacity();
    let hid_cap = b.hidden_capacity().expect("dual-volume device");
    let mut out = ModeReplay {
        ops,
        hidden_writes: 0,
        mismatches: 0,
        first_mismatch: None,
        queue_io: false,
        distinct: Default::default(),
    };
    for op in 0..ops {
        let id = script_rng.gen_range(0..pub_cap);
        let data = random_block(block_size, &mut script_rng);
        let hid = (
            script_rng.gen_range(0..hid_cap),
            random_block(block_size, &mut script_rng),
        );
        let ((), q) = traced(&mut b, OpLabel::HiddenWrite, |d| {
            d.hidden_write(hid.0, &hid.1)
        })?;
        out.queue_io |= !q.writes.is_empty() || !q.reads.is_empty();
        out.hidden_writes += 1;
        let ((), ta) = traced(&mut a, OpLabel::PublicWrite, |d| {
            d.public_write(id, &data, &mut ra)
        })?;
        let ((), tb) = traced(&mut b, OpLabel::PublicWrite, |d| {
            d.public_write(id, &data, &mut rb)
        })?;
        if ta.shape().to_bytes() != tb.shape().to_bytes() {
            out.mismatches += 1;
            out.first_mismatch
                .get_or_insert((op, ta.shape(), tb.shape()));
        }
        for (side, t) in [&ta, &tb].into_iter().enumerate() {
            for (j, c) in distinct_counts(&g, t).into_iter().enumerate() {
                out.distinct[side][j].push(c);
            }
        }
    }
    Ok(out)
}

fn histogram(values: &[u64], width: usize) -> Vec<u64> {
    let mut h = vec![0u64; width];
    for &v in values {
        h[v as usize] += 1;
    }
    h
}

impl ModeReplay {
    /// Exact comparison as one record.
    pub fn exact_record(&self, test: &str) -> Record {
        let pass = self.mismatches == 0 && !self.queue_io;
        let mut detail = format!(
            "ops={} hidden_writes={} mismatches={} queue_io={}",
            self.ops, self.hidden_writes, self.mismatches, self.queue_io
        );
        if let Some((op, a, b)) = &self.first_mismatch {
            detail.push_str(&format!(" first_op={op} single=[{a}] dual=[{b}]"));
        }
        Record::new(test, self.mismatches as f64, None, pass).detail(detail)
    }

    /// Two-sample chi-square tests on the distinct-block counts, Bonferroni-corrected.
    pub fn two_sample_records(&self, alpha: f64) -> Result<Vec<Record>> {
        let names = ["distinct-blocks", "distinct-data", "distinct-meta"];
        let per_test = stats::bonferroni(alpha, names.len());
        let mut out = Vec::new();
        for (j, name) in names.iter().enumerate() {
            let (x, y) = (&self.distinct[0][j], &self.distinct[1][j]);
            let width = x.iter().chain(y).max().copied().unwrap_or(0) as usize + 1;
            let c = stats::chi_square_two_sample(&histogram(x, width), &histogram(y, width))?;
            out.push(
                Record::new(
                    &format!("two-sample-{name}"),
                    c.statistic,
                    Some(c.p_value),
                    c.p_value >= per_test,
                )
                .detail(format!(
                    "df={} alpha={per_test:.2e} pairs={}",
                    c.df,
                    x.len()
                )),
            );
        }
        Ok(out)
    }
}

fn standalone(
    blocks: u64,
    block_size: usize,
    config: OramConfig,
    rng: &mut dyn CryptoRngCore,
) -> Result<DlOram> {
    let g = DeviceGeometry::new(blocks, block_size)?;
    let store = BlockStore::memory(g, Fill::Random(rng))?;
    let key = VolumeKey::random(KeyRole::Hidden, rng);
    DlOram::format(store, key, config, rng)
}

/// Data-region indices written by `ops` hidden writes and, separately, `ops` simulations,
/// with every operation's shape checked against the closed form.
pub fn hwa_battery(
    blocks: u64,
    block_size: usize,
    ops: usize,
    seed: u64,
    alpha: f64,
) -> Result<Vec<Record>> {
    let mut rng = seeded_rng(seed);
    let mut o = standalone(blocks, block_size, OramConfig::default(), &mut rng)?;
    let g = *o.geometry();
    let cap = o.state().capacity();
    let expect = o.state().write_shape();
    let t = closed_form_t(
        o.state().config().k,
        o.state().depth(),
        o.state().config().bitmap,
    );
    let mut shape_ok = expect.total() == t;
    let mut samples = [Vec::new(), Vec::new()];
    for sim in [false, true] {
        for _ in 0..ops {
            let label = if sim {
                OpLabel::SimulatedHiddenWrite
            } else {
                OpLabel::HiddenWrite
            };
            o.store_mut().begin_trace(label)?;
            if sim {
                o.simulate(&mut rng)?;
            } else {
                let id = rng.gen_range(0..cap);
                let data = random_block(block_size, &mut rng);
                o.write(id, data, &mut rng)?;
            }
            let tr = o.store_mut().end_trace()?;
            shape_ok &= tr.shape() == expect;
            samples[usize::from(sim)].extend(tr.region_writes(&g, Region::Data));
        }
    }
    let per_test = stats::bonferroni(alpha, 3);
    let n = g.data_blocks();
    let mut out = vec![
        Record::new("hwa-shape-determinism", t as f64, None, shape_ok)
            .detail(format!("ops={} expected=[{expect}]", 2 * ops)),
    ];
    for (name, s) in [
        ("hwa-write-uniformity", &samples[0]),
        ("hwa-simulation-uniformity", &samples[1]),
    ] {
        let c = stats::uniformity_test(s, n)?;
        out.push(chi_record(name, &c, per_test, s.len()));
    }
    let c = stats::chi_square_two_sample(
        &histogram(&samples[0], n as usize),
        &histogram(&samples[1], n as usize),
    )?;
    out.push(chi_record(
        "hwa-write-vs-simulation",
        &c,
        per_test,
        samples[0].len(),
    ));
    Ok(out)
}

fn chi_record(name: &str, c: &ChiSquare, alpha: f64, samples: usize) -> Record {
    Record::new(name, c.statistic, Some(c.p_value), c.p_value >= alpha)
        .detail(format!("df={} alpha={alpha:.2e} samples={samples}", c.df))
}

/// Touch probabilities by block state, per-block touch counts and stash occupancy.
#[derive(Clone, Debug)]
pub struct TouchOutcome {
    pub writes: usize,
    pub runs: usize,
    pub expected: f64,
    /// Mean and standard error over runs of the fraction of free blocks touched.
    pub p_free: (f64, f64),
    pub p_occupied: (f64, f64),
    pub per_block: ChiSquare,
    pub stash_high_water: usize,
    pub stash_capacity: usize,
}

impl TouchOutcome {
    fn within(&self, (m, se): (f64, f64), sigmas: f64) -> bool {
        (m - self.expected).abs() <= sigmas * se
    }

    pub fn probability_record(&self, test: &str, alpha: f64) -> Record {
        let ok = self.within(self.p_free, 3.0)
            && self.within(self.p_occupied, 3.0)
            && self.per_block.p_value >= alpha;
        let dev = |(m, se): (f64, f64)| (m - self.expected) / se;
        Record::new(test, self.p_free.0, Some(self.per_block.p_value), ok).detail(format!(
            "expected={:.6} free={:.6}(z={:.2}) occupied={:.6}(z={:.2}) per_block_chi2={:.1} df={} writes={} runs={}",
            self.expected,
            self.p_free.0,
            dev(self.p_free),
            self.p_occupied.0,
            dev(self.p_occupied),
            self.per_block.statistic,
            self.per_block.df,
            self.writes,
            self.runs
        ))
    }

    pub fn stash_record(&self, test: &str) -> Record {
        Record::new(
            test,
            self.stash_high_water as f64,
            None,
            self.stash_high_water <= self.stash_capacity,
        )
        .detail(format!(
            "high_water={} capacity={} writes={}",
            self.stash_high_water, self.stash_capacity, self.writes
        ))
    }
}

/// Runs `writes` hidden writes to random ids on a standalone ORAM with half the data region
/// hidden-occupied, recording ground truth for every selection run.
pub fn touch_and_stash(
    blocks: u64,
    block_size: usize,
    writes: usize,
    seed: u64,
) -> Result<TouchOutcome> {
    let mut rng = seeded_rng(seed);
    let mut o = standalone(blocks, block_size, OramConfig::default(), &mut rng)?;
    o.state_mut().set_recording(true);
    let n = blocks as usize;
    let cap = o.state().capacity();
    let k = o.state().config().k;
    let mut per_block = vec![0u64; n];
    let (mut free_frac, mut occ_frac) = (Vec::new(), Vec::new());
    let mut high = 0;
    for _ in 0..writes {
        let id = rng.gen_range(0..cap);
        let data = random_block(block_size, &mut rng);
        o.write(id, data, &mut rng)?;
        high = high.max(o.state().stash().len());
        for rec in o.state_mut().take_records() {
            let free = rec.free_before.iter().filter(|f| **f).count();
            let mut tf = 0;
            for &a in &rec.touched {
                per_block[a as usize] += 1;
                tf += usize::from(rec.free_before[a as usize]);
            }
            let to = rec.touched.len() - tf;
            if free == 0 || free == n {
                return Err(Error::InvalidArgument("degenerate free set".into()));
            }
            free_frac.push(tf as f64 / free as f64);
            occ_frac.push(to as f64 / (n - free) as f64);
        }
    }
    Ok(TouchOutcome {
        writes,
        runs: free_frac.len(),
        expected: k as f64 / n as f64,
        p_free: stats::mean_se(&free_frac),
        p_occupied: stats::mean_se(&occ_frac),
        per_block: stats::chi_square_uniform(&per_block)?,
        stash_high_water: high,
        stash_capacity: o.state().stash().capacity(),
    })
}

/// I/O counts at one device size.
#[derive(Clone, Debug)]
pub struct ScalingPoint {
    pub blocks: u64,
    pub depth: usize,
    pub predicted_depth: usize,
    pub closed_form: u64,
    /// Blocks written by each measured hidden write.
    pub hidden_writes: Vec<u64>,
    pub public_reads: Vec<u64>,
    pub hidden_reads: Vec<u64>,
}

impl ScalingPoint {
    pub fn exact(&self) -> bool {
        self.depth == self.predicted_depth
            && self.hidden_writes.iter().all(|&w| w == self.closed_form)
            && self.public_reads.iter().all(|&r| r == 2)
    }

    pub fn record(&self, test: &str) -> Record {
        let uniq = |v: &[u64]| {
            let mut u = v.to_vec();
            u.sort_unstable();
            u.dedup();
            format!("{u:?}")
        };
        Record::new(test, self.closed_form as f64, None, self.exact()).detail(format!(
            "n={} depth={} predicted_depth={} closed_form={} hidden_write_ios={} public_read_ios={} hidden_read_ios={}",
            self.blocks,
            self.depth,
            self.predicted_depth,
            self.closed_form,
            uniq(&self.hidden_writes),
            uniq(&self.public_reads),
            uniq(&self.hidden_reads)
        ))
    }
}

/// Formats a dual-volume device on `store` and measures `samples` hidden writes, public reads
/// and hidden reads.
///
/// Each hidden write is carried by an in-place public update; the update's own two writes
/// (data block and its RMA page) come first in the trace and are excluded.
pub fn scaling_point(store: BlockStore, samples: usize, seed: u64) -> Result<ScalingPoint> {
    let mut rng = seeded_rng(seed);
    let g = *store.geometry();
    let shape = hidden_shape(&g);
    let mut dev = format_device(store, true, RuntimeConfig::default(), &mut rng)?;
    let bs = g.block_size();
    for id in 0..samples as u64 {
        dev.public_write(id, &random_block(bs, &mut rng), &mut rng)?;
    }
    let mut point = ScalingPoint {
        blocks: g.data_blocks(),
        depth: dev.depth(),
        predicted_depth: predicted_depth(shape.capacity(), g.beta_leaf(), g.beta_internal()),
        closed_form: closed_form_t(dev.k(), dev.depth(), dev.bitmap_mode()),
        hidden_writes: Vec::new(),
        public_reads: Vec::new(),
        hidden_reads: Vec::new(),
    };
    let hid_cap = dev.hidden_capacity().expect("dual-volume device");
    for id in 0..samples as u64 {
        let hid = rng.gen_range(0..hid_cap);
        dev.hidden_write(hid, &random_block(bs, &mut rng))?;
        let data = random_block(bs, &mut rng);
        let ((), t) = traced(&mut dev, OpLabel::PublicWrite, |d| {
            d.public_write(id, &data, &mut rng)
        })?;
        let carrier = t.writes.len() >= 2
            && t.writes[0].region == Region::Data
            && t.writes[1].region == Region::Rma;
        if !carrier {
            return Err(Error::InvalidArgument(
                "public update did not lead the trace".into(),
            ));
        }
        point.hidden_writes.push(t.writes.len() as u64 - 2);
        let (_, r) = traced(&mut dev, OpLabel::PublicRead, |d| d.public_read(id))?;
        point
            .public_reads
            .push(r.reads.len() as u64 + r.writes.len() as u64);
    }
    dev.sync_hidden(10 * samples + 100, &mut rng)?;
    for _ in 0..samples {
        let hid = rng.gen_range(0..hid_cap);
        let (_, r) = traced(&mut dev, OpLabel::HiddenRead, |d| d.hidden_read(hid))?;
        point
            .hidden_reads
            .push(r.reads.len() as u64 + r.writes.len() as u64);
    }
    Ok(point)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_values() {
        assert_eq!(closed_form_t(5, 2, BitmapMode::OnDisk), 94);
        assert_eq!(closed_form_t(5, 2, BitmapMode::InMemory), 64);
        assert_eq!(predicted_depth(100, 204, 512), 1);
        assert_eq!(predicted_depth(4000, 204, 512), 2);
        assert_eq!(predicted_depth(204 * 512, 204, 512), 2);
        assert_eq!(predicted_depth(204 * 512 + 1, 204, 512), 3);
    }

    #[test]
    fn replay_matches_across_modes() {
        let r = mode_replay(512, 512, 120, 1).unwrap();
        assert!(r.exact_record("pat").pass, "{}", r.exact_record("pat"));
        assert_eq!(r.distinct[0][0].len(), 120);
    }

    #[test]
    fn small_hwa_battery() {
        let recs = hwa_battery(512, 512, 300, 2, 0.01).unwrap();
        assert_eq!(recs.len(), 4);
        assert!(recs[0].pass);
    }

    #[test]
    fn touch_outcome_shape() {
        let t = touch_and_stash(256, 512, 300, 3).unwrap();
        assert!(t.runs >= 300);
        assert!((t.expected - 5.0 / 256.0).abs() < 1e-12);
        assert!(t.stash_high_water <= t.stash_capacity);
    }

    #[test]
    fn scaling_small() {
        let mut rng = seeded_rng(4);
        let g = DeviceGeometry::new(1024, 512).unwrap();
        let store = BlockStore::memory(g, Fill::Random(&mut rng)).unwrap();
        let p = scaling_point(store, 8, 4).unwrap();
        assert!(p.exact(), "{}", p.record("scaling"));
        assert!(p.hidden_reads.iter().all(|&r| r == p.depth as u64 + 2));
    }
}
