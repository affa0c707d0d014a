// SPDX-License-Identifier: Apache-2.0

//! Workload generator and I/O-count benchmarks.

use std::time::Instant;

use rand::Rng;
use rand_core::{CryptoRngCore, RngCore};
use rand_distr::{Distribution, Zipf};

use crate::block_store::{BlockStore, DeviceGeometry, Fill};
use crate::crypto::{seeded_rng, KdfParams};
use crate::device::{Device, FormatOptions, PhiPolicy, RuntimeConfig};
use crate::error::{Error, Result};
use crate::harness::Record;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Workload {
    Sequential,
    Random,
    Zipfian { s: f64 },
}

impl Workload {
    pub fn parse(name: &str, zipf_s: f64) -> Result<Self> {
        match name {
            "sequential" => Ok(Workload::Sequential),
            "random" => Ok(Workload::Random),
            "zipfian" => Ok(Workload::Zipfian { s: zipf_s }),
            other => Err(Error::InvalidArgument(format!("unknown workload {other}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Workload::Sequential => "sequential",
            Workload::Random => "random",
            Workload::Zipfian { .. } => "zipfian",
        }
    }
}

/// Logical id stream over `0..capacity`.
pub struct IdStream {
    workload: Workload,
    capacity: u64,
    next: u64,
    zipf: Option<Zipf<f64>>,
}

impl IdStream {
    pub fn new(workload: Workload, capacity: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("empty id space".into()));
        }
        let zipf = match workload {
            Workload::Zipfian { s } => Some(
                Zipf::new(capacity, s).map_err(|e| Error::InvalidArgument(format!("zipf: {e}")))?,
            ),
            _ => None,
        };
        Ok(IdStream {
            workload,
            capacity,
            next: 0,
            zipf,
        })
    }

    pub fn next_id(&mut self, rng: &mut dyn RngCore) -> u64 {
        match self.workload {
            Workload::Sequential => {
                let id = self.next;
                self.next = (self.next + 1) % self.capacity;
                id
            }
            Workload::Random => rng.gen_range(0..self.capacity),
            Workload::Zipfian { .. } => {
                let z = self.zipf.as_ref().expect("zipf distribution");
                (z.sample(rng) as u64 - 1).min(self.capacity - 1)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Volume {
    Public,
    Hidden,
}

/// One benchmark run.
#[derive(Clone, Copy, Debug)]
pub struct BenchSpec {
    pub workload: Workload,
    /// Fraction of operations that are reads.
    pub read_fraction: f64,
    pub phi: PhiPolicy,
    pub ops: u64,
    pub volume: Volume,
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ops == 0 {
            return Err(Error::InvalidArgument("op count must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.read_fraction) {
            return Err(Error::InvalidArgument(
                "read fraction must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub spec: BenchSpec,
    pub reads: u64,
    pub writes: u64,
    pub physical_reads: u64,
    pub physical_writes: u64,
    pub elapsed_secs: f64,
    pub stash_high_water: usize,
}

impl BenchReport {
    pub fn physical_ios(&self) -> u64 {
        self.physical_reads + self.physical_writes
    }

    pub fn ios_per_op(&self) -> f64 {
        self.physical_ios() as f64 / self.spec.ops as f64
    }

    /// Logical writes per thousand physical I/Os.
    pub fn writes_per_kilo_io(&self) -> f64 {
        1000.0 * self.writes as f64 / self.physical_ios().max(1) as f64
    }

    pub fn ops_per_sec(&self) -> f64 {
        self.spec.ops as f64 / self.elapsed_secs.max(1e-9)
    }

    pub fn record(&self, test: &str) -> Record {
        Record::new(test, self.ios_per_op(), None, true).detail(format!(
            "workload={} volume={:?} phi={:?} ops={} reads={} writes={} phys_reads={} phys_writes={} writes_per_kio={:.3} ops_per_sec={:.1} stash_high_water={}",
            self.spec.workload.name(),
            self.spec.volume,
            self.spec.phi,
            self.spec.ops,
            self.reads,
            self.writes,
            self.physical_reads,
            self.physical_writes,
            self.writes_per_kilo_io(),
            self.ops_per_sec(),
            self.stash_high_water
        ))
    }
}

/// Runs `spec` on a mounted device. Hidden-volume writes are each carried by one in-place
/// public update.
pub fn run_bench(
    dev: &mut Device,
    spec: &BenchSpec,
    rng: &mut dyn CryptoRngCore,
) -> Result<BenchReport> {
    spec.validate()?;
    let mut config = *dev.config();
    config.phi = spec.phi;
    dev.set_config(config);
    let capacity = match spec.volume {
        Volume::Public => dev.public_capacity(),
        Volume::Hidden => {
            if dev.ppm().mapped() == 0 {
                let bs = dev.geometry().block_size();
                dev.public_write(0, &vec![0u8; bs], rng)?;
            }
            dev.hidden_capacity().ok_or(Error::NoHiddenVolume)?
        }
    };
    let mut ids = IdStream::new(spec.workload, capacity)?;
    let mut data = vec![0u8; dev.geometry().block_size()];
    let (r0, w0) = dev.store_mut().io_counts();
    let mut report = BenchReport {
        spec: *spec,
        reads: 0,
        writes: 0,
        physical_reads: 0,
        physical_writes: 0,
        elapsed_secs: 0.0,
        stash_high_water: 0,
    };
    let start = Instant::now();
    for _ in 0..spec.ops {
        let id = ids.next_id(rng);
        let read = rng.gen_bool(spec.read_fraction);
        match (spec.volume, read) {
            (Volume::Public, true) => {
                report.reads += 1;
                match dev.public_read(id) {
                    Ok(_) | Err(Error::Unwritten(_)) => {}
                    Err(e) => return Err(e),
                }
            }
            (Volume::Public, false) => {
                report.writes += 1;
                rng.fill_bytes(&mut data);
                dev.public_write(id, &data, rng)?;
            }
            (Volume::Hidden, true) => {
                report.reads += 1;
                dev.hidden_read(id)?;
            }
            (Volume::Hidden, false) => {
                report.writes += 1;
                rng.fill_bytes(&mut data);
                dev.hidden_write(id, &data)?;
                dev.sync_hidden(1, rng)?;
            }
        }
        report.stash_high_water = report.stash_high_water.max(dev.pending_hidden());
    }
    report.elapsed_secs = start.elapsed().as_secs_f64();
    let (r1, w1) = dev.store_mut().io_counts();
    report.physical_reads = r1 - r0;
    report.physical_writes = w1 - w0;
    Ok(report)
}

/// One point of the public:hidden ratio sweep.
#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub label: String,
    pub phi: PhiPolicy,
    pub report: BenchReport,
}

/// Public-write throughput per φ setting, each on a freshly formatted dual-volume device with
/// the same seed. Ratios `1..=max_ratio` map to one hidden step every `r` public writes;
/// the last point is updates-only.
pub fn phi_sweep(
    blocks: u64,
    block_size: usize,
    workload: Workload,
    ops: u64,
    max_ratio: u32,
    seed: u64,
) -> Result<Vec<SweepPoint>> {
    let mut settings: Vec<(String, PhiPolicy)> = (1..=max_ratio)
        .map(|r| (format!("ratio-{r}"), PhiPolicy::EveryNth(r)))
        .collect();
    settings.push(("updates-only".into(), PhiPolicy::UpdatesOnly));
    let mut out = Vec::new();
    for (label, phi) in settings {
        let mut rng = seeded_rng(seed);
        let g = DeviceGeometry::new(blocks, block_size)?;
        let store = BlockStore::memory(g, Fill::Random(&mut rng))?;
        let opts = FormatOptions::new(b"public", Some(b"hidden")).with_kdf(KdfParams::FAST);
        let mut dev = Device::format(store, &opts, RuntimeConfig::default(), &mut rng)?;
        let spec = BenchSpec {
            workload,
            read_fraction: 0.0,
            phi,
            ops,
            volume: Volume::Public,
        };
        let report = run_bench(&mut dev, &spec, &mut rng)?;
        out.push(SweepPoint { label, phi, report });
    }
    Ok(out)
}

/// Whether I/O throughput never decreases across the ratio points (updates-only excluded).
pub fn sweep_monotone(points: &[SweepPoint]) -> bool {
    let ratios: Vec<f64> = points
        .iter()
        .filter(|p| matches!(p.phi, PhiPolicy::EveryNth(_)))
        .map(|p| p.report.writes_per_kilo_io())
        .collect();
    ratios.windows(2).all(|w| w[1] >= w[0])
}

/// Updates-only throughput over the ratio-1 throughput, in I/O terms.
pub fn updates_only_gain(points: &[SweepPoint]) -> Option<f64> {
    let base = points.iter().find(|p| p.phi == PhiPolicy::EveryNth(1))?;
    let upd = points.iter().find(|p| p.phi == PhiPolicy::UpdatesOnly)?;
    Some(upd.report.writes_per_kilo_io() / base.report.writes_per_kilo_io())
}
