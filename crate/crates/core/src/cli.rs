// SPDX-License-Identifier: Apache-2.0

//! Command-line front end. Every device command mounts, acts and unmounts.
//!
//! Passwords come from `DLR_PUB_PW` and, optionally, `DLR_HID_PW`. Supplying the second one
//! is the only difference between single- and dual-volume use.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand_chacha::ChaCha20Rng;

use crate::bench::{self, BenchSpec, Volume, Workload};
use crate::block_store::{BlockStore, DeviceGeometry, Fill};
use crate::crypto::{rng_from, KdfParams};
use crate::device::{Device, FormatOptions, PhiPolicy, RuntimeConfig};
use crate::error::Error;
use crate::freemaps::BitmapMode;
use crate::harness::{self, battery, game, BiasConfig, GameConfig, Record};
use crate::oram::SelectionProtocol;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_AUTH: i32 = 3;
pub const EXIT_FULL: i32 = 4;
pub const EXIT_CORRUPT: i32 = 5;

pub const PUBLIC_PASSWORD_VAR: &str = "DLR_PUB_PW";
pub const HIDDEN_PASSWORD_VAR: &str = "DLR_HID_PW";

#[derive(Parser, Debug)]
#[command(
    name = "datalair",
    version,
    about = "Plausibly-deniable block device tool"
)]
pub struct Cli {
    /// Device image path.
    #[arg(long, global = true)]
    pub device: Option<PathBuf>,
    /// Seed for every random choice; OS entropy when absent.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Create and format a device image.
    Init(InitArgs),
    /// Mount, report and unmount.
    Mount,
    /// Mount and cleanly unmount, persisting free maps and the stash.
    Unmount,
    /// Read or write one block.
    Io(IoArgs),
    /// Run a workload and report physical I/O counts.
    Bench(BenchArgs),
    /// Check structural invariants.
    Audit(AuditArgs),
    /// Run an adversary experiment on in-memory devices.
    Attack(AttackArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum KdfChoice {
    Standard,
    Fast,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum BitmapChoice {
    OnDisk,
    InMemory,
}

#[derive(Args, Debug)]
pub struct InitArgs {
    /// Data-region size in blocks.
    #[arg(long)]
    pub blocks: u64,
    #[arg(long, default_value_t = 4096)]
    pub block_size: usize,
    /// Blocks selected per run.
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, value_enum, default_value_t = BitmapChoice::OnDisk)]
    pub bitmap: BitmapChoice,
    #[arg(long, value_enum, default_value_t = KdfChoice::Standard)]
    pub kdf: KdfChoice,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
pub enum VolumeChoice {
    Public,
    Hidden,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
pub enum IoOp {
    Read,
    Write,
}

#[derive(Args, Debug)]
pub struct IoArgs {
    #[arg(long, value_enum)]
    pub volume: VolumeChoice,
    #[arg(long, value_enum)]
    pub op: IoOp,
    #[arg(long)]
    pub id: u64,
    /// Source for writes (zero-padded to one block), destination for reads.
    #[arg(long)]
    pub file: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum WorkloadChoice {
    Sequential,
    Random,
    Zipfian,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, value_enum, default_value_t = WorkloadChoice::Zipfian)]
    pub workload: WorkloadChoice,
    #[arg(long, default_value_t = 1.0)]
    pub zipf_s: f64,
    #[arg(long, default_value_t = 1000)]
    pub ops: u64,
    /// `per-write:N`, `every:N` or `updates-only`.
    #[arg(long, default_value = "per-write:1")]
    pub phi: String,
    #[arg(long, default_value_t = 0.0)]
    pub read_fraction: f64,
    #[arg(long, value_enum, default_value_t = VolumeChoice::Public)]
    pub volume: VolumeChoice,
    /// Sweep the public:hidden ratio on fresh in-memory devices instead of using `--device`.
    #[arg(long)]
    pub sweep: bool,
    #[arg(long, default_value_t = 10)]
    pub max_ratio: u32,
    /// Data blocks for sweep devices.
    #[arg(long, default_value_t = 4096)]
    pub blocks: u64,
    #[arg(long, default_value_t = 4096)]
    pub block_size: usize,
}

#[derive(Args, Debug)]
pub struct AuditArgs {
    /// Test hook: corrupt the last free-matrix row counter before auditing.
    #[arg(long, hide = true)]
    pub inject_header_fault: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AttackKind {
    /// Free-block bias of the selection protocol.
    Bias,
    /// Snapshot game against the built-in distinguishers.
    Game,
    /// Uniformity of hidden-write data locations.
    Hwa,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ProtocolChoice {
    Combined,
    Legacy,
}

#[derive(Args, Debug)]
pub struct AttackArgs {
    #[arg(long, value_enum)]
    pub kind: AttackKind,
    #[arg(long, default_value_t = 256)]
    pub blocks: u64,
    #[arg(long, value_enum, default_value_t = ProtocolChoice::Combined)]
    pub protocol: ProtocolChoice,
    /// Bias: scored guesses. Game: rounds. Hwa: operations per sample.
    #[arg(long, default_value_t = 100_000)]
    pub budget: u64,
    /// Turns off write simulation (game only); a deliberately leaky control.
    #[arg(long)]
    pub leaky: bool,
}

/// Password pair taken from the environment.
#[derive(Clone, Debug, Default)]
pub struct Passwords {
    pub public: Option<Vec<u8>>,
    pub hidden: Option<Vec<u8>>,
}

impl Passwords {
    pub fn from_env() -> Self {
        let get = |k| std::env::var_os(k).map(|v| v.into_encoded_bytes());
        Passwords {
            public: get(PUBLIC_PASSWORD_VAR),
            hidden: get(HIDDEN_PASSWORD_VAR),
        }
    }
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: msg.into(),
        }
    }

    /// Unmapped ids and an absent hidden volume share one message and code.
    fn unavailable() -> Self {
        Failure {
            code: EXIT_CORRUPT,
            message: "block unavailable".into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Auth => EXIT_AUTH,
            Error::PublicFull | Error::StashOverflow { .. } => EXIT_FULL,
            Error::Corrupt(_) | Error::SnapshotMismatch | Error::StaleReceipt(_) => EXIT_CORRUPT,
            Error::Unwritten(_) | Error::NoHiddenVolume => return Failure::unavailable(),
            Error::IdOutOfRange { .. }
            | Error::BadLength { .. }
            | Error::Geometry(_)
            | Error::InvalidArgument(_)
            | Error::IllegalPattern(_)
            | Error::InsufficientSamples(_) => EXIT_USAGE,
            _ => EXIT_FAILURE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Parses `args` and runs the command. Returns the process exit code.
pub fn run<I, T>(args: I, passwords: &Passwords, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{e}");
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli, passwords, out) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

fn execute(cli: &Cli, pw: &Passwords, out: &mut dyn Write) -> CmdResult {
    let mut rng = rng_from(cli.seed);
    match &cli.command {
        Command::Init(a) => cmd_init(device_path(cli)?, a, pw, &mut rng, out),
        Command::Mount => {
            let dev = mount(device_path(cli)?, pw, &mut rng)?;
            emit(
                out,
                &format!(
                    "mounted public_capacity={} block_size={}",
                    dev.public_capacity(),
                    dev.geometry().block_size()
                ),
            )?;
            dev.unmount(&mut rng)?;
            Ok(())
        }
        Command::Unmount => {
            let dev = mount(device_path(cli)?, pw, &mut rng)?;
            dev.unmount(&mut rng)?;
            emit(out, "unmounted")
        }
        Command::Io(a) => cmd_io(device_path(cli)?, a, pw, &mut rng, out),
        Command::Bench(a) => cmd_bench(cli, a, pw, &mut rng, out),
        Command::Audit(a) => cmd_audit(device_path(cli)?, a, pw, &mut rng, out),
        Command::Attack(a) => cmd_attack(a, cli.seed.unwrap_or(1), out),
    }
}

fn emit(out: &mut dyn Write, line: &str) -> CmdResult {
    writeln!(out, "{line}").map_err(|e| Failure::from(Error::Io(e)))
}

fn device_path(cli: &Cli) -> std::result::Result<&Path, Failure> {
    cli.device
        .as_deref()
        .ok_or_else(|| Failure::usage("--device is required"))
}

fn public_password(pw: &Passwords) -> std::result::Result<&[u8], Failure> {
    pw.public
        .as_deref()
        .ok_or_else(|| Failure::usage(format!("{PUBLIC_PASSWORD_VAR} is not set")))
}

fn mount(
    path: &Path,
    pw: &Passwords,
    rng: &mut ChaCha20Rng,
) -> std::result::Result<Device, Failure> {
    let public = public_password(pw)?;
    let store = BlockStore::open(path)?;
    Ok(Device::mount(
        store,
        public,
        pw.hidden.as_deref(),
        RuntimeConfig::default(),
        rng,
    )?)
}

fn cmd_init(
    path: &Path,
    a: &InitArgs,
    pw: &Passwords,
    rng: &mut ChaCha20Rng,
    out: &mut dyn Write,
) -> CmdResult {
    let public = public_password(pw)?;
    let g = DeviceGeometry::new(a.blocks, a.block_size)?;
    let mut opts = FormatOptions::new(public, pw.hidden.as_deref());
    opts.k = a.k;
    opts.bitmap = match a.bitmap {
        BitmapChoice::OnDisk => BitmapMode::OnDisk,
        BitmapChoice::InMemory => BitmapMode::InMemory,
    };
    opts.kdf = match a.kdf {
        KdfChoice::Standard => KdfParams::default(),
        KdfChoice::Fast => KdfParams::FAST,
    };
    let store = BlockStore::create(path, g, Fill::Random(rng))?;
    let dev = Device::format(store, &opts, RuntimeConfig::default(), rng)?;
    let cap = dev.public_capacity();
    dev.unmount(rng)?;
    emit(
        out,
        &format!(
            "initialized blocks={} block_size={} public_capacity={cap}",
            a.blocks, a.block_size
        ),
    )
}

fn cmd_io(
    path: &Path,
    a: &IoArgs,
    pw: &Passwords,
    rng: &mut ChaCha20Rng,
    out: &mut dyn Write,
) -> CmdResult {
    let mut dev = mount(path, pw, rng)?;
    let bs = dev.geometry().block_size();
    let result = match a.op {
        IoOp::Write => {
            let mut data = std::fs::read(&a.file)
                .map_err(|e| Failure::usage(format!("{}: {e}", a.file.display())))?;
            if data.len() > bs {
                return Err(Failure::usage(format!(
                    "input is {} bytes, block size is {bs}",
                    data.len()
                )));
            }
            data.resize(bs, 0);
            match a.volume {
                VolumeChoice::Public => dev.public_write(a.id, &data, rng),
                VolumeChoice::Hidden => dev.hidden_write(a.id, &data),
            }
            .map(|()| None)
        }
        IoOp::Read => match a.volume {
            VolumeChoice::Public => dev.public_read(a.id),
            VolumeChoice::Hidden => dev.hidden_read(a.id),
        }
        .map(Some),
    };
    let unmounted = dev.unmount(rng);
    let data = result?;
    unmounted?;
    if let Some(d) = data {
        std::fs::write(&a.file, d).map_err(|e| Failure::from(Error::Io(e)))?;
    }
    emit(out, "ok")
}

fn parse_phi(s: &str) -> std::result::Result<PhiPolicy, Failure> {
    let bad = || Failure::usage(format!("bad --phi value {s}"));
    if s == "updates-only" {
        return Ok(PhiPolicy::UpdatesOnly);
    }
    let (kind, n) = s.split_once(':').ok_or_else(bad)?;
    let n: u32 = n.parse().map_err(|_| bad())?;
    match kind {
        "per-write" => Ok(PhiPolicy::PerWrite(n)),
        "every" if n > 0 => Ok(PhiPolicy::EveryNth(n)),
        _ => Err(bad()),
    }
}

fn workload(a: &BenchArgs) -> Workload {
    match a.workload {
        WorkloadChoice::Sequential => Workload::Sequential,
        WorkloadChoice::Random => Workload::Random,
        WorkloadChoice::Zipfian => Workload::Zipfian { s: a.zipf_s },
    }
}

fn cmd_bench(
    cli: &Cli,
    a: &BenchArgs,
    pw: &Passwords,
    rng: &mut ChaCha20Rng,
    out: &mut dyn Write,
) -> CmdResult {
    if a.sweep {
        let points = bench::phi_sweep(
            a.blocks,
            a.block_size,
            workload(a),
            a.ops,
            a.max_ratio,
            cli.seed.unwrap_or(1),
        )?;
        for p in &points {
            emit(
                out,
                &p.report.record(&format!("sweep-{}", p.label)).to_string(),
            )?;
        }
        let gain = bench::updates_only_gain(&points).unwrap_or(0.0);
        let rec =
            Record::new("sweep-shape", gain, None, bench::sweep_monotone(&points)).detail(format!(
                "monotone={} updates_only_gain={gain:.3}",
                bench::sweep_monotone(&points)
            ));
        return emit(out, &rec.to_string());
    }
    let mut dev = mount(device_path(cli)?, pw, rng)?;
    let spec = BenchSpec {
        workload: workload(a),
        read_fraction: a.read_fraction,
        phi: parse_phi(&a.phi)?,
        ops: a.ops,
        volume: match a.volume {
            VolumeChoice::Public => Volume::Public,
            VolumeChoice::Hidden => Volume::Hidden,
        },
    };
    let report = bench::run_bench(&mut dev, &spec, rng);
    dev.unmount(rng)?;
    emit(out, &report?.record("bench").to_string())
}

fn cmd_audit(
    path: &Path,
    a: &AuditArgs,
    pw: &Passwords,
    rng: &mut ChaCha20Rng,
    out: &mut dyn Write,
) -> CmdResult {
    let mut dev = mount(path, pw, rng)?;
    if a.inject_header_fault {
        if let Some(o) = dev.oram_mut() {
            let fbm = &mut o.maps_mut().fbm;
            let last = fbm.rows() - 1;
            fbm.corrupt_counter(last, 0);
        }
    }
    let checks = dev.audit();
    for c in &checks {
        emit(
            out,
            &format!(
                "check={} result={}",
                c.name,
                if c.ok { "PASS" } else { "FAIL" }
            ),
        )?;
    }
    let failed = checks.iter().filter(|c| !c.ok).count();
    if a.inject_header_fault {
        drop(dev);
    } else {
        dev.unmount(rng)?;
    }
    if failed > 0 {
        return Err(Failure {
            code: EXIT_CORRUPT,
            message: format!("{failed} invariant(s) violated"),
        });
    }
    Ok(())
}

fn cmd_attack(a: &AttackArgs, seed: u64, out: &mut dyn Write) -> CmdResult {
    let protocol = match a.protocol {
        ProtocolChoice::Combined => SelectionProtocol::Combined,
        ProtocolChoice::Legacy => SelectionProtocol::BiasedLegacy,
    };
    let records: Vec<Record> = match a.kind {
        AttackKind::Bias => {
            let r = harness::bias_attack(BiasConfig::new(a.blocks, protocol, a.budget, seed))?;
            vec![r.record("bias-attack", true)]
        }
        AttackKind::Game => {
            let mut config = GameConfig {
                blocks: a.blocks,
                seed,
                ..GameConfig::default()
            };
            config.runtime.protocol = protocol;
            config.runtime.leaky_skip_simulation = a.leaky;
            game::run_battery(&config, a.budget as usize)?
                .iter()
                .map(|r| r.record("pdcpa-game"))
                .collect()
        }
        AttackKind::Hwa => battery::hwa_battery(a.blocks, 512, a.budget as usize, seed, 0.01)?,
    };
    for r in &records {
        emit(out, &r.to_string())?;
    }
    emit(out, &harness::summary(&records))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pw(public: &str, hidden: Option<&str>) -> Passwords {
        Passwords {
            public: Some(public.as_bytes().to_vec()),
            hidden: hidden.map(|h| h.as_bytes().to_vec()),
        }
    }

    fn call<S: AsRef<str>>(args: &[S], p: &Passwords) -> (i32, String, String) {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        let code = run(
            std::iter::once("datalair").chain(args.iter().map(AsRef::as_ref)),
            p,
            &mut o,
            &mut e,
        );
        (
            code,
            String::from_utf8(o).unwrap(),
            String::from_utf8(e).unwrap(),
        )
    }

    #[test]
    fn phi_parsing() {
        assert_eq!(parse_phi("per-write:2").unwrap(), PhiPolicy::PerWrite(2));
        assert_eq!(parse_phi("every:3").unwrap(), PhiPolicy::EveryNth(3));
        assert_eq!(parse_phi("updates-only").unwrap(), PhiPolicy::UpdatesOnly);
        assert!(parse_phi("every:0").is_err());
        assert!(parse_phi("sometimes").is_err());
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(call(&["frobnicate"], &Passwords::default()).0, EXIT_USAGE);
        assert_eq!(call(&["mount"], &pw("a", None)).0, EXIT_USAGE);
    }

    #[test]
    fn lifecycle_and_wrong_password() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let img = img.to_str().unwrap();
        let base = ["--device", img, "--seed", "3"];
        let with = |extra: &[&'static str]| -> Vec<String> {
            base.iter().chain(extra).map(|s| s.to_string()).collect()
        };
        let p = pw("pub", Some("hid"));
        let (code, out, _) = call(
            &with(&[
                "init",
                "--blocks",
                "256",
                "--block-size",
                "512",
                "--kdf",
                "fast",
            ]),
            &p,
        );
        assert_eq!(code, EXIT_OK);
        assert!(out.contains("public_capacity=64"));
        assert_eq!(call(&with(&["mount"]), &pw("nope", None)).0, EXIT_AUTH);
        let (c1, o1, _) = call(&with(&["mount"]), &p);
        let (c2, o2, _) = call(&with(&["mount"]), &pw("pub", None));
        assert_eq!((c1, &o1), (c2, &o2));
    }
}
