// SPDX-License-Identifier: Apache-2.0

use std::path::Path;
use std::process::Command;

use datalair::cli::{run, Passwords, EXIT_AUTH, EXIT_CORRUPT, EXIT_OK, EXIT_USAGE};

fn pw(public: &str, hidden: Option<&str>) -> Passwords {
    Passwords {
        public: Some(public.as_bytes().to_vec()),
        hidden: hidden.map(|h| h.as_bytes().to_vec()),
    }
}

fn call(img: &Path, args: &[&str], p: &Passwords) -> (i32, String, String) {
    let img = img.to_str().unwrap();
    let argv = ["datalair", "--device", img, "--seed", "7"]
        .into_iter()
        .chain(args.iter().copied());
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run(argv, p, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

fn init(img: &Path, p: &Passwords) {
    let (code, _, err) = call(
        img,
        &[
            "init",
            "--blocks",
            "256",
            "--block-size",
            "512",
            "--kdf",
            "fast",
        ],
        p,
    );
    assert_eq!(code, EXIT_OK, "{err}");
}

#[test]
fn io_round_trips_on_both_volumes() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("dev.img");
    let p = pw("pub", Some("hid"));
    init(&img, &p);
    let src = dir.path().join("in.bin");
    let dst = dir.path().join("out.bin");
    for (volume, payload) in [
        ("public", b"public payload".as_slice()),
        ("hidden", b"hidden payload".as_slice()),
    ] {
        std::fs::write(&src, payload).unwrap();
        let src_s = src.to_str().unwrap();
        let dst_s = dst.to_str().unwrap();
        let (code, _, err) = call(
            &img,
            &[
                "io", "--volume", volume, "--op", "write", "--id", "3", "--file", src_s,
            ],
            &p,
        );
        assert_eq!(code, EXIT_OK, "{err}");
        let (code, _, err) = call(
            &img,
            &[
                "io", "--volume", volume, "--op", "read", "--id", "3", "--file", dst_s,
            ],
            &p,
        );
        assert_eq!(code, EXIT_OK, "{err}");
        let got = std::fs::read(&dst).unwrap();
        assert_eq!(got.len(), 512);
        assert_eq!(&got[..payload.len()], payload);
        assert!(got[payload.len()..].iter().all(|&b| b == 0));
    }
    let (code, out, _) = call(&img, &["audit"], &p);
    assert_eq!(code, EXIT_OK, "{out}");
}

#[test]
fn wrong_password_and_unmapped_read_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("dev.img");
    let p = pw("pub", Some("hid"));
    init(&img, &p);
    assert_eq!(call(&img, &["mount"], &pw("wrong", None)).0, EXIT_AUTH);
    let dst = dir.path().join("out.bin");
    let args = [
        "io",
        "--volume",
        "public",
        "--op",
        "read",
        "--id",
        "9",
        "--file",
        dst.to_str().unwrap(),
    ];
    let (code, _, err) = call(&img, &args, &p);
    assert_eq!(code, EXIT_CORRUPT);
    assert!(err.contains("block unavailable"), "{err}");
    assert_eq!(call(&img, &["frobnicate"], &p).0, EXIT_USAGE);
}

#[test]
fn hidden_io_without_hidden_volume_looks_like_public_only() {
    let dir = tempfile::tempdir().unwrap();
    let dual = dir.path().join("dual.img");
    let single = dir.path().join("single.img");
    init(&dual, &pw("pub", Some("hid")));
    init(&single, &pw("pub", None));
    let dst = dir.path().join("out.bin");
    let args = [
        "io",
        "--volume",
        "hidden",
        "--op",
        "read",
        "--id",
        "0",
        "--file",
        dst.to_str().unwrap(),
    ];
    let a = call(&dual, &args, &pw("pub", None));
    let b = call(&single, &args, &pw("pub", None));
    assert_eq!(a.0, EXIT_CORRUPT);
    assert_eq!(a, b);
    assert_eq!(
        call(&dual, &["mount"], &pw("pub", None)),
        call(&single, &["mount"], &pw("pub", None))
    );
}

#[test]
fn audit_reports_injected_fault() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("dev.img");
    let p = pw("pub", Some("hid"));
    init(&img, &p);
    let (code, out, _) = call(&img, &["audit", "--inject-header-fault"], &p);
    assert_eq!(code, EXIT_CORRUPT);
    assert!(out.contains("result=FAIL"), "{out}");
    let (code, out, _) = call(&img, &["audit"], &p);
    assert_eq!(code, EXIT_OK, "{out}");
}

#[test]
fn binary_reads_passwords_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("dev.img");
    let bin = env!("CARGO_BIN_EXE_datalair");
    let run_bin = |args: &[&str], public: &str| {
        Command::new(bin)
            .arg("--device")
            .arg(&img)
            .args(args)
            .env("DLR_PUB_PW", public)
            .env_remove("DLR_HID_PW")
            .output()
            .unwrap()
    };
    let init = run_bin(
        &[
            "init",
            "--blocks",
            "256",
            "--block-size",
            "512",
            "--kdf",
            "fast",
        ],
        "pub",
    );
    assert!(
        init.status.success(),
        "{}",
        String::from_utf8_lossy(&init.stderr)
    );
    assert_eq!(run_bin(&["mount"], "pub").status.code(), Some(EXIT_OK));
    assert_eq!(run_bin(&["mount"], "wrong").status.code(), Some(EXIT_AUTH));
}
