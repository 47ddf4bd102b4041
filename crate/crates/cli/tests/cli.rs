use std::path::Path;
use std::process::Command;

fn s2s(dir: &Path, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_s2s"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success(), "s2s {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const CUBE: &str = "v 0 0 0\nv 2 0 0\nv 0 2 0\nv 2 2 0\nv 0 0 2\nv 2 0 2\nv 0 2 2\nv 2 2 2\n\
f 1 3 4 2\nf 5 6 8 7\nf 1 2 6 5\nf 3 7 8 4\nf 1 5 7 3\nf 2 4 8 6\n";

#[test]
fn data_to_mesh() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    s2s(d, &["gen-data", "--out", "data", "--count", "10", "--res", "32", "--seed", "3"]);
    assert!(d.join("data/manifest.txt").is_file());
    assert!(d.join("data/000009_x.pgm").is_file());

    let out = s2s(d, &["train", "--data", "data", "--disc", "6:0.5,14:0.5", "--epochs", "1", "--out", "ckpt"]);
    assert!(out.contains("test L1"), "{out}");
    for f in ["g.s2s1", "d.s2s1", "train_report.jsonl", "run_meta.json"] {
        assert!(d.join("ckpt").join(f).is_file(), "{f}");
    }

    s2s(d, &["translate", "--data", "data", "--ckpt", "ckpt/g.s2s1", "--out", "pred"]);
    let n = std::fs::read_dir(d.join("pred")).unwrap().count();
    assert_eq!(n, 2);
    let table = s2s(d, &["metrics", "--pred", "pred", "--truth", "data", "--jsonl", "m.jsonl"]);
    assert!(table.contains("PSNR (dB)") && table.contains("SSIM"));
    let lines = std::fs::read_to_string(d.join("m.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 3);

    std::fs::write(d.join("cube.obj"), CUBE).unwrap();
    s2s(d, &["infer", "--mesh", "cube.obj", "--ckpt", "ckpt/g.s2s1", "--axis", "y", "--out", "v.s2svol"]);
    let vol = std::fs::read(d.join("v.s2svol")).unwrap();
    assert!(vol.starts_with(b"S2SVOL v1 32 32 32 "));
    let msg = s2s(d, &["extract", "--vol", "v.s2svol", "--threshold", "0.5", "--axis", "y", "--out", "r.stl"]);
    assert!(msg.contains("triangles"));
    let stl = std::fs::read(d.join("r.stl")).unwrap();
    let count = u32::from_le_bytes(stl[80..84].try_into().unwrap()) as usize;
    assert_eq!(stl.len(), 84 + 50 * count);
}

#[test]
fn bad_arguments_fail() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [
        &["gen-data", "--out", "x", "--res", "48"][..],
        &["infer", "--mesh", "missing.obj", "--ckpt", "nope", "--out", "v"],
        &["extract", "--vol", "missing", "--out", "r.ply"],
    ] {
        let status = Command::new(env!("CARGO_BIN_EXE_s2s"))
            .args(args)
            .current_dir(tmp.path())
            .output()
            .unwrap()
            .status;
        assert!(!status.success(), "{args:?}");
    }
}
