use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use freqdeno::{load_tensor, save_tensor, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_freqdeno"));
    c.env("RUST_LOG", "error");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn input(dir: &Path, shape: &[usize]) -> PathBuf {
    let p = dir.join("in.fdt");
    save_tensor(&Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(3)), &p).unwrap();
    p
}

#[test]
fn selftest_passes() {
    let o = run(&["selftest"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("golden-file conformance"));
}

#[test]
fn selftest_rejects_tampered_golden_files() {
    let dir = tempfile::tempdir().unwrap();
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data");
    for f in ["golden.fdt", "golden.pgm", "golden.pgm.txt"] {
        fs::copy(golden.join(f), dir.path().join(f)).unwrap();
    }
    let mut bytes = fs::read(dir.path().join("golden.pgm")).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(dir.path().join("golden.pgm"), bytes).unwrap();
    let o = run(&["selftest", "--golden-dir", s(dir.path())]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("conformance"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let x = input(dir.path(), &[1, 64, 64]);
    let out = dir.path().join("o");

    let o = run(&["denoise", "--input", s(&x), "--out", s(&out), "--stride", "7"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("not divisible by stride 7"));

    let o = run(&["denoise", "--input", s(&dir.path().join("missing.fdt")), "--out", s(&out)]);
    assert_eq!(code(&o), 3);

    let bad = dir.path().join("bad.fdt");
    fs::write(&bad, b"FDT1 not really").unwrap();
    assert_eq!(code(&run(&["denoise", "--input", s(&bad), "--out", s(&out)])), 3);

    // exchange needs both refinements
    let o = run(&["denoise", "--input", s(&x), "--out", s(&out), "--no-refine-phase", "--token-exchange"]);
    assert_eq!(code(&o), 2);

    assert_eq!(code(&run(&["denoise", "--bogus"])), 2);
}

#[test]
fn refines_off_is_identity_and_input_is_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let x = input(dir.path(), &[2, 16, 16]);
    let before = fs::read(&x).unwrap();
    let out = dir.path().join("o");
    let o = run(&[
        "denoise", "--input", s(&x), "--out", s(&out), "--no-refine-amp", "--no-refine-phase",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(&x).unwrap(), before);
    let y = out.join("denoised.fdt");
    assert_eq!(code(&run(&["diff", s(&x), s(&y), "--tol", "1e-9"])), 0);
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.starts_with("command = denoise"), "{manifest}");
}

#[test]
fn refined_output_differs_and_diff_reports_it() {
    let dir = tempfile::tempdir().unwrap();
    let x = input(dir.path(), &[1, 16, 16]);
    let out = dir.path().join("o");
    assert_eq!(code(&run(&["denoise", "--input", s(&x), "--out", s(&out), "--stride", "4"])), 0);
    let o = run(&["diff", s(&x), s(&out.join("denoised.fdt"))]);
    assert_eq!(code(&o), 1);
}

#[test]
fn saved_params_reproduce_output() {
    let dir = tempfile::tempdir().unwrap();
    let x = input(dir.path(), &[1, 16, 16]);
    let (a, b, p) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("p"));
    let base = ["denoise", "--input", s(&x), "--stride", "4"];
    let o = bin().args(base).args(["--out", s(&a), "--seed", "9", "--save-params", s(&p)]).output().unwrap();
    assert_eq!(code(&o), 0);
    let o = bin().args(base).args(["--out", s(&b), "--load-params", s(&p)]).output().unwrap();
    assert_eq!(code(&o), 0);
    let ya = load_tensor(a.join("denoised.fdt")).unwrap();
    assert!(ya.bit_eq(&load_tensor(b.join("denoised.fdt")).unwrap()));
}

#[test]
fn denoise_refuses_to_overwrite_its_input() {
    let dir = tempfile::tempdir().unwrap();
    let x = dir.path().join("denoised.fdt");
    save_tensor(&Tensor::zeros(&[1, 8, 8]), &x).unwrap();
    let o = run(&["denoise", "--input", s(&x), "--out", s(dir.path())]);
    assert_ne!(code(&o), 0);
}

#[test]
fn export_maps_writes_gray_images() {
    let dir = tempfile::tempdir().unwrap();
    let x = input(dir.path(), &[2, 16, 16]);
    let out = dir.path().join("maps");
    assert_eq!(code(&run(&["export-maps", "--input", s(&x), "--out", s(&out)])), 0);
    for name in ["amplitude_gate", "phase_gate", "log_amplitude"] {
        let g = freqdeno::load_gray(out.join(format!("{name}.pgm"))).unwrap();
        assert_eq!(g.shape(), [16, 16]);
        assert_eq!(load_tensor(out.join(format!("{name}.fdt"))).unwrap().shape(), [16, 16]);
    }
}

#[test]
fn gradcheck_fails_on_a_corrupted_adjoint() {
    let o = run(&["gradcheck", "--corrupt-adjoint", "softmax"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("softmax"));
}

#[test]
fn small_sweep_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &Path| -> Vec<String> {
        ["sweep", "--axis", "exchange", "--scenes", "4", "--size", "16", "--epochs", "1", "--channels", "2", "--out", s(out)]
            .map(String::from)
            .to_vec()
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&bin().args(args(&a)).output().unwrap()), 0);
    assert_eq!(code(&bin().args(args(&b)).output().unwrap()), 0);
    let mut files: Vec<_> = fs::read_dir(a.join("exchange")).unwrap().map(|e| e.unwrap().file_name()).collect();
    files.sort();
    assert_eq!(files.len(), 4, "{files:?}");
    for f in files {
        assert_eq!(fs::read(a.join("exchange").join(&f)).unwrap(), fs::read(b.join("exchange").join(&f)).unwrap());
    }
}
