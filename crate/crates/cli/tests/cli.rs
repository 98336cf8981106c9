use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn msrg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msrg"))
        .args(args)
        .env("MSRG_THREADS", "1")
        .output()
        .expect("spawn msrg")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn phantoms(dir: &Path, n: usize, size: &str, conditional: bool) {
    let n = n.to_string();
    let mut args = vec!["phantom", "--n", &n, "--size", size, "--seed", "4", "--out", p(dir)];
    if conditional {
        args.push("--conditional");
    }
    let o = msrg(&args);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn config_lines(manifest: &Path) -> Vec<String> {
    fs::read_to_string(manifest)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(String::from)
        .collect()
}

#[test]
fn phantom_output_is_byte_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    phantoms(&a, 4, "16x16", true);
    phantoms(&b, 4, "16x16", true);
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 5, "four images and labels.csv");
    for n in names {
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap());
    }
}

#[test]
fn train_writes_a_reusable_manifest_and_reconstructs() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    phantoms(&data, 6, "16x16", true);

    let soup = t.path().join("soup");
    let o = msrg(&["train", "--model", "soup-baseline", "--data", p(&data), "--out", p(&soup), "--max-steps", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(config_lines(&soup.join("manifest.txt")).contains(&"batch_size = 32".to_string()));
    assert!(soup.join("train_log.csv").is_file());
    assert!(soup.join("checkpoints/last.ckpt").is_file());

    let csr = t.path().join("csr");
    let o = msrg(&["train", "--model", "csr-baseline", "--data", p(&data), "--out", p(&csr), "--max-steps", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let first = config_lines(&csr.join("manifest.txt"));
    assert!(first.contains(&"batch_size = 64".to_string()));
    assert!(first.contains(&"scale = 2/25".to_string()));

    // Feeding the manifest back in reproduces the run exactly.
    let again = t.path().join("again");
    let manifest = csr.join("manifest.txt");
    let o = msrg(&["train", "--config", p(&manifest), "--data", p(&data), "--out", p(&again), "--max-steps", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(config_lines(&again.join("manifest.txt")), first);
    assert_eq!(
        fs::read(csr.join("checkpoints/last.ckpt")).unwrap(),
        fs::read(again.join("checkpoints/last.ckpt")).unwrap()
    );

    let recon = t.path().join("recon");
    let ckpt = csr.join("checkpoints/last.ckpt");
    let o = msrg(&["reconstruct", "--ckpt", p(&ckpt), "--input", p(&data), "--out", p(&recon), "--grid"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let strip = image::open(recon.join("grid/phantom_00000.png")).unwrap();
    assert_eq!((strip.width(), strip.height()), (48, 16));
    assert_eq!(fs::read_dir(&recon).unwrap().filter(|e| e.as_ref().unwrap().path().is_file()).count(), 6);
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let t = tempfile::tempdir().unwrap();
    let o = msrg(&["train", "--out", p(t.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--data"));
    assert_eq!(msrg(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn wrong_image_size_fails_with_a_clear_message() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    phantoms(&data, 2, "33x32", false);
    let out = t.path().join("out");
    let o = msrg(&["train", "--model", "soup-baseline", "--scale", "1/8", "--data", p(&data), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
    let e = stderr(&o);
    assert!(e.contains("33x32") && e.contains("32x32"), "{e}");
}

#[test]
fn eval_of_identical_directories() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    phantoms(&data, 3, "20x20", false);
    let o = msrg(&["eval", "--ref", p(&data), "--gen", p(&data), "--mode", "global", "--model", "csr-optimized"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], "# model=csr-optimized phase=eval ssim_mode=global");
    assert_eq!(lines[1], "image,psnr_db,ssim");
    assert!(lines[2..5].iter().all(|l| l.ends_with(",inf,1")));
    assert_eq!(lines[5], "mean,inf,1");

    let report = t.path().join("report.csv");
    let o = msrg(&["eval", "--ref", p(&data), "--gen", p(&data), "--out", p(&report)]);
    assert!(o.status.success());
    assert!(fs::read_to_string(&report).unwrap().starts_with("# model=unknown phase=eval ssim_mode=windowed"));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let t = tempfile::tempdir().unwrap();
    let missing = t.path().join("nope.ckpt");
    let o = msrg(&["reconstruct", "--ckpt", p(&missing), "--input", p(t.path()), "--out", p(t.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error:"));
}
