use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn foe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_foe"))
        .args(args)
        .env("FOE_LOG", "error")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Reads a little-endian f64 FOT1 file: 4-byte magic, dtype, rank, reserved
/// bytes, extents, then data.
fn read_f64(path: &Path) -> (Vec<usize>, Vec<f64>) {
    let b = fs::read(path).unwrap();
    assert_eq!(&b[..4], b"FOT1");
    let rank = b[5] as usize;
    let dims: Vec<usize> = (0..rank)
        .map(|i| u64::from_le_bytes(b[12 + 8 * i..20 + 8 * i].try_into().unwrap()) as usize)
        .collect();
    let start = 12 + 8 * rank;
    let data = b[start..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    (dims, data)
}

const FOCUS_CONFIG: &str = r#"{
  "optics": {
    "wavelength_um": 0.532, "na": 0.8, "refractive_index": 1.33,
    "mask_pixels": 32, "mask_pixel_um": 0.325,
    "camera_pixels": [16, 16], "camera_pixel_um": 0.325,
    "z_planes_um": [-4.0, 0.0, 4.0],
    "taper_width_px": 2.0, "oversim_factor": 1.5, "photon_budget": 1000.0
  }
}"#;

#[test]
fn unaberrated_psf_peaks_in_focus() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("focus.json");
    fs::write(&cfg, FOCUS_CONFIG).unwrap();
    let out = dir.path().join("psf");
    let o = foe(&["psf", "--init", "zeros", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (dims, data) = read_f64(&out.join("psf.fot"));
    assert_eq!(dims, vec![3, 16, 16]);
    let plane = 16 * 16;
    let peak = |z: usize| data[z * plane..(z + 1) * plane].iter().cloned().fold(f64::MIN, f64::max);
    assert!(peak(1) > peak(0) && peak(1) > peak(2));
    assert!(out.join("psf_mip.pgm").exists());
}

#[test]
fn gradcheck_passes_and_fails_with_exit_codes() {
    let o = foe(&["gradcheck", "--seed", "7"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("pipeline"));
    // an impossible tolerance is a numerical failure, not a usage error
    let o = foe(&["gradcheck", "--seed", "7", "--filter", "fft2", "--tolerance", "0"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn eval_of_identical_volumes() {
    let dir = tempfile::tempdir().unwrap();
    let o = foe(&["phantom", "--seed", "2", "--out", p(dir.path())]);
    assert_eq!(code(&o), 0);
    let a = dir.path().join("phantom.fot");
    let o = foe(&["eval", "--truth", p(&a), "--recon", p(&a)]);
    assert_eq!(code(&o), 0);
    let m: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(m["ms_ssim"], 1.0);
    assert_eq!(m["psnr"], "inf");
    assert_eq!(m["l_hnmse"], 0.0);
}

#[test]
fn outputs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        for args in [
            vec!["phantom", "--seed", "5", "--out", p(&out)],
            vec!["simulate", "--init", "helix", "--seed", "5", "--out", p(&out)],
            vec!["train-decoder", "--init", "pencils_hex", "--iters", "5", "--seed", "5", "--out", p(&out)],
        ] {
            let o = foe(&args);
            assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        }
        out
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["phantom.fot", "camera.fot", "volume.fot", "phi.fot", "psf.fot", "decoder/net0/000.fot"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn joint_training_then_reconstruct() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = foe(&["train-encoder", "--init", "pencils_hex", "--iters", "20", "--workers", "2", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 20);
    let sim = dir.path().join("sim");
    let o = foe(&["simulate", "--phi", p(&out.join("phi.fot")), "--seed", "1", "--out", p(&sim)]);
    assert_eq!(code(&o), 0);
    let rec = dir.path().join("rec");
    let o = foe(&["reconstruct", "--checkpoint", p(&out), "--image", p(&sim.join("camera.fot")), "--out", p(&rec)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (dims, data) = read_f64(&rec.join("recon.fot"));
    assert_eq!(dims, vec![4, 16, 16]);
    assert!(data.iter().all(|v| v.is_finite() && *v >= 0.0));
    let o = foe(&["eval", "--truth", p(&sim.join("volume.fot")), "--recon", p(&rec.join("recon.fot"))]);
    assert_eq!(code(&o), 0);
}

#[test]
fn validation_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&foe(&["psf", "--no-such-flag"])), 1);
    assert_eq!(code(&foe(&["psf", "--init", "spiral"])), 1);
    assert_eq!(code(&foe(&["frobnicate"])), 1);
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"train": {"lr_theta": -1}}"#).unwrap();
    let o = foe(&["train-decoder", "--config", p(&bad), "--out", p(dir.path())]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning rate"));
    let o = foe(&["eval", "--truth", "missing.fot", "--recon", "missing.fot"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn every_subcommand_documents_its_flags() {
    let expect: &[(&str, &[&str])] = &[
        ("psf", &["--config", "--preset", "--seed", "--workers", "--out", "--init", "--phi"]),
        ("simulate", &["--config", "--volume", "--init", "--phi", "--seed", "--out"]),
        ("train-encoder", &["--config", "--iters", "--workers", "--init", "--seed", "--out"]),
        ("train-decoder", &["--config", "--iters", "--workers", "--init", "--phi", "--out"]),
        ("reconstruct", &["--checkpoint", "--image", "--out"]),
        ("eval", &["--truth", "--recon", "--out"]),
        ("gradcheck", &["--seed", "--filter", "--tolerance", "--out"]),
        ("bench", &["--sizes", "--reps"]),
        ("phantom", &["--config", "--preset", "--seed", "--out"]),
    ];
    for (cmd, flags) in expect {
        let o = foe(&[cmd, "--help"]);
        assert_eq!(code(&o), 0, "{cmd}");
        let text = stdout(&o);
        for f in *flags {
            assert!(text.contains(f), "{cmd} --help lacks {f}");
        }
    }
}

#[test]
fn bench_prints_a_table() {
    let o = foe(&["bench", "--sizes", "16,32", "--reps", "1"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("speedup"));
    assert_eq!(text.lines().count(), 3);
}
