use std::path::Path;
use std::process::{Command, Output};

use latentflow::config::RunConfig;
use latentflow::io::read_field_file;
use latentflow::pipeline::paths;

fn small() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.wake.grid_h = 16;
    cfg.wake.grid_w = 16;
    cfg.vae.grid_h = 16;
    cfg.vae.grid_w = 16;
    cfg.vae.enc_channels = vec![4, 8, 8];
    cfg.vae.enc_kernels = vec![3; 3];
    cfg.vae.enc_strides = vec![2; 3];
    cfg.vae.dec_channels = vec![8, 4, 4];
    cfg.vae.dec_seed_channels = 8;
    cfg.p2z.hidden = 16;
    cfg.p2z.blocks = 1;
    cfg.data.n_low = 40;
    cfg.data.n_high = 64;
    cfg.train.epochs = 2;
    cfg.train.epos_p2z = 2;
    cfg.spod.n_dft = 32;
    cfg.spod.overlap = 16;
    cfg.spod.n_modes = 2;
    cfg
}

fn latentflow(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latentflow"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

#[test]
fn stages_run_one_by_one() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("small.toml");
    std::fs::write(&config, small().to_toml()).unwrap();
    let out = dir.path().join("run");

    let early = latentflow(&["train-p2z"], &config, &out);
    assert!(!early.status.success());
    let err = String::from_utf8_lossy(&early.stderr);
    assert!(err.contains("vae.lfck"), "{err}");

    for stage in ["generate", "train-vae", "train-p2z", "infer", "analyze-spod", "match-lift", "evaluate"] {
        let o = latentflow(&[stage, "--threads", "2"], &config, &out);
        assert!(o.status.success(), "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let inferred = read_field_file(&out.join(paths::INFERRED)).unwrap();
    assert_eq!(inferred.snapshots.len(), 64);
    assert_eq!(inferred.dt, 1.0 / 64.0);
    for f in [paths::SPECTRUM, paths::PEAKS, paths::MODES, paths::LIFT_MATCHES, paths::METRICS_CSV, paths::METRICS_TXT] {
        assert!(out.join(f).is_file(), "{f}");
    }

    // Evaluating a different field file.
    let o = latentflow(&["evaluate", "--input", out.join(paths::LOW_FIELDS).to_str().unwrap()], &config, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn bad_configs_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    for (text, key) in [("[train]\nepochz = 3\n", "epochz"), ("[spod]\noverlap = 999\n", "spod.overlap")] {
        let config = dir.path().join("bad.toml");
        std::fs::write(&config, text).unwrap();
        let o = latentflow(&["generate"], &config, &dir.path().join("never"));
        assert!(!o.status.success());
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.contains(key), "{err}");
        assert!(!dir.path().join("never").exists());
    }
}

#[test]
fn seed_flag_changes_the_data() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("small.toml");
    std::fs::write(&config, small().to_toml()).unwrap();
    let read = |seed: &str, name: &str| {
        let out = dir.path().join(name);
        let o = latentflow(&["generate", "--seed", seed], &config, &out);
        assert!(o.status.success());
        std::fs::read(out.join(paths::LOW_PRESSURE)).unwrap()
    };
    assert_eq!(read("3", "a"), read("3", "b"));
    assert_ne!(read("3", "c"), read("4", "d"));
}
