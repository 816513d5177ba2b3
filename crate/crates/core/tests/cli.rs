use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mimforge::checkpoint::{AnyTensor, Checkpoint};
use mimforge::config::RunConfig;
use mimforge::records::read_records;
use mimforge::runner::{checkpoint_name, mim_tensor_names};

const SMALL: &str = "\
encoder.image_size = 16
encoder.patch_size = 4
encoder.depth = 2
encoder.width = 16
encoder.mlp_width = 32
encoder.heads = 2
encoder.teacher_dim = 8
teacher.width = 8
teacher.mlp_width = 16
teacher.heads = 2
data.train_per_class = 6
data.test_per_class = 3
train.batch_size = 8
optim.total_steps = 10
optim.warmup_steps = 2
probe.epochs = 3
clip.steps = 4
clip.batch_size = 8
clip.embed_dim = 8
clip.text_width = 8
clip.text_heads = 2
clip.text_mlp = 16
";

struct Fixture {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Fixture {
    fn new(extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("run.cfg");
        std::fs::write(&config, format!("{SMALL}{extra}")).unwrap();
        Fixture { dir, config }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn run(&self, args: &[&str], run_dir: &str) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_mimforge"));
        cmd.arg("--config").arg(&self.config).arg("--set").arg(format!("run.dir={}", self.path(run_dir).display()));
        cmd.args(args).env_remove("MIMFORGE_RUN_DIR").output().unwrap()
    }
}

fn ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", o.status.code(), String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
}

fn f32_tensors(path: &Path) -> Vec<(String, Vec<f32>)> {
    Checkpoint::load(path)
        .unwrap()
        .tensors
        .into_iter()
        .filter(|(n, _)| !n.starts_with("opt."))
        .map(|(n, t)| match t {
            AnyTensor::F32(t) => (n, t.data().to_vec()),
            AnyTensor::F64(_) => panic!("{n} is f64"),
        })
        .collect()
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let fx = Fixture::new("optim.peak_lr = 0\noptim.min_lr = 0\n");
    ok(&fx.run(&["pretrain"], "lr0"));
    let start = f32_tensors(&fx.path("lr0").join(checkpoint_name(0)));
    let end = f32_tensors(&fx.path("lr0").join("final.evac"));
    assert_eq!(start, end);
    let steps: Vec<_> = read_records(&fx.path("lr0/metrics.txt")).unwrap().into_iter().filter(|r| r.event == "pretrain").collect();
    assert_eq!(steps.len(), 10);
    assert!(steps.iter().all(|r| r.get("loss").unwrap().parse::<f64>().unwrap().is_finite()));
}

#[test]
fn identical_invocations_are_bitwise_identical() {
    let fx = Fixture::new("run.checkpoint_every = 4\n");
    ok(&fx.run(&["--seed", "3", "pretrain"], "a"));
    ok(&fx.run(&["--seed", "3", "pretrain"], "b"));
    for f in ["metrics.txt", "final.evac", "ckpt-000004.evac", "ckpt-000008.evac", "ckpt-000010.evac"] {
        let (a, b) = (std::fs::read(fx.path("a").join(f)).unwrap(), std::fs::read(fx.path("b").join(f)).unwrap());
        assert!(a == b, "{f} differs");
    }
    ok(&fx.run(&["--seed", "4", "pretrain"], "c"));
    assert_ne!(std::fs::read(fx.path("a/final.evac")).unwrap(), std::fs::read(fx.path("c/final.evac")).unwrap());
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let fx = Fixture::new("run.checkpoint_every = 5\n");
    ok(&fx.run(&["pretrain"], "full"));
    ok(&fx.run(&["--set", "run.max_steps=5", "pretrain"], "half"));
    let ckpt = fx.path("half").join(checkpoint_name(5));
    assert!(ckpt.exists());
    ok(&fx.run(&["pretrain", "--resume", ckpt.to_str().unwrap()], "rest"));
    assert_eq!(std::fs::read(fx.path("full/final.evac")).unwrap(), std::fs::read(fx.path("rest/final.evac")).unwrap());

    let o = fx.run(&["--set", "optim.peak_lr=5e-4", "pretrain", "--resume", ckpt.to_str().unwrap()], "mismatch");
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("optim.peak_lr"));
}

#[test]
fn inspect_counts_model_and_optimizer_tensors() {
    let fx = Fixture::new("");
    ok(&fx.run(&["--set", "run.max_steps=1", "pretrain"], "p"));
    let o = Command::new(env!("CARGO_BIN_EXE_mimforge")).arg("inspect-ckpt").arg(fx.path("p").join(checkpoint_name(0))).output().unwrap();
    ok(&o);
    let out = String::from_utf8(o.stdout).unwrap();
    let cfg = RunConfig::parse(SMALL).unwrap();
    let names = mim_tensor_names(&cfg).unwrap();
    let expected = 3 * names.len() + 1;
    assert!(out.contains(&format!("tensors={expected} parameter_tensors={}", names.len())), "{out}");
    assert!(out.contains(&format!("optimizer_entries={}", 2 * names.len() + 1)));
    assert!(out.contains("encoder.patch_embed.weight"));
}

#[test]
fn ablate_emits_a_two_row_table() {
    let fx = Fixture::new("");
    let o = fx.run(&["ablate"], "ab");
    ok(&o);
    let table = std::fs::read_to_string(fx.path("ab/ablation.txt")).unwrap();
    assert_eq!(String::from_utf8(o.stdout).unwrap(), table);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("mode") && lines[0].contains("final pretext loss") && lines[0].contains("probe top1"));
    assert!(lines[2].starts_with("regress-masked") && lines[3].starts_with("distill-all"));
    for l in &lines[2..] {
        let cols: Vec<&str> = l.split_whitespace().collect();
        let loss: f64 = cols[1].parse().unwrap();
        let top1: f64 = cols[2].parse().unwrap();
        assert!((-1.0..=1.0).contains(&loss) && (0.0..=1.0).contains(&top1));
    }
    assert!(fx.path("ab/regress-masked/final.evac").exists() && fx.path("ab/distill-all/final.evac").exists());
}

#[test]
fn probe_clip_and_zeroshot_chain() {
    let fx = Fixture::new("");
    ok(&fx.run(&["pretrain"], "p"));
    let ckpt = fx.path("p/final.evac");
    let o = fx.run(&["probe", "--ckpt", ckpt.to_str().unwrap()], "probe");
    ok(&o);
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("feature="));
    ok(&fx.run(&["probe"], "probe-random"));
    let r = read_records(&fx.path("probe-random/metrics.txt")).unwrap();
    assert_eq!(r[0].get("source"), Some("random-init"));

    let o = fx.run(&["clip-train", "--init", ckpt.to_str().unwrap()], "clip");
    ok(&o);
    let cfg = RunConfig::parse(SMALL).unwrap();
    let encoder_tensors = mim_tensor_names(&cfg).unwrap().iter().filter(|n| n.starts_with("encoder.")).count();
    assert!(String::from_utf8_lossy(&o.stdout).starts_with(&format!("matched={encoder_tensors} ")));
    let recs = read_records(&fx.path("clip/metrics.txt")).unwrap();
    for r in recs.iter().filter(|r| r.event == "clip") {
        let t: f64 = r.get("temperature").unwrap().parse().unwrap();
        assert!((0.01..=100.0).contains(&t));
    }
    let o = fx.run(&["zeroshot", "--ckpt", fx.path("clip/final.evac").to_str().unwrap()], "zs");
    ok(&o);
    let zs = recs.iter().find(|r| r.event == "zeroshot").unwrap().get("top1").unwrap().parse::<f64>().unwrap();
    assert_eq!(String::from_utf8(o.stdout).unwrap().trim(), format!("top1={zs:.4}"));
}

#[test]
fn generated_files_drive_a_file_teacher_run() {
    let fx = Fixture::new("");
    ok(&fx.run(&["gen-data"], "gen"));
    let g = fx.path("gen");
    let extra = format!(
        "data.train_path = {}\ndata.test_path = {}\nteacher.kind = file\nteacher.path = {}\ntrain.augment = false\n",
        g.join("train.evad").display(),
        g.join("test.evad").display(),
        g.join("teacher.evat").display()
    );
    let fx2 = Fixture::new(&extra);
    ok(&fx2.run(&["--set", "run.max_steps=2", "pretrain"], "file"));

    let o = fx2.run(&["--set", "train.augment=true", "pretrain"], "bad");
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn exit_codes() {
    let fx = Fixture::new("");
    assert_eq!(fx.run(&["--set", "no.such=1", "pretrain"], "x").status.code(), Some(2));
    assert_eq!(fx.run(&["--set", "mask.ratio=2", "pretrain"], "x").status.code(), Some(2));
    assert_eq!(fx.run(&["frobnicate"], "x").status.code(), Some(2));
    assert_eq!(fx.run(&["pretrain", "--bogus"], "x").status.code(), Some(2));
    let o = fx.run(&["--set", "optim.warmup_steps=0", "--set", "optim.peak_lr=1e30", "pretrain"], "blowup");
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let r = read_records(&fx.path("blowup/metrics.txt")).unwrap();
    assert_eq!(r.last().unwrap().event, "abort");
    let o = Command::new(env!("CARGO_BIN_EXE_mimforge")).args(["inspect-ckpt", "/nonexistent.evac"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn default_run_dir_comes_from_the_environment() {
    let fx = Fixture::new("");
    let o = Command::new(env!("CARGO_BIN_EXE_mimforge"))
        .args(["--config", fx.config.to_str().unwrap(), "--seed", "9", "gradcheck"])
        .env("MIMFORGE_RUN_DIR", fx.dir.path())
        .output()
        .unwrap();
    ok(&o);
    let recs = read_records(&fx.path("gradcheck-seed9/metrics.txt")).unwrap();
    assert!(recs.len() > 20 && recs.iter().all(|r| r.get("passed") == Some("true")));
    assert!(fx.path("gradcheck-seed9/config.txt").exists());
}
