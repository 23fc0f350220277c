use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use align_core::model::Checkpoint;
use align_core::params::Group;
use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_alignbench"));
    c.env_remove("ALIGNBENCH_OUT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Small model and corpus so a full three-stage run takes seconds.
fn tiny_config(out: &Path) -> Value {
    let stage = |n: u8| {
        json!({
            "stage": n,
            "train_encoder": n != 3,
            "batch_size": 4,
            "epochs": 1,
            "seed": 100 + n as u64,
        })
    };
    json!({
        "seed": 3,
        "out_dir": out,
        "model": {
            "feature_dim": 8,
            "encoder_hidden": 8,
            "d_model": 8,
            "vocab": 16,
            "layers": 1,
            "ff_mult": 2,
            "max_len": 40,
            "connector": {"vet_k": 4, "latents": 4},
            "tiling": {"max_tiles": 1, "ratio_set": [[1, 1]]}
        },
        "data": {"eval_docs": 8},
        "synth_count": 8,
        "stages": [stage(1), stage(2), stage(3)],
        "analysis": {"probes": 4, "noise_seeds": [0]},
        "bench": {"num_patches": 16, "feature_dim": 8, "d_model": 8, "vocab": 32, "text_len": 2}
    })
}

struct Run {
    _dir: tempfile::TempDir,
    out: PathBuf,
    config: PathBuf,
}

impl Run {
    fn new() -> Self {
        Self::with(|_| {})
    }

    fn with(edit: impl FnOnce(&mut Value)) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let mut cfg = tiny_config(&out);
        edit(&mut cfg);
        let config = dir.path().join("config.json");
        std::fs::write(&config, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        Run { _dir: dir, out, config }
    }

    fn cmd(&self, sub: &str, extra: &[&str]) -> Output {
        let mut args = vec![sub, "--config", self.config.to_str().unwrap()];
        args.extend_from_slice(extra);
        run(&args)
    }

    fn ok(&self, sub: &str, extra: &[&str]) -> String {
        let o = self.cmd(sub, extra);
        assert_eq!(code(&o), 0, "{sub} {extra:?} failed: {}", stderr(&o));
        String::from_utf8_lossy(&o.stdout).into_owned()
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn read(&self, rel: &str) -> String {
        std::fs::read_to_string(self.path(rel)).unwrap()
    }

    fn ckpt(&self, stage: u8) -> Checkpoint<f32> {
        Checkpoint::load(&self.path(&format!("checkpoints/stage{stage}.ckpt"))).unwrap()
    }
}

fn tensors(ck: &Checkpoint<f32>, group: Option<Group>) -> Vec<(String, Vec<f32>)> {
    ck.model
        .named_tensors()
        .into_iter()
        .filter(|(_, g, _)| group.map_or(true, |want| *g == want))
        .map(|(n, _, t)| (n, t.data().to_vec()))
        .collect()
}

#[test]
fn exit_codes() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["train", "--help"])), 0);
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    let o = run(&["bench", "--connector", "transformer"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("align"), "{}", stderr(&o));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    assert_eq!(code(&run(&["synth", "--config", bad.to_str().unwrap()])), 1);
    std::fs::write(&bad, r#"{"model": {"vocab": 1}}"#).unwrap();
    assert_eq!(code(&run(&["synth", "--config", bad.to_str().unwrap()])), 1);
    let missing = dir.path().join("nope.json");
    assert_eq!(code(&run(&["synth", "--config", missing.to_str().unwrap()])), 1);

    let r = Run::new();
    assert_eq!(code(&r.cmd("train", &["--stages", "7"])), 1);
}

#[test]
fn diverging_training_exits_with_the_numeric_code() {
    let r = Run::with(|c| c["stages"][0]["lr"] = json!(1e38));
    r.ok("synth", &[]);
    let o = r.cmd("train", &["--stages", "1"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("stage 1"), "{}", stderr(&o));
}

#[test]
fn missing_artifacts_name_their_producer() {
    let r = Run::new();
    let o = r.cmd("train", &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("alignbench synth"), "{}", stderr(&o));
    for sub in ["eval", "analyze", "prune", "noise"] {
        let o = r.cmd(sub, &[]);
        assert_eq!(code(&o), 2, "{sub}");
        assert!(stderr(&o).contains("alignbench train"), "{sub}: {}", stderr(&o));
    }
    let o = r.cmd("plot", &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("alignbench analyze"), "{}", stderr(&o));
    r.ok("synth", &[]);
    let o = r.cmd("train", &["--stages", "3"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("stage2.ckpt") && stderr(&o).contains("alignbench train"), "{}", stderr(&o));
}

#[test]
fn synth_is_deterministic_and_in_vocabulary() {
    let (a, b) = (Run::new(), Run::new());
    a.ok("synth", &[]);
    b.ok("synth", &[]);
    let manifest = a.read("data/manifest.json");
    assert_eq!(manifest, b.read("data/manifest.json"));
    assert_eq!(
        std::fs::read(a.path("data/eval/00003.png")).unwrap(),
        std::fs::read(b.path("data/eval/00003.png")).unwrap()
    );
    let m: Value = serde_json::from_str(&manifest).unwrap();
    let docs = m["docs"].as_array().unwrap();
    assert_eq!(docs.len(), 4 * 8);
    for d in docs {
        for id in d["target"].as_array().unwrap() {
            assert!(id.as_u64().unwrap() < 16);
        }
        assert!(a.path(&format!("data/{}", d["raw"].as_str().unwrap())).exists());
    }

    let empty = Run::with(|c| c["synth_count"] = json!(0));
    empty.ok("synth", &[]);
    let m: Value = serde_json::from_str(&empty.read("data/manifest.json")).unwrap();
    assert!(m["docs"].as_array().unwrap().is_empty());
}

#[test]
fn output_directory_precedence() {
    let r = Run::new();
    let dir = tempfile::tempdir().unwrap();
    let (env_out, flag_out) = (dir.path().join("env"), dir.path().join("flag"));
    let status = bin()
        .args(["synth", "--config", r.config.to_str().unwrap()])
        .env("ALIGNBENCH_OUT", &env_out)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(env_out.join("data/manifest.json").exists() && !r.out.exists());
    let status = bin()
        .args(["synth", "--config", r.config.to_str().unwrap(), "--out", flag_out.to_str().unwrap()])
        .env("ALIGNBENCH_OUT", &env_out)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(flag_out.join("data/manifest.json").exists());
}

#[test]
fn echoed_config_reproduces_the_run() {
    let r = Run::new();
    r.ok("synth", &["--seed", "11"]);
    let echoed = r.path("synth.config.json");
    let cfg: Value = serde_json::from_str(&r.read("synth.config.json")).unwrap();
    assert_eq!(cfg["seed"], 11);
    // every default is spelled out
    assert!(cfg["analysis"]["noise_sigma"].is_number() && cfg["stages"].as_array().unwrap().len() == 3);

    let dir = tempfile::tempdir().unwrap();
    let again = dir.path().join("again");
    let o = run(&["synth", "--config", echoed.to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read(again.join("data/manifest.json")).unwrap(), std::fs::read(r.path("data/manifest.json")).unwrap());
    let mut reechoed: Value = serde_json::from_str(&std::fs::read_to_string(again.join("synth.config.json")).unwrap()).unwrap();
    reechoed["out_dir"] = cfg["out_dir"].clone();
    assert_eq!(reechoed, cfg);
    assert!(r.read("run.log").contains("synth ok"));
}

#[test]
fn full_workflow() {
    let r = Run::new();
    r.ok("synth", &[]);
    let out = r.ok("train", &[]);
    assert!(out.contains("stage 3"), "{out}");
    let loss = r.read("train/loss.csv");
    assert!(loss.starts_with("stage,step,epoch,loss"));
    for s in 1..=3 {
        assert!(loss.lines().any(|l| l.starts_with(&format!("{s},"))), "no stage {s} rows");
        assert!(r.path(&format!("checkpoints/stage{s}.ckpt")).exists());
    }

    // stage 3 froze the encoder
    assert_eq!(tensors(&r.ckpt(2), Some(Group::Encoder)), tensors(&r.ckpt(3), Some(Group::Encoder)));
    assert_ne!(tensors(&r.ckpt(2), Some(Group::Connector)), tensors(&r.ckpt(3), Some(Group::Connector)));

    r.ok("eval", &[]);
    let metrics = r.read("eval/metrics.csv");
    assert!(metrics.starts_with("checkpoint,connector,docs,tokens,correct,token_accuracy,mean_loss"), "{metrics}");
    assert!(metrics.contains("stage3.ckpt,align,8,"), "{metrics}");
    // idempotent
    r.ok("eval", &[]);
    assert_eq!(r.read("eval/metrics.csv"), metrics);

    r.ok("analyze", &[]);
    assert_eq!(r.read("analysis/distribution.csv").lines().count(), 1 + 16);
    assert_eq!(r.read("analysis/pca.csv").lines().count(), 1 + 16);
    r.ok("prune", &[]);
    let prune = r.read("prune/prune.csv");
    assert!(prune.contains("mass 0.999") && prune.contains("top-1"), "{prune}");

    let noise = r.ok("noise", &[]);
    assert!(noise.contains("σ=3"), "{noise}");
    let rows = r.read("noise/noise.csv");
    let header: Vec<&str> = rows.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "sigma").unwrap();
    for line in rows.lines().skip(1) {
        assert_eq!(line.split(',').nth(col).unwrap().parse::<f64>().unwrap(), 3.0);
    }

    r.ok("plot", &[]);
    for f in ["distribution.svg", "pca.svg", "noise_cosine.svg", "prune.svg"] {
        assert!(r.path(&format!("figures/{f}")).exists(), "{f}");
    }
}

#[test]
fn stage_three_from_a_checkpoint_with_another_connector() {
    let r = Run::new();
    r.ok("synth", &[]);
    r.ok("train", &["--stages", "1,2"]);
    let stage2 = r.path("checkpoints/stage2.ckpt");
    r.ok("train", &["--stages", "3", "--from", stage2.to_str().unwrap(), "--connector", "mlp"]);
    let (s2, s3) = (r.ckpt(2), r.ckpt(3));
    assert_eq!(s3.model.kind().name(), "mlp");
    assert_eq!(tensors(&s2, Some(Group::Encoder)), tensors(&s3, Some(Group::Encoder)));

    // align and mlp share the encoder, so both fit in one noise run
    let align3 = r.path("align3.ckpt");
    let mlp3 = r.path("checkpoints/stage3.ckpt");
    std::fs::copy(&mlp3, r.path("mlp3.ckpt")).unwrap();
    r.ok("train", &["--stages", "3"]);
    std::fs::copy(&mlp3, &align3).unwrap();
    let list = format!("{},{}", align3.display(), r.path("mlp3.ckpt").display());
    r.ok("noise", &["--from", &list, "--sigma", "1.5"]);
    let rows = r.read("noise/noise.csv");
    assert!(rows.contains("align,1.5,0,") && rows.contains("mlp,1.5,0,"), "{rows}");
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let whole = Run::new();
    whole.ok("synth", &[]);
    whole.ok("train", &["--stages", "1"]);

    let cut = Run::with(|c| c["stages"][0]["max_steps"] = json!(1));
    cut.ok("synth", &[]);
    let out = cut.ok("train", &["--stages", "1"]);
    assert!(out.contains("interrupted"), "{out}");
    assert!(cut.ckpt(1).train_state().is_some());
    let ckpt = cut.path("checkpoints/stage1.ckpt");
    // same tree, no step limit
    let resumed_cfg = tiny_config(&cut.out);
    std::fs::write(&cut.config, resumed_cfg.to_string()).unwrap();
    cut.ok("train", &["--stages", "1", "--from", ckpt.to_str().unwrap()]);

    assert_eq!(tensors(&cut.ckpt(1), None), tensors(&whole.ckpt(1), None));
    assert_eq!(cut.read("train/loss.csv"), whole.read("train/loss.csv"));
    assert!(cut.ckpt(1).train_state().is_none());
}

#[test]
fn plot_fixture_has_one_bar_per_connector() {
    let r = Run::new();
    let fixture = "connector,scope,samples,mean_latency,median_latency,min_latency,tokens_per_sec,output_tokens,memory_bytes\n\
align,model,30,0.002,0.002,0.0019,72000,144,100000\n\
mlp,model,30,0.001,0.001,0.0009,144000,144,90000\n\
vet,model,30,0.003,0.003,0.0029,48000,144,120000\n\
perceiver,model,30,0.0005,0.0005,0.0004,32000,16,50000\n\
hreducer,model,30,0.0008,0.0008,0.0007,45000,36,60000\n";
    std::fs::create_dir_all(r.path("bench")).unwrap();
    std::fs::write(r.path("bench/bench.csv"), fixture).unwrap();
    r.ok("plot", &[]);
    let svg = r.read("figures/bench.svg");
    assert!(svg.starts_with("<svg"));
    assert_eq!(svg.matches(r#"class="bar""#).count(), 5);
    for name in ["align", "mlp", "vet", "perceiver", "hreducer"] {
        assert!(svg.contains(&format!(">{name}<")), "{name}");
    }
    // only the figures with a source report are written
    assert!(!r.path("figures/pca.svg").exists());

    std::fs::write(r.path("bench/bench.csv"), "connector,scope\nalign,model\n").unwrap();
    let o = r.cmd("plot", &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("alignbench bench"), "{}", stderr(&o));
}

#[test]
fn bench_writes_one_row_per_connector() {
    let r = Run::new();
    r.ok("bench", &[]);
    let rows = r.read("bench/bench.csv");
    assert_eq!(rows.lines().count(), 6);
    r.ok("bench", &["--connector", "perceiver"]);
    assert_eq!(r.read("bench/bench.csv").lines().count(), 2);
}
