use std::path::Path;
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

fn gama(dir: &Path, args: &[&str]) -> Output {
    gama_env(dir, args, &[])
}

fn gama_env(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_gama"));
    cmd.current_dir(dir).args(args).env_remove("GAMA_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn gama")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn manifest(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// A small dataset, two victims, an encoder and a bank shared by the tests below.
struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn path(&self) -> &Path {
        self.dir.path()
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let f = Fixture {
            dir: tempfile::tempdir().unwrap(),
        };
        let d = f.path();
        ok(&gama(d, &["dataset", "--samples", "80", "--size", "16", "--out", "d.gamd"]));
        ok(&gama(d, &["train-surrogate", "--dataset", "d.gamd", "--epochs", "2", "--out", "s0.gamc"]));
        ok(&gama(d, &["train-surrogate", "--dataset", "d.gamd", "--epochs", "2", "--arch", "1", "--out", "s1.gamc"]));
        ok(&gama(d, &["pretrain-encoder", "--dataset", "d.gamd", "--epochs", "1", "--out", "e.gamc"]));
        ok(&gama(d, &["build-bank", "--encoder", "e.gamc", "--dataset", "d.gamd", "--out", "b.gamb"]));
        std::fs::write(
            d.join("victims.json"),
            r#"[
  {"id": "arch0", "checkpoint": "s0.gamc", "task": "multi_label", "architecture_id": 0, "distribution_id": "shapes-a", "defense": "none"},
  {"id": "arch1", "checkpoint": "s1.gamc", "task": "multi_label", "architecture_id": 1, "distribution_id": "shapes-a", "defense": "none"},
  {"id": "arch1-median3", "checkpoint": "s1.gamc", "task": "multi_label", "architecture_id": 1, "distribution_id": "shapes-a", "defense": "median3"}
]"#,
        )
        .unwrap();
        f
    })
}

#[test]
fn dataset_manifest_is_stable_across_reruns() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let args = [
        "dataset",
        "--classes",
        "6",
        "--samples",
        "600",
        "--seed",
        "7",
    ];
    let mut runs = Vec::new();
    for name in ["a.gamd", "b.gamd"] {
        let mut a: Vec<&str> = args.to_vec();
        a.extend(["--out", name]);
        ok(&gama(d, &a));
        assert!(d.join(name).exists());
        let m = manifest(&d.join(name).with_extension("run.json"));
        assert_eq!(m["command"], "dataset");
        assert_eq!(m["seed"], 7);
        assert_eq!(m["config"]["classes"], 6);
        let sums: Vec<Value> = m["outputs"]
            .as_object()
            .unwrap()
            .values()
            .cloned()
            .collect();
        runs.push(sums);
    }
    assert_eq!(runs[0], runs[1]);
    assert_eq!(
        std::fs::read(d.join("a.gamd")).unwrap(),
        std::fs::read(d.join("b.gamd")).unwrap()
    );
}

#[test]
fn invalid_class_count_is_a_config_error_naming_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let out = gama(tmp.path(), &["dataset", "--classes", "1"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("classes"), "{}", stderr(&out));
    assert!(!tmp.path().join("dataset.gamd").exists());

    std::fs::write(
        tmp.path().join("cfg.json"),
        r#"{"dims": {"channels": "three"}}"#,
    )
    .unwrap();
    let out = gama(tmp.path(), &["dataset", "--config", "cfg.json"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("dims.channels"), "{}", stderr(&out));
}

#[test]
fn pairs_file_sets_the_cooccurrence_matrix() {
    let tmp = tempfile::tempdir().unwrap();
    let pairs = "[[0,1],[1,2],[2,3],[3,4],[4,5],[0,5],[0,3],[1,4]]";
    std::fs::write(tmp.path().join("pairs.json"), pairs).unwrap();
    let s = ok(&gama(
        tmp.path(),
        &[
            "dataset",
            "--samples",
            "300",
            "--size",
            "16",
            "--pairs",
            "pairs.json",
        ],
    ));
    assert!(s.contains("16 nonzero entries (8 pairs)"), "{s}");
}

#[test]
fn gama_seed_overrides_config_but_not_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&gama_env(
        d,
        &[
            "dataset",
            "--samples",
            "40",
            "--size",
            "16",
            "--out",
            "e.gamd",
        ],
        &[("GAMA_SEED", "9")],
    ));
    assert_eq!(manifest(&d.join("e.run.json"))["seed"], 9);
    ok(&gama_env(
        d,
        &[
            "dataset",
            "--samples",
            "40",
            "--size",
            "16",
            "--seed",
            "3",
            "--out",
            "f.gamd",
        ],
        &[("GAMA_SEED", "9")],
    ));
    assert_eq!(manifest(&d.join("f.run.json"))["seed"], 3);
    let out = gama_env(d, &["dataset", "--out", "g.gamd"], &[("GAMA_SEED", "x")]);
    assert_eq!(code(&out), 2);
}

#[test]
fn surrogate_training_is_reproducible_and_leaves_inputs_alone() {
    let f = fixture();
    let d = f.path();
    let before = std::fs::read(d.join("d.gamd")).unwrap();
    ok(&gama(
        d,
        &[
            "train-surrogate",
            "--dataset",
            "d.gamd",
            "--epochs",
            "2",
            "--out",
            "s0-again.gamc",
        ],
    ));
    assert_eq!(
        std::fs::read(d.join("s0.gamc")).unwrap(),
        std::fs::read(d.join("s0-again.gamc")).unwrap()
    );
    assert_eq!(std::fs::read(d.join("d.gamd")).unwrap(), before);
    let m = manifest(&d.join("s0-again.run.json"));
    assert!(m["inputs"]
        .as_object()
        .unwrap()
        .keys()
        .any(|k| k.ends_with("d.gamd")));
    assert!(m["versions"]["GAMC"].is_string());
    let missing = gama(
        d,
        &[
            "train-surrogate",
            "--dataset",
            "nope.gamd",
            "--out",
            "x.gamc",
        ],
    );
    assert_eq!(code(&missing), 3);
}

#[test]
fn bank_uses_default_prefix_and_one_prompt_per_pair() {
    let f = fixture();
    let d = f.path();
    let side: Value = manifest(&d.join("b.json"));
    assert_eq!(side["prefix"], "a photo depicts");
    let ds: Value = manifest(&d.join("d.json"));
    let pairs = ds["allowed_pairs"].as_array().unwrap().len();
    assert_eq!(side["prompts"].as_array().unwrap().len(), pairs);

    std::fs::write(d.join("none.json"), "[]").unwrap();
    let out = gama(
        d,
        &[
            "build-bank",
            "--encoder",
            "e.gamc",
            "--dataset",
            "d.gamd",
            "--pairs",
            "none.json",
            "--out",
            "z.gamb",
        ],
    );
    assert_eq!(code(&out), 3);
}

#[test]
fn generator_training_reports_settings_and_checks_artifacts() {
    let f = fixture();
    let d = f.path();
    let s = ok(&gama(
        d,
        &[
            "train-generator",
            "--method",
            "gama",
            "--dataset",
            "d.gamd",
            "--surrogate",
            "s0.gamc",
            "--encoder",
            "e.gamc",
            "--bank",
            "b.gamb",
            "--epochs",
            "1",
            "--out",
            "g.gamc",
        ],
    ));
    assert!(s.contains("alpha=1.0") && s.contains("(10.0/255)"), "{s}");
    assert!(!s.contains("ensemble"));
    let log = std::fs::read_to_string(d.join("g.log.ndjson")).unwrap();
    let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert!(first["l_txt"].is_number() && first["lr"].is_number());

    let s = ok(&gama(
        d,
        &[
            "train-generator",
            "--method",
            "gap_bce",
            "--dataset",
            "d.gamd",
            "--surrogate",
            "s0.gamc",
            "--surrogate",
            "s1.gamc",
            "--epochs",
            "1",
            "--out",
            "g-ens.gamc",
        ],
    ));
    assert!(s.contains("ensemble mode"), "{s}");

    let out = gama(
        d,
        &[
            "train-generator",
            "--dataset",
            "d.gamd",
            "--surrogate",
            "s0.gamc",
            "--encoder",
            "e.gamc",
            "--out",
            "x.gamc",
        ],
    );
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("bank"));

    ok(&gama(
        d,
        &[
            "pretrain-encoder",
            "--dataset",
            "d.gamd",
            "--epochs",
            "1",
            "--embed-dim",
            "32",
            "--out",
            "e32.gamc",
        ],
    ));
    ok(&gama(
        d,
        &[
            "build-bank",
            "--encoder",
            "e32.gamc",
            "--dataset",
            "d.gamd",
            "--out",
            "b32.gamb",
        ],
    ));
    let out = gama(
        d,
        &[
            "train-generator",
            "--dataset",
            "d.gamd",
            "--surrogate",
            "s0.gamc",
            "--encoder",
            "e32.gamc",
            "--bank",
            "b32.gamb",
            "--out",
            "x.gamc",
        ],
    );
    assert_eq!(code(&out), 4);
    assert!(
        stderr(&out).contains("K=32") && stderr(&out).contains("K=64"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn zero_perturbation_keeps_scores_and_tags_scenarios() {
    let f = fixture();
    let d = f.path();
    ok(&gama(
        d,
        &[
            "evaluate",
            "--generator",
            "none",
            "--victims",
            "victims.json",
            "--dataset",
            "d.gamd",
            "--out",
            "r-none.csv",
        ],
    ));
    let text = std::fs::read_to_string(d.join("r-none.csv")).unwrap();
    let mut rdr = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect::<Vec<_>>());
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let col = |n: &str| header.iter().position(|h| *h == n).unwrap();
    let (clean, attacked, defense) = (col("clean"), col("attacked"), col("defense"));
    let rows: Vec<Vec<String>> = rdr.by_ref().collect();
    assert_eq!(rows.len(), 3);
    for r in &rows {
        assert_eq!(r[clean], r[attacked]);
    }
    assert_eq!(rows[2][defense], "median3");
    assert!(d.join("r-none.run.json").exists());
}

#[test]
fn evaluate_and_report_tables() {
    let f = fixture();
    let d = f.path();
    ok(&gama(
        d,
        &[
            "train-generator",
            "--method",
            "ablate_img_only",
            "--dataset",
            "d.gamd",
            "--surrogate",
            "s0.gamc",
            "--encoder",
            "e.gamc",
            "--epochs",
            "1",
            "--out",
            "gi.gamc",
        ],
    ));
    let s = ok(&gama(
        d,
        &[
            "evaluate",
            "--generator",
            "gi.gamc",
            "--victims",
            "victims.json",
            "--dataset",
            "d.gamd",
            "--out",
            "r.csv",
        ],
    ));
    assert!(
        s.contains("arch0 [white]") && s.contains("arch1 [black]"),
        "{s}"
    );
    for ext in ["context.csv", "pca.csv", "run.json"] {
        assert!(d.join("r").with_extension(ext).exists(), "missing {ext}");
    }

    let t = ok(&gama(
        d,
        &[
            "report",
            "--inputs",
            "r.csv",
            "--mode",
            "transfer_matrix",
            "--out",
            "t.csv",
        ],
    ));
    assert_eq!(
        t.lines().next().unwrap(),
        "generator_id,arch0,arch1,arch1-median3,average"
    );

    let c = ok(&gama(
        d,
        &[
            "report",
            "--inputs",
            "r.context.csv",
            "--mode",
            "context",
            "--out",
            "c.csv",
        ],
    ));
    assert!(
        c.lines().nth(1).unwrap().starts_with("ablate_img_only,"),
        "{c}"
    );

    let p = ok(&gama(
        d,
        &[
            "report",
            "--inputs",
            "r.pca.csv",
            "--mode",
            "pca",
            "--out",
            "p.csv",
        ],
    ));
    assert_eq!(p.lines().count(), 2);

    let row = |g: &str, v: &str, s: &str, a: f64| {
        format!("{g},arch0,{v},multi_label,none,{s},hamming,90.000000,{a:.6},0.039216\n")
    };
    let header =
        "generator_id,surrogate_id,victim_id,task,defense,scenario,metric,clean,attacked,epsilon\n";
    let csv = format!(
        "{header}{}{}{}{}",
        row("gama-s1", "arch1", "black", 40.0),
        row("ablate_img_txt-s1", "arch1", "black", 50.0),
        row("ablate_img_only-s1", "arch1", "black", 60.0),
        row("gama-s1", "arch0", "white", 10.0),
    );
    std::fs::write(d.join("abl.csv"), csv).unwrap();
    let a = ok(&gama(
        d,
        &[
            "report", "--inputs", "abl.csv", "--mode", "ablation", "--out", "a.csv",
        ],
    ));
    let arms: Vec<&str> = a
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(arms, ["L_i", "L_i+L_t", "L"]);
    assert!(a.contains("L,gama,90.000000,40.000000,1"), "{a}");

    let bad = gama(
        d,
        &[
            "report",
            "--inputs",
            "r.csv",
            "--mode",
            "histogram",
            "--out",
            "h.csv",
        ],
    );
    assert_eq!(code(&bad), 2);
}

#[test]
fn pgd_defense_requires_a_hardened_checkpoint() {
    let f = fixture();
    let d = f.path();
    let out = gama(
        d,
        &[
            "evaluate",
            "--generator",
            "none",
            "--victims",
            "victims.json",
            "--dataset",
            "d.gamd",
            "--defense",
            "pgd",
            "--out",
            "x.csv",
        ],
    );
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    let out = gama(
        d,
        &[
            "evaluate",
            "--generator",
            "none",
            "--victims",
            "victims.json",
            "--dataset",
            "d.gamd",
            "--defense",
            "blur",
            "--out",
            "x.csv",
        ],
    );
    assert_eq!(code(&out), 2);
}

/// Default-size dataset through the frozen-model commands.
#[test]
fn default_models_reach_sanity_levels() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&gama(d, &["dataset"]));
    let s = ok(&gama(d, &["train-surrogate", "--dataset", "dataset.gamd"]));
    let clean: f64 = s
        .rsplit("test split ")
        .next()
        .unwrap()
        .trim()
        .trim_end_matches('%')
        .parse()
        .unwrap();
    assert!(clean >= 70.0, "{s}");
    let e = ok(&gama(d, &["pretrain-encoder", "--dataset", "dataset.gamd"]));
    let rank: f64 = e
        .split("mean rank ")
        .nth(1)
        .unwrap()
        .split_whitespace()
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert!(rank <= 4.0, "{e}");
}
