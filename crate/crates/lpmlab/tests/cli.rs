use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn lpmlab(runs: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lpmlab"))
        .args(args)
        .env("LPMLAB_RUNS_DIR", runs)
        .output()
        .unwrap()
}

fn ok(runs: &Path, args: &[&str]) -> String {
    let out = lpmlab(runs, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn field(stdout: &str, key: &str) -> String {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}\t")))
        .unwrap_or_else(|| panic!("no `{key}` in {stdout}"))
        .to_string()
}

const SMALL: [&str; 10] = [
    "--paired",
    "24",
    "--unpaired_speech",
    "16",
    "--unpaired_text",
    "200",
    "--dev",
    "8",
    "--test",
    "4",
];

const TINY_MODEL: [&str; 8] = [
    "--embed_dim",
    "4",
    "--encoder_hidden",
    "5",
    "--decoder_hidden",
    "5",
    "--attention_dim",
    "4",
];

fn gen(runs: &Path, seed: &str) -> String {
    let mut args = vec!["gen-data", "--seed", seed];
    args.extend(SMALL);
    ok(runs, &args)
}

#[test]
fn gen_data_is_reproducible() {
    let runs = tempfile::tempdir().unwrap();
    let a = gen(runs.path(), "7");
    let b = gen(runs.path(), "7");
    assert_eq!(field(&a, "data_hash"), field(&b, "data_hash"));
    assert_eq!(field(&a, "run_dir"), field(&b, "run_dir"));
    assert!(field(&a, "run_dir").ends_with("-7"));
    let c = gen(runs.path(), "8");
    assert_ne!(field(&a, "data_hash"), field(&c, "data_hash"));
    let manifest = std::fs::read_to_string(Path::new(&field(&a, "run_dir")).join("manifest.txt")).unwrap();
    assert!(manifest.contains(&format!("data_hash = {}", field(&a, "data_hash"))));
}

#[test]
fn usage_errors_exit_two() {
    let runs = tempfile::tempdir().unwrap();
    assert_eq!(lpmlab(runs.path(), &["no-such-command"]).status.code(), Some(2));
    assert_eq!(lpmlab(runs.path(), &["gen-data", "--bogus", "1"]).status.code(), Some(2));
    assert_eq!(lpmlab(runs.path(), &["gen-data", "--seed"]).status.code(), Some(2));
    assert_eq!(lpmlab(runs.path(), &["train-lm"]).status.code(), Some(2));
    assert_eq!(lpmlab(runs.path(), &["sweep", "--data", "x"]).status.code(), Some(2));
    assert_eq!(lpmlab(runs.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn invalid_inputs_exit_one_with_module_name() {
    let runs = tempfile::tempdir().unwrap();
    let out = lpmlab(runs.path(), &["gen-data", "--max_len", "0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("synth:"));
    let out = lpmlab(runs.path(), &["gen-data", "--seed", "x"]);
    assert_eq!(out.status.code(), Some(1));
    let data = field(&gen(runs.path(), "1"), "run_dir");
    let out = lpmlab(runs.path(), &["train-lm", "--data", &data, "--fraction", "0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ngram_lm:"));
}

#[test]
fn config_file_with_command_line_override() {
    let runs = tempfile::tempdir().unwrap();
    let conf = runs.path().join("data.conf");
    std::fs::write(&conf, "seed = 3\npaired = 24\nunpaired_speech = 16\nunpaired_text = 200\ndev = 8\ntest = 4\n").unwrap();
    let from_file = ok(runs.path(), &["gen-data", "--config", conf.to_str().unwrap(), "--seed", "7"]);
    let direct = gen(runs.path(), "7");
    assert_eq!(field(&from_file, "data_hash"), field(&direct, "data_hash"));
}

fn files_in(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

#[test]
fn end_to_end_pipeline() {
    let runs = tempfile::tempdir().unwrap();
    let r = runs.path();
    let data = field(&gen(r, "2"), "run_dir");
    let lm_out = ok(r, &["train-lm", "--data", &data, "--order", "2"]);
    let prior = field(&lm_out, "prior");
    let ppl = ok(r, &["eval-lm", "--lm", &prior, "--data", &data]);
    assert!(ppl.starts_with("split,ppl\ndev,"));

    let mut sup_args = vec![
        "train-sup", "--data", &data, "--total_steps", "30", "--eval_period", "10",
        "--batch_size", "4", "--threshold_b", "2", "--threshold_c", "2", "--grad_clip", "5",
    ];
    sup_args.extend(TINY_MODEL);
    let sup = ok(r, &sup_args);
    let sup_dir = PathBuf::from(field(&sup, "run_dir"));
    let listed = files_in(&sup_dir);
    for f in ["theta_A.ckpt", "theta_B.ckpt", "theta_C.ckpt", "manifest.txt"] {
        assert!(listed.contains(&f.to_string()), "{listed:?}");
    }
    let manifest = std::fs::read_to_string(sup_dir.join("manifest.txt")).unwrap();
    for f in listed.iter().filter(|f| *f != "manifest.txt") {
        assert!(manifest.contains(f.as_str()), "{f} missing from manifest");
    }
    let sup_dir = sup_dir.to_str().unwrap();

    let semi = |objective: &str| {
        ok(r, &[
            "train-semi", "--data", &data, "--init", sup_dir, "--lm", &prior,
            "--objective", objective, "--k", "2", "--alpha", "0.2", "--mix", "1:4",
            "--strategy", "off_better", "--total_steps", "10", "--period", "5",
            "--batch_size", "4",
        ])
    };
    let lpm = semi("lpm");
    assert!(lpm.starts_with("step,phase,dev_wer,dev_cer,loss,skipped,proposal_updates,label_quality_wer,hyp_ppl\n10,eval,"));
    let semi_dir = PathBuf::from(field(&lpm, "run_dir"));
    let metrics: Vec<String> = files_in(&semi_dir).into_iter().filter(|f| f.starts_with("metrics-")).collect();
    assert_eq!(metrics.len(), 1);
    let name = semi_dir.file_name().unwrap().to_str().unwrap();
    assert_eq!(metrics[0], format!("metrics-{name}.csv"));
    let first = std::fs::read(semi_dir.join(&metrics[0])).unwrap();
    std::fs::remove_dir_all(&semi_dir).unwrap();
    semi("lpm");
    assert_eq!(std::fs::read(semi_dir.join(&metrics[0])).unwrap(), first);
    semi("kd");
    semi("pl");
    let tuned = ok(r, &[
        "train-semi", "--data", &data, "--init", sup_dir, "--lm", &prior,
        "--objective", "pl", "--fusion_weight", "auto", "--total_steps", "5",
        "--period", "5", "--batch_size", "4",
    ]);
    assert_eq!(tuned.lines().filter(|l| l.starts_with("fusion_grid\t")).count(), 7);
    let w: f64 = field(&tuned, "fusion_weight").parse().unwrap();
    assert!((0.0..=1.0).contains(&w));

    let ckpt = semi_dir.join("final.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let hyps = ok(r, &["decode", "--ckpt", ckpt, "--data", &data, "--split", "test"]);
    assert_eq!(hyps.lines().count(), 4);
    let beams = ok(r, &["dump-beam", "--ckpt", ckpt, "--data", &data, "--k", "3", "--limit", "2", "--lm", &prior]);
    for line in beams.lines() {
        assert_eq!(line.split('\t').count(), 5, "{line}");
    }
    let ev = ok(r, &["eval", "--ckpt", ckpt, "--data", &data, "--lm", &prior]);
    assert_eq!(ev.lines().count(), 2);
    assert!(ev.lines().nth(1).unwrap().split(',').nth(8).unwrap().parse::<f64>().unwrap() > 1.0);
}

#[test]
fn sweep_writes_one_metrics_file_per_cell() {
    let runs = tempfile::tempdir().unwrap();
    let r = runs.path();
    let data = field(&gen(r, "3"), "run_dir");
    let mut sup_args = vec![
        "train-sup", "--data", &data, "--total_steps", "10", "--eval_period", "5",
        "--batch_size", "4", "--threshold_b", "2", "--threshold_c", "2",
    ];
    sup_args.extend(TINY_MODEL);
    let sup_dir = field(&ok(r, &sup_args), "run_dir");
    let sweep = |extra: &[&str]| {
        let mut a = vec![
            "sweep", "--data", &data, "--init", &sup_dir, "--total_steps", "5",
            "--period", "5", "--batch_size", "2",
        ];
        a.extend(extra);
        ok(r, &a)
    };
    let out = sweep(&["--axis", "k=1,2,4,8"]);
    let cells: Vec<&str> = out.lines().skip(1).collect();
    assert_eq!(cells.len(), 4);
    let mut dirs = Vec::new();
    for cell in &cells {
        let dir = PathBuf::from(cell.rsplit(',').next().unwrap());
        let name = dir.file_name().unwrap().to_str().unwrap().to_string();
        assert!(dir.join(format!("metrics-{name}.csv")).is_file());
        dirs.push(dir);
    }
    dirs.sort();
    dirs.dedup();
    assert_eq!(dirs.len(), 4);

    let victim = &dirs[2];
    let name = victim.file_name().unwrap().to_str().unwrap();
    let before = std::fs::read(victim.join(format!("metrics-{name}.csv"))).unwrap();
    std::fs::remove_dir_all(victim).unwrap();
    sweep(&["--axis", "k=1,2,4,8"]);
    assert_eq!(std::fs::read(victim.join(format!("metrics-{name}.csv"))).unwrap(), before);
}

#[test]
fn oracle_check_passes() {
    let runs = tempfile::tempdir().unwrap();
    let out = ok(runs.path(), &["oracle-check", "--seeds", "3"]);
    assert_eq!(out.lines().count(), 2);
    assert!(out.lines().all(|l| l.starts_with("PASS")));
}
