//! Subcommand dispatch.

use crate::config::{self, DataSettings, LmSettings};
use crate::formats::{self, LoadedDataset};
use crate::oracle;
use crate::pipeline;
use crate::run::{self, RunManifest};
use crate::UsageError;
use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use lpmlab_core::decode::{beam_search, default_max_steps, greedy_decode, Fusion};
use lpmlab_core::eval::{greedy_hypotheses, hypothesis_ppl, tune_fusion_weight};
use lpmlab_core::hash::hash_hex;
use lpmlab_core::ngram::{token_perplexity, NGramLM};
use lpmlab_core::seq2seq::{Checkpoint, CheckpointTag};
use lpmlab_core::trainer::{ExperimentConfig, MetricsRow, METRICS_HEADER};
use lpmlab_core::{TokenSeq, Utterance};
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "lpmlab", about = "Semi-supervised sequence transduction with a local prior")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Settings are passed as `--key value` pairs after the subcommand, on top of
/// an optional `--config FILE`.
#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a synthetic corpus into a run directory.
    GenData(Settings),
    /// Fit the n-gram prior on the unpaired text of a dataset.
    TrainLm(Settings),
    /// Token perplexity of a prior on the dev and test transcripts.
    EvalLm(Settings),
    /// Supervised baseline; writes the A, B and C checkpoints.
    TrainSup(Settings),
    /// Semi-supervised training (`--objective lpm|kd|pl`).
    TrainSemi(Settings),
    /// Decode a split with a checkpoint.
    Decode(Settings),
    /// Print the beam of each utterance.
    DumpBeam(Settings),
    /// Greedy WER/CER (and hypothesis perplexity with `--lm`) of a checkpoint.
    Eval(Settings),
    /// Brute-force checks of the local prior and beam search.
    OracleCheck(Settings),
    /// Grid of semi-supervised runs (`--axis key=v1,v2,...`, repeatable).
    Sweep(Settings),
}

#[derive(clap::Args, Debug)]
struct Settings {
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    args: Vec<String>,
}

/// Runs the command line and maps failures to exit statuses: 2 for usage
/// errors, 1 for everything else.
pub fn main_with<I, T>(argv: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("usage error: {e}");
            eprintln!("run `lpmlab help` for the list of subcommands");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    let out = &mut std::io::stdout().lock();
    match cmd {
        Command::GenData(s) => gen_data(Opts::parse(&s.args)?, out),
        Command::TrainLm(s) => train_lm(Opts::parse(&s.args)?, out),
        Command::EvalLm(s) => eval_lm(Opts::parse(&s.args)?, out),
        Command::TrainSup(s) => train_sup(Opts::parse(&s.args)?, out),
        Command::TrainSemi(s) => train_semi(Opts::parse(&s.args)?, out),
        Command::Decode(s) => decode(Opts::parse(&s.args)?, out, false),
        Command::DumpBeam(s) => decode(Opts::parse(&s.args)?, out, true),
        Command::Eval(s) => eval(Opts::parse(&s.args)?, out),
        Command::OracleCheck(s) => oracle_check(Opts::parse(&s.args)?, out),
        Command::Sweep(s) => sweep(Opts::parse(&s.args)?, out),
    }
}

/// Merged settings of one invocation. Path-like options are pulled out; the
/// rest are handed to the setting owners.
struct Opts {
    pairs: Vec<(String, String)>,
}

impl Opts {
    fn parse(args: &[String]) -> Result<Self> {
        let cli = config::parse_overrides(args)?;
        let file = cli
            .iter()
            .rev()
            .find(|(k, _)| k == "config")
            .map(|(_, v)| PathBuf::from(v));
        let mut pairs = match file {
            Some(p) => config::read_config_file(&p)?,
            None => Vec::new(),
        };
        pairs.extend(cli.into_iter().filter(|(k, _)| k != "config"));
        Ok(Opts { pairs })
    }

    /// Removes every occurrence of `key`, returning the last value.
    fn take(&mut self, key: &str) -> Option<String> {
        let mut found = None;
        self.pairs.retain(|(k, v)| {
            if k == key {
                found = Some(v.clone());
                false
            } else {
                true
            }
        });
        found
    }

    fn take_all(&mut self, key: &str) -> Vec<String> {
        let mut found = Vec::new();
        self.pairs.retain(|(k, v)| {
            if k == key {
                found.push(v.clone());
                false
            } else {
                true
            }
        });
        found
    }

    fn require(&mut self, key: &str) -> Result<String> {
        self.take(key)
            .ok_or_else(|| UsageError(format!("missing required option `--{key}`")).into())
    }

    fn take_parsed<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| UsageError(format!("`--{key}` got unparsable value `{v}`")).into()),
        }
    }
}

/// Accepts either a dataset directory or a `gen-data` run directory.
fn resolve_data_dir(p: &Path) -> PathBuf {
    let nested = p.join("data");
    if nested.join("manifest.txt").is_file() {
        nested
    } else {
        p.to_path_buf()
    }
}

fn load_data(opts: &mut Opts) -> Result<LoadedDataset> {
    let dir = resolve_data_dir(Path::new(&opts.require("data")?));
    formats::read_dataset(&dir).with_context(|| format!("synth: loading dataset {}", dir.display()))
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(hash_hex(&std::fs::read(path).with_context(|| format!("reading {}", path.display()))?))
}

/// Hash of the command name, its canonical settings and its input hashes.
fn config_hash(command: &str, pairs: &[(String, String)], inputs: &[String]) -> String {
    let mut text = format!("command={command}\n");
    text.push_str(&config::canonical(pairs));
    for i in inputs {
        text.push_str(&format!("input={i}\n"));
    }
    hash_hex(text.as_bytes())
}

/// Output directory: `--out` if given, else `<runs root>/<hash>-<seed>`.
fn output_dir(out: Option<String>, hash: &str, seed: u64) -> PathBuf {
    out.map(PathBuf::from)
        .unwrap_or_else(|| run::run_dir(&run::runs_root(), hash, seed))
}

fn finish_run(
    dir: &Path,
    command: &str,
    config_hash: &str,
    data_hash: &str,
    seed: u64,
    artifacts: Vec<String>,
    started: u64,
) -> Result<()> {
    RunManifest {
        command: command.to_string(),
        config_hash: config_hash.to_string(),
        data_hash: data_hash.to_string(),
        seed,
        artifacts,
        started,
        finished: run::unix_time(),
    }
    .write(dir)
}

fn metrics_name(hash: &str, seed: u64) -> String {
    format!("metrics-{hash}-{seed}.csv")
}

fn gen_data(mut opts: Opts, out: &mut dyn Write) -> Result<()> {
    let started = run::unix_time();
    let dir = opts.take("out");
    let mut settings = DataSettings::default();
    config::apply(&opts.pairs, |k, v| settings.set(k, v))?;
    let pairs = settings.pairs();
    let hash = config_hash("gen-data", &pairs, &[]);
    let dir = output_dir(dir, &hash, settings.seed);
    let g = pipeline::generate(&settings)?;
    let data_hash = formats::write_dataset(&dir.join("data"), &g.bundle, &g.vocab, &settings)?;
    let mut artifacts: Vec<String> = std::fs::read_dir(dir.join("data"))?
        .map(|e| e.map(|e| format!("data/{}", e.file_name().to_string_lossy())))
        .collect::<std::io::Result<_>>()?;
    artifacts.sort();
    finish_run(&dir, "gen-data", &hash, &data_hash, settings.seed, artifacts, started)?;
    writeln!(out, "run_dir\t{}", dir.display())?;
    writeln!(out, "data_hash\t{data_hash}")?;
    Ok(())
}

fn train_lm(mut opts: Opts, out: &mut dyn Write) -> Result<()> {
    let started = run::unix_time();
    let dir = opts.take("out");
    let data = load_data(&mut opts)?;
    let mut settings = LmSettings::default();
    config::apply(&opts.pairs, |k, v| settings.set(k, v))?;
    let pairs = vec![
        ("order".to_string(), settings.order.to_string()),
        ("fraction".to_string(), format!("{:?}", settings.fraction)),
        ("add_k".to_string(), format!("{:?}", settings.add_k)),
    ];
    let hash = config_hash("train-lm", &pairs, std::slice::from_ref(&data.manifest_hash));
    let dir = output_dir(dir, &hash, data.settings.seed);
    let lm = pipeline::train_prior(&data.bundle, &data.vocab, &settings)?;
    formats::write_lm(&dir.join("prior.lm"), &lm)?;
    finish_run(&dir, "train-lm", &hash, &data.manifest_hash, data.settings.seed, vec!["prior.lm".into()], started)?;
    writeln!(out, "run_dir\t{}", dir.display())?;
    writeln!(out, "prior\t{}", dir.join("prior.lm").display())?;
    writeln!(out, "dev_ppl\t{:.6}", gold_ppl(&lm, &data.bundle.dev))?;
    Ok(())
}

fn golds(utts: &[Utterance]) -> Vec<TokenSeq> {
    utts.iter().filter_map(|u| u.gold.clone()).collect()
}

fn gold_ppl(lm: &NGramLM, utts: &[Utterance]) -> f64 {
    token_perplexity(lm, &golds(utts))
}

fn eval_lm(mut opts: Opts, out: &mut dyn Write) -> Result<()> {
    let lm = formats::read_lm(Path::new(&opts.require("lm")?))?;
    let data = load_data(&mut opts)?;
    config::apply(&opts.pairs, |_, _| Ok(false))?;
    writeln!(out, "split,ppl")?;
    writeln!(out, "dev,{:.6}", gold_ppl(&lm, &data.bundle.dev))?;
    writeln!(out, "test,{:.6}", gold_ppl(&lm, &data.bundle.test))?;
    Ok(())
}

fn train_sup(mut opts: Opts, out: &mut dyn Write) -> Result<()> {
    let started = run::unix_time();
    let dir = opts.take("out");
    let topline = match opts.take("topline").as_deref() {
        None | Some("false") => false,
        Some("true") => true,
        Some(v) => return Err(UsageError(format!("`--topline` expects true|false, got `{v}`")).into()),
    };
    let data = load_data(&mut opts)?;
    let mut model = pipeline::default_model(&data.vocab, data.settings.generator.channel.obs_alphabet_size);
    let sup = config::supervised_settings(&opts.pairs, &mut model)?;
    let mut pairs = sup.pairs();
    pairs.push(("model".into(), model.canonical()));
    pairs.push(("topline".into(), topline.to_string()));
    let hash = config_hash("train-sup", &pairs, std::slice::from_ref(&data.manifest_hash));
    let seed = sup.optim.seed;
    let dir = output_dir(dir, &hash, seed);
    let bundle = if topline {
        pipeline::topline_bundle(&data.bundle)?
    } else {
        data.bundle.clone()
    };
    let outcome = pipeline::supervised(&model, &sup, &bundle)?;
    let mut artifacts = Vec::new();
    for c in &outcome.checkpoints {
        let tag = c.tag.expect("tagged");
        let path = formats::checkpoint_path(&dir, tag);
        formats::write_checkpoint(&path, c)?;
        artifacts.push(path.file_name().unwrap().to_string_lossy().into_owned());
        writeln!(out, "checkpoint\t{}\tstep {}\tdev_cer {:.6}", tag.as_str(), c.step, c.dev_cer)?;
    }
    let metrics = metrics_name(&hash, seed);
    formats::write_metrics(&dir.join(&metrics), &outcome.metrics)?;
    artifacts.push(metrics);
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    finish_run(&dir, "train-sup", &hash, &data.manifest_hash, seed, artifacts, started)?;
    writeln!(out, "run_dir\t{}", dir.display())?;
    Ok(())
}

fn load_init(dir: &Path) -> Result<(Vec<Checkpoint>, Vec<String>)> {
    let mut ckpts = Vec::new();
    let mut hashes = Vec::new();
    for tag in [CheckpointTag::A, CheckpointTag::B, CheckpointTag::C] {
        let path = formats::checkpoint_path(dir, tag);
        if path.is_file() {
            hashes.push(file_hash(&path)?);
            ckpts.push(formats::read_checkpoint(&path)?);
        }
    }
    if ckpts.is_empty() {
        bail!("trainer: no theta_A/B/C checkpoints in {}", dir.display());
    }
    Ok((ckpts, hashes))
}

/// Prior given by `--lm`, else trained from the dataset with the
/// experiment's order and fraction.
fn load_or_train_prior(lm: Option<String>, data: &LoadedDataset, cfg: &ExperimentConfig) -> Result<(NGramLM, String)> {
    match lm {
        Some(p) => {
            let p = PathBuf::from(p);
            Ok((formats::read_lm(&p)?, file_hash(&p)?))
        }
        None => {
            let s = LmSettings {
                order: cfg.lm_order,
                fraction: cfg.lm_fraction,
                add_k: None,
            };
            let lm = pipeline::train_prior(&data.bundle, &data.vocab, &s)?;
            let h = hash_hex(formats::lm_to_string(&lm).as_bytes());
            Ok((lm, h))
        }
    }
}

struct SemiInputs {
    data: LoadedDataset,
    checkpoints: Vec<Checkpoint>,
    init_hashes: Vec<String>,
    lm_arg: Option<String>,
}

fn semi_inputs(opts: &mut Opts) -> Result<SemiInputs> {
    let data = load_data(opts)?;
    let init = PathBuf::from(opts.require("init")?);
    let (checkpoints, init_hashes) = load_init(&init)?;
    Ok(SemiInputs {
        data,
        checkpoints,
        init_hashes,
        lm_arg: opts.take("lm"),
    })
}

/// One semi-supervised run into its own directory; returns the directory and
/// the final metrics row.
fn run_semi_cell(
    inputs: &SemiInputs,
    cfg: &ExperimentConfig,
    dir: Option<String>,
    command: &str,
) -> Result<(PathBuf, String, MetricsRow)> {
    let started = run::unix_time();
    let (lm, lm_hash) = load_or_train_prior(inputs.lm_arg.clone(), &inputs.data, cfg)?;
    let mut in_hashes = vec![inputs.data.manifest_hash.clone(), lm_hash];
    in_hashes.extend(inputs.init_hashes.iter().cloned());
    let hash = config_hash("train-semi", &cfg.pairs(), &in_hashes);
    let seed = cfg.optim.seed;
    let dir = output_dir(dir, &hash, seed);
    let outcome = pipeline::semi(cfg, &inputs.data.bundle, &lm, &inputs.checkpoints)?;
    formats::write_checkpoint(&dir.join("final.ckpt"), &outcome.final_checkpoint)?;
    let proposal = Checkpoint::new(outcome.final_proposal.clone(), outcome.final_checkpoint.step, f64::NAN, None);
    formats::write_checkpoint(&dir.join("proposal.ckpt"), &proposal)?;
    let history: String = outcome
        .proposal_history
        .iter()
        .map(|e| format!("{}\t{:?}\n", e.step, e.dev_cer))
        .collect();
    formats::write_file(&dir.join("proposal_history.tsv"), history)?;
    let metrics = metrics_name(&hash, seed);
    formats::write_metrics(&dir.join(&metrics), &outcome.metrics)?;
    let artifacts = vec![
        "final.ckpt".into(),
        "proposal.ckpt".into(),
        "proposal_history.tsv".into(),
        metrics,
    ];
    finish_run(&dir, command, &hash, &inputs.data.manifest_hash, seed, artifacts, started)?;
    let last = outcome
        .metrics
        .last()
        .cloned()
        .ok_or_else(|| anyhow!("trainer: run produced no metrics"))?;
    Ok((dir, hash, last))
}

/// Grid searched by `--fusion_weight auto`.
const FUSION_GRID: [f64; 7] = [0.0, 0.1, 0.2, 0.3, 0.5, 0.75, 1.0];

/// Replaces `fusion_weight = auto` by the grid weight with the lowest fused
/// dev error of the initial proposal model.
fn resolve_fusion_weight(pairs: &mut [(String, String)], inputs: &SemiInputs, out: &mut dyn Write) -> Result<()> {
    let is_auto = |k: &str, v: &str| (k == "fusion_weight" || k == "lambda") && v == "auto";
    if !pairs.iter().any(|(k, v)| is_auto(k, v)) {
        return Ok(());
    }
    let rest: Vec<(String, String)> = pairs.iter().filter(|(k, v)| !is_auto(k, v)).cloned().collect();
    let cfg = config::experiment_settings(&rest)?;
    let (lm, _) = load_or_train_prior(inputs.lm_arg.clone(), &inputs.data, &cfg)?;
    let proposal = pipeline::tagged(&inputs.checkpoints, cfg.init_r)?;
    let (best, rates) = tune_fusion_weight(&proposal.params, &inputs.data.bundle.dev, &lm, cfg.k, &FUSION_GRID)?;
    for (w, r) in rates {
        writeln!(out, "fusion_grid\t{w:?}\t{r:.6}")?;
    }
    writeln!(out, "fusion_weight\t{best:?}")?;
    for (k, v) in pairs.iter_mut() {
        if is_auto(k, v) {
            *v = format!("{best:?}");
        }
    }
    Ok(())
}

fn train_semi(mut opts: Opts, out: &mut dyn Write) -> Result<()> {
    let dir = opts.take("out");
    let inputs = semi_inputs(&mut opts)?;
    resolve_fusion_weight(&mut opts.pairs, &inputs, out)?;
    let cfg = config::experiment_settings(&opts.pairs)?;
    let (dir, _, last) = run_semi_cell(&inputs, &cfg, dir, "train-semi")?;
    writeln!(out, "{METRICS_HEADER}")?;
    writeln!(out, "{}", last.to_csv())?;
    writeln!(out, "run_dir\t{}", dir.display())?;
    Ok(())
}

fn split<'a>(data: &'a LoadedDataset, name: &str) -> Result<&'a [Utterance]> {
    let b = &data.bundle;
    Ok(match name {
        "paired" => &b.paired,
        "unpaired_speech" => &b.unpaired_speech,
        "dev" => &b.dev,
        "test" => &b.test,
        _ => return Err(UsageError(format!("unknown split `{name}`")).into()),
    })
}

fn decode(mut opts: Opts, out: &mut dyn Write, dump: bool) -> Result<()> {
    let ckpt = formats::read_checkpoint(Path::new(&opts.require("ckpt")?))?;
    let data = load_data(&mut opts)?;
    let split_name = opts.take("split").unwrap_or_else(|| "dev".into());
    let k: usize = opts.take_parsed("k")?.unwrap_or(if dump { 4 } else { 1 });
    let limit: Option<usize> = opts.take_parsed("limit")?;
    let max_steps: Option<usize> = opts.take_parsed("max_steps")?;
    let weight: f64 = opts.take_parsed("fusion_weight")?.unwrap_or(0.5);
    let lm = opts.take("lm").map(|p| formats::read_lm(Path::new(&p))).transpose()?;
    config::apply(&opts.pairs, |_, _| Ok(false))?;
    if k == 0 {
        return Err(UsageError("`--k` must be at least 1".into()).into());
    }
    let fusion = lm.as_ref().map(|lm| Fusion {
        lm,
        weight,
    });
    let utts = split(&data, &split_name)?;
    let n = limit.unwrap_or(utts.len()).min(utts.len());
    for x in &utts[..n] {
        let steps = max_steps.unwrap_or_else(|| default_max_steps(x));
        if dump {
            let beam = beam_search(&ckpt.params, x, k, steps, fusion)?;
            out.write_all(formats::beam_dump_lines(&x.id, &beam, &data.vocab).as_bytes())?;
        } else {
            let best = if k == 1 && fusion.is_none() {
                greedy_decode(&ckpt.params, x, steps)?.tokens
            } else {
                beam_search(&ckpt.params, x, k, steps, fusion)?
                    .best()
                    .map(|h| h.tokens.clone())
                    .ok_or_else(|| anyhow!("decode: empty beam for `{}`", x.id))?
            };
            let words: Vec<&str> = best.content().iter().map(|&t| data.vocab.token(t).unwrap_or("?")).collect();
            writeln!(out, "{}\t{}", x.id, words.join(" "))?;
        }
    }
    Ok(())
}

fn eval(mut opts: Opts, out: &mut dyn Write) -> Result<()> {
    let ckpt = formats::read_checkpoint(Path::new(&opts.require("ckpt")?))?;
    let data = load_data(&mut opts)?;
    let split_name = opts.take("split").unwrap_or_else(|| "dev".into());
    let lm = opts.take("lm").map(|p| formats::read_lm(Path::new(&p))).transpose()?;
    config::apply(&opts.pairs, |_, _| Ok(false))?;
    let utts = split(&data, &split_name)?;
    let utts: Vec<Utterance> = if split_name == "unpaired_speech" {
        data.bundle.unpaired_with_gold()
    } else {
        utts.to_vec()
    };
    let hyps = greedy_hypotheses(&ckpt.params, &utts, None)?;
    let gold = utts
        .iter()
        .map(|u| u.gold.as_ref().map(|g| g.content()).ok_or_else(|| anyhow!("eval: `{}` has no transcript", u.id)))
        .collect::<Result<Vec<_>>>()?;
    let counts = lpmlab_core::eval::corpus_error_counts(gold.into_iter().zip(hyps.iter().map(|h| h.content())))?;
    let ppl = match &lm {
        Some(lm) => Some(hypothesis_ppl(lm, &ckpt.params, &utts, None)?),
        None => None,
    };
    let row = MetricsRow {
        step: ckpt.step,
        phase: "eval",
        dev_wer: counts.rate(),
        dev_cer: counts.rate(),
        loss: 0.0,
        skipped: 0,
        proposal_updates: 0,
        label_quality_wer: None,
        hyp_ppl: ppl,
    };
    writeln!(out, "{METRICS_HEADER}")?;
    writeln!(out, "{}", row.to_csv())?;
    Ok(())
}

fn oracle_check(mut opts: Opts, out: &mut dyn Write) -> Result<()> {
    let seeds: u64 = opts.take_parsed("seeds")?.unwrap_or(5);
    config::apply(&opts.pairs, |_, _| Ok(false))?;
    let results = oracle::run_suite(seeds)?;
    let mut failed = Vec::new();
    for r in &results {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        writeln!(out, "{verdict}\t{}\tmax_abs_error {:.3e}\ttolerance {:.0e}", r.name, r.max_abs_error, r.tolerance)?;
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    if !failed.is_empty() {
        bail!("objectives: oracle check failed: {}", failed.join(", "));
    }
    Ok(())
}

/// Cartesian product of `key=v1,v2,...` axes, in argument order.
fn grid(axes: &[String]) -> Result<Vec<Vec<(String, String)>>> {
    let mut cells = vec![Vec::new()];
    for axis in axes {
        let (key, values) = axis
            .split_once('=')
            .ok_or_else(|| UsageError(format!("`--axis` expects key=v1,v2,..., got `{axis}`")))?;
        let values: Vec<&str> = values.split(',').filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(UsageError(format!("axis `{key}` has no values")).into());
        }
        cells = cells
            .into_iter()
            .flat_map(|c: Vec<(String, String)>| {
                values.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push((key.to_string(), v.to_string()));
                    c
                })
            })
            .collect();
    }
    Ok(cells)
}

fn sweep(mut opts: Opts, out: &mut dyn Write) -> Result<()> {
    let axes = opts.take_all("axis");
    if axes.is_empty() {
        return Err(UsageError("sweep needs at least one `--axis key=v1,v2,...`".into()).into());
    }
    let cells = grid(&axes)?;
    let inputs = semi_inputs(&mut opts)?;
    resolve_fusion_weight(&mut opts.pairs, &inputs, &mut std::io::sink())?;
    let base = opts.pairs.clone();
    writeln!(out, "cell,{METRICS_HEADER},run_dir")?;
    for cell in cells {
        let mut pairs = base.clone();
        pairs.extend(cell.iter().cloned());
        let cfg = config::experiment_settings(&pairs)?;
        let label: Vec<String> = cell.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let (dir, _, last) = run_semi_cell(&inputs, &cfg, None, "sweep")?;
        writeln!(out, "{},{},{}", label.join(" "), last.to_csv(), dir.display())?;
    }
    Ok(())
}
