//! On-disk formats: dataset directories, prior files, binary checkpoints,
//! metrics and beam dumps.

use anyhow::{anyhow, bail, ensure, Context, Result};
use lpmlab_core::decode::Beam;
use lpmlab_core::hash::hash_hex;
use lpmlab_core::ngram::{NGramLM, SmoothingParams};
use lpmlab_core::seq2seq::{Checkpoint, CheckpointTag, ModelConfig, ParamVector};
use crate::config::DataSettings;
use lpmlab_core::synth::DatasetBundle;
use lpmlab_core::trainer::{metrics_csv, MetricsRow};
use lpmlab_core::{LanguageModel, TokenId, TokenSeq, Utterance, Vocab};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

/// Writes `contents` to `path`, creating parent directories.
pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .with_context(|| format!("creating directory {}", parent.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

pub fn format_tokens(y: &TokenSeq, vocab: &Vocab) -> String {
    y.ids()
        .iter()
        .map(|&t| vocab.token(t).unwrap_or("?"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn parse_tokens(s: &str, vocab: &Vocab) -> Result<TokenSeq> {
    let ids = s
        .split_whitespace()
        .map(|tok| {
            vocab
                .id_of(tok)
                .ok_or_else(|| anyhow!("unknown token `{tok}`"))
        })
        .collect::<Result<Vec<TokenId>>>()?;
    Ok(TokenSeq::new(ids, vocab)?)
}

/// Token ids, space-separated.
pub fn format_ids(y: &TokenSeq) -> String {
    y.ids().iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
}

pub fn parse_ids(s: &str, vocab: &Vocab) -> Result<TokenSeq> {
    let ids = s
        .split_whitespace()
        .map(|t| t.parse::<TokenId>().with_context(|| format!("bad token id `{t}`")))
        .collect::<Result<Vec<_>>>()?;
    Ok(TokenSeq::new(ids, vocab)?)
}

/// A dataset directory loaded back into memory.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub bundle: DatasetBundle,
    pub vocab: Vocab,
    pub settings: DataSettings,
    /// Hash over every data file, as listed in the manifest.
    pub manifest_hash: String,
}

const SPLITS: [&str; 4] = ["paired", "unpaired_speech", "dev", "test"];

fn utterance_line(u: &Utterance) -> String {
    let frames = u.frames.iter().map(u32::to_string).collect::<Vec<_>>().join(" ");
    let gold = u.gold.as_ref().map(format_ids).unwrap_or_default();
    format!("{}\t{}\t{}\n", u.id, frames, gold)
}

fn split_of<'a>(bundle: &'a DatasetBundle, name: &str) -> &'a [Utterance] {
    match name {
        "paired" => &bundle.paired,
        "unpaired_speech" => &bundle.unpaired_speech,
        "dev" => &bundle.dev,
        _ => &bundle.test,
    }
}

/// Writes the dataset files plus `manifest.txt`; returns the manifest hash.
pub fn write_dataset(
    dir: &Path,
    bundle: &DatasetBundle,
    vocab: &Vocab,
    settings: &DataSettings,
) -> Result<String> {
    let mut files: Vec<(String, String)> = Vec::new();
    let mut vocab_txt = String::new();
    for t in vocab.tokens() {
        vocab_txt.push_str(t);
        vocab_txt.push('\n');
    }
    files.push(("vocab.txt".into(), vocab_txt));
    let mut conf = String::new();
    for (k, v) in settings.pairs() {
        writeln!(conf, "{k} = {v}")?;
    }
    writeln!(conf, "eos_id = {}", vocab.eos_id())?;
    files.push(("dataset.conf".into(), conf));
    for name in SPLITS {
        let body: String = split_of(bundle, name).iter().map(utterance_line).collect();
        files.push((format!("{name}.tsv"), body));
    }
    let sealed: String = bundle
        .unpaired_speech
        .iter()
        .zip(bundle.sealed_gold())
        .map(|(u, g)| format!("{}\t{}\n", u.id, format_ids(g)))
        .collect();
    files.push(("unpaired_speech.gold".into(), sealed));
    let text: String = bundle
        .unpaired_text
        .iter()
        .map(|y| format!("{}\n", format_ids(y)))
        .collect();
    files.push(("unpaired_text.txt".into(), text));

    let mut manifest = String::new();
    for (name, body) in &files {
        write_file(&dir.join(name), body)?;
        writeln!(manifest, "{}\t{}", name, hash_hex(body.as_bytes()))?;
    }
    let hash = hash_hex(manifest.as_bytes());
    write_file(&dir.join("manifest.txt"), format!("{manifest}dataset\t{hash}\n"))?;
    Ok(hash)
}

fn parse_conf(text: &str) -> Result<BTreeMap<String, String>> {
    Ok(crate::config::parse_key_values(text)?.into_iter().collect())
}

fn read_utterances(path: &Path, vocab: &Vocab, obs: usize) -> Result<Vec<Utterance>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let ctx = || format!("{}:{}", path.display(), n + 1);
        let mut cols = line.split('\t');
        let (id, frames, gold) = match (cols.next(), cols.next(), cols.next(), cols.next()) {
            (Some(i), Some(f), Some(g), None) => (i, f, g),
            _ => bail!("{}: expected `id<TAB>frames<TAB>gold`", ctx()),
        };
        let frames = frames
            .split_whitespace()
            .map(|f| f.parse::<u32>().with_context(ctx))
            .collect::<Result<Vec<_>>>()?;
        let gold = if gold.trim().is_empty() {
            None
        } else {
            Some(parse_ids(gold, vocab).with_context(ctx)?)
        };
        let u = Utterance::new(id, frames, gold).with_context(ctx)?;
        u.check_alphabet(obs).with_context(ctx)?;
        out.push(u);
    }
    Ok(out)
}

/// Loads a dataset directory, verifying every file against the manifest.
pub fn read_dataset(dir: &Path) -> Result<LoadedDataset> {
    let manifest = read_text(&dir.join("manifest.txt"))?;
    let mut body = String::new();
    let mut recorded = None;
    for line in manifest.lines() {
        let (name, hash) = line
            .split_once('\t')
            .ok_or_else(|| anyhow!("malformed manifest line `{line}`"))?;
        if name == "dataset" {
            recorded = Some(hash.to_string());
            continue;
        }
        let contents = fs::read(dir.join(name)).with_context(|| format!("reading {name}"))?;
        ensure!(
            hash_hex(&contents) == hash,
            "{name} does not match the manifest hash"
        );
        writeln!(body, "{name}\t{hash}")?;
    }
    let manifest_hash = hash_hex(body.as_bytes());
    ensure!(
        recorded.as_deref() == Some(manifest_hash.as_str()),
        "manifest.txt is inconsistent"
    );

    let mut settings = DataSettings::default();
    let mut eos = None;
    for (k, v) in crate::config::parse_key_values(&read_text(&dir.join("dataset.conf"))?)? {
        if k == "eos_id" {
            eos = Some(v.parse::<TokenId>().context("dataset.conf `eos_id`")?);
        } else if !settings.set(&k, &v)? {
            bail!("dataset.conf: unknown key `{k}`");
        }
    }
    let eos = eos.ok_or_else(|| anyhow!("dataset.conf lacks `eos_id`"))?;
    let tokens: Vec<String> = read_text(&dir.join("vocab.txt"))?.lines().map(String::from).collect();
    let vocab = Vocab::new(tokens, eos)?;
    let obs = settings.generator.channel.obs_alphabet_size;
    let paired = read_utterances(&dir.join("paired.tsv"), &vocab, obs)?;
    let unpaired = read_utterances(&dir.join("unpaired_speech.tsv"), &vocab, obs)?;
    let dev = read_utterances(&dir.join("dev.tsv"), &vocab, obs)?;
    let test = read_utterances(&dir.join("test.tsv"), &vocab, obs)?;
    let mut sealed_by_id = BTreeMap::new();
    for line in read_text(&dir.join("unpaired_speech.gold"))?.lines() {
        let (id, toks) = line
            .split_once('\t')
            .ok_or_else(|| anyhow!("malformed gold line `{line}`"))?;
        sealed_by_id.insert(id.to_string(), parse_ids(toks, &vocab)?);
    }
    let sealed = unpaired
        .iter()
        .map(|u| {
            sealed_by_id
                .remove(&u.id)
                .ok_or_else(|| anyhow!("no sealed transcript for `{}`", u.id))
        })
        .collect::<Result<Vec<_>>>()?;
    let text = read_text(&dir.join("unpaired_text.txt"))?
        .lines()
        .map(|l| parse_ids(l, &vocab))
        .collect::<Result<Vec<_>>>()?;
    let bundle = DatasetBundle::new(paired, unpaired, sealed, text, dev, test)?;
    Ok(LoadedDataset {
        bundle,
        vocab,
        settings,
        manifest_hash,
    })
}

const LM_MAGIC: &str = "LPMLM1";

/// Text serialization of an n-gram prior: a header followed by one
/// `context<TAB>token<TAB>count` line per stored count.
pub fn lm_to_string(lm: &NGramLM) -> String {
    let vocab = lm.vocab();
    let s = lm.smoothing();
    let mut out = String::new();
    let _ = writeln!(out, "{LM_MAGIC}");
    let _ = writeln!(out, "order {}", lm.order());
    let _ = writeln!(out, "add_k {:?}", s.add_k);
    let weights: Vec<String> = s.weights.iter().map(|w| format!("{w:?}")).collect();
    let _ = writeln!(out, "weights {}", weights.join(" "));
    let _ = writeln!(out, "eos {}", vocab.eos_id());
    let _ = writeln!(out, "vocab {}", vocab.tokens().join(" "));
    for (ctx, tok, count) in lm.count_triples() {
        let ctx = if ctx.is_empty() {
            "-".to_string()
        } else {
            ctx.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
        };
        let _ = writeln!(out, "{ctx}\t{tok}\t{count}");
    }
    out
}

pub fn lm_from_str(text: &str) -> Result<NGramLM> {
    let mut lines = text.lines();
    ensure!(lines.next() == Some(LM_MAGIC), "not a prior file (missing {LM_MAGIC} header)");
    let mut header = BTreeMap::new();
    for key in ["order", "add_k", "weights", "eos", "vocab"] {
        let line = lines.next().ok_or_else(|| anyhow!("prior file truncated in header"))?;
        let (k, v) = line.split_once(' ').unwrap_or((line, ""));
        ensure!(k == key, "expected `{key}` in prior header, found `{k}`");
        header.insert(key, v.to_string());
    }
    let order: usize = header["order"].parse().context("order")?;
    let add_k: f64 = header["add_k"].parse().context("add_k")?;
    let weights = header["weights"]
        .split_whitespace()
        .map(|w| w.parse::<f64>().context("weights"))
        .collect::<Result<Vec<_>>>()?;
    let eos: TokenId = header["eos"].parse().context("eos")?;
    let vocab = Vocab::new(header["vocab"].split_whitespace().map(String::from).collect(), eos)?;
    let mut triples = Vec::new();
    for line in lines {
        let mut cols = line.split('\t');
        let (ctx, tok, count) = match (cols.next(), cols.next(), cols.next()) {
            (Some(c), Some(t), Some(n)) => (c, t, n),
            _ => bail!("malformed count line `{line}`"),
        };
        let ctx = if ctx == "-" {
            Vec::new()
        } else {
            ctx.split(' ')
                .map(|c| c.parse::<TokenId>().context("context id"))
                .collect::<Result<Vec<_>>>()?
        };
        triples.push((ctx, tok.parse().context("token id")?, count.parse().context("count")?));
    }
    Ok(NGramLM::from_counts(vocab, order, SmoothingParams { add_k, weights }, triples)?)
}

pub fn write_lm(path: &Path, lm: &NGramLM) -> Result<()> {
    write_file(path, lm_to_string(lm))
}

pub fn read_lm(path: &Path) -> Result<NGramLM> {
    lm_from_str(&read_text(path)?).with_context(|| format!("loading prior {}", path.display()))
}

const CKPT_MAGIC: &[u8; 8] = b"LPMCKPT1";

fn model_header(cfg: &ModelConfig) -> String {
    format!(
        "embed_dim = {}\nencoder_hidden = {}\ndecoder_hidden = {}\nattention_dim = {}\nobs_alphabet_size = {}\nlabel_smoothing = {:?}\neos_id = {}\nvocab = {}\n",
        cfg.embed_dim,
        cfg.encoder_hidden,
        cfg.decoder_hidden,
        cfg.attention_dim,
        cfg.obs_alphabet_size,
        cfg.label_smoothing,
        cfg.vocab.eos_id(),
        cfg.vocab.tokens().join(" "),
    )
}

/// Binary checkpoint: magic, a length-prefixed `key = value` header, then
/// every tensor as name, shape and little-endian f64 values.
pub fn checkpoint_to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let cfg = ckpt.params.config();
    let header = format!(
        "step = {}\ndev_cer = {:?}\ntag = {}\nconfig_hash = {}\n{}",
        ckpt.step,
        ckpt.dev_cer,
        ckpt.tag.map_or("-", |t| t.as_str()),
        ckpt.config_hash,
        model_header(cfg)
    );
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    let tensors = ckpt.params.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, shape, values) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(shape.len() as u8);
        for d in &shape {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        ensure!(self.pos + n <= self.buf.len(), "checkpoint truncated");
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into()?))
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    ensure!(r.take(8)? == CKPT_MAGIC, "not a checkpoint (bad magic)");
    let hlen = r.u32()? as usize;
    let header = std::str::from_utf8(r.take(hlen)?).context("checkpoint header is not UTF-8")?;
    let kv: BTreeMap<String, String> = parse_conf(header)?;
    let get = |k: &str| kv.get(k).ok_or_else(|| anyhow!("checkpoint header lacks `{k}`"));
    let num = |k: &str| -> Result<usize> { get(k)?.parse::<usize>().with_context(|| k.to_string()) };
    let vocab = Vocab::new(
        get("vocab")?.split_whitespace().map(String::from).collect(),
        num("eos_id")? as TokenId,
    )?;
    let cfg = ModelConfig {
        embed_dim: num("embed_dim")?,
        encoder_hidden: num("encoder_hidden")?,
        decoder_hidden: num("decoder_hidden")?,
        attention_dim: num("attention_dim")?,
        vocab,
        obs_alphabet_size: num("obs_alphabet_size")?,
        label_smoothing: get("label_smoothing")?.parse().context("label_smoothing")?,
    };
    let n = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).context("tensor name")?;
        let ndim = r.u8()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let values = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        tensors.push((name, shape, values));
    }
    ensure!(r.pos == bytes.len(), "trailing bytes after checkpoint tensors");
    let params = ParamVector::from_tensors(&cfg, tensors)?;
    let tag = match get("tag")?.as_str() {
        "-" => None,
        t => Some(CheckpointTag::parse(t).ok_or_else(|| anyhow!("bad checkpoint tag `{t}`"))?),
    };
    let ckpt = Checkpoint {
        params,
        step: get("step")?.parse().context("step")?,
        dev_cer: get("dev_cer")?.parse().context("dev_cer")?,
        config_hash: get("config_hash")?.clone(),
        tag,
    };
    ensure!(
        ckpt.config_hash == cfg.hash(),
        "checkpoint config hash does not match its model header"
    );
    Ok(ckpt)
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_file(path, checkpoint_to_bytes(ckpt))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    checkpoint_from_bytes(&bytes).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Conventional file name for a tagged checkpoint inside a run directory.
pub fn checkpoint_path(run_dir: &Path, tag: CheckpointTag) -> PathBuf {
    run_dir.join(format!("theta_{}.ckpt", tag.as_str()))
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    write_file(path, metrics_csv(rows))
}

/// `utt_id<TAB>rank<TAB>asr_logp<TAB>lm_logp<TAB>tokens` per hypothesis.
pub fn beam_dump_lines(utt_id: &str, beam: &Beam, vocab: &Vocab) -> String {
    let mut out = String::new();
    for (rank, h) in beam.hyps.iter().enumerate() {
        let lm = h.lm_logp.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            out,
            "{}\t{}\t{:.6}\t{}\t{}",
            utt_id,
            rank + 1,
            h.asr_logp,
            lm,
            format_tokens(&h.tokens, vocab)
        );
    }
    out
}
