use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;

use emotag_core::augment::{gate_weak_samples, oversample_balance, read_votes_csv, read_weak_csv};
use emotag_core::corpus::{
    encode, fit_tokenizer, label_counts, load_dataset, normalize_text, top_k_words, EncodedDataset,
    LabelVocabulary, Sample, Split, TokenizerState,
};
use emotag_core::embeddings::{build_matrix, load_vec, EmbeddingMatrix};
use emotag_core::evaluate::{
    evaluate, rank_sentence_labels, read_predictions_csv, read_thresholds_csv, render_f1_svg, tune_thresholds,
    write_predictions_csv, write_thresholds_csv, PredictionMatrix, ThresholdVector,
};
use emotag_core::netcore::{load_checkpoint, ModelParams, Network};
use emotag_core::trainer::train;
use emotag_core::{Error, Result};

use crate::config::RunConfig;

pub const FORMAT_VERSION: u32 = 1;
const TOP_WORDS: usize = 50;
const PREDICT_BATCH: usize = 256;

pub struct Ctx {
    pub cfg: RunConfig,
    pub vocab: LabelVocabulary,
}

impl Ctx {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        let vocab = match &cfg.labels {
            Some(p) => LabelVocabulary::load(p)?,
            None => LabelVocabulary::goemotions(),
        };
        fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
        Ok(Ctx { cfg, vocab })
    }

    fn out(&self, name: &str) -> PathBuf {
        self.cfg.output_dir.join(name)
    }

    fn header(&self) -> String {
        format!(
            "emotag format_version={FORMAT_VERSION} config_sha256={} seed={}",
            self.cfg.hash, self.cfg.seed
        )
    }

    /// Writes `# <header>` followed by `body` to `name` in the output directory.
    fn write(&self, name: &str, body: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<PathBuf> {
        let mut buf = format!("# {}\n", self.header()).into_bytes();
        body(&mut buf)?;
        let path = self.out(name);
        fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    fn existing(&self, name: &str) -> Result<PathBuf> {
        let p = self.out(name);
        if !p.exists() {
            return Err(Error::Data(format!(
                "{} not found; run the earlier pipeline step first",
                p.display()
            )));
        }
        Ok(p)
    }

    fn tokenizer(&self) -> Result<TokenizerState> {
        let p = self.existing("tokenizer.tsv")?;
        TokenizerState::read_tsv(open(&p)?)
    }

    fn encoded(&self, name: &str, split: Split) -> Result<EncodedDataset> {
        let p = self.existing(name)?;
        EncodedDataset::read_tsv(open(&p)?, split, self.vocab.len())
    }

    fn model(&self) -> Result<Network<f32>> {
        let params = load_checkpoint(self.existing("model.ckpt")?)?;
        if params.config.num_labels != self.vocab.len() {
            return Err(Error::Data(format!(
                "checkpoint predicts {} labels but the label set has {}",
                params.config.num_labels,
                self.vocab.len()
            )));
        }
        Ok(Network::new(params).with_precision(self.cfg.training.precision))
    }

    fn thresholds(&self, fixed: Option<f64>) -> Result<ThresholdVector> {
        match fixed {
            Some(t) => ThresholdVector::uniform(t, self.vocab.len()),
            None => read_thresholds_csv(open(&self.existing("thresholds.csv")?)?, &self.vocab),
        }
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

fn io(e: std::io::Error) -> Error {
    Error::Data(format!("write failed: {e}"))
}

fn split_file(split: Split) -> String {
    format!("{split}.enc.tsv")
}

fn normalized(samples: Vec<Sample>) -> Vec<Sample> {
    samples
        .into_iter()
        .map(|s| Sample {
            text: normalize_text(&s.text),
            labels: s.labels,
        })
        .collect()
}

pub fn preprocess(ctx: &Ctx) -> Result<()> {
    let c = &ctx.cfg;
    let train = normalized(load_dataset(c.input("paths.train", &c.train)?, &ctx.vocab)?);
    let val = normalized(load_dataset(c.input("paths.val", &c.val)?, &ctx.vocab)?);
    let test = normalized(load_dataset(c.input("paths.test", &c.test)?, &ctx.vocab)?);
    let tok = fit_tokenizer(&train)?;
    ctx.write("tokenizer.tsv", |w| tok.write_tsv(w).map_err(io))?;
    let mut dist = Vec::new();
    for (split, samples) in [(Split::Train, &train), (Split::Val, &val), (Split::Test, &test)] {
        let ds = encode(samples, &tok, &ctx.vocab, split);
        dist.push(label_counts(&ds.labels));
        ctx.write(&split_file(split), |w| ds.write_tsv(w).map_err(io))?;
    }
    ctx.write("label_distribution.csv", |w| {
        writeln!(w, "label,train,val,test").map_err(io)?;
        for (j, name) in ctx.vocab.names().iter().enumerate() {
            writeln!(w, "{name},{},{},{}", dist[0][j], dist[1][j], dist[2][j]).map_err(io)?;
        }
        Ok(())
    })?;
    ctx.write("word_frequency.csv", |w| {
        writeln!(w, "token,count").map_err(io)?;
        for (t, n) in top_k_words(&train, TOP_WORDS) {
            writeln!(w, "{t},{n}").map_err(io)?;
        }
        Ok(())
    })?;
    eprintln!(
        "preprocess: {} train / {} val / {} test rows, vocabulary {}",
        train.len(),
        val.len(),
        test.len(),
        tok.vocab_size()
    );
    Ok(())
}

pub fn balance(ctx: &Ctx) -> Result<()> {
    let c = &ctx.cfg;
    let mut train = ctx.encoded(&split_file(Split::Train), Split::Train)?;
    let mut gate_line = None;
    if let Some(weak_path) = &c.weak {
        let weak = read_weak_csv(open(&c.input("paths.weak", &c.weak)?)?, c.weak_cutoff)?;
        let votes = match &c.votes {
            Some(p) => read_votes_csv(open(&c.input("paths.votes", &Some(p.clone()))?)?)?,
            None => Default::default(),
        };
        let (accepted, stats) = gate_weak_samples(&weak, &votes, c.alignment_threshold)?;
        let accepted = normalized(accepted);
        let tok = ctx.tokenizer()?;
        let extra = encode(&accepted, &tok, &ctx.vocab, Split::Train);
        let rows = train.len() + extra.len();
        let seqs = ndarray::concatenate(ndarray::Axis(0), &[train.sequences.view(), extra.sequences.view()])
            .map_err(|e| Error::Shape(e.to_string()))?;
        let labels = ndarray::concatenate(ndarray::Axis(0), &[train.labels.view(), extra.labels.view()])
            .map_err(|e| Error::Shape(e.to_string()))?;
        train = EncodedDataset::new(seqs, labels, Split::Train)?;
        debug_assert_eq!(train.len(), rows);
        gate_line = Some(format!(
            "{}: {} weak rows, {} accepted, {} without proposal, {} misaligned, {} rejected by votes",
            weak_path.display(),
            stats.total,
            stats.accepted,
            stats.no_proposal,
            stats.misaligned,
            stats.vote_rejected
        ));
    }
    let before = label_counts(&train.labels);
    let balanced = oversample_balance(&train, &c.balance)?;
    let after = label_counts(&balanced.labels);
    ctx.write("train.balanced.enc.tsv", |w| balanced.write_tsv(w).map_err(io))?;
    ctx.write("balance_summary.csv", |w| {
        writeln!(w, "label,before,after").map_err(io)?;
        for (j, name) in ctx.vocab.names().iter().enumerate() {
            writeln!(w, "{name},{},{}", before[j], after[j]).map_err(io)?;
        }
        Ok(())
    })?;
    if let Some(l) = gate_line {
        eprintln!("balance: {l}");
    }
    eprintln!("balance: {} -> {} training rows", train.len(), balanced.len());
    Ok(())
}

pub fn train_model(ctx: &Ctx, use_balanced: bool) -> Result<()> {
    let c = &ctx.cfg;
    let tok = ctx.tokenizer()?;
    let train_name = if use_balanced { "train.balanced.enc.tsv" } else { "train.enc.tsv" };
    let train_ds = ctx.encoded(train_name, Split::Train)?;
    let val_ds = ctx.encoded(&split_file(Split::Val), Split::Val)?;
    let dim = c.model.embed_dim;
    let embedding = match &c.embeddings {
        Some(_) => {
            let vecs = load_vec(c.input("paths.embeddings", &c.embeddings)?, Some(dim))?;
            build_matrix(&vecs, &tok, dim, c.seed)?
        }
        None => {
            eprintln!("train: no paths.embeddings configured, using seeded random vectors");
            EmbeddingMatrix::<f32>::random(tok.vocab_size(), dim, c.seed)
        }
    };
    let model = emotag_core::netcore::ModelConfig {
        num_labels: ctx.vocab.len(),
        ..c.model.clone()
    };
    let params = ModelParams::init(&model, Arc::new(embedding), c.seed)?;
    let counts = params.count_params();
    eprintln!(
        "train: {} parameters ({} trainable, {} frozen), {} rows",
        counts.total,
        counts.trainable,
        counts.frozen,
        train_ds.len()
    );
    let ckpt = ctx.out("model.ckpt");
    let tc = emotag_core::TrainingConfig {
        checkpoint: Some(ckpt.clone()),
        ..c.training.clone()
    };
    let (best, history) = train(params, &train_ds, &val_ds, &tc)?;
    emotag_core::netcore::save_checkpoint(&best, &ckpt)?;
    ctx.write("history.csv", |w| history.write_csv(w).map_err(io))?;
    eprintln!(
        "train: best epoch {} of {}, {} skipped batches",
        history.best_epoch, history.stopped_epoch, history.skipped_batches
    );
    Ok(())
}

pub fn tune(ctx: &Ctx) -> Result<()> {
    let net = ctx.model()?;
    let val = ctx.encoded(&split_file(Split::Val), Split::Val)?;
    let probs = net.predict(&val.sequences, PREDICT_BATCH)?;
    let tau = tune_thresholds(probs.view(), val.labels.view(), &ctx.cfg.grid)?;
    ctx.write("thresholds.csv", |w| write_thresholds_csv(w, &tau, &ctx.vocab))?;
    Ok(())
}

pub fn evaluate_split(
    ctx: &Ctx,
    split: Split,
    fixed: Option<f64>,
    predictions: Option<&Path>,
    svg: bool,
) -> Result<()> {
    let ds = ctx.encoded(&split_file(split), split)?;
    let preds = match predictions {
        Some(p) => {
            let (_, preds) = read_predictions_csv(open(p)?, ctx.vocab.len())?;
            if preds.nrows() != ds.len() {
                return Err(Error::Data(format!(
                    "{} has {} rows but the {split} split has {}",
                    p.display(),
                    preds.nrows(),
                    ds.len()
                )));
            }
            preds
        }
        None => PredictionMatrix::new(ctx.model()?.predict(&ds.sequences, PREDICT_BATCH)?, Some(split))?,
    };
    let tau = ctx.thresholds(fixed)?;
    let report = evaluate(&preds, ds.labels.view(), &tau, &ctx.vocab)?;
    ctx.write(&format!("metrics_{split}.csv"), |w| report.write_aggregate_csv(w))?;
    ctx.write(&format!("per_label_{split}.csv"), |w| report.write_per_label_csv(w))?;
    if svg {
        let name = format!("f1_{split}.svg");
        let path = ctx.out(&name);
        let body = format!(
            "<!-- {} -->\n{}",
            ctx.header(),
            render_f1_svg(&report.per_label, &format!("Per-label F1 ({split})"))
        );
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    let a = &report.aggregate;
    eprintln!(
        "evaluate {split}: micro-F1 {:.4}, macro-F1 {:.4}, subset accuracy {:.4}, hamming {:.4}",
        a.micro.f1, a.macro_.f1, a.subset_accuracy, a.hamming_loss
    );
    if !a.micro.f1.is_finite() {
        return Err(Error::Numeric("non-finite metric".into()));
    }
    Ok(())
}

/// Predicts either an encoded split or raw text lines from `input`.
pub fn predict(ctx: &Ctx, split: Split, input: Option<&Path>, fixed: Option<f64>) -> Result<()> {
    let net = ctx.model()?;
    let (name, ids, texts, seqs) = match input {
        Some(path) => {
            let tok = ctx.tokenizer()?;
            let mut texts = Vec::new();
            for line in open(path)?.lines() {
                let line = line.map_err(|e| Error::io(path, e))?;
                if !line.trim().is_empty() {
                    texts.push(line);
                }
            }
            if texts.is_empty() {
                return Err(Error::Data(format!("{} contains no text", path.display())));
            }
            let mut seqs = Array2::zeros((texts.len(), net.params.config.seq_len));
            for (i, t) in texts.iter().enumerate() {
                let row = tok.encode_text(&normalize_text(t));
                seqs.row_mut(i).assign(&ndarray::ArrayView1::from(&row[..]));
            }
            let ids = (1..=texts.len()).map(|i| i.to_string()).collect::<Vec<String>>();
            ("input".to_string(), ids, Some(texts), seqs)
        }
        None => {
            let ds = ctx.encoded(&split_file(split), split)?;
            let ids = (0..ds.len()).map(|i| i.to_string()).collect::<Vec<String>>();
            (split.to_string(), ids, None, ds.sequences)
        }
    };
    let preds = PredictionMatrix::new(net.predict(&seqs, PREDICT_BATCH)?, None)?;
    ctx.write(&format!("predictions_{name}.csv"), |w| write_predictions_csv(w, &ids, &preds))?;
    let tau = match fixed {
        Some(_) => ctx.thresholds(fixed)?,
        None if ctx.out("thresholds.csv").exists() => ctx.thresholds(None)?,
        None => ThresholdVector::uniform(0.5, ctx.vocab.len())?,
    };
    ctx.write(&format!("ranked_{name}.tsv"), |w| {
        writeln!(w, "id\tflag\tlabels\ttext").map_err(io)?;
        for (i, row) in preds.probs.rows().into_iter().enumerate() {
            let row = row.to_vec();
            let r = rank_sentence_labels(&row, &tau, &ctx.vocab, ctx.cfg.ranked_labels)?;
            let labels: Vec<String> = r.labels.iter().map(|(l, p)| format!("{l}: {p:.2}")).collect();
            let text = texts.as_ref().map_or("", |t| t[i].as_str());
            writeln!(
                w,
                "{}\t{}\t{}\t{}",
                ids[i],
                if r.below_threshold { "below_threshold" } else { "ok" },
                labels.join(" "),
                text.replace('\t', " ")
            )
            .map_err(io)?;
        }
        Ok(())
    })?;
    Ok(())
}

fn strip_header(text: &str) -> impl Iterator<Item = &str> {
    text.lines().filter(|l| !l.starts_with('#'))
}

pub fn report(ctx: &Ctx) -> Result<()> {
    let mut out = String::new();
    out.push_str("# run report\n\n");
    let read = |name: &str| fs::read_to_string(ctx.out(name)).ok();
    let section = |out: &mut String, title: &str, body: Option<String>| {
        out.push_str(&format!("## {title}\n\n"));
        match body {
            Some(b) => {
                out.push_str("```\n");
                for l in strip_header(&b) {
                    out.push_str(l);
                    out.push('\n');
                }
                out.push_str("```\n\n");
            }
            None => out.push_str("(not available)\n\n"),
        }
    };
    let history = read("history.csv");
    if let Some(h) = &history {
        let rows: Vec<Vec<&str>> = strip_header(h).skip(1).map(|l| l.split(',').collect()).collect();
        let best = rows
            .iter()
            .filter_map(|r| Some((r.first()?.to_string(), r.get(2)?.parse::<f64>().ok()?)))
            .fold(None, |acc: Option<(String, f64)>, (e, v)| match acc {
                Some((_, b)) if b <= v => acc,
                _ => Some((e, v)),
            });
        if let Some((e, v)) = best {
            out.push_str(&format!(
                "Epochs run: {}. Best validation loss {v:.6} at epoch {e}.\n\n",
                rows.len()
            ));
        }
    }
    for split in [Split::Val, Split::Test] {
        section(&mut out, &format!("aggregate metrics ({split})"), read(&format!("metrics_{split}.csv")));
        section(&mut out, &format!("per-label metrics ({split})"), read(&format!("per_label_{split}.csv")));
    }
    section(&mut out, "thresholds", read("thresholds.csv"));
    section(&mut out, "training history", history);
    ctx.write("report.md", |w| w.write_all(out.as_bytes()).map_err(io))?;
    Ok(())
}
