//! `sentvae`: corpus generation, training, latent manipulation and the
//! latent-influence evaluation, all driven by one JSON config.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use sentvae::config::RunConfig;
use sentvae::corpus::{
    detokenize, generate_corpus, read_corpus_jsonl, read_plain_text, tokenize, write_corpus_jsonl,
    GrammarSpec, RoleAnnotatedSentence, TokenSequence, Vocab,
};
use sentvae::evaldis::{
    aggregate_influence, diff_external, read_external_couples, run_influence_experiment, summarize,
    wired_decoder_check, DiffRecord, Metric, NeuralGenerator, DEFAULT_WIRING,
};
use sentvae::manipulate::{
    encode_sentence_latents, generate_batch, resample_single_lv, sample_prior_chain, swap_lv, Decoding, EncodeMode,
    LatentAssignment,
};
use sentvae::model::{extract_attention, HierarchicalVae, ZeroNoise};
use sentvae::params::ParameterStore;
use sentvae::trainer::{run_training, Checkpoint};

#[derive(Parser)]
#[command(name = "sentvae", version, about = "Hierarchical sentence VAE with latent-influence analysis")]
struct Cli {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads. Defaults to 1 for `train`, all cores otherwise.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample train and test corpora from the grammar.
    GenerateCorpus {
        /// Output directory for train.jsonl and test.jsonl.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full training schedule.
    Train {
        /// Overrides `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode sentences from the prior chain.
    Sample {
        #[command(flatten)]
        ck: CheckpointArg,
        #[arg(long, default_value_t = 10)]
        count: usize,
        /// Ancestral sampling at this temperature instead of greedy decoding.
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Redraw one LV from its conditional prior: one original plus
    /// `count` variants per base sentence.
    Resample {
        #[command(flatten)]
        ck: CheckpointArg,
        #[arg(long)]
        lv: usize,
        #[arg(long, default_value_t = 3)]
        count: usize,
        /// Number of prior-sampled bases (ignored when sentences are given).
        #[arg(long, default_value_t = 5)]
        bases: usize,
        /// Encode these sentences (posterior means) as bases instead.
        #[arg(long = "sentence")]
        sentences: Vec<String>,
        /// Also redraw every deeper level given the new value.
        #[arg(long)]
        repropagate: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exchange one LV between two encoded sentences.
    Swap {
        #[command(flatten)]
        ck: CheckpointArg,
        #[arg(long)]
        first: String,
        #[arg(long)]
        second: String,
        #[arg(long)]
        lv: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Influence experiment: diff records, per-metric matrices and top
    /// influencers.
    Evaluate {
        /// Required unless `--external` is given.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Diff externally parsed couples (JSON lines) instead of generating.
        #[arg(long)]
        external: Option<PathBuf>,
        #[arg(long)]
        base_count: Option<usize>,
        #[arg(long)]
        resamples: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-attention of the posterior queries over a sentence.
    Attention {
        #[command(flatten)]
        ck: CheckpointArg,
        #[arg(long)]
        sentence: String,
        /// Layer of each level's query decoder; the last one by default.
        #[arg(long)]
        layer: Option<usize>,
        /// Restrict to one LV.
        #[arg(long)]
        lv: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the influence protocol on a decoder with a planted role mapping.
    Selfcheck {
        #[arg(long, default_value_t = 100)]
        base_count: usize,
        #[arg(long, default_value_t = 10)]
        resamples: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct CheckpointArg {
    #[arg(long)]
    checkpoint: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e.chain().any(|c| {
                c.downcast_ref::<sentvae::Error>()
                    .is_some_and(sentvae::Error::is_validation)
            });
            ExitCode::from(if validation { 1 } else { 2 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let threads = cli
        .threads
        .or(matches!(cli.command, Command::Train { .. }).then_some(1));
    if let Some(n) = threads {
        if n == 0 {
            return Err(sentvae::Error::Config("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::GenerateCorpus { out } => cmd_generate_corpus(&cfg, &out),
        Command::Train { out } => {
            if let Some(out) = out {
                cfg.output_dir = out;
            }
            cmd_train(&cfg)
        }
        Command::Sample {
            ck,
            count,
            temperature,
            out,
        } => cmd_sample(&cfg, &ck.checkpoint, count, temperature, &out),
        Command::Resample {
            ck,
            lv,
            count,
            bases,
            sentences,
            repropagate,
            out,
        } => cmd_resample(&cfg, &ck.checkpoint, lv, count, bases, &sentences, repropagate, &out),
        Command::Swap {
            ck,
            first,
            second,
            lv,
            out,
        } => cmd_swap(&ck.checkpoint, &first, &second, lv, &out),
        Command::Evaluate {
            checkpoint,
            external,
            base_count,
            resamples,
            out,
        } => cmd_evaluate(
            &cfg,
            checkpoint.as_deref(),
            external.as_deref(),
            base_count.unwrap_or(cfg.eval_base_count),
            resamples.unwrap_or(cfg.eval_resamples),
            &out,
        ),
        Command::Attention {
            ck,
            sentence,
            layer,
            lv,
            out,
        } => cmd_attention(&ck.checkpoint, &sentence, layer, lv, &out),
        Command::Selfcheck {
            base_count,
            resamples,
            out,
        } => cmd_selfcheck(&cfg, base_count, resamples, out.as_deref()),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, values: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = create(path)?;
    for v in values {
        serde_json::to_writer(&mut w, &v)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn load_grammar(cfg: &RunConfig) -> Result<GrammarSpec> {
    Ok(match &cfg.grammar {
        Some(p) => GrammarSpec::load(p)?,
        None => GrammarSpec::default_grammar(),
    })
}

/// Tokenized sentences of a corpus file: JSON lines for `.jsonl`, plain
/// whitespace-tokenized text otherwise.
fn read_sentences(path: &Path) -> Result<Vec<Vec<String>>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let reader = BufReader::new(f);
    let out = if path.extension().is_some_and(|e| e == "jsonl") {
        read_corpus_jsonl(reader)?.into_iter().map(|s| s.tokens).collect()
    } else {
        read_plain_text(reader)?
    };
    if out.is_empty() {
        return Err(sentvae::Error::Config(format!("{} holds no sentences", path.display())).into());
    }
    Ok(out)
}

fn generated_corpora(cfg: &RunConfig) -> Result<(Vec<RoleAnnotatedSentence>, Vec<RoleAnnotatedSentence>)> {
    let grammar = load_grammar(cfg)?;
    let mut all = generate_corpus(&grammar, cfg.train_size + cfg.test_size, cfg.seed, cfg.max_len)?;
    let test = all.split_off(cfg.train_size);
    Ok((all, test))
}

fn cmd_generate_corpus(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (train, test) = generated_corpora(cfg)?;
    for (name, part) in [("train.jsonl", &train), ("test.jsonl", &test)] {
        let path = out.join(name);
        let mut w = create(&path)?;
        write_corpus_jsonl(&mut w, part)?;
        w.flush()?;
    }
    log::info!("wrote {} train and {} test sentences to {}", train.len(), test.len(), out.display());
    Ok(())
}

fn encode_all(sentences: &[Vec<String>], vocab: &Vocab, max_len: usize, what: &str) -> Result<Vec<TokenSequence>> {
    sentences
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let seq = tokenize(s, vocab);
            if seq.len() > max_len {
                return Err(anyhow::Error::new(sentvae::Error::Length {
                    len: seq.len(),
                    max: max_len,
                })
                .context(format!("{what} sentence {}", i + 1)));
            }
            Ok(seq)
        })
        .collect()
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let (train, test) = match (&cfg.train_corpus, &cfg.test_corpus) {
        (Some(a), Some(b)) => (read_sentences(a)?, read_sentences(b)?),
        (None, None) => {
            let (train, test) = generated_corpora(cfg)?;
            for (name, part) in [("train.jsonl", &train), ("test.jsonl", &test)] {
                let mut w = create(&dir.join(name))?;
                write_corpus_jsonl(&mut w, part)?;
                w.flush()?;
            }
            (
                train.into_iter().map(|s| s.tokens).collect(),
                test.into_iter().map(|s| s.tokens).collect(),
            )
        }
        _ => {
            return Err(sentvae::Error::Config("give both train_corpus and test_corpus, or neither".into()).into());
        }
    };
    let vocab = Vocab::build(train.iter());
    let model_cfg = cfg.model_config(vocab.len());
    if model_cfg.vocab_size < vocab.len() {
        return Err(sentvae::Error::Config(format!(
            "vocab_size {} is smaller than the {} training words",
            model_cfg.vocab_size,
            vocab.len()
        ))
        .into());
    }
    let train_seqs = encode_all(&train, &vocab, model_cfg.max_len, "training")?;
    let test_seqs = encode_all(&test, &vocab, model_cfg.max_len, "test")?;
    fs::write(dir.join("run_config.json"), cfg.to_json_string()).context("writing run_config.json")?;
    log::info!(
        "training on {} sentences ({} test), vocabulary {}",
        train_seqs.len(),
        test_seqs.len(),
        vocab.len()
    );
    let (report, _, _) = run_training(
        &model_cfg,
        &cfg.train_config(),
        Some(&vocab),
        &train_seqs,
        &test_seqs,
        Some(dir),
    )?;
    #[derive(Serialize)]
    struct Summary<'a> {
        steps: u64,
        epochs: u64,
        halted: bool,
        final_epoch_kl_max: f64,
        final_epoch_recon: f64,
        first_recon: Option<f64>,
        checkpoints: &'a [PathBuf],
    }
    write_json(
        &dir.join("train_summary.json"),
        &Summary {
            steps: report.steps,
            epochs: report.epochs,
            halted: report.halted,
            final_epoch_kl_max: report.final_epoch_kl_max,
            final_epoch_recon: report.final_epoch_recon,
            first_recon: report.first_recon(),
            checkpoints: &report.checkpoints,
        },
    )?;
    log::info!(
        "finished after {} steps ({} epochs, halted: {})",
        report.steps,
        report.epochs,
        report.halted
    );
    Ok(())
}

struct Loaded {
    model: HierarchicalVae,
    params: ParameterStore<f32>,
    vocab: Vocab,
}

fn load_model(path: &Path) -> Result<Loaded> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let vocab = ck
        .vocab
        .ok_or_else(|| sentvae::Error::State(format!("{} carries no vocabulary", path.display())))?;
    let model = HierarchicalVae::for_store(&ck.config, &ck.params)?;
    Ok(Loaded {
        model,
        params: ck.params,
        vocab,
    })
}

impl Loaded {
    fn encode(&self, sentence: &str) -> Result<LatentAssignment> {
        let words: Vec<&str> = sentence.split_whitespace().collect();
        let seq = tokenize(&words, &self.vocab);
        Ok(encode_sentence_latents(
            &self.model,
            &self.params,
            &seq,
            EncodeMode::Mean,
            &mut ZeroNoise,
        )?)
    }

    fn greedy(&self, latents: &[&LatentAssignment]) -> Result<Vec<String>> {
        let mut unused = rand::rngs::mock::StepRng::new(0, 0);
        let out = generate_batch(
            &self.model,
            &self.params,
            latents,
            self.model.config().max_len,
            Decoding::Greedy,
            &mut unused,
        )?;
        Ok(out.iter().map(|g| detokenize(&g.tokens, &self.vocab).join(" ")).collect())
    }
}

fn cmd_sample(cfg: &RunConfig, ck: &Path, count: usize, temperature: Option<f64>, out: &Path) -> Result<()> {
    let m = load_model(ck)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let latents = (0..count)
        .map(|_| sample_prior_chain(&m.model, &m.params, &mut rng))
        .collect::<sentvae::Result<Vec<_>>>()?;
    let refs: Vec<&LatentAssignment> = latents.iter().collect();
    let decoding = match temperature {
        Some(t) => Decoding::Ancestral { temperature: t },
        None => Decoding::Greedy,
    };
    let generated = generate_batch(&m.model, &m.params, &refs, m.model.config().max_len, decoding, &mut rng)?;
    #[derive(Serialize)]
    struct Row<'a> {
        index: usize,
        text: String,
        truncated: bool,
        latents: &'a LatentAssignment,
    }
    write_jsonl(
        out,
        generated.iter().zip(&latents).enumerate().map(|(index, (g, l))| Row {
            index,
            text: detokenize(&g.tokens, &m.vocab).join(" "),
            truncated: g.truncated,
            latents: l,
        }),
    )?;
    log::info!("wrote {count} samples to {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_resample(
    cfg: &RunConfig,
    ck: &Path,
    lv: usize,
    count: usize,
    bases: usize,
    sentences: &[String],
    repropagate: bool,
    out: &Path,
) -> Result<()> {
    let m = load_model(ck)?;
    let total = m.model.config().total_lvs();
    if lv >= total {
        return Err(sentvae::Error::Index {
            what: "latent variable",
            index: lv,
            limit: total,
        }
        .into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let base_latents: Vec<LatentAssignment> = if sentences.is_empty() {
        (0..bases)
            .map(|_| sample_prior_chain(&m.model, &m.params, &mut rng))
            .collect::<sentvae::Result<_>>()?
    } else {
        sentences.iter().map(|s| m.encode(s)).collect::<Result<_>>()?
    };
    #[derive(Serialize)]
    struct Row {
        base: usize,
        lv: usize,
        original: String,
        variants: Vec<String>,
    }
    let mut rows = Vec::with_capacity(base_latents.len());
    for (b, base) in base_latents.iter().enumerate() {
        let variants = (0..count)
            .map(|_| resample_single_lv(&m.model, &m.params, base, lv, &mut rng, repropagate))
            .collect::<sentvae::Result<Vec<_>>>()?;
        let mut all = vec![base];
        all.extend(variants.iter());
        let mut text = m.greedy(&all)?;
        let original = text.remove(0);
        rows.push(Row {
            base: b,
            lv,
            original,
            variants: text,
        });
    }
    write_jsonl(out, rows)?;
    log::info!("wrote {} resampling groups to {}", base_latents.len(), out.display());
    Ok(())
}

fn cmd_swap(ck: &Path, first: &str, second: &str, lv: usize, out: &Path) -> Result<()> {
    let m = load_model(ck)?;
    let a = m.encode(first)?;
    let b = m.encode(second)?;
    let (a2, b2) = swap_lv(&a, &b, lv)?;
    let text = m.greedy(&[&a, &b, &a2, &b2])?;
    #[derive(Serialize)]
    struct Swap<'a> {
        lv: usize,
        first: &'a str,
        second: &'a str,
        first_reconstructed: &'a str,
        second_reconstructed: &'a str,
        first_swapped: &'a str,
        second_swapped: &'a str,
    }
    write_json(
        out,
        &Swap {
            lv,
            first,
            second,
            first_reconstructed: &text[0],
            second_reconstructed: &text[1],
            first_swapped: &text[2],
            second_swapped: &text[3],
        },
    )
}

fn write_evaluation(records: &[DiffRecord], num_lvs: usize, out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let matrices = aggregate_influence(records, num_lvs);
    for m in &matrices {
        let path = out.join(format!("{}.csv", m.metric.file_stem()));
        m.write_csv(create(&path)?)?;
    }
    write_json(&out.join("top_influencers.json"), &summarize(records, &matrices))?;
    write_jsonl(&out.join("diff_records.jsonl"), records)?;
    Ok(())
}

fn cmd_evaluate(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    external: Option<&Path>,
    base_count: usize,
    resamples: usize,
    out: &Path,
) -> Result<()> {
    let (records, num_lvs) = match (checkpoint, external) {
        (_, Some(ext)) => {
            let f = File::open(ext).with_context(|| format!("opening {}", ext.display()))?;
            let couples = read_external_couples(BufReader::new(f)).with_context(|| format!("reading {}", ext.display()))?;
            let num_lvs = match checkpoint {
                Some(ck) => load_model(ck)?.model.config().total_lvs(),
                None => couples.iter().map(|c| c.lv_index + 1).max().unwrap_or(0),
            };
            (diff_external(&couples), num_lvs)
        }
        (Some(ck), None) => {
            if base_count == 0 || resamples == 0 {
                return Err(sentvae::Error::Config("base_count and resamples must be positive".into()).into());
            }
            let m = load_model(ck)?;
            let grammar = load_grammar(cfg)?;
            let generator = NeuralGenerator {
                model: &m.model,
                params: &m.params,
                vocab: &m.vocab,
                max_len: m.model.config().max_len,
            };
            let records = run_influence_experiment(&generator, &grammar, base_count, resamples, cfg.seed)?;
            (records, m.model.config().total_lvs())
        }
        (None, None) => {
            return Err(sentvae::Error::Config("evaluate needs --checkpoint or --external".into()).into());
        }
    };
    write_evaluation(&records, num_lvs, out)?;
    log::info!(
        "{} couples over {num_lvs} LVs; wrote {} metric tables to {}",
        records.len(),
        Metric::ALL.len(),
        out.display()
    );
    Ok(())
}

fn cmd_attention(ck: &Path, sentence: &str, layer: Option<usize>, lv: Option<usize>, out: &Path) -> Result<()> {
    let m = load_model(ck)?;
    let words: Vec<&str> = sentence.split_whitespace().collect();
    let seq = tokenize(&words, &m.vocab);
    let (_, record) = m.model.infer_posteriors(&m.params, &seq, &mut ZeroNoise)?;
    let total = m.model.config().total_lvs();
    let lvs: Vec<usize> = match lv {
        Some(v) => vec![v],
        None => (0..total).collect(),
    };
    let mut rows = Vec::with_capacity(lvs.len());
    for v in lvs {
        let level = locate_level(&m.model, v);
        let depth = record.levels[level].layers.len();
        let layer = layer.unwrap_or(depth.saturating_sub(1));
        rows.push(extract_attention(&record, v, layer)?);
    }
    let mut columns = vec!["<bos>".to_string()];
    columns.extend(words.iter().map(|w| w.to_string()));
    columns.push("<eos>".into());
    columns.push("<latent>".into());
    #[derive(Serialize)]
    struct Row {
        lv: usize,
        level: usize,
        layer: usize,
        weights: Vec<f64>,
    }
    #[derive(Serialize)]
    struct Report {
        sentence: String,
        columns: Vec<String>,
        rows: Vec<Row>,
    }
    let report = Report {
        sentence: sentence.to_string(),
        columns,
        rows: rows
            .into_iter()
            .map(|a| {
                let mut weights = a.tokens;
                weights.push(a.latent);
                Row {
                    lv: a.lv,
                    level: a.level,
                    layer: a.layer,
                    weights,
                }
            })
            .collect(),
    };
    write_json(out, &report)
}

fn locate_level(model: &HierarchicalVae, lv: usize) -> usize {
    let [n1, n2, _] = model.config().counts();
    if lv < n1 {
        0
    } else if lv < n1 + n2 {
        1
    } else {
        2
    }
}

fn cmd_selfcheck(cfg: &RunConfig, base_count: usize, resamples: usize, out: Option<&Path>) -> Result<()> {
    let grammar = load_grammar(cfg)?;
    let report = wired_decoder_check(
        &grammar,
        [cfg.n1, cfg.n2, cfg.n3],
        &DEFAULT_WIRING,
        base_count,
        resamples,
        cfg.seed,
    )?;
    for r in &report.roles {
        log::info!(
            "{}: planted {:?}, top LV {} with probability {:.3}",
            r.role.name(),
            r.planted_lv,
            r.top_lv,
            r.probability
        );
    }
    log::info!(
        "largest inert cell {:.3}, smallest planted cell {:.3}",
        report.max_inert_probability,
        report.min_planted_probability
    );
    if let Some(out) = out {
        write_json(out, &report)?;
    }
    if report.passed {
        log::info!("selfcheck passed");
        Ok(())
    } else {
        anyhow::bail!("selfcheck failed: the planted mapping was not recovered")
    }
}
