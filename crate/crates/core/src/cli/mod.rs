//! The `unmt` command line: one subcommand per pipeline stage, all working
//! on a run directory.

pub mod config;
pub mod manifest;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::ExperimentConfig;
pub use manifest::{RunManifest, Stage};

use crate::embeddings::{
    load_dictionary, load_embeddings, load_map, preprocess_embeddings, save_dictionary, save_embeddings, save_map,
    self_learning_align, train_skipgram, word_translation_report, BilingualDictionary, DictProvenance, Direction,
    RetrievalReport,
};
use crate::error::{Error, Result};
use crate::eval::{corpus_bleu, emit_curves, word_translation_json, word_translation_table};
use crate::model::{EmbeddingMode, Model, Strategy};
use crate::pipeline::{
    build_crosslingual, configs_for, dictionary_units, init_model, prepare_data, read_json, run_approach,
    spaced_subset, translate_lines, write_json, Approach, CrosslingualSetup, EmbeddingConfig, PreparedData, RunSummary,
};
use crate::text::normalize::write_lines;
use crate::text::{encode_lines, read_corpus, BpeModel, Lang, RawCorpus, Vocabulary};
use crate::toylang::generate_toy_pair;
use crate::trainer::{
    translate_and_score, Checkpoint, Corpora, CrosslingualInit, ParallelSet, Regime, RunDir, RunOptions,
};

#[derive(Debug, Parser)]
#[command(name = "unmt", version, about = "Unsupervised NMT with cross-lingual embedding initialization")]
pub struct Cli {
    /// JSON config layered over the preset (unknown keys are rejected).
    /// Defaults to the run directory's `config.json` when present.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Run directory holding every stage's outputs.
    #[arg(long, global = true, value_name = "PATH", default_value = "run")]
    pub run_dir: PathBuf,

    /// Seed for training, skip-gram and toy generation.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,

    /// Worker threads for independent runs (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,

    /// Start from the full-scale hyperparameters instead of the desk preset.
    #[arg(long, global = true)]
    pub paper_preset: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Normalize corpora, learn joint BPE and the vocabulary.
    Preprocess(PreprocessArgs),
    /// Train skip-gram vectors for each language.
    TrainEmbeddings,
    /// Map source vectors into the target space by seeded self-learning.
    Align(AlignArgs),
    /// Word-translation P@1 (NN and CSLS) against a gold dictionary.
    EvalDictionary(EvalDictionaryArgs),
    /// MASS or DAE pretraining.
    Pretrain(PretrainArgs),
    /// Back-translation fine-tuning of the pretrained model.
    Finetune(FinetuneArgs),
    /// Single-stage alternating denoising and back-translation.
    TrainIterative(ModeArgs),
    /// Translate a file with a trained (or untrained) model.
    Translate(TranslateArgs),
    /// Corpus BLEU of two files, or of the trained model on the test set.
    Evaluate(EvaluateArgs),
    /// Generate the synthetic language pair.
    GenToy(GenToyArgs),
    /// Train and score every approach on the toy pair and print the table.
    RunExperiment(RunExperimentArgs),
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Source monolingual corpus, one sentence per line.
    #[arg(long, value_name = "PATH", required_unless_present = "toy")]
    pub src: Option<PathBuf>,
    /// Target monolingual corpus.
    #[arg(long, value_name = "PATH", required_unless_present = "toy")]
    pub tgt: Option<PathBuf>,
    #[arg(long, value_name = "PATH", requires = "valid_tgt")]
    pub valid_src: Option<PathBuf>,
    #[arg(long, value_name = "PATH", requires = "valid_src")]
    pub valid_tgt: Option<PathBuf>,
    #[arg(long, value_name = "PATH", requires = "test_tgt")]
    pub test_src: Option<PathBuf>,
    #[arg(long, value_name = "PATH", requires = "test_src")]
    pub test_tgt: Option<PathBuf>,
    /// Take all inputs from a directory written by `gen-toy`.
    #[arg(long, value_name = "DIR", conflicts_with_all = ["src", "tgt"])]
    pub toy: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    /// Seed dictionary (word pairs); defaults to `data/dict.seed.tsv` when
    /// present, else identical strings.
    #[arg(long, value_name = "PATH")]
    pub seed_dict: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalDictionaryArgs {
    /// Gold dictionary (word pairs); defaults to `data/dict.gold.tsv`.
    #[arg(long, value_name = "PATH")]
    pub gold: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Objective {
    Mass,
    Dae,
}

#[derive(Debug, Args)]
pub struct ModeArgs {
    /// Embedding layer: random, nonstatic or static.
    #[arg(long, value_name = "MODE", default_value = "static")]
    pub mode: EmbeddingMode,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long, value_enum, default_value = "dae")]
    pub objective: Objective,
    #[command(flatten)]
    pub mode: ModeArgs,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Fine-tune a freshly initialized model instead of the pretrained one.
    #[arg(long)]
    pub from_scratch: bool,
    /// Embedding mode for `--from-scratch`.
    #[arg(long, value_name = "MODE", default_value = "static", requires = "from_scratch")]
    pub mode: EmbeddingMode,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TranslationDirection {
    #[value(name = "src-tgt")]
    SrcTgt,
    #[value(name = "tgt-src")]
    TgtSrc,
}

impl TranslationDirection {
    fn target(self) -> Lang {
        match self {
            Self::SrcTgt => Lang::Tgt,
            Self::TgtSrc => Lang::Src,
        }
    }
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    #[arg(long, value_name = "PATH")]
    pub input: PathBuf,
    /// Defaults to standard output.
    #[arg(long, value_name = "PATH")]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "src-tgt")]
    pub direction: TranslationDirection,
    /// `greedy`, `beam` or `beam:N`.
    #[arg(long, default_value = "greedy")]
    pub strategy: Strategy,
    /// Checkpoint to load; defaults to the best trained one in the run.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Longest output in subwords; defaults to the model maximum.
    #[arg(long, value_name = "N")]
    pub max_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Candidate translations, one per line.
    #[arg(long, value_name = "PATH", requires = "references")]
    pub candidates: Option<PathBuf>,
    #[arg(long, value_name = "PATH", requires = "candidates")]
    pub references: Option<PathBuf>,
    /// Checkpoint to score on the test set; defaults to the best trained one.
    #[arg(long, value_name = "PATH", conflicts_with = "candidates")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenToyArgs {
    /// Output directory; defaults to `<run-dir>/toy`.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunExperimentArgs {
    /// Toy directory from `gen-toy`; a pair is generated per seed otherwise.
    #[arg(long, value_name = "DIR")]
    pub toy: Option<PathBuf>,
    /// `all` or a comma-separated list such as `dae_pretrain-static`.
    #[arg(long, default_value = "all")]
    pub regimes: String,
    /// Comma-separated seeds; defaults to the configured seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
}

/// Run-directory context shared by the subcommands.
struct Workspace {
    dir: PathBuf,
    config: ExperimentConfig,
    manifest: RunManifest,
}

const DATA: &str = "data";

impl Workspace {
    fn open(cli: &Cli) -> Result<Self> {
        let dir = cli.run_dir.clone();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let stored = dir.join("config.json");
        let file = cli.config.clone().or_else(|| stored.exists().then(|| stored.clone()));
        let mut config = ExperimentConfig::resolve(cli.paper_preset, file.as_deref(), std::env::vars())?;
        if let Some(seed) = cli.seed {
            config.set_seed(seed);
        }
        config.validate()?;
        write_json(&stored, &config)?;
        let mut manifest = RunManifest::open(&dir)?;
        if let Some(p) = &cli.config {
            manifest.config_path = Some(p.to_string_lossy().into_owned());
        }
        manifest.save(&dir)?;
        Ok(Self { dir, config, manifest })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn complete(&mut self, stage: Stage, outputs: &[&str]) -> Result<()> {
        let outs: Vec<PathBuf> = outputs.iter().map(PathBuf::from).collect();
        self.manifest.complete(&self.dir, stage, &outs)
    }

    fn require(&self, stage: Stage) -> Result<()> {
        self.manifest.require(&self.dir, stage)
    }

    fn bpe(&self) -> Result<BpeModel> {
        BpeModel::load(&self.path("data/bpe.codes"))
    }

    fn vocab(&self) -> Result<Vocabulary> {
        Vocabulary::load(&self.path("vocab.txt"))
    }

    fn read_lines(&self, rel: &str) -> Result<Vec<String>> {
        let p = self.path(rel);
        if !p.exists() {
            return Ok(Vec::new());
        }
        Ok(read_corpus(&p, Lang::Src)?.lines)
    }

    /// Corpora rebuilt from the preprocessed text.
    fn data(&self) -> Result<PreparedData> {
        self.require(Stage::Preprocess)?;
        let bpe = self.bpe()?;
        let vocab = self.vocab()?;
        let mono = [
            encode_lines(&bpe, &vocab, &self.read_lines("data/train.src")?),
            encode_lines(&bpe, &vocab, &self.read_lines("data/train.tgt")?),
        ];
        let set = |name: &str| -> Result<ParallelSet> {
            ParallelSet::from_text(
                &bpe,
                &vocab,
                &self.read_lines(&format!("data/{name}.src"))?,
                &self.read_lines(&format!("data/{name}.tgt"))?,
            )
        };
        let corpora = Corpora {
            valid: set("valid")?,
            test: set("test")?,
            vocab,
            mono,
        };
        Ok(PreparedData { bpe, corpora })
    }

    fn crosslingual_init(&self) -> Result<CrosslingualInit> {
        self.require(Stage::Align)?;
        let x = load_embeddings(&self.path("embeddings/src.vec"))?;
        let z = load_embeddings(&self.path("embeddings/tgt.vec"))?;
        let map = load_map(&self.path("embeddings/map.txt"))?;
        CrosslingualInit::build(&x, &z, &map, self.config.embeddings.init_source)
    }

    /// The most advanced trained checkpoint in the run.
    fn best_checkpoint(&self) -> Option<PathBuf> {
        ["finetune", "iterative", "pretrain"]
            .iter()
            .map(|s| self.path(s).join("checkpoints").join("best.ckpt"))
            .find(|p| p.exists())
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::GenToy(a) => gen_toy(&cli, a),
        Command::Evaluate(EvaluateArgs {
            candidates: Some(c),
            references: Some(r),
            ..
        }) => evaluate_files(c, r),
        _ => {
            let mut ws = Workspace::open(&cli)?;
            match &cli.command {
                Command::Preprocess(a) => preprocess(&mut ws, a),
                Command::TrainEmbeddings => train_embeddings(&mut ws),
                Command::Align(a) => align(&mut ws, a),
                Command::EvalDictionary(a) => eval_dictionary(&ws, a),
                Command::Pretrain(a) => pretrain(&mut ws, a),
                Command::Finetune(a) => finetune(&mut ws, a),
                Command::TrainIterative(a) => train_iterative(&mut ws, a),
                Command::Translate(a) => translate(&ws, a),
                Command::Evaluate(a) => evaluate_model(&mut ws, a),
                Command::RunExperiment(a) => run_experiment(&ws, a),
                Command::GenToy(_) => unreachable!("handled above"),
            }
        }
    }
}

fn gen_toy(cli: &Cli, args: &GenToyArgs) -> Result<()> {
    let file = cli.config.clone().or_else(|| {
        let p = cli.run_dir.join("config.json");
        p.exists().then_some(p)
    });
    let mut config = ExperimentConfig::resolve(cli.paper_preset, file.as_deref(), std::env::vars())?;
    if let Some(seed) = cli.seed {
        config.set_seed(seed);
    }
    config.toy.validate()?;
    let out = args.out.clone().unwrap_or_else(|| cli.run_dir.join("toy"));
    let pair = generate_toy_pair(&config.toy)?;
    pair.save(&out)?;
    write_json(&out.join("spec.json"), &config.toy)?;
    println!("wrote toy pair to {}", out.display());
    Ok(())
}

fn read_pairs(src: &Path, tgt: &Path) -> Result<Vec<(String, String)>> {
    let s = read_corpus(src, Lang::Src)?.lines;
    let t = read_corpus(tgt, Lang::Tgt)?.lines;
    if s.len() != t.len() {
        return Err(Error::invalid(format!(
            "{} and {} differ in line count ({} vs {})",
            src.display(),
            tgt.display(),
            s.len(),
            t.len()
        )));
    }
    Ok(s.into_iter().zip(t).collect())
}

fn preprocess(ws: &mut Workspace, args: &PreprocessArgs) -> Result<()> {
    let opt_pairs = |a: &Option<PathBuf>, b: &Option<PathBuf>| -> Result<Vec<(String, String)>> {
        match (a, b) {
            (Some(a), Some(b)) => read_pairs(a, b),
            _ => Ok(Vec::new()),
        }
    };
    let (src, tgt, valid, test, gold) = match &args.toy {
        Some(dir) => (
            read_corpus(&dir.join("mono.src"), Lang::Src)?,
            read_corpus(&dir.join("mono.tgt"), Lang::Tgt)?,
            read_pairs(&dir.join("valid.src"), &dir.join("valid.tgt"))?,
            read_pairs(&dir.join("test.src"), &dir.join("test.tgt"))?,
            Some(load_dictionary(&dir.join("dict.gold.tsv"), DictProvenance::Gold)?),
        ),
        None => (
            read_corpus(args.src.as_deref().expect("clap requires --src"), Lang::Src)?,
            read_corpus(args.tgt.as_deref().expect("clap requires --tgt"), Lang::Tgt)?,
            opt_pairs(&args.valid_src, &args.valid_tgt)?,
            opt_pairs(&args.test_src, &args.test_tgt)?,
            None,
        ),
    };
    ws.manifest.invalidate(Stage::Preprocess);
    let data = prepare_data(&src, &tgt, &valid, &test, ws.config.bpe_merges, ws.config.lowercase)?;
    let d = ws.path(DATA);
    std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    let lc = ws.config.lowercase;
    let norm = |c: &RawCorpus| -> Vec<String> { crate::text::normalize_corpus(c, lc).lines };
    write_lines(&d.join("train.src"), &norm(&src))?;
    write_lines(&d.join("train.tgt"), &norm(&tgt))?;
    let mut outputs = vec!["data/train.src", "data/train.tgt", "data/bpe.codes", "vocab.txt"];
    for (name, set) in [("valid", &data.corpora.valid), ("test", &data.corpora.test)] {
        if !set.is_empty() {
            write_lines(&d.join(format!("{name}.src")), &set.text[0])?;
            write_lines(&d.join(format!("{name}.tgt")), &set.text[1])?;
        }
    }
    if !data.corpora.valid.is_empty() {
        outputs.extend(["data/valid.src", "data/valid.tgt"]);
    }
    if !data.corpora.test.is_empty() {
        outputs.extend(["data/test.src", "data/test.tgt"]);
    }
    data.bpe.save(&d.join("bpe.codes"))?;
    data.vocab().save(&ws.path("vocab.txt"))?;
    if let Some(gold) = gold {
        save_dictionary(&gold, &d.join("dict.gold.tsv"))?;
        save_dictionary(&spaced_subset(&gold, ws.config.seed_pairs), &d.join("dict.seed.tsv"))?;
        outputs.extend(["data/dict.gold.tsv", "data/dict.seed.tsv"]);
    }
    ws.complete(Stage::Preprocess, &outputs)?;
    println!(
        "vocabulary {} tokens, {} + {} monolingual sentences, {} valid / {} test pairs",
        data.vocab().len(),
        data.corpora.mono[0].len(),
        data.corpora.mono[1].len(),
        data.corpora.valid.len(),
        data.corpora.test.len()
    );
    Ok(())
}

fn train_embeddings(ws: &mut Workspace) -> Result<()> {
    let data = ws.data()?;
    ws.manifest.invalidate(Stage::Embed);
    let d = ws.path("embeddings");
    std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    for (lang, file) in [(Lang::Src, "src.vec"), (Lang::Tgt, "tgt.vec")] {
        let e = train_skipgram(&data.token_sentences(lang), &ws.config.embeddings.skipgram)?;
        save_embeddings(&e, &d.join(file))?;
        println!("{}: {} vectors of dim {}", lang.tag(), e.len(), e.dim());
    }
    ws.complete(Stage::Embed, &["embeddings/src.vec", "embeddings/tgt.vec"])
}

#[derive(Debug, Serialize, Deserialize)]
struct AlignmentReport {
    seed_pairs: usize,
    dictionary_sizes: Vec<usize>,
    iterations: usize,
    orthogonality_defect: f64,
}

fn align(ws: &mut Workspace, args: &AlignArgs) -> Result<()> {
    ws.require(Stage::Embed)?;
    let bpe = ws.bpe()?;
    let default_seed = ws.path("data/dict.seed.tsv");
    let seed_path = args.seed_dict.clone().or_else(|| default_seed.exists().then_some(default_seed));
    let seed = match seed_path {
        Some(p) => dictionary_units(&load_dictionary(&p, DictProvenance::Seed)?, &bpe),
        None => BilingualDictionary::new(Vec::new(), DictProvenance::Seed),
    };
    ws.manifest.invalidate(Stage::Align);
    let x = preprocess_embeddings(&load_embeddings(&ws.path("embeddings/src.vec"))?)?;
    let z = preprocess_embeddings(&load_embeddings(&ws.path("embeddings/tgt.vec"))?)?;
    let al = self_learning_align(&x, &z, &seed, &ws.config.embeddings.align)?;
    save_map(&al.map, &ws.path("embeddings/map.txt"))?;
    save_dictionary(&al.dictionary, &ws.path("embeddings/dict.induced.tsv"))?;
    let report = AlignmentReport {
        seed_pairs: seed.len(),
        dictionary_sizes: al.dictionary_sizes.clone(),
        iterations: al.iterations,
        orthogonality_defect: al.map.orthogonality_defect(),
    };
    write_json(&ws.path("embeddings/alignment.json"), &report)?;
    println!(
        "aligned in {} iterations from {} seed pairs; induced dictionary {} pairs",
        al.iterations,
        seed.len(),
        al.dictionary.len()
    );
    ws.complete(
        Stage::Align,
        &["embeddings/map.txt", "embeddings/dict.induced.tsv", "embeddings/alignment.json"],
    )
}

fn eval_dictionary(ws: &Workspace, args: &EvalDictionaryArgs) -> Result<()> {
    ws.require(Stage::Align)?;
    let gold_path = args.gold.clone().unwrap_or_else(|| ws.path("data/dict.gold.tsv"));
    let gold = dictionary_units(&load_dictionary(&gold_path, DictProvenance::Gold)?, &ws.bpe()?);
    let x = preprocess_embeddings(&load_embeddings(&ws.path("embeddings/src.vec"))?)?;
    let z = preprocess_embeddings(&load_embeddings(&ws.path("embeddings/tgt.vec"))?)?;
    let map = load_map(&ws.path("embeddings/map.txt"))?;
    let reports: Vec<RetrievalReport> = [Direction::SrcToTgt, Direction::TgtToSrc]
        .into_iter()
        .map(|d| word_translation_report(&map, &x, &z, &gold, d, ws.config.embeddings.align.k_csls))
        .collect::<Result<_>>()?;
    let path = ws.path("embeddings/word_translation.json");
    std::fs::write(&path, word_translation_json(&reports)?).map_err(|e| Error::io(&path, e))?;
    print!("{}", word_translation_table(&reports));
    Ok(())
}

/// Trains in `<run>/<stage>`, resuming from its latest checkpoint, and
/// records the stage.
fn train_stage(ws: &mut Workspace, stage: Stage, fresh: impl FnOnce(&Workspace, &PreparedData) -> Result<Checkpoint>) -> Result<()> {
    let data = ws.data()?;
    let name = stage.name();
    let dir = RunDir::new(ws.path(name))?;
    let latest = dir.latest_checkpoint();
    ws.manifest.invalidate(stage);
    ws.manifest.invalidate(Stage::Evaluate);
    let mut ck = if latest.exists() {
        log::info!("resuming {name} from {}", latest.display());
        Checkpoint::load(&latest, Some(&data.vocab().hash()))?
    } else {
        fresh(ws, &data)?
    };
    write_json(
        &dir.config(),
        &crate::pipeline::RunConfig {
            model: ck.model.config.clone(),
            train: ck.config.clone(),
        },
    )?;
    data.vocab().save(&dir.vocab())?;
    ck.run(
        &data.corpora,
        RunOptions {
            out: Some(&dir),
            ..Default::default()
        },
    )?;
    emit_curves(&ck.log, &dir.root.join("curves"))?;
    let mut summary = serde_json::json!({
        "regime": ck.config.regime,
        "embedding_mode": ck.config.embedding_mode,
        "epochs": ck.global_epoch,
        "best_epoch": ck.early.best_epoch,
    });
    if !data.corpora.test.is_empty() && !ck.phase.is_pretraining() {
        let s = translate_and_score(&ck.best_model(), &data.corpora.test, data.vocab(), 0)?;
        summary["test_bleu"] = serde_json::json!({"src-tgt": s.bleu[0], "tgt-src": s.bleu[1]});
        println!("{name}: test BLEU src-tgt {:.2}, tgt-src {:.2}", s.bleu[0], s.bleu[1]);
    }
    write_json(&dir.summary(), &summary)?;
    let rel = |f: &str| format!("{name}/{f}");
    let outs = [rel("checkpoints/best.ckpt"), rel("checkpoints/latest.ckpt"), rel("metrics.csv"), rel("summary.json")];
    let outs: Vec<&str> = outs.iter().map(String::as_str).collect();
    ws.complete(stage, &outs)?;
    println!("{name}: finished after {} epochs; outputs in {}", ck.global_epoch, dir.root.display());
    Ok(())
}

fn fresh_checkpoint(ws: &Workspace, data: &PreparedData, approach: Approach) -> Result<Checkpoint> {
    let (mc, tc) = configs_for(approach, &ws.config.model, &ws.config.train);
    let init = if approach.mode == EmbeddingMode::Random {
        None
    } else {
        Some(ws.crosslingual_init()?)
    };
    let (model, report) = init_model(&mc, data.vocab(), init.as_ref(), tc.seed)?;
    if approach.mode != EmbeddingMode::Random {
        log::info!(
            "embedding rows copied {}, without vectors {}",
            report.copied,
            report.missing.len()
        );
    }
    Checkpoint::new(model, tc, data.vocab())
}

fn pretrain(ws: &mut Workspace, args: &PretrainArgs) -> Result<()> {
    let regime = match args.objective {
        Objective::Mass => Regime::MassPretrain,
        Objective::Dae => Regime::DaePretrain,
    };
    let approach = Approach::new(regime, args.mode.mode);
    ws.manifest.invalidate(Stage::Finetune);
    train_stage(ws, Stage::Pretrain, |ws, data| {
        let mut ck = fresh_checkpoint(ws, data, approach)?;
        ck.config.max_epochs_finetune = 0;
        Ok(ck)
    })
}

fn finetune(ws: &mut Workspace, args: &FinetuneArgs) -> Result<()> {
    let from_scratch = args.from_scratch;
    if !from_scratch {
        ws.require(Stage::Pretrain)?;
    }
    let mode = args.mode;
    train_stage(ws, Stage::Finetune, |ws, data| {
        let mut ck = if from_scratch {
            fresh_checkpoint(ws, data, Approach::new(Regime::DaePretrain, mode))?
        } else {
            Checkpoint::load(
                &ws.path("pretrain/checkpoints/latest.ckpt"),
                Some(&data.vocab().hash()),
            )?
        };
        let mode = ck.config.embedding_mode;
        ck.config = crate::trainer::TrainConfig {
            regime: Regime::BtFinetune,
            embedding_mode: mode,
            ..ws.config.train.clone()
        };
        ck.start_phase(Regime::BtFinetune);
        Ok(ck)
    })
}

fn train_iterative(ws: &mut Workspace, args: &ModeArgs) -> Result<()> {
    let approach = Approach::new(Regime::DaeIterative, args.mode);
    train_stage(ws, Stage::Iterative, |ws, data| fresh_checkpoint(ws, data, approach))
}

fn load_model(ws: &Workspace, explicit: Option<&Path>, vocab: &Vocabulary) -> Result<Model> {
    match explicit.map(Path::to_path_buf).or_else(|| ws.best_checkpoint()) {
        Some(p) => Ok(Checkpoint::load(&p, Some(&vocab.hash()))?.best_model()),
        None => {
            log::warn!("no trained checkpoint in {}; using an untrained model", ws.dir.display());
            Model::new(ws.config.model.clone(), vocab.len(), ws.config.train.seed)
        }
    }
}

fn translate(ws: &Workspace, args: &TranslateArgs) -> Result<()> {
    ws.require(Stage::Preprocess)?;
    let bpe = ws.bpe()?;
    let vocab = ws.vocab()?;
    let model = load_model(ws, args.checkpoint.as_deref(), &vocab)?;
    let lines = read_corpus(&args.input, Lang::Src)?.lines;
    let max_len = args.max_len.unwrap_or(model.config.max_len);
    let out = translate_lines(
        &model,
        &bpe,
        &vocab,
        &lines,
        args.direction.target(),
        args.strategy,
        max_len,
        ws.config.lowercase,
    )?;
    match &args.output {
        Some(p) => write_lines(p, &out),
        None => {
            for l in &out {
                println!("{l}");
            }
            Ok(())
        }
    }
}

fn evaluate_files(cands: &Path, refs: &Path) -> Result<()> {
    let c = read_corpus(cands, Lang::Src)?.lines;
    let r = read_corpus(refs, Lang::Tgt)?.lines;
    let bleu = corpus_bleu(&c, &r)?;
    println!("BLEU {bleu:.1}");
    Ok(())
}

fn evaluate_model(ws: &mut Workspace, args: &EvaluateArgs) -> Result<()> {
    let data = ws.data()?;
    if data.corpora.test.is_empty() {
        return Err(Error::invalid("no test set; rerun preprocess with --test-src/--test-tgt"));
    }
    let explicit = args.checkpoint.as_deref();
    if explicit.is_none() && ws.best_checkpoint().is_none() {
        return Err(Error::MissingStage("finetune or train-iterative (no trained checkpoint)".into()));
    }
    let model = load_model(ws, explicit, data.vocab())?;
    let s = translate_and_score(&model, &data.corpora.test, data.vocab(), 0)?;
    write_lines(&ws.path("test.hyp.tgt"), &s.hypotheses[0])?;
    write_lines(&ws.path("test.hyp.src"), &s.hypotheses[1])?;
    write_json(
        &ws.path("evaluation.json"),
        &serde_json::json!({"test_bleu": {"src-tgt": s.bleu[0], "tgt-src": s.bleu[1]}}),
    )?;
    println!("BLEU src-tgt {:.2}", s.bleu[0]);
    println!("BLEU tgt-src {:.2}", s.bleu[1]);
    ws.complete(Stage::Evaluate, &["evaluation.json", "test.hyp.tgt", "test.hyp.src"])
}

/// Data and aligned embeddings for one seed of the experiment grid.
struct SeedSetup {
    seed: u64,
    data: PreparedData,
    crosslingual: CrosslingualSetup,
}

fn experiment_setup(ws: &Workspace, toy: Option<&Path>, seed: u64) -> Result<SeedSetup> {
    let c = &ws.config;
    let (src, tgt, valid, test, gold) = match toy {
        Some(dir) => (
            read_corpus(&dir.join("mono.src"), Lang::Src)?,
            read_corpus(&dir.join("mono.tgt"), Lang::Tgt)?,
            read_pairs(&dir.join("valid.src"), &dir.join("valid.tgt"))?,
            read_pairs(&dir.join("test.src"), &dir.join("test.tgt"))?,
            load_dictionary(&dir.join("dict.gold.tsv"), DictProvenance::Gold)?,
        ),
        None => {
            let pair = generate_toy_pair(&crate::toylang::ToyLangSpec { seed, ..c.toy.clone() })?;
            let gold = pair.gold_dictionary();
            (pair.mono_a, pair.mono_b, pair.valid, pair.test, gold)
        }
    };
    let data = prepare_data(&src, &tgt, &valid, &test, c.bpe_merges, c.lowercase)?;
    let gold = dictionary_units(&gold, &data.bpe);
    let seed_dict = spaced_subset(&gold, c.seed_pairs);
    let mut emb: EmbeddingConfig = c.embeddings.clone();
    emb.skipgram.seed = seed;
    let crosslingual = build_crosslingual(&data, &seed_dict, Some(&gold), &emb)?;
    Ok(SeedSetup {
        seed,
        data,
        crosslingual,
    })
}

fn parse_approaches(spec: &str) -> Result<Vec<Approach>> {
    if spec.trim() == "all" {
        return Ok(Approach::ALL.to_vec());
    }
    spec.split(',').map(|s| Approach::parse(s.trim())).collect()
}

/// Mean test BLEU per approach and direction over seeds, in table order.
pub fn results_table(summaries: &[RunSummary]) -> String {
    let mut out = String::from("| Approach | src-tgt | tgt-src | seeds |\n|---|---:|---:|---:|\n");
    for a in Approach::ALL {
        let rows: Vec<&RunSummary> = summaries.iter().filter(|s| s.approach == a).collect();
        if rows.is_empty() {
            continue;
        }
        let mean = |i: usize| rows.iter().map(|s| s.test_bleu[i]).sum::<f64>() / rows.len() as f64;
        out.push_str(&format!("| {} | {:.2} | {:.2} | {} |\n", a.label(), mean(0), mean(1), rows.len()));
    }
    out
}

fn run_experiment(ws: &Workspace, args: &RunExperimentArgs) -> Result<()> {
    let approaches = parse_approaches(&args.regimes)?;
    let seeds = if args.seeds.is_empty() {
        vec![ws.config.train.seed]
    } else {
        args.seeds.clone()
    };
    let runs_dir = ws.path("runs");
    let setups: Vec<SeedSetup> = seeds
        .par_iter()
        .map(|&s| experiment_setup(ws, args.toy.as_deref(), s))
        .collect::<Result<_>>()?;
    for s in &setups {
        let d = runs_dir.join(format!("seed-{}", s.seed));
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        let p = d.join("word_translation.json");
        std::fs::write(&p, word_translation_json(&s.crosslingual.reports)?).map_err(|e| Error::io(&p, e))?;
    }
    let jobs: Vec<(&SeedSetup, Approach)> = setups
        .iter()
        .flat_map(|s| approaches.iter().map(move |&a| (s, a)))
        .collect();
    let summaries: Vec<RunSummary> = jobs
        .par_iter()
        .map(|&(setup, approach)| -> Result<RunSummary> {
            let dir = runs_dir.join(format!("{}-s{}", approach.slug(), setup.seed));
            let mut manifest = RunManifest::open(&dir)?;
            if manifest.verified(&dir, Stage::Evaluate) {
                log::info!("{}: already complete", dir.display());
                return read_json(&dir.join("summary.json"));
            }
            let run_dir = RunDir::new(&dir)?;
            let train = crate::trainer::TrainConfig {
                seed: setup.seed,
                ..ws.config.train.clone()
            };
            let (summary, _) = run_approach(
                approach,
                &ws.config.model,
                &train,
                &setup.data,
                Some(&setup.crosslingual.init),
                Some(&run_dir),
            )?;
            let stage = if approach.regime == Regime::DaeIterative {
                Stage::Iterative
            } else {
                Stage::Finetune
            };
            let outs = [
                PathBuf::from("checkpoints/best.ckpt"),
                PathBuf::from("metrics.csv"),
            ];
            manifest.complete(&dir, stage, &outs)?;
            manifest.complete(&dir, Stage::Evaluate, &[PathBuf::from("summary.json")])?;
            log::info!(
                "{} seed {}: test BLEU {:.2} / {:.2}",
                approach.label(),
                setup.seed,
                summary.test_bleu[0],
                summary.test_bleu[1]
            );
            Ok(summary)
        })
        .collect::<Result<_>>()?;
    let table = results_table(&summaries);
    let md = ws.path("results.md");
    std::fs::write(&md, &table).map_err(|e| Error::io(&md, e))?;
    write_json(&ws.path("results.json"), &summaries)?;
    print!("{table}");
    Ok(())
}

/// One-line, machine-parseable rendering of an error.
pub fn error_line(e: &Error) -> String {
    let msg = serde_json::to_string(&e.to_string()).unwrap_or_else(|_| "\"?\"".into());
    format!("error kind={} code={} message={msg}", e.kind(), e.code())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn approach_lists_parse() {
        assert_eq!(parse_approaches("all").unwrap().len(), 8);
        let two = parse_approaches("dae_pretrain-static, dae_iterative-nonstatic").unwrap();
        assert_eq!(two[1], Approach::new(Regime::DaeIterative, EmbeddingMode::NonStatic));
        assert!(parse_approaches("nonsense").is_err());
    }

    #[test]
    fn error_line_is_single_line() {
        let e = Error::invalid("two\nlines");
        let l = error_line(&e);
        assert!(!l.contains('\n'));
        assert!(l.starts_with("error kind=invalid_argument code=5 "));
    }
}
