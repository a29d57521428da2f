//! Training regimes: MASS or DAE pretraining followed by back-translation
//! fine-tuning, and single-stage alternating DAE/back-translation.

pub mod adam;
pub mod checkpoint;
pub mod init;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, clip_global_norm, is_frozen, AdamConfig, AdamState};
pub use checkpoint::RngState;
pub use init::{apply_embedding_mode, CrosslingualInit, InitReport, InitSource};

use crate::error::{Error, Result};
use crate::eval::{corpus_bleu, sentence_bleu, teacher_forced, MetricLog};
use crate::model::{Batch, EmbeddingMode, Example, Model, ModelConfig, Parameters, Strategy};
use crate::objectives::{dae_example, make_bt_batch, mass_mask, NoiseConfig};
use crate::text::{encode_lines, BpeModel, Lang, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    #[serde(rename = "MASS_pretrain")]
    MassPretrain,
    #[serde(rename = "DAE_pretrain")]
    DaePretrain,
    #[serde(rename = "BT_finetune")]
    BtFinetune,
    #[serde(rename = "DAE_iterative")]
    DaeIterative,
}

impl Regime {
    pub const ALL: [Regime; 4] = [
        Regime::MassPretrain,
        Regime::DaePretrain,
        Regime::BtFinetune,
        Regime::DaeIterative,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Regime::MassPretrain => "MASS_pretrain",
            Regime::DaePretrain => "DAE_pretrain",
            Regime::BtFinetune => "BT_finetune",
            Regime::DaeIterative => "DAE_iterative",
        }
    }

    pub fn is_pretraining(self) -> bool {
        matches!(self, Regime::MassPretrain | Regime::DaePretrain)
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('-', "_");
        match key.as_str() {
            "mass_pretrain" | "mass" => Ok(Regime::MassPretrain),
            "dae_pretrain" | "dae" => Ok(Regime::DaePretrain),
            "bt_finetune" | "bt" => Ok(Regime::BtFinetune),
            "dae_iterative" | "iterative" => Ok(Regime::DaeIterative),
            _ => Err(Error::invalid(format!("unknown regime `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub regime: Regime,
    pub embedding_mode: EmbeddingMode,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_sentences: usize,
    /// Batches stop growing once their source tokens would exceed this.
    pub token_cap: usize,
    pub epoch_steps: usize,
    pub max_epochs_pretrain: usize,
    pub max_epochs_finetune: usize,
    pub max_epochs_iterative: usize,
    pub patience: usize,
    pub seed: u64,
    pub word_mass: f64,
    pub shuffle_window: usize,
    pub drop_prob: f64,
    /// Global gradient-norm clip; `null` disables it.
    pub grad_clip: Option<f64>,
    pub bt_strategy: Strategy,
    /// Sentences per direction decoded for per-epoch BLEU; 0 means all.
    pub eval_sentences: usize,
    /// Epoch checkpoints kept on disk besides `latest` and `best`.
    pub keep_checkpoints: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            regime: Regime::DaePretrain,
            embedding_mode: EmbeddingMode::Random,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-9,
            batch_sentences: 16,
            token_cap: 3000,
            epoch_steps: 200,
            max_epochs_pretrain: 20,
            max_epochs_finetune: 10,
            max_epochs_iterative: 10,
            patience: 5,
            seed: 1,
            word_mass: 0.5,
            shuffle_window: 3,
            drop_prob: 0.1,
            grad_clip: Some(5.0),
            bt_strategy: Strategy::Greedy,
            eval_sentences: 200,
            keep_checkpoints: 2,
        }
    }

    pub fn paper() -> Self {
        Self {
            lr: 1e-4,
            batch_sentences: 64,
            token_cap: 3000,
            epoch_steps: 200_000,
            max_epochs_pretrain: 100,
            max_epochs_finetune: 50,
            max_epochs_iterative: 50,
            eval_sentences: 0,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(m));
        if !(self.lr > 0.0) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("beta1 and beta2 must lie in [0,1)".into());
        }
        if !(self.epsilon >= 0.0) {
            return fail("epsilon must be non-negative".into());
        }
        if self.patience == 0 {
            return fail("patience must be at least 1".into());
        }
        if self.batch_sentences == 0 || self.epoch_steps == 0 || self.token_cap == 0 {
            return fail("batch_sentences, token_cap and epoch_steps must be positive".into());
        }
        if !(self.word_mass > 0.0 && self.word_mass <= 1.0) {
            return fail("word_mass must lie in (0,1]".into());
        }
        if !(0.0..1.0).contains(&self.drop_prob) {
            return fail("drop_prob must lie in [0,1)".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return fail("grad_clip must be positive".into());
            }
        }
        if let Strategy::Beam(0) = self.bt_strategy {
            return fail("beam width must be at least 1".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn noise(&self) -> NoiseConfig {
        NoiseConfig {
            shuffle_window: self.shuffle_window,
            drop_prob: self.drop_prob,
            seed: self.seed,
        }
    }

    fn max_epochs(&self, phase: Regime) -> usize {
        match phase {
            Regime::MassPretrain | Regime::DaePretrain => self.max_epochs_pretrain,
            Regime::BtFinetune => self.max_epochs_finetune,
            Regime::DaeIterative => self.max_epochs_iterative,
        }
    }
}

/// The model configuration a regime needs: the single-stage regime signals
/// the output language by BOS token instead of language codes.
pub fn check_model_for_regime(model: &ModelConfig, train: &TrainConfig) -> Result<()> {
    let want_codes = train.regime != Regime::DaeIterative;
    if model.use_decoder_lang_code != want_codes {
        return Err(Error::invalid(format!(
            "regime {} needs use_decoder_lang_code = {want_codes}",
            train.regime
        )));
    }
    if model.embedding_mode != train.embedding_mode {
        return Err(Error::invalid("model and training configs disagree on embedding_mode"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepKind {
    /// Reconstruction (MASS or DAE) of a sentence in this language.
    Objective(Lang),
    /// Back-translation step whose gold side is in this language.
    BackTranslate { gold: Lang },
}

/// Step schedule. Pretraining alternates languages (src first); back-
/// translation alternates directions (into tgt first); the single-stage
/// regime cycles DAE src, DAE tgt, BT into tgt, BT into src.
pub fn step_kind(phase: Regime, phase_step: usize) -> StepKind {
    let lang = |i: usize| if i % 2 == 0 { Lang::Src } else { Lang::Tgt };
    match phase {
        Regime::MassPretrain | Regime::DaePretrain => StepKind::Objective(lang(phase_step)),
        Regime::BtFinetune => StepKind::BackTranslate {
            gold: lang(phase_step + 1),
        },
        Regime::DaeIterative => match phase_step % 4 {
            0 | 1 => StepKind::Objective(lang(phase_step)),
            _ => StepKind::BackTranslate {
                gold: lang(phase_step + 1),
            },
        },
    }
}

/// A parallel evaluation set, as ids and as normalized text.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParallelSet {
    pub ids: [Vec<Vec<usize>>; 2],
    pub text: [Vec<String>; 2],
}

impl ParallelSet {
    pub fn from_text(bpe: &BpeModel, vocab: &Vocabulary, src: &[String], tgt: &[String]) -> Result<Self> {
        if src.len() != tgt.len() {
            return Err(Error::DimensionMismatch {
                expected: src.len(),
                actual: tgt.len(),
            });
        }
        let mut set = Self::default();
        for (s, t) in src.iter().zip(tgt) {
            let si = encode_lines(bpe, vocab, std::slice::from_ref(s));
            let ti = encode_lines(bpe, vocab, std::slice::from_ref(t));
            if let (Some(si), Some(ti)) = (si.into_iter().next(), ti.into_iter().next()) {
                set.ids[0].push(si);
                set.ids[1].push(ti);
                set.text[0].push(s.clone());
                set.text[1].push(t.clone());
            }
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.ids[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids[0].is_empty()
    }

    /// Teacher-forced examples translating from `from` into the other side.
    pub fn examples(&self, from: Lang, bos: usize, max_len: usize) -> Vec<Example> {
        let to = from.other();
        self.ids[from.index()]
            .iter()
            .zip(&self.ids[to.index()])
            .map(|(s, t)| {
                let s = &s[..s.len().min(max_len)];
                let t = &t[..t.len().min(max_len - 1)];
                Example::seq2seq(s.to_vec(), from, t, to, bos)
            })
            .collect()
    }
}

/// Everything a run trains and evaluates on.
#[derive(Debug, Clone)]
pub struct Corpora {
    pub vocab: Vocabulary,
    pub mono: [Vec<Vec<usize>>; 2],
    pub valid: ParallelSet,
    pub test: ParallelSet,
}

impl Corpora {
    pub fn validate(&self) -> Result<()> {
        for l in [Lang::Src, Lang::Tgt] {
            if self.mono[l.index()].iter().all(|s| s.is_empty()) {
                return Err(Error::NoTrainingText);
            }
        }
        if self.valid.is_empty() {
            return Err(Error::invalid("empty validation set"));
        }
        Ok(())
    }
}

/// Patience-based stopping on one monitored metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub patience: usize,
    pub higher_is_better: bool,
    pub best: Option<f64>,
    pub best_epoch: usize,
    pub bad_epochs: usize,
}

impl EarlyStop {
    pub fn new(patience: usize, higher_is_better: bool) -> Self {
        Self {
            patience,
            higher_is_better,
            best: None,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    /// Records `value` for `epoch`; returns `(improved, stop)`.
    pub fn update(&mut self, epoch: usize, value: f64) -> (bool, bool) {
        let improved = match self.best {
            None => true,
            Some(b) if self.higher_is_better => value > b,
            Some(b) => value < b,
        };
        if improved {
            self.best = Some(value);
            self.best_epoch = epoch;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        (improved, self.bad_epochs >= self.patience)
    }
}

/// The 1-based epoch at which training on `history` would stop, if any.
pub fn early_stop(history: &[f64], patience: usize, higher_is_better: bool) -> Option<usize> {
    let mut es = EarlyStop::new(patience, higher_is_better);
    for (i, &v) in history.iter().enumerate() {
        if es.update(i + 1, v).1 {
            return Some(i + 1);
        }
    }
    None
}

/// Position in one language's reshuffled sentence stream.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cursor {
    pub pass: u64,
    pub pos: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub loss_sum: f64,
    pub tokens: usize,
    /// Steps per kind: objective src, objective tgt, BT into tgt, BT into src.
    pub steps: [usize; 4],
    pub bt_dropped: usize,
    pub skipped_steps: usize,
}

fn kind_slot(kind: StepKind) -> usize {
    match kind {
        StepKind::Objective(Lang::Src) => 0,
        StepKind::Objective(Lang::Tgt) => 1,
        StepKind::BackTranslate { gold: Lang::Tgt } => 2,
        StepKind::BackTranslate { gold: Lang::Src } => 3,
    }
}

/// Full training state; saving and reloading it continues a run exactly.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub opt: AdamState,
    pub config: TrainConfig,
    pub log: MetricLog,
    pub vocab_hash: String,
    /// The stage currently being trained.
    pub phase: Regime,
    /// Completed epochs of this stage.
    pub epoch: usize,
    /// Completed steps of the current epoch.
    pub step: usize,
    /// Completed epochs over all stages, for checkpoint file names.
    pub global_epoch: usize,
    pub cursors: [Cursor; 2],
    pub stats: EpochStats,
    pub early: EarlyStop,
    pub rng: ChaCha8Rng,
    /// Parameters at the best epoch of the current stage.
    pub best: Option<Parameters>,
    pub finished: bool,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    model_config: ModelConfig,
    train_config: TrainConfig,
    vocab_hash: String,
    vocab_size: usize,
    log: MetricLog,
    phase: Regime,
    epoch: usize,
    step: usize,
    global_epoch: usize,
    cursors: [Cursor; 2],
    stats: EpochStats,
    early: EarlyStop,
    rng: RngState,
    adam_step: u64,
    has_best: bool,
    finished: bool,
}

/// Per-step information handed to an observer.
#[derive(Debug)]
pub struct StepInfo<'a> {
    pub phase: Regime,
    pub epoch: usize,
    pub phase_step: usize,
    pub kind: StepKind,
    pub batch: &'a Batch,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Finished,
    /// Stopped early because the step budget ran out.
    Interrupted,
}

/// Run directory layout.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for d in [root.join("checkpoints"), root.join("samples")] {
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(Self { root })
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn vocab(&self) -> PathBuf {
        self.root.join("vocab.txt")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.json")
    }

    pub fn samples(&self) -> PathBuf {
        self.root.join("samples")
    }

    pub fn epoch_checkpoint(&self, epoch: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("epoch_{epoch:04}.ckpt"))
    }

    pub fn latest_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints").join("latest.ckpt")
    }

    pub fn best_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints").join("best.ckpt")
    }
}

/// Writes the whole log as `epoch,regime,metric,value`. Metric names in
/// the log are `<regime>.<metric>`.
pub fn write_metrics_csv(log: &MetricLog, path: &Path) -> Result<()> {
    let mut out = String::from("epoch,regime,metric,value\n");
    for (epoch, name, value) in &log.series {
        let (regime, metric) = name.split_once('.').unwrap_or(("", name));
        out.push_str(&format!("{epoch},{regime},{metric},{value:.6}\n"));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Observer and budget for one call of [`Checkpoint::run`].
#[derive(Default)]
pub struct RunOptions<'a> {
    pub out: Option<&'a RunDir>,
    /// Interrupt after this many optimizer steps (across stages).
    pub max_steps: Option<usize>,
    pub on_step: Option<&'a mut dyn FnMut(&StepInfo<'_>)>,
}

const EVAL_BATCH: usize = 64;
const SAMPLE_LINES: usize = 5;

fn cursor_order(seed: u64, lang: Lang, pass: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let s = seed ^ (0x5851_f42d_4c95_7f2d_u64.wrapping_mul(pass + 1)) ^ ((lang.index() as u64 + 1) << 56);
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
    order
}

impl Checkpoint {
    /// Fresh state at the first stage of `config.regime`.
    pub fn new(model: Model, config: TrainConfig, vocab: &Vocabulary) -> Result<Self> {
        config.validate()?;
        check_model_for_regime(&model.config, &config)?;
        if vocab.len() != model.params.vocab_size() {
            return Err(Error::DimensionMismatch {
                expected: model.params.vocab_size(),
                actual: vocab.len(),
            });
        }
        let opt = AdamState::new(&model.params);
        let rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x7452_4149_4e));
        let phase = config.regime;
        Ok(Self {
            opt,
            rng,
            log: MetricLog::new(format!("{}-{}-s{}", config.regime, config.embedding_mode, config.seed)),
            vocab_hash: vocab.hash(),
            phase,
            epoch: 0,
            step: 0,
            global_epoch: 0,
            cursors: [Cursor::default(); 2],
            stats: EpochStats::default(),
            early: EarlyStop::new(config.patience, !phase.is_pretraining()),
            best: None,
            finished: false,
            model,
            config,
        })
    }

    /// Begins a new stage from the best parameters of the previous one,
    /// with fresh optimizer moments.
    pub fn start_phase(&mut self, phase: Regime) {
        if let Some(best) = self.best.take() {
            self.model.params = best;
        }
        self.opt = AdamState::new(&self.model.params);
        self.phase = phase;
        self.epoch = 0;
        self.step = 0;
        self.stats = EpochStats::default();
        self.early = EarlyStop::new(self.config.patience, !phase.is_pretraining());
        self.finished = false;
    }

    /// Parameters to evaluate: the best epoch's, else the current ones.
    pub fn best_model(&self) -> Model {
        Model {
            config: self.model.config.clone(),
            params: self.best.clone().unwrap_or_else(|| self.model.params.clone()),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            model_config: self.model.config.clone(),
            train_config: self.config.clone(),
            vocab_hash: self.vocab_hash.clone(),
            vocab_size: self.model.params.vocab_size(),
            log: self.log.clone(),
            phase: self.phase,
            epoch: self.epoch,
            step: self.step,
            global_epoch: self.global_epoch,
            cursors: self.cursors,
            stats: self.stats.clone(),
            early: self.early.clone(),
            rng: RngState::capture(&self.rng),
            adam_step: self.opt.step,
            has_best: self.best.is_some(),
            finished: self.finished,
        };
        let mut sections = vec![
            ("params", &self.model.params),
            ("adam_m", &self.opt.m),
            ("adam_v", &self.opt.v),
        ];
        if let Some(b) = &self.best {
            sections.push(("best", b));
        }
        checkpoint::write_container(path, &header, &sections)
    }

    /// Loads a checkpoint, rejecting it when `vocab_hash` is given and
    /// differs from the stored one.
    pub fn load(path: &Path, vocab_hash: Option<&str>) -> Result<Self> {
        let (h, sections): (CheckpointHeader, _) = checkpoint::read_container(path, |h: &CheckpointHeader| {
            h.model_config.validate()?;
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            Ok(Parameters::init(&h.model_config, h.vocab_size, &mut rng))
        })?;
        if let Some(want) = vocab_hash {
            if want != h.vocab_hash {
                return Err(Error::Checkpoint(format!(
                    "{}: vocabulary hash differs from the run vocabulary",
                    path.display()
                )));
            }
        }
        let mut params = None;
        let mut m = None;
        let mut v = None;
        let mut best = None;
        for (name, p) in sections {
            match name.as_str() {
                "params" => params = Some(p),
                "adam_m" => m = Some(p),
                "adam_v" => v = Some(p),
                "best" => best = Some(p),
                other => return Err(Error::Checkpoint(format!("unknown section {other}"))),
            }
        }
        let missing = || Error::Checkpoint(format!("{}: missing tensor section", path.display()));
        if h.has_best != best.is_some() {
            return Err(missing());
        }
        Ok(Self {
            model: Model {
                config: h.model_config,
                params: params.ok_or_else(missing)?,
            },
            opt: AdamState {
                m: m.ok_or_else(missing)?,
                v: v.ok_or_else(missing)?,
                step: h.adam_step,
            },
            config: h.train_config,
            log: h.log,
            vocab_hash: h.vocab_hash,
            phase: h.phase,
            epoch: h.epoch,
            step: h.step,
            global_epoch: h.global_epoch,
            cursors: h.cursors,
            stats: h.stats,
            early: h.early,
            rng: h.rng.restore()?,
            best,
            finished: h.finished,
        })
    }

    fn next_sentences<'c>(&mut self, corpora: &'c Corpora, lang: Lang) -> Vec<&'c [usize]> {
        let mono = &corpora.mono[lang.index()];
        let max_len = self.model.config.max_len - 1;
        let mut out = Vec::with_capacity(self.config.batch_sentences);
        let mut tokens = 0;
        let mut order = cursor_order(self.config.seed, lang, self.cursors[lang.index()].pass, mono.len());
        let mut guard = 0;
        while out.len() < self.config.batch_sentences && guard <= 2 * mono.len() {
            guard += 1;
            let c = &mut self.cursors[lang.index()];
            if c.pos >= order.len() {
                c.pass += 1;
                c.pos = 0;
                order = cursor_order(self.config.seed, lang, c.pass, mono.len());
            }
            let s = &mono[order[c.pos]];
            let s = &s[..s.len().min(max_len)];
            if s.is_empty() {
                c.pos += 1;
                continue;
            }
            if !out.is_empty() && tokens + s.len() > self.config.token_cap {
                break;
            }
            c.pos += 1;
            tokens += s.len();
            out.push(s);
        }
        out
    }

    fn build_examples(&mut self, corpora: &Corpora, kind: StepKind) -> Result<Vec<Example>> {
        let cfg = self.model.config.clone();
        match kind {
            StepKind::Objective(lang) => {
                let sentences = self.next_sentences(corpora, lang);
                let bos = cfg.decoder_bos(lang);
                let noise = self.config.noise();
                Ok(sentences
                    .into_iter()
                    .map(|s| match self.phase {
                        Regime::MassPretrain => mass_mask(s, self.config.word_mass, &mut self.rng).into_example(lang, bos),
                        _ => dae_example(s, lang, bos, &noise, &mut self.rng),
                    })
                    .collect())
            }
            StepKind::BackTranslate { gold } => {
                let sentences = self.next_sentences(corpora, gold);
                let longest = sentences.iter().map(|s| s.len()).max().unwrap_or(1);
                let gen_len = (2 * longest + 4).min(cfg.max_len);
                let (pairs, dropped) = make_bt_batch(&self.model, &sentences, gold, self.config.bt_strategy, gen_len)?;
                self.stats.bt_dropped += dropped;
                let bos = cfg.decoder_bos(gold);
                Ok(pairs.into_iter().map(|p| p.into_example(bos)).collect())
            }
        }
    }

    fn train_step(&mut self, corpora: &Corpora, on_step: &mut Option<&mut dyn FnMut(&StepInfo<'_>)>) -> Result<()> {
        let phase_step = self.epoch * self.config.epoch_steps + self.step;
        let kind = step_kind(self.phase, phase_step);
        let examples = self.build_examples(corpora, kind)?;
        self.stats.steps[kind_slot(kind)] += 1;
        if examples.is_empty() {
            self.stats.skipped_steps += 1;
            return Ok(());
        }
        let batch = Batch::from_examples(&examples)?;
        let dropout = self.model.config.dropout > 0.0;
        let (loss, mut grads) = self
            .model
            .backward(&batch, if dropout { Some(&mut self.rng) } else { None })?;
        let mode = self.config.embedding_mode;
        if let Some(c) = self.config.grad_clip {
            clip_global_norm(&mut grads, c, mode);
        }
        adam_step(&mut self.model.params, &grads, &mut self.opt, &self.config.adam(), mode)?;
        let n = batch.num_target_tokens();
        self.stats.loss_sum += loss * n as f64;
        self.stats.tokens += n;
        if let Some(f) = on_step.as_mut() {
            f(&StepInfo {
                phase: self.phase,
                epoch: self.epoch,
                phase_step,
                kind,
                batch: &batch,
                loss,
            });
        }
        Ok(())
    }

    fn log_metric(&mut self, name: &str, value: f64) -> Result<()> {
        let epoch = self.epoch;
        let key = format!("{}.{name}", self.phase);
        self.log.push(epoch, &key, value)
    }

    /// Objective loss on the validation sentences with a fixed noise seed.
    fn valid_objective_loss(&self, corpora: &Corpora) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x0bad_5eed);
        let noise = self.config.noise();
        let max_len = self.model.config.max_len - 1;
        let mut examples = Vec::new();
        for lang in [Lang::Src, Lang::Tgt] {
            let bos = self.model.config.decoder_bos(lang);
            for s in &corpora.valid.ids[lang.index()] {
                let s = &s[..s.len().min(max_len)];
                examples.push(match self.phase {
                    Regime::MassPretrain => mass_mask(s, self.config.word_mass, &mut rng).into_example(lang, bos),
                    _ => dae_example(s, lang, bos, &noise, &mut rng),
                });
            }
        }
        Ok(teacher_forced(&self.model, &examples, EVAL_BATCH)?.mean_loss())
    }

    fn evaluate_epoch(&mut self, corpora: &Corpora, out: Option<&RunDir>) -> Result<f64> {
        let train_loss = if self.stats.tokens > 0 {
            self.stats.loss_sum / self.stats.tokens as f64
        } else {
            0.0
        };
        self.log_metric("train_loss", train_loss)?;
        let max_len = self.model.config.max_len;
        let mut tf = crate::eval::TeacherForced::default();
        for from in [Lang::Src, Lang::Tgt] {
            let bos = self.model.config.decoder_bos(from.other());
            let ex = corpora.valid.examples(from, bos, max_len);
            let r = teacher_forced(&self.model, &ex, EVAL_BATCH)?;
            tf.cross_entropy += r.cross_entropy;
            tf.tokens += r.tokens;
            tf.correct += r.correct;
        }
        self.log_metric("valid_ppl", tf.perplexity())?;
        self.log_metric("valid_acc", tf.accuracy())?;

        if self.phase.is_pretraining() {
            let obj = self.valid_objective_loss(corpora)?;
            self.log_metric("valid_objective_ppl", obj.exp())?;
            return Ok(obj.exp());
        }

        self.log_metric("steps_src-tgt", self.stats.steps[2] as f64)?;
        self.log_metric("steps_tgt-src", self.stats.steps[3] as f64)?;
        self.log_metric("bt_dropped", self.stats.bt_dropped as f64)?;
        let limit = self.config.eval_sentences;
        let valid = translate_and_score(&self.model, &corpora.valid, &corpora.vocab, limit)?;
        self.log_metric("valid_bleu_src-tgt", valid.bleu[0])?;
        self.log_metric("valid_bleu_tgt-src", valid.bleu[1])?;
        let valid_bleu = 0.5 * (valid.bleu[0] + valid.bleu[1]);
        self.log_metric("valid_bleu", valid_bleu)?;
        if !corpora.test.is_empty() {
            let test = translate_and_score(&self.model, &corpora.test, &corpora.vocab, limit)?;
            self.log_metric("test_bleu_src-tgt", test.bleu[0])?;
            self.log_metric("test_bleu_tgt-src", test.bleu[1])?;
            self.log_metric("test_bleu", 0.5 * (test.bleu[0] + test.bleu[1]))?;
        }
        if let Some(dir) = out {
            let path = dir.samples().join(format!("epoch_{:04}.txt", self.global_epoch + 1));
            let mut text = String::new();
            for (i, hyp) in valid.hypotheses[0].iter().take(SAMPLE_LINES).enumerate() {
                let (src, reference) = (&corpora.valid.text[0][i], &corpora.valid.text[1][i]);
                text.push_str(&format!(
                    "src: {src}\nhyp: {hyp}\nref: {reference}\nsentence_bleu: {:.2}\n\n",
                    sentence_bleu(hyp, reference)
                ));
            }
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(valid_bleu)
    }

    fn end_epoch(&mut self, corpora: &Corpora, out: Option<&RunDir>) -> Result<()> {
        self.epoch += 1;
        let monitored = self.evaluate_epoch(corpora, out)?;
        self.global_epoch += 1;
        self.step = 0;
        self.stats = EpochStats::default();
        let (improved, stop) = self.early.update(self.epoch, monitored);
        log::info!(
            "{} epoch {} monitored {:.4}{}",
            self.phase,
            self.epoch,
            monitored,
            if improved { " (best)" } else { "" }
        );
        if improved {
            self.best = Some(self.model.params.clone());
        }
        if stop || self.epoch >= self.config.max_epochs(self.phase) {
            self.finished = true;
        }
        if let Some(dir) = out {
            write_metrics_csv(&self.log, &dir.metrics())?;
            self.save(&dir.epoch_checkpoint(self.global_epoch))?;
            self.save(&dir.latest_checkpoint())?;
            if improved {
                self.save(&dir.best_checkpoint())?;
            }
            let keep = self.config.keep_checkpoints;
            if self.global_epoch > keep {
                let old = dir.epoch_checkpoint(self.global_epoch - keep);
                if old.exists() {
                    std::fs::remove_file(&old).map_err(|e| Error::io(&old, e))?;
                }
            }
        }
        Ok(())
    }

    /// Trains until every stage of the configured regime is finished or
    /// the step budget runs out. Two-stage regimes continue with
    /// back-translation from the best pretraining epoch.
    pub fn run(&mut self, corpora: &Corpora, mut opts: RunOptions<'_>) -> Result<Outcome> {
        corpora.validate()?;
        if corpora.vocab.hash() != self.vocab_hash {
            return Err(Error::Checkpoint("corpora vocabulary differs from the checkpoint".into()));
        }
        let mut budget = opts.max_steps;
        loop {
            while !self.finished {
                if self.config.max_epochs(self.phase) == 0 {
                    self.finished = true;
                    break;
                }
                while self.step < self.config.epoch_steps {
                    if budget == Some(0) {
                        if let Some(dir) = opts.out {
                            write_metrics_csv(&self.log, &dir.metrics())?;
                            self.save(&dir.latest_checkpoint())?;
                        }
                        return Ok(Outcome::Interrupted);
                    }
                    if let Err(e) = self.train_step(corpora, &mut opts.on_step) {
                        if let (Error::NonFinite(_), Some(dir)) = (&e, opts.out) {
                            let _ = self.save(&dir.root.join("checkpoints").join("failed.ckpt"));
                        }
                        return Err(e);
                    }
                    self.step += 1;
                    budget = budget.map(|b| b - 1);
                }
                self.end_epoch(corpora, opts.out)?;
            }
            if self.phase.is_pretraining() && self.config.regime.is_pretraining() {
                self.start_phase(Regime::BtFinetune);
                if let Some(dir) = opts.out {
                    self.save(&dir.latest_checkpoint())?;
                }
                continue;
            }
            return Ok(Outcome::Finished);
        }
    }
}

/// Greedy translations of (up to `limit` of) a parallel set in both
/// directions, with corpus BLEU per direction.
pub struct Scored {
    pub hypotheses: [Vec<String>; 2],
    pub bleu: [f64; 2],
}

pub fn translate_and_score(model: &Model, set: &ParallelSet, vocab: &Vocabulary, limit: usize) -> Result<Scored> {
    let n = if limit == 0 { set.len() } else { limit.min(set.len()) };
    let mut hypotheses: [Vec<String>; 2] = Default::default();
    let mut bleu = [0.0; 2];
    for from in [Lang::Src, Lang::Tgt] {
        let to = from.other();
        let sources: Vec<&[usize]> = set.ids[from.index()][..n].iter().map(|s| s.as_slice()).collect();
        let mut hyps = Vec::with_capacity(n);
        for chunk in sources.chunks(EVAL_BATCH) {
            let langs = vec![to; chunk.len()];
            let longest = chunk.iter().map(|s| s.len()).max().unwrap_or(1);
            let out = model.translate_batch(chunk, &langs, Strategy::Greedy, 2 * longest + 4)?;
            for ids in out {
                hyps.push(vocab.decode(&ids)?);
            }
        }
        bleu[from.index()] = corpus_bleu(&hyps, &set.text[to.index()][..n])?;
        hypotheses[from.index()] = hyps;
    }
    Ok(Scored { hypotheses, bleu })
}

/// Pretraining stage only (MASS or DAE), as configured.
pub fn pretrain(config: TrainConfig, corpora: &Corpora, model: Model, out: Option<&RunDir>) -> Result<Checkpoint> {
    if !config.regime.is_pretraining() {
        return Err(Error::invalid("pretrain needs a MASS or DAE regime"));
    }
    let mut ck = Checkpoint::new(model, config, &corpora.vocab)?;
    ck.config.max_epochs_finetune = 0;
    ck.run(
        corpora,
        RunOptions {
            out,
            ..Default::default()
        },
    )?;
    Ok(ck)
}

/// Back-translation fine-tuning from a pretraining checkpoint (or from a
/// fresh model for the ablation).
pub fn finetune_bt(
    config: TrainConfig,
    corpora: &Corpora,
    mut checkpoint: Checkpoint,
    out: Option<&RunDir>,
) -> Result<Checkpoint> {
    config.validate()?;
    checkpoint.config = TrainConfig {
        regime: Regime::BtFinetune,
        ..config
    };
    checkpoint.start_phase(Regime::BtFinetune);
    checkpoint.run(
        corpora,
        RunOptions {
            out,
            ..Default::default()
        },
    )?;
    Ok(checkpoint)
}

/// Single-stage alternating denoising and back-translation.
pub fn train_dae_iterative(config: TrainConfig, corpora: &Corpora, model: Model, out: Option<&RunDir>) -> Result<Checkpoint> {
    if config.regime != Regime::DaeIterative {
        return Err(Error::invalid("train_dae_iterative needs the DAE_iterative regime"));
    }
    let mut ck = Checkpoint::new(model, config, &corpora.vocab)?;
    ck.run(
        corpora,
        RunOptions {
            out,
            ..Default::default()
        },
    )?;
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_history_stops_after_patience() {
        assert_eq!(early_stop(&[3.0; 10], 3, false), Some(4));
        let improving: Vec<f64> = (0..20).map(|i| 10.0 - i as f64).collect();
        assert_eq!(early_stop(&improving, 3, false), None);
    }

    #[test]
    fn best_epoch_tracks_minimum() {
        let mut es = EarlyStop::new(5, false);
        for (i, v) in [9.0, 7.0, 8.0, 6.5, 6.9].iter().enumerate() {
            es.update(i + 1, *v);
        }
        assert_eq!(es.best_epoch, 4);
        assert_eq!(es.best, Some(6.5));
    }

    #[test]
    fn schedules() {
        let kinds: Vec<StepKind> = (0..8).map(|i| step_kind(Regime::DaeIterative, i)).collect();
        use StepKind::*;
        let cycle = [
            Objective(Lang::Src),
            Objective(Lang::Tgt),
            BackTranslate { gold: Lang::Tgt },
            BackTranslate { gold: Lang::Src },
        ];
        assert_eq!(kinds[..4], cycle);
        assert_eq!(kinds[4..], cycle);
        assert_eq!(step_kind(Regime::DaePretrain, 3), Objective(Lang::Tgt));
        assert_eq!(step_kind(Regime::BtFinetune, 0), BackTranslate { gold: Lang::Tgt });
    }

    #[test]
    fn regime_names_parse() {
        for r in Regime::ALL {
            assert_eq!(r.name().parse::<Regime>().unwrap(), r);
        }
        let json = serde_json::to_string(&Regime::DaeIterative).unwrap();
        assert_eq!(json, "\"DAE_iterative\"");
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let mut v = serde_json::to_value(TrainConfig::desk()).unwrap();
        v["bogus"] = serde_json::json!(1);
        assert!(serde_json::from_value::<TrainConfig>(v).is_err());
    }
}
