//! End-to-end training of the tiny encoder and head: batches from the
//! sampler, forward through encoder → head → loss, analytic backward, and an
//! optimizer update per batch. Also gradient checking, checkpoints, and the
//! pooler × MLP × loss ablation grid.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_vocab, encode_tokens, Corpus, TokenIds, Vocabulary};
use crate::encoder::{self, tiny_backward, tiny_forward, TinyEncoderParams};
use crate::error::{Error, Result};
use crate::format;
use crate::head::{embed, head_backward, Head, PoolerType};
use crate::loss::{contrastive_loss, loss_gradient, similarity_backward, similarity_matrix, LossConfig, LossType};
use crate::metrics::{alignment_report, mean_reciprocal_rank, AlignmentReport, EvalReport, LanguageEval};
use crate::sampler::{draw_batches, plan_epoch, Batch, SamplerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    /// β1 = 0.9, β2 = 0.999, ε = 1e-8.
    Adam,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub sampler: SamplerConfig,
    pub pooler: PoolerType,
    pub mlp_layers: usize,
    pub loss: LossConfig,
    /// Seeds parameter initialization; batch draws use `sampler.seed`.
    pub seed: u64,
    pub hidden: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            sampler: SamplerConfig::default(),
            pooler: PoolerType::Avg,
            mlp_layers: 0,
            loss: LossConfig::default(),
            seed: 42,
            hidden: encoder::DEFAULT_HIDDEN,
            max_len: encoder::DEFAULT_MAX_LEN,
            vocab_size: encoder::DEFAULT_VOCAB,
            init_scale: encoder::DEFAULT_INIT_SCALE,
        }
    }
}

impl TrainConfig {
    /// A learning rate of zero is accepted: it runs the full pipeline without
    /// moving any parameter.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.learning_rate) {
            return bad(format!("learning_rate must be in [0, 1], got {}", self.learning_rate));
        }
        if self.mlp_layers > crate::head::MAX_MLP_LAYERS {
            return bad(format!("mlp_layers must be 0, 1 or 2, got {}", self.mlp_layers));
        }
        if self.hidden == 0 {
            return bad("hidden must be positive".into());
        }
        if self.max_len < 2 {
            return bad("max_len must be at least 2".into());
        }
        if self.vocab_size < crate::corpus::NUM_RESERVED {
            return bad(format!("vocab_size must be at least {}", crate::corpus::NUM_RESERVED));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return bad("init_scale must be a finite non-negative number".into());
        }
        self.sampler.validate()?;
        self.loss.validate()
    }
}

fn derive_seed(seed: u64, stream: u64) -> u64 {
    crate::sampler::draw_seed(seed, stream as usize, "init")
}

/// Trainable parameters (or gradients of the same shape).
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub encoder: TinyEncoderParams,
    pub head: Head,
}

impl Params {
    pub fn init(cfg: &TrainConfig, vocab_size: usize) -> Result<Self> {
        Ok(Self {
            encoder: TinyEncoderParams::init(vocab_size, cfg.max_len, cfg.hidden, cfg.init_scale, derive_seed(cfg.seed, 1)),
            head: Head::init(cfg.pooler, cfg.mlp_layers, cfg.hidden, cfg.init_scale, derive_seed(cfg.seed, 2))?,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.zeros_like(),
            head: self.head.zeros_like(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.encoder.num_params() + self.head.num_params()
    }

    /// Contiguous parameter blocks in a fixed order: E, P, W1, b1, then each
    /// MLP layer's weight and bias.
    pub fn blocks(&self) -> Vec<&[f64]> {
        let e = &self.encoder;
        let mut out: Vec<&[f64]> = vec![
            e.token_embedding.as_slice().expect("standard layout"),
            e.position.as_slice().expect("standard layout"),
            e.w1.as_slice().expect("standard layout"),
            e.b1.as_slice().expect("standard layout"),
        ];
        for l in &self.head.layers {
            out.push(l.weight.as_slice().expect("standard layout"));
            out.push(l.bias.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let e = &mut self.encoder;
        let mut out: Vec<&mut [f64]> = vec![
            e.token_embedding.as_slice_mut().expect("standard layout"),
            e.position.as_slice_mut().expect("standard layout"),
            e.w1.as_slice_mut().expect("standard layout"),
            e.b1.as_slice_mut().expect("standard layout"),
        ];
        for l in &mut self.head.layers {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    /// Parameter `k` in [`Params::blocks`] order.
    pub fn get(&self, mut k: usize) -> f64 {
        for b in self.blocks() {
            if k < b.len() {
                return b[k];
            }
            k -= b.len();
        }
        panic!("parameter index out of range")
    }

    pub fn set(&mut self, mut k: usize, value: f64) {
        for b in self.blocks_mut() {
            if k < b.len() {
                b[k] = value;
                return;
            }
            k -= b.len();
        }
        panic!("parameter index out of range")
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Rounds every parameter to the nearest single-precision value, the
    /// precision checkpoints store.
    pub fn round_to_f32(&mut self) {
        for b in self.blocks_mut() {
            for v in b.iter_mut() {
                *v = f64::from(*v as f32);
            }
        }
    }
}

/// A vocabulary with encoder and head parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub vocab: Vocabulary,
    pub params: Params,
    pub max_len: usize,
}

/// Loss value and gradients for one batch.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub loss: f64,
    pub grads: Params,
}

impl Model {
    pub fn new(vocab: Vocabulary, cfg: &TrainConfig) -> Result<Self> {
        let params = Params::init(cfg, vocab.len())?;
        Ok(Self {
            vocab,
            params,
            max_len: cfg.max_len,
        })
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> TokenIds {
        encode_tokens(tokens, &self.vocab, self.max_len)
    }

    /// Unit sentence embeddings for already-encoded sequences.
    pub fn embed_ids(&self, batch: &[TokenIds]) -> Result<Array2<f64>> {
        let states = tiny_forward(&self.params.encoder, batch)?;
        embed(&states, &self.params.head)
    }

    pub fn embed_tokens<S: AsRef<str>>(&self, sequences: &[Vec<S>]) -> Result<Array2<f64>> {
        let ids: Vec<TokenIds> = sequences.iter().map(|s| self.encode(s)).collect();
        self.embed_ids(&ids)
    }

    /// Embeds every code and document of a corpus (in corpus order), in
    /// chunks to bound memory.
    pub fn embed_corpus(&self, corpus: &Corpus) -> Result<(Array2<f64>, Array2<f64>)> {
        const CHUNK: usize = 256;
        let h = self.params.encoder.hidden();
        let mut codes = Array2::zeros((corpus.len(), h));
        let mut docs = Array2::zeros((corpus.len(), h));
        for (c, chunk) in corpus.examples.chunks(CHUNK).enumerate() {
            let code_ids: Vec<TokenIds> = chunk.iter().map(|e| self.encode(&e.code_tokens)).collect();
            let doc_ids: Vec<TokenIds> = chunk.iter().map(|e| self.encode(&e.doc_tokens)).collect();
            let start = c * CHUNK;
            codes
                .slice_mut(ndarray::s![start..start + chunk.len(), ..])
                .assign(&self.embed_ids(&code_ids)?);
            docs.slice_mut(ndarray::s![start..start + chunk.len(), ..])
                .assign(&self.embed_ids(&doc_ids)?);
        }
        Ok((codes, docs))
    }

    pub fn batch_loss(&self, code: &[TokenIds], doc: &[TokenIds], loss_cfg: &LossConfig) -> Result<f64> {
        let c = self.embed_ids(code)?;
        let d = self.embed_ids(doc)?;
        let s = similarity_matrix(c.view(), d.view(), loss_cfg.temperature)?;
        Ok(contrastive_loss(&s, loss_cfg)?.total)
    }

    /// Loss and exact gradients of every parameter for one batch of pairs.
    pub fn loss_and_grads(&self, code: &[TokenIds], doc: &[TokenIds], loss_cfg: &LossConfig) -> Result<StepResult> {
        if code.len() != doc.len() {
            return Err(Error::ShapeMismatch(format!("{} codes, {} documents", code.len(), doc.len())));
        }
        let p = &self.params;
        let code_states = tiny_forward(&p.encoder, code)?;
        let doc_states = tiny_forward(&p.encoder, doc)?;
        let c = embed(&code_states, &p.head)?;
        let d = embed(&doc_states, &p.head)?;
        let s = similarity_matrix(c.view(), d.view(), loss_cfg.temperature)?;
        let loss = contrastive_loss(&s, loss_cfg)?.total;
        let d_s = loss_gradient(&s, loss_cfg)?;
        let (d_c, d_d) = similarity_backward(c.view(), d.view(), &d_s, loss_cfg.temperature);

        let (mut head_grads, code_state_grads) = head_backward(&code_states, &p.head, &d_c)?;
        let (doc_head_grads, doc_state_grads) = head_backward(&doc_states, &p.head, &d_d)?;
        for (a, b) in head_grads.layers.iter_mut().zip(&doc_head_grads.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }

        let mut enc_grads = tiny_backward(&p.encoder, code, &code_states, &code_state_grads)?;
        let doc_enc = tiny_backward(&p.encoder, doc, &doc_states, &doc_state_grads)?;
        enc_grads.token_embedding += &doc_enc.token_embedding;
        enc_grads.position += &doc_enc.position;
        enc_grads.w1 += &doc_enc.w1;
        enc_grads.b1 += &doc_enc.b1;

        Ok(StepResult {
            loss,
            grads: Params {
                encoder: enc_grads,
                head: head_grads,
            },
        })
    }
}

#[derive(Debug, Clone)]
enum OptimizerState {
    Sgd,
    Adam { m: Vec<f64>, v: Vec<f64>, t: i32 },
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    learning_rate: f64,
    state: OptimizerState,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, num_params: usize) -> Self {
        let state = match kind {
            OptimizerKind::Sgd => OptimizerState::Sgd,
            OptimizerKind::Adam => OptimizerState::Adam {
                m: vec![0.0; num_params],
                v: vec![0.0; num_params],
                t: 0,
            },
        };
        Self { learning_rate, state }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params) {
        let lr = self.learning_rate;
        let grad_blocks = grads.blocks();
        match &mut self.state {
            OptimizerState::Sgd => {
                for (p, g) in params.blocks_mut().into_iter().zip(grad_blocks) {
                    for (x, dx) in p.iter_mut().zip(g) {
                        *x -= lr * dx;
                    }
                }
            }
            OptimizerState::Adam { m, v, t } => {
                *t += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(*t);
                let c2 = 1.0 - ADAM_BETA2.powi(*t);
                let mut k = 0;
                for (p, g) in params.blocks_mut().into_iter().zip(grad_blocks) {
                    for (x, &dx) in p.iter_mut().zip(g) {
                        m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * dx;
                        v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * dx * dx;
                        let m_hat = m[k] / c1;
                        let v_hat = v[k] / c2;
                        *x -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                        k += 1;
                    }
                }
            }
        }
    }
}

/// Corpus pairs encoded once up front.
#[derive(Debug, Clone)]
pub struct EncodedCorpus {
    pub code: Vec<TokenIds>,
    pub doc: Vec<TokenIds>,
}

impl EncodedCorpus {
    pub fn new(model: &Model, corpus: &Corpus) -> Self {
        Self {
            code: corpus.examples.iter().map(|e| model.encode(&e.code_tokens)).collect(),
            doc: corpus.examples.iter().map(|e| model.encode(&e.doc_tokens)).collect(),
        }
    }

    pub fn batch(&self, batch: &Batch) -> (Vec<TokenIds>, Vec<TokenIds>) {
        (
            batch.indices.iter().map(|&i| self.code[i].clone()).collect(),
            batch.indices.iter().map(|&i| self.doc[i].clone()).collect(),
        )
    }
}

/// Stateful single-batch updates.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub loss: LossConfig,
    optimizer: Optimizer,
}

impl Trainer {
    pub fn new(model: Model, cfg: &TrainConfig) -> Self {
        let optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, model.params.num_params());
        Self {
            model,
            loss: cfg.loss,
            optimizer,
        }
    }

    /// One optimizer update; returns the loss before the update.
    pub fn step(&mut self, code: &[TokenIds], doc: &[TokenIds]) -> Result<f64> {
        let StepResult { loss, grads } = self.model.loss_and_grads(code, doc, &self.loss)?;
        if loss.is_finite() {
            self.optimizer.step(&mut self.model.params, &grads);
        }
        Ok(loss)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub language_order: Vec<String>,
    pub steps: usize,
    /// Mean batch loss over the epoch.
    pub mean_loss: f64,
    pub per_language: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
}

/// Trains a fresh model on `corpus` with a vocabulary built from it.
pub fn train(corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let vocab = build_vocab(corpus, cfg.vocab_size)?;
    let model = Model::new(vocab, cfg)?;
    train_model(model, corpus, cfg)
}

/// Trains an existing model. Epochs run language-contiguous monolingual
/// batches in the rotated order, resampled each epoch.
pub fn train_model(model: Model, corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let encoded = EncodedCorpus::new(&model, corpus);
    let mut trainer = Trainer::new(model, cfg);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let plan = plan_epoch(&corpus.stats, &cfg.sampler, epoch)?;
        let batches = draw_batches(corpus, &plan, &cfg.sampler);
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        let mut total = 0.0;
        for (step, batch) in batches.iter().enumerate() {
            let (code, doc) = encoded.batch(batch);
            let loss = match trainer.step(&code, &doc) {
                Ok(loss) => loss,
                Err(_) if !trainer.model.params.is_finite() => return Err(Error::Divergence { epoch, step }),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() || !trainer.model.params.is_finite() {
                return Err(Error::Divergence { epoch, step });
            }
            total += loss;
            let e = sums.entry(batch.language.clone()).or_default();
            e.0 += loss;
            e.1 += 1;
        }
        let steps = batches.len();
        history.push(EpochRecord {
            epoch,
            language_order: plan.language_order.clone(),
            steps,
            mean_loss: if steps > 0 { total / steps as f64 } else { f64::NAN },
            per_language: sums.into_iter().map(|(l, (s, n))| (l, s / n as f64)).collect(),
        });
    }

    let final_loss = history.last().map(|h| h.mean_loss);
    let checkpoint = Checkpoint::new(trainer.model, cfg.clone(), cfg.epochs, final_loss);
    Ok(TrainOutcome { checkpoint, history })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Flat index of the worst parameter, in [`Params::blocks`] order.
    pub worst_param: usize,
    pub analytic: f64,
    pub numeric: f64,
}

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares analytic end-to-end gradients with fourth-order central
/// differences at step `epsilon`.
///
/// With `max_params = None` every parameter is checked; otherwise a seeded
/// random subset of that size, drawn from the parameters the batch can
/// influence (embedding rows of present tokens, used positions, and all
/// dense weights).
pub fn grad_check(
    model: &Model,
    code: &[TokenIds],
    doc: &[TokenIds],
    loss_cfg: &LossConfig,
    epsilon: f64,
    max_params: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport> {
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::NonPositiveEpsilon);
    }
    let analytic = model.loss_and_grads(code, doc, loss_cfg)?.grads;

    let total = model.params.num_params();
    let candidates: Vec<usize> = match max_params {
        None => (0..total).collect(),
        Some(limit) => {
            let active = active_params(model, code.iter().chain(doc));
            if active.len() <= limit {
                active
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut picked: Vec<usize> = sample(&mut rng, active.len(), limit).into_iter().map(|i| active[i]).collect();
                picked.sort_unstable();
                picked
            }
        }
    };

    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: candidates.len(),
        worst_param: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for k in candidates {
        let original = model.params.get(k);
        let mut at = |offset: f64| -> Result<f64> {
            probe.params.set(k, original + offset);
            probe.batch_loss(code, doc, loss_cfg)
        };
        let (p1, m1, p2, m2) = (at(epsilon)?, at(-epsilon)?, at(2.0 * epsilon)?, at(-2.0 * epsilon)?);
        probe.params.set(k, original);
        let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * epsilon);
        let a = analytic.get(k);
        let err = relative_error(a, numeric);
        if err > report.max_rel_error || !err.is_finite() {
            report.max_rel_error = err;
            report.worst_param = k;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

fn active_params<'a>(model: &Model, seqs: impl Iterator<Item = &'a TokenIds>) -> Vec<usize> {
    let h = model.params.encoder.hidden();
    let mut tokens = std::collections::BTreeSet::new();
    let mut positions = std::collections::BTreeSet::new();
    for s in seqs {
        for t in 0..s.len() {
            if s.mask[t] {
                tokens.insert(s.ids[t] as usize);
                positions.insert(t);
            }
        }
    }
    let e_len = model.params.encoder.token_embedding.len();
    let p_len = model.params.encoder.position.len();
    let mut out = Vec::new();
    for t in tokens {
        out.extend(t * h..(t + 1) * h);
    }
    for t in positions {
        out.extend(e_len + t * h..e_len + (t + 1) * h);
    }
    out.extend(e_len + p_len..model.params.num_params());
    out
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.ccse";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub hidden: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub pooler: PoolerType,
    pub mlp_layers: usize,
    pub seed: u64,
    pub epochs_completed: usize,
    pub final_loss: Option<f64>,
    pub vocab_fingerprint: String,
    pub config: TrainConfig,
    /// Extra configuration recorded by the caller (for example the effective
    /// command-line configuration).
    #[serde(default)]
    pub run_config: Option<serde_json::Value>,
    /// Non-reserved tokens in id order.
    pub vocabulary: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub model: Model,
}

impl Checkpoint {
    /// Parameters are rounded to single precision so that saving and loading
    /// reproduces the model exactly.
    pub fn new(mut model: Model, config: TrainConfig, epochs_completed: usize, final_loss: Option<f64>) -> Self {
        model.params.round_to_f32();
        let manifest = Manifest {
            format_version: CHECKPOINT_FORMAT_VERSION,
            hidden: model.params.encoder.hidden(),
            max_len: model.max_len,
            vocab_size: model.vocab.len(),
            pooler: model.params.head.pooler,
            mlp_layers: model.params.head.mlp_layers(),
            seed: config.seed,
            epochs_completed,
            final_loss,
            vocab_fingerprint: model.vocab.fingerprint(),
            config,
            run_config: None,
            vocabulary: model.vocab.learned_tokens().to_vec(),
        };
        Self { manifest, model }
    }

    pub fn check_vocabulary(&self, vocab: &Vocabulary) -> Result<()> {
        if vocab.fingerprint() != self.manifest.vocab_fingerprint {
            return Err(Error::VocabularyMismatch);
        }
        Ok(())
    }

    fn blocks(&self) -> Vec<(String, Array2<f32>)> {
        let e = &self.model.params.encoder;
        let row = |v: &Array1<f64>| v.mapv(|x| x as f32).insert_axis(ndarray::Axis(0));
        let mut blocks = vec![
            ("W1".to_string(), e.w1.mapv(|x| x as f32)),
            ("b1".to_string(), row(&e.b1)),
            ("E".to_string(), e.token_embedding.mapv(|x| x as f32)),
            ("P".to_string(), e.position.mapv(|x| x as f32)),
        ];
        for (k, l) in self.model.params.head.layers.iter().enumerate() {
            blocks.push((format!("mlp{k}.W"), l.weight.mapv(|x| x as f32)));
            blocks.push((format!("mlp{k}.b"), row(&l.bias)));
        }
        blocks
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = serde_json::to_string_pretty(&ckpt.manifest)?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest + "\n").map_err(|e| Error::io(&path, e))?;
    format::write_blocks(dir.join(PARAMS_FILE), &ckpt.blocks())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    let version = raw.get("format_version").and_then(serde_json::Value::as_u64);
    if version != Some(u64::from(CHECKPOINT_FORMAT_VERSION)) {
        return Err(Error::VersionMismatch(format!(
            "format_version is {}, expected {CHECKPOINT_FORMAT_VERSION}",
            raw.get("format_version").map_or("missing".to_string(), |v| v.to_string())
        )));
    }
    let manifest: Manifest = serde_json::from_value(raw)?;

    let vocab = Vocabulary::from_tokens(manifest.vocabulary.iter().cloned());
    if vocab.fingerprint() != manifest.vocab_fingerprint {
        return Err(Error::VocabularyMismatch);
    }
    if vocab.len() != manifest.vocab_size {
        return Err(Error::TensorSizeMismatch(format!(
            "vocab_size (manifest says {}, vocabulary has {})",
            manifest.vocab_size,
            vocab.len()
        )));
    }

    let mut blocks: BTreeMap<String, Array2<f32>> = format::read_blocks(dir.join(PARAMS_FILE))?.into_iter().collect();
    let (h, v, l) = (manifest.hidden, manifest.vocab_size, manifest.max_len);
    let mut take = |name: &str, shape: (usize, usize)| -> Result<Array2<f64>> {
        let m = blocks
            .remove(name)
            .ok_or_else(|| Error::TensorSizeMismatch(format!("{name} (missing)")))?;
        if m.dim() != shape {
            return Err(Error::TensorSizeMismatch(format!(
                "{name} (expected {:?}, found {:?})",
                shape,
                m.dim()
            )));
        }
        Ok(m.mapv(f64::from))
    };
    let w1 = take("W1", (h, h))?;
    let b1 = take("b1", (1, h))?.row(0).to_owned();
    let token_embedding = take("E", (v, h))?;
    let position = take("P", (l, h))?;
    let mut layers = Vec::with_capacity(manifest.mlp_layers);
    for k in 0..manifest.mlp_layers {
        layers.push(crate::head::MlpLayer {
            weight: take(&format!("mlp{k}.W"), (h, h))?,
            bias: take(&format!("mlp{k}.b"), (1, h))?.row(0).to_owned(),
        });
    }
    if let Some(extra) = blocks.keys().next() {
        return Err(Error::TensorSizeMismatch(format!("{extra} (unexpected block)")));
    }

    let model = Model {
        vocab,
        params: Params {
            encoder: TinyEncoderParams {
                token_embedding,
                position,
                w1,
                b1,
            },
            head: Head {
                pooler: manifest.pooler,
                layers,
            },
        },
        max_len: manifest.max_len,
    };
    Ok(Checkpoint { manifest, model })
}

/// Per-language MRR of document queries against that language's full set of
/// code candidates, where query i's ground truth is code i.
pub fn evaluate_mrr(model: &Model, corpus: &Corpus) -> Result<EvalReport> {
    let (codes, docs) = model.embed_corpus(corpus)?;
    mrr_by_language(corpus, &codes, &docs)
}

/// As [`evaluate_mrr`] but over precomputed embeddings in corpus order.
pub fn mrr_by_language(corpus: &Corpus, codes: &Array2<f64>, docs: &Array2<f64>) -> Result<EvalReport> {
    let mut languages = BTreeMap::new();
    for lang in corpus.languages_in_order() {
        let rows = corpus.indices_of(&lang);
        let c = codes.select(ndarray::Axis(0), &rows);
        let d = docs.select(ndarray::Axis(0), &rows);
        let truth: Vec<usize> = (0..rows.len()).collect();
        let r = mean_reciprocal_rank(d.view(), c.view(), &truth)?;
        languages.insert(
            lang,
            LanguageEval {
                mrr: r.mrr,
                n_queries: rows.len(),
                n_candidates: rows.len(),
            },
        );
    }
    Ok(EvalReport::from_languages(languages))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub pooler: PoolerType,
    pub mlp_layers: usize,
    pub loss_type: LossType,
    pub final_loss: f64,
    pub alignment: AlignmentReport,
}

/// Trains one model per (pooler, MLP depth, loss type) combination on
/// `train_corpus` and scores alignment on `valid`. `on_entry` sees each
/// result as soon as it is ready.
pub fn run_ablation(
    train_corpus: &Corpus,
    valid: &Corpus,
    base: &TrainConfig,
    n_random: usize,
    mut on_entry: impl FnMut(&AblationEntry, &TrainOutcome) -> Result<()>,
) -> Result<Vec<AblationEntry>> {
    let vocab = build_vocab(train_corpus, base.vocab_size)?;
    let mut entries = Vec::with_capacity(27);
    for pooler in PoolerType::ALL {
        for mlp_layers in 0..=crate::head::MAX_MLP_LAYERS {
            for loss_type in LossType::ALL {
                let mut cfg = base.clone();
                cfg.pooler = pooler;
                cfg.mlp_layers = mlp_layers;
                cfg.loss.loss_type = loss_type;
                let model = Model::new(vocab.clone(), &cfg)?;
                let outcome = train_model(model, train_corpus, &cfg)?;
                let (c, d) = outcome.checkpoint.model.embed_corpus(valid)?;
                let alignment = alignment_report(c.view(), d.view(), n_random, cfg.seed)?;
                let entry = AblationEntry {
                    pooler,
                    mlp_layers,
                    loss_type,
                    final_loss: outcome.checkpoint.manifest.final_loss.unwrap_or(f64::NAN),
                    alignment,
                };
                on_entry(&entry, &outcome)?;
                entries.push(entry);
            }
        }
    }
    Ok(entries)
}
