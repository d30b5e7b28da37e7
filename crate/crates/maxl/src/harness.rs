//! Experiment harness: pretraining for the two networks, the comparison
//! regimes (pretrain-only baseline, ASR fine-tuning, multi-task on ground
//! truth, joint meta-training exact / first-order, NLU retraining on ASR
//! hypotheses), the semi-supervised variant, and run artifacts.
//!
//! Joint meta-training regimes are guarded by the semantic-tag access
//! counter: if anything reads tags between pretraining and evaluation the
//! run aborts. An "end-to-end from scratch" comparison row is deliberately
//! not provided; there is no reference construction for it.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{
    bce_with_logits, grad, one_hot_rows, sum_nodes, Node, ParamSet, Shape,
};
use crate::evalx::{self, decode_corpus, evaluate, Metrics};
use crate::interface::{convert, InterfacePayload, InterfaceKind, BatchTargets};
use crate::nets::{
    asr_loss_batch, init_multitask, init_nlu, multitask_forward_batch, nlu_forward_batch,
    AcousticBatch, NetConfig, TokenBatch, TriplePrediction,
};
use crate::synthdata::{
    generate_transcript_pool, reset_tag_access_count, split_semi_supervised, tag_access_count,
    Corpus, GrammarSpec, Triple, Utterance, PAD,
};
use crate::train::{train_epoch, EpochMetrics, SecondOrder, TrainConfig};
use crate::Error;

// ── Adam (pretraining only; joint stages use plain SGD) ──────────────

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    fn new(lr: f64, n: usize) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) {
        self.t += 1;
        let g = grads.flat_values();
        let mut x = params.flat_values();
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..x.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            x[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
        *params = params.with_flat_values(&x);
    }
}

// ── Pretraining ──────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainConfig {
    /// Size of the disjoint transcript-only pool for ASR pretraining. Pool
    /// transcripts are context-free random token sequences, so pretraining
    /// cannot resolve homophones.
    pub pool_size: usize,
    pub asr_epochs: usize,
    pub nlu_epochs: usize,
    pub asr_lr: f64,
    pub nlu_lr: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            pool_size: 1000,
            asr_epochs: 8,
            nlu_epochs: 50,
            asr_lr: 3e-3,
            nlu_lr: 5e-3,
            batch_size: 32,
        }
    }
}

fn batch_order(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Pretrain the multi-task network's encoder and ASR head on the transcript
/// pool. Returns the parameters and the per-epoch mean pool loss.
///
/// `data_seed` must be the corpus seed: the pool's pronunciation vectors
/// derive from it and have to match the corpus acoustics. `seed` varies the
/// initialization and batch order.
pub fn pretrain_asr(
    nc: &NetConfig,
    g: &GrammarSpec,
    data_seed: u64,
    seed: u64,
    pc: &PretrainConfig,
) -> Result<(ParamSet, Vec<f64>), Error> {
    let pool = generate_transcript_pool(g, data_seed, pc.pool_size);
    let mut theta1 = init_multitask(nc, seed);
    let mut opt = Adam::new(pc.asr_lr, theta1.num_values());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x61737270);
    let mut losses = Vec::with_capacity(pc.asr_epochs);
    for _ in 0..pc.asr_epochs {
        let mut epoch_loss = 0.0;
        let batches = batch_order(pool.len(), pc.batch_size, &mut rng);
        let nb = batches.len();
        for ids in batches {
            let utts: Vec<&Utterance> = ids.iter().map(|&i| &pool[i]).collect();
            let batch = AcousticBatch::new(&utts, nc);
            let mt = multitask_forward_batch(&theta1, nc, &batch);
            let loss = asr_loss_batch(&mt, &batch.tokens);
            if !loss.is_finite() {
                return Err(Error::Numerical("ASR pretraining loss is non-finite".into()));
            }
            epoch_loss += loss.value();
            let grads = grad(&loss, &theta1, false);
            opt.step(&mut theta1, &grads);
        }
        losses.push(epoch_loss / nb as f64);
    }
    Ok((theta1, losses))
}

/// Weight on value-decoder positions after the value's terminating PAD.
const TRAILING_PAD_WEIGHT: f64 = 0.2;

/// Supervised NLU loss on (transcript, gold triples) pairs: intent CE,
/// per-candidate presence BCE, slot-type CE and value-token CE. Candidate j
/// is matched to the j-th gold slot in transcript order.
fn nlu_supervised_loss(
    theta2: &ParamSet,
    nc: &NetConfig,
    data: &[(&[usize], &[Triple])],
) -> Node {
    let b = data.len();
    let transcripts: Vec<&[usize]> = data.iter().map(|(t, _)| *t).collect();
    let tb = TokenBatch::new(&transcripts, nc.max_len);
    let out = nlu_forward_batch(theta2, nc, &tb);

    let intents: Vec<usize> = data
        .iter()
        .map(|(_, tr)| tr.first().map(|t| t.intent).unwrap_or(0))
        .collect();
    let intent_target = one_hot_rows(&intents, nc.intents);
    let mut loss = crate::autodiff::masked_soft_ce(
        &out.intent_logits,
        &intent_target,
        &vec![1.0; b],
    );

    let mut presence = vec![0.0; b * nc.max_slots];
    for (i, (_, tr)) in data.iter().enumerate() {
        for j in 0..tr.len().min(nc.max_slots) {
            presence[i * nc.max_slots + j] = 1.0;
        }
    }
    let presence_target = Node::constant(Shape::matrix(b, nc.max_slots), presence);
    loss = loss.add(&bce_with_logits(&out.present_logits, &presence_target));

    for j in 0..nc.max_slots {
        let have: Vec<f64> = data
            .iter()
            .map(|(_, tr)| (j < tr.len()) as u8 as f64)
            .collect();
        if have.iter().sum::<f64>() == 0.0 {
            continue;
        }
        let types: Vec<usize> = data
            .iter()
            .map(|(_, tr)| tr.get(j).map(|t| t.slot_type).unwrap_or(0))
            .collect();
        // type_dists are softmax outputs; CE through their log.
        let type_ce = one_hot_rows(&types, nc.slot_types)
            .mul(&out.type_dists[j].add_scalar(1e-30).log())
            .sum_axis1()
            .neg();
        let w = Node::constant(Shape::vector(b), have.clone());
        let wsum: f64 = have.iter().sum();
        loss = loss.add(&type_ce.mul(&w).sum_all().scale(1.0 / wsum));

        let mut value_terms = Vec::with_capacity(nc.max_len);
        let mut total_w = 0.0;
        for t in 0..nc.max_len {
            let mut toks = vec![PAD; b];
            let mut w_t = vec![0.0; b];
            for (i, (_, tr)) in data.iter().enumerate() {
                if let Some(triple) = tr.get(j) {
                    if t < triple.value.len() {
                        toks[i] = triple.value[t];
                        w_t[i] = 1.0;
                    } else if t == triple.value.len() {
                        w_t[i] = 1.0; // terminating PAD
                    } else {
                        w_t[i] = TRAILING_PAD_WEIGHT;
                    }
                }
            }
            total_w += w_t.iter().sum::<f64>();
            let ce = one_hot_rows(&toks, nc.vocab)
                .mul(&out.value_dists[j][t].add_scalar(1e-30).log())
                .sum_axis1()
                .neg();
            value_terms.push(ce.mul(&Node::constant(Shape::vector(b), w_t)).sum_all());
        }
        loss = loss.add(&sum_nodes(&value_terms).scale(1.0 / total_w));
    }
    loss
}

/// Pretrain the NLU network supervised on tagged transcripts.
pub fn pretrain_nlu(
    nc: &NetConfig,
    data: &[(&[usize], &[Triple])],
    seed: u64,
    pc: &PretrainConfig,
) -> Result<ParamSet, Error> {
    assert!(!data.is_empty(), "pretrain_nlu: no tagged data");
    let mut theta2 = init_nlu(nc, seed);
    let mut opt = Adam::new(pc.nlu_lr, theta2.num_values());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6c7570);
    for _ in 0..pc.nlu_epochs {
        for ids in batch_order(data.len(), pc.batch_size, &mut rng) {
            let chunk: Vec<(&[usize], &[Triple])> = ids.iter().map(|&i| data[i]).collect();
            let loss = nlu_supervised_loss(&theta2, nc, &chunk);
            if !loss.is_finite() {
                return Err(Error::Numerical("NLU pretraining loss is non-finite".into()));
            }
            let grads = grad(&loss, &theta2, false);
            opt.step(&mut theta2, &grads);
        }
    }
    Ok(theta2)
}

// ── Regimes ──────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    /// Pretrained networks, no joint training.
    Baseline,
    /// ASR fine-tuned on the training split (supervised transcripts only).
    Finetune,
    /// Multi-task training of theta1 with ground-truth SLU targets.
    MultitaskGt,
    MaxlExact,
    MaxlFirstOrder,
    /// MAXL first-order, then a fresh NLU trained on ASR hypotheses.
    RetrainNluOnHyp,
}

impl Regime {
    pub fn cli_name(self) -> &'static str {
        match self {
            Regime::Baseline => "baseline",
            Regime::Finetune => "finetune",
            Regime::MultitaskGt => "multitask_gt",
            Regime::MaxlExact => "maxl_exact",
            Regime::MaxlFirstOrder => "maxl_first_order",
            Regime::RetrainNluOnHyp => "retrain_nlu_on_hyp",
        }
    }

    pub fn from_cli_name(s: &str) -> Option<Regime> {
        [
            Regime::Baseline,
            Regime::Finetune,
            Regime::MultitaskGt,
            Regime::MaxlExact,
            Regime::MaxlFirstOrder,
            Regime::RetrainNluOnHyp,
        ]
        .into_iter()
        .find(|r| r.cli_name() == s)
    }

    fn is_maxl(self) -> bool {
        matches!(
            self,
            Regime::MaxlExact | Regime::MaxlFirstOrder | Regime::RetrainNluOnHyp
        )
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSpec {
    pub run_id: String,
    pub regime: Regime,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub pretrain_asr: bool,
    pub pretrain_nlu: bool,
    /// When set, only this stratified fraction of the training split keeps
    /// its tags (used for pretraining); joint training sees the untagged
    /// remainder.
    pub semi_fraction: Option<f64>,
}

impl RunSpec {
    pub fn new(regime: Regime, train: TrainConfig) -> RunSpec {
        let run_id = format!("{}-{}-s{}", regime.cli_name(), train.interface.cli_name(), train.seed);
        RunSpec {
            run_id,
            regime,
            train,
            pretrain: PretrainConfig::default(),
            pretrain_asr: true,
            pretrain_nlu: true,
            semi_fraction: None,
        }
    }

    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        format!("{:x}", h.finalize())
    }
}

pub struct RunResult {
    pub metrics: Metrics,
    pub epochs: Vec<EpochMetrics>,
    pub theta1: ParamSet,
    pub theta2: ParamSet,
    /// CER of the pretrained ASR on the dev split, before any joint step.
    pub pretrain_dev_cer: Option<f64>,
    /// Transcript-input triple F1 of the pretrained NLU on the dev split.
    pub pretrain_nlu_f1: Option<f64>,
}

/// Serializable summary stored as run.json.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub regime: String,
    pub interface: String,
    pub seed: u64,
    pub config_hash: String,
    pub metrics: Metrics,
    pub pretrain_dev_cer: Option<f64>,
    pub pretrain_nlu_f1: Option<f64>,
}

/// Micro-averaged CER of the ASR decode over a split.
pub fn dev_cer(theta1: &ParamSet, nc: &NetConfig, dev: &[Utterance]) -> f64 {
    let hyps = decode_corpus(theta1, nc, dev);
    let mut edits = 0.0;
    let mut total = 0.0;
    for (h, u) in hyps.iter().zip(dev) {
        edits += evalx::cer(h, u.transcript()) * u.transcript().len() as f64;
        total += u.transcript().len() as f64;
    }
    edits / total
}

/// Ground-truth SLU targets built by pushing one-hot gold distributions
/// through the same interface encoding the NLU network would use.
pub fn gold_targets(
    utts: &[&Utterance],
    nc: &NetConfig,
    kind: InterfaceKind,
    normalize: bool,
) -> BatchTargets {
    let b = utts.len();
    let width = nc.slu_width();
    let mut rows = vec![vec![0.0; b * width]; nc.max_len];
    for (i, u) in utts.iter().enumerate() {
        let gold = u
            .triples()
            .expect("gold_targets: utterance without semantic tags");
        let tp = TriplePrediction {
            intent_dist: {
                let mut v = vec![0.0; nc.intents];
                v[gold.first().map(|t| t.intent).unwrap_or(0)] = 1.0;
                Node::constant(Shape::vector(nc.intents), v)
            },
            slot_count: gold.len(),
            slot_type_dists: gold
                .iter()
                .map(|t| {
                    let mut v = vec![0.0; nc.slot_types];
                    v[t.slot_type] = 1.0;
                    Node::constant(Shape::vector(nc.slot_types), v)
                })
                .collect(),
            value_dists: gold
                .iter()
                .map(|t| {
                    let toks: Vec<usize> = (0..nc.max_len)
                        .map(|p| t.value.get(p).copied().unwrap_or(PAD))
                        .collect();
                    one_hot_rows(&toks, nc.vocab)
                })
                .collect(),
        };
        let tensor = convert(&tp, kind, u.transcript(), nc, normalize);
        let flat: Vec<f64> = match tensor.payload {
            InterfacePayload::Soft(n) => n.values().to_vec(),
            InterfacePayload::Tokens(seq) => {
                let mut v = vec![0.0; nc.max_len * width];
                for (t, &tok) in seq.iter().enumerate() {
                    v[t * width + tok] = 1.0;
                }
                v
            }
            InterfacePayload::Binary(tags) => {
                let mut v = vec![0.0; nc.max_len * width];
                for (t, &tag) in tags.iter().enumerate() {
                    v[t * width + tag as usize] = 1.0;
                }
                v
            }
            _ => unreachable!("fixed-length kinds only"),
        };
        for t in 0..nc.max_len {
            rows[t][i * width..(i + 1) * width]
                .copy_from_slice(&flat[t * width..(t + 1) * width]);
        }
    }
    BatchTargets {
        kind,
        rows: rows
            .into_iter()
            .map(|r| Node::constant(Shape::matrix(b, width), r))
            .collect(),
        degenerate: vec![false; b],
    }
}

/// One SGD epoch of supervised ASR-only training (fine-tuning regime).
fn finetune_epoch(
    theta1: &mut ParamSet,
    train: &[Utterance],
    cfg: &TrainConfig,
    nc: &NetConfig,
    epoch: usize,
) -> Result<f64, Error> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e3779b97f4a7c15));
    let batches = batch_order(train.len(), cfg.batch_size, &mut rng);
    let nb = batches.len().max(1);
    let mut total = 0.0;
    for ids in batches {
        let utts: Vec<&Utterance> = ids.iter().map(|&i| &train[i]).collect();
        let batch = AcousticBatch::new(&utts, nc);
        let mt = multitask_forward_batch(theta1, nc, &batch);
        let loss = asr_loss_batch(&mt, &batch.tokens);
        if !loss.is_finite() {
            return Err(Error::Numerical("fine-tuning loss is non-finite".into()));
        }
        total += loss.value();
        let g = grad(&loss, theta1, false);
        theta1.sgd_step(&g, cfg.alpha);
    }
    Ok(total / nb as f64)
}

/// One SGD epoch of multi-task training with ground-truth SLU targets.
fn multitask_gt_epoch(
    theta1: &mut ParamSet,
    train: &[Utterance],
    cfg: &TrainConfig,
    nc: &NetConfig,
    epoch: usize,
) -> Result<(f64, f64), Error> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e3779b97f4a7c15));
    let batches = batch_order(train.len(), cfg.batch_size, &mut rng);
    let nb = batches.len().max(1);
    let (mut asr_total, mut slu_total) = (0.0, 0.0);
    for ids in batches {
        let utts: Vec<&Utterance> = ids.iter().map(|&i| &train[i]).collect();
        let batch = AcousticBatch::new(&utts, nc);
        let mt = multitask_forward_batch(theta1, nc, &batch);
        let targets = gold_targets(&utts, nc, cfg.interface, cfg.normalize_sum);
        let asr = asr_loss_batch(&mt, &batch.tokens);
        let slu = crate::train::slu_loss_batch(&mt, &targets, cfg, nc, true);
        let loss = asr.add(&slu);
        if !loss.is_finite() {
            return Err(Error::Numerical("multi-task loss is non-finite".into()));
        }
        asr_total += asr.value();
        slu_total += slu.value();
        let g = grad(&loss, theta1, false);
        theta1.sgd_step(&g, cfg.alpha);
    }
    Ok((asr_total / nb as f64, slu_total / nb as f64))
}

fn tagged_pairs(utts: &[Utterance]) -> Vec<(&[usize], &[Triple])> {
    utts.iter()
        .filter_map(|u| u.triples().map(|tr| (u.transcript(), tr)))
        .collect()
}

/// Run one experiment end to end: pretraining per toggles (skipped for any
/// network supplied in `preloaded`, e.g. from checkpoints), the selected
/// regime, final test metrics. `out_dir` gets run.json and epochs.jsonl.
pub fn run(
    g: &GrammarSpec,
    corpus: &Corpus,
    spec: &RunSpec,
    preloaded: (Option<ParamSet>, Option<ParamSet>),
    out_dir: Option<&Path>,
) -> Result<RunResult, Error> {
    spec.train.validate()?;
    let cfg = &spec.train;
    let nc = NetConfig::from_grammar(g, cfg.interface);
    let seed = cfg.seed;

    // Tagged data for pretraining vs (possibly untagged) joint-training data.
    let (pretrain_data, joint_data): (Vec<Utterance>, Vec<Utterance>) =
        match spec.semi_fraction {
            Some(f) => {
                let (tagged, untagged) = split_semi_supervised(&corpus.train, f)?;
                let stripped = untagged.iter().map(|u| u.strip_tags()).collect();
                (tagged, stripped)
            }
            None => (corpus.train.clone(), corpus.train.clone()),
        };
    if spec.regime == Regime::MultitaskGt && !pretrain_data.iter().all(|u| u.has_tags()) {
        return Err(Error::Config(
            "multitask_gt requires semantic tags on its training data".into(),
        ));
    }

    let mut theta1 = match preloaded.0 {
        Some(p) => p,
        None if spec.pretrain_asr => pretrain_asr(&nc, g, corpus.seed, seed, &spec.pretrain)?.0,
        None => init_multitask(&nc, seed),
    };
    let pretrain_dev_cer = Some(dev_cer(&theta1, &nc, &corpus.dev));

    let mut theta2 = match preloaded.1 {
        Some(p) => p,
        None if spec.pretrain_nlu => {
            let pairs = tagged_pairs(&pretrain_data);
            pretrain_nlu(&nc, &pairs, seed, &spec.pretrain)?
        }
        None => init_nlu(&nc, seed),
    };
    let pretrain_nlu_f1 = Some(
        evaluate(&theta1, &theta2, &nc, &corpus.dev).triple_f1_transcript,
    );

    // Joint phase. MAXL regimes must never read semantic tags here.
    let mut epochs = Vec::new();
    if spec.regime.is_maxl() {
        reset_tag_access_count();
    }
    match spec.regime {
        Regime::Baseline => {}
        Regime::Finetune => {
            for e in 0..cfg.epochs {
                let asr = finetune_epoch(&mut theta1, &joint_data, cfg, &nc, e)?;
                epochs.push(EpochMetrics {
                    epoch: e,
                    asr_loss: asr,
                    slu_loss: 0.0,
                    meta_loss: 0.0,
                    entropy: 0.0,
                    wall_ms: 0,
                    batches: 0,
                    degenerate_targets: 0,
                    fd_skipped: 0,
                });
            }
        }
        Regime::MultitaskGt => {
            // Ground-truth targets need tags: train on the tagged portion.
            for e in 0..cfg.epochs {
                let (asr, slu) = multitask_gt_epoch(&mut theta1, &pretrain_data, cfg, &nc, e)?;
                epochs.push(EpochMetrics {
                    epoch: e,
                    asr_loss: asr,
                    slu_loss: slu,
                    meta_loss: 0.0,
                    entropy: 0.0,
                    wall_ms: 0,
                    batches: 0,
                    degenerate_targets: 0,
                    fd_skipped: 0,
                });
            }
        }
        Regime::MaxlExact | Regime::MaxlFirstOrder | Regime::RetrainNluOnHyp => {
            let mut cfg = cfg.clone();
            cfg.second_order = match spec.regime {
                Regime::MaxlExact => SecondOrder::Exact,
                _ => SecondOrder::FirstOrder,
            };
            for e in 0..cfg.epochs {
                epochs.push(train_epoch(
                    &mut theta1,
                    &mut theta2,
                    &joint_data,
                    &cfg,
                    &nc,
                    e,
                )?);
            }
        }
    }
    if spec.regime.is_maxl() && tag_access_count() != 0 {
        return Err(Error::Config(format!(
            "semantic tags were read {} times during joint training",
            tag_access_count()
        )));
    }

    if spec.regime == Regime::RetrainNluOnHyp {
        // Decode the training split with the updated ASR and train a fresh
        // NLU on (hypothesis, gold tags) pairs.
        let hyps = decode_corpus(&theta1, &nc, &corpus.train);
        let pairs: Vec<(&[usize], &[Triple])> = corpus
            .train
            .iter()
            .zip(&hyps)
            .filter(|(_, h)| !h.is_empty())
            .filter_map(|(u, h)| u.triples().map(|tr| (&h[..], tr)))
            .collect();
        theta2 = pretrain_nlu(&nc, &pairs, seed ^ 0x686970, &spec.pretrain)?;
    }

    let metrics = evaluate(&theta1, &theta2, &nc, &corpus.test);
    let result = RunResult {
        metrics,
        epochs,
        theta1,
        theta2,
        pretrain_dev_cer,
        pretrain_nlu_f1,
    };
    if let Some(dir) = out_dir {
        write_artifacts(dir, spec, &result)?;
    }
    Ok(result)
}

fn write_artifacts(dir: &Path, spec: &RunSpec, result: &RunResult) -> Result<(), Error> {
    fs::create_dir_all(dir)?;
    let record = RunRecord {
        run_id: spec.run_id.clone(),
        regime: spec.regime.cli_name().to_string(),
        interface: spec.train.interface.cli_name().to_string(),
        seed: spec.train.seed,
        config_hash: spec.config_hash(),
        metrics: result.metrics.clone(),
        pretrain_dev_cer: result.pretrain_dev_cer,
        pretrain_nlu_f1: result.pretrain_nlu_f1,
    };
    fs::write(
        dir.join("run.json"),
        serde_json::to_string_pretty(&record)?,
    )?;
    let mut f = fs::File::create(dir.join("epochs.jsonl"))?;
    for e in &result.epochs {
        writeln!(f, "{}", serde_json::to_string(e)?)?;
    }
    Ok(())
}

/// Assemble a comparison table (markdown or CSV) from stored run records:
/// CER, F1 on the ASR 1-best, F1 on the manual transcript.
pub fn table(records: &[RunRecord], csv: bool) -> String {
    let mut out = String::new();
    if csv {
        out.push_str("run_id,regime,interface,seed,cer,f1_asr_1best,f1_transcript\n");
        for r in records {
            out.push_str(&format!(
                "{},{},{},{},{:.4},{:.4},{:.4}\n",
                r.run_id,
                r.regime,
                r.interface,
                r.seed,
                r.metrics.cer,
                r.metrics.triple_f1,
                r.metrics.triple_f1_transcript
            ));
        }
    } else {
        out.push_str("| run | regime | interface | seed | CER | F1 (ASR 1-best) | F1 (transcript) |\n");
        out.push_str("|---|---|---|---|---|---|---|\n");
        for r in records {
            out.push_str(&format!(
                "| {} | {} | {} | {} | {:.4} | {:.4} | {:.4} |\n",
                r.run_id,
                r.regime,
                r.interface,
                r.seed,
                r.metrics.cer,
                r.metrics.triple_f1,
                r.metrics.triple_f1_transcript
            ));
        }
    }
    out
}
