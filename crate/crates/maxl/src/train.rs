//! Two-stage joint training. Stage 1 is ordinary multi-task SGD on theta1
//! (ASR loss plus SLU loss against targets produced by the NLU network from
//! the manual transcript). Stage 2 updates theta2 through a one-step
//! lookahead of theta1: either exactly, by differentiating through the
//! retained lookahead graph (second-order), or with a two-point
//! finite-difference approximation of the hypergradient. A batch-average
//! prediction-entropy regularizer keeps the NLU network from collapsing to
//! one class.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad, sum_nodes, Node, ParamSet};
use crate::interface::{batch_targets, BatchTargets, InterfaceKind};
use crate::nets::{
    asr_loss_batch, multitask_forward_batch, nlu_forward_batch, slu_loss_rows, AcousticBatch,
    MultiTaskOut, NetConfig, NluBatchOut, SluLossKind,
};
use crate::synthdata::Utterance;
use crate::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SecondOrder {
    Exact,
    FirstOrder,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Inner (stage-1 and lookahead) step size.
    pub alpha: f64,
    /// Meta step size for theta2.
    pub beta: f64,
    /// Weight of the entropy regularizer in the meta objective.
    pub entropy_weight: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub second_order: SecondOrder,
    pub interface: InterfaceKind,
    /// Finite-difference scale: epsilon = fd_scale / ||v||.
    pub fd_scale: f64,
    pub slu_loss: SluLossKind,
    /// Divide summed softmax targets by slot count.
    pub normalize_sum: bool,
    /// Run the two stages per batch instead of as two full passes.
    pub interleaved: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.05,
            beta: 1e-3,
            entropy_weight: 0.2,
            epochs: 10,
            batch_size: 16,
            seed: 0,
            second_order: SecondOrder::FirstOrder,
            interface: InterfaceKind::SumOfSoftmax,
            fd_scale: 0.01,
            slu_loss: SluLossKind::Ce,
            normalize_sum: true,
            interleaved: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if !self.interface.fixed_length() {
            return Err(Error::Config(format!(
                "variable-length interfaces are unavailable: {}",
                self.interface.cli_name()
            )));
        }
        if self.alpha < 0.0 || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.beta < 0.0 || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.entropy_weight < 0.0 || !self.entropy_weight.is_finite() {
            return Err(Error::Config(format!(
                "entropy_weight must be >= 0, got {}",
                self.entropy_weight
            )));
        }
        if self.fd_scale <= 0.0 || !self.fd_scale.is_finite() {
            return Err(Error::Config(format!(
                "fd_scale must be > 0, got {}",
                self.fd_scale
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be > 0".into()));
        }
        Ok(())
    }
}

/// Batched SLU loss: mean over all B x L positions, optionally cutting the
/// target out of the gradient graph (stage 1 never trains theta2).
pub fn slu_loss_batch(
    mt: &MultiTaskOut,
    targets: &BatchTargets,
    cfg: &TrainConfig,
    nc: &NetConfig,
    detach_target: bool,
) -> Node {
    let b = mt.slu[0].shape().rows();
    let l = mt.slu.len();
    let mut terms = Vec::with_capacity(l);
    for t in 0..l {
        let rows = if detach_target {
            targets.rows[t].detach()
        } else {
            targets.rows[t].clone()
        };
        terms.push(slu_loss_rows(&mt.slu[t], &rows, cfg.interface, cfg.slu_loss, nc).sum_all());
    }
    sum_nodes(&terms).scale(1.0 / (b * l) as f64)
}

fn nlu_targets<'a>(
    theta2: &ParamSet,
    cfg: &TrainConfig,
    nc: &NetConfig,
    utts: &[&'a Utterance],
) -> (NluBatchOut, BatchTargets) {
    let transcripts: Vec<&[usize]> = utts.iter().map(|u| u.transcript()).collect();
    let tb = crate::nets::TokenBatch::new(&transcripts, nc.max_len);
    let out = nlu_forward_batch(theta2, nc, &tb);
    let targets = batch_targets(&out, nc, cfg.interface, &transcripts, cfg.normalize_sum);
    (out, targets)
}

fn check_finite(name: &str, n: &Node) -> Result<(), Error> {
    if n.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{} is non-finite", name)))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StepLosses {
    pub asr: f64,
    pub slu: f64,
    pub degenerate: usize,
}

/// Stage 1: theta1 <- theta1 - alpha * grad(L_asr + L_slu). The SLU target
/// comes from theta2 on the manual transcript but is detached, so theta2 is
/// untouched. Semantic tags are never read.
pub fn stage1_step(
    theta1: &mut ParamSet,
    theta2: &ParamSet,
    utts: &[&Utterance],
    cfg: &TrainConfig,
    nc: &NetConfig,
) -> Result<StepLosses, Error> {
    let batch = AcousticBatch::new(utts, nc);
    let mt = multitask_forward_batch(theta1, nc, &batch);
    let (_, targets) = nlu_targets(theta2, cfg, nc, utts);
    let asr = asr_loss_batch(&mt, &batch.tokens);
    let slu = slu_loss_batch(&mt, &targets, cfg, nc, true);
    let loss = asr.add(&slu);
    check_finite("stage-1 loss", &loss)?;
    let g = grad(&loss, theta1, false);
    if !g.all_finite() {
        return Err(Error::Numerical("stage-1 gradient is non-finite".into()));
    }
    theta1.sgd_step(&g, cfg.alpha);
    Ok(StepLosses {
        asr: asr.value(),
        slu: slu.value(),
        degenerate: targets.degenerate.iter().filter(|&&d| d).count(),
    })
}

/// One-step lookahead of theta1 with the graph retained: each entry is an
/// expression in theta1 and theta2 (through the differentiable SLU target).
pub struct LookaheadParams {
    pub params: ParamSet,
    pub losses: StepLosses,
    pub nlu_out: NluBatchOut,
}

pub fn lookahead(
    theta1: &ParamSet,
    theta2: &ParamSet,
    utts: &[&Utterance],
    cfg: &TrainConfig,
    nc: &NetConfig,
) -> Result<LookaheadParams, Error> {
    let batch = AcousticBatch::new(utts, nc);
    let mt = multitask_forward_batch(theta1, nc, &batch);
    let (nlu_out, targets) = nlu_targets(theta2, cfg, nc, utts);
    let asr = asr_loss_batch(&mt, &batch.tokens);
    let slu = slu_loss_batch(&mt, &targets, cfg, nc, false);
    let loss = asr.add(&slu);
    check_finite("lookahead loss", &loss)?;
    let g = grad(&loss, theta1, true);
    let mut params = ParamSet::new();
    for (name, v) in theta1 {
        params.insert(name, v.sub(&g.at(name).scale(cfg.alpha)));
    }
    if !params.all_finite() {
        return Err(Error::Numerical("lookahead parameters are non-finite".into()));
    }
    Ok(LookaheadParams {
        params,
        losses: StepLosses {
            asr: asr.value(),
            slu: slu.value(),
            degenerate: targets.degenerate.iter().filter(|&&d| d).count(),
        },
        nlu_out,
    })
}

/// Sum of g-bar log g-bar over the batch-averaged intent distribution and
/// the batch-averaged slot-type distribution (each (utterance, candidate)
/// pair counts as one slot-type sample). Negative entropy: minimizing it
/// pushes the averaged predictions toward uniform.
pub fn batch_entropy(intent_dist: &Node, type_dists: &[Node]) -> Node {
    let b = intent_dist.shape().rows();
    assert!(b > 0, "batch_entropy: empty batch");
    let intent_avg = intent_dist.sum_axis0().scale(1.0 / b as f64);
    let mut h = intent_avg.xlogx().sum_all();
    if !type_dists.is_empty() {
        let n = b * type_dists.len();
        let type_avg = sum_nodes(
            &type_dists.iter().map(|d| d.sum_axis0()).collect::<Vec<_>>(),
        )
        .scale(1.0 / n as f64);
        h = h.add(&type_avg.xlogx().sum_all());
    }
    h
}

#[derive(Clone, Copy, Debug)]
pub struct MetaStep {
    pub meta_loss: f64,
    /// Batch-averaged prediction entropy in nats (positive).
    pub entropy: f64,
    /// First-order only: the finite-difference term was skipped because the
    /// lookahead ASR gradient was zero.
    pub skipped_fd: bool,
}

/// Exact meta gradient of L_asr(theta1_plus) + lambda_H * (sum g-bar log
/// g-bar) with respect to theta2, through the retained lookahead graph.
pub fn meta_grad_exact(
    theta1: &ParamSet,
    theta2: &ParamSet,
    utts: &[&Utterance],
    cfg: &TrainConfig,
    nc: &NetConfig,
) -> Result<(ParamSet, MetaStep), Error> {
    let la = lookahead(theta1, theta2, utts, cfg, nc)?;
    let batch = AcousticBatch::new(utts, nc);
    let mt_plus = multitask_forward_batch(&la.params, nc, &batch);
    let asr_plus = asr_loss_batch(&mt_plus, &batch.tokens);
    let neg_h = batch_entropy(&la.nlu_out.intent_dist, &la.nlu_out.type_dists);
    let meta_loss = asr_plus.add(&neg_h.scale(cfg.entropy_weight));
    check_finite("meta loss", &meta_loss)?;
    let g = grad(&meta_loss, theta2, false);
    if !g.all_finite() {
        return Err(Error::Numerical("exact meta-gradient is non-finite".into()));
    }
    Ok((
        g,
        MetaStep {
            meta_loss: meta_loss.value(),
            entropy: -neg_h.value(),
            skipped_fd: false,
        },
    ))
}

pub fn meta_step_exact(
    theta1: &ParamSet,
    theta2: &mut ParamSet,
    utts: &[&Utterance],
    cfg: &TrainConfig,
    nc: &NetConfig,
) -> Result<MetaStep, Error> {
    let (g, step) = meta_grad_exact(theta1, theta2, utts, cfg, nc)?;
    theta2.sgd_step(&g, cfg.beta);
    Ok(step)
}

/// First-order hypergradient: with v = grad of the lookahead ASR loss at
/// theta1_plus and epsilon = fd_scale / ||v||, the bilinear term is
/// approximated by -alpha * (g+ - g-) / (2 epsilon) where g+- are the
/// theta2-gradients of the stage-1 SLU loss at theta1 +- epsilon*v. No
/// second derivatives, no retained graph.
pub fn meta_grad_first_order(
    theta1: &ParamSet,
    theta2: &ParamSet,
    utts: &[&Utterance],
    cfg: &TrainConfig,
    nc: &NetConfig,
) -> Result<(ParamSet, MetaStep), Error> {
    let batch = AcousticBatch::new(utts, nc);
    let (nlu_out, targets) = nlu_targets(theta2, cfg, nc, utts);

    // Plain-value lookahead (no graph).
    let mt = multitask_forward_batch(theta1, nc, &batch);
    let asr = asr_loss_batch(&mt, &batch.tokens);
    let slu = slu_loss_batch(&mt, &targets, cfg, nc, true);
    let loss = asr.add(&slu);
    check_finite("stage-1 loss", &loss)?;
    let g1 = grad(&loss, theta1, false);
    let base = theta1.flat_values();
    let plus: Vec<f64> = base
        .iter()
        .zip(g1.flat_values())
        .map(|(x, g)| x - cfg.alpha * g)
        .collect();
    let theta1_plus = theta1.with_flat_values(&plus);

    // v = grad of the ASR loss at the lookahead point.
    let mt_plus = multitask_forward_batch(&theta1_plus, nc, &batch);
    let asr_plus = asr_loss_batch(&mt_plus, &batch.tokens);
    check_finite("lookahead ASR loss", &asr_plus)?;
    let v = grad(&asr_plus, &theta1_plus, false).flat_values();
    let v_norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();

    let neg_h = batch_entropy(&nlu_out.intent_dist, &nlu_out.type_dists);

    let skipped_fd = v_norm < 1e-12;
    let g = if skipped_fd {
        let mut hyper = grad(&neg_h, theta2, false).flat_values();
        for x in &mut hyper {
            *x *= cfg.entropy_weight;
        }
        theta2.with_flat_values(&hyper)
    } else {
        let eps = cfg.fd_scale / v_norm;
        let side = |sign: f64| -> Result<Node, Error> {
            let shifted: Vec<f64> = base
                .iter()
                .zip(&v)
                .map(|(x, dv)| x + sign * eps * dv)
                .collect();
            let p = theta1.with_flat_values(&shifted);
            let mt_s = multitask_forward_batch(&p, nc, &batch);
            let slu_s = slu_loss_batch(&mt_s, &targets, cfg, nc, false);
            check_finite("perturbed SLU loss", &slu_s)?;
            Ok(slu_s)
        };
        // The two perturbed losses share the target graph, so one combined
        // backward pass covers the difference quotient and the entropy term
        // while traversing the label-generation net only once.
        let diff = side(1.0)?.sub(&side(-1.0)?);
        let objective = neg_h
            .scale(cfg.entropy_weight)
            .add(&diff.scale(-cfg.alpha / (2.0 * eps)));
        grad(&objective, theta2, false)
    };
    if !g.all_finite() {
        return Err(Error::Numerical(
            "first-order meta-gradient is non-finite".into(),
        ));
    }
    Ok((
        g,
        MetaStep {
            meta_loss: asr_plus.value() + cfg.entropy_weight * neg_h.value(),
            entropy: -neg_h.value(),
            skipped_fd,
        },
    ))
}

pub fn meta_step_first_order(
    theta1: &ParamSet,
    theta2: &mut ParamSet,
    utts: &[&Utterance],
    cfg: &TrainConfig,
    nc: &NetConfig,
) -> Result<MetaStep, Error> {
    let (g, step) = meta_grad_first_order(theta1, theta2, utts, cfg, nc)?;
    theta2.sgd_step(&g, cfg.beta);
    Ok(step)
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub asr_loss: f64,
    pub slu_loss: f64,
    pub meta_loss: f64,
    pub entropy: f64,
    pub wall_ms: u64,
    pub batches: usize,
    pub degenerate_targets: usize,
    pub fd_skipped: usize,
}

fn epoch_batches(n: usize, cfg: &TrainConfig, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng =
        ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e3779b97f4a7c15));
    idx.shuffle(&mut rng);
    idx.chunks(cfg.batch_size).map(|c| c.to_vec()).collect()
}

/// One epoch: stage 1 over all batches updating theta1, then stage 2 over
/// the same batch order updating theta2 (interleaved mode runs both stages
/// per batch instead).
pub fn train_epoch(
    theta1: &mut ParamSet,
    theta2: &mut ParamSet,
    train: &[Utterance],
    cfg: &TrainConfig,
    nc: &NetConfig,
    epoch: usize,
) -> Result<EpochMetrics, Error> {
    cfg.validate()?;
    let start = Instant::now();
    let batches = epoch_batches(train.len(), cfg, epoch);
    let mut m = EpochMetrics {
        epoch,
        asr_loss: 0.0,
        slu_loss: 0.0,
        meta_loss: 0.0,
        entropy: 0.0,
        wall_ms: 0,
        batches: batches.len(),
        degenerate_targets: 0,
        fd_skipped: 0,
    };
    if batches.is_empty() {
        return Ok(m);
    }
    let stage1 = |theta1: &mut ParamSet, theta2: &ParamSet, ids: &[usize], m: &mut EpochMetrics| {
        let utts: Vec<&Utterance> = ids.iter().map(|&i| &train[i]).collect();
        let losses = stage1_step(theta1, theta2, &utts, cfg, nc)?;
        m.asr_loss += losses.asr;
        m.slu_loss += losses.slu;
        m.degenerate_targets += losses.degenerate;
        Ok::<(), Error>(())
    };
    let stage2 = |theta1: &ParamSet, theta2: &mut ParamSet, ids: &[usize], m: &mut EpochMetrics| {
        let utts: Vec<&Utterance> = ids.iter().map(|&i| &train[i]).collect();
        let step = match cfg.second_order {
            SecondOrder::Exact => meta_step_exact(theta1, theta2, &utts, cfg, nc)?,
            SecondOrder::FirstOrder => meta_step_first_order(theta1, theta2, &utts, cfg, nc)?,
        };
        m.meta_loss += step.meta_loss;
        m.entropy += step.entropy;
        m.fd_skipped += step.skipped_fd as usize;
        Ok::<(), Error>(())
    };
    if cfg.interleaved {
        for ids in &batches {
            stage1(theta1, theta2, ids, &mut m)?;
            stage2(theta1, theta2, ids, &mut m)?;
        }
    } else {
        for ids in &batches {
            stage1(theta1, theta2, ids, &mut m)?;
        }
        for ids in &batches {
            stage2(theta1, theta2, ids, &mut m)?;
        }
    }
    let nb = batches.len() as f64;
    m.asr_loss /= nb;
    m.slu_loss /= nb;
    m.meta_loss /= nb;
    m.entropy /= nb;
    m.wall_ms = start.elapsed().as_millis() as u64;
    Ok(m)
}
