//! The two networks: a multi-task network (shared recurrent encoder over
//! acoustic frames, ASR head, SLU head) and a label-generation NLU network
//! (token encoder, then intent, slot type and slot value predicted one by
//! one, each feeding the next).
//!
//! Forward passes are written batch-first; the per-utterance entry points
//! run a batch of one. ASR is framed as frame-group classification over the
//! generator's known alignment so every loss is smooth and twice
//! differentiable.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{
    concat_cols, concat_rows, log_softmax_rows, masked_soft_ce, one_hot_rows, softmax_rows,
    sum_nodes, Node, ParamSet, Shape,
};
use crate::interface::{InterfaceKind, InterfacePayload, InterfaceTensor};
use crate::synthdata::{GrammarSpec, Utterance, PAD};

#[derive(Clone, Debug)]
pub struct NetConfig {
    pub vocab: usize,
    pub intents: usize,
    pub slot_types: usize,
    pub max_len: usize,
    pub max_slots: usize,
    pub acoustic_dim: usize,
    pub hidden: usize,
    pub embed: usize,
    pub interface: InterfaceKind,
}

impl NetConfig {
    pub fn from_grammar(g: &GrammarSpec, interface: InterfaceKind) -> Self {
        NetConfig {
            vocab: g.vocab,
            intents: g.intents,
            slot_types: g.slot_types,
            max_len: g.max_len,
            max_slots: g.max_slots,
            acoustic_dim: g.acoustic_dim,
            hidden: 32,
            embed: 16,
            interface,
        }
    }

    /// Width of the SLU head output for the configured interface.
    pub fn slu_width(&self) -> usize {
        match self.interface {
            InterfaceKind::Sequence | InterfaceKind::SumOfSoftmax => self.vocab,
            InterfaceKind::NerTag => 2,
            InterfaceKind::AppendIntentSlot => self.vocab + self.intents + self.slot_types,
            InterfaceKind::List | InterfaceKind::Softmax => {
                panic!("variable-length interfaces have no SLU head width")
            }
        }
    }
}

fn init_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Node {
    let normal = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).unwrap();
    let values = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Node::param(Shape::matrix(rows, cols), values)
}

fn init_zeros_vec(n: usize) -> Node {
    Node::param(Shape::vector(n), vec![0.0; n])
}

/// Parameters of the multi-task network f_theta1.
pub fn init_multitask(cfg: &NetConfig, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d74);
    let h = cfg.hidden;
    let mut p = ParamSet::new();
    p.insert("enc.w_in", init_matrix(&mut rng, cfg.acoustic_dim, h));
    p.insert("enc.w_rec", init_matrix(&mut rng, h, h));
    p.insert("enc.b", init_zeros_vec(h));
    p.insert("asr.w", init_matrix(&mut rng, h, cfg.vocab));
    p.insert("asr.b", init_zeros_vec(cfg.vocab));
    let w = cfg.slu_width();
    p.insert("slu.w", init_matrix(&mut rng, h, w));
    p.insert("slu.b", init_zeros_vec(w));
    p
}

/// Parameters of the label-generation NLU network g_theta2.
pub fn init_nlu(cfg: &NetConfig, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6c75);
    let (h, e) = (cfg.hidden, cfg.embed);
    let mut p = ParamSet::new();
    p.insert("emb", init_matrix(&mut rng, cfg.vocab, e));
    p.insert("enc.w_in", init_matrix(&mut rng, e, h));
    p.insert("enc.w_rec", init_matrix(&mut rng, h, h));
    p.insert("enc.b", init_zeros_vec(h));
    p.insert("intent.w", init_matrix(&mut rng, h, cfg.intents));
    p.insert("intent.b", init_zeros_vec(cfg.intents));
    p.insert("present.w", init_matrix(&mut rng, h, cfg.max_slots));
    p.insert("present.b", init_zeros_vec(cfg.max_slots));
    p.insert(
        "slot.w",
        init_matrix(&mut rng, h + cfg.intents, cfg.slot_types),
    );
    p.insert(
        "slot.b",
        Node::param(
            Shape::matrix(cfg.max_slots, cfg.slot_types),
            vec![0.0; cfg.max_slots * cfg.slot_types],
        ),
    );
    p.insert("dec.w_init", init_matrix(&mut rng, h, h));
    p.insert("dec.w_intent", init_matrix(&mut rng, cfg.intents, h));
    p.insert("dec.w_type", init_matrix(&mut rng, cfg.slot_types, h));
    p.insert("dec.b_init", init_zeros_vec(h));
    p.insert("dec.w_rec", init_matrix(&mut rng, h, h));
    p.insert("dec.w_ctx", init_matrix(&mut rng, h, h));
    p.insert("dec.b", init_zeros_vec(h));
    p.insert("out.w", init_matrix(&mut rng, h, cfg.vocab));
    p.insert("out.w_ctx", init_matrix(&mut rng, h, cfg.vocab));
    p.insert("out.b", init_zeros_vec(cfg.vocab));
    p
}

/// Same names and shapes, all values zero. Test helper.
pub fn zeroed(p: &ParamSet) -> ParamSet {
    let mut out = ParamSet::new();
    for (n, v) in p {
        out.insert(n, Node::param(v.shape().clone(), vec![0.0; v.shape().numel()]));
    }
    out
}

// ── Batched inputs ───────────────────────────────────────────────────

/// Token-side batch: transcripts padded to max_len.
pub struct TokenBatch {
    pub size: usize,
    pub steps: Vec<Rc<Vec<usize>>>,
    pub mask: Vec<Vec<f64>>,
    pub lens: Vec<usize>,
}

impl TokenBatch {
    pub fn new(transcripts: &[&[usize]], max_len: usize) -> TokenBatch {
        let b = transcripts.len();
        assert!(b > 0, "TokenBatch: empty batch");
        for t in transcripts {
            assert!(!t.is_empty(), "empty token sequence rejected");
            assert!(
                t.len() <= max_len,
                "transcript length {} exceeds max_len {}",
                t.len(),
                max_len
            );
        }
        let mut steps = Vec::with_capacity(max_len);
        let mut mask = Vec::with_capacity(max_len);
        for t in 0..max_len {
            let ids: Vec<usize> = transcripts
                .iter()
                .map(|tr| tr.get(t).copied().unwrap_or(PAD))
                .collect();
            mask.push(
                transcripts
                    .iter()
                    .map(|tr| if t < tr.len() { 1.0 } else { 0.0 })
                    .collect(),
            );
            steps.push(Rc::new(ids));
        }
        TokenBatch {
            size: b,
            steps,
            mask,
            lens: transcripts.iter().map(|t| t.len()).collect(),
        }
    }
}

/// Acoustic-side batch: frames padded to the longest utterance, plus the
/// per-position frame-group pooling weights.
pub struct AcousticBatch {
    pub size: usize,
    pub frames: Vec<Node>,
    /// Per transcript position: sparse (frame index, per-row weight) pairs.
    pub pool: Vec<Vec<(usize, Node)>>,
    pub tokens: TokenBatch,
}

impl AcousticBatch {
    pub fn new(utts: &[&Utterance], cfg: &NetConfig) -> AcousticBatch {
        let b = utts.len();
        assert!(b > 0, "AcousticBatch: empty batch");
        for u in utts {
            assert!(u.n_frames() > 0, "utterance with no frames rejected");
        }
        let tokens = TokenBatch::new(
            &utts.iter().map(|u| u.transcript()).collect::<Vec<_>>(),
            cfg.max_len,
        );
        let t_max = utts.iter().map(|u| u.n_frames()).max().unwrap();
        let d = cfg.acoustic_dim;
        let mut frames = Vec::with_capacity(t_max);
        for tau in 0..t_max {
            let mut vals = vec![0.0; b * d];
            for (i, u) in utts.iter().enumerate() {
                if tau < u.n_frames() {
                    vals[i * d..(i + 1) * d]
                        .copy_from_slice(&u.frames()[tau * d..(tau + 1) * d]);
                }
            }
            frames.push(Node::constant(Shape::matrix(b, d), vals));
        }
        let mut pool = Vec::with_capacity(cfg.max_len);
        for t in 0..cfg.max_len {
            let mut weights: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
            for (i, u) in utts.iter().enumerate() {
                if let Some(&(start, len)) = u.frame_groups().get(t) {
                    for tau in start..start + len {
                        weights.entry(tau).or_insert_with(|| vec![0.0; b])[i] =
                            1.0 / len as f64;
                    }
                }
            }
            pool.push(
                weights
                    .into_iter()
                    .map(|(tau, w)| (tau, Node::constant(Shape::vector(b), w)))
                    .collect(),
            );
        }
        AcousticBatch {
            size: b,
            frames,
            pool,
            tokens,
        }
    }
}

// ── Multi-task network ───────────────────────────────────────────────

/// Batched multi-task forward: per transcript position, ASR logits (B x V)
/// and SLU logits (B x W) from the same pooled shared-encoder states.
pub struct MultiTaskOut {
    pub asr: Vec<Node>,
    pub slu: Vec<Node>,
}

pub fn multitask_forward_batch(p: &ParamSet, cfg: &NetConfig, batch: &AcousticBatch) -> MultiTaskOut {
    let b = batch.size;
    let h = cfg.hidden;
    let mut state = Node::zeros(Shape::matrix(b, h));
    let mut hs = Vec::with_capacity(batch.frames.len());
    let enc_b = p.at("enc.b").broadcast_rows(b);
    for x in &batch.frames {
        state = x
            .matmul(p.at("enc.w_in"))
            .add(&state.matmul(p.at("enc.w_rec")))
            .add(&enc_b)
            .tanh();
        hs.push(state.clone());
    }
    let asr_b = p.at("asr.b").broadcast_rows(b);
    let slu_b = p.at("slu.b").broadcast_rows(b);
    let mut asr = Vec::with_capacity(cfg.max_len);
    let mut slu = Vec::with_capacity(cfg.max_len);
    for t in 0..cfg.max_len {
        let pooled = if batch.pool[t].is_empty() {
            Node::zeros(Shape::matrix(b, h))
        } else {
            sum_nodes(
                &batch.pool[t]
                    .iter()
                    .map(|(tau, w)| hs[*tau].scale_rows(w))
                    .collect::<Vec<_>>(),
            )
        };
        asr.push(pooled.matmul(p.at("asr.w")).add(&asr_b));
        slu.push(pooled.matmul(p.at("slu.w")).add(&slu_b));
    }
    MultiTaskOut { asr, slu }
}

/// Per-utterance forward: (asr_logits L x V, slu_logits L x W).
pub fn multitask_forward(p: &ParamSet, cfg: &NetConfig, u: &Utterance) -> (Node, Node) {
    let batch = AcousticBatch::new(&[u], cfg);
    let out = multitask_forward_batch(p, cfg, &batch);
    (concat_rows(&out.asr), concat_rows(&out.slu))
}

/// Mean per-position cross-entropy over non-PAD positions.
pub fn asr_loss(asr_logits: &Node, transcript: &[usize]) -> Node {
    let l = asr_logits.shape().rows();
    let v = asr_logits.shape().cols();
    assert!(
        !transcript.is_empty() && transcript.iter().any(|&t| t != PAD),
        "asr_loss: all positions PAD rejected"
    );
    assert!(transcript.len() <= l, "asr_loss: transcript longer than logits");
    let mut ids = vec![PAD; l];
    let mut weights = vec![0.0; l];
    for (t, &tok) in transcript.iter().enumerate() {
        ids[t] = tok;
        weights[t] = if tok == PAD { 0.0 } else { 1.0 };
    }
    masked_soft_ce(asr_logits, &one_hot_rows(&ids, v), &weights)
}

/// Batched ASR loss: mean cross-entropy over all non-PAD positions of the
/// batch.
pub fn asr_loss_batch(out: &MultiTaskOut, tokens: &TokenBatch) -> Node {
    let v = out.asr[0].shape().cols();
    let mut terms = Vec::new();
    let mut total_w = 0.0;
    for (t, logits) in out.asr.iter().enumerate() {
        let w: f64 = tokens.mask[t].iter().sum();
        if w == 0.0 {
            continue;
        }
        total_w += w;
        let target = one_hot_rows(&tokens.steps[t], v);
        let per_row = target.mul(&log_softmax_rows(logits)).sum_axis1().neg();
        let wnode = Node::constant(Shape::vector(tokens.size), tokens.mask[t].clone());
        terms.push(per_row.mul(&wnode).sum_all());
    }
    assert!(total_w > 0.0, "asr_loss_batch: all positions PAD rejected");
    sum_nodes(&terms).scale(1.0 / total_w)
}

// ── NLU label-generation network ─────────────────────────────────────

/// Batched NLU outputs. `value_dists[j][t]` is the slot-j value distribution
/// at decoder step t, shape (B x V). `selected` is the decode-time presence
/// thresholding; gradients never flow through the selection itself.
pub struct NluBatchOut {
    pub size: usize,
    pub intent_logits: Node,
    pub intent_dist: Node,
    pub present_logits: Node,
    pub present: Node,
    pub type_dists: Vec<Node>,
    pub value_dists: Vec<Vec<Node>>,
    pub selected: Vec<Vec<bool>>,
    pub slot_counts: Vec<usize>,
}

pub fn nlu_forward_batch(p: &ParamSet, cfg: &NetConfig, tb: &TokenBatch) -> NluBatchOut {
    let b = tb.size;
    let h = cfg.hidden;
    let l = cfg.max_len;

    // Token encoder.
    let enc_b = p.at("enc.b").broadcast_rows(b);
    let mut state = Node::zeros(Shape::matrix(b, h));
    let mut hs = Vec::with_capacity(l);
    for ids in &tb.steps {
        let x = p.at("emb").gather_rows(ids);
        state = x
            .matmul(p.at("enc.w_in"))
            .add(&state.matmul(p.at("enc.w_rec")))
            .add(&enc_b)
            .tanh();
        hs.push(state.clone());
    }
    // Masked mean over non-PAD positions (all-PAD rows fall back to zero).
    let mean_w: Vec<Node> = (0..l)
        .map(|t| {
            let w: Vec<f64> = (0..b)
                .map(|i| tb.mask[t][i] / tb.lens[i].max(1) as f64)
                .collect();
            Node::constant(Shape::vector(b), w)
        })
        .collect();
    let enc = sum_nodes(
        &hs.iter()
            .zip(&mean_w)
            .map(|(hn, w)| hn.scale_rows(w))
            .collect::<Vec<_>>(),
    );

    // Attention mask: PAD positions excluded.
    let mut att_mask = vec![0.0; b * l];
    for t in 0..l {
        for i in 0..b {
            if tb.mask[t][i] == 0.0 {
                att_mask[i * l + t] = -1e9;
            }
        }
    }
    let att_mask = Node::constant(Shape::matrix(b, l), att_mask);
    let att_scale = 1.0 / (h as f64).sqrt();

    // Intent first; its distribution feeds the slot-type classifier, whose
    // scores feed the value decoder.
    let intent_logits = enc.matmul(p.at("intent.w")).add(&p.at("intent.b").broadcast_rows(b));
    let intent_dist = softmax_rows(&intent_logits);
    let present_logits = enc
        .matmul(p.at("present.w"))
        .add(&p.at("present.b").broadcast_rows(b));
    let present = present_logits.sigmoid();

    let type_in = concat_cols(&[enc.clone(), intent_dist.clone()]);
    let mut type_dists = Vec::with_capacity(cfg.max_slots);
    let mut value_dists = Vec::with_capacity(cfg.max_slots);
    for j in 0..cfg.max_slots {
        let bias = p
            .at("slot.b")
            .slice_rows(j, 1)
            .reshape(Shape::vector(cfg.slot_types))
            .broadcast_rows(b);
        let type_dist = softmax_rows(&type_in.matmul(p.at("slot.w")).add(&bias));

        let mut s = enc
            .matmul(p.at("dec.w_init"))
            .add(&intent_dist.matmul(p.at("dec.w_intent")))
            .add(&type_dist.matmul(p.at("dec.w_type")))
            .add(&p.at("dec.b_init").broadcast_rows(b))
            .tanh();
        let mut dists = Vec::with_capacity(l);
        for _t in 0..l {
            // Dot-product attention over encoder states.
            let scores = concat_cols(
                &hs.iter()
                    .map(|hn| {
                        s.mul(hn)
                            .sum_axis1()
                            .scale(att_scale)
                            .reshape(Shape::matrix(b, 1))
                    })
                    .collect::<Vec<_>>(),
            )
            .add(&att_mask);
            let att = softmax_rows(&scores);
            let ctx = sum_nodes(
                &hs.iter()
                    .enumerate()
                    .map(|(tau, hn)| {
                        hn.scale_rows(&att.slice_cols(tau, 1).reshape(Shape::vector(b)))
                    })
                    .collect::<Vec<_>>(),
            );
            let logits = s
                .matmul(p.at("out.w"))
                .add(&ctx.matmul(p.at("out.w_ctx")))
                .add(&p.at("out.b").broadcast_rows(b));
            dists.push(softmax_rows(&logits));
            s = s
                .matmul(p.at("dec.w_rec"))
                .add(&ctx.matmul(p.at("dec.w_ctx")))
                .add(&p.at("dec.b").broadcast_rows(b))
                .tanh();
        }
        type_dists.push(type_dist);
        value_dists.push(dists);
    }

    // Presence threshold, applied only at decode time.
    let mut selected = vec![vec![false; cfg.max_slots]; b];
    let mut slot_counts = vec![0usize; b];
    for i in 0..b {
        for j in 0..cfg.max_slots {
            if present.values()[i * cfg.max_slots + j] > 0.5 {
                selected[i][j] = true;
                slot_counts[i] += 1;
            }
        }
    }

    NluBatchOut {
        size: b,
        intent_logits,
        intent_dist,
        present_logits,
        present,
        type_dists,
        value_dists,
        selected,
        slot_counts,
    }
}

/// The NLU network's structured output for one utterance.
pub struct TriplePrediction {
    pub intent_dist: Node,
    pub slot_count: usize,
    pub slot_type_dists: Vec<Node>,
    pub value_dists: Vec<Node>,
}

pub fn nlu_forward(p: &ParamSet, cfg: &NetConfig, tokens: &[usize]) -> TriplePrediction {
    assert!(!tokens.is_empty(), "empty token sequence rejected");
    let tb = TokenBatch::new(&[tokens], cfg.max_len);
    let out = nlu_forward_batch(p, cfg, &tb);
    prediction_for(&out, cfg, 0)
}

/// Extract utterance `i` of a batched NLU output as a TriplePrediction.
pub fn prediction_for(out: &NluBatchOut, cfg: &NetConfig, i: usize) -> TriplePrediction {
    let intent_dist = out
        .intent_dist
        .slice_rows(i, 1)
        .reshape(Shape::vector(cfg.intents));
    let mut slot_type_dists = Vec::new();
    let mut value_dists = Vec::new();
    for j in 0..cfg.max_slots {
        if !out.selected[i][j] {
            continue;
        }
        slot_type_dists.push(
            out.type_dists[j]
                .slice_rows(i, 1)
                .reshape(Shape::vector(cfg.slot_types)),
        );
        value_dists.push(concat_rows(
            &out.value_dists[j]
                .iter()
                .map(|d| d.slice_rows(i, 1))
                .collect::<Vec<_>>(),
        ));
    }
    TriplePrediction {
        intent_dist,
        slot_count: out.slot_counts[i],
        slot_type_dists,
        value_dists,
    }
}

// ── SLU loss ─────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SluLossKind {
    Ce,
    Mse,
}

/// Per-row SLU loss against one target row block (B x W), segment-aware for
/// the appended-intent-and-slot interface. Returns a (B) node.
pub fn slu_loss_rows(
    logits: &Node,
    target: &Node,
    kind: InterfaceKind,
    loss: SluLossKind,
    cfg: &NetConfig,
) -> Node {
    assert!(
        logits.shape() == target.shape(),
        "slu_loss: logits shape {} does not match target shape {}",
        logits.shape(),
        target.shape()
    );
    let segments: Vec<(usize, usize)> = match kind {
        InterfaceKind::AppendIntentSlot => vec![
            (0, cfg.vocab),
            (cfg.vocab, cfg.intents),
            (cfg.vocab + cfg.intents, cfg.slot_types),
        ],
        _ => vec![(0, logits.shape().cols())],
    };
    let mut terms = Vec::new();
    for (start, len) in segments {
        let lg = logits.slice_cols(start, len);
        let tg = target.slice_cols(start, len);
        let term = match loss {
            SluLossKind::Ce => tg.mul(&log_softmax_rows(&lg)).sum_axis1().neg(),
            SluLossKind::Mse => {
                let d = softmax_rows(&lg).sub(&tg);
                d.mul(&d).sum_axis1().scale(1.0 / len as f64)
            }
        };
        terms.push(term);
    }
    sum_nodes(&terms)
}

/// Per-utterance SLU loss between (L x W) logits and an interface target.
/// The target node participates in the graph, so gradients flow to theta2
/// for differentiable interfaces.
pub fn slu_loss(
    slu_logits: &Node,
    target: &InterfaceTensor,
    cfg: &NetConfig,
    loss: SluLossKind,
) -> Node {
    let l = slu_logits.shape().rows();
    match &target.payload {
        InterfacePayload::Soft(t) => {
            slu_loss_rows(slu_logits, t, target.kind, loss, cfg).mean_all()
        }
        InterfacePayload::Tokens(seq) => {
            assert_eq!(seq.len(), l, "slu_loss: sequence target length mismatch");
            let t = one_hot_rows(seq, slu_logits.shape().cols());
            slu_loss_rows(slu_logits, &t, target.kind, loss, cfg).mean_all()
        }
        InterfacePayload::Binary(tags) => {
            assert_eq!(tags.len(), l, "slu_loss: tag target length mismatch");
            let ids: Vec<usize> = tags.iter().map(|&b| b as usize).collect();
            let t = one_hot_rows(&ids, 2);
            slu_loss_rows(slu_logits, &t, target.kind, loss, cfg).mean_all()
        }
        InterfacePayload::Triples(_) | InterfacePayload::PerSlotSoft(_) => {
            panic!("variable-length interfaces are unavailable as SLU targets")
        }
    }
}

/// True when the SLU loss has any gradient with respect to theta2 on this
/// target. Mirrors the gradient-flow attribute of the interface table.
pub fn slu_target_has_grad(target: &InterfaceTensor) -> bool {
    match &target.payload {
        InterfacePayload::Soft(t) => t.requires_grad(),
        _ => false,
    }
}
