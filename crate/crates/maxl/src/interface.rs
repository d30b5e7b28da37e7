//! Converting an NLU prediction into an SLU training target. Six formats,
//! each either fixed-length or variable-length and either carrying gradient
//! back to the NLU network or not:
//!
//! | kind             | fixed length | gradient flow |
//! |------------------|--------------|---------------|
//! | List             | no           | no            |
//! | Sequence         | yes          | no            |
//! | NerTag           | yes          | no            |
//! | Softmax          | no           | yes           |
//! | SumOfSoftmax     | yes          | yes           |
//! | AppendIntentSlot | yes          | yes           |
//!
//! Only the four fixed-length kinds can serve as SLU targets; the trainer
//! rejects List and Softmax.

use serde::{Deserialize, Serialize};

use crate::autodiff::{concat_cols, one_hot_rows, sum_nodes, Node, Shape};
use crate::nets::{NetConfig, NluBatchOut, TriplePrediction};
use crate::synthdata::{Triple, PAD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InterfaceKind {
    List,
    Sequence,
    NerTag,
    Softmax,
    SumOfSoftmax,
    AppendIntentSlot,
}

impl InterfaceKind {
    pub fn fixed_length(self) -> bool {
        !matches!(self, InterfaceKind::List | InterfaceKind::Softmax)
    }

    pub fn grad_flow(self) -> bool {
        matches!(
            self,
            InterfaceKind::Softmax | InterfaceKind::SumOfSoftmax | InterfaceKind::AppendIntentSlot
        )
    }

    pub fn all() -> [InterfaceKind; 6] {
        [
            InterfaceKind::List,
            InterfaceKind::Sequence,
            InterfaceKind::NerTag,
            InterfaceKind::Softmax,
            InterfaceKind::SumOfSoftmax,
            InterfaceKind::AppendIntentSlot,
        ]
    }

    pub fn cli_name(self) -> &'static str {
        match self {
            InterfaceKind::List => "list",
            InterfaceKind::Sequence => "sequence",
            InterfaceKind::NerTag => "ner",
            InterfaceKind::Softmax => "softmax",
            InterfaceKind::SumOfSoftmax => "sum",
            InterfaceKind::AppendIntentSlot => "append",
        }
    }

    pub fn from_cli_name(s: &str) -> Option<InterfaceKind> {
        InterfaceKind::all().into_iter().find(|k| k.cli_name() == s)
    }
}

pub enum InterfacePayload {
    /// Decoded triples (List kind); evaluation only.
    Triples(Vec<Triple>),
    /// Hard token ids, length L (Sequence kind).
    Tokens(Vec<usize>),
    /// Binary slot-position tags, length L (NerTag kind).
    Binary(Vec<bool>),
    /// Differentiable target rows: L x V or L x (V+I+S).
    Soft(Node),
    /// One L x V node per decoded slot (Softmax kind).
    PerSlotSoft(Vec<Node>),
}

pub struct InterfaceTensor {
    pub kind: InterfaceKind,
    pub payload: InterfacePayload,
    /// Set when slot_count = 0 forced a fallback target.
    pub degenerate: bool,
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Argmax-decode each slot's value row sequence, truncating at the first PAD.
fn decode_values(tp: &TriplePrediction, cfg: &NetConfig) -> Vec<Vec<usize>> {
    tp.value_dists
        .iter()
        .map(|vd| {
            let mut toks = Vec::new();
            for t in 0..cfg.max_len {
                let tok = argmax(&vd.values()[t * cfg.vocab..(t + 1) * cfg.vocab]);
                if tok == PAD {
                    break;
                }
                toks.push(tok);
            }
            toks
        })
        .collect()
}

/// Final NLU prediction format: one (intent, slot type, value tokens) triple
/// per decoded slot. Evaluation only, never an SLU target.
pub fn to_list(tp: &TriplePrediction, cfg: &NetConfig) -> Vec<Triple> {
    let intent = argmax(tp.intent_dist.values());
    let values = decode_values(tp, cfg);
    tp.slot_type_dists
        .iter()
        .zip(values)
        .map(|(td, value)| Triple {
            intent,
            slot_type: argmax(td.values()),
            value,
        })
        .collect()
}

/// Concatenated decoded slot values, truncated or PAD-filled to length L.
pub fn to_sequence(tp: &TriplePrediction, cfg: &NetConfig) -> InterfaceTensor {
    let mut seq: Vec<usize> = decode_values(tp, cfg).into_iter().flatten().collect();
    seq.truncate(cfg.max_len);
    let degenerate = tp.slot_count == 0;
    seq.resize(cfg.max_len, PAD);
    InterfaceTensor {
        kind: InterfaceKind::Sequence,
        payload: InterfacePayload::Tokens(seq),
        degenerate,
    }
}

/// Binary tag per transcript position: 1 iff that token occurs in any
/// decoded slot value.
pub fn to_ner_tags(tp: &TriplePrediction, transcript: &[usize], cfg: &NetConfig) -> InterfaceTensor {
    assert!(
        transcript.len() <= cfg.max_len,
        "to_ner_tags: transcript longer than max_len"
    );
    let mut slot_tokens = std::collections::HashSet::new();
    for v in decode_values(tp, cfg) {
        slot_tokens.extend(v);
    }
    let mut tags = vec![false; cfg.max_len];
    for (t, &tok) in transcript.iter().enumerate() {
        tags[t] = tok != PAD && slot_tokens.contains(&tok);
    }
    InterfaceTensor {
        kind: InterfaceKind::NerTag,
        payload: InterfacePayload::Binary(tags),
        degenerate: tp.slot_count == 0,
    }
}

/// One softmax row block per slot, untouched. Variable-length; rejected as
/// an SLU target.
pub fn to_softmax(tp: &TriplePrediction) -> InterfaceTensor {
    InterfaceTensor {
        kind: InterfaceKind::Softmax,
        payload: InterfacePayload::PerSlotSoft(tp.value_dists.clone()),
        degenerate: tp.slot_count == 0,
    }
}

fn pad_one_hot_rows(cfg: &NetConfig) -> Node {
    one_hot_rows(&vec![PAD; cfg.max_len], cfg.vocab)
}

fn summed_values(tp: &TriplePrediction, normalize: bool) -> Option<Node> {
    if tp.slot_count == 0 {
        return None;
    }
    let sum = sum_nodes(&tp.value_dists);
    Some(if normalize {
        sum.scale(1.0 / tp.slot_count as f64)
    } else {
        sum
    })
}

/// Sum of the per-slot value distributions over the slot dimension, each row
/// divided by slot_count so it stays a distribution. With `normalize: false`
/// the raw sum is kept (row sums equal slot_count).
pub fn to_sum_of_softmax_opts(
    tp: &TriplePrediction,
    cfg: &NetConfig,
    normalize: bool,
) -> InterfaceTensor {
    match summed_values(tp, normalize) {
        Some(data) => InterfaceTensor {
            kind: InterfaceKind::SumOfSoftmax,
            payload: InterfacePayload::Soft(data),
            degenerate: false,
        },
        None => InterfaceTensor {
            kind: InterfaceKind::SumOfSoftmax,
            payload: InterfacePayload::Soft(pad_one_hot_rows(cfg)),
            degenerate: true,
        },
    }
}

pub fn to_sum_of_softmax(tp: &TriplePrediction, cfg: &NetConfig) -> InterfaceTensor {
    to_sum_of_softmax_opts(tp, cfg, true)
}

/// Value rows extended with the intent distribution (same at every position)
/// and a per-position mixture of the slot-type distributions. Slot j's
/// mixture weight at position t is its non-PAD value mass, renormalized over
/// slots; uniform when every slot is all-PAD at that position.
pub fn to_append_intent_slot_opts(
    tp: &TriplePrediction,
    cfg: &NetConfig,
    normalize: bool,
) -> InterfaceTensor {
    let l = cfg.max_len;
    let intent_seg = tp.intent_dist.broadcast_rows(l);
    if tp.slot_count == 0 {
        let s_seg = Node::constant(
            Shape::matrix(l, cfg.slot_types),
            vec![1.0 / cfg.slot_types as f64; l * cfg.slot_types],
        );
        return InterfaceTensor {
            kind: InterfaceKind::AppendIntentSlot,
            payload: InterfacePayload::Soft(concat_cols(&[
                pad_one_hot_rows(cfg),
                intent_seg,
                s_seg,
            ])),
            degenerate: true,
        };
    }
    let v_seg = summed_values(tp, normalize).unwrap();

    // Per-position slot weights: w_j(t) = 1 - P_j,t(PAD), renormalized.
    let weights: Vec<Node> = tp
        .value_dists
        .iter()
        .map(|vd| {
            let pad_mass = vd.slice_cols(PAD, 1).reshape(Shape::vector(l));
            Node::ones(Shape::vector(l)).sub(&pad_mass)
        })
        .collect();
    let denom = sum_nodes(&weights);
    // Positions where every slot puts all its mass on PAD fall back to
    // uniform weights; the indicator is a constant, so smoothness holds
    // everywhere else.
    let fallback: Vec<f64> = denom
        .values()
        .iter()
        .map(|&d| if d < 1e-12 { 1.0 } else { 0.0 })
        .collect();
    let fallback = Node::constant(Shape::vector(l), fallback);
    let uniform = 1.0 / tp.slot_count as f64;
    let denom = denom.add(&fallback);
    let s_seg = sum_nodes(
        &tp.slot_type_dists
            .iter()
            .zip(&weights)
            .map(|(td, w)| {
                let w = w.add(&fallback.scale(uniform)).div(&denom);
                w.reshape(Shape::matrix(l, 1))
                    .matmul(&td.reshape(Shape::matrix(1, cfg.slot_types)))
            })
            .collect::<Vec<_>>(),
    );
    InterfaceTensor {
        kind: InterfaceKind::AppendIntentSlot,
        payload: InterfacePayload::Soft(concat_cols(&[v_seg, intent_seg, s_seg])),
        degenerate: false,
    }
}

pub fn to_append_intent_slot(tp: &TriplePrediction, cfg: &NetConfig) -> InterfaceTensor {
    to_append_intent_slot_opts(tp, cfg, true)
}

/// Build the configured target kind for one prediction.
pub fn convert(
    tp: &TriplePrediction,
    kind: InterfaceKind,
    transcript: &[usize],
    cfg: &NetConfig,
    normalize: bool,
) -> InterfaceTensor {
    match kind {
        InterfaceKind::List => InterfaceTensor {
            kind,
            payload: InterfacePayload::Triples(to_list(tp, cfg)),
            degenerate: tp.slot_count == 0,
        },
        InterfaceKind::Sequence => to_sequence(tp, cfg),
        InterfaceKind::NerTag => to_ner_tags(tp, transcript, cfg),
        InterfaceKind::Softmax => to_softmax(tp),
        InterfaceKind::SumOfSoftmax => to_sum_of_softmax_opts(tp, cfg, normalize),
        InterfaceKind::AppendIntentSlot => to_append_intent_slot_opts(tp, cfg, normalize),
    }
}

/// Batched targets for training: one row block (B x W) per position, plus
/// which utterances were degenerate (slot_count = 0).
pub struct BatchTargets {
    pub kind: InterfaceKind,
    pub rows: Vec<Node>,
    pub degenerate: Vec<bool>,
}

pub fn batch_targets(
    out: &NluBatchOut,
    cfg: &NetConfig,
    kind: InterfaceKind,
    transcripts: &[&[usize]],
    normalize: bool,
) -> BatchTargets {
    let b = out.size;
    assert_eq!(transcripts.len(), b, "batch_targets: size mismatch");
    let l = cfg.max_len;
    let degenerate: Vec<bool> = out.slot_counts.iter().map(|&n| n == 0).collect();
    match kind {
        InterfaceKind::Sequence | InterfaceKind::NerTag => {
            // Hard targets: decode per utterance, then stack one-hot rows.
            let width = if kind == InterfaceKind::Sequence { cfg.vocab } else { 2 };
            let mut ids = vec![vec![PAD; b]; l];
            for i in 0..b {
                let tp = crate::nets::prediction_for(out, cfg, i);
                let tensor = match kind {
                    InterfaceKind::Sequence => to_sequence(&tp, cfg),
                    _ => to_ner_tags(&tp, transcripts[i], cfg),
                };
                match tensor.payload {
                    InterfacePayload::Tokens(seq) => {
                        for t in 0..l {
                            ids[t][i] = seq[t];
                        }
                    }
                    InterfacePayload::Binary(tags) => {
                        for t in 0..l {
                            ids[t][i] = tags[t] as usize;
                        }
                    }
                    _ => unreachable!(),
                }
            }
            BatchTargets {
                kind,
                rows: ids.iter().map(|r| one_hot_rows(r, width)).collect(),
                degenerate,
            }
        }
        InterfaceKind::SumOfSoftmax | InterfaceKind::AppendIntentSlot => {
            // Soft targets built directly on the batched graph. Slot j
            // contributes to utterance i only if selected; degenerate rows
            // get a constant fallback.
            let slot_w: Vec<Node> = (0..cfg.max_slots)
                .map(|j| {
                    let w: Vec<f64> = (0..b)
                        .map(|i| {
                            if out.selected[i][j] {
                                if normalize {
                                    1.0 / out.slot_counts[i] as f64
                                } else {
                                    1.0
                                }
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    Node::constant(Shape::vector(b), w)
                })
                .collect();
            let deg_mask = Node::constant(
                Shape::vector(b),
                degenerate.iter().map(|&d| d as u8 as f64).collect(),
            );
            let pad_row = one_hot_rows(&vec![PAD; b], cfg.vocab);
            let mut rows = Vec::with_capacity(l);
            for t in 0..l {
                let v_seg = sum_nodes(
                    &(0..cfg.max_slots)
                        .map(|j| out.value_dists[j][t].scale_rows(&slot_w[j]))
                        .collect::<Vec<_>>(),
                )
                .add(&pad_row.scale_rows(&deg_mask));
                if kind == InterfaceKind::SumOfSoftmax {
                    rows.push(v_seg);
                    continue;
                }
                // Slot-type mixture weights from non-PAD value mass.
                let sel: Vec<Node> = (0..cfg.max_slots)
                    .map(|j| {
                        Node::constant(
                            Shape::vector(b),
                            (0..b)
                                .map(|i| out.selected[i][j] as u8 as f64)
                                .collect(),
                        )
                    })
                    .collect();
                let w_t: Vec<Node> = (0..cfg.max_slots)
                    .map(|j| {
                        let pad_mass = out.value_dists[j][t]
                            .slice_cols(PAD, 1)
                            .reshape(Shape::vector(b));
                        Node::ones(Shape::vector(b)).sub(&pad_mass).mul(&sel[j])
                    })
                    .collect();
                let denom = sum_nodes(&w_t);
                let fallback: Vec<f64> = denom
                    .values()
                    .iter()
                    .zip(&degenerate)
                    .map(|(&d, &deg)| if !deg && d < 1e-12 { 1.0 } else { 0.0 })
                    .collect();
                let fallback = Node::constant(Shape::vector(b), fallback);
                let uniform: Vec<f64> = (0..b)
                    .map(|i| {
                        if out.slot_counts[i] > 0 {
                            1.0 / out.slot_counts[i] as f64
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let uniform = Node::constant(Shape::vector(b), uniform);
                let denom = denom.add(&fallback).add(&deg_mask);
                let s_seg = sum_nodes(
                    &(0..cfg.max_slots)
                        .map(|j| {
                            let w = w_t[j]
                                .add(&fallback.mul(&uniform).mul(&sel[j]))
                                .div(&denom);
                            out.type_dists[j].scale_rows(&w)
                        })
                        .collect::<Vec<_>>(),
                )
                .add(
                    &Node::constant(
                        Shape::matrix(b, cfg.slot_types),
                        vec![1.0 / cfg.slot_types as f64; b * cfg.slot_types],
                    )
                    .scale_rows(&deg_mask),
                );
                rows.push(concat_cols(&[v_seg, out.intent_dist.clone(), s_seg]));
            }
            BatchTargets { kind, rows, degenerate }
        }
        InterfaceKind::List | InterfaceKind::Softmax => {
            panic!("variable-length interfaces are unavailable as batched SLU targets")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, grad, ParamSet};
    use crate::nets::{
        init_multitask, init_nlu, multitask_forward, nlu_forward, slu_loss, NetConfig, SluLossKind,
    };
    use crate::synthdata::{default_grammar, generate_corpus_sized};

    fn cfg(kind: InterfaceKind) -> NetConfig {
        NetConfig::from_grammar(&default_grammar(), kind)
    }

    /// Hand-built prediction with explicit distributions.
    fn manual_tp(
        cfg: &NetConfig,
        intent: &[f64],
        slots: &[(Vec<f64>, Vec<Vec<f64>>)],
    ) -> TriplePrediction {
        TriplePrediction {
            intent_dist: Node::constant(Shape::vector(cfg.intents), intent.to_vec()),
            slot_count: slots.len(),
            slot_type_dists: slots
                .iter()
                .map(|(td, _)| Node::constant(Shape::vector(cfg.slot_types), td.clone()))
                .collect(),
            value_dists: slots
                .iter()
                .map(|(_, rows)| {
                    Node::constant(
                        Shape::matrix(cfg.max_len, cfg.vocab),
                        rows.iter().flatten().copied().collect(),
                    )
                })
                .collect(),
        }
    }

    fn peaked(n: usize, at: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[at] = 1.0;
        v
    }

    fn uniform_rows(l: usize, v: usize) -> Vec<Vec<f64>> {
        vec![vec![1.0 / v as f64; v]; l]
    }

    fn peaked_rows(cfg: &NetConfig, toks: &[usize]) -> Vec<Vec<f64>> {
        (0..cfg.max_len)
            .map(|t| peaked(cfg.vocab, toks.get(t).copied().unwrap_or(PAD)))
            .collect()
    }

    #[test]
    fn attribute_table() {
        use InterfaceKind::*;
        let expect = [
            (List, false, false),
            (Sequence, true, false),
            (NerTag, true, false),
            (Softmax, false, true),
            (SumOfSoftmax, true, true),
            (AppendIntentSlot, true, true),
        ];
        for (k, fixed, flow) in expect {
            assert_eq!(k.fixed_length(), fixed, "{:?} fixed_length", k);
            assert_eq!(k.grad_flow(), flow, "{:?} grad_flow", k);
        }
    }

    #[test]
    fn to_list_empty_and_peaked() {
        let c = cfg(InterfaceKind::SumOfSoftmax);
        let tp = manual_tp(&c, &peaked(c.intents, 2), &[]);
        assert!(to_list(&tp, &c).is_empty());

        let tp = manual_tp(
            &c,
            &peaked(c.intents, 2),
            &[(peaked(c.slot_types, 4), peaked_rows(&c, &[30, 31]))],
        );
        let triples = to_list(&tp, &c);
        assert_eq!(triples.len(), 1);
        assert_eq!(triples[0].intent, 2);
        assert_eq!(triples[0].slot_type, 4);
        assert_eq!(triples[0].value, vec![30, 31]);
    }

    #[test]
    fn to_list_matches_argmax_oracle_on_random_prediction() {
        use rand::{Rng, SeedableRng};
        let c = cfg(InterfaceKind::SumOfSoftmax);
        let mut rng = rand::rngs::StdRng::seed_from_u64(7);
        let mut rand_dist = |n: usize| -> Vec<f64> {
            let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / s).collect()
        };
        let slots: Vec<(Vec<f64>, Vec<Vec<f64>>)> = (0..2)
            .map(|_| {
                (
                    rand_dist(c.slot_types),
                    (0..c.max_len).map(|_| rand_dist(c.vocab)).collect(),
                )
            })
            .collect();
        let intent = rand_dist(c.intents);
        let tp = manual_tp(&c, &intent, &slots);
        let triples = to_list(&tp, &c);
        // Independent argmax-and-truncate oracle on the raw vectors.
        let arg = |v: &[f64]| {
            v.iter()
                .enumerate()
                .fold((0usize, f64::NEG_INFINITY), |(bi, bv), (i, &x)| {
                    if x > bv {
                        (i, x)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        };
        for (j, (td, rows)) in slots.iter().enumerate() {
            assert_eq!(triples[j].intent, arg(&intent));
            assert_eq!(triples[j].slot_type, arg(td));
            let mut expect = Vec::new();
            for row in rows {
                let tok = arg(row);
                if tok == PAD {
                    break;
                }
                expect.push(tok);
            }
            assert_eq!(triples[j].value, expect);
        }
    }

    #[test]
    fn to_sequence_patterns() {
        let c = cfg(InterfaceKind::Sequence);
        let tp = manual_tp(&c, &peaked(c.intents, 0), &[]);
        match to_sequence(&tp, &c).payload {
            InterfacePayload::Tokens(seq) => assert!(seq.iter().all(|&t| t == PAD)),
            _ => panic!("wrong payload"),
        }

        let tp = manual_tp(
            &c,
            &peaked(c.intents, 0),
            &[
                (peaked(c.slot_types, 1), peaked_rows(&c, &[40, 41])),
                (peaked(c.slot_types, 2), peaked_rows(&c, &[33])),
            ],
        );
        match to_sequence(&tp, &c).payload {
            InterfacePayload::Tokens(seq) => {
                let mut expect = vec![40, 41, 33];
                expect.resize(c.max_len, PAD);
                assert_eq!(seq, expect);
            }
            _ => panic!("wrong payload"),
        }
    }

    #[test]
    fn to_ner_tags_patterns() {
        let c = cfg(InterfaceKind::NerTag);
        let transcript = vec![5usize, 30, 6, 31, 1];
        let tp = manual_tp(&c, &peaked(c.intents, 0), &[]);
        match to_ner_tags(&tp, &transcript, &c).payload {
            InterfacePayload::Binary(tags) => assert!(tags.iter().all(|&b| !b)),
            _ => panic!("wrong payload"),
        }

        let tp = manual_tp(
            &c,
            &peaked(c.intents, 0),
            &[(peaked(c.slot_types, 0), peaked_rows(&c, &[30, 31]))],
        );
        match to_ner_tags(&tp, &transcript, &c).payload {
            InterfacePayload::Binary(tags) => {
                assert_eq!(&tags[..5], &[false, true, false, true, false]);
                assert!(tags[5..].iter().all(|&b| !b));
            }
            _ => panic!("wrong payload"),
        }

        // Value covering the whole transcript marks every non-PAD position.
        let tp = manual_tp(
            &c,
            &peaked(c.intents, 0),
            &[(peaked(c.slot_types, 0), peaked_rows(&c, &transcript))],
        );
        match to_ner_tags(&tp, &transcript, &c).payload {
            InterfacePayload::Binary(tags) => {
                for (t, &tok) in transcript.iter().enumerate() {
                    assert_eq!(tags[t], tok != PAD);
                }
            }
            _ => panic!("wrong payload"),
        }
    }

    #[test]
    fn to_ner_random_matches_membership_scan() {
        use rand::{Rng, SeedableRng};
        let c = cfg(InterfaceKind::NerTag);
        let mut rng = rand::rngs::StdRng::seed_from_u64(11);
        let transcript: Vec<usize> = (0..8).map(|_| rng.gen_range(2..c.vocab)).collect();
        let toks: Vec<usize> = (0..3).map(|_| rng.gen_range(2..c.vocab)).collect();
        let tp = manual_tp(
            &c,
            &peaked(c.intents, 1),
            &[(peaked(c.slot_types, 1), peaked_rows(&c, &toks))],
        );
        match to_ner_tags(&tp, &transcript, &c).payload {
            InterfacePayload::Binary(tags) => {
                for (t, &tok) in transcript.iter().enumerate() {
                    assert_eq!(tags[t], toks.contains(&tok), "position {}", t);
                }
            }
            _ => panic!("wrong payload"),
        }
    }

    #[test]
    fn sum_of_softmax_uniform_and_identity() {
        let c = cfg(InterfaceKind::SumOfSoftmax);
        let tp = manual_tp(
            &c,
            &peaked(c.intents, 0),
            &[
                (peaked(c.slot_types, 0), uniform_rows(c.max_len, c.vocab)),
                (peaked(c.slot_types, 1), uniform_rows(c.max_len, c.vocab)),
            ],
        );
        match to_sum_of_softmax(&tp, &c).payload {
            InterfacePayload::Soft(n) => {
                for v in n.values() {
                    assert!((v - 1.0 / c.vocab as f64).abs() < 1e-12);
                }
            }
            _ => panic!("wrong payload"),
        }

        let rows = peaked_rows(&c, &[30, 31, 32]);
        let tp = manual_tp(&c, &peaked(c.intents, 0), &[(peaked(c.slot_types, 0), rows.clone())]);
        match to_sum_of_softmax(&tp, &c).payload {
            InterfacePayload::Soft(n) => {
                let flat: Vec<f64> = rows.into_iter().flatten().collect();
                assert_eq!(n.values(), &flat[..]);
            }
            _ => panic!("wrong payload"),
        }
    }

    #[test]
    fn sum_of_softmax_degenerate_is_pad_one_hot_and_flagged() {
        let c = cfg(InterfaceKind::SumOfSoftmax);
        let tp = manual_tp(&c, &peaked(c.intents, 0), &[]);
        let t = to_sum_of_softmax(&tp, &c);
        assert!(t.degenerate);
        match t.payload {
            InterfacePayload::Soft(n) => {
                for r in 0..c.max_len {
                    for v in 0..c.vocab {
                        let want = if v == PAD { 1.0 } else { 0.0 };
                        assert_eq!(n.values()[r * c.vocab + v], want);
                    }
                }
            }
            _ => panic!("wrong payload"),
        }
    }

    #[test]
    fn sum_of_softmax_grad_is_inverse_slot_count() {
        // d(target entry) / d(value_dists entry) = 1/n at matching positions.
        let c = cfg(InterfaceKind::SumOfSoftmax);
        let n_slots = 3usize;
        let mut params = ParamSet::new();
        for j in 0..n_slots {
            params.insert(
                &format!("v{}", j),
                Node::param(
                    Shape::matrix(c.max_len, c.vocab),
                    uniform_rows(c.max_len, c.vocab).into_iter().flatten().collect(),
                ),
            );
        }
        let build = |ps: &ParamSet| {
            let tp = TriplePrediction {
                intent_dist: Node::constant(Shape::vector(c.intents), peaked(c.intents, 0)),
                slot_count: n_slots,
                slot_type_dists: (0..n_slots)
                    .map(|_| Node::constant(Shape::vector(c.slot_types), peaked(c.slot_types, 0)))
                    .collect(),
                value_dists: (0..n_slots).map(|j| ps.at(&format!("v{}", j)).clone()).collect(),
            };
            match to_sum_of_softmax(&tp, &c).payload {
                InterfacePayload::Soft(n) => n.slice_rows(2, 1).slice_cols(7, 1).sum_all(),
                _ => unreachable!(),
            }
        };
        let g = grad(&build(&params), &params, false);
        for j in 0..n_slots {
            let gv = g.at(&format!("v{}", j));
            for r in 0..c.max_len {
                for v in 0..c.vocab {
                    let want = if r == 2 && v == 7 { 1.0 / n_slots as f64 } else { 0.0 };
                    assert!(
                        (gv.values()[r * c.vocab + v] - want).abs() < 1e-12,
                        "slot {} ({},{})",
                        j,
                        r,
                        v
                    );
                }
            }
        }
        let err = finite_diff_check(build, &params, 1e-5);
        assert!(err < 1e-6, "finite-difference error {}", err);
    }

    #[test]
    fn append_single_slot_s_segment_and_intent_rows() {
        let c = cfg(InterfaceKind::AppendIntentSlot);
        let intent = vec![0.1, 0.2, 0.3, 0.4];
        let td = vec![0.05, 0.1, 0.15, 0.2, 0.25, 0.25];
        let tp = manual_tp(&c, &intent, &[(td.clone(), peaked_rows(&c, &[30, 31]))]);
        let t = to_append_intent_slot(&tp, &c);
        let n = match t.payload {
            InterfacePayload::Soft(n) => n,
            _ => panic!("wrong payload"),
        };
        let w = c.vocab + c.intents + c.slot_types;
        assert_eq!(n.shape(), &Shape::matrix(c.max_len, w));
        for r in 0..c.max_len {
            let row = &n.values()[r * w..(r + 1) * w];
            // Intent segment identical across all rows.
            for (i, &iv) in intent.iter().enumerate() {
                assert!((row[c.vocab + i] - iv).abs() < 1e-12);
            }
            // Single slot: S segment equals its slot_type_dist at non-PAD
            // positions (rows 0 and 1); PAD-mass rows fall back to uniform,
            // which for one slot is also the full weight on that slot.
            for (s, &sv) in td.iter().enumerate() {
                assert!((row[c.vocab + c.intents + s] - sv).abs() < 1e-12, "row {}", r);
            }
        }
    }

    #[test]
    fn append_segment_sums_on_random_prediction() {
        let c = cfg(InterfaceKind::AppendIntentSlot);
        let theta2 = init_nlu(&c, 77);
        let g = default_grammar();
        let corpus = generate_corpus_sized(&g, 101, 12, 1, 1).unwrap();
        let mut checked = 0;
        for u in &corpus.train {
            let tp = nlu_forward(&theta2, &c, u.transcript());
            if tp.slot_count == 0 {
                continue;
            }
            checked += 1;
            let t = to_append_intent_slot(&tp, &c);
            let n = match t.payload {
                InterfacePayload::Soft(n) => n,
                _ => unreachable!(),
            };
            let w = c.vocab + c.intents + c.slot_types;
            for r in 0..c.max_len {
                let row = &n.values()[r * w..(r + 1) * w];
                let sv: f64 = row[..c.vocab].iter().sum();
                let si: f64 = row[c.vocab..c.vocab + c.intents].iter().sum();
                let ss: f64 = row[c.vocab + c.intents..].iter().sum();
                assert!((sv - 1.0).abs() < 1e-9, "V segment sum {}", sv);
                assert!((si - 1.0).abs() < 1e-9, "I segment sum {}", si);
                assert!((ss - 1.0).abs() < 1e-9, "S segment sum {}", ss);
                assert!(row.iter().all(|&x| x >= -1e-12));
            }
        }
        assert!(checked > 0, "every draw was degenerate");
    }

    #[test]
    fn unnormalized_sum_rows_sum_to_slot_count() {
        let c = cfg(InterfaceKind::SumOfSoftmax);
        let tp = manual_tp(
            &c,
            &peaked(c.intents, 0),
            &[
                (peaked(c.slot_types, 0), uniform_rows(c.max_len, c.vocab)),
                (peaked(c.slot_types, 1), uniform_rows(c.max_len, c.vocab)),
                (peaked(c.slot_types, 2), uniform_rows(c.max_len, c.vocab)),
            ],
        );
        match to_sum_of_softmax_opts(&tp, &c, false).payload {
            InterfacePayload::Soft(n) => {
                for r in 0..c.max_len {
                    let s: f64 = n.values()[r * c.vocab..(r + 1) * c.vocab].iter().sum();
                    assert!((s - 3.0).abs() < 1e-9);
                }
            }
            _ => panic!("wrong payload"),
        }
    }

    #[test]
    fn grad_flow_matches_attribute_table() {
        let g = default_grammar();
        let corpus = generate_corpus_sized(&g, 303, 8, 1, 1).unwrap();
        for kind in [
            InterfaceKind::Sequence,
            InterfaceKind::NerTag,
            InterfaceKind::SumOfSoftmax,
            InterfaceKind::AppendIntentSlot,
        ] {
            let c = cfg(kind);
            let theta2 = init_nlu(&c, 5);
            let theta1 = init_multitask(&c, 6);
            let mut any_nonzero = false;
            for u in &corpus.train {
                let tp = nlu_forward(&theta2, &c, u.transcript());
                if tp.slot_count == 0 {
                    continue;
                }
                let target = convert(&tp, kind, u.transcript(), &c, true);
                let (_, slu_logits) = multitask_forward(&theta1, &c, u);
                let loss = slu_loss(&slu_logits, &target, &c, SluLossKind::Ce);
                let gr = grad(&loss, &theta2, false);
                let norm: f64 = gr.iter().flat_map(|(_, n)| n.values()).map(|x| x * x).sum();
                if kind.grad_flow() {
                    any_nonzero |= norm > 0.0;
                } else {
                    assert_eq!(norm, 0.0, "{:?} leaked gradient to theta2", kind);
                }
            }
            if kind.grad_flow() {
                assert!(any_nonzero, "{:?} carried no gradient to theta2", kind);
            }
        }
    }

    #[test]
    fn batched_soft_targets_match_per_utterance_path() {
        let g = default_grammar();
        let corpus = generate_corpus_sized(&g, 505, 6, 1, 1).unwrap();
        for kind in [InterfaceKind::SumOfSoftmax, InterfaceKind::AppendIntentSlot] {
            let c = cfg(kind);
            let theta2 = init_nlu(&c, 21);
            let transcripts: Vec<&[usize]> =
                corpus.train.iter().map(|u| u.transcript()).collect();
            let tb = crate::nets::TokenBatch::new(&transcripts, c.max_len);
            let out = crate::nets::nlu_forward_batch(&theta2, &c, &tb);
            let bt = batch_targets(&out, &c, kind, &transcripts, true);
            let w = bt.rows[0].shape().cols();
            for (i, u) in corpus.train.iter().enumerate() {
                let tp = nlu_forward(&theta2, &c, u.transcript());
                let single = convert(&tp, kind, u.transcript(), &c, true);
                let sn = match single.payload {
                    InterfacePayload::Soft(n) => n,
                    _ => unreachable!(),
                };
                assert_eq!(bt.degenerate[i], single.degenerate);
                for t in 0..c.max_len {
                    for k in 0..w {
                        let a = bt.rows[t].values()[i * w + k];
                        let b = sn.values()[t * w + k];
                        assert!(
                            (a - b).abs() < 1e-9,
                            "{:?} utterance {} t={} k={}: {} vs {}",
                            kind,
                            i,
                            t,
                            k,
                            a,
                            b
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn batched_hard_targets_match_per_utterance_path() {
        let g = default_grammar();
        let corpus = generate_corpus_sized(&g, 707, 6, 1, 1).unwrap();
        for kind in [InterfaceKind::Sequence, InterfaceKind::NerTag] {
            let c = cfg(kind);
            let theta2 = init_nlu(&c, 22);
            let transcripts: Vec<&[usize]> =
                corpus.train.iter().map(|u| u.transcript()).collect();
            let tb = crate::nets::TokenBatch::new(&transcripts, c.max_len);
            let out = crate::nets::nlu_forward_batch(&theta2, &c, &tb);
            let bt = batch_targets(&out, &c, kind, &transcripts, true);
            let w = bt.rows[0].shape().cols();
            for (i, u) in corpus.train.iter().enumerate() {
                let tp = nlu_forward(&theta2, &c, u.transcript());
                let ids: Vec<usize> = match convert(&tp, kind, u.transcript(), &c, true).payload {
                    InterfacePayload::Tokens(seq) => seq,
                    InterfacePayload::Binary(tags) => {
                        tags.into_iter().map(|b| b as usize).collect()
                    }
                    _ => unreachable!(),
                };
                for t in 0..c.max_len {
                    for k in 0..w {
                        let want = if k == ids[t] { 1.0 } else { 0.0 };
                        assert_eq!(bt.rows[t].values()[i * w + k], want);
                    }
                }
            }
        }
    }

    #[test]
    fn fixed_length_kinds_always_length_l() {
        let c = cfg(InterfaceKind::SumOfSoftmax);
        for n_slots in 0..=3usize {
            let slots: Vec<(Vec<f64>, Vec<Vec<f64>>)> = (0..n_slots)
                .map(|j| (peaked(c.slot_types, j), peaked_rows(&c, &[30 + j, 31])))
                .collect();
            let tp = manual_tp(&c, &peaked(c.intents, 0), &slots);
            match to_sequence(&tp, &c).payload {
                InterfacePayload::Tokens(seq) => assert_eq!(seq.len(), c.max_len),
                _ => unreachable!(),
            }
            match to_sum_of_softmax(&tp, &c).payload {
                InterfacePayload::Soft(n) => assert_eq!(n.shape().rows(), c.max_len),
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn softmax_kind_preserves_per_slot_rows() {
        let c = cfg(InterfaceKind::Softmax);
        let rows = uniform_rows(c.max_len, c.vocab);
        let tp = manual_tp(
            &c,
            &peaked(c.intents, 0),
            &[(peaked(c.slot_types, 0), rows.clone()), (peaked(c.slot_types, 1), rows)],
        );
        match to_softmax(&tp).payload {
            InterfacePayload::PerSlotSoft(v) => assert_eq!(v.len(), 2),
            _ => panic!("wrong payload"),
        }
    }
}
