//! Evaluation: character error rate on ASR hypotheses, and NLU quality
//! (exact-match triple F1, intent accuracy) with the NLU network fed the
//! ASR 1-best hypothesis. F1 on the manual transcript is reported alongside
//! as an upper-reference column.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Node, ParamSet};
use crate::interface::to_list;
use crate::nets::{
    multitask_forward_batch, nlu_forward_batch, prediction_for, AcousticBatch, NetConfig,
    TokenBatch,
};
use crate::synthdata::{Triple, Utterance, PAD};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Metrics {
    pub cer: f64,
    pub triple_f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub intent_acc: f64,
    pub triple_f1_transcript: f64,
    pub n_utts: usize,
}

fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-position argmax (ties go to the lowest index), PAD stripped.
pub fn decode_greedy(asr_logits: &Node) -> Vec<usize> {
    let v = asr_logits.shape().cols();
    asr_logits
        .values()
        .chunks(v)
        .map(argmax_row)
        .filter(|&tok| tok != PAD)
        .collect()
}

/// Levenshtein distance with unit costs divided by the reference length.
pub fn cer(hyp: &[usize], reference: &[usize]) -> f64 {
    assert!(!reference.is_empty(), "cer: empty reference rejected");
    levenshtein(hyp, reference) as f64 / reference.len() as f64
}

fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ai) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &bj) in b.iter().enumerate() {
            let sub = prev[j] + (ai != bj) as usize;
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn multiset_overlap(pred: &[Triple], gold: &[Triple]) -> usize {
    let mut counts: HashMap<&Triple, usize> = HashMap::new();
    for t in gold {
        *counts.entry(t).or_insert(0) += 1;
    }
    let mut matched = 0;
    for t in pred {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                matched += 1;
            }
        }
    }
    matched
}

/// Exact-match multiset F1 over (intent, slot type, value) triples:
/// (f1, precision, recall), all zero when both sides are empty of matches.
pub fn triple_f1(pred: &[Triple], gold: &[Triple]) -> (f64, f64, f64) {
    let matched = multiset_overlap(pred, gold);
    prf(matched, pred.len(), gold.len())
}

fn prf(matched: usize, n_pred: usize, n_gold: usize) -> (f64, f64, f64) {
    let p = if n_pred == 0 { 0.0 } else { matched as f64 / n_pred as f64 };
    let r = if n_gold == 0 { 0.0 } else { matched as f64 / n_gold as f64 };
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (f1, p, r)
}

const EVAL_CHUNK: usize = 64;

/// Decode every utterance's ASR 1-best. Exposed separately so hypotheses can
/// also be used to build retraining corpora.
pub fn decode_corpus(theta1: &ParamSet, nc: &NetConfig, utts: &[Utterance]) -> Vec<Vec<usize>> {
    let mut hyps = Vec::with_capacity(utts.len());
    for chunk in utts.chunks(EVAL_CHUNK) {
        let refs: Vec<&Utterance> = chunk.iter().collect();
        let batch = AcousticBatch::new(&refs, nc);
        let mt = multitask_forward_batch(theta1, nc, &batch);
        for (i, u) in chunk.iter().enumerate() {
            let len = u.transcript().len();
            let mut hyp = Vec::new();
            for t in 0..len.min(nc.max_len) {
                let row = &mt.asr[t].values()[i * nc.vocab..(i + 1) * nc.vocab];
                let tok = argmax_row(row);
                if tok != PAD {
                    hyp.push(tok);
                }
            }
            hyps.push(hyp);
        }
    }
    hyps
}

fn nlu_triples(theta2: &ParamSet, nc: &NetConfig, inputs: &[Vec<usize>]) -> Vec<Vec<Triple>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(EVAL_CHUNK) {
        // An empty hypothesis is fed as a single PAD token so the NLU
        // network still produces a (chance-level) prediction.
        let pad_only = vec![PAD];
        let seqs: Vec<&[usize]> = chunk
            .iter()
            .map(|s| if s.is_empty() { &pad_only[..] } else { &s[..] })
            .collect();
        let tb = TokenBatch::new(&seqs, nc.max_len);
        let batch_out = nlu_forward_batch(theta2, nc, &tb);
        for i in 0..chunk.len() {
            let tp = prediction_for(&batch_out, nc, i);
            out.push(to_list(&tp, nc));
        }
    }
    out
}

/// Corpus-level metrics: CER is total edit distance over total reference
/// length; F1 is micro-averaged over all triples; intent accuracy scores the
/// (shared) intent of each utterance's predicted triples, taken from the
/// intent head even when no slot was decoded.
pub fn evaluate(theta1: &ParamSet, theta2: &ParamSet, nc: &NetConfig, test: &[Utterance]) -> Metrics {
    assert!(!test.is_empty(), "evaluate: empty test set");
    let hyps = decode_corpus(theta1, nc, test);
    let pred_hyp = nlu_triples(theta2, nc, &hyps);
    let transcripts: Vec<Vec<usize>> = test.iter().map(|u| u.transcript().to_vec()).collect();
    let pred_ref = nlu_triples(theta2, nc, &transcripts);

    // Predicted intents straight from the intent head (triples may be empty).
    let mut pred_intents = Vec::with_capacity(test.len());
    {
        let pad_only = vec![PAD];
        for chunk in hyps.chunks(EVAL_CHUNK) {
            let seqs: Vec<&[usize]> = chunk
                .iter()
                .map(|s| if s.is_empty() { &pad_only[..] } else { &s[..] })
                .collect();
            let tb = TokenBatch::new(&seqs, nc.max_len);
            let out = nlu_forward_batch(theta2, nc, &tb);
            for i in 0..chunk.len() {
                pred_intents.push(argmax_row(
                    &out.intent_dist.values()[i * nc.intents..(i + 1) * nc.intents],
                ));
            }
        }
    }

    let mut edits = 0usize;
    let mut ref_len = 0usize;
    let (mut m_hyp, mut np_hyp, mut ng) = (0usize, 0usize, 0usize);
    let (mut m_ref, mut np_ref) = (0usize, 0usize);
    let mut intent_hits = 0usize;
    for (i, u) in test.iter().enumerate() {
        edits += levenshtein(&hyps[i], u.transcript());
        ref_len += u.transcript().len();
        let gold = u.triples().expect("evaluate: test utterance without tags");
        m_hyp += multiset_overlap(&pred_hyp[i], gold);
        np_hyp += pred_hyp[i].len();
        ng += gold.len();
        m_ref += multiset_overlap(&pred_ref[i], gold);
        np_ref += pred_ref[i].len();
        if let Some(g0) = gold.first() {
            intent_hits += (pred_intents[i] == g0.intent) as usize;
        }
    }
    let (f1, precision, recall) = prf(m_hyp, np_hyp, ng);
    let (f1_ref, _, _) = prf(m_ref, np_ref, ng);
    Metrics {
        cer: edits as f64 / ref_len as f64,
        triple_f1: f1,
        precision,
        recall,
        intent_acc: intent_hits as f64 / test.len() as f64,
        triple_f1_transcript: f1_ref,
        n_utts: test.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Shape;
    use crate::interface::InterfaceKind;
    use crate::nets::{init_multitask, init_nlu, zeroed};
    use crate::synthdata::{default_grammar, generate_corpus_sized};
    use rand::{Rng, SeedableRng};

    #[test]
    fn decode_tie_break_and_peaked() {
        // Ties pick the lowest index: uniform rows decode to PAD (index 0)
        // and are stripped.
        let uniform = Node::zeros(Shape::matrix(3, 5));
        assert!(decode_greedy(&uniform).is_empty());

        // Tie among non-PAD tokens: lowest index wins.
        let mut vals = vec![0.0; 6];
        vals[2] = 1.0;
        vals[5] = 1.0;
        let logits = Node::constant(Shape::matrix(1, 6), vals);
        assert_eq!(decode_greedy(&logits), vec![2]);

        let mut peaked = vec![0.0; 12];
        peaked[3] = 5.0; // row 0 -> 3
        peaked[6 + 4] = 5.0; // row 1 -> 4
        let logits = Node::constant(Shape::matrix(2, 6), peaked);
        assert_eq!(decode_greedy(&logits), vec![3, 4]);
    }

    #[test]
    fn decode_matches_scalar_argmax_oracle() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(3);
        let (l, v) = (10usize, 7usize);
        let vals: Vec<f64> = (0..l * v).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = decode_greedy(&Node::constant(Shape::matrix(l, v), vals.clone()));
        let mut expect = Vec::new();
        for t in 0..l {
            let row = &vals[t * v..(t + 1) * v];
            let mut best = 0;
            for k in 1..v {
                if row[k] > row[best] {
                    best = k;
                }
            }
            if best != PAD {
                expect.push(best);
            }
        }
        assert_eq!(got, expect);
    }

    #[test]
    fn cer_basic_cases() {
        assert_eq!(cer(&[1, 2, 3], &[1, 2, 3]), 0.0);
        assert_eq!(cer(&[], &[1, 2, 3, 4, 5]), 1.0);
        assert_eq!(cer(&[1, 9, 3], &[1, 2, 3]), 1.0 / 3.0);
    }

    #[test]
    #[should_panic(expected = "empty reference")]
    fn cer_empty_reference_rejected() {
        cer(&[1], &[]);
    }

    /// Full-matrix DP oracle, coded independently of the two-row version.
    fn lev_oracle(a: &[usize], b: &[usize]) -> usize {
        let (n, m) = (a.len(), b.len());
        let mut d = vec![vec![0usize; m + 1]; n + 1];
        for i in 0..=n {
            d[i][0] = i;
        }
        for j in 0..=m {
            d[0][j] = j;
        }
        for i in 1..=n {
            for j in 1..=m {
                let c = if a[i - 1] == b[j - 1] { 0 } else { 1 };
                d[i][j] = (d[i - 1][j - 1] + c)
                    .min(d[i - 1][j] + 1)
                    .min(d[i][j - 1] + 1);
            }
        }
        d[n][m]
    }

    #[test]
    fn cer_matches_dp_oracle_on_random_pairs() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(5);
        for _ in 0..300 {
            let a: Vec<usize> = (0..rng.gen_range(0..15)).map(|_| rng.gen_range(0..6)).collect();
            let b: Vec<usize> = (0..rng.gen_range(1..15)).map(|_| rng.gen_range(0..6)).collect();
            assert_eq!(levenshtein(&a, &b), lev_oracle(&a, &b));
            assert!((cer(&a, &b) - lev_oracle(&a, &b) as f64 / b.len() as f64).abs() < 1e-15);
        }
    }

    fn tri(i: usize, s: usize, v: &[usize]) -> Triple {
        Triple {
            intent: i,
            slot_type: s,
            value: v.to_vec(),
        }
    }

    #[test]
    fn triple_f1_hand_cases() {
        let a = tri(0, 1, &[30]);
        let b = tri(0, 2, &[31, 32]);
        let c = tri(1, 3, &[40]);
        let (f1, p, r) = triple_f1(&[a.clone(), b.clone()], &[a.clone(), b.clone()]);
        assert_eq!((f1, p, r), (1.0, 1.0, 1.0));
        let (f1, _, _) = triple_f1(&[a.clone()], &[c.clone()]);
        assert_eq!(f1, 0.0);
        let (f1, p, r) = triple_f1(&[a.clone(), b.clone()], &[b.clone(), c.clone()]);
        assert_eq!((p, r), (0.5, 0.5));
        assert_eq!(f1, 0.5);
    }

    #[test]
    fn triple_f1_permutation_invariant() {
        let a = tri(0, 1, &[30]);
        let b = tri(0, 2, &[31]);
        let c = tri(1, 3, &[40]);
        let x = triple_f1(&[a.clone(), b.clone(), c.clone()], &[b.clone(), a.clone()]);
        let y = triple_f1(&[c.clone(), b.clone(), a.clone()], &[a.clone(), b.clone()]);
        assert_eq!(x, y);
    }

    #[test]
    fn zero_nets_score_chance_intent_accuracy() {
        let g = default_grammar();
        let nc = NetConfig::from_grammar(&g, InterfaceKind::SumOfSoftmax);
        let corpus = generate_corpus_sized(&g, 13, 1, 1, 200).unwrap();
        let theta1 = zeroed(&init_multitask(&nc, 0));
        let theta2 = zeroed(&init_nlu(&nc, 0));
        let m = evaluate(&theta1, &theta2, &nc, &corpus.test);
        // Uniform intent head always argmaxes to intent 0; the balanced test
        // set puts roughly 1/I of its mass there.
        assert!(
            (m.intent_acc - 1.0 / g.intents as f64).abs() < 0.08,
            "intent_acc {}",
            m.intent_acc
        );
        assert!(m.cer > 0.9, "zero ASR should be near-total error, cer {}", m.cer);
    }

    #[test]
    fn evaluate_is_deterministic() {
        let g = default_grammar();
        let nc = NetConfig::from_grammar(&g, InterfaceKind::SumOfSoftmax);
        let corpus = generate_corpus_sized(&g, 17, 1, 1, 40).unwrap();
        let theta1 = init_multitask(&nc, 3);
        let theta2 = init_nlu(&nc, 4);
        let a = evaluate(&theta1, &theta2, &nc, &corpus.test);
        let b = evaluate(&theta1, &theta2, &nc, &corpus.test);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }
}
