//! Deterministic synthetic SLU corpus generator: templated utterances with
//! intent/slot/value annotations, rendered to noisy acoustic frames with a
//! known frame-to-token alignment.
//!
//! Homophones (distinct tokens sharing one pronunciation vector) are the
//! controlled ambiguity that only semantic feedback can resolve.

use std::cell::Cell;
use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Error;

pub const PAD: usize = 0;
pub const EOS: usize = 1;

thread_local! {
    static TAG_ACCESSES: Cell<u64> = const { Cell::new(0) };
}

/// Number of times semantic tags have been read on this thread since the
/// last reset. Thread-local because training is confined to one thread.
pub fn tag_access_count() -> u64 {
    TAG_ACCESSES.with(|c| c.get())
}

pub fn reset_tag_access_count() {
    TAG_ACCESSES.with(|c| c.set(0));
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TemplateItem {
    Token(usize),
    Slot(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrammarSpec {
    pub vocab: usize,
    pub intents: usize,
    pub slot_types: usize,
    pub max_len: usize,
    pub max_slots: usize,
    pub acoustic_dim: usize,
    /// Inclusive range of frames emitted per token.
    pub frames_per_token: (usize, usize),
    pub noise_sigma: f64,
    /// Per slot type: value token sequences of length 1-3.
    pub lexicons: Vec<Vec<Vec<usize>>>,
    /// Per intent: templates of filler tokens and slot placeholders.
    pub templates: Vec<Vec<Vec<TemplateItem>>>,
    /// Pairs of distinct tokens that share a pronunciation vector.
    pub homophones: Vec<(usize, usize)>,
}

impl GrammarSpec {
    pub fn validate(&self) -> Result<(), Error> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab < 3 {
            return bad("vocab must include PAD, EOS and at least one token".into());
        }
        if self.lexicons.len() != self.slot_types {
            return bad("lexicon count must equal slot_types".into());
        }
        if self.templates.len() != self.intents {
            return bad("template group count must equal intents".into());
        }
        let mut value_tokens = std::collections::HashSet::new();
        for lex in &self.lexicons {
            if lex.is_empty() {
                return bad("empty slot lexicon".into());
            }
            for entry in lex {
                if entry.is_empty() || entry.len() > 3 {
                    return bad("lexicon entries must have length 1-3".into());
                }
                for &t in entry {
                    if t <= EOS || t >= self.vocab {
                        return bad(format!("lexicon token {} out of range", t));
                    }
                    value_tokens.insert(t);
                }
            }
        }
        for group in &self.templates {
            if group.is_empty() {
                return bad("intent with no templates".into());
            }
            for tmpl in group {
                let mut filled = 1; // EOS
                for item in tmpl {
                    match item {
                        TemplateItem::Token(t) => {
                            if *t <= EOS || *t >= self.vocab {
                                return bad(format!("template token {} out of range", t));
                            }
                            if value_tokens.contains(t) {
                                return bad(format!(
                                    "template filler token {} collides with a slot lexicon",
                                    t
                                ));
                            }
                            filled += 1;
                        }
                        TemplateItem::Slot(s) => {
                            if *s >= self.slot_types {
                                return bad(format!("slot type {} out of range", s));
                            }
                            filled += self.lexicons[*s]
                                .iter()
                                .map(|e| e.len())
                                .max()
                                .unwrap_or(0);
                        }
                    }
                }
                if filled > self.max_len {
                    return bad(format!(
                        "template can fill to {} tokens, exceeding max_len {}",
                        filled, self.max_len
                    ));
                }
                let slots = tmpl
                    .iter()
                    .filter(|i| matches!(i, TemplateItem::Slot(_)))
                    .count();
                if slots == 0 || slots > self.max_slots {
                    return bad("templates must carry 1..=max_slots slots".into());
                }
            }
        }
        for &(a, b) in &self.homophones {
            if a == b || a <= EOS || b <= EOS || a >= self.vocab || b >= self.vocab {
                return bad(format!("invalid homophone pair ({}, {})", a, b));
            }
        }
        if self.frames_per_token.0 < 1 || self.frames_per_token.0 > self.frames_per_token.1 {
            return bad("invalid frames_per_token range".into());
        }
        if self.noise_sigma < 0.0 {
            return bad("noise_sigma must be non-negative".into());
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("grammar serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        hex_string(&h.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{:02x}", b)).collect()
}

/// Default grammar: V=50, I=4, S=6, L=12, with six homophone pairs tying
/// slot-value tokens to fillers or to values of other slot types.
pub fn default_grammar() -> GrammarSpec {
    use TemplateItem::{Slot, Token};
    // Tokens 2..=25 are fillers, 26..=49 are slot values (4 per slot type).
    let lexicons: Vec<Vec<Vec<usize>>> = (0..6)
        .map(|s| {
            let a = 26 + 4 * s;
            vec![vec![a], vec![a + 1], vec![a + 2, a + 3], vec![a + 1, a + 2, a + 3]]
        })
        .collect();
    let templates = vec![
        vec![
            vec![Token(2), Token(3), Slot(0), Token(4), Slot(1)],
            vec![Token(3), Slot(0), Token(5)],
            vec![Token(2), Token(4), Slot(1), Token(5)],
        ],
        vec![
            vec![Token(6), Token(7), Slot(2), Token(8), Slot(3)],
            vec![Token(7), Slot(3), Token(9)],
            vec![Token(6), Token(8), Slot(2)],
        ],
        vec![
            vec![Token(10), Token(11), Slot(4), Token(12), Slot(5)],
            vec![Token(11), Slot(5), Token(13)],
            vec![Token(10), Token(12), Slot(4)],
        ],
        vec![
            vec![Token(14), Token(15), Slot(0), Token(16), Slot(4)],
            vec![Token(15), Slot(4), Token(17)],
            vec![Token(14), Token(16), Slot(0)],
        ],
    ];
    GrammarSpec {
        vocab: 50,
        intents: 4,
        slot_types: 6,
        max_len: 12,
        max_slots: 4,
        acoustic_dim: 16,
        frames_per_token: (2, 3),
        noise_sigma: 0.3,
        lexicons,
        templates,
        homophones: vec![(26, 3), (30, 7), (34, 11), (27, 31), (43, 19), (47, 23)],
    }
}

/// Procedurally built grammar for custom vocabulary / intent / slot-type
/// counts. Token layout mirrors the default grammar: low ids are fillers,
/// high ids are slot values. A handful of value tokens are tied to filler
/// pronunciations as homophones.
pub fn custom_grammar(
    vocab: usize,
    intents: usize,
    slot_types: usize,
    seed: u64,
) -> Result<GrammarSpec, Error> {
    use TemplateItem::{Slot, Token};
    if intents == 0 || slot_types == 0 {
        return Err(Error::Config("need at least one intent and slot type".into()));
    }
    let values_per_slot = 3;
    let min_fillers = 4 * intents;
    let needed = 2 + min_fillers + slot_types * values_per_slot;
    if vocab < needed {
        return Err(Error::Config(format!(
            "vocab {} too small for {} intents and {} slot types (need >= {})",
            vocab, intents, slot_types, needed
        )));
    }
    let value_base = vocab - slot_types * values_per_slot;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772616d);
    let lexicons: Vec<Vec<Vec<usize>>> = (0..slot_types)
        .map(|s| {
            let a = value_base + values_per_slot * s;
            vec![vec![a], vec![a + 1], vec![a + 1, a + 2]]
        })
        .collect();
    let mut templates = Vec::with_capacity(intents);
    for i in 0..intents {
        let f = 2 + 4 * i; // four dedicated filler tokens per intent
        let s0 = rng.gen_range(0..slot_types);
        let s1 = rng.gen_range(0..slot_types);
        templates.push(vec![
            vec![Token(f), Token(f + 1), Slot(s0), Token(f + 2), Slot(s1)],
            vec![Token(f + 1), Slot(s0), Token(f + 3)],
            vec![Token(f), Token(f + 2), Slot(s1), Token(f + 3)],
        ]);
    }
    let mut homophones = Vec::new();
    for s in 0..slot_types.min(6) {
        let value = value_base + values_per_slot * s;
        let filler = 2 + rng.gen_range(0..min_fillers);
        if value != filler && !homophones.contains(&(value, filler)) {
            homophones.push((value, filler));
        }
    }
    let g = GrammarSpec {
        vocab,
        intents,
        slot_types,
        max_len: 12,
        max_slots: 4,
        acoustic_dim: 16,
        frames_per_token: (2, 3),
        noise_sigma: 0.3,
        lexicons,
        templates,
        homophones,
    };
    g.validate()?;
    Ok(g)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub intent: usize,
    pub slot_type: usize,
    pub value: Vec<usize>,
}

/// One utterance: acoustic frames, frame-to-token alignment, transcript and
/// optional semantic triples. Triples are read through [`Utterance::triples`],
/// which counts accesses so training regimes can prove they never looked.
#[derive(Clone, Debug)]
pub struct Utterance {
    frames: Vec<f64>,
    n_frames: usize,
    frame_groups: Vec<(usize, usize)>,
    transcript: Vec<usize>,
    triples: Option<Vec<Triple>>,
}

impl Utterance {
    pub fn new(
        frames: Vec<f64>,
        acoustic_dim: usize,
        frame_groups: Vec<(usize, usize)>,
        transcript: Vec<usize>,
        triples: Option<Vec<Triple>>,
    ) -> Result<Self, Error> {
        if acoustic_dim == 0 || frames.len() % acoustic_dim != 0 {
            return Err(Error::Corpus("frame matrix not a multiple of d_a".into()));
        }
        let n_frames = frames.len() / acoustic_dim;
        if frame_groups.len() != transcript.len() {
            return Err(Error::Corpus(
                "frame/transcript misalignment: group count != transcript length".into(),
            ));
        }
        let mut cursor = 0;
        for &(start, len) in &frame_groups {
            if start != cursor || len == 0 {
                return Err(Error::Corpus(
                    "frame groups must cover [0, T) contiguously without overlap".into(),
                ));
            }
            cursor += len;
        }
        if cursor != n_frames {
            return Err(Error::Corpus("frame groups do not cover all frames".into()));
        }
        if let Some(triples) = &triples {
            for t in triples {
                if !contains_contiguous(&transcript, &t.value) {
                    return Err(Error::Corpus(
                        "triple value tokens must appear contiguously in the transcript".into(),
                    ));
                }
            }
        }
        Ok(Utterance {
            frames,
            n_frames,
            frame_groups,
            transcript,
            triples,
        })
    }

    pub fn frames(&self) -> &[f64] {
        &self.frames
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn frame_groups(&self) -> &[(usize, usize)] {
        &self.frame_groups
    }

    pub fn transcript(&self) -> &[usize] {
        &self.transcript
    }

    pub fn has_tags(&self) -> bool {
        self.triples.is_some()
    }

    /// Semantic tags. Every read is counted; MAXL joint training must leave
    /// the counter untouched.
    pub fn triples(&self) -> Option<&[Triple]> {
        if self.triples.is_some() {
            TAG_ACCESSES.with(|c| c.set(c.get() + 1));
        }
        self.triples.as_deref()
    }

    pub fn strip_tags(&self) -> Utterance {
        let mut u = self.clone();
        u.triples = None;
        u
    }

    /// Text-only replacement used when retraining NLU on ASR hypotheses.
    /// If the length changed, the alignment collapses to one zero frame per
    /// token; text-only consumers never read the frames.
    pub fn with_transcript_and_tags(
        &self,
        transcript: Vec<usize>,
        triples: Option<Vec<Triple>>,
    ) -> Utterance {
        let mut u = self.clone();
        if transcript.len() != u.frame_groups.len() {
            let d_a = if u.n_frames > 0 { u.frames.len() / u.n_frames } else { 1 };
            u.frames = vec![0.0; transcript.len() * d_a];
            u.n_frames = transcript.len();
            u.frame_groups = (0..transcript.len()).map(|i| (i, 1)).collect();
        }
        u.transcript = transcript;
        u.triples = triples;
        u
    }
}

fn contains_contiguous(haystack: &[usize], needle: &[usize]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
    pub seed: u64,
    pub grammar_hash: String,
}

/// Pronunciation vectors, one per token, with homophone pairs tied. A pure
/// function of (grammar, seed).
pub fn pronunciations(g: &GrammarSpec, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x70726f6e);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut pron: Vec<Vec<f64>> = (0..g.vocab)
        .map(|_| (0..g.acoustic_dim).map(|_| normal.sample(&mut rng)).collect())
        .collect();
    pron[PAD] = vec![0.0; g.acoustic_dim];
    for &(a, b) in &g.homophones {
        pron[b] = pron[a].clone();
    }
    pron
}

fn render_frames(
    g: &GrammarSpec,
    pron: &[Vec<f64>],
    transcript: &[usize],
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, Vec<(usize, usize)>) {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut frames = Vec::new();
    let mut groups = Vec::with_capacity(transcript.len());
    let mut cursor = 0;
    for &tok in transcript {
        let k = rng.gen_range(g.frames_per_token.0..=g.frames_per_token.1);
        for _ in 0..k {
            for d in 0..g.acoustic_dim {
                frames.push(pron[tok][d] + g.noise_sigma * normal.sample(rng));
            }
        }
        groups.push((cursor, k));
        cursor += k;
    }
    (frames, groups)
}

fn sample_utterance(g: &GrammarSpec, pron: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Utterance {
    let intent = rng.gen_range(0..g.intents);
    let tmpl = &g.templates[intent][rng.gen_range(0..g.templates[intent].len())];
    let mut transcript = Vec::new();
    let mut triples = Vec::new();
    for item in tmpl {
        match item {
            TemplateItem::Token(t) => transcript.push(*t),
            TemplateItem::Slot(s) => {
                let entry = &g.lexicons[*s][rng.gen_range(0..g.lexicons[*s].len())];
                triples.push(Triple {
                    intent,
                    slot_type: *s,
                    value: entry.clone(),
                });
                transcript.extend_from_slice(entry);
            }
        }
    }
    transcript.push(EOS);
    let (frames, groups) = render_frames(g, pron, &transcript, rng);
    Utterance::new(frames, g.acoustic_dim, groups, transcript, Some(triples))
        .expect("generated utterance satisfies invariants")
}

/// Generate disjoint train/dev/test splits. Pure function of (grammar, seed).
pub fn generate_corpus(g: &GrammarSpec, seed: u64) -> Result<Corpus, Error> {
    generate_corpus_sized(g, seed, 2000, 300, 500)
}

pub fn generate_corpus_sized(
    g: &GrammarSpec,
    seed: u64,
    n_train: usize,
    n_dev: usize,
    n_test: usize,
) -> Result<Corpus, Error> {
    g.validate()?;
    let pron = pronunciations(g, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut take = |n: usize| -> Vec<Utterance> {
        (0..n).map(|_| sample_utterance(g, &pron, &mut rng)).collect()
    };
    let train = take(n_train);
    let dev = take(n_dev);
    let test = take(n_test);
    Ok(Corpus {
        train,
        dev,
        test,
        seed,
        grammar_hash: g.hash(),
    })
}

/// Transcript-only pool for ASR pretraining: uniform random token sequences
/// from the same pronunciation space, with no semantic structure. Keeping the
/// pool context-free means pretraining cannot resolve homophones.
pub fn generate_transcript_pool(g: &GrammarSpec, seed: u64, n: usize) -> Vec<Utterance> {
    let pron = pronunciations(g, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x706f6f6c);
    (0..n)
        .map(|_| {
            let len = rng.gen_range(4..=(g.max_len - 2));
            let mut transcript: Vec<usize> =
                (0..len).map(|_| rng.gen_range(2..g.vocab)).collect();
            transcript.push(EOS);
            let (frames, groups) = render_frames(g, &pron, &transcript, &mut rng);
            Utterance::new(frames, g.acoustic_dim, groups, transcript, None)
                .expect("pool utterance satisfies invariants")
        })
        .collect()
}

/// Split utterances into a tagged half and an untagged half, stratified by
/// intent so the tagged half mirrors the full intent histogram.
pub fn split_semi_supervised(
    utts: &[Utterance],
    fraction: f64,
) -> Result<(Vec<Utterance>, Vec<Utterance>), Error> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "semi-supervised fraction must be in (0, 1), got {}",
            fraction
        )));
    }
    // Count per intent, then tag the first ceil(fraction * count) of each.
    let mut totals: std::collections::HashMap<usize, usize> = std::collections::HashMap::new();
    let intents: Vec<Option<usize>> = utts
        .iter()
        .map(|u| u.triples.as_ref().and_then(|t| t.first()).map(|t| t.intent))
        .collect();
    for intent in intents.iter().flatten() {
        *totals.entry(*intent).or_insert(0) += 1;
    }
    let mut budgets: std::collections::HashMap<usize, usize> = totals
        .iter()
        .map(|(&i, &n)| (i, (fraction * n as f64).round() as usize))
        .collect();
    let mut tagged = Vec::new();
    let mut untagged = Vec::new();
    for (u, intent) in utts.iter().zip(&intents) {
        let keep = match intent {
            Some(i) => {
                let b = budgets.get_mut(i).unwrap();
                if *b > 0 {
                    *b -= 1;
                    true
                } else {
                    false
                }
            }
            None => false,
        };
        if keep {
            tagged.push(u.clone());
        } else {
            untagged.push(u.strip_tags());
        }
    }
    Ok((tagged, untagged))
}

// ── Serialization ────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct UttRecord {
    transcript: Vec<usize>,
    triples: Option<Vec<(usize, usize, Vec<usize>)>>,
    frames_b64: String,
    groups: Vec<(usize, usize)>,
}

#[derive(Serialize, Deserialize)]
pub struct Manifest {
    pub grammar: GrammarSpec,
    pub seed: u64,
    pub grammar_hash: String,
    pub sizes: (usize, usize, usize),
}

fn utt_to_record(u: &Utterance) -> UttRecord {
    let mut bytes = Vec::with_capacity(u.frames.len() * 8);
    for v in &u.frames {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    UttRecord {
        transcript: u.transcript.clone(),
        triples: u
            .triples
            .as_ref()
            .map(|ts| ts.iter().map(|t| (t.intent, t.slot_type, t.value.clone())).collect()),
        frames_b64: B64.encode(&bytes),
        groups: u.frame_groups.clone(),
    }
}

fn record_to_utt(r: UttRecord, acoustic_dim: usize) -> Result<Utterance, Error> {
    let bytes = B64
        .decode(r.frames_b64.as_bytes())
        .map_err(|e| Error::Corpus(format!("bad frame encoding: {}", e)))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Corpus("frame byte length not a multiple of 8".into()));
    }
    let frames: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let triples = r.triples.map(|ts| {
        ts.into_iter()
            .map(|(intent, slot_type, value)| Triple {
                intent,
                slot_type,
                value,
            })
            .collect()
    });
    Utterance::new(frames, acoustic_dim, r.groups, r.transcript, triples)
}

fn write_split(path: &Path, utts: &[Utterance]) -> Result<(), Error> {
    let mut out = String::new();
    for u in utts {
        out.push_str(&serde_json::to_string(&utt_to_record(u))?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn read_split(path: &Path, acoustic_dim: usize) -> Result<Vec<Utterance>, Error> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| record_to_utt(serde_json::from_str(l)?, acoustic_dim))
        .collect()
}

pub fn save_corpus(dir: &Path, g: &GrammarSpec, c: &Corpus) -> Result<(), Error> {
    fs::create_dir_all(dir)?;
    write_split(&dir.join("train.jsonl"), &c.train)?;
    write_split(&dir.join("dev.jsonl"), &c.dev)?;
    write_split(&dir.join("test.jsonl"), &c.test)?;
    let manifest = Manifest {
        grammar: g.clone(),
        seed: c.seed,
        grammar_hash: c.grammar_hash.clone(),
        sizes: (c.train.len(), c.dev.len(), c.test.len()),
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<(GrammarSpec, Corpus), Error> {
    let manifest: Manifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    manifest.grammar.validate()?;
    let d = manifest.grammar.acoustic_dim;
    let corpus = Corpus {
        train: read_split(&dir.join("train.jsonl"), d)?,
        dev: read_split(&dir.join("dev.jsonl"), d)?,
        test: read_split(&dir.join("test.jsonl"), d)?,
        seed: manifest.seed,
        grammar_hash: manifest.grammar_hash.clone(),
    };
    Ok((manifest.grammar, corpus))
}

/// Frame-group nearest-pronunciation decoder; the acoustics-only oracle.
pub fn nearest_pronunciation_decode(u: &Utterance, pron: &[Vec<f64>], d_a: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(u.frame_groups.len());
    for &(start, len) in &u.frame_groups {
        let mut mean = vec![0.0; d_a];
        for f in start..start + len {
            for d in 0..d_a {
                mean[d] += u.frames[f * d_a + d];
            }
        }
        for m in mean.iter_mut() {
            *m /= len as f64;
        }
        let mut best = EOS;
        let mut best_dist = f64::INFINITY;
        for (tok, p) in pron.iter().enumerate().skip(1) {
            let dist: f64 = mean.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist < best_dist {
                best_dist = dist;
                best = tok;
            }
        }
        out.push(best);
    }
    out
}
