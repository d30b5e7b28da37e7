//! Command-line experiment driver. See README for the subcommand tour.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use clap::{Args, Parser, Subcommand};

use maxl::checkpoint;
use maxl::evalx::evaluate;
use maxl::harness::{self, PretrainConfig, Regime, RunRecord, RunSpec};
use maxl::interface::InterfaceKind;
use maxl::nets::{init_multitask, init_nlu, NetConfig};
use maxl::synthdata::{
    custom_grammar, default_grammar, generate_corpus_sized, load_corpus, save_corpus,
    split_semi_supervised,
};
use maxl::train::{SecondOrder, TrainConfig};
use maxl::Error;

#[derive(Parser)]
#[command(
    name = "maxl",
    about = "Joint speech-recognition + language-understanding meta-training on synthetic data",
    version
)]
struct Cli {
    /// Corpus and artifact root. Falls back to $MAXL_DATA_DIR, then ./data.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic corpus (train/dev/test splits plus manifest).
    GenData(GenDataArgs),
    /// Pretrain the acoustic network and the label-generation network;
    /// writes asr.ckpt, nlu.ckpt and pretrain.json under the data dir.
    Pretrain(PretrainArgs),
    /// Run one training regime end to end and store its artifacts.
    Train(TrainArgs),
    /// Evaluate stored checkpoints on a corpus split.
    Evaluate(EvaluateArgs),
    /// Assemble a comparison table from stored run directories.
    Table(TableArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Custom grammar size; all three must be given together.
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    intents: Option<usize>,
    #[arg(long)]
    slot_types: Option<usize>,
    #[arg(long, default_value_t = 2000)]
    train_size: usize,
    #[arg(long, default_value_t = 300)]
    dev_size: usize,
    #[arg(long, default_value_t = 500)]
    test_size: usize,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep tags on only this stratified fraction of the training split.
    #[arg(long)]
    semi_fraction: Option<f64>,
    /// Write a random-initialization ASR checkpoint instead of training.
    #[arg(long)]
    skip_asr: bool,
    /// Write a random-initialization NLU checkpoint instead of training.
    #[arg(long)]
    skip_nlu: bool,
    #[arg(long, default_value_t = 1000)]
    pool_size: usize,
    #[arg(long, default_value_t = 8)]
    asr_epochs: usize,
    #[arg(long, default_value_t = 50)]
    nlu_epochs: usize,
    #[arg(long, default_value_t = 3e-3)]
    asr_lr: f64,
    #[arg(long, default_value_t = 5e-3)]
    nlu_lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

#[derive(Args, Clone)]
struct TrainArgs {
    /// baseline | finetune | multitask_gt | maxl_exact | maxl_first_order |
    /// retrain_nlu_on_hyp
    #[arg(long, default_value = "maxl_first_order")]
    regime: String,
    /// sequence | ner | sum | append (list and softmax are variable-length
    /// and rejected)
    #[arg(long, default_value = "sum")]
    interface: String,
    /// exact | first_order
    #[arg(long, default_value = "first_order")]
    second_order: String,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 1e-3)]
    beta: f64,
    #[arg(long, default_value_t = 0.2)]
    entropy_weight: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run one process per seed (overrides --seed).
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Max concurrent child processes when --seeds lists several.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    fd_scale: f64,
    #[arg(long)]
    semi_fraction: Option<f64>,
    /// Ignore any stored ASR checkpoint and skip ASR pretraining.
    #[arg(long)]
    no_pretrain_asr: bool,
    /// Ignore any stored NLU checkpoint and skip NLU pretraining.
    #[arg(long)]
    no_pretrain_nlu: bool,
    /// Run directory; defaults to <data-dir>/runs/<run-id>.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    asr_ckpt: Option<PathBuf>,
    #[arg(long)]
    nlu_ckpt: Option<PathBuf>,
    #[arg(long, default_value = "sum")]
    interface: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// train | dev | test
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct TableArgs {
    /// Run directories (each must contain run.json).
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    csv: bool,
}

fn main() {
    let cli = Cli::parse();
    let data_dir = cli
        .data_dir
        .or_else(|| std::env::var_os("MAXL_DATA_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"));
    if let Err(e) = dispatch(&data_dir, cli.cmd) {
        eprintln!("error: {}", e);
        std::process::exit(e.exit_code());
    }
}

fn dispatch(data_dir: &Path, cmd: Cmd) -> Result<(), Error> {
    match cmd {
        Cmd::GenData(a) => cmd_gen_data(data_dir, a),
        Cmd::Pretrain(a) => cmd_pretrain(data_dir, a),
        Cmd::Train(a) => cmd_train(data_dir, a),
        Cmd::Evaluate(a) => cmd_evaluate(data_dir, a),
        Cmd::Table(a) => cmd_table(a),
    }
}

fn parse_interface(s: &str) -> Result<InterfaceKind, Error> {
    InterfaceKind::from_cli_name(s)
        .ok_or_else(|| Error::Config(format!("unknown interface {:?}", s)))
}

fn parse_second_order(s: &str) -> Result<SecondOrder, Error> {
    match s {
        "exact" => Ok(SecondOrder::Exact),
        "first_order" => Ok(SecondOrder::FirstOrder),
        _ => Err(Error::Config(format!(
            "unknown second-order mode {:?} (want exact or first_order)",
            s
        ))),
    }
}

fn cmd_gen_data(data_dir: &Path, a: GenDataArgs) -> Result<(), Error> {
    let g = match (a.vocab, a.intents, a.slot_types) {
        (None, None, None) => default_grammar(),
        (Some(v), Some(i), Some(s)) => custom_grammar(v, i, s, a.seed)?,
        _ => {
            return Err(Error::Config(
                "--vocab, --intents and --slot-types must be given together".into(),
            ))
        }
    };
    let corpus = generate_corpus_sized(&g, a.seed, a.train_size, a.dev_size, a.test_size)?;
    fs::create_dir_all(data_dir)?;
    save_corpus(data_dir, &g, &corpus)?;
    println!(
        "wrote corpus to {} (train {}, dev {}, test {}, grammar {})",
        data_dir.display(),
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        &corpus.grammar_hash[..12]
    );
    Ok(())
}

fn open_corpus(data_dir: &Path) -> Result<(maxl::synthdata::GrammarSpec, maxl::synthdata::Corpus), Error> {
    load_corpus(data_dir).map_err(|e| {
        Error::Config(format!(
            "no corpus under {} (run gen-data first): {}",
            data_dir.display(),
            e
        ))
    })
}

fn cmd_pretrain(data_dir: &Path, a: PretrainArgs) -> Result<(), Error> {
    let (g, corpus) = open_corpus(data_dir)?;
    // NLU shapes are interface-independent; the multi-task net's SLU head is
    // not, so its checkpoint entries under "slu." are optional on load.
    let nc = NetConfig::from_grammar(&g, InterfaceKind::SumOfSoftmax);
    let pc = PretrainConfig {
        pool_size: a.pool_size,
        asr_epochs: a.asr_epochs,
        nlu_epochs: a.nlu_epochs,
        asr_lr: a.asr_lr,
        nlu_lr: a.nlu_lr,
        batch_size: a.batch_size,
    };

    let (theta1, asr_losses) = if a.skip_asr {
        (init_multitask(&nc, a.seed), Vec::new())
    } else {
        harness::pretrain_asr(&nc, &g, corpus.seed, a.seed, &pc)?
    };
    let dev_cer = harness::dev_cer(&theta1, &nc, &corpus.dev);
    checkpoint::save(&data_dir.join("asr.ckpt"), &theta1)?;

    let tagged = match a.semi_fraction {
        Some(f) => split_semi_supervised(&corpus.train, f)?.0,
        None => corpus.train.clone(),
    };
    let theta2 = if a.skip_nlu {
        init_nlu(&nc, a.seed)
    } else {
        let pairs: Vec<_> = tagged
            .iter()
            .filter_map(|u| u.triples().map(|t| (u.transcript(), t)))
            .collect();
        harness::pretrain_nlu(&nc, &pairs, a.seed, &pc)?
    };
    checkpoint::save(&data_dir.join("nlu.ckpt"), &theta2)?;
    let nlu_f1 = evaluate(&theta1, &theta2, &nc, &corpus.dev).triple_f1_transcript;

    let log = serde_json::json!({
        "seed": a.seed,
        "semi_fraction": a.semi_fraction,
        "skip_asr": a.skip_asr,
        "skip_nlu": a.skip_nlu,
        "asr_epoch_losses": asr_losses,
        "dev_cer": dev_cer,
        "nlu_transcript_f1": nlu_f1,
    });
    fs::write(
        data_dir.join("pretrain.json"),
        serde_json::to_string_pretty(&log)?,
    )?;
    println!("dev CER {:.4}, NLU transcript F1 {:.4}", dev_cer, nlu_f1);
    Ok(())
}

fn cmd_train(data_dir: &Path, a: TrainArgs) -> Result<(), Error> {
    if a.seeds.len() > 1 {
        return spawn_seed_matrix(data_dir, &a);
    }
    let seed = a.seeds.first().copied().unwrap_or(a.seed);
    let (g, corpus) = open_corpus(data_dir)?;
    let regime = Regime::from_cli_name(&a.regime)
        .ok_or_else(|| Error::Config(format!("unknown regime {:?}", a.regime)))?;
    let cfg = TrainConfig {
        alpha: a.alpha,
        beta: a.beta,
        entropy_weight: a.entropy_weight,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed,
        second_order: parse_second_order(&a.second_order)?,
        interface: parse_interface(&a.interface)?,
        fd_scale: a.fd_scale,
        ..TrainConfig::default()
    };
    let mut spec = RunSpec::new(regime, cfg);
    spec.pretrain_asr = !a.no_pretrain_asr;
    spec.pretrain_nlu = !a.no_pretrain_nlu;
    spec.semi_fraction = a.semi_fraction;

    // Stored checkpoints are only reused in the fully-tagged setting; a
    // semi-supervised run must pretrain its NLU on the tagged half inline.
    let nc = NetConfig::from_grammar(&g, spec.train.interface);
    let asr_path = data_dir.join("asr.ckpt");
    let theta1 = if spec.pretrain_asr && asr_path.exists() {
        Some(checkpoint::load_into(&asr_path, &init_multitask(&nc, seed), &["slu."])?)
    } else {
        None
    };
    let nlu_path = data_dir.join("nlu.ckpt");
    let theta2 = if spec.pretrain_nlu && spec.semi_fraction.is_none() && nlu_path.exists() {
        Some(checkpoint::load_into(&nlu_path, &init_nlu(&nc, seed), &[])?)
    } else {
        None
    };

    let out = a
        .out
        .clone()
        .unwrap_or_else(|| data_dir.join("runs").join(&spec.run_id));
    let result = harness::run(&g, &corpus, &spec, (theta1, theta2), Some(&out))?;
    for e in &result.epochs {
        println!("{}", serde_json::to_string(e)?);
    }
    println!("{}", serde_json::to_string_pretty(&result.metrics)?);
    checkpoint::save(&out.join("asr.ckpt"), &result.theta1)?;
    checkpoint::save(&out.join("nlu.ckpt"), &result.theta2)?;
    Ok(())
}

/// One run per process: re-invoke this binary once per seed, at most
/// `--jobs` children at a time.
fn spawn_seed_matrix(data_dir: &Path, a: &TrainArgs) -> Result<(), Error> {
    let exe = std::env::current_exe()?;
    let jobs = a.jobs.max(1);
    let mut pending: Vec<u64> = a.seeds.clone();
    pending.reverse();
    let mut running: Vec<(u64, std::process::Child)> = Vec::new();
    let mut failed = Vec::new();
    loop {
        while running.len() < jobs {
            let Some(seed) = pending.pop() else { break };
            let mut cmd = Command::new(&exe);
            cmd.arg("--data-dir").arg(data_dir).arg("train");
            cmd.args(["--regime", &a.regime, "--interface", &a.interface]);
            cmd.args(["--second-order", &a.second_order]);
            cmd.args(["--alpha", &a.alpha.to_string(), "--beta", &a.beta.to_string()]);
            cmd.args(["--entropy-weight", &a.entropy_weight.to_string()]);
            cmd.args(["--epochs", &a.epochs.to_string()]);
            cmd.args(["--batch-size", &a.batch_size.to_string()]);
            cmd.args(["--fd-scale", &a.fd_scale.to_string()]);
            cmd.args(["--seed", &seed.to_string()]);
            if let Some(f) = a.semi_fraction {
                cmd.args(["--semi-fraction", &f.to_string()]);
            }
            if a.no_pretrain_asr {
                cmd.arg("--no-pretrain-asr");
            }
            if a.no_pretrain_nlu {
                cmd.arg("--no-pretrain-nlu");
            }
            running.push((seed, cmd.spawn()?));
        }
        if running.is_empty() {
            break;
        }
        let (seed, mut child) = running.remove(0);
        if !child.wait()?.success() {
            failed.push(seed);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!("seeds failed: {:?}", failed)))
    }
}

fn cmd_evaluate(data_dir: &Path, a: EvaluateArgs) -> Result<(), Error> {
    let (g, corpus) = open_corpus(data_dir)?;
    let nc = NetConfig::from_grammar(&g, parse_interface(&a.interface)?);
    let asr_path = a.asr_ckpt.unwrap_or_else(|| data_dir.join("asr.ckpt"));
    let nlu_path = a.nlu_ckpt.unwrap_or_else(|| data_dir.join("nlu.ckpt"));
    let theta1 = checkpoint::load_into(&asr_path, &init_multitask(&nc, a.seed), &["slu."])?;
    let theta2 = checkpoint::load_into(&nlu_path, &init_nlu(&nc, a.seed), &[])?;
    let split = match a.split.as_str() {
        "train" => &corpus.train,
        "dev" => &corpus.dev,
        "test" => &corpus.test,
        other => return Err(Error::Config(format!("unknown split {:?}", other))),
    };
    let metrics = evaluate(&theta1, &theta2, &nc, split);
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    Ok(())
}

fn cmd_table(a: TableArgs) -> Result<(), Error> {
    let mut records = Vec::with_capacity(a.runs.len());
    for dir in &a.runs {
        let path = dir.join("run.json");
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Config(format!("missing run {}: {}", path.display(), e)))?;
        let rec: RunRecord = serde_json::from_str(&text)?;
        records.push(rec);
    }
    print!("{}", harness::table(&records, a.csv));
    Ok(())
}
