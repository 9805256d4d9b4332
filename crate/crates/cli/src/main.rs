#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use refgame::pipeline::{
    condition_name, parse_vocab, vocab_name, ExperimentConfig, Pipeline, Reports, SPEAKER_SPLIT,
};
use refgame::populations::PopulationKind;
use refgame::vocab::{VocabKind, SMALL_VOCAB_SIZE};

#[derive(Parser)]
#[command(name = "refgame", version, about = "Speakers, listener populations and semantic drift in reference games")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Global {
    /// Output root; every stage reads and writes below it.
    #[arg(long, global = true, env = "REFGAME_OUTPUT", default_value = "refgame-out")]
    out: PathBuf,
    /// TOML experiment config. Without it the root's stored config is used,
    /// or the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in config: desk or tiny.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Worker threads for independent jobs.
    #[arg(long, global = true, default_value_t = default_jobs())]
    jobs: usize,
    #[command(flatten)]
    overrides: Overrides,
}

/// Flags that override config values.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Games per split.
    #[arg(long, global = true)]
    games: Option<usize>,
    #[arg(long, global = true)]
    listener_epochs: Option<usize>,
    #[arg(long, global = true)]
    speaker_epochs: Option<usize>,
    /// Speaker replicates per condition.
    #[arg(long, global = true)]
    n_seeds: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate every dataset split and the data manifest.
    GenData {
        /// Split counts, e.g. `listener:10,val-listener:3,speaker:1`.
        #[arg(long)]
        splits: Option<String>,
    },
    /// Train (or reuse) the gated listener for one split.
    TrainListener {
        #[arg(long)]
        split: String,
        /// `small` also writes the small-vocabulary view of the checkpoint.
        #[arg(long, default_value = "large")]
        vocab: String,
    },
    /// Train speakers against one population, e.g. `ensemble:10`.
    TrainSpeaker {
        #[arg(long)]
        population: String,
        #[arg(long, default_value = "large")]
        vocab: String,
        #[arg(long, default_value_t = 1)]
        replicates: usize,
    },
    /// Accuracy grids for the headline conditions and topicality.
    Eval,
    /// Population entropy at each overlap level.
    Calibrate,
    /// Population-size sweeps for ensembles and dropout.
    Sweep,
    /// Write report files from the evaluation artifacts.
    Report,
    /// Run every stage.
    Reproduce,
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

enum Failure {
    Usage(String),
    Run(refgame::Error),
}

impl From<refgame::Error> for Failure {
    fn from(e: refgame::Error) -> Self {
        match e {
            refgame::Error::Config(msg) => Failure::Usage(msg),
            other => Failure::Run(other),
        }
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn parse_splits(spec: &str, cfg: &mut ExperimentConfig) -> Outcome<()> {
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, count) = part
            .split_once(':')
            .ok_or_else(|| Failure::Usage(format!("split `{part}` is not name:count")))?;
        let count: usize = count
            .parse()
            .map_err(|_| Failure::Usage(format!("split count `{count}` is not a number")))?;
        match name {
            "listener" => cfg.data.pool_listeners = count,
            "val-listener" => cfg.data.val_listeners = count,
            "speaker" if count == 1 => {}
            "speaker" => return Err(Failure::Usage("exactly one speaker split is supported".into())),
            _ => return Err(Failure::Usage(format!("unknown split `{name}` (listener, val-listener, speaker)"))),
        }
    }
    Ok(())
}

fn parse_population(spec: &str) -> Outcome<(PopulationKind, usize)> {
    let (kind, n) = match spec.split_once(':') {
        Some((k, n)) => (
            k,
            n.parse::<usize>()
                .map_err(|_| Failure::Usage(format!("population size `{n}` is not a number")))?,
        ),
        None => (spec, 1),
    };
    let kind = PopulationKind::parse(kind)?;
    if n == 0 {
        return Err(Failure::Usage("population size must be positive".into()));
    }
    Ok((kind, n))
}

fn base_config(g: &Global) -> Outcome<ExperimentConfig> {
    if let Some(path) = &g.config {
        return Ok(ExperimentConfig::load(path)?);
    }
    if let Some(name) = &g.preset {
        return Ok(ExperimentConfig::preset(name)?);
    }
    let stored = g.out.join("config.toml");
    if stored.exists() {
        return Ok(ExperimentConfig::load(&stored)?);
    }
    Ok(ExperimentConfig::desk())
}

fn apply(o: &Overrides, cfg: &mut ExperimentConfig) {
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(n) = o.games {
        cfg.data.games = n;
    }
    if let Some(n) = o.listener_epochs {
        cfg.listener.epochs = n;
    }
    if let Some(n) = o.speaker_epochs {
        cfg.speaker.epochs = n;
    }
    if let Some(n) = o.n_seeds {
        cfg.sweep.n_seeds = n;
    }
}

fn print_reports(r: &Reports) {
    for p in r.all() {
        println!("{}", p.display());
    }
}

fn rel(root: &Path, p: &Path) -> String {
    p.strip_prefix(root).unwrap_or(p).display().to_string()
}

fn run(cli: Cli) -> Outcome<()> {
    let g = &cli.global;
    if g.jobs == 0 {
        return Err(Failure::Usage("--jobs must be at least 1".into()));
    }
    let mut cfg = base_config(g)?;
    apply(&g.overrides, &mut cfg);
    if let Cmd::GenData { splits: Some(spec) } = &cli.cmd {
        parse_splits(spec, &mut cfg)?;
    }
    let p = Pipeline::open(cfg, &g.out, g.jobs)?;
    log::info!("config {} in {}", p.cfg.short_hash(), p.root.display());
    match &cli.cmd {
        Cmd::GenData { .. } => {
            let m = p.gen_data()?;
            for s in &m.splits {
                println!("{}\t{}\t{}", s.split_id, s.games, s.content_hash);
            }
            println!("{}", p.dir("data").join("manifest.json").display());
        }
        Cmd::TrainListener { split, vocab } => {
            let vocab = parse_vocab(vocab)?;
            if split == SPEAKER_SPLIT || !p.split_ids().contains(split) {
                return Err(Failure::Usage(format!("`{split}` is not a listener split of this config")));
            }
            let (l, r) = p.listener(split)?;
            println!("{}", serde_json::to_string(&r).expect("record serialises"));
            if vocab == VocabKind::Small {
                let path = p.dir("listeners").join(format!("{split}.small.ckpt"));
                l.with_vocab_prefix(SMALL_VOCAB_SIZE)?.save(&path)?;
                println!("{}", path.display());
            }
        }
        Cmd::TrainSpeaker {
            population,
            vocab,
            replicates,
        } => {
            let (kind, n) = parse_population(population)?;
            let vocab = parse_vocab(vocab)?;
            if *replicates == 0 {
                return Err(Failure::Usage("--replicates must be at least 1".into()));
            }
            let (points, runs) = p.sweep(vocab, kind, &[n], *replicates)?;
            let name = condition_name(kind, n);
            let (ck, ck_n) = refgame::evaluation::canonical(kind, n);
            let manifest = p
                .dir("populations")
                .join(format!("{}-{}-{ck_n}.json", vocab_name(vocab), ck.name()));
            for r in &runs {
                let ckpt = p.speaker_dir(vocab).join(format!("{}.ckpt", refgame::evaluation::run_name(kind, n, r.replicate)));
                println!("{}\tpopulation {}", rel(&p.root, &ckpt), rel(&p.root, &manifest));
            }
            let grid = &points[0].grid;
            println!(
                "{}/{name}: train_L/val_D {:.3} val_L/val_D {:.3} overlap {:.1}%",
                vocab_name(vocab),
                grid.train_l_val_d.mean,
                grid.val_l_val_d.mean,
                grid.overlap.mean
            );
        }
        Cmd::Eval => {
            for r in p.table1()? {
                let gr = &r.grid;
                println!(
                    "{}\ttrain_L/train_D {:.3}\ttrain_L/val_D {:.3}\tval_L/train_D {:.3}\tval_L/val_D {:.3}\toverlap {:.1}%",
                    r.condition,
                    gr.train_l_train_d.mean,
                    gr.train_l_val_d.mean,
                    gr.val_l_train_d.mean,
                    gr.val_l_val_d.mean,
                    gr.overlap.mean
                );
            }
            for r in p.topicality()? {
                println!("{}\tsum {:.4}\tfirst {:.4}", r.kind, r.sum.mean, r.first.mean);
            }
        }
        Cmd::Calibrate => {
            let c = p.calibrate()?;
            for s in &c.sets {
                println!("{:?}\t{} utterances\tmean overlap {:.1}%", s.level, s.utterances, s.mean_overlap);
            }
            for pt in &c.curve.points {
                println!("{}\t{:?}\tentropy {:.4} ± {:.4}", pt.kind, pt.level, pt.entropy.mean, pt.entropy.stderr);
            }
        }
        Cmd::Sweep => {
            for pt in p.sweeps()? {
                println!(
                    "{}\t{}\tval_L/val_D {:.3} ± {:.3}\toverlap {:.1}%",
                    pt.kind.name(),
                    pt.n,
                    pt.grid.val_l_val_d.mean,
                    pt.grid.val_l_val_d.stderr,
                    pt.grid.overlap.mean
                );
            }
        }
        Cmd::Report => print_reports(&p.report()?),
        Cmd::Reproduce => print_reports(&p.reproduce()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
