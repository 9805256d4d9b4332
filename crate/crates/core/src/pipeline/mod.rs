//! The full experiment as cached stages over one output directory:
//! datasets, listener pool, speaker sweeps, evaluation and reports.
//!
//! Every stage writes its artifacts atomically and reuses them on the next
//! call, so an interrupted run picks up where it stopped.

mod config;

pub use config::{
    DataConfig, DecodeChoice, EvalConfig, ExperimentConfig, ModelPreset, ModelSection, SweepConfig, VocabConfig,
};

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::agents::{write_atomic, Listener, Speaker};
use crate::error::{Error, Result};
use crate::evaluation::{
    self, calibration_curve, canonical, population_sweep, report, sample_overlap_utterances,
    AccuracyGrid, CalibrationCurve, EmbeddingTable, OverlapLevel, OverlapSources, SpeakerRun, SweepPoint,
    SweepSetup, TopicalityRow,
};
use crate::populations::{ManifestMember, PopulationKind, PopulationManifest};
use crate::rng::RngStream;
use crate::training::train_listener_gated;
use crate::vocab::{Vocab, VocabKind, SMALL_VOCAB_SIZE};
use crate::worldgen::{generate_games, load_split, save_split, DatasetSplit, ReferenceGame};

pub const SPEAKER_SPLIT: &str = "speaker-0";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub split_id: String,
    pub file: String,
    pub games: usize,
    pub content_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub config_hash: String,
    pub seed: u64,
    pub splits: Vec<SplitEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ListenerRecord {
    pub split_id: String,
    pub seed: u64,
    pub attempts: usize,
    pub train_acc: f64,
    pub val_acc: f64,
    pub content_hash: String,
}

/// Per-level statistics of the utterance sets behind the calibration curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapSummary {
    pub level: OverlapLevel,
    pub utterances: usize,
    pub drawn: usize,
    pub mean_overlap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub curve: CalibrationCurve,
    pub sets: Vec<OverlapSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub condition: String,
    pub grid: AccuracyGrid,
}

/// Written report files.
#[derive(Debug, Clone)]
pub struct Reports {
    pub table1: PathBuf,
    pub fig2: PathBuf,
    pub fig3: PathBuf,
    pub table3: PathBuf,
}

impl Reports {
    pub fn all(&self) -> [&Path; 4] {
        [&self.table1, &self.fig2, &self.fig3, &self.table3]
    }
}

pub fn listener_split_id(i: usize) -> String {
    format!("listener-{i}")
}

pub fn val_listener_split_id(i: usize) -> String {
    format!("val-listener-{i}")
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// One experiment bound to an output directory.
pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub root: PathBuf,
    pub jobs: usize,
}

impl Pipeline {
    /// Binds `cfg` to `root`, dumping the effective config there. A root
    /// already holding a different config is refused.
    pub fn open(cfg: ExperimentConfig, root: &Path, jobs: usize) -> Result<Self> {
        cfg.validate()?;
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let path = root.join("config.toml");
        if path.exists() {
            let old = ExperimentConfig::load(&path)?;
            if old.hash() != cfg.hash() {
                return Err(Error::Config(format!(
                    "{} holds a different experiment (config {}, requested {}); use another output directory",
                    root.display(),
                    old.short_hash(),
                    cfg.short_hash()
                )));
            }
        } else {
            let text = format!(
                "# config_hash = {}\n# {}\n{}",
                cfg.hash(),
                report::TOOL_VERSION,
                cfg.to_toml()
            );
            write_atomic(&path, text.as_bytes())?;
        }
        Ok(Self {
            cfg,
            root: root.to_path_buf(),
            jobs,
        })
    }

    /// Reopens a root using the config stored in it.
    pub fn resume(root: &Path, jobs: usize) -> Result<Self> {
        let cfg = ExperimentConfig::load(&root.join("config.toml"))?;
        Self::open(cfg, root, jobs)
    }

    pub fn dir(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn provenance(&self) -> report::Provenance {
        report::Provenance::new(self.cfg.hash(), self.cfg.seed)
    }

    pub fn vocab(&self, kind: VocabKind) -> Result<Vocab> {
        Vocab::build(kind, self.cfg.vocab.large_size, self.cfg.seed)
    }

    pub fn split_ids(&self) -> Vec<String> {
        let d = &self.cfg.data;
        (0..d.pool_listeners)
            .map(listener_split_id)
            .chain((0..d.val_listeners).map(val_listener_split_id))
            .chain(std::iter::once(SPEAKER_SPLIT.to_string()))
            .collect()
    }

    fn split_path(&self, id: &str) -> PathBuf {
        self.dir("data").join(format!("{id}.split"))
    }

    /// Generates (or reloads) every split and writes the data manifest.
    pub fn gen_data(&self) -> Result<DataManifest> {
        let ids = self.split_ids();
        let pool = thread_pool(self.jobs)?;
        let splits = pool.install(|| ids.par_iter().map(|id| self.split(id)).collect::<Result<Vec<_>>>())?;
        let manifest = DataManifest {
            config_hash: self.cfg.hash(),
            seed: self.cfg.seed,
            splits: ids
                .iter()
                .zip(&splits)
                .map(|(id, s)| SplitEntry {
                    split_id: id.clone(),
                    file: format!("{id}.split"),
                    games: s.len(),
                    content_hash: s.content_hash(),
                })
                .collect(),
        };
        write_json(&self.dir("data").join("manifest.json"), &manifest)?;
        self.vocab(VocabKind::Large)?.save(&self.dir("data").join("vocab.txt"))?;
        Ok(manifest)
    }

    pub fn split(&self, id: &str) -> Result<DatasetSplit> {
        let path = self.split_path(id);
        if path.exists() {
            let s = load_split(&path)?;
            if s.split_id != id || s.seed != self.cfg.seed || s.len() != self.cfg.data.games {
                return Err(Error::Invalid(format!("{}: split does not match the config", path.display())));
            }
            return Ok(s);
        }
        let d = &self.cfg.data;
        let s = generate_games(d.games, d.n_images, id, self.cfg.seed, d.resolution)?;
        std::fs::create_dir_all(self.dir("data")).map_err(|e| Error::io(self.dir("data"), e))?;
        save_split(&s, &path)?;
        Ok(s)
    }

    fn listener_paths(&self, id: &str) -> (PathBuf, PathBuf, PathBuf) {
        let dir = self.dir("listeners");
        (
            dir.join(format!("{id}.ckpt")),
            dir.join(format!("{id}.json")),
            dir.join(format!("{id}.log.jsonl")),
        )
    }

    /// Trains (or reloads) the gated listener for one split. Listeners
    /// always use the large vocabulary; captions only touch its first rows.
    pub fn listener(&self, id: &str) -> Result<(Listener, ListenerRecord)> {
        let (ckpt, record, log_path) = self.listener_paths(id);
        if ckpt.exists() && record.exists() {
            let l = Listener::load(&ckpt)?;
            let r: ListenerRecord = read_json(&record)?;
            if l.params.content_hash() != r.content_hash {
                return Err(Error::Invalid(format!("{}: checkpoint does not match its record", ckpt.display())));
            }
            return Ok((l, r));
        }
        let vocab = self.vocab(VocabKind::Large)?;
        let split = self.split(id)?;
        let model = self.cfg.model_config(vocab.size());
        let seed = RngStream::new(self.cfg.seed).derive(&format!("listener/{id}")).next_u64();
        let state = self.dir("listeners").join("state").join(id);
        log::info!("training listener {id}");
        let out = train_listener_gated(&model, &self.cfg.listener, &split, &vocab, seed, Some(&state))?;
        let r = ListenerRecord {
            split_id: id.to_string(),
            seed: out.seed,
            attempts: out.attempts,
            train_acc: out.train_acc,
            val_acc: out.val_acc,
            content_hash: out.listener.params.content_hash(),
        };
        out.listener.save(&ckpt)?;
        out.log.save(&log_path)?;
        write_json(&record, &r)?;
        std::fs::remove_dir_all(&state).map_err(|e| Error::io(&state, e))?;
        Ok((out.listener, r))
    }

    /// Pool and validation listeners, trained on up to `jobs` threads.
    pub fn listeners(&self) -> Result<(Vec<(Listener, ListenerRecord)>, Vec<(Listener, ListenerRecord)>)> {
        let d = &self.cfg.data;
        let ids: Vec<String> = (0..d.pool_listeners)
            .map(listener_split_id)
            .chain((0..d.val_listeners).map(val_listener_split_id))
            .collect();
        let pool = thread_pool(self.jobs)?;
        let mut all = pool.install(|| ids.par_iter().map(|id| self.listener(id)).collect::<Result<Vec<_>>>())?;
        let vals = all.split_off(d.pool_listeners);
        Ok((all, vals))
    }

    fn listener_sets(&self, vocab: VocabKind) -> Result<(Vec<Listener>, Vec<Listener>)> {
        let (pool, vals) = self.listeners()?;
        let cut = |set: Vec<(Listener, ListenerRecord)>| -> Result<Vec<Listener>> {
            set.into_iter()
                .map(|(l, _)| match vocab {
                    VocabKind::Small => l.with_vocab_prefix(SMALL_VOCAB_SIZE),
                    VocabKind::Large => Ok(l),
                })
                .collect()
        };
        Ok((cut(pool)?, cut(vals)?))
    }

    fn write_population_manifest(&self, vocab: VocabKind, kind: PopulationKind, n: usize) -> Result<()> {
        let (kind, n) = canonical(kind, n);
        let members = match kind {
            PopulationKind::Ensemble => n,
            _ => 1,
        };
        let members = (0..members)
            .map(|i| {
                let id = listener_split_id(i);
                let r: ListenerRecord = read_json(&self.listener_paths(&id).1)?;
                Ok(ManifestMember {
                    checkpoint: PathBuf::from("../listeners").join(format!("{id}.ckpt")),
                    val_accuracy: r.val_acc,
                    content_hash: r.content_hash,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = PopulationManifest {
            kind,
            n,
            members,
            vocab_prefix: (vocab == VocabKind::Small).then_some(SMALL_VOCAB_SIZE),
        };
        let name = format!("{}-{}-{n}.json", vocab_name(vocab), kind.name());
        let dir = self.dir("populations");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        manifest.save(&dir.join(name))
    }

    pub fn speaker_dir(&self, vocab: VocabKind) -> PathBuf {
        self.dir("speakers").join(vocab_name(vocab))
    }

    /// Trains and scores speakers against `kind` populations of each size,
    /// `n_seeds` replicates each.
    pub fn sweep(
        &self,
        vocab: VocabKind,
        kind: PopulationKind,
        sizes: &[usize],
        n_seeds: usize,
    ) -> Result<(Vec<SweepPoint>, Vec<SpeakerRun>)> {
        let (pool, vals) = self.listener_sets(vocab)?;
        for &n in sizes {
            self.write_population_manifest(vocab, kind, n)?;
        }
        let v = self.vocab(vocab)?;
        let split = self.split(SPEAKER_SPLIT)?;
        let model = self.cfg.speaker_model(v.size());
        let dir = self.speaker_dir(vocab);
        let setup = SweepSetup {
            model: &model,
            train: &self.cfg.speaker,
            split: &split,
            pool: &pool,
            val_listeners: &vals,
            vocab: &v,
            decode: self.cfg.eval.decode.decode(),
            seed: self.cfg.seed,
            n_seeds,
            dir: Some(&dir),
            jobs: self.jobs,
        };
        population_sweep(&setup, kind, sizes)
    }

    /// Replicate-0 speaker for one condition, trained if needed.
    pub fn speaker(&self, vocab: VocabKind, kind: PopulationKind, n: usize) -> Result<Speaker> {
        let (_, mut runs) = self.sweep(vocab, kind, &[n], 1)?;
        Ok(runs.remove(0).speaker)
    }

    /// The four headline conditions: small and large vocabulary against a
    /// single listener, and large vocabulary against the largest ensemble
    /// and dropout populations.
    pub fn table1(&self) -> Result<Vec<Table1Row>> {
        let seeds = self.cfg.sweep.n_seeds;
        let mut conditions = vec![
            (VocabKind::Small, PopulationKind::SingleL0, 1),
            (VocabKind::Large, PopulationKind::SingleL0, 1),
            (VocabKind::Large, PopulationKind::Ensemble, self.cfg.max_ensemble()),
        ];
        if !self.cfg.sweep.dropout_sizes.is_empty() {
            conditions.push((VocabKind::Large, PopulationKind::Dropout, self.cfg.max_dropout()));
        }
        let mut rows = Vec::with_capacity(conditions.len());
        for (vocab, kind, n) in conditions {
            let (points, _) = self.sweep(vocab, kind, &[n], seeds)?;
            rows.push(Table1Row {
                condition: format!("{}/{}", vocab_name(vocab), condition_name(kind, n)),
                grid: points[0].grid.clone(),
            });
        }
        write_json(&self.dir("eval").join("table1.json"), &rows)?;
        Ok(rows)
    }

    /// Large-vocabulary sweeps over every configured ensemble and dropout size.
    pub fn sweeps(&self) -> Result<Vec<SweepPoint>> {
        let s = &self.cfg.sweep;
        let (mut points, _) = self.sweep(VocabKind::Large, PopulationKind::Ensemble, &s.ensemble_sizes, s.n_seeds)?;
        if !s.dropout_sizes.is_empty() {
            let (d, _) = self.sweep(VocabKind::Large, PopulationKind::Dropout, &s.dropout_sizes, s.n_seeds)?;
            points.extend(d);
        }
        write_json(&self.dir("eval").join("sweep.json"), &points)?;
        Ok(points)
    }

    fn val_games<'a>(&self, split: &'a DatasetSplit) -> Vec<&'a ReferenceGame> {
        split.split_tail(self.cfg.speaker.val_fraction).1
    }

    /// Population entropy on captions (high overlap), ensemble-trained
    /// speaker samples (medium) and zero-overlap samples from the
    /// single-listener speaker (low), over the speaker split's val-D games.
    pub fn calibrate(&self) -> Result<Calibration> {
        let vocab = self.vocab(VocabKind::Large)?;
        let split = self.split(SPEAKER_SPLIT)?;
        let games = self.val_games(&split);
        let n_ens = self.cfg.max_ensemble();
        let ensemble_speaker = self.speaker(VocabKind::Large, PopulationKind::Ensemble, n_ens)?;
        let single_speaker = self.speaker(VocabKind::Large, PopulationKind::SingleL0, 1)?;
        let src = OverlapSources {
            games: &games,
            vocab: &vocab,
            ensemble_speaker: Some(&ensemble_speaker),
            single_speaker: Some(&single_speaker),
            max_len: ensemble_speaker.config.max_len,
            seed: self.cfg.seed,
            min_low: self.cfg.eval.min_low,
            max_rounds: self.cfg.eval.max_rounds,
        };
        let sets = OverlapLevel::ALL
            .iter()
            .map(|&l| sample_overlap_utterances(l, &src))
            .collect::<Result<Vec<_>>>()?;
        let (pool, _) = self.listener_sets(VocabKind::Large)?;
        let mut pops = vec![
            ("single_l0".to_string(), evaluation::build_population(PopulationKind::SingleL0, 1, &pool)?),
            (
                condition_name(PopulationKind::Ensemble, n_ens),
                evaluation::build_population(PopulationKind::Ensemble, n_ens, &pool)?,
            ),
        ];
        if !self.cfg.sweep.dropout_sizes.is_empty() {
            let n = self.cfg.max_dropout();
            pops.push((
                condition_name(PopulationKind::Dropout, n),
                evaluation::build_population(PopulationKind::Dropout, n, &pool)?,
            ));
        }
        let named: Vec<(&str, &crate::populations::Population)> = pops.iter().map(|(k, p)| (k.as_str(), p)).collect();
        let curve = calibration_curve(&named, &sets, &games, self.cfg.seed)?;
        let out = Calibration {
            curve,
            sets: sets
                .iter()
                .map(|s| OverlapSummary {
                    level: s.level,
                    utterances: s.len(),
                    drawn: s.drawn,
                    mean_overlap: s.mean_overlap,
                })
                .collect(),
        };
        write_json(&self.dir("eval").join("calibration.json"), &out)?;
        Ok(out)
    }

    pub fn embedding_table(&self) -> Result<EmbeddingTable> {
        let path = self.dir("eval").join("embeddings.txt");
        if path.exists() {
            return EmbeddingTable::load(&path);
        }
        let vocab = self.vocab(VocabKind::Large)?;
        let words: Vec<&String> = vocab.tokens().iter().filter(|t| !t.starts_with('<')).collect();
        let table = EmbeddingTable::bundled(&words, self.cfg.eval.embedding_dim)?;
        std::fs::create_dir_all(self.dir("eval")).map_err(|e| Error::io(self.dir("eval"), e))?;
        table.save(&path)?;
        Ok(table)
    }

    /// Embedding distance to the caption for the limited (small-vocab),
    /// calibrated (largest ensemble) and miscalibrated (single listener)
    /// speakers on val-D games.
    pub fn topicality(&self) -> Result<Vec<TopicalityRow>> {
        let split = self.split(SPEAKER_SPLIT)?;
        let games = self.val_games(&split);
        let table = self.embedding_table()?;
        let speakers = [
            ("limited", VocabKind::Small, PopulationKind::SingleL0, 1),
            ("calibrated", VocabKind::Large, PopulationKind::Ensemble, self.cfg.max_ensemble()),
            ("miscalibrated", VocabKind::Large, PopulationKind::SingleL0, 1),
        ];
        let decode = self.cfg.eval.decode.decode();
        let mut utts = Vec::with_capacity(speakers.len());
        for (name, vocab, kind, n) in speakers {
            let sp = self.speaker(vocab, kind, n)?;
            let mut rng = RngStream::new(self.cfg.seed).derive(&format!("eval/topicality/{name}"));
            utts.push((name, sp.utterances(&games, decode, 1.0, &mut rng, 128)?));
        }
        let large = self.vocab(VocabKind::Large)?;
        let named: Vec<(&str, &[crate::vocab::Utterance])> = utts.iter().map(|(n, u)| (*n, u.as_slice())).collect();
        let rows = evaluation::topicality(&named, &games, &large, &table)?;
        write_json(&self.dir("eval").join("topicality.json"), &rows)?;
        Ok(rows)
    }

    /// Writes the four report files from the evaluation artifacts; every
    /// missing artifact is named in the error.
    pub fn report(&self) -> Result<Reports> {
        let eval = self.dir("eval");
        let needed = ["table1.json", "sweep.json", "calibration.json", "topicality.json"];
        let missing: Vec<String> = needed
            .iter()
            .map(|n| eval.join(n))
            .filter(|p| !p.exists())
            .map(|p| p.display().to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Eval(format!("missing evaluation artifacts: {}", missing.join(", "))));
        }
        let prov = self.provenance();
        let table1: Vec<Table1Row> = read_json(&eval.join("table1.json"))?;
        let sweep: Vec<SweepPoint> = read_json(&eval.join("sweep.json"))?;
        let cal: Calibration = read_json(&eval.join("calibration.json"))?;
        let topic: Vec<TopicalityRow> = read_json(&eval.join("topicality.json"))?;
        let dir = self.dir("reports");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let out = Reports {
            table1: dir.join("table1.csv"),
            fig2: dir.join("fig2.dat"),
            fig3: dir.join("fig3.dat"),
            table3: dir.join("table3.csv"),
        };
        let rows: Vec<(String, AccuracyGrid)> = table1.into_iter().map(|r| (r.condition, r.grid)).collect();
        report::write(&out.table1, &report::table1(&rows, &prov))?;
        report::write(&out.fig2, &report::fig2(&cal.curve, &prov))?;
        report::write(&out.fig3, &report::fig3(&sweep, &prov))?;
        report::write(&out.table3, &report::table3(&topic, &prov))?;
        Ok(out)
    }

    /// Every stage in order.
    pub fn reproduce(&self) -> Result<Reports> {
        self.gen_data()?;
        self.listeners()?;
        self.table1()?;
        self.sweeps()?;
        self.calibrate()?;
        self.topicality()?;
        self.report()
    }
}

/// `single_l0`, `ensemble-<n>` or `dropout-<n>`.
pub fn condition_name(kind: PopulationKind, n: usize) -> String {
    match canonical(kind, n) {
        (PopulationKind::SingleL0, _) => "single_l0".to_string(),
        (k, n) => format!("{}-{n}", k.name()),
    }
}

pub fn vocab_name(kind: VocabKind) -> &'static str {
    match kind {
        VocabKind::Small => "small",
        VocabKind::Large => "large",
    }
}

pub fn parse_vocab(s: &str) -> Result<VocabKind> {
    match s {
        "small" => Ok(VocabKind::Small),
        "large" => Ok(VocabKind::Large),
        _ => Err(Error::Config(format!("unknown vocabulary `{s}` (small, large)"))),
    }
}
