//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::codebook::Codebook;
use crate::config::{RunConfig, TeacherSpec};
use crate::distill::{self, KdRegion, LossReport, LossSet};
use crate::error::{Error, Result};
use crate::pipeline::{fit_codebook, new_classifier, prepare_teachers};
use crate::probe;
use crate::student::{load_checkpoint, save_checkpoint, Classifier, Modality, StudentModel};
use crate::synthdata::{generate_corpus, Corpus};
use crate::teacher::{build_bank, TeacherBank};

pub const CODEBOOK_FILE: &str = "codebook.avkd";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const EVAL_FILE: &str = "eval.csv";

#[derive(Debug, Parser)]
#[command(name = "avkd", version, about = "Audio-visual representation distillation from frozen speech teachers")]
pub struct Cli {
    /// Seeds every random component of the run.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Run configuration (JSON). Built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic audio-visual corpus.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// `eval` writes the held-out split that shares the training prototypes.
        #[arg(long, default_value = "train", value_parser = ["train", "eval"])]
        split: String,
    },
    /// Run an oracle teacher over a corpus and store its aggregated representations.
    ExtractTeacher {
        #[arg(long)]
        corpus: PathBuf,
        /// Teacher name from the run configuration.
        #[arg(long)]
        teacher: String,
        #[arg(long)]
        out: PathBuf,
        /// Keep every layer so the bank can be re-aggregated later.
        #[arg(long)]
        store_layers: bool,
        /// Override the number of trailing layers averaged.
        #[arg(long)]
        last_k: Option<usize>,
    },
    /// Fit a k-means codebook on a teacher bank.
    Kmeans {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of clusters (defaults to the teacher's configured value).
        #[arg(long)]
        clusters: Option<usize>,
    },
    /// Distill the teachers into a fresh student.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        teachers: TeacherArgs,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainOverrides,
    },
    /// Train a frame classifier on top of a (pretrained) student.
    Finetune {
        /// Pretrained checkpoint; a randomly initialized student when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        teachers: TeacherArgs,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainOverrides,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        n_freeze: Option<usize>,
    },
    /// Per-unit representation analysis: distance matrices, cross-modal gaps, embeddings.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated layer indices (0 = embedded input).
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<usize>>,
        /// Comma-separated input modes.
        #[arg(long, value_delimiter = ',', default_value = "audio,video")]
        modes: Vec<Modality>,
    },
    /// Frame accuracy per input mode and noise level.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Comma-separated SNRs in dB, evaluated in addition to clean audio.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        snr: Option<Vec<f64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct TeacherArgs {
    /// Teacher bank directory, once per teacher.
    #[arg(long = "bank")]
    pub banks: Vec<PathBuf>,
    /// Codebook directory or file, in the same order as --bank.
    #[arg(long = "codebook")]
    pub codebooks: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainOverrides {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub kd_region: Option<KdRegion>,
    #[arg(long)]
    pub loss: Option<LossSet>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub tau_prime: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut distill::TrainConfig) {
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.kd_region {
            cfg.kd_region = v;
        }
        if let Some(v) = &self.loss {
            cfg.losses = v.clone();
        }
        if let Some(v) = self.tau {
            cfg.tau = v;
        }
        if let Some(v) = self.tau_prime {
            cfg.tau_prime = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
    }
}

/// Parses `args` and runs the command. Returns the process exit code:
/// 0 on success, 1 on a usage error, 2 on a runtime error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("{first}");
            return 1;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            2
        }
    }
}

fn load_run(cli: &Cli) -> Result<RunConfig> {
    let run = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(run.with_seed(cli.seed))
}

pub fn execute(cli: &Cli) -> Result<()> {
    let mut run = load_run(cli)?;
    match &cli.command {
        Command::GenData { out, split } => {
            let cfg = if split == "eval" {
                run.eval_corpus_config()
            } else {
                run.corpus.clone()
            };
            run.validate()?;
            let corpus = generate_corpus(&cfg)?;
            corpus.save(out)?;
            run.echo(out)?;
            println!("wrote {} utterances to {}", corpus.utterances.len(), out.display());
        }
        Command::ExtractTeacher {
            corpus,
            teacher,
            out,
            store_layers,
            last_k,
        } => {
            let idx = teacher_index(&run, teacher)?;
            if let Some(k) = last_k {
                run.teachers[idx].teacher.last_k = *k;
            }
            run.validate()?;
            let corpus = Corpus::load(corpus)?;
            let bank = build_bank(&corpus, &run.teachers[idx].teacher, *store_layers)?;
            bank.save(out)?;
            run.echo(out)?;
            println!("teacher {teacher}: {} utterances -> {}", bank.len(), out.display());
        }
        Command::Kmeans { bank, out, clusters } => {
            let bank = TeacherBank::load(bank)?;
            let idx = teacher_index(&run, &bank.config.name)?;
            if let Some(n) = clusters {
                run.teachers[idx].num_clusters = *n;
            }
            run.validate()?;
            let spec = run.teachers[idx].clone();
            let cb = fit_codebook(&bank, &spec, &run, idx)?;
            fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            cb.save(&out.join(CODEBOOK_FILE))?;
            run.echo(out)?;
            println!(
                "teacher {}: {} clusters, inertia {} ({} per frame)",
                bank.config.name,
                cb.num_clusters(),
                cb.inertia,
                cb.label_scale()
            );
        }
        Command::Pretrain {
            corpus,
            teachers,
            out,
            train,
        } => {
            train.apply(&mut run.pretrain);
            run.validate()?;
            let corpus = Corpus::load(corpus)?;
            let banks = load_teachers(&run, teachers)?;
            let prepared = prepare_teachers(&corpus, &banks, run.pretrain.tau_prime)?;
            let mut model = StudentModel::new(run.student_config())?;
            run.echo(out)?;
            let cfg = run.pretrain.clone();
            let every = run.checkpoint_every;
            let mut metrics = MetricsWriter::create(&out.join(METRICS_FILE))?;
            for step in 0..cfg.steps {
                let utt = &corpus.utterances[distill::utterance_at(corpus.utterances.len(), cfg.seed, step)];
                let report = distill::pretrain_step(&mut model, utt, &prepared, &cfg, step)?;
                metrics.push(&report)?;
                if every > 0 && (step + 1) % every == 0 && step + 1 < cfg.steps {
                    save_checkpoint(&out.join(format!("{CHECKPOINT_DIR}-{:06}", step + 1)), &model, None)?;
                }
            }
            metrics.finish()?;
            save_checkpoint(&out.join(CHECKPOINT_DIR), &model, None)?;
            println!("pretrained {} steps -> {}", cfg.steps, out.display());
        }
        Command::Finetune {
            checkpoint,
            corpus,
            teachers,
            out,
            train,
            lambda,
            n_freeze,
        } => {
            train.apply(&mut run.finetune);
            if let Some(v) = lambda {
                run.finetune.lambda = *v;
            }
            if let Some(v) = n_freeze {
                run.finetune.n_freeze = *v;
            }
            run.validate()?;
            let mut model = match checkpoint {
                Some(dir) => load_checkpoint(&checkpoint_dir(dir))?.model,
                None => StudentModel::new(run.student_config())?,
            };
            let mut corpus = Corpus::load(corpus)?;
            corpus.utterances.truncate(run.finetune_utterances);
            if corpus.utterances.is_empty() {
                return Err(Error::Empty("finetune corpus"));
            }
            let cfg = run.finetune.clone();
            let prepared = if cfg.lambda > 0.0 {
                if teachers.banks.is_empty() {
                    return Err(Error::InvalidConfig(
                        "lambda > 0 needs the teacher banks (--bank/--codebook); pass --lambda 0 otherwise".into(),
                    ));
                }
                let banks = load_teachers(&run, teachers)?;
                Some(prepare_teachers(&corpus, &banks, cfg.tau_prime)?)
            } else {
                None
            };
            let mut clf = new_classifier(&model, corpus.config.num_units, cfg.seed);
            run.echo(out)?;
            let mut metrics = MetricsWriter::create(&out.join(METRICS_FILE))?;
            for step in 0..cfg.steps {
                let utt = &corpus.utterances[distill::utterance_at(corpus.utterances.len(), cfg.seed, step)];
                let report = distill::finetune_step(&mut model, &mut clf, utt, prepared.as_deref(), &cfg, step)?;
                metrics.push(&report)?;
            }
            metrics.finish()?;
            save_checkpoint(&out.join(CHECKPOINT_DIR), &model, Some(&clf))?;
            println!("finetuned {} steps -> {}", cfg.steps, out.display());
        }
        Command::Probe {
            checkpoint,
            corpus,
            out,
            layers,
            modes,
        } => {
            let model = load_checkpoint(&checkpoint_dir(checkpoint))?.model;
            let corpus = Corpus::load(corpus)?;
            let layers = layers.clone().unwrap_or_else(|| (0..model.num_layers()).collect());
            if modes.is_empty() {
                return Err(Error::InvalidConfig("no probe modes given".into()));
            }
            let mut table = probe::UnitRepresentationTable::new(corpus.config.num_units);
            for &mode in modes {
                table = probe::collect_into(table, &model, &corpus, mode, &layers)?;
            }
            run.probe_layers = layers.clone();
            run.echo(out)?;
            for &mode in modes {
                for &l in &layers {
                    let d = probe::distance_matrix(&table, l, mode)?;
                    let p = out.join(format!("distance_layer{l}_{mode}.csv"));
                    fs::write(&p, probe::distance_matrix_csv(&d)).map_err(|e| Error::io(&p, e))?;
                }
            }
            if modes.contains(&Modality::AudioOnly) && modes.contains(&Modality::VideoOnly) {
                let mut csv = String::from("layer,cross_modal_gap\n");
                for &l in &layers {
                    let gap = probe::cross_modal_gap(&table, l)?;
                    csv.push_str(&format!("{l},{gap}\n"));
                    println!("layer {l}: cross-modal gap {gap:.4}");
                }
                let p = out.join("gaps.csv");
                fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
            }
            let rows = probe::export_embeddings(&table, &out.join("embeddings.avkd"))?;
            println!("exported {rows} unit means -> {}", out.display());
        }
        Command::Eval {
            checkpoint,
            corpus,
            snr,
            out,
        } => {
            let ck = load_checkpoint(&checkpoint_dir(checkpoint))?;
            let clf: Classifier = ck
                .classifier
                .ok_or_else(|| Error::InvalidConfig("checkpoint has no classifier; run finetune first".into()))?;
            let corpus = Corpus::load(corpus)?;
            let snrs = snr.clone().unwrap_or_else(|| run.eval_snr_db.clone());
            let seed = crate::rng::derive_seed(cli.seed, 0xE7A1);
            let mut csv = String::from("mode,snr_db,accuracy\n");
            for mode in Modality::ALL {
                let levels = std::iter::once(None).chain(snrs.iter().map(|&s| Some(s)));
                for level in levels {
                    let acc = distill::frame_accuracy(&ck.model, &clf, &corpus, mode, level, seed)?;
                    let tag = level.map_or_else(|| "clean".to_string(), |s| s.to_string());
                    csv.push_str(&format!("{mode},{tag},{acc}\n"));
                }
            }
            print!("{csv}");
            if let Some(out) = out {
                run.eval_snr_db = snrs;
                run.echo(out)?;
                let p = out.join(EVAL_FILE);
                fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
            }
        }
    }
    Ok(())
}

fn teacher_index(run: &RunConfig, name: &str) -> Result<usize> {
    run.teachers
        .iter()
        .position(|t| t.teacher.name == name)
        .ok_or_else(|| {
            let known: Vec<&str> = run.teachers.iter().map(|t| t.teacher.name.as_str()).collect();
            Error::InvalidConfig(format!("unknown teacher {name:?} (configured: {})", known.join(", ")))
        })
}

/// Accepts either a run output directory or the checkpoint directory itself.
fn checkpoint_dir(dir: &Path) -> PathBuf {
    let nested = dir.join(CHECKPOINT_DIR);
    if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    }
}

fn codebook_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(CODEBOOK_FILE)
    } else {
        p.to_path_buf()
    }
}

/// Loads banks and codebooks, ordered like `run.teachers` and checked against them.
fn load_teachers(run: &RunConfig, args: &TeacherArgs) -> Result<Vec<(TeacherBank, Codebook)>> {
    if args.banks.len() != args.codebooks.len() {
        return Err(Error::InvalidConfig(format!(
            "{} --bank but {} --codebook arguments",
            args.banks.len(),
            args.codebooks.len()
        )));
    }
    let mut loaded: Vec<Option<(TeacherBank, Codebook)>> = vec![None; run.teachers.len()];
    for (b, c) in args.banks.iter().zip(&args.codebooks) {
        let bank = TeacherBank::load(b)?;
        let cb = Codebook::load(&codebook_path(c))?;
        let idx = teacher_index(run, &bank.config.name)?;
        check_spec(&run.teachers[idx], &bank, &cb)?;
        if loaded[idx].replace((bank, cb)).is_some() {
            return Err(Error::InvalidConfig(format!(
                "teacher {} given twice",
                run.teachers[idx].teacher.name
            )));
        }
    }
    loaded
        .into_iter()
        .zip(&run.teachers)
        .map(|(l, spec)| {
            l.ok_or_else(|| Error::InvalidConfig(format!("missing --bank for teacher {}", spec.teacher.name)))
        })
        .collect()
}

fn check_spec(spec: &TeacherSpec, bank: &TeacherBank, cb: &Codebook) -> Result<()> {
    let t = &spec.teacher;
    let b = &bank.config;
    if t.hidden_dim != b.hidden_dim || t.frame_rate_ratio != b.frame_rate_ratio {
        return Err(Error::InvalidConfig(format!(
            "bank for teacher {} has D_h={} r={}, configuration says D_h={} r={}",
            t.name, b.hidden_dim, b.frame_rate_ratio, t.hidden_dim, t.frame_rate_ratio
        )));
    }
    if cb.num_clusters() != spec.num_clusters || cb.dim() != t.hidden_dim {
        return Err(Error::InvalidConfig(format!(
            "codebook for teacher {} is {}x{}, configuration expects {}x{}",
            t.name,
            cb.num_clusters(),
            cb.dim(),
            spec.num_clusters,
            t.hidden_dim
        )));
    }
    Ok(())
}

struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<fs::File>,
    header: bool,
}

impl MetricsWriter {
    fn create(path: &Path) -> Result<Self> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            header: false,
        })
    }

    fn push(&mut self, r: &LossReport) -> Result<()> {
        let io = |e| Error::io(&self.path, e);
        if !self.header {
            writeln!(self.out, "{}", r.csv_header()).map_err(io)?;
            self.header = true;
        }
        writeln!(self.out, "{}", r.csv_row()).map_err(|e| Error::io(&self.path, e))
    }

    fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}
