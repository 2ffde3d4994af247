//! The `mixpipe` command line.
//!
//! Every subcommand resolves its flags and config into a [`Job`], writes the
//! job to `<out>/run.meta`, and then runs it. `mixpipe replay --meta FILE
//! --out DIR` runs a stored job again. The output directory is the only
//! thing a job does not record.
//!
//! Exit codes: 0 success, 2 usage error, 3 I/O error, 4 anything else. The
//! failure line on stderr reads `error_code: message`.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bench::bench_centroids;
use crate::centroids::{recompute_full, CentroidsMemory};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::eval::evaluate_manifest;
use crate::io::{format_int_pairs, format_manifest, parse_key_values, read_embeddings, read_manifest, write_embeddings};
use crate::relabel::{run_relabeling_epoch, Verdict};
use crate::rng::{stage_rng, Stage};
use crate::sampler::{compose_minibatch, multicam_memory, next_pairs, queue_capacity, ExclusionQueue, ImagePools};
use crate::synth::{generate, score_partition, GroundTruth, SynthSpec};
use crate::trainloop::{bootstrap_memory, encode, format_loss_curve, run_training, EncoderParams};
use crate::types::{DatasetManifest, EmbeddingMatrix, Pid, SampleId, Source, Split};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_VALIDATION: i32 = 4;

#[derive(Parser, Debug)]
#[command(name = "mixpipe", version, about = "Mixed multi-camera / single-camera re-id pipeline")]
struct Cli {
    /// Only print machine-readable results.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset manifest (TSV).
    #[arg(long)]
    manifest: PathBuf,
    /// Feature rows in manifest order.
    #[arg(long, visible_alias = "embeddings")]
    features: PathBuf,
    /// Encoder parameters applied to the features first.
    #[arg(long)]
    encoder: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Pipeline config (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, visible_alias = "out-dir")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        /// Generator spec (`key = value` lines).
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one label-refinement epoch.
    Relabel {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        run: RunArgs,
        /// Images per pid in the refinement subset.
        #[arg(long)]
        k: Option<usize>,
        /// Starting centroids (default: bootstrap from the features).
        #[arg(long)]
        memory: Option<PathBuf>,
        /// Ground-truth sidecar from `gen`, for scoring the result.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Recompute every single-camera centroid.
    Centroids {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Emit mixed mini-batch plans.
    Sample {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        strategy: Option<String>,
        /// Number of plans.
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Train the toy encoder.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Rank-k and mAP on the query/gallery records of a manifest.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Count embedding work of subset refinement against full recompute.
    Bench {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated K values.
        #[arg(long, default_value = "2,4,8")]
        k: String,
    },
    /// Re-run the job stored in a run.meta file.
    Replay {
        #[arg(long)]
        meta: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// A fully resolved run: everything needed to reproduce it except the
/// output directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub command: String,
    /// Input paths and subcommand-specific settings.
    pub inputs: BTreeMap<String, String>,
    pub config: PipelineConfig,
    pub spec: Option<SynthSpec>,
}

const COMMANDS: [&str; 7] = ["gen", "relabel", "centroids", "sample", "train", "eval", "bench"];

impl Job {
    pub fn to_meta(&self) -> String {
        let mut s = String::from("# mixpipe run\n");
        let _ = writeln!(s, "command = {}", self.command);
        for (k, v) in &self.inputs {
            let _ = writeln!(s, "input.{k} = {v}");
        }
        for line in self.config.to_text().lines() {
            let _ = writeln!(s, "config.{line}");
        }
        if let Some(spec) = &self.spec {
            for line in spec.to_text().lines() {
                let _ = writeln!(s, "spec.{line}");
            }
        }
        s
    }

    pub fn from_meta(text: &str, origin: &str) -> Result<Job> {
        let mut command = None;
        let mut inputs = BTreeMap::new();
        let mut config = String::new();
        let mut spec = String::new();
        for (line, k, v) in parse_key_values(text, origin)? {
            if k == "command" {
                command = Some(v);
            } else if let Some(k) = k.strip_prefix("input.") {
                inputs.insert(k.to_string(), v);
            } else if let Some(k) = k.strip_prefix("config.") {
                let _ = writeln!(config, "{k} = {v}");
            } else if let Some(k) = k.strip_prefix("spec.") {
                let _ = writeln!(spec, "{k} = {v}");
            } else {
                return Err(Error::Parse {
                    path: origin.to_string(),
                    line,
                    message: format!("unknown key `{k}`"),
                });
            }
        }
        let command = command.ok_or_else(|| Error::Parse {
            path: origin.to_string(),
            line: 0,
            message: "missing `command`".into(),
        })?;
        if !COMMANDS.contains(&command.as_str()) {
            return Err(Error::InvalidConfig(format!("unknown command `{command}`")));
        }
        Ok(Job {
            command,
            inputs,
            config: PipelineConfig::parse(&config, origin)?,
            spec: if spec.is_empty() { None } else { Some(SynthSpec::parse(&spec, origin)?) },
        })
    }

    fn input(&self, key: &str) -> Result<&str> {
        self.inputs
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::InvalidConfig(format!("`{}` needs input `{key}`", self.command)))
    }

    fn path_inputs(&self) -> impl Iterator<Item = &str> {
        ["manifest", "features", "encoder", "memory", "truth"]
            .into_iter()
            .filter_map(|k| self.inputs.get(k).map(String::as_str))
    }
}

fn resolve_config(run: &RunArgs) -> Result<PipelineConfig> {
    let mut cfg = match &run.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = run.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn data_inputs(data: &DataArgs) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("manifest".into(), path_str(&data.manifest));
    m.insert("features".into(), path_str(&data.features));
    if let Some(e) = &data.encoder {
        m.insert("encoder".into(), path_str(e));
    }
    m
}

/// Turns parsed arguments into a job and its output directory.
fn plan(command: Command) -> Result<(Job, PathBuf)> {
    let job = |command: &str, inputs, config, spec| Job {
        command: command.to_string(),
        inputs,
        config,
        spec,
    };
    Ok(match command {
        Command::Gen { spec, seed, out } => {
            let mut s = match spec {
                Some(p) => SynthSpec::load(p)?,
                None => SynthSpec::default(),
            };
            if let Some(seed) = seed {
                s.seed = seed;
            }
            s.validate()?;
            (job("gen", BTreeMap::new(), PipelineConfig::default(), Some(s)), out)
        }
        Command::Relabel { data, run, k, memory, truth } => {
            let mut cfg = resolve_config(&run)?;
            if let Some(k) = k {
                cfg.k_per_pid = k;
            }
            let mut inputs = data_inputs(&data);
            if let Some(m) = memory {
                inputs.insert("memory".into(), path_str(&m));
            }
            if let Some(t) = truth {
                inputs.insert("truth".into(), path_str(&t));
            }
            (job("relabel", inputs, cfg, None), run.out)
        }
        Command::Centroids { data, run } => (job("centroids", data_inputs(&data), resolve_config(&run)?, None), run.out),
        Command::Sample { data, run, strategy, iterations } => {
            let mut cfg = resolve_config(&run)?;
            if let Some(s) = strategy {
                cfg.strategy = s.parse()?;
            }
            if let Some(i) = iterations {
                cfg.iterations_per_epoch = i;
            }
            (job("sample", data_inputs(&data), cfg, None), run.out)
        }
        Command::Train { data, run, strategy, epochs, iterations, k } => {
            let mut cfg = resolve_config(&run)?;
            if let Some(s) = strategy {
                cfg.strategy = s.parse()?;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(i) = iterations {
                cfg.iterations_per_epoch = i;
            }
            if let Some(k) = k {
                cfg.k_per_pid = k;
            }
            (job("train", data_inputs(&data), cfg, None), run.out)
        }
        Command::Eval { data, out } => (job("eval", data_inputs(&data), PipelineConfig::default(), None), out),
        Command::Bench { data, run, k } => {
            let mut inputs = data_inputs(&data);
            parse_k_values(&k)?;
            inputs.insert("k_values".into(), k);
            (job("bench", inputs, resolve_config(&run)?, None), run.out)
        }
        Command::Replay { meta, out } => {
            let text = fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
            (Job::from_meta(&text, &path_str(&meta))?, out)
        }
    })
}

fn parse_k_values(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<usize>()
                .ok()
                .filter(|&k| k > 0)
                .ok_or_else(|| Error::InvalidConfig(format!("bad K value `{v}`")))
        })
        .collect()
}

struct Loaded {
    manifest: DatasetManifest,
    features: EmbeddingMatrix,
    encoder: EncoderParams,
}

impl Loaded {
    fn embedded(&self) -> Result<EmbeddingMatrix> {
        encode(&self.encoder, &self.features)
    }
}

fn load_data(job: &Job) -> Result<Loaded> {
    let manifest = read_manifest(job.input("manifest")?)?;
    let features = read_embeddings(job.input("features")?)?;
    if features.rows() != manifest.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} feature rows for {} manifest records",
            features.rows(),
            manifest.len()
        )));
    }
    let encoder = match job.inputs.get("encoder") {
        Some(p) => EncoderParams::load(p)?,
        None => EncoderParams::identity(features.dim()),
    };
    Ok(Loaded { manifest, features, encoder })
}

fn write(out: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    let p = out.join(name);
    fs::write(&p, contents).map_err(|e| Error::io(&p, e))
}

/// What a finished job wants printed.
struct Printout {
    /// Always printed.
    result: String,
    /// Suppressed by `--quiet`.
    human: String,
}

/// Runs `job`, writing everything under `out`.
pub fn execute(job: &Job, out: &Path) -> Result<String> {
    Ok(execute_inner(job, out)?.result)
}

fn execute_inner(job: &Job, out: &Path) -> Result<Printout> {
    for p in job.path_inputs() {
        if !Path::new(p).exists() {
            return Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "input file not found")));
        }
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write(out, "run.meta", job.to_meta())?;
    match job.command.as_str() {
        "gen" => run_gen(job, out),
        "relabel" => run_relabel(job, out),
        "centroids" => run_centroids(job, out),
        "sample" => run_sample(job, out),
        "train" => run_train(job, out),
        "eval" => run_eval(job, out),
        "bench" => run_bench(job, out),
        other => Err(Error::InvalidConfig(format!("unknown command `{other}`"))),
    }
}

fn run_gen(job: &Job, out: &Path) -> Result<Printout> {
    let spec = job.spec.as_ref().ok_or_else(|| Error::InvalidConfig("gen needs a spec".into()))?;
    let data = generate(spec)?;
    write(out, "manifest.tsv", format_manifest(&data.manifest))?;
    write_embeddings(&data.features, out.join("features.mxeb"))?;
    write(out, "truth.tsv", data.truth.to_text())?;
    let c = data.manifest.counts();
    Ok(Printout {
        result: format!("n_m={}\tn_s={}\tm_m={}\tm_s={}\tk_m={}", c.n_m, c.n_s, c.m_m, c.m_s, c.k_m),
        human: format!(
            "{} records, {} junk, {} mislabeled, {} fragment pids\n",
            data.manifest.len(),
            data.truth.junk_ids().count(),
            data.truth.mislabel_set.len(),
            data.truth.fragment_map.len()
        ),
    })
}

fn run_relabel(job: &Job, out: &Path) -> Result<Printout> {
    let data = load_data(job)?;
    let cfg = &job.config;
    let mut rng = stage_rng(cfg.seed, Stage::Relabel);
    let memory = match job.inputs.get("memory") {
        Some(p) => CentroidsMemory::load(p)?,
        None => bootstrap_memory(&data.manifest, &data.features, &data.encoder, cfg, &mut rng)?,
    };
    let outcome = run_relabeling_epoch(
        &data.manifest,
        &data.features,
        |x| encode(&data.encoder, x),
        &memory,
        cfg,
        &mut rng,
    )?;
    write(out, "manifest.tsv", format_manifest(&outcome.manifest))?;
    outcome.memory.save(out.join("centroids.mxeb"))?;
    write(out, "report.txt", outcome.report.to_text())?;
    let mut decisions = String::from("sample_id\tverdict\tpid\tbest_sim\n");
    for d in &outcome.decisions {
        let verdict = match d.verdict {
            Verdict::Keep => "keep",
            Verdict::Relabel => "relabel",
            Verdict::Remove => "remove",
        };
        let pid = d.new_pid.map_or("-".to_string(), |p| p.to_string());
        let _ = writeln!(decisions, "{}\t{verdict}\t{pid}\t{:.6}", d.sample_id, d.best_sim);
    }
    write(out, "decisions.tsv", decisions)?;
    write(out, "merges.tsv", format_int_pairs(["pid", "merged_into"], outcome.mapping.iter().map(|(&a, &b)| (a, b))))?;

    let mut result = format!(
        "removed={}\trelabeled={}\tpids_before={}\tpids_after={}",
        outcome.report.n_removed, outcome.report.n_relabeled, outcome.report.pids_before, outcome.report.pids_after
    );
    if let Some(t) = job.inputs.get("truth") {
        let text = fs::read_to_string(t).map_err(|e| Error::io(t, e))?;
        let truth = GroundTruth::parse(&text, t, &data.manifest)?;
        let predicted: BTreeMap<SampleId, Pid> = outcome
            .manifest
            .records()
            .iter()
            .filter(|r| r.source == Source::SingleCamera && r.split == Split::Train && !outcome.removed.contains(&r.sample_id))
            .map(|r| (r.sample_id, r.pid))
            .collect();
        let s = score_partition(&predicted, &truth)?;
        let text = format!("precision = {}\nrecall = {}\nf1 = {}\n", s.precision, s.recall, s.f1);
        write(out, "score.txt", &text)?;
        let _ = write!(result, "\tf1={:.6}", s.f1);
    }
    Ok(Printout { result, human: outcome.report.to_text() })
}

fn run_centroids(job: &Job, out: &Path) -> Result<Printout> {
    let data = load_data(job)?;
    let memory = recompute_full(&data.manifest, &data.embedded()?)?;
    memory.save(out.join("centroids.mxeb"))?;
    Ok(Printout {
        result: format!("centroids={}\tdim={}", memory.len(), memory.dim()),
        human: String::new(),
    })
}

fn run_sample(job: &Job, out: &Path) -> Result<Printout> {
    let data = load_data(job)?;
    let cfg = &job.config;
    let emb = data.embedded()?;
    let memory = recompute_full(&data.manifest, &emb)?;
    let multi = multicam_memory(&data.manifest, &emb, None)?;
    let pools = ImagePools::from_manifest(&data.manifest, &BTreeSet::new());
    let available: BTreeSet<Pid> = pools.single_pids().into_iter().filter(|&p| memory.contains(p)).collect();
    let mut queue = ExclusionQueue::new(queue_capacity(cfg.queue_epochs, cfg.iterations_per_epoch, cfg.n_p, available.len()));
    let mut rng = stage_rng(cfg.seed, Stage::Sampler);
    let mut text = String::new();
    for b in 0..cfg.iterations_per_epoch {
        let step = next_pairs(&multi, &memory, &mut queue, cfg.strategy, cfg.n_p, Some(&available), &mut rng)?;
        let plan = compose_minibatch(&step.pairs, &pools, cfg.n_k, &mut rng)?;
        text.push_str(&plan.to_line(b));
        text.push('\n');
    }
    write(out, "plans.tsv", text)?;
    Ok(Printout {
        result: format!("plans={}\tqueue_capacity={}", cfg.iterations_per_epoch, queue.capacity()),
        human: String::new(),
    })
}

fn run_train(job: &Job, out: &Path) -> Result<Printout> {
    let data = load_data(job)?;
    if job.inputs.contains_key("encoder") {
        return Err(Error::InvalidConfig("train starts from its own seeded encoder; drop --encoder".into()));
    }
    let outcome = run_training(&data.manifest, &data.features, &job.config)?;
    outcome.initial.save(out.join("initial.mxeb"))?;
    outcome.encoder.save(out.join("encoder.mxeb"))?;
    outcome.momentum.save(out.join("momentum.mxeb"))?;
    write(out, "loss_curve.tsv", format_loss_curve(&outcome.curve))?;
    let reports = out.join("reports");
    fs::create_dir_all(&reports).map_err(|e| Error::io(&reports, e))?;
    for (i, r) in outcome.reports.iter().enumerate() {
        write(&reports, &format!("epoch_{i:04}.txt"), r.to_text())?;
    }
    write(out, "manifest.tsv", format_manifest(&outcome.manifest))?;
    outcome.memory.save(out.join("centroids.mxeb"))?;
    let last = outcome.curve.last().map_or(f64::NAN, |r| r.loss.total);
    Ok(Printout {
        result: format!("epochs={}\titerations={}\tfinal_loss={last}", job.config.epochs, outcome.curve.len()),
        human: String::new(),
    })
}

fn run_eval(job: &Job, out: &Path) -> Result<Printout> {
    let data = load_data(job)?;
    let r = evaluate_manifest(&data.manifest, &data.embedded()?)?;
    write(out, "eval.tsv", format!("rank1\trank5\trank10\tmAP\tn_queries\n{}\n", r.to_line()))?;
    Ok(Printout { result: r.to_line(), human: r.to_human() })
}

fn run_bench(job: &Job, out: &Path) -> Result<Printout> {
    let data = load_data(job)?;
    let ks = parse_k_values(job.input("k_values")?)?;
    let table = bench_centroids(&data.manifest, &data.embedded()?, &ks, &job.config)?;
    write(out, "bench.tsv", table.to_text())?;
    let mut human = String::new();
    for r in &table.rows {
        let name = r.k.map_or("naive".to_string(), |k| format!("K={k}"));
        let _ = writeln!(human, "{name:>6}  {:>8} embeddings  {:>7.3}x  {:.4}s", r.embeddings, r.ratio, r.seconds);
    }
    Ok(Printout { result: table.to_text().trim_end().to_string(), human })
}

fn exit_code(e: &Error) -> i32 {
    if e.is_io() {
        EXIT_IO
    } else {
        EXIT_VALIDATION
    }
}

fn init_threads() {
    if let Some(n) = std::env::var("MIXPIPE_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // 0 leaves the choice to rayon. A second call in the same process
        // fails harmlessly.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit code.
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
            let rendered = e.render().to_string();
            let first = rendered.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("usage_error: {first}");
            eprint!("{rendered}");
            return EXIT_USAGE;
        }
    };
    let level = if cli.quiet { log::LevelFilter::Off } else { log::LevelFilter::Info };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    init_threads();

    let outcome = plan(cli.command).and_then(|(job, out)| execute_inner(&job, &out));
    match outcome {
        Ok(p) => {
            println!("{}", p.result);
            if !cli.quiet && !p.human.is_empty() {
                print!("{}", p.human);
            }
            0
        }
        Err(e) => {
            eprintln!("{}: {e}", e.code());
            exit_code(&e)
        }
    }
}
