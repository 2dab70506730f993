//! Command-line front end. Every subcommand writes its artifacts under
//! `--out` (plus a `provenance.json` sidecar) and prints a one-line JSON
//! summary on stdout. Exit codes: 0 success, 1 contract or validation
//! failure, 2 usage error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::consensus::{age_disagreement_report, apply_consensus};
use crate::denoise::{denoise_manifest, genuine_shift_report, intersect_keep_sets, DenoiseConfig, KeepPolicy};
use crate::error::Error;
use crate::evaluation::{
    disparity_report, enumerate_genuine_pairs, genuine_pairs_among, pair_scores, sample_impostor_pairs, DisparityConfig,
    ImpostorScope, Pair, ScoreDistribution, ThresholdScope, DEFAULT_IMPOSTOR_CAP,
};
use crate::facearea::{balance_area_for_race, exclude_facial_hair, AreaBalanceReport};
use crate::filters::{filter_manifest, GateConfig};
use crate::protocols::{build_benchmark, ks_distance, subsample, AggregationRule, BenchmarkSpec, SubsampleSpec};
use crate::provenance::RunProvenance;
use crate::records::{validate, AgeGroup, DemographicGroup, EmbeddingStore, Manifest, MaskRaster, Race};
use crate::synthcohort::{generate, CohortSpec};

#[derive(Debug, Parser)]
#[command(name = "fairbench", version, about = "Bias-aware face dataset curation and evaluation")]
pub struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct GateArgs {
    /// TOML file with gate thresholds; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub q_faceqnet_min: Option<f64>,
    #[arg(long)]
    pub q_magface_min: Option<f64>,
    #[arg(long)]
    pub pose_max: Option<f64>,
    #[arg(long)]
    pub fsb_low: Option<f64>,
    #[arg(long)]
    pub fsb_high: Option<f64>,
    #[arg(long)]
    pub area_min: Option<f64>,
    #[arg(long)]
    pub no_require_nose: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PairKind {
    Genuine,
    Impostor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KeepArg {
    DropNoiseOnly,
    KeepLargestCluster,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a manifest against its embedding store.
    Validate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        emb: PathBuf,
        /// Also write validation.txt here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Apply the quality, pose, brightness, area and nose gates.
    Filter {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        gates: GateArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Per-identity majority vote on race and gender labels.
    Consensus {
        #[arg(long)]
        manifest: PathBuf,
        /// CSV `image_id,age_group` from a second age estimator.
        #[arg(long)]
        age_labels: Option<PathBuf>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Remove identity noise by per-identity DBSCAN on embeddings.
    Denoise {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        emb: PathBuf,
        #[arg(long, default_value_t = 0.65)]
        eps: f64,
        #[arg(long, default_value_t = 3)]
        min_pts: usize,
        #[arg(long, value_enum, default_value_t = KeepArg::KeepLargestCluster)]
        keep: KeepArg,
        /// Cleaned manifest from another feature store; keep only the intersection.
        #[arg(long)]
        intersect: Option<PathBuf>,
        /// Identities sampled for the before/after genuine histograms.
        #[arg(long)]
        shift_sample: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Emit scored genuine or impostor pairs.
    Pairs {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        emb: PathBuf,
        #[arg(long, value_enum)]
        kind: PairKind,
        /// `global` or a group code such as `AF`.
        #[arg(long, default_value = "global")]
        scope: String,
        /// Impostor pairs to draw.
        #[arg(long, default_value_t = 100_000)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Per-group d', FMR and TPR at a shared threshold.
    Metrics {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        emb: PathBuf,
        #[arg(long, default_value_t = 1e-4)]
        fmr: f64,
        /// `global` or `reference:<GROUP>`.
        #[arg(long, default_value = "reference:WM")]
        scope: String,
        #[arg(long, default_value_t = DEFAULT_IMPOSTOR_CAP)]
        impostor_cap: usize,
        #[arg(long)]
        seed: u64,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Cross-gender face-area balancing by mask IoU, with heatmaps.
    BalanceArea {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory that relative mask paths resolve against (default: the manifest's).
        #[arg(long)]
        masks_root: Option<PathBuf>,
        /// `all` or one race (name or letter).
        #[arg(long, default_value = "all")]
        race: String,
        #[arg(long, default_value_t = 1_000_000)]
        cap: usize,
        #[arg(long, default_value_t = 0.9)]
        min_iou: f64,
        #[arg(long)]
        exclude_facial_hair: bool,
        #[arg(long)]
        seed: u64,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Quality-driven benchmark: low-quality images of a fixed subject sample per group.
    Benchmark {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 90)]
        subjects: usize,
        #[arg(long, default_value_t = 5)]
        images: usize,
        #[arg(long, value_enum, default_value_t = AggregationRule::Mean)]
        aggregation: AggregationRule,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Seeded identity and image-count subsample of one group.
    Subsample {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        group: String,
        #[arg(long)]
        n_ids: usize,
        #[arg(long)]
        imgs_per_id: usize,
        #[arg(long)]
        seed: u64,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Generate a synthetic cohort with ground truth.
    Synth {
        /// Cohort TOML.
        #[arg(long)]
        spec: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Compare several metrics runs.
    Report {
        /// Output directories of `metrics` runs.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[command(flatten)]
        out: OutArgs,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Summary printed on stdout.
struct Summary {
    outputs: Vec<PathBuf>,
    fields: serde_json::Map<String, serde_json::Value>,
    failed: Option<String>,
}

impl Summary {
    fn new() -> Self {
        Summary {
            outputs: Vec::new(),
            fields: serde_json::Map::new(),
            failed: None,
        }
    }

    fn set(&mut self, key: &str, v: impl serde::Serialize) {
        self.fields
            .insert(key.into(), serde_json::to_value(v).unwrap_or(serde_json::Value::Null));
    }
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return 2;
        }
        builder = builder.num_threads(n);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return 1;
        }
    };
    let name = subcommand_name(&cli.command);
    let mut summary = Summary::new();
    let result = pool.install(|| dispatch(cli.command, &mut summary));
    let (status, code, message) = match result {
        Ok(()) => match summary.failed.take() {
            None => ("ok", 0, None),
            Some(m) => ("failed", 1, Some(m)),
        },
        Err(Failure::Usage(m)) => ("usage_error", 2, Some(m)),
        Err(Failure::Run(e)) => ("error", 1, Some(e.to_string())),
    };
    if let Some(m) = &message {
        eprintln!("error: {m}");
    }
    let mut line = serde_json::Map::new();
    line.insert("status".into(), json!(status));
    line.insert("subcommand".into(), json!(name));
    if let Some(m) = message {
        line.insert("message".into(), json!(m));
    }
    line.insert(
        "outputs".into(),
        json!(summary.outputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>()),
    );
    line.extend(summary.fields);
    println!("{}", serde_json::Value::Object(line));
    code
}

fn subcommand_name(c: &Command) -> &'static str {
    match c {
        Command::Validate { .. } => "validate",
        Command::Filter { .. } => "filter",
        Command::Consensus { .. } => "consensus",
        Command::Denoise { .. } => "denoise",
        Command::Pairs { .. } => "pairs",
        Command::Metrics { .. } => "metrics",
        Command::BalanceArea { .. } => "balance-area",
        Command::Benchmark { .. } => "benchmark",
        Command::Subsample { .. } => "subsample",
        Command::Synth { .. } => "synth",
        Command::Report { .. } => "report",
    }
}

fn prepare_out(dir: &Path, force: bool) -> CliResult<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::Contract(format!(
                "output directory {} is not empty; pass --force to overwrite",
                dir.display()
            ))
            .into());
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

fn write_file(summary: &mut Summary, path: PathBuf, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    summary.outputs.push(path);
    Ok(())
}

fn write_manifest(summary: &mut Summary, path: PathBuf, m: &Manifest) -> CliResult<()> {
    m.write(&path)?;
    summary.outputs.push(path);
    Ok(())
}

fn finish(summary: &mut Summary, dir: &Path, prov: &mut RunProvenance) -> CliResult<()> {
    let path = dir.join("provenance.json");
    prov.outputs = summary
        .outputs
        .iter()
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    prov.write(&path)?;
    summary.outputs.push(path);
    Ok(())
}

fn require_seed(seed: Option<u64>, what: &str) -> CliResult<u64> {
    seed.ok_or_else(|| Failure::Usage(format!("{what} samples randomly and needs --seed")))
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> CliResult<T> {
    s.parse().map_err(|e: Error| Failure::Usage(e.to_string()))
}

fn gate_config(args: &GateArgs, prov: &mut RunProvenance) -> CliResult<GateConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            prov.input(path)?;
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            toml::from_str::<GateConfig>(&text).map_err(|e| Error::Config(e.to_string()))?
        }
        None => GateConfig::default(),
    };
    if let Some(v) = args.q_faceqnet_min {
        cfg.q_faceqnet_min = v;
    }
    if let Some(v) = args.q_magface_min {
        cfg.q_magface_min = v;
    }
    if let Some(v) = args.pose_max {
        cfg.pose_abs_max_deg = v;
    }
    if let Some(v) = args.fsb_low {
        cfg.fsb_range[0] = v;
    }
    if let Some(v) = args.fsb_high {
        cfg.fsb_range[1] = v;
    }
    if let Some(v) = args.area_min {
        cfg.face_area_min = v;
    }
    if args.no_require_nose {
        cfg.require_nose = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_manifest(path: &Path, prov: &mut RunProvenance) -> CliResult<Manifest> {
    prov.input(path)?;
    Ok(Manifest::load(path)?)
}

fn load_store(path: &Path, prov: &mut RunProvenance) -> CliResult<EmbeddingStore> {
    prov.input(path)?;
    Ok(EmbeddingStore::open(path)?)
}

fn read_age_labels(path: &Path) -> CliResult<BTreeMap<String, AgeGroup>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (n == 0 && line.starts_with("image_id")) {
            continue;
        }
        let (id, age) = line.split_once(',').ok_or_else(|| Error::Parse {
            line: n + 1,
            message: "expected image_id,age_group".into(),
        })?;
        let age: AgeGroup = age.trim().parse().map_err(|e: Error| Error::Parse {
            line: n + 1,
            message: e.to_string(),
        })?;
        out.insert(id.trim().to_string(), age);
    }
    Ok(out)
}

fn pairs_csv(pairs: &[Pair], scores: &[f64], m: &Manifest) -> String {
    let mut out = String::from("image_a,image_b,score\n");
    for (p, s) in pairs.iter().zip(scores) {
        out.push_str(&format!(
            "{},{},{}\n",
            m.records[p.first as usize].image_id, m.records[p.second as usize].image_id, s
        ));
    }
    out
}

fn dispatch(cmd: Command, summary: &mut Summary) -> CliResult<()> {
    match cmd {
        Command::Validate {
            manifest,
            emb,
            out,
            force,
        } => {
            let mut prov = RunProvenance::new("validate");
            let m = load_manifest(&manifest, &mut prov)?;
            let store = load_store(&emb, &mut prov)?;
            let report = validate(&m, &store);
            summary.set("records", m.len());
            summary.set("findings", report.findings.len());
            summary.set("group_counts", &report.group_counts);
            if let Some(dir) = out {
                prepare_out(&dir, force)?;
                let mut text = String::new();
                for f in &report.findings {
                    text.push_str(&format!("{f}\n"));
                }
                for (g, n) in &report.group_counts {
                    text.push_str(&format!("# {g} {n}\n"));
                }
                write_file(summary, dir.join("validation.txt"), text)?;
                finish(summary, &dir, &mut prov)?;
            }
            if !report.is_clean() {
                for f in report.findings.iter().take(20) {
                    eprintln!("finding: {f}");
                }
                summary.failed = Some(format!("{} validation findings", report.findings.len()));
            }
        }

        Command::Filter { manifest, gates, out } => {
            prepare_out(&out.out, out.force)?;
            let mut prov = RunProvenance::new("filter");
            let m = load_manifest(&manifest, &mut prov)?;
            let cfg = gate_config(&gates, &mut prov)?;
            prov.param("gates", &cfg);
            let outcome = filter_manifest(&m, &cfg)?;
            let mut kept = outcome.kept.clone();
            kept.note(prov.header_line());
            write_manifest(summary, out.out.join("manifest.jsonl"), &kept)?;
            write_file(summary, out.out.join("rejections.csv"), outcome.stats.to_csv())?;
            let mut dec = String::from("image_id,reasons\n");
            for (r, d) in m.records.iter().zip(&outcome.decisions) {
                if !d.accepted() {
                    let reasons: Vec<&str> = d.reject_reasons.iter().map(|x| x.as_str()).collect();
                    dec.push_str(&format!("{},{}\n", r.image_id, reasons.join(";")));
                }
            }
            write_file(summary, out.out.join("rejected.csv"), dec)?;
            summary.set("input", outcome.stats.input);
            summary.set("kept", outcome.stats.kept);
            summary.set("rejected", outcome.stats.rejected);
            finish(summary, &out.out, &mut prov)?;
        }

        Command::Consensus {
            manifest,
            age_labels,
            out,
        } => {
            prepare_out(&out.out, out.force)?;
            let mut prov = RunProvenance::new("consensus");
            let m = load_manifest(&manifest, &mut prov)?;
            let outcome = apply_consensus(&m)?;
            if let Some(path) = &age_labels {
                prov.input(path)?;
                let other = read_age_labels(path)?;
                let own: BTreeMap<String, AgeGroup> =
                    m.records.iter().map(|r| (r.image_id.clone(), r.age_group)).collect();
                let matrix = age_disagreement_report(&own, &other)?;
                write_file(summary, out.out.join("age_disagreement.csv"), matrix.to_csv())?;
                summary.set("age_off_diagonal", matrix.off_diagonal);
            }
            let mut kept = outcome.manifest.clone();
            kept.note(prov.header_line());
            write_manifest(summary, out.out.join("manifest.jsonl"), &kept)?;
            write_file(summary, out.out.join("identity_labels.csv"), outcome.results_csv())?;
            summary.set("identities", outcome.results.len());
            summary.set("ambiguous", outcome.ambiguous().count());
            summary.set("kept", kept.len());
            finish(summary, &out.out, &mut prov)?;
        }

        Command::Denoise {
            manifest,
            emb,
            eps,
            min_pts,
            keep,
            intersect,
            shift_sample,
            seed,
            out,
        } => {
            prepare_out(&out.out, out.force)?;
            let mut prov = RunProvenance::new("denoise");
            let m = load_manifest(&manifest, &mut prov)?;
            let store = load_store(&emb, &mut prov)?;
            let cfg = DenoiseConfig {
                eps,
                min_pts,
                keep_policy: match keep {
                    KeepArg::DropNoiseOnly => KeepPolicy::DropNoiseOnly,
                    KeepArg::KeepLargestCluster => KeepPolicy::KeepLargestCluster,
                },
            };
            cfg.validate()?;
            prov.param("denoise", cfg);
            let shift_seed = match shift_sample {
                Some(_) => Some(require_seed(seed, "--shift-sample")?),
                None => None,
            };
            let outcome = denoise_manifest(&m, &store, &cfg)?;
            let mut kept = outcome.kept.clone();
            if let Some(path) = &intersect {
                let other = load_manifest(path, &mut prov)?;
                kept = intersect_keep_sets(&kept, &other);
                prov.param("intersect", true);
            }
            if let (Some(n), Some(s)) = (shift_sample, shift_seed) {
                prov.param("shift_sample", n).seed("shift_sample", s);
                let shift = genuine_shift_report(&m, &kept, &store, n, s)?;
                write_file(summary, out.out.join("genuine_before.csv"), shift.before.histogram_csv())?;
                write_file(summary, out.out.join("genuine_after.csv"), shift.after.histogram_csv())?;
                summary.set("low_mass_before", shift.before.mass_in(-0.2, 0.3));
                summary.set("low_mass_after", shift.after.mass_in(-0.2, 0.3));
            }
            kept.note(prov.header_line());
            write_manifest(summary, out.out.join("manifest.jsonl"), &kept)?;
            write_file(summary, out.out.join("dropped.txt"), outcome.drop_list())?;
            summary.set("input", m.len());
            summary.set("kept", kept.len());
            summary.set("dropped", outcome.dropped.len());
            finish(summary, &out.out, &mut prov)?;
        }

        Command::Pairs {
            manifest,
            emb,
            kind,
            scope,
            count,
            seed,
            out,
        } => {
            let group = if scope.eq_ignore_ascii_case("global") {
                None
            } else {
                Some(parse::<DemographicGroup>(&scope)?)
            };
            let seed = match kind {
                PairKind::Impostor => Some(require_seed(seed, "impostor pairing")?),
                PairKind::Genuine => seed,
            };
            prepare_out(&out.out, out.force)?;
            let mut prov = RunProvenance::new("pairs");
            let m = load_manifest(&manifest, &mut prov)?;
            let store = load_store(&emb, &mut prov)?;
            prov.param("kind", format!("{kind:?}").to_lowercase()).param("scope", &scope);
            let pairs = match (kind, group) {
                (PairKind::Genuine, None) => enumerate_genuine_pairs(&m),
                (PairKind::Genuine, Some(g)) => genuine_pairs_among(&m, &ImpostorScope::WithinGroup(g).positions(&m)),
                (PairKind::Impostor, g) => {
                    let s = seed.unwrap_or_default();
                    prov.param("count", count).seed("impostor", s);
                    let scope = g.map(ImpostorScope::WithinGroup).unwrap_or(ImpostorScope::Global);
                    sample_impostor_pairs(&m, scope, count, s)?
                }
            };
            let scores = pair_scores(&pairs, &m, &store)?;
            let dist = ScoreDistribution::from_scores(&scores);
            write_file(summary, out.out.join("pairs.csv"), pairs_csv(&pairs, &scores, &m))?;
            write_file(summary, out.out.join("histogram.csv"), dist.histogram_csv())?;
            summary.set("pairs", pairs.len());
            summary.set("mean", dist.mean());
            finish(summary, &out.out, &mut prov)?;
        }

        Command::Metrics {
            manifest,
            emb,
            fmr,
            scope,
            impostor_cap,
            seed,
            out,
        } => {
            let threshold_scope: ThresholdScope = parse(&scope)?;
            prepare_out(&out.out, out.force)?;
            let mut prov = RunProvenance::new("metrics");
            let m = load_manifest(&manifest, &mut prov)?;
            let store = load_store(&emb, &mut prov)?;
            let cfg = DisparityConfig {
                fmr_rate: fmr,
                threshold_scope,
                impostor_cap,
                seed,
            };
            prov.param("config", &cfg).seed("impostor", seed);
            let report = disparity_report(&m, &store, &cfg)?;
            write_file(summary, out.out.join("metrics.csv"), report.groups_csv())?;
            write_file(summary, out.out.join("race_gaps.csv"), report.race_gaps_csv())?;
            let hist = out.out.join("histograms");
            std::fs::create_dir_all(&hist).map_err(|e| Error::io(&hist, e))?;
            for g in &report.groups {
                write_file(summary, hist.join(format!("{}_genuine.csv", g.group)), g.genuine.histogram_csv())?;
                write_file(summary, hist.join(format!("{}_impostor.csv", g.group)), g.impostor.histogram_csv())?;
            }
            let mut json = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
            json.push('\n');
            write_file(summary, out.out.join("report.json"), json)?;
            summary.set("threshold", report.threshold.threshold);
            summary.set("achieved_fmr", report.threshold.achieved_fmr);
            finish(summary, &out.out, &mut prov)?;
        }

        Command::BalanceArea {
            manifest,
            masks_root,
            race,
            cap,
            min_iou,
            exclude_facial_hair: no_beards,
            seed,
            out,
        } => {
            let races: Vec<Race> = if race.eq_ignore_ascii_case("all") {
                Race::ALL.to_vec()
            } else {
                vec![parse(&race)?]
            };
            prepare_out(&out.out, out.force)?;
            let mut prov = RunProvenance::new("balance-area");
            let mut m = load_manifest(&manifest, &mut prov)?;
            if no_beards {
                m = exclude_facial_hair(&m);
            }
            prov.param("min_iou", min_iou)
                .param("cap", cap)
                .param("exclude_facial_hair", no_beards)
                .seed("pairs", seed);
            let root = masks_root.unwrap_or_else(|| manifest.parent().map(Path::to_path_buf).unwrap_or_default());
            let masks: Vec<Option<MaskRaster>> = m
                .records
                .iter()
                .map(|r| match &r.mask_path {
                    Some(p) => MaskRaster::load(root.join(p)).map(Some),
                    None => Ok(None),
                })
                .collect::<crate::Result<_>>()?;
            let mut table = String::from(AreaBalanceReport::CSV_HEADER);
            let mut done = 0;
            for r in races {
                let has_both = m.records.iter().any(|x| x.race == r && x.gender == crate::records::Gender::Female)
                    && m.records.iter().any(|x| x.race == r && x.gender == crate::records::Gender::Male);
                if !has_both {
                    continue;
                }
                let rep = balance_area_for_race(&m, &masks, r, cap, min_iou, seed)?;
                table.push_str(&rep.csv_row());
                let stem = format!("heatmap_{}", r.code());
                write_file(summary, out.out.join(format!("{stem}_before.csv")), rep.heatmap_before.to_csv())?;
                write_file(summary, out.out.join(format!("{stem}_before.bahm")), rep.heatmap_before.to_bytes())?;
                if let Some(h) = &rep.heatmap_after {
                    write_file(summary, out.out.join(format!("{stem}_after.csv")), h.to_csv())?;
                    write_file(summary, out.out.join(format!("{stem}_after.bahm")), h.to_bytes())?;
                }
                done += 1;
            }
            if done == 0 {
                return Err(Error::Shortfall {
                    context: "races with both genders present".into(),
                    need: 1,
                    have: 0,
                }
                .into());
            }
            write_file(summary, out.out.join("balance.csv"), table)?;
            summary.set("races", done);
            finish(summary, &out.out, &mut prov)?;
        }

        Command::Benchmark {
            manifest,
            seed,
            subjects,
            images,
            aggregation,
            out,
        } => {
            prepare_out(&out.out, out.force)?;
            let mut prov = RunProvenance::new("benchmark");
            let m = load_manifest(&manifest, &mut prov)?;
            let spec = BenchmarkSpec {
                subjects_per_group: subjects,
                images_per_subject: images,
                rule: aggregation,
                seed,
            };
            prov.param("benchmark", spec).seed("benchmark", seed);
            let bench = build_benchmark(&m, &spec)?;
            let mut bm = bench.manifest.clone();
            bm.note(prov.header_line());
            write_manifest(summary, out.out.join("manifest.jsonl"), &bm)?;
            let mut csv = String::from("group,q50,n_images,n_subjects,n_eligible,selected_subjects\n");
            for g in &bench.groups {
                csv.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    g.group,
                    g.q50,
                    g.n_images,
                    g.n_subjects,
                    g.n_eligible,
                    g.selected_subjects.join(";")
                ));
            }
            write_file(summary, out.out.join("groups.csv"), csv)?;
            summary.set("images", bm.len());
            summary.set("identities", bm.identities().len());
            finish(summary, &out.out, &mut prov)?;
        }

        Command::Subsample {
            manifest,
            group,
            n_ids,
            imgs_per_id,
            seed,
            out,
        } => {
            let group: DemographicGroup = parse(&group)?;
            prepare_out(&out.out, out.force)?;
            let mut prov = RunProvenance::new("subsample");
            let m = load_manifest(&manifest, &mut prov)?;
            let spec = SubsampleSpec {
                n_ids,
                imgs_per_id,
                group,
                seed,
            };
            prov.param("spec", spec).seed("subsample", seed);
            let mut sub = subsample(&m, &spec)?;
            sub.note(prov.header_line());
            write_manifest(summary, out.out.join("manifest.jsonl"), &sub)?;
            summary.set("label", spec.label());
            summary.set("records", sub.len());
            finish(summary, &out.out, &mut prov)?;
        }

        Command::Synth { spec, seed, out } => {
            prepare_out(&out.out, out.force)?;
            let mut prov = RunProvenance::new("synth");
            prov.input(&spec)?;
            let mut cohort_spec = CohortSpec::load(&spec)?;
            if let Some(s) = seed {
                cohort_spec.seed = s;
            }
            prov.seed("cohort", cohort_spec.seed);
            let cohort = generate(&cohort_spec)?;
            let mut m = cohort.manifest;
            m.note(prov.header_line());
            if !cohort.masks.is_empty() {
                let dir = out.out.join("masks");
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                for (r, mask) in m.records.iter().zip(&cohort.masks) {
                    let rel = r.mask_path.as_deref().unwrap_or_default();
                    mask.write(out.out.join(rel))?;
                }
                summary.set("masks", cohort.masks.len());
            }
            write_manifest(summary, out.out.join("manifest.jsonl"), &m)?;
            let emb = out.out.join("embeddings.baem");
            cohort.store.write(&emb)?;
            summary.outputs.push(emb);
            let truth = out.out.join("ground_truth.jsonl");
            cohort.truth.write(&truth)?;
            summary.outputs.push(truth);
            summary.set("records", m.len());
            summary.set("planted_noise", cohort.truth.noise_ids().len());
            finish(summary, &out.out, &mut prov)?;
        }

        Command::Report { runs, out } => {
            prepare_out(&out.out, out.force)?;
            let mut prov = RunProvenance::new("report");
            let mut loaded = Vec::new();
            for dir in &runs {
                let path = dir.join("report.json");
                prov.input(&path)?;
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
                let name = dir
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_else(|| dir.display().to_string());
                loaded.push((name, v));
            }
            let mut table = String::from("run,group,n_ids,n_images,dprime,fmr,tpr,threshold\n");
            type Dists = BTreeMap<String, (ScoreDistribution, ScoreDistribution)>;
            let mut dists: Vec<(String, Dists)> = Vec::new();
            for (name, v) in &loaded {
                let threshold = v["threshold"]["threshold"].clone();
                let groups = v["groups"]
                    .as_array()
                    .ok_or_else(|| Error::Format(format!("{name}: report.json has no groups")))?;
                let mut d = Dists::new();
                for g in groups {
                    let cell = |k: &str| match &g[k] {
                        serde_json::Value::Null => String::new(),
                        x => x.to_string().trim_matches('"').to_string(),
                    };
                    table.push_str(&format!(
                        "{name},{},{},{},{},{},{},{threshold}\n",
                        cell("group"),
                        cell("n_ids"),
                        cell("n_images"),
                        cell("dprime"),
                        cell("fmr"),
                        cell("tpr")
                    ));
                    let parse_dist = |k: &str| -> CliResult<ScoreDistribution> {
                        serde_json::from_value(g[k].clone())
                            .map_err(|e| Failure::Run(Error::Format(format!("{name}: {k} histogram: {e}"))))
                    };
                    d.insert(cell("group"), (parse_dist("genuine")?, parse_dist("impostor")?));
                }
                dists.push((name.clone(), d));
            }
            let mut ks = String::from("run_a,run_b,group,genuine_ks,impostor_ks\n");
            for i in 0..dists.len() {
                for j in i + 1..dists.len() {
                    for (g, (ga, ia)) in &dists[i].1 {
                        if let Some((gb, ib)) = dists[j].1.get(g) {
                            let k = |a: &ScoreDistribution, b: &ScoreDistribution| {
                                ks_distance(a, b).map(|x| x.to_string()).unwrap_or_default()
                            };
                            ks.push_str(&format!(
                                "{},{},{g},{},{}\n",
                                dists[i].0,
                                dists[j].0,
                                k(ga, gb),
                                k(ia, ib)
                            ));
                        }
                    }
                }
            }
            write_file(summary, out.out.join("comparison.csv"), table)?;
            write_file(summary, out.out.join("ks.csv"), ks)?;
            summary.set("runs", loaded.len());
            finish(summary, &out.out, &mut prov)?;
        }
    }
    Ok(())
}
