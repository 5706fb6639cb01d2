use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use loopreg::config::RunConfig;
use loopreg::descriptor::{fit_vlad, global_descriptor, DescriptorDatabase, VladParams};
use loopreg::eval::{
    emit_report, protocol1, protocol2, registration_stats, score_all_pairs, timing_report, PrOutcome, ScoredPair,
    StageTimings,
};
use loopreg::geom::{pose_error, PointCloud, Pose};
use loopreg::ingest::kitti::{read_scan, write_poses, write_scan};
use loopreg::ingest::sequence::{build_loop_groundtruth, Sequence};
use loopreg::ingest::synthetic::{generate_trajectory, SceneSpec, TrajectorySpec};
use loopreg::pipeline::{
    candidates_from_rows, parse_detection_csv, write_detection_csv, DetectionRecord, LoopDetector, PoseMethod,
    RejectReason,
};
use loopreg::registration::{icp, ransac_register, success_check};
use loopreg::transport::{estimate_pose_uot, write_plan};

/// Scans extracted in parallel before they are fed, in order, to the detector.
const DETECT_BATCH: usize = 16;

fn config_help() -> &'static str {
    static HELP: OnceLock<String> = OnceLock::new();
    HELP.get_or_init(RunConfig::help)
}

#[derive(Parser)]
#[command(name = "loopreg", version, about = "LiDAR loop-closure detection and registration")]
#[command(after_help = config_help())]
struct Cli {
    /// Configuration file with `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Register one scan onto another.
    Register(RegisterArgs),
    /// Run loop detection over a KITTI-style sequence.
    Detect(DetectArgs),
    /// Precision-recall evaluation of detections or scored pairs.
    Eval(EvalArgs),
    /// Write a synthetic looped trajectory in KITTI format.
    Synth(SynthArgs),
    /// Fit VLAD parameters on a sequence.
    FitVlad(FitVladArgs),
}

#[derive(Args)]
struct RegisterArgs {
    source: PathBuf,
    target: PathBuf,
    #[arg(long, default_value = "ransac", value_parser = ["fast", "ransac"])]
    method: String,
    /// Refine the estimate with ICP.
    #[arg(long)]
    icp: bool,
    /// Write the transport plan here (fast method only).
    #[arg(long, value_name = "FILE")]
    dump_plan: Option<PathBuf>,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct DetectArgs {
    scan_dir: PathBuf,
    poses: PathBuf,
    /// Detection log to write.
    #[arg(long)]
    out: PathBuf,
    /// VLAD parameters from `fit-vlad`; without them the sequence itself is
    /// used for an unsupervised fit.
    #[arg(long)]
    vlad: Option<PathBuf>,
    /// Also write the descriptor database.
    #[arg(long, value_name = "FILE")]
    db_out: Option<PathBuf>,
    /// Also write per-stage timings (CSV).
    #[arg(long, value_name = "FILE")]
    timing_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// 1: best candidate per scan from a detection log; 2: all scored pairs.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    protocol: u8,
    /// Detection log (protocol 1).
    #[arg(long)]
    detections: Option<PathBuf>,
    /// Descriptor database (protocol 2).
    #[arg(long)]
    db: Option<PathBuf>,
    /// Labelled scores `query_index,candidate_index,score,label` (protocol 2).
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Poses giving the groundtruth.
    #[arg(long)]
    poses: Option<PathBuf>,
    /// Output prefix for `_pr.csv`, `_pr.svg` and `_stats.csv`.
    #[arg(long)]
    out_prefix: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    out_dir: PathBuf,
    #[arg(long, default_value_t = 300)]
    scans: usize,
    #[arg(long, default_value_t = 20)]
    same: usize,
    #[arg(long, default_value_t = 20)]
    reverse: usize,
    /// Points per scan.
    #[arg(long, default_value_t = 8000)]
    points: usize,
}

#[derive(Args)]
struct FitVladArgs {
    scan_dir: PathBuf,
    poses: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Ignore the poses: plain PCA compression without same-place pairs.
    #[arg(long)]
    no_pairs: bool,
}

/// Failure classes mapped to exit codes.
enum Failure {
    /// Bad invocation or unreadable input (exit 2).
    Usage(anyhow::Error),
    /// A processing stage failed (exit 1).
    Stage(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Stage(e)
    }
}

impl From<loopreg::Error> for Failure {
    fn from(e: loopreg::Error) -> Self {
        Failure::Stage(e.into())
    }
}

type CmdResult = Result<(), Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn require_file(path: &Path) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(anyhow::anyhow!("{}: no such file or directory", path.display())))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Stage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        require_file(path)?;
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))
            .map_err(usage)?;
        cfg.apply_text(&text)
            .with_context(|| format!("in {}", path.display()))
            .map_err(usage)?;
    }
    for o in &cli.overrides {
        let Some((k, v)) = o.split_once('=') else {
            return Err(usage(anyhow::anyhow!("--set expects KEY=VALUE, found `{o}`")));
        };
        cfg.set(k.trim(), v).map_err(usage)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn run(cli: Cli) -> CmdResult {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage(anyhow::anyhow!("--threads must be positive")));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("starting the thread pool")?;
    }
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Register(a) => cmd_register(a, &cfg),
        Command::Detect(a) => cmd_detect(a, &cfg),
        Command::Eval(a) => cmd_eval(a, &cfg),
        Command::Synth(a) => cmd_synth(a, &cfg),
        Command::FitVlad(a) => cmd_fit_vlad(a, &cfg),
    }
}

fn read_input_scan(path: &Path) -> Result<PointCloud<f64>, Failure> {
    require_file(path)?;
    read_scan(path).map_err(usage)
}

fn cmd_register(a: &RegisterArgs, cfg: &RunConfig) -> CmdResult {
    let source = read_input_scan(&a.source)?;
    let target = read_input_scan(&a.target)?;
    let method: PoseMethod = a.method.parse().map_err(usage)?;
    if a.dump_plan.is_some() && method != PoseMethod::Fast {
        return Err(usage(anyhow::anyhow!("--dump-plan needs --method fast")));
    }
    let front = &cfg.front_end;
    let src = front.extract(&source).context("source features")?;
    let tgt = front.extract(&target).context("target features")?;
    let lcd = cfg.lcd_config();

    let started = Instant::now();
    let (mut pose, mut fitness, mut rmse, mut converged) = match method {
        PoseMethod::Ransac => {
            let r = ransac_register(&src.features, &tgt.features, &lcd.ransac, lcd.seed).context("RANSAC")?;
            (r.pose, Some(r.fitness), Some(r.inlier_rmse), Some(r.converged))
        }
        PoseMethod::Fast => {
            let (pose, plan) = estimate_pose_uot(&src.features, &tgt.features, &lcd.uot).context("transport")?;
            if let Some(path) = &a.dump_plan {
                let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
                let mut w = BufWriter::new(file);
                write_plan(&mut w, &plan)
                    .and_then(|_| w.flush())
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            (pose, None, None, None)
        }
    };
    if a.icp {
        let r = icp(&src.cloud, &tgt.cloud, &pose, &lcd.icp).context("ICP")?;
        pose = r.pose;
        fitness = Some(r.fitness);
        rmse = Some(r.inlier_rmse);
        converged = Some(r.converged);
    }
    let seconds = started.elapsed().as_secs_f64();
    let t = pose.translation();
    let yaw = pose.yaw().to_degrees();
    let method_tag = if a.icp {
        format!("{method}+icp")
    } else {
        method.to_string()
    };
    if a.json {
        let report = serde_json::json!({
            "method": method_tag,
            "pose": pose.to_row_major_3x4().to_vec(),
            "translation": [t.x, t.y, t.z],
            "yaw_deg": yaw,
            "fitness": fitness,
            "inlier_rmse": rmse,
            "converged": converged,
            "seconds": seconds,
        });
        println!("{report}");
    } else {
        println!("method: {method_tag}");
        let row: Vec<String> = pose.to_row_major_3x4().iter().map(|v| format!("{v:.9}")).collect();
        println!("pose: {}", row.join(" "));
        println!("translation: {:.6} {:.6} {:.6}", t.x, t.y, t.z);
        println!("yaw_deg: {yaw:.4}");
        if let Some(f) = fitness {
            println!("fitness: {f:.6}");
        }
        if let Some(r) = rmse {
            println!("inlier_rmse: {r:.6}");
        }
        if let Some(c) = converged {
            println!("converged: {c}");
        }
        println!("seconds: {seconds:.3}");
    }
    Ok(())
}

fn open_sequence(scan_dir: &Path, poses: &Path) -> Result<Sequence<f64>, Failure> {
    require_file(scan_dir)?;
    require_file(poses)?;
    let seq = Sequence::open(scan_dir, poses).map_err(usage)?;
    if seq.is_empty() {
        return Err(usage(anyhow::anyhow!("{}: no scans", scan_dir.display())));
    }
    Ok(seq)
}

/// Features of every readable scan; unreadable scans are reported and left out.
fn extract_all(seq: &Sequence<f64>, cfg: &RunConfig) -> Vec<Option<loopreg::pipeline::ScanFeatures>> {
    (0..seq.len())
        .into_par_iter()
        .map(|i| match seq.load_scan(i).and_then(|c| cfg.front_end.extract(&c)) {
            Ok(f) => Some(f),
            Err(e) => {
                eprintln!("warning: scan {i}: {e}");
                None
            }
        })
        .collect()
}

fn fit_on_sequence(seq: &Sequence<f64>, cfg: &RunConfig, with_pairs: bool) -> anyhow::Result<VladParams<f64>> {
    let extracted = extract_all(seq, cfg);
    let mut index_of = vec![None; seq.len()];
    let mut training = Vec::new();
    for (i, f) in extracted.into_iter().enumerate() {
        if let Some(f) = f {
            index_of[i] = Some(training.len());
            training.push(f.features);
        }
    }
    if training.is_empty() {
        bail!("no readable scans to fit on");
    }
    let pairs: Vec<(usize, usize)> = if with_pairs {
        seq.loop_groundtruth(cfg.pair_radius, 0)
            .pairs()
            .iter()
            .filter_map(|&(i, j)| Some((index_of[i]?, index_of[j]?)))
            .collect()
    } else {
        Vec::new()
    };
    Ok(fit_vlad(&training, &pairs, &cfg.vlad_fit())?)
}

fn cmd_fit_vlad(a: &FitVladArgs, cfg: &RunConfig) -> CmdResult {
    let seq = open_sequence(&a.scan_dir, &a.poses)?;
    let params = fit_on_sequence(&seq, cfg, !a.no_pairs).context("fitting VLAD")?;
    params
        .write(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "fitted K={} D={} G={} on {} scans -> {}",
        params.clusters(),
        params.feature_dim(),
        params.output_dim(),
        seq.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_detect(a: &DetectArgs, cfg: &RunConfig) -> CmdResult {
    let seq = open_sequence(&a.scan_dir, &a.poses)?;
    let params = match &a.vlad {
        Some(path) => {
            require_file(path)?;
            VladParams::read(path).map_err(usage)?
        }
        None => {
            eprintln!("note: no --vlad given, fitting an unsupervised descriptor on the sequence");
            fit_on_sequence(&seq, cfg, false).context("fitting VLAD")?
        }
    };
    let mut detector = LoopDetector::new(cfg.front_end.clone(), params.clone(), cfg.lcd_config()).map_err(usage)?;

    let mut records = Vec::new();
    let mut timings = StageTimings::default();
    let mut failed = 0usize;
    let keyframes: Vec<usize> = (0..seq.len()).filter(|&i| detector.is_keyframe(i)).collect();
    for batch in keyframes.chunks(DETECT_BATCH) {
        let extracted: Vec<_> = batch
            .par_iter()
            .map(|&i| {
                let started = Instant::now();
                let out = seq.load_scan(i).and_then(|c| {
                    let f = cfg.front_end.extract(&c)?;
                    let d = global_descriptor(&f.features, &params)?;
                    Ok((f, d))
                });
                (i, out, started.elapsed())
            })
            .collect();
        for (i, out, elapsed) in extracted {
            let (features, descriptor) = match out {
                Ok(x) => x,
                Err(e) => {
                    eprintln!("warning: scan {i} skipped: {e}");
                    failed += 1;
                    continue;
                }
            };
            timings.extraction.push(elapsed);
            let started = Instant::now();
            match detector.process_features(i, features, descriptor) {
                Ok(detection) => {
                    timings.query.push(started.elapsed());
                    records.push(DetectionRecord {
                        query_index: i,
                        detection,
                    });
                }
                Err(e) => {
                    eprintln!("warning: scan {i} failed: {e}");
                    failed += 1;
                }
            }
        }
    }

    let file = fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut w = BufWriter::new(file);
    write_detection_csv(&mut w, &records)
        .and_then(|_| w.flush())
        .with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(path) = &a.db_out {
        detector
            .database()
            .write(path)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = &a.timing_out {
        let db: Vec<_> = detector.database().entries().take(2).map(|(_, d)| d.clone()).collect();
        if db.len() == 2 {
            for _ in 0..100 {
                let started = Instant::now();
                std::hint::black_box(db[0].distance(&db[1]));
                timings.comparison.push(started.elapsed());
            }
        }
        let report = timing_report(&timings);
        fs::write(path, loopreg::eval::timing_csv(&report)).with_context(|| format!("writing {}", path.display()))?;
    }

    let candidates = records.iter().filter(|r| r.detection.is_some()).count();
    let accepted = records
        .iter()
        .filter(|r| r.detection.as_ref().is_some_and(|d| d.accepted))
        .count();
    let consistency = records
        .iter()
        .filter(|r| {
            r.detection
                .as_ref()
                .is_some_and(|d| d.reject_reason == RejectReason::Consistency)
        })
        .count();
    println!(
        "scans {} processed {} failed {failed} candidates {candidates} accepted {accepted} rejected_consistency {consistency}",
        seq.len(),
        records.len()
    );
    if failed * 10 > keyframes.len() {
        return Err(Failure::Stage(anyhow::anyhow!(
            "{failed} of {} scans failed (more than 10%)",
            keyframes.len()
        )));
    }
    Ok(())
}

/// `query_index,candidate_index,score,label` rows with a header line.
fn read_scores(path: &Path) -> anyhow::Result<Vec<ScoredPair>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != 4 {
            bail!("{}:{}: expected 4 columns", path.display(), n + 1);
        }
        let label = match cols[3] {
            "1" | "true" => true,
            "0" | "false" => false,
            other => bail!("{}:{}: bad label `{other}`", path.display(), n + 1),
        };
        pairs.push(ScoredPair {
            query_index: cols[0]
                .parse()
                .with_context(|| format!("{}:{}", path.display(), n + 1))?,
            candidate_index: cols[1]
                .parse()
                .with_context(|| format!("{}:{}", path.display(), n + 1))?,
            score: cols[2]
                .parse()
                .with_context(|| format!("{}:{}", path.display(), n + 1))?,
            is_true_loop: label,
        });
    }
    Ok(pairs)
}

fn read_poses_arg(poses: &Option<PathBuf>) -> Result<Vec<Pose<f64>>, Failure> {
    let Some(path) = poses else {
        return Err(usage(anyhow::anyhow!("--poses is required for this input")));
    };
    require_file(path)?;
    loopreg::ingest::kitti::read_poses(path).map_err(usage)
}

fn cmd_eval(a: &EvalArgs, cfg: &RunConfig) -> CmdResult {
    let (outcome, stats) = match a.protocol {
        1 => {
            let Some(path) = &a.detections else {
                return Err(usage(anyhow::anyhow!("protocol 1 needs --detections")));
            };
            require_file(path)?;
            let poses = read_poses_arg(&a.poses)?;
            let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
            let rows = parse_detection_csv(BufReader::new(file)).map_err(usage)?;
            let gt = build_loop_groundtruth(&poses, cfg.eval_loop_radius, cfg.eval_exclusion);
            let candidates = candidates_from_rows(&rows, poses.len()).map_err(usage)?;
            let outcome = protocol1(&candidates, &gt).map_err(usage)?;
            let seq_rel = |i: usize, j: usize| poses[j].inverse().compose(&poses[i]);
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let registered = registered_poses(&text);
            let results: Vec<_> = registered
                .iter()
                .map(|(i, j, pose)| {
                    let e = pose_error(pose, &seq_rel(*i, *j));
                    (e, success_check(&e))
                })
                .collect();
            let stats = if results.is_empty() {
                None
            } else {
                Some(registration_stats(&results)?)
            };
            (outcome, stats)
        }
        _ => {
            let pairs = match (&a.db, &a.scores) {
                (Some(db), None) => {
                    require_file(db)?;
                    let db = DescriptorDatabase::read(db).map_err(usage)?;
                    let poses = read_poses_arg(&a.poses)?;
                    let gt = build_loop_groundtruth(&poses, cfg.eval_loop_radius, cfg.eval_exclusion);
                    if let Some((last, _)) = db.entries().last() {
                        if last >= poses.len() {
                            return Err(usage(anyhow::anyhow!(
                                "database index {last} exceeds the {} poses",
                                poses.len()
                            )));
                        }
                    }
                    score_all_pairs(&db, &gt)
                }
                (None, Some(scores)) => {
                    require_file(scores)?;
                    read_scores(scores).map_err(usage)?
                }
                _ => {
                    return Err(usage(anyhow::anyhow!(
                        "protocol 2 needs exactly one of --db or --scores"
                    )))
                }
            };
            (protocol2(&pairs).map_err(usage)?, None)
        }
    };
    let files = emit_report(&outcome, stats.as_ref(), None, &a.out_prefix).context("writing the report")?;
    match &outcome {
        PrOutcome::Curve(c) => println!("protocol {} AP {:.6} points {}", a.protocol, c.ap, c.points.len()),
        PrOutcome::NoPositives => println!("protocol {} AP undefined (no true loops)", a.protocol),
    }
    if let Some(s) = &stats {
        println!(
            "registration success {:.4} over {} accepted loops",
            s.success_rate, s.pairs
        );
    }
    println!("wrote {}", files.pr_csv.display());
    Ok(())
}

/// `(query, matched, pose)` of accepted rows in a detection log; the pose is
/// rebuilt from the translation and yaw columns.
fn registered_poses(text: &str) -> Vec<(usize, usize, Pose<f64>)> {
    let mut out = Vec::new();
    for line in text.lines().skip(1) {
        let c: Vec<&str> = line.split(',').collect();
        if c.len() != 10 || c[3] != "true" {
            continue;
        }
        let parsed = (|| {
            let i: usize = c[0].parse().ok()?;
            let j: usize = c[1].parse().ok()?;
            let t: Vec<f64> = c[5..8].iter().map(|v| v.parse().ok()).collect::<Option<_>>()?;
            let yaw: f64 = c[8].parse().ok()?;
            Some((
                i,
                j,
                Pose::from_yaw(yaw.to_radians(), nalgebra::Vector3::new(t[0], t[1], t[2])),
            ))
        })();
        out.extend(parsed);
    }
    out
}

fn cmd_synth(a: &SynthArgs, cfg: &RunConfig) -> CmdResult {
    let scene = SceneSpec {
        points: a.points,
        ..SceneSpec::default()
    };
    let spec = TrajectorySpec {
        scans: a.scans,
        same_revisits: a.same,
        reverse_revisits: a.reverse,
        ..TrajectorySpec::default()
    };
    let traj = generate_trajectory::<f64>(&scene, &spec, cfg.seed).map_err(usage)?;
    let scan_dir = a.out_dir.join("velodyne");
    fs::create_dir_all(&scan_dir).with_context(|| format!("creating {}", scan_dir.display()))?;
    for i in 0..traj.sequence.len() {
        let cloud = traj.sequence.load_scan(i)?;
        write_scan(scan_dir.join(format!("{i:06}.bin")), &cloud)?;
    }
    write_poses(a.out_dir.join("poses.txt"), traj.sequence.poses())?;
    let gt = traj.sequence.loop_groundtruth(cfg.eval_loop_radius, cfg.eval_exclusion);
    let loops = (0..traj.sequence.len()).filter(|&i| gt.has_loop(i)).count();
    println!(
        "wrote {} scans to {} ({loops} scans with a true loop)",
        traj.sequence.len(),
        a.out_dir.display()
    );
    Ok(())
}
