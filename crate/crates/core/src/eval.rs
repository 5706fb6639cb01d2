//! Loop-detection protocols, precision/recall curves, registration
//! statistics, timing summaries and report files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use crate::descriptor::{DescriptorDatabase, GlobalDescriptor};
use crate::error::{Error, Result};
use crate::geom::PoseError;
use crate::ingest::LoopGroundtruth;

/// A scored (query, candidate) pair; `score` is `−distance`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredPair {
    pub query_index: usize,
    pub candidate_index: usize,
    pub score: f64,
    pub is_true_loop: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Points ordered from the strictest threshold to the loosest.
#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub ap: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PrOutcome {
    Curve(PrCurve),
    /// The groundtruth holds no true loop, so recall is undefined.
    NoPositives,
}

impl PrOutcome {
    pub fn curve(&self) -> Option<&PrCurve> {
        match self {
            PrOutcome::Curve(c) => Some(c),
            PrOutcome::NoPositives => None,
        }
    }

    pub fn ap(&self) -> Option<f64> {
        self.curve().map(|c| c.ap)
    }
}

/// Confusion counts at one threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

/// Step-integrated AP `Σ (R_k − R_{k−1}) P_k` with `R_0 = 0`.
pub fn average_precision(points: &[PrPoint]) -> f64 {
    let mut ap = 0.0;
    let mut last = 0.0;
    for p in points {
        ap += (p.recall - last) * p.precision;
        last = p.recall;
    }
    ap
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Protocol 1 counts at `threshold`: the best candidate of each query is
/// accepted when its score is at least the threshold.
pub fn protocol1_confusion(candidates: &[Option<(usize, f64)>], gt: &LoopGroundtruth, threshold: f64) -> Confusion {
    let mut c = Confusion::default();
    for (i, cand) in candidates.iter().enumerate() {
        match cand {
            Some((j, s)) if *s >= threshold => {
                if gt.is_loop(i, *j) {
                    c.tp += 1;
                } else {
                    c.fp += 1;
                }
            }
            _ if gt.has_loop(i) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    c
}

/// Protocol 1: one best candidate (index, score) or none per scan.
pub fn protocol1(candidates: &[Option<(usize, f64)>], gt: &LoopGroundtruth) -> Result<PrOutcome> {
    protocol1_restricted(candidates, gt, &vec![true; candidates.len()])
}

/// Protocol 1 over the queries flagged in `include`; the others are ignored
/// as if they were not part of the sequence (they stay in the database).
pub fn protocol1_restricted(
    candidates: &[Option<(usize, f64)>],
    gt: &LoopGroundtruth,
    include: &[bool],
) -> Result<PrOutcome> {
    if include.len() != candidates.len() {
        return Err(Error::DimensionMismatch {
            expected: candidates.len(),
            found: include.len(),
        });
    }
    if candidates.is_empty() {
        return Err(Error::Empty("sequence"));
    }
    if candidates.len() != gt.scan_count() {
        return Err(Error::DimensionMismatch {
            expected: gt.scan_count(),
            found: candidates.len(),
        });
    }
    let positives = (0..candidates.len()).filter(|&i| include[i] && gt.has_loop(i)).count();
    if positives == 0 {
        return Ok(PrOutcome::NoPositives);
    }
    for (i, c) in candidates.iter().enumerate() {
        if let Some((j, s)) = c {
            if *j >= candidates.len() || !s.is_finite() {
                return Err(Error::invalid(
                    "candidates",
                    format!("bad candidate ({j}, {s}) for scan {i}"),
                ));
            }
        }
    }
    let mut scored: Vec<(f64, usize, usize)> = candidates
        .iter()
        .enumerate()
        .filter(|(i, _)| include[*i])
        .filter_map(|(i, c)| c.map(|(j, s)| (s, i, j)))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let (mut tp, mut fp, mut fn_) = (0, 0, positives);
    let mut points = Vec::new();
    let mut k = 0;
    while k < scored.len() {
        let threshold = scored[k].0;
        while k < scored.len() && scored[k].0 == threshold {
            let (_, i, j) = scored[k];
            if gt.is_loop(i, j) {
                tp += 1;
            } else {
                fp += 1;
            }
            if gt.has_loop(i) {
                fn_ -= 1;
            }
            k += 1;
        }
        points.push(PrPoint {
            threshold,
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
        });
    }
    let ap = average_precision(&points);
    Ok(PrOutcome::Curve(PrCurve { points, ap }))
}

/// Protocol 2: every pair is a binary decision at each threshold.
pub fn protocol2(pairs: &[ScoredPair]) -> Result<PrOutcome> {
    if let Some(p) = pairs.iter().find(|p| !p.score.is_finite()) {
        return Err(Error::invalid(
            "pairs",
            format!("score of ({}, {}) is not finite", p.query_index, p.candidate_index),
        ));
    }
    let positives = pairs.iter().filter(|p| p.is_true_loop).count();
    if positives == 0 {
        return Ok(PrOutcome::NoPositives);
    }
    let mut order: Vec<&ScoredPair> = pairs.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    let (mut tp, mut fp) = (0, 0);
    let mut points = Vec::new();
    let mut k = 0;
    while k < order.len() {
        let threshold = order[k].score;
        while k < order.len() && order[k].score == threshold {
            if order[k].is_true_loop {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        points.push(PrPoint {
            threshold,
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, positives),
        });
    }
    let ap = average_precision(&points);
    Ok(PrOutcome::Curve(PrCurve { points, ap }))
}

/// Scores every eligible pair of a descriptor database against itself.
pub fn score_all_pairs(db: &DescriptorDatabase<f64>, gt: &LoopGroundtruth) -> Vec<ScoredPair> {
    let entries: Vec<(usize, &GlobalDescriptor<f64>)> = db.entries().collect();
    let mut pairs = Vec::new();
    for &(i, di) in &entries {
        for &(j, dj) in &entries {
            if gt.eligible(i, j) {
                pairs.push(ScoredPair {
                    query_index: i,
                    candidate_index: j,
                    score: -compare_descriptors(di, dj),
                    is_true_loop: gt.is_loop(i, j),
                });
            }
        }
    }
    pairs
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegistrationStats {
    pub success_rate: f64,
    /// Means over successful pairs; `None` when nothing succeeded.
    pub te_succ: Option<f64>,
    pub te_all: f64,
    pub re_succ: Option<f64>,
    pub re_all: f64,
    pub pairs: usize,
}

pub fn registration_stats(results: &[(PoseError<f64>, bool)]) -> Result<RegistrationStats> {
    if results.is_empty() {
        return Err(Error::Empty("registration results"));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let te: Vec<f64> = results.iter().map(|r| r.0.translation_error).collect();
    let re: Vec<f64> = results.iter().map(|r| r.0.rotation_error).collect();
    let te_s: Vec<f64> = results.iter().filter(|r| r.1).map(|r| r.0.translation_error).collect();
    let re_s: Vec<f64> = results.iter().filter(|r| r.1).map(|r| r.0.rotation_error).collect();
    let some = !te_s.is_empty();
    Ok(RegistrationStats {
        success_rate: te_s.len() as f64 / results.len() as f64,
        te_succ: some.then(|| mean(&te_s)),
        te_all: mean(&te),
        re_succ: some.then(|| mean(&re_s)),
        re_all: mean(&re),
        pairs: results.len(),
    })
}

/// Pairwise comparison cost: one `G`-dimensional distance, no cloud access.
pub fn compare_descriptors(a: &GlobalDescriptor<f64>, b: &GlobalDescriptor<f64>) -> f64 {
    a.distance(b)
}

/// Raw wall-clock samples per stage.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageTimings {
    pub extraction: Vec<Duration>,
    pub comparison: Vec<Duration>,
    pub query: Vec<Duration>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageSummary {
    pub stage: &'static str,
    pub samples: usize,
    pub median: Duration,
    pub p95: Duration,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimingReport {
    pub stages: Vec<StageSummary>,
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[Duration], q: f64) -> Duration {
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn timing_report(run: &StageTimings) -> TimingReport {
    let stages = [
        ("descriptor_extraction", &run.extraction),
        ("pairwise_comparison", &run.comparison),
        ("map_query", &run.query),
    ]
    .into_iter()
    .filter(|(_, s)| !s.is_empty())
    .map(|(stage, samples)| {
        let mut sorted = samples.clone();
        sorted.sort();
        let median = if sorted.len() % 2 == 1 {
            sorted[sorted.len() / 2]
        } else {
            (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2]) / 2
        };
        StageSummary {
            stage,
            samples: sorted.len(),
            median,
            p95: percentile(&sorted, 0.95),
        }
    })
    .collect();
    TimingReport { stages }
}

/// Times a full-database query at each size; each entry is the fastest of
/// `repeats` runs.
pub fn query_scaling(sizes: &[usize], dim: usize, repeats: usize, seed: u64) -> Vec<(usize, Duration)> {
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let random = |rng: &mut rand_chacha::ChaCha8Rng| {
        GlobalDescriptor::new(DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0))).expect("finite")
    };
    let max = sizes.iter().copied().max().unwrap_or(0);
    let mut db = DescriptorDatabase::new();
    let mut out = Vec::new();
    let query = random(&mut rng);
    let mut sorted = sizes.to_vec();
    sorted.sort_unstable();
    for size in sorted {
        while db.len() < size.min(max) {
            let i = db.len();
            db.push(i, random(&mut rng)).expect("increasing");
        }
        let best = (0..repeats.max(1))
            .map(|_| {
                let t = Instant::now();
                std::hint::black_box(db.query(&query, usize::MAX, 0));
                t.elapsed()
            })
            .min()
            .expect("at least one repeat");
        out.push((size, best));
    }
    out
}

/// Coefficient of determination of the least-squares line through `(x, y)`.
pub fn linear_fit_r2(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy * sxy / (sxx * syy)
}

pub const PR_CSV_HEADER: &str = "row,threshold,precision,recall,ap";

#[derive(Clone, Debug, PartialEq)]
pub struct ReportFiles {
    pub pr_csv: PathBuf,
    pub pr_svg: Option<PathBuf>,
    pub stats_csv: Option<PathBuf>,
    pub timing_csv: Option<PathBuf>,
}

/// PR curve as CSV: one `point` row per curve point and a final `summary`
/// row holding the AP. Without a curve only the header is written.
pub fn pr_csv(outcome: &PrOutcome) -> String {
    let mut s = format!("{PR_CSV_HEADER}\n");
    if let PrOutcome::Curve(c) = outcome {
        if !c.points.is_empty() {
            for p in &c.points {
                writeln!(s, "point,{:?},{:?},{:?},", p.threshold, p.precision, p.recall).expect("string write");
            }
            writeln!(s, "summary,,,,{:?}", c.ap).expect("string write");
        }
    }
    s
}

pub fn parse_pr_csv(text: &str) -> Result<Option<PrCurve>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == PR_CSV_HEADER => {}
        _ => return Err(Error::Format("PR CSV header missing".into())),
    }
    let mut points = Vec::new();
    let mut ap = None;
    for (n, line) in lines {
        let f: Vec<&str> = line.split(',').collect();
        let bad = |m: &str| Error::Parse {
            line: n + 1,
            message: m.to_string(),
        };
        if f.len() != 5 {
            return Err(bad("expected 5 fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
        match f[0] {
            "point" => points.push(PrPoint {
                threshold: num(f[1])?,
                precision: num(f[2])?,
                recall: num(f[3])?,
            }),
            "summary" => ap = Some(num(f[4])?),
            _ => return Err(bad("unknown row kind")),
        }
    }
    match ap {
        Some(ap) => Ok(Some(PrCurve { points, ap })),
        None if points.is_empty() => Ok(None),
        None => Err(Error::Format("PR CSV has points but no summary row".into())),
    }
}

/// Static SVG line plot of precision against recall.
pub fn pr_svg(curve: &PrCurve) -> String {
    let (w, h, m) = (480.0, 400.0, 50.0);
    let x = |r: f64| m + r * (w - 2.0 * m);
    let y = |p: f64| h - m - p * (h - 2.0 * m);
    let mut path = String::new();
    for (i, p) in curve.points.iter().enumerate() {
        let _ = write!(
            path,
            "{}{:.2},{:.2}",
            if i == 0 { "" } else { " " },
            x(p.recall),
            y(p.precision)
        );
    }
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="25" text-anchor="middle" font-family="sans-serif" font-size="16">Precision-recall (AP = {:.4})</text>"#,
        w / 2.0,
        curve.ap
    );
    let _ = writeln!(
        s,
        r#"<polyline points="{},{} {},{} {},{}" fill="none" stroke="black"/>"#,
        x(0.0),
        y(1.0),
        x(0.0),
        y(0.0),
        x(1.0),
        y(0.0)
    );
    for t in 0..=4 {
        let v = f64::from(t) / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-family="sans-serif" font-size="11">{v:.2}</text>"#,
            x(v),
            h - m + 16.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-family="sans-serif" font-size="11">{v:.2}</text>"#,
            m - 6.0,
            y(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">recall</text>"#,
        w / 2.0,
        h - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 14 {})">precision</text>"#,
        h / 2.0,
        h / 2.0
    );
    let _ = writeln!(
        s,
        r#"<polyline points="{path}" fill="none" stroke="steelblue" stroke-width="2"/>"#
    );
    s.push_str("</svg>\n");
    s
}

pub fn stats_csv(stats: &RegistrationStats) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:?}"));
    format!(
        "pairs,success_rate,te_succ,te_all,re_succ,re_all\n{},{:?},{},{:?},{},{:?}\n",
        stats.pairs,
        stats.success_rate,
        opt(stats.te_succ),
        stats.te_all,
        opt(stats.re_succ),
        stats.re_all
    )
}

pub fn timing_csv(report: &TimingReport) -> String {
    let mut s = String::from("stage,samples,median_ms,p95_ms\n");
    for st in &report.stages {
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6}",
            st.stage,
            st.samples,
            st.median.as_secs_f64() * 1e3,
            st.p95.as_secs_f64() * 1e3
        );
    }
    s
}

/// Writes `{prefix}_pr.csv`, `{prefix}_pr.svg` (only for a non-empty
/// curve) and, when given, `{prefix}_stats.csv` and `{prefix}_timing.csv`.
pub fn emit_report(
    outcome: &PrOutcome,
    stats: Option<&RegistrationStats>,
    timing: Option<&TimingReport>,
    prefix: impl AsRef<Path>,
) -> Result<ReportFiles> {
    let prefix = prefix.as_ref();
    let with = |suffix: &str| {
        let mut name = prefix.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(suffix);
        prefix.with_file_name(name)
    };
    let write = |path: &Path, text: &str| std::fs::write(path, text).map_err(|e| Error::io(path, e));

    let pr_csv_path = with("_pr.csv");
    write(&pr_csv_path, &pr_csv(outcome))?;
    let pr_svg_path = match outcome.curve() {
        Some(c) if !c.points.is_empty() => {
            let p = with("_pr.svg");
            write(&p, &pr_svg(c))?;
            Some(p)
        }
        _ => None,
    };
    let stats_path = match stats {
        Some(s) => {
            let p = with("_stats.csv");
            write(&p, &stats_csv(s))?;
            Some(p)
        }
        None => None,
    };
    let timing_path = match timing {
        Some(t) => {
            let p = with("_timing.csv");
            write(&p, &timing_csv(t))?;
            Some(p)
        }
        None => None,
    };
    Ok(ReportFiles {
        pr_csv: pr_csv_path,
        pr_svg: pr_svg_path,
        stats_csv: stats_path,
        timing_csv: timing_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Pose;
    use crate::ingest::build_loop_groundtruth;
    use nalgebra::Vector3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pair(score: f64, positive: bool) -> ScoredPair {
        ScoredPair {
            query_index: 0,
            candidate_index: 0,
            score,
            is_true_loop: positive,
        }
    }

    /// Recounts TP/FP at every threshold from scratch.
    fn naive_protocol2(pairs: &[ScoredPair]) -> f64 {
        let mut thresholds: Vec<f64> = pairs.iter().map(|p| p.score).collect();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let positives = pairs.iter().filter(|p| p.is_true_loop).count() as f64;
        let mut ap = 0.0;
        let mut last = 0.0;
        for t in thresholds {
            let tp = pairs.iter().filter(|p| p.score >= t && p.is_true_loop).count() as f64;
            let fp = pairs.iter().filter(|p| p.score >= t && !p.is_true_loop).count() as f64;
            let r = tp / positives;
            ap += (r - last) * tp / (tp + fp);
            last = r;
        }
        ap
    }

    #[test]
    fn hand_case() {
        let pairs = [pair(0.9, true), pair(0.8, false), pair(0.7, true)];
        let ap = protocol2(&pairs).unwrap().ap().unwrap();
        assert!((ap - (0.5 + 2.0 / 3.0 * 0.5)).abs() < 1e-12);
        assert!((ap - 0.833_333_333_333_333_3).abs() < 1e-9);
    }

    #[test]
    fn protocol2_examples() {
        let perfect: Vec<_> = (0..10).map(|i| pair(f64::from(i), i >= 6)).collect();
        assert_eq!(protocol2(&perfect).unwrap().ap(), Some(1.0));
        let none: Vec<_> = (0..10).map(|i| pair(f64::from(i), false)).collect();
        assert_eq!(protocol2(&none).unwrap(), PrOutcome::NoPositives);
        assert_eq!(protocol2(&[]).unwrap(), PrOutcome::NoPositives);
        assert!(protocol2(&[pair(f64::NAN, true)]).is_err());
    }

    #[test]
    fn protocol2_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // Coarse scores force many ties.
        let pairs: Vec<_> = (0..5000)
            .map(|_| pair(f64::from(rng.random_range(0..400)) / 10.0, rng.random_bool(0.3)))
            .collect();
        let ap = protocol2(&pairs).unwrap().ap().unwrap();
        assert!((ap - naive_protocol2(&pairs)).abs() < 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn ap_is_bounded_and_invariant_to_monotone_maps(seed in any::<u64>(), n in 1usize..60) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pairs: Vec<_> = (0..n).map(|_| pair(rng.random_range(-3.0..3.0), rng.random_bool(0.4))).collect();
            if let PrOutcome::Curve(c) = protocol2(&pairs).unwrap() {
                prop_assert!((0.0..=1.0).contains(&c.ap));
                let mapped: Vec<_> = pairs.iter().map(|p| ScoredPair { score: p.score.exp() * 2.0 + 1.0, ..*p }).collect();
                let m = protocol2(&mapped).unwrap().ap().unwrap();
                prop_assert!((m - c.ap).abs() < 1e-12);
                for w in c.points.windows(2) {
                    prop_assert!(w[1].recall >= w[0].recall);
                }
            }
        }
    }

    fn line_gt(positions: &[f64]) -> LoopGroundtruth {
        let poses: Vec<Pose<f64>> = positions
            .iter()
            .map(|x| Pose::from_translation(Vector3::new(*x, 0.0, 0.0)))
            .collect();
        build_loop_groundtruth(&poses, 4.0, 2)
    }

    /// Scans 0..6 along a line, then 6..9 revisit scans 0, 1, 2, then 9 is new.
    fn revisit_gt() -> LoopGroundtruth {
        line_gt(&[0.0, 10.0, 20.0, 30.0, 40.0, 50.0, 1.0, 11.0, 21.0, 100.0])
    }

    #[test]
    fn protocol1_oracle_scores_are_perfect() {
        let gt = revisit_gt();
        let positions: [f64; 10] = [0.0, 10.0, 20.0, 30.0, 40.0, 50.0, 1.0, 11.0, 21.0, 100.0];
        // Best candidate by true distance, scored by minus that distance.
        let candidates: Vec<Option<(usize, f64)>> = (0..10)
            .map(|i: usize| {
                (0..i.saturating_sub(2))
                    .map(|j| (j, -(positions[i] - positions[j]).abs()))
                    .max_by(|a, b| a.1.total_cmp(&b.1))
            })
            .collect();
        let c = protocol1(&candidates, &gt).unwrap();
        assert_eq!(c.ap(), Some(1.0));
    }

    #[test]
    fn protocol1_counts_match_brute_force() {
        let gt = revisit_gt();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let candidates: Vec<Option<(usize, f64)>> = (0..10)
                .map(|i: usize| {
                    (i >= 3 && rng.random_bool(0.9))
                        .then(|| (rng.random_range(0..i - 2), f64::from(rng.random_range(0..5))))
                })
                .collect();
            let PrOutcome::Curve(curve) = protocol1(&candidates, &gt).unwrap() else {
                panic!("the sequence has loops");
            };
            for p in &curve.points {
                let c = protocol1_confusion(&candidates, &gt, p.threshold);
                assert_eq!(c.tp + c.fp + c.fn_ + c.tn, 10);
                assert_eq!(p.precision, ratio(c.tp, c.tp + c.fp));
                assert_eq!(p.recall, ratio(c.tp, c.tp + c.fn_));
            }
        }
    }

    #[test]
    fn restricted_protocol1_counts_only_included_queries() {
        let gt = revisit_gt();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let candidates: Vec<Option<(usize, f64)>> = (0..10)
                .map(|i: usize| {
                    (i >= 3 && rng.random_bool(0.9))
                        .then(|| (rng.random_range(0..i - 2), f64::from(rng.random_range(0..5))))
                })
                .collect();
            let include: Vec<bool> = (0..10).map(|_| rng.random_bool(0.7)).collect();
            let outcome = protocol1_restricted(&candidates, &gt, &include).unwrap();
            let positives = (0..10).filter(|&i| include[i] && gt.has_loop(i)).count();
            let Some(curve) = outcome.curve() else {
                assert_eq!(positives, 0);
                continue;
            };
            for p in &curve.points {
                let (mut tp, mut fp, mut fn_) = (0, 0, 0);
                for i in (0..10).filter(|&i| include[i]) {
                    match candidates[i] {
                        Some((j, s)) if s >= p.threshold => {
                            if gt.is_loop(i, j) {
                                tp += 1
                            } else {
                                fp += 1
                            }
                        }
                        _ if gt.has_loop(i) => fn_ += 1,
                        _ => {}
                    }
                }
                assert_eq!(p.precision, ratio(tp, tp + fp));
                assert_eq!(p.recall, ratio(tp, tp + fn_));
            }
        }
        let all = vec![true; 10];
        let c: Vec<Option<(usize, f64)>> = (0..10).map(|i| (i > 5).then(|| (i - 6, 1.0))).collect();
        assert_eq!(
            protocol1_restricted(&c, &gt, &all).unwrap(),
            protocol1(&c, &gt).unwrap()
        );
        assert!(protocol1_restricted(&c, &gt, &all[..9]).is_err());
    }

    #[test]
    fn protocol1_anti_oracle() {
        let gt = revisit_gt();
        let positions: [f64; 10] = [0.0, 10.0, 20.0, 30.0, 40.0, 50.0, 1.0, 11.0, 21.0, 100.0];
        // Correct candidates for every query, scored in reverse of quality.
        let candidates: Vec<Option<(usize, f64)>> = (0..10)
            .map(|i: usize| {
                (0..i.saturating_sub(2))
                    .map(|j| (j, -(positions[i] - positions[j]).abs()))
                    .max_by(|a, b| a.1.total_cmp(&b.1))
                    .map(|(j, s)| (j, -s))
            })
            .collect();
        let c = protocol1(&candidates, &gt).unwrap();
        // Brute force: at full recall precision is 3 true of 7 candidates.
        let full = protocol1_confusion(&candidates, &gt, f64::NEG_INFINITY);
        let final_precision = full.tp as f64 / (full.tp + full.fp) as f64;
        assert_eq!(full.tp, 3);
        let curve = c.curve().unwrap();
        assert_eq!(curve.points.last().unwrap().precision, final_precision);
        assert!((curve.ap - final_precision).abs() < 1e-12, "{}", curve.ap);
    }

    #[test]
    fn protocol1_without_loops() {
        let gt = line_gt(&[0.0, 10.0, 20.0, 30.0, 40.0]);
        let candidates = vec![None, None, None, Some((0, -1.0)), Some((1, -2.0))];
        assert_eq!(protocol1(&candidates, &gt).unwrap(), PrOutcome::NoPositives);
        assert!(protocol1(&[], &gt).is_err());
        assert!(protocol1(&candidates[..3], &gt).is_err());
    }

    fn err(t: f64, r: f64) -> PoseError<f64> {
        PoseError {
            translation_error: t,
            rotation_error: r,
        }
    }

    #[test]
    fn registration_stats_examples() {
        let s = registration_stats(&[(err(0.0, 0.0), true), (err(0.0, 0.0), true)]).unwrap();
        assert_eq!(
            (s.success_rate, s.te_succ, s.te_all, s.re_succ, s.re_all),
            (1.0, Some(0.0), 0.0, Some(0.0), 0.0)
        );
        let s = registration_stats(&[(err(3.0, 10.0), false), (err(1.0, 1.0), true)]).unwrap();
        assert_eq!(
            (s.success_rate, s.te_succ, s.te_all, s.re_succ, s.re_all),
            (0.5, Some(1.0), 2.0, Some(1.0), 5.5)
        );
        let s = registration_stats(&[(err(3.0, 2.43), false)]).unwrap();
        assert_eq!((s.success_rate, s.te_succ, s.re_succ), (0.0, None, None));
        assert!(registration_stats(&[]).is_err());
    }

    #[test]
    fn registration_stats_match_naive_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let results: Vec<_> = (0..101)
            .map(|_| {
                (
                    err(rng.random_range(0.0..5.0), rng.random_range(0.0..20.0)),
                    rng.random_bool(0.7),
                )
            })
            .collect();
        let s = registration_stats(&results).unwrap();
        let (mut t, mut n) = (0.0, 0);
        for (e, ok) in &results {
            if *ok {
                t += e.translation_error;
                n += 1;
            }
        }
        assert!((s.te_succ.unwrap() - t / f64::from(n)).abs() < 1e-12);
    }

    #[test]
    fn timing_single_sample_and_percentiles() {
        let one = StageTimings {
            extraction: vec![Duration::from_millis(3)],
            comparison: vec![Duration::from_nanos(40)],
            query: vec![Duration::from_micros(9)],
        };
        let r = timing_report(&one);
        assert_eq!(r.stages.len(), 3);
        assert!(r.stages.iter().all(|s| s.samples == 1 && s.median == s.p95));

        let many = StageTimings {
            extraction: (1..=100).map(Duration::from_millis).collect(),
            ..StageTimings::default()
        };
        let r = timing_report(&many);
        assert_eq!(r.stages.len(), 1);
        assert_eq!(r.stages[0].p95, Duration::from_millis(95));
        assert_eq!(r.stages[0].median, Duration::from_micros(50_500));
    }

    #[test]
    fn linear_fit() {
        let line: Vec<_> = (0..10).map(|i| (f64::from(i), 2.0 * f64::from(i) + 1.0)).collect();
        assert!((linear_fit_r2(&line) - 1.0).abs() < 1e-12);
        let flat: Vec<_> = (0..10).map(|i| (f64::from(i), 1.0)).collect();
        assert_eq!(linear_fit_r2(&flat), 0.0);
    }

    #[test]
    fn report_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pairs: Vec<_> = (0..200)
            .map(|_| pair(rng.random_range(-2.0..0.0), rng.random_bool(0.2)))
            .collect();
        let outcome = protocol2(&pairs).unwrap();
        let stats = registration_stats(&[(err(3.0, 10.0), false), (err(1.0, 1.0), true)]).unwrap();
        let files = emit_report(&outcome, Some(&stats), None, dir.path().join("run")).unwrap();
        let back = parse_pr_csv(&std::fs::read_to_string(&files.pr_csv).unwrap())
            .unwrap()
            .unwrap();
        let curve = outcome.curve().unwrap();
        assert_eq!(back.points.len(), curve.points.len());
        for (a, b) in back.points.iter().zip(&curve.points) {
            assert!((a.threshold - b.threshold).abs() < 1e-9);
            assert!((a.precision - b.precision).abs() < 1e-9);
            assert!((a.recall - b.recall).abs() < 1e-9);
        }
        assert_eq!(back.ap, curve.ap);
        let svg = std::fs::read_to_string(files.pr_svg.unwrap()).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains(&format!("AP = {:.4}", curve.ap)) && !svg.contains("<script"));
        let stats_text = std::fs::read_to_string(files.stats_csv.unwrap()).unwrap();
        assert_eq!(stats_text.lines().nth(1).unwrap(), "2,0.5,1.0,2.0,1.0,5.5");
        assert!(files.timing_csv.is_none());
    }

    #[test]
    fn empty_report_has_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let files = emit_report(&PrOutcome::NoPositives, None, None, dir.path().join("none")).unwrap();
        assert_eq!(
            std::fs::read_to_string(&files.pr_csv).unwrap(),
            format!("{PR_CSV_HEADER}\n")
        );
        assert!(files.pr_svg.is_none());
        assert!(!dir.path().join("none_pr.svg").exists());
        assert_eq!(parse_pr_csv(&format!("{PR_CSV_HEADER}\n")).unwrap(), None);
    }
}
