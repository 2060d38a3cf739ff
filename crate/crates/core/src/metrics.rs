//! Trajectory evaluation suite.
//!
//! Navigation error, success/oracle-success rates, path-length-weighted
//! success, dynamic-time-warping alignment (plain, normalized, and
//! success-gated), and turning-angle smoothness, aggregated per difficulty
//! split. All operations are pure functions over immutable trajectories;
//! aggregation canonicalizes episode order so reports are bit-identical
//! under input permutation.

use std::collections::BTreeMap;

use crate::episode::{Episode, SUCCESS_RADIUS};
use crate::error::{Error, Result};
use crate::world::{dist3, Difficulty};

/// Unit of metric computation: executed points, the goal, the stored
/// success flag, and the shortest-path length (straight-line in this
/// world).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub points: Vec<[f64; 3]>,
    pub goal: [f64; 3],
    pub success: bool,
    pub shortest_path_length: f64,
}

impl Trajectory {
    pub fn executed_length(&self) -> f64 {
        self.points.windows(2).map(|w| dist3(w[0], w[1])).sum()
    }
}

/// Final Euclidean distance to the goal (meters).
pub fn navigation_error(traj: &Trajectory) -> f64 {
    dist3(*traj.points.last().expect("nonempty trajectory"), traj.goal)
}

/// Percentage of episodes whose stored success flag is set.
pub fn success_rate(trajs: &[Trajectory]) -> Result<f64> {
    if trajs.is_empty() {
        return Err(Error::Empty { op: "success_rate" });
    }
    let hits = trajs.iter().filter(|t| t.success).count();
    Ok(100.0 * hits as f64 / trajs.len() as f64)
}

/// Percentage of episodes that pass within the success radius at any step.
pub fn oracle_success_rate(trajs: &[Trajectory]) -> Result<f64> {
    if trajs.is_empty() {
        return Err(Error::Empty {
            op: "oracle_success_rate",
        });
    }
    let hits = trajs
        .iter()
        .filter(|t| t.points.iter().any(|p| dist3(*p, t.goal) < SUCCESS_RADIUS))
        .count();
    Ok(100.0 * hits as f64 / trajs.len() as f64)
}

/// Success weighted by the shortest-to-executed path-length ratio; failed
/// episodes contribute zero.
pub fn spl(trajs: &[Trajectory]) -> Result<f64> {
    if trajs.is_empty() {
        return Err(Error::Empty { op: "spl" });
    }
    let mut total = 0.0;
    for t in trajs {
        if !t.success {
            continue;
        }
        let l = t.shortest_path_length;
        let p = t.executed_length();
        if l <= 0.0 {
            let start = t.points[0];
            if dist3(start, t.goal) > 0.0 {
                return Err(Error::Data(format!(
                    "nonpositive shortest path length {l} with start != goal"
                )));
            }
            // degenerate start-at-goal episode: ideal ratio
            total += 1.0;
            continue;
        }
        total += l / p.max(l);
    }
    Ok(100.0 * total / trajs.len() as f64)
}

/// Classical dynamic-time-warping distance with Euclidean point cost,
/// boundary-aligned, steps {(1,0),(0,1),(1,1)}.
pub fn dtw(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty { op: "dtw" });
    }
    let (n, m) = (a.len(), b.len());
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut curr = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for i in 1..=n {
        curr[0] = f64::INFINITY;
        for j in 1..=m {
            let cost = dist3(a[i - 1], b[j - 1]);
            curr[j] = cost + prev[j].min(curr[j - 1]).min(prev[j - 1]);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    Ok(prev[m])
}

/// Normalization scale of the DTW exponent: the success radius.
pub const DTW_DISTANCE_SCALE: f64 = SUCCESS_RADIUS;

/// Normalized DTW as a percentage:
/// 100 * exp(-DTW / (|ref| * success radius)), in (0, 100].
pub fn ndtw(traj: &Trajectory, reference: &[[f64; 3]]) -> Result<f64> {
    let d = dtw(&traj.points, reference)?;
    Ok(100.0 * (-d / (reference.len() as f64 * DTW_DISTANCE_SCALE)).exp())
}

/// Success-gated NDTW: zero for failed episodes.
pub fn sdtw(traj: &Trajectory, reference: &[[f64; 3]]) -> Result<f64> {
    if traj.success {
        ndtw(traj, reference)
    } else {
        Ok(0.0)
    }
}

const DEGENERATE_SEGMENT: f64 = 1e-6;

/// Turning-angle smoothness: population mean and variance (degrees,
/// degrees squared) of the angles between consecutive displacement
/// vectors, after dropping segments shorter than 1e-6 m. Returns `None`
/// when fewer than two valid segments remain.
pub fn smoothness(traj: &Trajectory) -> Option<(f64, f64)> {
    let mut segments: Vec<[f64; 3]> = Vec::new();
    for w in traj.points.windows(2) {
        let d = [w[1][0] - w[0][0], w[1][1] - w[0][1], w[1][2] - w[0][2]];
        if (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() >= DEGENERATE_SEGMENT {
            segments.push(d);
        }
    }
    if segments.len() < 2 {
        return None;
    }
    let angles: Vec<f64> = segments
        .windows(2)
        .map(|s| turning_angle_deg(s[0], s[1]))
        .collect();
    let n = angles.len() as f64;
    let mean = angles.iter().sum::<f64>() / n;
    let var = angles.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    Some((mean, var))
}

/// Angle between consecutive displacements in degrees, in [0, 180].
fn turning_angle_deg(u: [f64; 3], v: [f64; 3]) -> f64 {
    let dot = u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
    let cross = [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ];
    let cross_norm = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
    cross_norm.atan2(dot).to_degrees()
}

/// Metrics of one episode split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitMetrics {
    pub n: usize,
    pub ne_mean: f64,
    pub sr: f64,
    pub osr: f64,
    pub spl: f64,
    pub ndtw: f64,
    pub sdtw: f64,
    pub smooth_mean: f64,
    pub smooth_var: f64,
    /// Episodes whose smoothness was undefined (fewer than two valid
    /// segments); excluded from the smoothness averages.
    pub smooth_undefined: usize,
}

/// Aggregate report: full set plus per-difficulty rows.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub full: SplitMetrics,
    pub easy: Option<SplitMetrics>,
    pub hard: Option<SplitMetrics>,
}

impl MetricsReport {
    pub fn rows(&self) -> Vec<(&'static str, &SplitMetrics)> {
        let mut rows = vec![("full", &self.full)];
        if let Some(m) = &self.easy {
            rows.push(("easy", m));
        }
        if let Some(m) = &self.hard {
            rows.push(("hard", m));
        }
        rows
    }

    /// The dominance relations every split must satisfy; emitted with
    /// reports as a self-check.
    pub fn dominance_ok(&self) -> bool {
        self.rows().iter().all(|(_, m)| {
            let eps = 1e-9;
            m.sr <= m.osr + eps && m.spl <= m.sr + eps && m.sdtw <= m.ndtw + eps
        })
    }
}

/// Reference path for one scene, keyed by scene seed.
#[derive(Debug, Clone, PartialEq)]
pub struct RefPath {
    pub scene_seed: u64,
    pub points: Vec<[f64; 3]>,
}

fn split_metrics(pairs: &[(&Episode, &RefPath)]) -> Result<SplitMetrics> {
    let trajs: Vec<Trajectory> = pairs.iter().map(|(e, _)| e.trajectory()).collect();
    let n = trajs.len();
    let ne_mean = trajs.iter().map(navigation_error).sum::<f64>() / n as f64;
    let sr = success_rate(&trajs)?;
    let osr = oracle_success_rate(&trajs)?;
    let spl_v = spl(&trajs)?;
    let mut ndtw_sum = 0.0;
    let mut sdtw_sum = 0.0;
    let mut smooth_mean_sum = 0.0;
    let mut smooth_var_sum = 0.0;
    let mut smooth_n = 0usize;
    for ((_, r), t) in pairs.iter().zip(&trajs) {
        ndtw_sum += ndtw(t, &r.points)?;
        sdtw_sum += sdtw(t, &r.points)?;
        if let Some((m, v)) = smoothness(t) {
            smooth_mean_sum += m;
            smooth_var_sum += v;
            smooth_n += 1;
        }
    }
    Ok(SplitMetrics {
        n,
        ne_mean,
        sr,
        osr,
        spl: spl_v,
        ndtw: ndtw_sum / n as f64,
        sdtw: sdtw_sum / n as f64,
        smooth_mean: if smooth_n > 0 {
            smooth_mean_sum / smooth_n as f64
        } else {
            f64::NAN
        },
        smooth_var: if smooth_n > 0 {
            smooth_var_sum / smooth_n as f64
        } else {
            f64::NAN
        },
        smooth_undefined: n - smooth_n,
    })
}

/// Pairs episodes with reference paths by scene seed and aggregates all
/// metrics per difficulty split plus the full union. Episodes are sorted
/// by (scene seed, difficulty) first, so the report does not depend on
/// input order.
pub fn aggregate(episodes: &[Episode], refs: &[RefPath]) -> Result<MetricsReport> {
    if episodes.is_empty() {
        return Err(Error::Empty { op: "aggregate" });
    }
    let by_seed: BTreeMap<u64, &RefPath> = refs.iter().map(|r| (r.scene_seed, r)).collect();
    let mut pairs: Vec<(&Episode, &RefPath)> = episodes
        .iter()
        .map(|e| {
            by_seed
                .get(&e.scene_seed)
                .map(|r| (e, *r))
                .ok_or_else(|| {
                    Error::Data(format!(
                        "no reference path for scene seed {}",
                        e.scene_seed
                    ))
                })
        })
        .collect::<Result<_>>()?;
    pairs.sort_by_key(|(e, _)| (e.scene_seed, e.split.difficulty as u8, e.split.exposure as u8));

    let full = split_metrics(&pairs)?;
    let easy: Vec<_> = pairs
        .iter()
        .filter(|(e, _)| e.split.difficulty == Difficulty::Easy)
        .copied()
        .collect();
    let hard: Vec<_> = pairs
        .iter()
        .filter(|(e, _)| e.split.difficulty == Difficulty::Hard)
        .copied()
        .collect();
    Ok(MetricsReport {
        full,
        easy: if easy.is_empty() {
            None
        } else {
            Some(split_metrics(&easy)?)
        },
        hard: if hard.is_empty() {
            None
        } else {
            Some(split_metrics(&hard)?)
        },
    })
}
