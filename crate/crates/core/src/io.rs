//! Versioned plain-text file formats.
//!
//! Every format writes canonical shortest-round-trip float text, so a
//! save/load/save cycle is byte-identical. Parsers are strict: unknown
//! record tags, malformed fields, and truncation are errors carrying the
//! offending line number.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::episode::{Episode, Exposure, Pose, SplitLabel, StepRecord};
use crate::error::{Error, Result};
use crate::fusion::{G2raConfig, G2raParams, ScalarMode, Variant};
use crate::metrics::{MetricsReport, SplitMetrics};
use crate::policy::{PolicyConfig, PolicyParams};
use crate::tensor::ParamSet;
use crate::train::LogRow;
use crate::world::{Difficulty, Landmark, SceneSpec, WorldBounds, VIEW_NAMES};

pub const CHECKPOINT_HEADER: &str = "geofuse-checkpoint v1";
pub const EPISODES_HEADER: &str = "geofuse-episodes v1";
pub const SCENES_HEADER: &str = "geofuse-scenes v1";

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn parse_f64(path: &Path, line: usize, s: &str) -> Result<f64> {
    let v: f64 = s
        .parse()
        .map_err(|_| parse_err(path, line, format!("expected a number, got {s:?}")))?;
    if !v.is_finite() {
        return Err(parse_err(path, line, format!("non-finite value {s:?}")));
    }
    Ok(v)
}

fn parse_u64(path: &Path, line: usize, s: &str) -> Result<u64> {
    s.parse()
        .map_err(|_| parse_err(path, line, format!("expected an integer, got {s:?}")))
}

fn parse_usize(path: &Path, line: usize, s: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| parse_err(path, line, format!("expected an index, got {s:?}")))
}

fn keyed<'a>(
    path: &Path,
    line: usize,
    token: &'a str,
    key: &str,
) -> Result<&'a str> {
    token
        .strip_prefix(key)
        .and_then(|rest| rest.strip_prefix('='))
        .ok_or_else(|| parse_err(path, line, format!("expected {key}=..., got {token:?}")))
}

fn vec3_text(v: [f64; 3]) -> String {
    format!("{},{},{}", v[0], v[1], v[2])
}

fn parse_vec3(path: &Path, line: usize, s: &str) -> Result<[f64; 3]> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(parse_err(path, line, format!("expected x,y,z, got {s:?}")));
    }
    Ok([
        parse_f64(path, line, parts[0])?,
        parse_f64(path, line, parts[1])?,
        parse_f64(path, line, parts[2])?,
    ])
}

fn check_header(path: &Path, got: Option<&str>, want: &str) -> Result<()> {
    match got {
        Some(h) if h == want => Ok(()),
        Some(h) => Err(Error::Version {
            path: path.to_path_buf(),
            found: h.to_string(),
            expected: want.to_string(),
        }),
        None => Err(parse_err(path, 1, "empty file")),
    }
}

// ---------------------------------------------------------------------------
// checkpoint
// ---------------------------------------------------------------------------

fn mode_line(name: &str, mode: ScalarMode) -> String {
    match mode {
        ScalarMode::Learned => format!("mode {name} learned"),
        ScalarMode::Fixed(v) => format!("mode {name} fixed {v}"),
    }
}

pub fn checkpoint_to_string(
    fusion: &G2raParams,
    policy: &PolicyParams,
    variant: Variant,
) -> String {
    let mut out = String::new();
    let c = fusion.config;
    let pc = policy.config;
    writeln!(out, "{CHECKPOINT_HEADER}").unwrap();
    writeln!(out, "fusion {} {} {} {}", c.d_clip, c.d_agg, c.d, c.heads).unwrap();
    writeln!(out, "policy {} {} {}", pc.fusion_d, pc.hidden, pc.max_step).unwrap();
    writeln!(out, "variant {variant}").unwrap();
    writeln!(out, "{}", mode_line("eta", fusion.eta_mode)).unwrap();
    writeln!(out, "{}", mode_line("alpha", fusion.alpha_mode)).unwrap();
    for t in fusion.tensors().into_iter().chain(policy.tensors()) {
        writeln!(out, "param {} {} {}", t.name, t.rows, t.cols).unwrap();
        for r in 0..t.rows {
            let row: Vec<String> = t.value[r * t.cols..(r + 1) * t.cols]
                .iter()
                .map(|v| format!("{v}"))
                .collect();
            writeln!(out, "{}", row.join(" ")).unwrap();
        }
    }
    writeln!(out, "end").unwrap();
    out
}

pub fn save_checkpoint(
    path: &Path,
    fusion: &G2raParams,
    policy: &PolicyParams,
    variant: Variant,
) -> Result<()> {
    std::fs::write(path, checkpoint_to_string(fusion, policy, variant))?;
    Ok(())
}

fn parse_mode(path: &Path, line: usize, parts: &[&str], name: &str) -> Result<ScalarMode> {
    if parts.len() < 3 || parts[0] != "mode" || parts[1] != name {
        return Err(parse_err(path, line, format!("expected mode {name} line")));
    }
    match parts[2] {
        "learned" if parts.len() == 3 => Ok(ScalarMode::Learned),
        "fixed" if parts.len() == 4 => Ok(ScalarMode::Fixed(parse_f64(path, line, parts[3])?)),
        _ => Err(parse_err(path, line, "mode must be learned or fixed <v>")),
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(G2raParams, PolicyParams, Variant)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    check_header(path, lines.next().map(|(_, l)| l), CHECKPOINT_HEADER)?;

    let (ln, fusion_line) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "truncated after header"))?;
    let parts: Vec<&str> = fusion_line.split_whitespace().collect();
    if parts.len() != 5 || parts[0] != "fusion" {
        return Err(parse_err(path, ln, "expected fusion <d_clip> <d_agg> <d> <heads>"));
    }
    let config = G2raConfig {
        d_clip: parse_usize(path, ln, parts[1])?,
        d_agg: parse_usize(path, ln, parts[2])?,
        d: parse_usize(path, ln, parts[3])?,
        heads: parse_usize(path, ln, parts[4])?,
    };
    config.validate()?;

    let (ln, policy_line) = lines
        .next()
        .ok_or_else(|| parse_err(path, ln, "truncated before policy line"))?;
    let parts: Vec<&str> = policy_line.split_whitespace().collect();
    if parts.len() != 4 || parts[0] != "policy" {
        return Err(parse_err(path, ln, "expected policy <fusion_d> <hidden> <max_step>"));
    }
    let pc = PolicyConfig {
        fusion_d: parse_usize(path, ln, parts[1])?,
        hidden: parse_usize(path, ln, parts[2])?,
        max_step: parse_f64(path, ln, parts[3])?,
    };

    let (ln, variant_line) = lines
        .next()
        .ok_or_else(|| parse_err(path, ln, "truncated before variant line"))?;
    let variant: Variant = variant_line
        .strip_prefix("variant ")
        .ok_or_else(|| parse_err(path, ln, "expected variant <name>"))?
        .parse()?;

    let (ln, eta_line) = lines
        .next()
        .ok_or_else(|| parse_err(path, ln, "truncated before eta mode"))?;
    let eta_mode = parse_mode(path, ln, &eta_line.split_whitespace().collect::<Vec<_>>(), "eta")?;
    let (ln, alpha_line) = lines
        .next()
        .ok_or_else(|| parse_err(path, ln, "truncated before alpha mode"))?;
    let alpha_mode = parse_mode(
        path,
        ln,
        &alpha_line.split_whitespace().collect::<Vec<_>>(),
        "alpha",
    )?;

    let mut fusion = G2raParams::init(config, 0)?;
    fusion.eta_mode = eta_mode;
    fusion.alpha_mode = alpha_mode;
    let mut policy = PolicyParams::init(pc, 0);

    let mut filled: BTreeSet<String> = BTreeSet::new();
    let mut last_good = ln;
    let mut saw_end = false;
    while let Some((ln, line)) = lines.next() {
        if line == "end" {
            saw_end = true;
            break;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != "param" {
            return Err(parse_err(path, ln, format!("expected param line, got {line:?}")));
        }
        let name = parts[1];
        let rows = parse_usize(path, ln, parts[2])?;
        let cols = parse_usize(path, ln, parts[3])?;
        let tensor = fusion
            .tensors_mut()
            .into_iter()
            .chain(policy.tensors_mut())
            .find(|t| t.name == name)
            .ok_or_else(|| parse_err(path, ln, format!("unknown parameter {name:?}")))?;
        if (tensor.rows, tensor.cols) != (rows, cols) {
            return Err(parse_err(
                path,
                ln,
                format!(
                    "parameter {name}: shape {rows}x{cols} does not match expected {}x{}",
                    tensor.rows, tensor.cols
                ),
            ));
        }
        for r in 0..rows {
            let (ln_row, row) = lines
                .next()
                .ok_or_else(|| parse_err(path, last_good, format!("truncated inside {name}; last good line was {last_good}")))?;
            let vals: Vec<&str> = row.split_whitespace().collect();
            if vals.len() != cols {
                return Err(parse_err(
                    path,
                    ln_row,
                    format!("parameter {name} row {r}: expected {cols} values, got {}", vals.len()),
                ));
            }
            for (c, v) in vals.iter().enumerate() {
                tensor.value[r * cols + c] = parse_f64(path, ln_row, v)?;
            }
            last_good = ln_row;
        }
        filled.insert(name.to_string());
        last_good = ln;
    }
    if !saw_end {
        return Err(parse_err(
            path,
            last_good,
            format!("truncated checkpoint; last good line was {last_good}"),
        ));
    }
    let expected: BTreeSet<String> = fusion
        .tensors()
        .into_iter()
        .chain(policy.tensors())
        .map(|t| t.name.clone())
        .collect();
    if filled != expected {
        let missing: Vec<_> = expected.difference(&filled).cloned().collect();
        return Err(Error::CheckpointMismatch(format!(
            "missing parameters: {}",
            missing.join(", ")
        )));
    }
    Ok((fusion, policy, variant))
}

// ---------------------------------------------------------------------------
// episodes
// ---------------------------------------------------------------------------

pub fn episodes_to_string(episodes: &[Episode]) -> String {
    let mut out = String::new();
    writeln!(out, "{EPISODES_HEADER}").unwrap();
    for ep in episodes {
        let stop = match ep.stop_step {
            Some(s) => s.to_string(),
            None => "-".to_string(),
        };
        writeln!(
            out,
            "episode seed={} exposure={} difficulty={} goal={} success={} stop_step={}",
            ep.scene_seed,
            ep.split.exposure.name(),
            ep.split.difficulty.name(),
            vec3_text(ep.goal),
            ep.success as u8,
            stop
        )
        .unwrap();
        for (t, state) in ep.states.iter().enumerate() {
            let (delta, score) = match ep.preds.get(t) {
                Some(p) => (p.delta, p.stop_score),
                // final state of a step-budget episode: no prediction made
                None => ([0.0; 3], 0.0),
            };
            writeln!(
                out,
                "step {t} {} {} {} {} {} {} {} {}",
                state.x, state.y, state.z, state.yaw, delta[0], delta[1], delta[2], score
            )
            .unwrap();
        }
        writeln!(out, "end").unwrap();
    }
    out
}

pub fn save_trajectories(episodes: &[Episode], path: &Path) -> Result<()> {
    std::fs::write(path, episodes_to_string(episodes))?;
    Ok(())
}

pub fn load_trajectories(path: &Path) -> Result<Vec<Episode>> {
    let text = std::fs::read_to_string(path)?;
    parse_episodes(path, &text)
}

fn parse_episodes(path: &Path, text: &str) -> Result<Vec<Episode>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l)).peekable();
    check_header(path, lines.next().map(|(_, l)| l), EPISODES_HEADER)?;

    let mut episodes = Vec::new();
    let mut last_good = 1;
    while let Some((ln, line)) = lines.next() {
        if line.trim().is_empty() {
            return Err(parse_err(path, ln, "blank lines are not allowed"));
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 7 || parts[0] != "episode" {
            return Err(parse_err(
                path,
                ln,
                "expected episode seed=.. exposure=.. difficulty=.. goal=.. success=.. stop_step=..",
            ));
        }
        let seed = parse_u64(path, ln, keyed(path, ln, parts[1], "seed")?)?;
        let exposure = Exposure::parse(keyed(path, ln, parts[2], "exposure")?)
            .map_err(|e| parse_err(path, ln, e.to_string()))?;
        let difficulty = Difficulty::parse(keyed(path, ln, parts[3], "difficulty")?)
            .map_err(|e| parse_err(path, ln, e.to_string()))?;
        let goal = parse_vec3(path, ln, keyed(path, ln, parts[4], "goal")?)?;
        let success = match keyed(path, ln, parts[5], "success")? {
            "0" => false,
            "1" => true,
            other => return Err(parse_err(path, ln, format!("success must be 0/1, got {other:?}"))),
        };
        let stop_field = keyed(path, ln, parts[6], "stop_step")?;
        let stop_step = if stop_field == "-" {
            None
        } else {
            Some(parse_usize(path, ln, stop_field)?)
        };

        let mut states: Vec<Pose> = Vec::new();
        let mut raw_preds: Vec<StepRecord> = Vec::new();
        let mut closed = false;
        for (ln, line) in lines.by_ref() {
            if line == "end" {
                closed = true;
                last_good = ln;
                break;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 10 || f[0] != "step" {
                return Err(parse_err(path, ln, format!("expected step record, got {line:?}")));
            }
            let t = parse_usize(path, ln, f[1])?;
            if t != states.len() {
                return Err(parse_err(
                    path,
                    ln,
                    format!("step index {t} out of order (expected {})", states.len()),
                ));
            }
            let nums: Vec<f64> = f[2..]
                .iter()
                .map(|s| parse_f64(path, ln, s))
                .collect::<Result<_>>()?;
            states.push(Pose {
                x: nums[0],
                y: nums[1],
                z: nums[2],
                roll: 0.0,
                pitch: 0.0,
                yaw: nums[3],
            });
            raw_preds.push(StepRecord {
                delta: [nums[4], nums[5], nums[6]],
                stop_score: nums[7],
            });
            last_good = ln;
        }
        if !closed {
            return Err(parse_err(
                path,
                last_good,
                format!("truncated episode for seed {seed}; last good line was {last_good}"),
            ));
        }
        if states.is_empty() {
            return Err(parse_err(path, last_good, "episode has no step records"));
        }
        // step-budget episodes carry a sentinel record on the final state
        let preds = match stop_step {
            Some(s) if s + 1 == states.len() => raw_preds,
            Some(s) => {
                return Err(parse_err(
                    path,
                    last_good,
                    format!("stop_step {s} does not point at the final state"),
                ));
            }
            None => {
                raw_preds.truncate(states.len() - 1);
                raw_preds
            }
        };
        let ep = Episode {
            scene_seed: seed,
            split: SplitLabel {
                exposure,
                difficulty,
            },
            goal,
            states,
            preds,
            stop_step,
            success,
            clipped_steps: 0,
            diagnostic: None,
        };
        if ep.recompute_success() != ep.success {
            return Err(parse_err(
                path,
                last_good,
                format!(
                    "stored success flag for seed {seed} disagrees with the stored trajectory"
                ),
            ));
        }
        episodes.push(ep);
    }
    Ok(episodes)
}

// ---------------------------------------------------------------------------
// scenes
// ---------------------------------------------------------------------------

pub fn scenes_to_string(scenes: &[SceneSpec]) -> String {
    let mut out = String::new();
    writeln!(out, "{SCENES_HEADER}").unwrap();
    for s in scenes {
        writeln!(
            out,
            "scene seed={} difficulty={} start={} goal={} bounds={},{}",
            s.seed,
            s.difficulty.name(),
            vec3_text(s.start),
            vec3_text(s.goal),
            vec3_text(s.bounds.min),
            vec3_text(s.bounds.max),
        )
        .unwrap();
        for lm in &s.landmarks {
            writeln!(
                out,
                "landmark {} {} {} {}",
                lm.position[0], lm.position[1], lm.position[2], lm.category
            )
            .unwrap();
        }
        writeln!(out, "end").unwrap();
    }
    out
}

pub fn save_scenes(scenes: &[SceneSpec], path: &Path) -> Result<()> {
    std::fs::write(path, scenes_to_string(scenes))?;
    Ok(())
}

pub fn load_scenes(path: &Path) -> Result<Vec<SceneSpec>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    check_header(path, lines.next().map(|(_, l)| l), SCENES_HEADER)?;
    let mut scenes = Vec::new();
    let mut last_good = 1;
    while let Some((ln, line)) = lines.next() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 6 || parts[0] != "scene" {
            return Err(parse_err(path, ln, "expected scene record"));
        }
        let seed = parse_u64(path, ln, keyed(path, ln, parts[1], "seed")?)?;
        let difficulty = Difficulty::parse(keyed(path, ln, parts[2], "difficulty")?)
            .map_err(|e| parse_err(path, ln, e.to_string()))?;
        let start = parse_vec3(path, ln, keyed(path, ln, parts[3], "start")?)?;
        let goal = parse_vec3(path, ln, keyed(path, ln, parts[4], "goal")?)?;
        let braw = keyed(path, ln, parts[5], "bounds")?;
        let b: Vec<&str> = braw.split(',').collect();
        if b.len() != 6 {
            return Err(parse_err(path, ln, "bounds must have six components"));
        }
        let bv: Vec<f64> = b
            .iter()
            .map(|s| parse_f64(path, ln, s))
            .collect::<Result<_>>()?;
        let bounds = WorldBounds {
            min: [bv[0], bv[1], bv[2]],
            max: [bv[3], bv[4], bv[5]],
        };
        let mut landmarks = Vec::new();
        let mut closed = false;
        for (ln, line) in lines.by_ref() {
            if line == "end" {
                closed = true;
                last_good = ln;
                break;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 5 || f[0] != "landmark" {
                return Err(parse_err(path, ln, format!("expected landmark record, got {line:?}")));
            }
            landmarks.push(Landmark {
                position: [
                    parse_f64(path, ln, f[1])?,
                    parse_f64(path, ln, f[2])?,
                    parse_f64(path, ln, f[3])?,
                ],
                category: parse_u64(path, ln, f[4])? as u32,
            });
            last_good = ln;
        }
        if !closed {
            return Err(parse_err(
                path,
                last_good,
                format!("truncated scene {seed}; last good line was {last_good}"),
            ));
        }
        scenes.push(SceneSpec {
            seed,
            difficulty,
            bounds,
            start,
            goal,
            landmarks,
        });
    }
    Ok(scenes)
}

// ---------------------------------------------------------------------------
// logs and reports
// ---------------------------------------------------------------------------

fn opt_f(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => "-".to_string(),
    }
}

pub fn train_log_to_string(log: &[LogRow]) -> String {
    let mut out = String::from("epoch\tsplit\tloss\tne\tsr\n");
    for row in log {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            row.epoch,
            row.split,
            row.loss,
            opt_f(row.ne),
            opt_f(row.sr)
        )
        .unwrap();
    }
    out
}

pub fn save_train_log(log: &[LogRow], path: &Path) -> Result<()> {
    std::fs::write(path, train_log_to_string(log))?;
    Ok(())
}

fn split_row_tsv(name: &str, m: &SplitMetrics) -> String {
    format!(
        "{name}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        m.n,
        m.ne_mean,
        m.sr,
        m.osr,
        m.spl,
        m.ndtw,
        m.sdtw,
        m.smooth_mean,
        m.smooth_var,
        m.smooth_undefined
    )
}

pub fn report_to_tsv(report: &MetricsReport) -> String {
    let mut out =
        String::from("split\tn\tne\tsr\tosr\tspl\tndtw\tsdtw\tsmooth_mean\tsmooth_var\tsmooth_undefined\n");
    for (name, m) in report.rows() {
        out.push_str(&split_row_tsv(name, m));
        out.push('\n');
    }
    out
}

pub fn report_to_text(report: &MetricsReport) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "{:<6} {:>5} {:>9} {:>7} {:>7} {:>7} {:>7} {:>7} {:>9} {:>10}",
        "split", "n", "NE(m)", "SR%", "OSR%", "SPL%", "NDTW%", "SDTW%", "smooth", "smoothvar"
    )
    .unwrap();
    for (name, m) in report.rows() {
        writeln!(
            out,
            "{:<6} {:>5} {:>9.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>9.2} {:>10.2}",
            name, m.n, m.ne_mean, m.sr, m.osr, m.spl, m.ndtw, m.sdtw, m.smooth_mean, m.smooth_var
        )
        .unwrap();
    }
    for (name, m) in report.rows() {
        writeln!(
            out,
            "check {name}: sr<=osr {} | spl<=sr {} | sdtw<=ndtw {}",
            ok(m.sr <= m.osr + 1e-9),
            ok(m.spl <= m.sr + 1e-9),
            ok(m.sdtw <= m.ndtw + 1e-9)
        )
        .unwrap();
    }
    out
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "VIOLATED"
    }
}

pub fn save_report(report: &MetricsReport, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let tsv = dir.join("report.tsv");
    let txt = dir.join("report.txt");
    std::fs::write(&tsv, report_to_tsv(report))?;
    std::fs::write(&txt, report_to_text(report))?;
    Ok((tsv, txt))
}

// ---------------------------------------------------------------------------
// response maps
// ---------------------------------------------------------------------------

/// One per-token response map laid out by view and token slot.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMap {
    pub name: String,
    /// Row-major `VIEWS x tokens_per_view` L2 norms.
    pub values: Vec<f64>,
    pub tokens_per_view: usize,
}

pub fn response_map_to_string(map: &ResponseMap) -> String {
    let mut out = String::from("view");
    for t in 0..map.tokens_per_view {
        write!(out, "\ttok{t}").unwrap();
    }
    out.push('\n');
    for (v, name) in VIEW_NAMES.iter().enumerate() {
        write!(out, "{name}").unwrap();
        for t in 0..map.tokens_per_view {
            write!(out, "\t{}", map.values[v * map.tokens_per_view + t]).unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn save_response_maps(maps: &[ResponseMap], dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for m in maps {
        let p = dir.join(format!("response_{}.tsv", m.name));
        std::fs::write(&p, response_map_to_string(m))?;
        paths.push(p);
    }
    Ok(paths)
}

// ---------------------------------------------------------------------------
// sweep grid
// ---------------------------------------------------------------------------

/// One sweep cell row: metrics of a (eta, alpha) cell on one split.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub id: usize,
    pub eta: f64,
    pub alpha: f64,
    pub split: String,
    pub ne: f64,
    pub sr: f64,
    pub osr: f64,
    pub spl: f64,
    pub best: bool,
}

pub fn sweep_to_string(rows: &[SweepRow]) -> String {
    let mut out = String::from("id\teta\talpha\tsplit\tne\tsr\tosr\tspl\tbest\n");
    for r in rows {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.id, r.eta, r.alpha, r.split, r.ne, r.sr, r.osr, r.spl, r.best as u8
        )
        .unwrap();
    }
    out
}

pub fn save_sweep(rows: &[SweepRow], path: &Path) -> Result<()> {
    std::fs::write(path, sweep_to_string(rows))?;
    Ok(())
}

pub fn load_sweep(path: &Path) -> Result<Vec<SweepRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or_else(|| parse_err(path, 1, "empty file"))?;
    if header != "id\teta\talpha\tsplit\tne\tsr\tosr\tspl\tbest" {
        return Err(parse_err(path, 1, "unexpected sweep header"));
    }
    let mut rows = Vec::new();
    for (ln, line) in lines {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 9 {
            return Err(parse_err(path, ln, format!("expected 9 fields, got {}", f.len())));
        }
        rows.push(SweepRow {
            id: parse_usize(path, ln, f[0])?,
            eta: parse_f64(path, ln, f[1])?,
            alpha: parse_f64(path, ln, f[2])?,
            split: f[3].to_string(),
            ne: parse_f64(path, ln, f[4])?,
            sr: parse_f64(path, ln, f[5])?,
            osr: parse_f64(path, ln, f[6])?,
            spl: parse_f64(path, ln, f[7])?,
            best: match f[8] {
                "0" => false,
                "1" => true,
                other => return Err(parse_err(path, ln, format!("best must be 0/1, got {other:?}"))),
            },
        });
    }
    Ok(rows)
}

/// Per-metric eta x alpha grids (full split) as delimited plot data.
pub fn sweep_grids_to_string(
    rows: &[SweepRow],
    etas: &[f64],
    alphas: &[f64],
    metric: &str,
) -> String {
    let pick = |r: &SweepRow| match metric {
        "ne" => r.ne,
        "sr" => r.sr,
        "osr" => r.osr,
        "spl" => r.spl,
        _ => unreachable!("unknown sweep metric"),
    };
    let mut out = String::from("eta\\alpha");
    for a in alphas {
        write!(out, "\t{a}").unwrap();
    }
    out.push('\n');
    for e in etas {
        write!(out, "{e}").unwrap();
        for a in alphas {
            let row = rows
                .iter()
                .find(|r| r.split == "full" && r.eta == *e && r.alpha == *a)
                .expect("grid row present");
            write!(out, "\t{}", pick(row)).unwrap();
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// ablation table
// ---------------------------------------------------------------------------

/// Seed-averaged metrics of one variant on one split.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub split: String,
    pub ne: f64,
    pub sr: f64,
    pub osr: f64,
    pub spl: f64,
    pub ndtw: f64,
    pub sdtw: f64,
    pub smooth_mean: f64,
    pub smooth_var: f64,
}

pub fn ablation_to_tsv(rows: &[AblationRow]) -> String {
    let mut out =
        String::from("variant\tsplit\tne\tsr\tosr\tspl\tndtw\tsdtw\tsmooth_mean\tsmooth_var\n");
    for r in rows {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.variant, r.split, r.ne, r.sr, r.osr, r.spl, r.ndtw, r.sdtw, r.smooth_mean, r.smooth_var
        )
        .unwrap();
    }
    out
}

pub fn ablation_to_text(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "{:<15} {:<5} {:>9} {:>7} {:>7} {:>7} {:>7} {:>7} {:>8} {:>10}",
        "variant", "split", "NE(m)", "SR%", "OSR%", "SPL%", "NDTW%", "SDTW%", "smooth", "smoothvar"
    )
    .unwrap();
    for r in rows {
        writeln!(
            out,
            "{:<15} {:<5} {:>9.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>8.2} {:>10.2}",
            r.variant.name(),
            r.split,
            r.ne,
            r.sr,
            r.osr,
            r.spl,
            r.ndtw,
            r.sdtw,
            r.smooth_mean,
            r.smooth_var
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::{Controller, EpisodeConfig};
    use crate::world::{generate_scene, WorldConfig};
    use std::io::Write as _;

    fn tempdir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    fn sample_episodes(n: u64) -> Vec<Episode> {
        let world = WorldConfig::default();
        let cfg = EpisodeConfig::default();
        (0..n)
            .map(|i| {
                let difficulty = if i % 2 == 0 {
                    Difficulty::Easy
                } else {
                    Difficulty::Hard
                };
                let scene = generate_scene(&world, 100 + i, difficulty);
                crate::episode::run_episode(
                    &scene,
                    SplitLabel {
                        exposure: Exposure::Unseen,
                        difficulty,
                    },
                    &Controller::Oracle { world: &world },
                    &cfg,
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn episode_save_load_save_byte_identical() {
        let dir = tempdir();
        let eps = sample_episodes(4);
        let p1 = dir.path().join("a.txt");
        save_trajectories(&eps, &p1).unwrap();
        let loaded = load_trajectories(&p1).unwrap();
        let p2 = dir.path().join("b.txt");
        save_trajectories(&loaded, &p2).unwrap();
        assert_eq!(
            std::fs::read(&p1).unwrap(),
            std::fs::read(&p2).unwrap()
        );
        assert_eq!(loaded.len(), 4);
        for (a, b) in eps.iter().zip(&loaded) {
            assert_eq!(a.scene_seed, b.scene_seed);
            assert_eq!(a.states, b.states);
            assert_eq!(a.preds, b.preds);
            assert_eq!(a.success, b.success);
        }
    }

    #[test]
    fn empty_episode_list_is_header_only() {
        let dir = tempdir();
        let p = dir.path().join("empty.txt");
        save_trajectories(&[], &p).unwrap();
        assert_eq!(
            std::fs::read_to_string(&p).unwrap(),
            format!("{EPISODES_HEADER}\n")
        );
        assert!(load_trajectories(&p).unwrap().is_empty());
    }

    #[test]
    fn truncated_episode_file_names_last_good_line() {
        let dir = tempdir();
        let eps = sample_episodes(1);
        let p = dir.path().join("t.txt");
        save_trajectories(&eps, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let cut: Vec<&str> = text.lines().collect();
        let truncated = cut[..cut.len() - 2].join("\n");
        let p2 = dir.path().join("t2.txt");
        let mut f = std::fs::File::create(&p2).unwrap();
        write!(f, "{truncated}").unwrap();
        let err = load_trajectories(&p2).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("truncated") && msg.contains("last good line"), "{msg}");
    }

    #[test]
    fn unknown_field_rejected() {
        let dir = tempdir();
        let p = dir.path().join("u.txt");
        std::fs::write(
            &p,
            format!(
                "{EPISODES_HEADER}\nepisode seed=1 exposure=unseen difficulty=easy \
                 goal=0,0,0 success=1 wrong=3\nstep 0 0 0 0 0 0 0 0 0\nend\n"
            ),
        )
        .unwrap();
        let err = load_trajectories(&p).unwrap_err();
        assert!(err.to_string().contains("stop_step"), "{err}");
    }

    #[test]
    fn version_mismatch_rejected() {
        let dir = tempdir();
        let p = dir.path().join("v.txt");
        std::fs::write(&p, "geofuse-episodes v9\n").unwrap();
        assert!(matches!(
            load_trajectories(&p).unwrap_err(),
            Error::Version { .. }
        ));
    }

    #[test]
    fn checkpoint_round_trip_byte_identical() {
        let dir = tempdir();
        let fusion = G2raParams::init(G2raConfig::default(), 21).unwrap();
        let policy = PolicyParams::init(PolicyConfig::default(), 22);
        let p1 = dir.path().join("ck.txt");
        save_checkpoint(&p1, &fusion, &policy, Variant::Full).unwrap();
        let (f2, p2, v2) = load_checkpoint(&p1).unwrap();
        assert_eq!(v2, Variant::Full);
        let path2 = dir.path().join("ck2.txt");
        save_checkpoint(&path2, &f2, &p2, v2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&path2).unwrap());
        assert_eq!(fusion.w_o.value, f2.w_o.value);
        assert_eq!(policy.w1.value, p2.w1.value);
    }

    #[test]
    fn checkpoint_fixed_modes_survive() {
        let dir = tempdir();
        let mut fusion = G2raParams::init(G2raConfig::default(), 23).unwrap();
        fusion.fix_eta(0.0);
        fusion.fix_alpha(0.2).unwrap();
        let policy = PolicyParams::init(PolicyConfig::default(), 24);
        let p = dir.path().join("ck.txt");
        save_checkpoint(&p, &fusion, &policy, Variant::Concat).unwrap();
        let (f2, _, v) = load_checkpoint(&p).unwrap();
        assert_eq!(v, Variant::Concat);
        assert_eq!(f2.eta_mode, ScalarMode::Fixed(0.0));
        assert_eq!(f2.alpha_mode, ScalarMode::Fixed(0.2));
        assert_eq!(f2.eta_value(), 0.0);
        assert!((f2.gate() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_truncation_detected() {
        let dir = tempdir();
        let fusion = G2raParams::init(G2raConfig::default(), 25).unwrap();
        let policy = PolicyParams::init(PolicyConfig::default(), 26);
        let text = checkpoint_to_string(&fusion, &policy, Variant::Full);
        let cut: Vec<&str> = text.lines().collect();
        let p = dir.path().join("cut.txt");
        std::fs::write(&p, cut[..cut.len() / 2].join("\n")).unwrap();
        assert!(load_checkpoint(&p).is_err());
    }

    #[test]
    fn scene_round_trip() {
        let dir = tempdir();
        let world = WorldConfig::default();
        let scenes: Vec<SceneSpec> = (0..3)
            .map(|i| generate_scene(&world, i, Difficulty::Hard))
            .collect();
        let p = dir.path().join("scenes.txt");
        save_scenes(&scenes, &p).unwrap();
        let loaded = load_scenes(&p).unwrap();
        assert_eq!(scenes, loaded);
        let p2 = dir.path().join("scenes2.txt");
        save_scenes(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn sweep_round_trip_lossless() {
        let dir = tempdir();
        let rows: Vec<SweepRow> = (0..4)
            .map(|i| SweepRow {
                id: i + 1,
                eta: 0.5 * i as f64,
                alpha: 0.2,
                split: "full".into(),
                ne: 87.82 + i as f64 * 0.311,
                sr: 25.46,
                osr: 44.41,
                spl: 21.76,
                best: i == 0,
            })
            .collect();
        let p = dir.path().join("sweep.tsv");
        save_sweep(&rows, &p).unwrap();
        let loaded = load_sweep(&p).unwrap();
        assert_eq!(rows, loaded);
        let p2 = dir.path().join("sweep2.tsv");
        save_sweep(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }
}
