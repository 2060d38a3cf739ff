//! Synthetic stand-in encoders for the two token streams.
//!
//! The 2-D encoder views the scene through five cameras (front, rear,
//! left, right, down) and emits per-view tokens carrying the body-frame
//! *bearing* and category of angularly close landmarks. Distance along a
//! bearing never enters the features, so the 2-D stream is depth-blind by
//! construction. The 3-D encoder emits tokens carrying pose-relative
//! offsets (including range) to the goal and to landmarks, so geometric
//! structure is recoverable from it. Both streams pass through fixed
//! seeded random projections and optional Gaussian noise.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rand_distr::{Distribution, Normal};

use crate::rng::{chacha, hash_f64, mix};
use crate::tensor::{matmul, TokenMatrix};
use crate::world::{norm3, scale3, sub3, SceneSpec};

const PROJ_2D_STREAM: u64 = 0x2d_0001;
const PROJ_3D_STREAM: u64 = 0x3d_0001;
const NOISE_2D_STREAM: u64 = 0x2d_0002;
const NOISE_3D_STREAM: u64 = 0x3d_0002;

/// Weight of the goal-flag feature; large enough that goal and landmark
/// keys separate under the random projection.
const GOAL_FLAG_SCALE: f64 = 5.0;

pub const VIEWS: usize = 5;
pub const VIEW_NAMES: [&str; VIEWS] = ["front", "rear", "left", "right", "down"];

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub d_clip: usize,
    pub d_agg: usize,
    pub tokens_per_view: usize,
    pub n_3d_tokens: usize,
    /// Leading 3-D tokens that carry the goal offset.
    pub goal_tokens: usize,
    pub categories: u32,
    /// Cosine of the per-view visibility cone half-angle.
    pub view_cone_cos: f64,
    /// Offsets and ranges are divided by this before embedding.
    pub offset_scale: f64,
    pub sigma_2d: f64,
    pub sigma_3d: f64,
    pub noise_seed_2d: u64,
    pub noise_seed_3d: u64,
    /// Seed of the fixed random feature projections.
    pub projection_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_clip: 96,
            d_agg: 128,
            tokens_per_view: 8,
            n_3d_tokens: 60,
            goal_tokens: 12,
            categories: 12,
            view_cone_cos: 0.25,
            offset_scale: 100.0,
            sigma_2d: 0.5,
            sigma_3d: 0.05,
            noise_seed_2d: 0,
            noise_seed_3d: 0,
            projection_seed: 0x6e0c0de,
        }
    }
}

impl EncoderConfig {
    pub fn n_2d_tokens(&self) -> usize {
        VIEWS * self.tokens_per_view
    }

    /// 2-D feature width: one bearing block per category.
    pub fn feat_2d(&self) -> usize {
        self.categories as usize * 4
    }

    /// 3-D feature width: offset, range, unit bearing, goal flag,
    /// category one-hot, bias.
    pub fn feat_3d(&self) -> usize {
        4 + 3 + 1 + self.categories as usize + 1
    }
}

fn pose_key(pose: &crate::episode::Pose) -> u64 {
    mix(&[
        hash_f64(pose.x),
        hash_f64(pose.y),
        hash_f64(pose.z),
        hash_f64(pose.yaw),
    ])
}

/// Fixed random projection for the 2-D stream (feat_2d x d_clip).
pub fn projection_2d(cfg: &EncoderConfig) -> Arc<TokenMatrix> {
    random_projection(
        mix(&[PROJ_2D_STREAM, cfg.projection_seed]),
        cfg.feat_2d(),
        cfg.d_clip,
    )
}

/// Fixed random projection for the 3-D stream (feat_3d x d_agg).
pub fn projection_3d(cfg: &EncoderConfig) -> Arc<TokenMatrix> {
    random_projection(
        mix(&[PROJ_3D_STREAM, cfg.projection_seed]),
        cfg.feat_3d(),
        cfg.d_agg,
    )
}

// projections are pure functions of (seed, shape); memoized because the
// encoders run once per rollout step
fn random_projection(seed: u64, rows: usize, cols: usize) -> Arc<TokenMatrix> {
    static CACHE: OnceLock<Mutex<HashMap<(u64, usize, usize), Arc<TokenMatrix>>>> =
        OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(hit) = cache.lock().unwrap().get(&(seed, rows, cols)) {
        return Arc::clone(hit);
    }
    let mut rng = chacha(seed);
    let normal = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).unwrap();
    let m = Arc::new(TokenMatrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| normal.sample(&mut rng)).collect(),
    ));
    cache
        .lock()
        .unwrap()
        .insert((seed, rows, cols), Arc::clone(&m));
    m
}

fn add_noise(tokens: &mut TokenMatrix, sigma: f64, seed: u64) {
    if sigma <= 0.0 {
        return;
    }
    let mut rng = chacha(seed);
    let normal = Normal::new(0.0, sigma).unwrap();
    for v in tokens.data_mut() {
        *v += normal.sample(&mut rng);
    }
}

/// Rotates a world-frame vector into the body frame (yaw only; roll and
/// pitch stay zero under waypoint control).
fn to_body(v: [f64; 3], yaw: f64) -> [f64; 3] {
    let (s, c) = yaw.sin_cos();
    [c * v[0] + s * v[1], -s * v[0] + c * v[1], v[2]]
}

fn view_axes(yaw: f64) -> [[f64; 3]; VIEWS] {
    let (s, c) = yaw.sin_cos();
    [
        [c, s, 0.0],   // front
        [-c, -s, 0.0], // rear
        [-s, c, 0.0],  // left
        [s, -c, 0.0],  // right
        [0.0, 0.0, -1.0],
    ]
}

/// Five-view bearing/category tokens, depth-free by construction:
/// `VIEWS * tokens_per_view` rows of `d_clip` features.
pub fn encode_2d(
    scene: &SceneSpec,
    pose: &crate::episode::Pose,
    cfg: &EncoderConfig,
) -> TokenMatrix {
    let axes = view_axes(pose.yaw);
    let position = pose.position();
    let feat_w = cfg.feat_2d();
    let mut feats = TokenMatrix::zeros(cfg.n_2d_tokens(), feat_w);

    // unit bearings to landmarks; range deliberately discarded
    let bearings: Vec<Option<([f64; 3], u32)>> = scene
        .landmarks
        .iter()
        .map(|lm| {
            let d = sub3(lm.position, position);
            let n = norm3(d);
            if n < 1e-9 {
                None
            } else {
                Some((scale3(d, 1.0 / n), lm.category.min(cfg.categories - 1)))
            }
        })
        .collect();

    for (view, axis) in axes.iter().enumerate() {
        let mut visible: Vec<(usize, f64)> = bearings
            .iter()
            .enumerate()
            .filter_map(|(i, b)| {
                b.as_ref().and_then(|(u, _)| {
                    let cos = u[0] * axis[0] + u[1] * axis[1] + u[2] * axis[2];
                    (cos > cfg.view_cone_cos).then_some((i, cos))
                })
            })
            .collect();
        visible.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for (slot, (idx, _)) in visible.iter().take(cfg.tokens_per_view).enumerate() {
            let (u, cat) = bearings[*idx].unwrap();
            let ub = to_body(u, pose.yaw);
            let row = view * cfg.tokens_per_view + slot;
            let base = cat as usize * 4;
            feats.set(row, base, ub[0]);
            feats.set(row, base + 1, ub[1]);
            feats.set(row, base + 2, ub[2]);
            feats.set(row, base + 3, 1.0);
        }
    }

    let mut tokens = matmul(&feats, &*projection_2d(cfg)).expect("projection shape");
    add_noise(
        &mut tokens,
        cfg.sigma_2d,
        mix(&[NOISE_2D_STREAM, scene.seed, cfg.noise_seed_2d, pose_key(pose)]),
    );
    tokens
}

/// Pose-relative geometric tokens: the leading rows carry the goal offset,
/// the rest cycle through landmark offsets. Offsets are body-frame and
/// carry explicit range, so depth is recoverable from this stream.
pub fn encode_3d(
    scene: &SceneSpec,
    pose: &crate::episode::Pose,
    cfg: &EncoderConfig,
) -> TokenMatrix {
    let position = pose.position();
    let feat_w = cfg.feat_3d();
    let cats = cfg.categories as usize;
    let mut feats = TokenMatrix::zeros(cfg.n_3d_tokens, feat_w);

    let mut write = |row: usize, offset: [f64; 3], is_goal: bool, category: Option<u32>| {
        let ob = to_body(offset, pose.yaw);
        let s = 1.0 / cfg.offset_scale;
        let range = norm3(offset);
        feats.set(row, 0, ob[0] * s);
        feats.set(row, 1, ob[1] * s);
        feats.set(row, 2, ob[2] * s);
        feats.set(row, 3, range * s);
        if range > 1e-9 {
            feats.set(row, 4, ob[0] / range);
            feats.set(row, 5, ob[1] / range);
            feats.set(row, 6, ob[2] / range);
        }
        feats.set(row, 7, if is_goal { GOAL_FLAG_SCALE } else { 0.0 });
        if let Some(c) = category {
            feats.set(row, 8 + (c as usize).min(cats - 1), 1.0);
        }
        feats.set(row, 8 + cats, 1.0);
    };

    for row in 0..cfg.n_3d_tokens {
        if row < cfg.goal_tokens {
            write(row, sub3(scene.goal, position), true, None);
        } else if !scene.landmarks.is_empty() {
            let lm = &scene.landmarks[(row - cfg.goal_tokens) % scene.landmarks.len()];
            write(row, sub3(lm.position, position), false, Some(lm.category));
        }
    }

    let mut tokens = matmul(&feats, &*projection_3d(cfg)).expect("projection shape");
    add_noise(
        &mut tokens,
        cfg.sigma_3d,
        mix(&[NOISE_3D_STREAM, scene.seed, cfg.noise_seed_3d, pose_key(pose)]),
    );
    tokens
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::Pose;
    use crate::world::{dist3, generate_scene, Difficulty, Landmark, WorldConfig};


    fn start_pose(scene: &SceneSpec) -> Pose {
        Pose {
            x: scene.start[0],
            y: scene.start[1],
            z: scene.start[2],
            roll: 0.0,
            pitch: 0.0,
            yaw: 0.3,
        }
    }

    #[test]
    fn two_d_token_count_fixed() {
        let cfg = EncoderConfig::default();
        let scene = generate_scene(&WorldConfig::default(), 5, Difficulty::Easy);
        let t = encode_2d(&scene, &start_pose(&scene), &cfg);
        assert_eq!((t.rows(), t.cols()), (40, 96));
    }

    #[test]
    fn three_d_token_count_fixed() {
        let cfg = EncoderConfig::default();
        let scene = generate_scene(&WorldConfig::default(), 5, Difficulty::Hard);
        let t = encode_3d(&scene, &start_pose(&scene), &cfg);
        assert_eq!((t.rows(), t.cols()), (60, 128));
    }

    #[test]
    fn encoders_deterministic() {
        let cfg = EncoderConfig::default();
        let scene = generate_scene(&WorldConfig::default(), 6, Difficulty::Easy);
        let pose = start_pose(&scene);
        assert_eq!(
            encode_2d(&scene, &pose, &cfg).data(),
            encode_2d(&scene, &pose, &cfg).data()
        );
        assert_eq!(
            encode_3d(&scene, &pose, &cfg).data(),
            encode_3d(&scene, &pose, &cfg).data()
        );
    }

    #[test]
    fn two_d_ignores_landmark_range() {
        // two scenes whose landmarks differ only in distance along exact
        // integer bearings; noiseless tokens must match bit for bit
        let mut cfg = EncoderConfig::default();
        cfg.sigma_2d = 0.0;
        let pose = Pose::at([10.0, 20.0, 50.0], 0.0);
        let p = pose.position();
        let dirs: [[f64; 3]; 5] = [
            [3.0, 4.0, 0.0],
            [-5.0, 12.0, 0.0],
            [8.0, -6.0, 0.0],
            [-20.0, -21.0, 0.0],
            [7.0, 24.0, 0.0],
        ];
        let build = |scale: f64, seed: u64| SceneSpec {
            seed,
            difficulty: Difficulty::Easy,
            bounds: crate::world::WorldBounds::default(),
            start: p,
            goal: [100.0, 100.0, 50.0],
            landmarks: dirs
                .iter()
                .enumerate()
                .map(|(i, d)| Landmark {
                    position: [p[0] + scale * d[0], p[1] + scale * d[1], p[2] + scale * d[2]],
                    category: i as u32 % 12,
                })
                .collect(),
        };
        let near = build(1.0, 7);
        let far = build(2.0, 7);
        assert_eq!(
            encode_2d(&near, &pose, &cfg).data(),
            encode_2d(&far, &pose, &cfg).data()
        );
    }

    #[test]
    fn three_d_noiseless_goal_offset_recoverable() {
        // least-squares inversion of the fixed projection on a goal token
        let mut cfg = EncoderConfig::default();
        cfg.sigma_3d = 0.0;
        let world = WorldConfig::default();
        let scene = generate_scene(&world, 8, Difficulty::Easy);
        let pose = start_pose(&scene);
        let tokens = encode_3d(&scene, &pose, &cfg);
        let proj = projection_3d(&cfg);
        let proj = &*proj;

        // solve feats * proj = token for feats via normal equations
        let gram = crate::tensor::matmul_nt(proj, proj).unwrap();
        let rhs: Vec<f64> = (0..proj.rows())
            .map(|r| {
                proj.row(r)
                    .iter()
                    .zip(tokens.row(0))
                    .map(|(p, t)| p * t)
                    .sum()
            })
            .collect();
        let feats = solve(&gram, &rhs);

        let expected = to_body(sub3(scene.goal, pose.position()), pose.yaw);
        for i in 0..3 {
            let got = feats[i] * cfg.offset_scale;
            assert!(
                (got - expected[i]).abs() < 1e-6,
                "axis {i}: {got} vs {}",
                expected[i]
            );
        }
        let range = feats[3] * cfg.offset_scale;
        assert!((range - dist3(scene.goal, pose.position())).abs() < 1e-6);
    }

    /// Dense Gaussian elimination with partial pivoting (test-only).
    fn solve(a: &TokenMatrix, b: &[f64]) -> Vec<f64> {
        let n = a.rows();
        let mut m: Vec<Vec<f64>> = (0..n)
            .map(|r| {
                let mut row = a.row(r).to_vec();
                row.push(b[r]);
                row
            })
            .collect();
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&x, &y| m[x][col].abs().partial_cmp(&m[y][col].abs()).unwrap())
                .unwrap();
            m.swap(col, pivot);
            let p = m[col][col];
            for r in col + 1..n {
                let f = m[r][col] / p;
                for c in col..=n {
                    m[r][c] -= f * m[col][c];
                }
            }
        }
        let mut x = vec![0.0; n];
        for r in (0..n).rev() {
            let mut acc = m[r][n];
            for c in r + 1..n {
                acc -= m[r][c] * x[c];
            }
            x[r] = acc / m[r][r];
        }
        x
    }

    #[test]
    fn degenerate_coincident_landmark_skipped() {
        let cfg = EncoderConfig::default();
        let world = WorldConfig::default();
        let mut scene = generate_scene(&world, 9, Difficulty::Easy);
        let pose = start_pose(&scene);
        scene.landmarks.push(Landmark {
            position: pose.position(),
            category: 0,
        });
        let t = encode_2d(&scene, &pose, &cfg);
        assert!(t.all_finite());
    }
}
