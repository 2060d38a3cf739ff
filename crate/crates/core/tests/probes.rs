//! Information-content probes of the two encoders, plus harness sanity
//! runs that depend on the scripted oracle.
//!
//! The load-bearing claim: landmark range must be linearly unrecoverable
//! from the 2-D tokens (they carry bearings only) while the 3-D tokens
//! expose it almost perfectly. The probe fits ridge regression on half
//! the samples and scores held-out R-squared on the other half.

use rand::Rng;

use geofuse::config::RunConfig;
use geofuse::episode::{run_episode, start_pose, Controller, Exposure, SplitLabel};
use geofuse::fusion::{fuse_variant, G2raParams, Variant};
use geofuse::metrics::success_rate;
use geofuse::rng::chacha;
use geofuse::tensor::TokenMatrix;
use geofuse::world::{
    dist3, encode_2d, encode_3d, generate_scene, Difficulty, EncoderConfig, Landmark, SceneSpec,
    WorldBounds, WorldConfig,
};

/// Dense symmetric solve via Gaussian elimination with partial pivoting.
fn solve(a: &mut Vec<Vec<f64>>, b: &mut Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| a[x][col].abs().partial_cmp(&a[y][col].abs()).unwrap())
            .unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        let p = a[col][col];
        for r in col + 1..n {
            let f = a[r][col] / p;
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let mut acc = b[r];
        for c in r + 1..n {
            acc -= a[r][c] * x[c];
        }
        x[r] = acc / a[r][r];
    }
    x
}

/// Held-out R-squared of ridge regression from token features to targets.
fn probe_r2(features: &[Vec<f64>], targets: &[f64]) -> f64 {
    let half = features.len() / 2;
    let dim = features[0].len();
    let mut gram = vec![vec![0.0; dim]; dim];
    let mut rhs = vec![0.0; dim];
    for (f, &y) in features[..half].iter().zip(&targets[..half]) {
        for i in 0..dim {
            for j in 0..dim {
                gram[i][j] += f[i] * f[j];
            }
            rhs[i] += f[i] * y;
        }
    }
    for (i, row) in gram.iter_mut().enumerate() {
        row[i] += 1e-6;
    }
    let beta = solve(&mut gram, &mut rhs);

    let test_y = &targets[half..];
    let mean: f64 = test_y.iter().sum::<f64>() / test_y.len() as f64;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for (f, &y) in features[half..].iter().zip(test_y) {
        let pred: f64 = f.iter().zip(&beta).map(|(x, b)| x * b).sum();
        ss_res += (y - pred) * (y - pred);
        ss_tot += (y - mean) * (y - mean);
    }
    1.0 - ss_res / ss_tot
}

/// Single-landmark scenes make the token-to-landmark pairing unambiguous:
/// every nonzero 2-D token row and every landmark-slot 3-D row encode that
/// one landmark.
fn single_landmark_samples(
    enc: &EncoderConfig,
    n: usize,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = chacha(0xbeef);
    let mut feats_2d = Vec::new();
    let mut feats_3d = Vec::new();
    let mut ranges = Vec::new();
    let mut seed = 0u64;
    while ranges.len() < n {
        seed += 1;
        let pos = [
            rng.gen_range(-150.0..150.0),
            rng.gen_range(-150.0..150.0),
            rng.gen_range(20.0..100.0),
        ];
        let dir = {
            let z: f64 = rng.gen_range(-0.9..0.9);
            let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let r = (1.0 - z * z).sqrt();
            [r * phi.cos(), r * phi.sin(), z]
        };
        let range = rng.gen_range(15.0..280.0);
        let lm = [
            pos[0] + dir[0] * range,
            pos[1] + dir[1] * range,
            pos[2] + dir[2] * range,
        ];
        let scene = SceneSpec {
            seed,
            difficulty: Difficulty::Easy,
            bounds: WorldBounds::default(),
            start: pos,
            goal: [0.0, 0.0, 60.0],
            landmarks: vec![Landmark {
                position: lm,
                category: rng.gen_range(0..12),
            }],
        };
        let pose = geofuse::episode::Pose::at(pos, rng.gen_range(-3.0..3.0));
        let t2 = encode_2d(&scene, &pose, enc);
        let row2 = (0..t2.rows()).find(|&r| t2.row(r).iter().any(|&v| v != 0.0));
        let Some(row2) = row2 else { continue };
        let t3 = encode_3d(&scene, &pose, enc);
        feats_2d.push(t2.row(row2).to_vec());
        feats_3d.push(t3.row(enc.goal_tokens).to_vec());
        ranges.push(range);
    }
    (feats_2d, feats_3d, ranges)
}

#[test]
fn range_is_absent_from_2d_and_present_in_3d() {
    let mut enc = EncoderConfig::default();
    enc.sigma_2d = 0.0;
    enc.sigma_3d = 0.0;
    let (f2, f3, ranges) = single_landmark_samples(&enc, 3000);
    let r2_2d = probe_r2(&f2, &ranges);
    let r2_3d = probe_r2(&f3, &ranges);
    println!("range probe: 2-D R^2 {r2_2d:.4}, 3-D R^2 {r2_3d:.4}");
    assert!(r2_2d < 0.05, "2-D tokens leak range: R^2 {r2_2d}");
    assert!(r2_3d > 0.9, "3-D tokens hide range: R^2 {r2_3d}");
}

#[test]
fn oracle_policy_clears_easy_split() {
    let cfg = RunConfig::default();
    let trajs: Vec<_> = (0..60)
        .map(|i| {
            let scene = generate_scene(&cfg.world, 50_000 + i, Difficulty::Easy);
            let ep = run_episode(
                &scene,
                SplitLabel {
                    exposure: Exposure::Unseen,
                    difficulty: Difficulty::Easy,
                },
                &Controller::Oracle { world: &cfg.world },
                &cfg.episode,
            )
            .unwrap();
            ep.trajectory()
        })
        .collect();
    let sr = success_rate(&trajs).unwrap();
    assert!(sr > 95.0, "oracle SR on easy split {sr}");
}

#[test]
fn two_d_variant_blind_to_3d_noise_seed() {
    let cfg = RunConfig::default();
    let scene = generate_scene(&cfg.world, 321, Difficulty::Easy);
    let pose = start_pose(&scene);
    let params = G2raParams::init(cfg.fusion, 5).unwrap();
    let f2d = encode_2d(&scene, &pose, &cfg.encoders);
    let mut other = cfg.encoders.clone();
    other.noise_seed_3d = 999;
    let a = fuse_variant(
        Variant::TwoDOnly,
        &f2d,
        &encode_3d(&scene, &pose, &cfg.encoders),
        &params,
    )
    .unwrap();
    let b = fuse_variant(
        Variant::TwoDOnly,
        &f2d,
        &encode_3d(&scene, &pose, &other),
        &params,
    )
    .unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn goal_structure_flows_only_through_3d_stream() {
    // moving the goal changes 3-D tokens but never 2-D tokens
    let mut enc = EncoderConfig::default();
    enc.sigma_2d = 0.0;
    enc.sigma_3d = 0.0;
    let world = WorldConfig::default();
    let scene = generate_scene(&world, 808, Difficulty::Easy);
    let pose = start_pose(&scene);
    let mut moved = scene.clone();
    moved.goal = [scene.goal[0] + 30.0, scene.goal[1] - 12.0, scene.goal[2]];
    assert_eq!(
        encode_2d(&scene, &pose, &enc).data(),
        encode_2d(&moved, &pose, &enc).data()
    );
    assert_ne!(
        encode_3d(&scene, &pose, &enc).data(),
        encode_3d(&moved, &pose, &enc).data()
    );
    assert!(dist3(scene.goal, moved.goal) > 1.0);
    let _: &TokenMatrix = &encode_2d(&scene, &pose, &enc);
}
