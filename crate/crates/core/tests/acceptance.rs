//! End-to-end acceptance suite.
//!
//! One test per criterion; each prints a single PASS line with the
//! measured numbers once its assertions hold. The directional run trains
//! every fusion variant at the shipped default configuration, so this
//! suite is the expensive part of `cargo test`.

use std::time::Instant;

use rand::Rng;

use geofuse::commands::{
    cmd_ablate, cmd_eval, cmd_gradcheck, cmd_metrics, cmd_sweep, cmd_train,
    gradcheck_with_corruption,
};
use geofuse::config::RunConfig;
use geofuse::episode::{is_success, start_pose};
use geofuse::fusion::{g2ra_forward, G2raParams, Variant};
use geofuse::io::load_sweep;
use geofuse::metrics::{
    dtw, navigation_error, oracle_success_rate, smoothness, spl, success_rate, Trajectory,
};
use geofuse::rng::chacha;
use geofuse::tensor::TokenMatrix;
use geofuse::world::{dist3, encode_2d, encode_3d, generate_scene, Difficulty};

fn default_config(out: &std::path::Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.out_dir = out.to_path_buf();
    cfg
}

/// Gradient fidelity: the whole-pipeline check at the small verification
/// dims passes under the stated tolerance for every parameter, within the
/// single-core time budget.
#[test]
fn acceptance_gradient_fidelity() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = default_config(dir.path());
    assert_eq!(
        (cfg.gradcheck.d, cfg.gradcheck.heads, cfg.gradcheck.n_2d, cfg.gradcheck.n_3d),
        (16, 4, 8, 12)
    );
    let start = Instant::now();
    let report = cmd_gradcheck(&cfg).unwrap();
    let elapsed = start.elapsed();
    for p in &report.params {
        assert!(
            p.max_rel_err < 1e-4,
            "{} rel err {:.3e}",
            p.name,
            p.max_rel_err
        );
    }
    // every fusion and head parameter appears exactly once
    let mut names: Vec<&str> = report.params.iter().map(|p| p.name.as_str()).collect();
    let total = names.len();
    names.sort_unstable();
    names.dedup();
    assert_eq!(names.len(), total, "duplicate parameter rows");
    for expected in ["w_q_base", "w_k", "b_k", "w_v", "b_v", "psi_w1", "psi_w2", "w_o", "eta", "alpha_logit", "policy_w1", "policy_w2"] {
        assert!(names.contains(&expected), "missing {expected}");
    }
    assert!(
        elapsed.as_secs() < 60,
        "gradcheck took {:?}, budget 60 s",
        elapsed
    );

    // a corrupted backward rule must be caught and named
    let corrupted = gradcheck_with_corruption(&cfg, Some("w_o")).unwrap();
    assert!(!corrupted.passed());
    let flagged: Vec<&str> = corrupted
        .params
        .iter()
        .filter(|p| p.max_rel_err >= corrupted.tolerance)
        .map(|p| p.name.as_str())
        .collect();
    assert_eq!(flagged, vec!["w_o"]);

    println!(
        "ACCEPT gradient-fidelity: PASS (worst rel err {:.3e} over {} params, {:.2} s; fault injection flags w_o)",
        report.worst(),
        report.params.len(),
        elapsed.as_secs_f64()
    );
}

/// Algebraic identities of the fusion mechanism at the toy default dims,
/// on real encoder inputs.
#[test]
fn acceptance_algebraic_identities() {
    let cfg = RunConfig::default();
    let scene = generate_scene(&cfg.world, 4242, Difficulty::Easy);
    let pose = start_pose(&scene);
    let f2d = encode_2d(&scene, &pose, &cfg.encoders);
    let f3d = encode_3d(&scene, &pose, &cfg.encoders);
    let mut params = G2raParams::init(cfg.fusion, 99).unwrap();

    // zero injection strength leaves the queries bit-identical
    params.eta.value[0] = 0.0;
    let t = g2ra_forward(&f2d, &f3d, &params).unwrap();
    assert_eq!(t.q_inj().data(), t.q_base.data());
    params.eta.value[0] = 0.5;

    // gate endpoints collapse the fusion to either branch
    params.alpha_logit.value[0] = -40.0;
    let t0 = g2ra_forward(&f2d, &f3d, &params).unwrap();
    for (f, q) in t0.f_fuse().data().iter().zip(t0.q_base.data()) {
        assert!((f - q).abs() < 1e-12);
    }
    params.alpha_logit.value[0] = 40.0;
    let t1 = g2ra_forward(&f2d, &f3d, &params).unwrap();
    for (f, a) in t1.f_fuse().data().iter().zip(t1.f_align().data()) {
        assert!((f - a).abs() < 1e-12);
    }
    params.alpha_logit.value[0] = 0.0;

    // permuting geometric tokens leaves the output unchanged
    let base = g2ra_forward(&f2d, &f3d, &params).unwrap();
    let rows: Vec<Vec<f64>> = (0..f3d.rows()).rev().map(|r| f3d.row(r).to_vec()).collect();
    let perm = g2ra_forward(&f2d, &TokenMatrix::from_rows(&rows), &params).unwrap();
    let mut worst: f64 = 0.0;
    for (a, b) in base.f_fuse().data().iter().zip(perm.f_fuse().data()) {
        worst = worst.max((a - b).abs());
    }
    assert!(worst < 1e-10, "geometry permutation moved output by {worst:e}");

    // permuting query tokens permutes the output rows identically
    let order: Vec<usize> = (0..f2d.rows()).rev().collect();
    let prows: Vec<Vec<f64>> = order.iter().map(|&r| f2d.row(r).to_vec()).collect();
    let pq = g2ra_forward(&TokenMatrix::from_rows(&prows), &f3d, &params).unwrap();
    for (new_r, &old_r) in order.iter().enumerate() {
        assert_eq!(pq.f_fuse().row(new_r), base.f_fuse().row(old_r));
    }

    // attention rows are distributions; the scale stays in (0,1)
    for h in 0..cfg.fusion.heads {
        let attn = base.attention(h);
        for r in 0..attn.rows() {
            let sum: f64 = attn.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }
    assert!(base
        .gamma_tilde()
        .data()
        .iter()
        .all(|&g| g > 0.0 && g < 1.0));

    println!(
        "ACCEPT algebraic-identities: PASS (geometry-permutation deviation {worst:.2e})"
    );
}

/// Exhaustive warping-path enumeration, accumulating costs in the same
/// association order as the dynamic program so agreement is exact.
fn brute_dtw(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    fn go(a: &[[f64; 3]], b: &[[f64; 3]], i: usize, j: usize, acc: f64, best: &mut f64) {
        let acc = dist3(a[i], b[j]) + acc;
        if i == a.len() - 1 && j == b.len() - 1 {
            if acc < *best {
                *best = acc;
            }
            return;
        }
        if i + 1 < a.len() {
            go(a, b, i + 1, j, acc, best);
        }
        if j + 1 < b.len() {
            go(a, b, i, j + 1, acc, best);
        }
        if i + 1 < a.len() && j + 1 < b.len() {
            go(a, b, i + 1, j + 1, acc, best);
        }
    }
    let mut best = f64::INFINITY;
    go(a, b, 0, 0, 0.0, &mut best);
    best
}

#[test]
fn acceptance_metric_oracles() {
    // dynamic program equals exhaustive enumeration exactly
    let mut rng = chacha(2024);
    for _ in 0..100 {
        let n = rng.gen_range(1..=5);
        let m = rng.gen_range(1..=5);
        let mk = |rng: &mut rand_chacha::ChaCha8Rng, k: usize| -> Vec<[f64; 3]> {
            (0..k)
                .map(|_| {
                    [
                        rng.gen_range(-50.0..50.0),
                        rng.gen_range(-50.0..50.0),
                        rng.gen_range(0.0..30.0),
                    ]
                })
                .collect()
        };
        let a = mk(&mut rng, n);
        let b = mk(&mut rng, m);
        let dp = dtw(&a, &b).unwrap();
        let brute = brute_dtw(&a, &b);
        assert_eq!(dp, brute, "dp {dp} vs brute {brute}");
    }

    // dominance relations on randomized episode sets
    let mut rng = chacha(77);
    for _ in 0..1000 {
        let k = rng.gen_range(1..=8);
        let mut trajs = Vec::with_capacity(k);
        let mut ndtw_sum = 0.0;
        let mut sdtw_sum = 0.0;
        for _ in 0..k {
            let len = rng.gen_range(1..=10);
            let mut p = [
                rng.gen_range(-100.0..100.0),
                rng.gen_range(-100.0..100.0),
                rng.gen_range(0.0..60.0),
            ];
            let mut points = vec![p];
            for _ in 1..len {
                for c in p.iter_mut() {
                    *c += rng.gen_range(-5.0..5.0);
                }
                points.push(p);
            }
            let goal = [
                rng.gen_range(-100.0..100.0),
                rng.gen_range(-100.0..100.0),
                rng.gen_range(0.0..60.0),
            ];
            let success = is_success(*points.last().unwrap(), goal);
            let start = points[0];
            let reference: Vec<[f64; 3]> =
                (0..rng.gen_range(2..=6)).map(|_| [rng.gen_range(-100.0..100.0), 0.0, 10.0]).collect();
            let t = Trajectory {
                points,
                goal,
                success,
                shortest_path_length: dist3(start, goal),
            };
            ndtw_sum += geofuse::metrics::ndtw(&t, &reference).unwrap();
            sdtw_sum += geofuse::metrics::sdtw(&t, &reference).unwrap();
            trajs.push(t);
        }
        let sr = success_rate(&trajs).unwrap();
        let osr = oracle_success_rate(&trajs).unwrap();
        let spl_v = spl(&trajs).unwrap();
        assert!(sr <= osr + 1e-12);
        assert!(spl_v <= sr + 1e-12);
        assert!(sdtw_sum <= ndtw_sum + 1e-12);
    }

    // straight lines have exactly zero turning statistics; dyadic spacing
    // keeps consecutive displacements bitwise equal
    let mut rng = chacha(31);
    for _ in 0..50 {
        let d = [
            rng.gen_range(-64..=64i32) as f64 / 64.0 * 4.0,
            rng.gen_range(-64..=64i32) as f64 / 64.0 * 4.0,
            rng.gen_range(-16..=16i32) as f64 / 64.0 * 4.0,
        ];
        if d.iter().all(|v| v.abs() < 1e-3) {
            continue;
        }
        let mut p = [0.0, 0.0, 16.0];
        let mut points = vec![p];
        for _ in 0..6 {
            p = [p[0] + d[0], p[1] + d[1], p[2] + d[2]];
            points.push(p);
        }
        let t = Trajectory {
            points,
            goal: p,
            success: true,
            shortest_path_length: 1.0,
        };
        let (mean, var) = smoothness(&t).unwrap();
        assert_eq!((mean, var), (0.0, 0.0));
    }

    // success threshold boundary: strictly inside 20 m counts, 20 m does not
    assert!(is_success([19.99, 0.0, 0.0], [0.0; 3]));
    assert!(!is_success([20.0, 0.0, 0.0], [0.0; 3]));
    let near = Trajectory {
        points: vec![[100.0, 0.0, 0.0], [19.99, 0.0, 0.0]],
        goal: [0.0; 3],
        success: true,
        shortest_path_length: 100.0,
    };
    let at = Trajectory {
        points: vec![[100.0, 0.0, 0.0], [20.0, 0.0, 0.0]],
        goal: [0.0; 3],
        success: false,
        shortest_path_length: 100.0,
    };
    assert_eq!(success_rate(&[near.clone()]).unwrap(), 100.0);
    assert_eq!(success_rate(&[at.clone()]).unwrap(), 0.0);
    assert_eq!(navigation_error(&at), 20.0);
    assert_eq!(oracle_success_rate(&[near]).unwrap(), 100.0);
    assert_eq!(oracle_success_rate(&[at]).unwrap(), 0.0);

    println!("ACCEPT metric-oracles: PASS (100 exact DTW agreements, 1000 dominance sets, exact straight-line smoothness, 19.99/20.0 boundary)");
}

/// Directional mechanism claim: at the shipped defaults (200 held-out
/// episodes per split, 3 seed replicates), the full mechanism strictly
/// beats concat fusion and the 2-D-only branch on SR and NE, and is at
/// least as good as the no-injection variant on SR.
#[test]
fn acceptance_directional_mechanism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = default_config(dir.path());
    assert_eq!(cfg.eval.episodes_easy, 200);
    assert_eq!(cfg.eval.episodes_hard, 200);
    assert_eq!(cfg.ablate.replicates, 3);

    let start = Instant::now();
    let out = cmd_ablate(&cfg).unwrap();
    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs() <= 30 * 60,
        "ablation took {:?}, budget 30 min",
        elapsed
    );

    let full_row = |v: Variant| {
        out.rows
            .iter()
            .find(|r| r.variant == v && r.split == "full")
            .unwrap()
    };
    let full = full_row(Variant::Full);
    let concat = full_row(Variant::Concat);
    let two_d = full_row(Variant::TwoDOnly);
    let no_geo = full_row(Variant::NoGeoInject);

    assert!(full.sr > concat.sr, "SR: full {} vs concat {}", full.sr, concat.sr);
    assert!(full.sr > two_d.sr, "SR: full {} vs 2d {}", full.sr, two_d.sr);
    assert!(full.ne < concat.ne, "NE: full {} vs concat {}", full.ne, concat.ne);
    assert!(full.ne < two_d.ne, "NE: full {} vs 2d {}", full.ne, two_d.ne);
    assert!(
        full.sr >= no_geo.sr,
        "SR: full {} vs no-inject {}",
        full.sr,
        no_geo.sr
    );

    // the orderings also hold replicate by replicate
    for seed_off in 0..cfg.ablate.replicates {
        let seed = cfg.seed + seed_off;
        let get = |v: Variant| {
            &out.runs
                .iter()
                .find(|r| r.variant == v && r.seed == seed)
                .unwrap()
                .report
                .full
        };
        let (f, c, t) = (get(Variant::Full), get(Variant::Concat), get(Variant::TwoDOnly));
        assert!(f.sr > c.sr && f.sr > t.sr, "seed {seed} SR ordering");
        assert!(f.ne_mean < c.ne_mean && f.ne_mean < t.ne_mean, "seed {seed} NE ordering");
    }

    // training made progress: full-variant train loss drops from epoch 1
    // to epoch 10 in every replicate
    for run in out.runs.iter().filter(|r| r.variant == Variant::Full) {
        let train_loss = |epoch: usize| {
            run.log
                .iter()
                .find(|row| row.epoch == epoch && row.split == "train")
                .unwrap()
                .loss
        };
        assert!(
            train_loss(9) < train_loss(0),
            "seed {}: loss epoch10 {} !< epoch1 {}",
            run.seed,
            train_loss(9),
            train_loss(0)
        );
    }

    println!(
        "ACCEPT directional-mechanism: PASS in {:.1} min (full SR {:.2} NE {:.2} | no_geo_inject SR {:.2} | concat SR {:.2} NE {:.2} | two_d_only SR {:.2} NE {:.2})",
        elapsed.as_secs_f64() / 60.0,
        full.sr,
        full.ne,
        no_geo.sr,
        concat.sr,
        concat.ne,
        two_d.sr,
        two_d.ne
    );
}

/// Sweep mechanics: the default 3x3 grid trains one cell per pair, emits
/// every metric per split, flags a best cell, and the zero-injection
/// column's injection-difference maps are identically zero.
#[test]
fn acceptance_sweep_mechanics() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = default_config(dir.path());
    // cells stay tiny here; the grid structure is what is under test
    cfg.train.epochs = 2;
    cfg.train.train_easy = 6;
    cfg.train.train_hard = 2;
    cfg.train.val_easy = 0;
    cfg.train.val_hard = 0;
    cfg.eval.episodes_easy = 12;
    cfg.eval.episodes_hard = 12;
    assert_eq!(cfg.sweep.etas, vec![0.0, 0.5, 1.0]);
    assert_eq!(cfg.sweep.alphas, vec![0.2, 0.5, 0.8]);

    let out = cmd_sweep(&cfg).unwrap();
    let ids: std::collections::BTreeSet<usize> = out.rows.iter().map(|r| r.id).collect();
    assert_eq!(ids.len(), 9, "nine grid cells");
    for id in 1..=9 {
        let splits: Vec<&str> = out
            .rows
            .iter()
            .filter(|r| r.id == id)
            .map(|r| r.split.as_str())
            .collect();
        assert!(splits.contains(&"full") && splits.contains(&"easy") && splits.contains(&"hard"));
    }
    let best_ids: std::collections::BTreeSet<usize> = out
        .rows
        .iter()
        .filter(|r| r.best)
        .map(|r| r.id)
        .collect();
    assert_eq!(best_ids.len(), 1, "exactly one best cell");

    // zero injection strength: the injection stage is the identity, so its
    // response-difference map vanishes identically
    let mut checked = 0;
    for (id, maps) in &out.response_maps {
        let row = out.rows.iter().find(|r| r.id == *id).unwrap();
        if row.eta == 0.0 {
            let gpi = maps.iter().find(|m| m.name == "delta_gpi").unwrap();
            assert!(gpi.values.iter().all(|&v| v == 0.0), "cell {id}");
            checked += 1;
        }
    }
    assert_eq!(checked, 3, "three zero-injection cells");

    // the grid report round-trips losslessly
    let loaded = load_sweep(&dir.path().join("sweep.tsv")).unwrap();
    assert_eq!(loaded, out.rows);

    // out-of-range gate values are rejected outright
    let mut bad = cfg.clone();
    bad.sweep.alphas = vec![0.2, 1.0];
    assert!(cmd_sweep(&bad).is_err());

    println!(
        "ACCEPT sweep-mechanics: PASS (9 cells, best at eta {} alpha {}, zero-injection maps all zero, lossless round trip)",
        out.best.0, out.best.1
    );
}

/// Determinism: rerunning any command with the same config and seeds
/// reproduces byte-identical artifacts.
#[test]
fn acceptance_determinism() {
    let base = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.train.epochs = 2;
    cfg.train.train_easy = 4;
    cfg.train.train_hard = 2;
    cfg.train.val_easy = 2;
    cfg.train.val_hard = 0;
    cfg.eval.episodes_easy = 6;
    cfg.eval.episodes_hard = 6;
    cfg.ablate.replicates = 1;
    cfg.sweep.etas = vec![0.0, 0.5];
    cfg.sweep.alphas = vec![0.5];

    let read = |p: &std::path::Path| std::fs::read(p).unwrap();
    let run_all = |tag: &str| {
        let root = base.path().join(tag);
        let mut c = cfg.clone();

        c.out_dir = root.join("train");
        cmd_train(&c).unwrap();
        c.out_dir = root.join("eval");
        cmd_eval(&c, Some(&root.join("train/checkpoint.txt"))).unwrap();
        c.out_dir = root.join("gc");
        let gc = cmd_gradcheck(&c).unwrap();
        c.out_dir = root.join("ablate");
        cmd_ablate(&c).unwrap();
        c.out_dir = root.join("sweep");
        cmd_sweep(&c).unwrap();
        c.out_dir = root.join("resp");
        geofuse::commands::cmd_dump_responses(
            &c,
            &root.join("train/checkpoint.txt"),
            4242,
            Difficulty::Easy,
        )
        .unwrap();
        c.out_dir = root.join("metrics");
        cmd_metrics(&c, &[root.join("eval/episodes.txt")]).unwrap();
        (root, gc)
    };

    let (a, gc_a) = run_all("a");
    let (b, gc_b) = run_all("b");
    assert_eq!(gc_a, gc_b);
    for rel in [
        "train/checkpoint.txt",
        "train/train_log.tsv",
        "eval/episodes.txt",
        "eval/scenes.txt",
        "eval/report.tsv",
        "eval/report.txt",
        "ablate/ablation.tsv",
        "sweep/sweep.tsv",
        "sweep/sweep_grid_sr.tsv",
        "sweep/cell01/response_delta_gpi.tsv",
        "resp/response_f_fuse.tsv",
        "metrics/report.tsv",
    ] {
        assert_eq!(read(&a.join(rel)), read(&b.join(rel)), "{rel} differs");
    }

    // saved episodes recompute to the identical report
    assert_eq!(
        read(&a.join("eval/report.tsv")),
        read(&a.join("metrics/report.tsv"))
    );

    println!("ACCEPT determinism: PASS (train/eval/gradcheck/ablate/sweep/dump-responses/metrics byte-identical on rerun)");
}

/// The episode runner enforces its stated state-count bound.
#[test]
fn acceptance_episode_bounds() {
    let cfg = RunConfig::default();
    let scenes: Vec<_> = (0..10)
        .map(|i| generate_scene(&cfg.world, 9000 + i, Difficulty::Hard))
        .collect();
    let fusion = G2raParams::init(cfg.fusion, 1).unwrap();
    let policy = geofuse::policy::PolicyParams::init(cfg.policy, 1);
    for scene in &scenes {
        let ctrl = geofuse::episode::Controller::Learned {
            fusion: &fusion,
            policy: &policy,
            variant: Variant::Full,
            encoders: &cfg.encoders,
        };
        let ep = geofuse::episode::run_episode(
            scene,
            geofuse::episode::SplitLabel {
                exposure: geofuse::episode::Exposure::Unseen,
                difficulty: scene.difficulty,
            },
            &ctrl,
            &cfg.episode,
        )
        .unwrap();
        assert!(ep.states.len() <= cfg.episode.max_steps + 1);
        for w in ep.waypoints().windows(2) {
            assert!(dist3(w[0], w[1]) <= cfg.episode.max_step_len + 1e-9);
        }
        assert_eq!(ep.success, ep.recompute_success());
    }
    println!("ACCEPT episode-bounds: PASS");
}
