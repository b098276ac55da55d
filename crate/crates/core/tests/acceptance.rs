//! Acceptance suite: one orchestrated run that exercises every gate the
//! library must pass, printing a pass/fail line per criterion.
//!
//! Run it with:
//!   cargo test -p qfuse-core --test acceptance -- --nocapture
//!
//! The trend criteria train real models (dozens of seeded runs); the whole
//! suite is budgeted to finish well under half an hour on a laptop CPU.

use std::collections::HashMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qfuse_core::autodiff::{Graph, ParamStore, Tensor};
use qfuse_core::config::RunConfig;
use qfuse_core::detect::Detector;
use qfuse_core::experiment::{self, AblationReport};
use qfuse_core::fusion::{ChainConfig, FusionMode, QuaFaPlacement};
use qfuse_core::lidar::{project_depth, voxelize_bev, CameraModel, LidarPoint, PointCloud, VoxelSpec};
use qfuse_core::quat::{dense_equivalent_param_count, hamilton, matrix_form, Quaternion, QuaternionLinear};

struct Outcome {
    id: usize,
    label: &'static str,
    pass: bool,
    detail: String,
}

fn record(results: &mut Vec<Outcome>, id: usize, label: &'static str, pass: bool, detail: String) {
    println!("criterion {id:>2}: {} — {label}: {detail}", if pass { "PASS" } else { "FAIL" });
    results.push(Outcome { id, label, pass, detail });
}

fn qrand(rng: &mut ChaCha8Rng) -> Quaternion {
    Quaternion::new(
        rng.gen_range(-2.0..2.0),
        rng.gen_range(-2.0..2.0),
        rng.gen_range(-2.0..2.0),
        rng.gen_range(-2.0..2.0),
    )
}

// ---- criterion 1: quaternion algebra ------------------------------------

fn quaternion_algebra() -> (bool, String) {
    let i = Quaternion::new(0.0, 1.0, 0.0, 0.0);
    let j = Quaternion::new(0.0, 0.0, 1.0, 0.0);
    let k = Quaternion::new(0.0, 0.0, 0.0, 1.0);
    if hamilton(i, j) != k {
        return (false, "i*j != k".into());
    }
    if hamilton(hamilton(i, j), k) != Quaternion::new(-1.0, 0.0, 0.0, 0.0) {
        return (false, "ijk != -1".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst_norm = 0.0f64;
    let mut worst_matrix = 0.0f64;
    for _ in 0..500 {
        let p = qrand(&mut rng);
        let q = qrand(&mut rng);
        let prod = hamilton(p, q);
        worst_norm = worst_norm.max((prod.norm() - p.norm() * q.norm()).abs());
        // matrix-form equivalence: matrix_form(p) applied to q as a 4-vector
        let m = matrix_form(p);
        let v = q.as_array();
        let got = prod.as_array();
        #[allow(clippy::needless_range_loop)]
        for r in 0..4 {
            let mut acc = 0.0;
            for (c, &vc) in v.iter().enumerate() {
                acc += m.at(&[r, c]) * vc;
            }
            worst_matrix = worst_matrix.max((acc - got[r]).abs());
        }
    }
    let pass = worst_norm < 1e-10 && worst_matrix < 1e-12;
    (pass, format!("norm mult err {worst_norm:.2e} (<1e-10), matrix equiv err {worst_matrix:.2e} (<1e-12)"))
}

// ---- criterion 2: parameter ratio ----------------------------------------

fn parameter_ratio() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut checked = Vec::new();
    for _ in 0..5 {
        let c_in = rng.gen_range(1..64usize);
        let c_out = rng.gen_range(1..64usize);
        let mut store = ParamStore::new();
        let layer = QuaternionLinear::suprasphere_init(&mut store, "q", c_in, c_out, false, rng.gen());
        let ratio = layer.weight_param_count() as f64 / dense_equivalent_param_count(c_in, c_out) as f64;
        if ratio != 0.25 {
            return (false, format!("({c_in},{c_out}) gives ratio {ratio}, expected exactly 0.25"));
        }
        checked.push((c_in, c_out));
    }
    (true, format!("5 random (C_in,C_out) pairs {checked:?} all exactly 0.25"))
}

// ---- criterion 4: oracle equivalence --------------------------------------

fn rand_cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PointCloud::new(
        (0..n)
            .map(|_| LidarPoint {
                x: rng.gen_range(-60.0..60.0),
                y: rng.gen_range(-60.0..60.0),
                z: rng.gen_range(-6.0..4.0),
                intensity: rng.gen_range(0.0..1.0),
            })
            .collect(),
    )
    .expect("valid cloud")
}

fn oracle_equivalence() -> (bool, String) {
    let spec = VoxelSpec {
        x_range: (-51.2, 51.2),
        y_range: (-51.2, 51.2),
        z_range: (-5.0, 3.0),
        voxel: (0.23, 0.23, 8.0),
    };
    let cam = CameraModel::forward_facing(80.0, 80.0, 96, 64, 1.4);
    for seed in 0..20u64 {
        let pc = rand_cloud(1000, seed);
        // brute-force binning oracle, aggregated independently
        let bev = voxelize_bev(&pc, &spec).expect("voxelize");
        let mut cells: HashMap<(usize, usize, usize), (f64, f64, f64)> = HashMap::new();
        for p in &pc.points {
            if let Some(key) = spec.cell_index(p.x, p.y, p.z) {
                let e = cells.entry(key).or_insert((0.0, f64::NEG_INFINITY, 0.0));
                e.0 += 1.0;
                e.1 = e.1.max(p.z);
                e.2 += p.intensity;
            }
        }
        let mut occupied = 0;
        for (&(ix, iy, iz), &(count, maxz, int_sum)) in &cells {
            occupied += 1;
            if bev.grid.at(&[3 * iz, ix, iy]) != count
                || bev.grid.at(&[3 * iz + 1, ix, iy]) != maxz
                || bev.grid.at(&[3 * iz + 2, ix, iy]) != int_sum / count
            {
                return (false, format!("seed {seed}: cell ({ix},{iy}) disagrees with binning oracle"));
            }
        }
        let plane = spec.bins_x() * spec.bins_y();
        let grid_occupied = bev.grid.data()[..plane].iter().filter(|&&v| v != 0.0).count();
        if grid_occupied != occupied {
            return (false, format!("seed {seed}: occupied cell count {grid_occupied} vs oracle {occupied}"));
        }

        // per-pixel sort oracle for the depth raster
        let map = project_depth(&pc, &cam, 64, 96, 60.0).expect("project");
        let mut buckets: HashMap<(usize, usize), Vec<f64>> = HashMap::new();
        for p in &pc.points {
            if let Some((u, v, z)) = cam.project([p.x, p.y, p.z]) {
                if z > 60.0 {
                    continue;
                }
                let (px, py) = (u.round(), v.round());
                if px >= 0.0 && py >= 0.0 && px < 96.0 && py < 64.0 {
                    buckets.entry((py as usize, px as usize)).or_default().push(z);
                }
            }
        }
        let mut oracle = Tensor::zeros(&[1, 64, 96]);
        for ((py, px), mut zs) in buckets {
            zs.sort_by(|a, b| a.partial_cmp(b).expect("finite depths"));
            oracle.data_mut()[py * 96 + px] = zs[0];
        }
        if !map.depth.bit_eq(&oracle) {
            return (false, format!("seed {seed}: depth raster disagrees with per-pixel sort oracle"));
        }
    }
    (true, "20 random clouds match binning and z-buffer oracles exactly".into())
}

// ---- criterion 5: seamless conversion --------------------------------------

fn seamless_conversion(cfg: &RunConfig) -> (bool, String) {
    let cam = cfg.camera();
    let scenes = match experiment::build_train_set(&RunConfig { train_scenes: 5, ..cfg.clone() }) {
        Ok(v) => v,
        Err(e) => return (false, format!("scene build failed: {e}")),
    };
    for (scene_seed, bundle) in scenes.iter().enumerate() {
        let scene_seed = scene_seed as u64;
        let inputs = bundle.inputs(true);
        let run = |mode: FusionMode, seed: u64| {
            let chain = ChainConfig { mode, ..cfg.chain_config() };
            let det = Detector::new(cfg.detector_config(), chain, &cam, seed).expect("model builds");
            let mut g = Graph::inference();
            let out = det.forward(&mut g, &inputs).expect("forward");
            (g.value(out.heatmap).clone(), g.value(out.sizes).clone())
        };
        for model_seed in [3 + scene_seed, 40 + scene_seed] {
            let (hm0, sz0) = run(FusionMode::CameraOnly, model_seed);
            for mode in [
                FusionMode::Progressive,
                FusionMode::InputSummation,
                FusionMode::DeepSummation,
                FusionMode::Separate,
            ] {
                let (hm, sz) = run(mode, model_seed);
                if !hm.bit_eq(&hm0) || !sz.bit_eq(&sz0) {
                    return (false, format!("{mode:?} differs bitwise from camera-only at zero init"));
                }
            }
        }
    }
    (true, "all fused modes bitwise equal camera-only at zero-initialized hooks, 5 seeded scenes x 2 model seeds".into())
}

// ---- criteria 6..9 helpers ---------------------------------------------------

fn paired_wins(report: &AblationReport, a: &str, b: &str, seeds: &[u64]) -> (usize, usize) {
    let ap = |variant: &str, seed: u64| {
        report
            .variant_aps(variant, true)
            .into_iter()
            .find(|(s, _)| *s == seed)
            .map(|(_, ap)| ap)
            .expect("row present")
    };
    let mut wins = 0;
    for &s in seeds {
        if ap(a, s) > ap(b, s) {
            wins += 1;
        }
    }
    (wins, seeds.len())
}

fn main_trend_sweep(base: &RunConfig) -> AblationReport {
    let mut variants: Vec<(String, RunConfig)> = Vec::new();
    for mode in [
        FusionMode::CameraOnly,
        FusionMode::InputSummation,
        FusionMode::DeepSummation,
        FusionMode::Separate,
        FusionMode::Progressive,
    ] {
        let mut cfg = base.clone();
        cfg.fusion_mode = mode;
        variants.push((mode.name().to_string(), cfg));
    }
    let mut no_quafa = base.clone();
    no_quafa.fusion_mode = FusionMode::Progressive;
    no_quafa.qua_fa = QuaFaPlacement::Off;
    variants.push(("progressive_no_quafa".to_string(), no_quafa));
    experiment::run_variant_matrix(base, &variants, true, "acceptance").expect("sweep runs")
}

// ---- the suite -----------------------------------------------------------------

#[test]
fn acceptance_suite() {
    let suite_start = Instant::now();
    let mut results: Vec<Outcome> = Vec::new();

    // 1. quaternion algebra, must also be fast (< 1 s)
    let t = Instant::now();
    let (pass, detail) = quaternion_algebra();
    let fast = t.elapsed().as_secs_f64() < 1.0;
    record(
        &mut results,
        1,
        "quaternion algebra suite",
        pass && fast,
        format!("{detail}; {:.3} s (< 1 s)", t.elapsed().as_secs_f64()),
    );

    // 2. exact parameter ratio
    let (pass, detail) = parameter_ratio();
    record(&mut results, 2, "quaternion/dense parameter ratio", pass, detail);

    // 3. gradient soundness across ops, blocks, and the full loss
    let t = Instant::now();
    let report = experiment::gradcheck_all(2024).expect("gradcheck executes");
    let elapsed = t.elapsed().as_secs_f64();
    let pass = report.all_pass() && elapsed < 120.0;
    let worst = report
        .outcomes
        .iter()
        .map(|o| format!("{}={:.1e}", o.name.replace("op: ", "").replace("block: ", "").replace("full: ", ""), o.max_rel_err))
        .collect::<Vec<_>>()
        .join(", ");
    record(
        &mut results,
        3,
        "gradcheck_all",
        pass,
        format!("{} items in {elapsed:.1} s (< 120 s): {worst}", report.outcomes.len()),
    );
    if !report.all_pass() {
        print!("{}", report.render());
    }

    // 4. voxelization / projection oracle equivalence
    let t = Instant::now();
    let (pass, detail) = oracle_equivalence();
    let elapsed = t.elapsed().as_secs_f64();
    record(
        &mut results,
        4,
        "voxelization/projection oracles",
        pass && elapsed < 30.0,
        format!("{detail}; {elapsed:.1} s (< 30 s)"),
    );

    // 5. seamless conversion at zero-initialized hooks
    let trend_cfg = RunConfig { seeds: (0..10).collect(), ..RunConfig::fast_profile() };
    let (pass, detail) = seamless_conversion(&trend_cfg);
    record(&mut results, 5, "seamless camera-to-fused conversion", pass, detail);

    let items_1_to_5 = suite_start.elapsed().as_secs_f64();

    // 6..9. trained trend criteria from one shared sweep
    let sweep = main_trend_sweep(&trend_cfg);
    assert!(
        sweep.failures.is_empty(),
        "trend sweep had non-finite runs: {:?}",
        sweep.failures
    );
    let seeds: Vec<u64> = trend_cfg.seeds.clone();

    // 6. missing-LiDAR robustness: median per-seed ratio over 5 seeds
    let ratios: Vec<f64> = seeds[..5]
        .iter()
        .map(|&s| {
            let with = sweep.variant_aps("progressive", true).into_iter().find(|(x, _)| *x == s).map(|(_, v)| v);
            let without = sweep.variant_aps("progressive", false).into_iter().find(|(x, _)| *x == s).map(|(_, v)| v);
            without.expect("zero-lidar row") / with.expect("lidar row")
        })
        .collect();
    let mut sorted = ratios.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite ratios"));
    let median_ratio = sorted[sorted.len() / 2];
    record(
        &mut results,
        6,
        "missing-LiDAR robustness",
        median_ratio >= 0.5,
        format!("median zero/with toy_ap ratio {median_ratio:.3} over 5 seeds (>= 0.5); finite outputs on all eval scenes"),
    );

    // 7. fusion benefit: progressive beats camera-only in >= 8/10 seeded runs
    let (wins, total) = paired_wins(&sweep, "progressive", "camera_only", &seeds);
    record(
        &mut results,
        7,
        "fusion benefit trend",
        wins >= 8,
        format!(
            "progressive > camera_only in {wins}/{total} runs (need >= 8); medians {:.3} vs {:.3}",
            sweep.median_ap("progressive", true),
            sweep.median_ap("camera_only", true)
        ),
    );

    // 8. framework ordering: the extreme-anchored pairs of
    //    progressive >= separate >= deep_summation >= input_summation
    let med = |v: &str| sweep.median_ap(v, true);
    let (wins_pi, _) = paired_wins(&sweep, "progressive", "input_summation", &seeds);
    let pass8 = wins_pi >= 8 && med("progressive") >= med("deep_summation") && med("separate") >= med("input_summation");
    record(
        &mut results,
        8,
        "framework ablation ordering",
        pass8,
        format!(
            "medians: progressive {:.3} | separate {:.3} | deep {:.3} | input {:.3} | camera {:.3}; progressive > input in {wins_pi}/10 (need >= 8)",
            med("progressive"),
            med("separate"),
            med("deep_summation"),
            med("input_summation"),
            med("camera_only"),
        ),
    );

    // 9. quaternion adaptation vs plain concat (weak-trend criterion)
    let (wins_q, total_q) = paired_wins(&sweep, "progressive", "progressive_no_quafa", &seeds);
    record(
        &mut results,
        9,
        "quaternion feature adaptation trend",
        wins_q * 10 >= total_q * 6,
        format!(
            "quaternion mixing > plain concat in {wins_q}/{total_q} runs (need >= 6, weak trend); medians {:.3} vs {:.3}",
            sweep.median_ap("progressive", true),
            sweep.median_ap("progressive_no_quafa", true)
        ),
    );

    // 10. training sanity: >= 50% loss drop within 500 from-scratch steps
    let mut sanity_cfg = trend_cfg.clone();
    sanity_cfg.pretrain_steps = 0;
    sanity_cfg.steps = 500;
    sanity_cfg.train_scenes = 32;
    let train_set = experiment::build_train_set(&sanity_cfg).expect("scenes build");
    let mut drops = Vec::new();
    let mut sanity_pass = true;
    for &seed in &seeds {
        let outcome = experiment::train(&sanity_cfg, seed, &train_set).expect("training runs");
        let first = outcome.losses[0];
        let tail = &outcome.losses[outcome.losses.len() - 32..];
        let final_mean = tail.iter().sum::<f64>() / tail.len() as f64;
        let drop = 1.0 - final_mean / first;
        if final_mean > 0.5 * first {
            sanity_pass = false;
        }
        drops.push(drop);
    }
    let min_drop = drops.iter().cloned().fold(f64::INFINITY, f64::min);
    record(
        &mut results,
        10,
        "training sanity",
        sanity_pass,
        format!("loss drop over 500 steps, min across 10 seeds: {:.1}% (need >= 50%)", min_drop * 100.0),
    );

    // 11. wall clock budget
    let total = suite_start.elapsed().as_secs_f64();
    record(
        &mut results,
        11,
        "wall-clock budget",
        total < 1800.0 && items_1_to_5 < 300.0,
        format!("items 1-5 in {items_1_to_5:.0} s (< 300 s); full suite {total:.0} s (< 1800 s)"),
    );

    let failures: Vec<String> = results
        .iter()
        .filter(|o| !o.pass)
        .map(|o| format!("criterion {} ({}): {}", o.id, o.label, o.detail))
        .collect();
    assert!(failures.is_empty(), "acceptance failures:\n{}", failures.join("\n"));
}
