//! Acceptance suite: one PASS/FAIL line per criterion. Runs without the
//! libtest harness so the lines always reach stdout; exits nonzero when any
//! hard criterion fails.

#[path = "../../autodiff/tests/common/primitives.rs"]
mod primitives;

#[path = "../../core/tests/common/model_checks.rs"]
mod model_checks;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxgraph::encoder::{GraphInput, Model, ModelConfig, Task};
use voxgraph::graph::{laplacian_pe, mutual_knn, KnnRule};
use voxgraph::trainer::{evaluate, train, DiceInput, TrainConfig};
use voxgraph::prune::DEFAULT_TAU_CLS;
use voxgraph::{compute_targets, generate_phantom, preprocess_volume, prune_background, PatchParams, PhantomSpec, PipelineError, PreprocessParams, Preprocessed};

// Pinned tolerances and bars.
const PRUNE_VECTORS: usize = 1000;
const PRUNE_BUDGET: Duration = Duration::from_secs(10);
const KNN_SETS: usize = 100;
const KNN_MAX_NODES: usize = 200;
const KNN_K: usize = 8;
const KNN_BUDGET: Duration = Duration::from_secs(30);
const TARGET_VOLUMES: u64 = 50;
const PE_GRAPHS: usize = 100;
const PE_K: usize = 8;
const PE_RESIDUAL_TOL: f64 = 1e-8;
const PE_NORM_TOL: f64 = 1e-10;
const GRAD_BUDGET: Duration = Duration::from_secs(300);
const SYMMETRY_CASES: u64 = 50;
const SYMMETRY_TOL: f64 = 1e-10;
const ACCUM_STEPS: usize = 20;
const ACCUM_TOL: f64 = 1e-10;

const E2E_VOLUMES: u64 = 60;
const E2E_TRAIN: usize = 40;
const E2E_N_SV: usize = 64;
const E2E_EPOCHS: usize = 100;
const E2E_BUDGET: Duration = Duration::from_secs(45 * 60);
const MIN_F1: f64 = 0.85;
const MIN_AUC: f64 = 0.95;
const MAX_MAE: f64 = 0.06;
const MIN_R2: f64 = 0.6;
const MIN_DICE: f64 = 0.60;
const DICE_TAU: f64 = 0.04;

const TREND_N_SV: [usize; 3] = [32, 64, 128];
const TREND_SEEDS: [u64; 3] = [0, 1, 2];
const TREND_VOLUMES: u64 = 30;
const TREND_TRAIN: usize = 20;
const TREND_EPOCHS: usize = 60;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn secs(d: Duration) -> String {
    format!("{:.1} s", d.as_secs_f64())
}

// 1. Pruning against an O(n^2) largest-gap scan.

/// For every value, find its successor by a full scan; the widest
/// successor gap (lowest lower end on ties) sets the threshold.
fn brute_force_prune(means: &[f64]) -> Option<Vec<u32>> {
    let mut best: Option<(f64, f64, f64)> = None; // (gap, lower, upper)
    for &a in means {
        let next = means.iter().copied().filter(|&b| b > a).fold(f64::INFINITY, f64::min);
        if !next.is_finite() {
            continue;
        }
        let gap = next - a;
        let better = match best {
            None => true,
            Some((g, lo, _)) => gap > g || (gap == g && a < lo),
        };
        if better {
            best = Some((gap, a, next));
        }
    }
    let (_, lo, hi) = best?;
    let theta = 0.5 * (lo + hi);
    Some((0..means.len()).filter(|&i| means[i] > theta).map(|i| i as u32).collect())
}

fn criterion_prune() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    let mut mismatches = 0;
    for case in 0..PRUNE_VECTORS {
        let n = rng.random_range(2..=500);
        // every fourth vector is drawn from a coarse grid to force ties
        let means: Vec<f64> = if case % 4 == 0 {
            (0..n).map(|_| rng.random_range(0..40) as f64 / 4.0).collect()
        } else {
            (0..n).map(|_| rng.random_range(-10.0..10.0)).collect()
        };
        let got = prune_background(&means).ok().map(|r| r.indices);
        if got != brute_force_prune(&means) {
            mismatches += 1;
        }
    }
    let t = start.elapsed();
    verdict(
        mismatches == 0 && t < PRUNE_BUDGET,
        format!("{mismatches} mismatches over {PRUNE_VECTORS} vectors, {}", secs(t)),
    )
}

// 2. Mutual kNN against brute force.

fn brute_force_mutual(pts: &[[f64; 3]], k: usize) -> Vec<(u32, u32)> {
    let n = pts.len();
    let k = k.min(n - 1);
    let d2 = |i: usize, j: usize| (0..3).map(|a| (pts[i][a] - pts[j][a]).powi(2)).sum::<f64>();
    // j is among i's k nearest iff fewer than k others precede it in (distance, id) order
    let near = |i: usize, j: usize| {
        let dij = d2(i, j);
        let ahead = (0..n).filter(|&m| m != i && m != j && (d2(i, m) < dij || (d2(i, m) == dij && m < j))).count();
        ahead < k
    };
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if near(i, j) && near(j, i) {
                edges.push((i as u32, j as u32));
            }
        }
    }
    edges
}

fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| [rng.random_range(0.0..48.0), rng.random_range(0.0..48.0), rng.random_range(0.0..48.0)])
        .collect()
}

fn criterion_knn() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let start = Instant::now();
    let mut mismatches = 0;
    for _ in 0..KNN_SETS {
        let n = rng.random_range(2..=KNN_MAX_NODES);
        let pts = random_points(&mut rng, n);
        let adj = mutual_knn(&pts, KNN_K, KnnRule::Mutual).unwrap();
        if adj.edges != brute_force_mutual(&pts, KNN_K) {
            mismatches += 1;
        }
    }
    let t = start.elapsed();
    verdict(
        mismatches == 0 && t < KNN_BUDGET,
        format!("{mismatches} mismatches over {KNN_SETS} point sets (k = {KNN_K}), {}", secs(t)),
    )
}

// 3. Target conservation on phantoms.

fn phantom_graph(seed: u64, n_sv: usize, patch: PatchParams) -> (Preprocessed, Vec<u8>) {
    try_phantom_graph(seed, n_sv, patch).unwrap()
}

fn try_phantom_graph(seed: u64, n_sv: usize, patch: PatchParams) -> Result<(Preprocessed, Vec<u8>), PipelineError> {
    let vol = generate_phantom(&PhantomSpec { seed, ..PhantomSpec::default() }).unwrap();
    let mut p = PreprocessParams::default();
    p.slic.n_sv = n_sv;
    p.patch = patch;
    let out = preprocess_volume(&vol, &p, &format!("phantom_{seed}"))?;
    Ok((out, vol.mask().expect("phantoms carry a mask").to_vec()))
}

/// Targets over every supervoxel of the partition; the pruned subset drops
/// voxels by design, so conservation is checked before pruning.
fn criterion_targets() -> Verdict {
    let mut failures = Vec::new();
    let (mut total_voxels, mut kept_voxels) = (0, 0);
    for seed in 0..TARGET_VOLUMES {
        let (out, mask) = phantom_graph(3000 + seed, E2E_N_SV, PatchParams { n_patch: 2, patch_size: 4 });
        let all: Vec<u32> = (0..out.partition.n_sv() as u32).collect();
        let t = compute_targets(&out.partition, &mask, &all, DEFAULT_TAU_CLS).unwrap();
        let reconstructed: usize = t
            .y_reg
            .iter()
            .zip(&t.voxel_count)
            .map(|(&y, &c)| (y * c as f64).round() as usize)
            .sum();
        let tumour = mask.iter().filter(|&&m| m > 0).count();
        total_voxels += tumour;
        kept_voxels += out.targets.tumor_voxels.iter().sum::<usize>();
        if reconstructed != tumour {
            failures.push(format!("volume {seed}: {reconstructed} vs {tumour}"));
        }
    }
    verdict(
        failures.is_empty(),
        if failures.is_empty() {
            format!(
                "{TARGET_VOLUMES} volumes, {total_voxels} tumour voxels reconstructed exactly ({:.1}% inside retained supervoxels)",
                100.0 * kept_voxels as f64 / total_voxels as f64
            )
        } else {
            failures.join("; ")
        },
    )
}

// 4. Spectral validity of the positional encodings.

/// `L_sym v` straight from the edge list; isolated nodes have a zero row.
fn apply_laplacian(n: usize, edges: &[(u32, u32)], v: &[f64]) -> Vec<f64> {
    let mut deg = vec![0.0f64; n];
    for &(i, j) in edges {
        deg[i as usize] += 1.0;
        deg[j as usize] += 1.0;
    }
    let mut out: Vec<f64> = (0..n).map(|i| if deg[i] > 0.0 { v[i] } else { 0.0 }).collect();
    for &(i, j) in edges {
        let (i, j) = (i as usize, j as usize);
        let w = 1.0 / (deg[i] * deg[j]).sqrt();
        out[i] -= w * v[j];
        out[j] -= w * v[i];
    }
    out
}

fn criterion_pe() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst_res, mut worst_norm, mut pairs) = (0.0f64, 0.0f64, 0);
    for _ in 0..PE_GRAPHS {
        let n = rng.random_range(2..=KNN_MAX_NODES);
        let pts = random_points(&mut rng, n);
        let adj = mutual_knn(&pts, KNN_K, KnnRule::Mutual).unwrap();
        let pe = laplacian_pe(&adj, PE_K);
        for c in 0..PE_K {
            let Some(lambda) = pe.eigenvalues[c] else { continue };
            let v = pe.column(c);
            let lv = apply_laplacian(n, &adj.edges, &v);
            let res = (0..n).map(|i| (lv[i] - lambda * v[i]).abs()).fold(0.0, f64::max);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            worst_res = worst_res.max(res);
            worst_norm = worst_norm.max((norm - 1.0).abs());
            pairs += 1;
        }
    }
    verdict(
        worst_res < PE_RESIDUAL_TOL && worst_norm < PE_NORM_TOL,
        format!("{pairs} eigenpairs on {PE_GRAPHS} graphs: max residual {worst_res:.2e}, max |norm - 1| {worst_norm:.2e}"),
    )
}

// 5. Gradient fidelity.

fn criterion_gradients() -> Verdict {
    let start = Instant::now();
    let prims = primitives::primitive_checks();
    let (p_name, p_err) = prims
        .0
        .iter()
        .map(|(n, r)| (*n, r.max_rel_error))
        .fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let blocks = [
        ("transformer layer", model_checks::transformer_layer_check()),
        ("GATv2 layer", model_checks::gat_layer_check()),
        ("predictor ensemble", model_checks::predictor_check()),
        ("toy model (regression)", model_checks::full_model_check(Task::Regression)),
        ("toy model (classification)", model_checks::full_model_check(Task::Classification)),
    ];
    let t = start.elapsed();
    let (b_name, b_err) = blocks
        .iter()
        .map(|(n, r)| (*n, r.max_rel_error))
        .fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let refined: usize = blocks.iter().map(|(_, r)| r.refined).sum();
    verdict(
        p_err < primitives::PRIMITIVE_TOL && b_err < model_checks::BLOCK_TOL && t < GRAD_BUDGET,
        format!(
            "{} primitives max {p_err:.2e} ({p_name}); blocks max {b_err:.2e} ({b_name}), {refined} entries re-probed at h = 1e-6; {}",
            prims.0.len(),
            secs(t)
        ),
    )
}

// 6. Equivariance and invariance.

fn criterion_symmetry() -> Verdict {
    let eq = model_checks::graph_encoder_equivariance_deviation(SYMMETRY_CASES);
    let inv = model_checks::patch_order_invariance_deviation(SYMMETRY_CASES);
    verdict(
        eq < SYMMETRY_TOL && inv < SYMMETRY_TOL,
        format!("{SYMMETRY_CASES} instances each: permutation deviation {eq:.2e}, patch-order deviation {inv:.2e}"),
    )
}

// 7. Accumulation equivalence.

fn criterion_accumulation() -> Verdict {
    let run = model_checks::accumulation_equivalence();
    verdict(
        run.steps_large_batch == ACCUM_STEPS && run.steps_accumulated == ACCUM_STEPS && run.max_deviation < ACCUM_TOL,
        format!(
            "{} vs {} optimizer steps, max parameter deviation {:.2e}",
            run.steps_large_batch, run.steps_accumulated, run.max_deviation
        ),
    )
}

// 8. Phantom end to end.

struct PhantomSet {
    graphs: Vec<GraphInput>,
    node_ids: Vec<Vec<u32>>,
    labels: Vec<Vec<u32>>,
    masks: Vec<Vec<u8>>,
    /// Volumes whose pruned supervoxels could not form a graph.
    skipped: Vec<(u64, String)>,
}

impl PhantomSet {
    fn build(seeds: impl Iterator<Item = u64>, n_sv: usize) -> Self {
        let mut set = PhantomSet {
            graphs: Vec::new(),
            node_ids: Vec::new(),
            labels: Vec::new(),
            masks: Vec::new(),
            skipped: Vec::new(),
        };
        for seed in seeds {
            let (out, mask) = match try_phantom_graph(seed, n_sv, PatchParams { n_patch: 8, patch_size: 8 }) {
                Ok(built) => built,
                Err(e) => {
                    set.skipped.push((seed, e.to_string()));
                    continue;
                }
            };
            set.graphs.push(GraphInput::from_graph(&out.graph));
            set.node_ids.push(out.graph.nodes.iter().map(|n| n.id).collect());
            set.labels.push(out.partition.labels().to_vec());
            set.masks.push(mask);
        }
        set
    }

    fn dice_inputs(&self, range: std::ops::Range<usize>) -> Vec<DiceInput<'_>> {
        range
            .map(|i| DiceInput { node_ids: &self.node_ids[i], labels: &self.labels[i], mask: &self.masks[i] })
            .collect()
    }
}

fn fit(task: Task, train_set: &[GraphInput], epochs: usize, seed: u64) -> Model {
    let g = &train_set[0];
    let cols = g.patches.shape()[2];
    let rows = g.patches.shape()[1];
    let cfg = ModelConfig::toy(task, 4, cols - 3, g.pe.shape()[1]);
    assert_eq!(rows % 4, 0);
    let mut t = TrainConfig::phantom(task);
    t.max_epochs = epochs;
    t.seed = seed;
    train(Model::new(cfg, seed).unwrap(), train_set, None, &t, &mut ()).unwrap().model
}

fn criterion_phantom() -> Verdict {
    let start = Instant::now();
    let set = PhantomSet::build(1000..1000 + E2E_VOLUMES, E2E_N_SV);
    let n = set.graphs.len();
    let (train_set, test_set) = set.graphs.split_at(E2E_TRAIN);

    let cls = fit(Task::Classification, train_set, E2E_EPOCHS, 42);
    let c = evaluate(&cls, test_set, None).unwrap().report;
    let reg = fit(Task::Regression, train_set, E2E_EPOCHS, 42);
    let dice = set.dice_inputs(E2E_TRAIN..n);
    let r = evaluate(&reg, test_set, Some((&dice, DICE_TAU))).unwrap().report;
    let dice_mean = r.dice_mean.unwrap();
    let t = start.elapsed();
    let pass = set.skipped.is_empty()
        && c.f1 >= MIN_F1
        && c.roc_auc >= MIN_AUC
        && r.mae <= MAX_MAE
        && r.r2 >= MIN_R2
        && dice_mean >= MIN_DICE
        && t <= E2E_BUDGET;
    verdict(
        pass,
        format!(
            "F1 {:.3} (>= {MIN_F1}), AUC {:.3} (>= {MIN_AUC}), MAE {:.4} (<= {MAX_MAE}), R2 {:.3} (>= {MIN_R2}), Dice {:.3} +/- {:.3} (>= {MIN_DICE}); {} volumes unbuildable; {E2E_EPOCHS} epochs, {}",
            c.f1,
            c.roc_auc,
            r.mae,
            r.r2,
            dice_mean,
            r.dice_std.unwrap(),
            set.skipped.len(),
            secs(t)
        ),
    )
}

// 9. Granularity trend (reported, never fails the run).

fn criterion_granularity() -> Verdict {
    let mut rows = Vec::new();
    for &n_sv in &TREND_N_SV {
        let mut skipped = 0;
        let maes: Vec<f64> = TREND_SEEDS
            .iter()
            .map(|&seed| {
                let base = 5000 + 100 * seed;
                let set = PhantomSet::build(base..base + TREND_VOLUMES, n_sv);
                skipped += set.skipped.len();
                let (train_set, test_set) = set.graphs.split_at(TREND_TRAIN);
                let model = fit(Task::Regression, train_set, TREND_EPOCHS, seed);
                evaluate(&model, test_set, None).unwrap().report.mae
            })
            .collect();
        let mean = maes.iter().sum::<f64>() / maes.len() as f64;
        let std = (maes.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / maes.len() as f64).sqrt();
        rows.push((n_sv, mean, std, skipped));
    }
    // non-decreasing within one standard deviation between neighbours
    let holds = rows.windows(2).all(|w| w[1].1 + w[1].2.max(w[0].2) >= w[0].1);
    let table: Vec<String> = rows
        .iter()
        .map(|(n, m, s, k)| format!("n_SV {n}: MAE {m:.4} +/- {s:.4} ({k} volumes unbuildable)"))
        .collect();
    verdict(
        holds,
        format!("{}; trend {}", table.join(", "), if holds { "holds" } else { "not observed" }),
    )
}

// 10. CLI determinism.

fn cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_voxgraph"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("voxgraph {args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn criterion_determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let run = || -> Result<bool, String> {
        cli(d, &["phantom", "--n", "4", "--dims", "32", "--seed", "7", "--out-dir", "vols"])?;
        let pre = |out: &str| {
            cli(d, &["preprocess", "--input", "vols", "--out-dir", out, "--n-sv", "64", "--n-patch", "4", "--patch-size", "8"])
        };
        pre("g1")?;
        pre("g2")?;
        let fit = |tag: &str| {
            let (ck, log) = (format!("{tag}.ckpt"), format!("{tag}.jsonl"));
            cli(d, &["--threads", "1", "train", "--graphs", "g1", "--epochs", "5", "--seed", "11", "--out", &ck, "--log", &log])
        };
        fit("a")?;
        fit("b")?;
        let graphs_equal = dir_bytes(&d.join("g1")) == dir_bytes(&d.join("g2"));
        let read = |f: &str| std::fs::read(d.join(f)).unwrap();
        let train_equal = read("a.ckpt") == read("b.ckpt") && read("a.jsonl") == read("b.jsonl");
        Ok(graphs_equal && train_equal)
    };
    match run() {
        Ok(same) => verdict(
            same,
            if same { "preprocess outputs, checkpoints and metric logs byte-identical across two runs" } else { "outputs differ between runs" },
        ),
        Err(e) => verdict(false, e),
    }
}

fn main() {
    let criteria: [(u32, &str, bool, fn() -> Verdict); 10] = [
        (1, "pruning oracle", true, criterion_prune),
        (2, "mutual kNN oracle", true, criterion_knn),
        (3, "target conservation", true, criterion_targets),
        (4, "spectral validity", true, criterion_pe),
        (5, "gradient fidelity", true, criterion_gradients),
        (6, "equivariance and invariance", true, criterion_symmetry),
        (7, "accumulation equivalence", true, criterion_accumulation),
        (8, "phantom end to end", true, criterion_phantom),
        (9, "granularity trend (report only)", false, criterion_granularity),
        (10, "CLI determinism", true, criterion_determinism),
    ];
    // `cargo test -- <filter>` style selection by criterion number
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (id, name, hard, run) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let v = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            verdict(false, format!("panicked: {msg}"))
        });
        let status = match (v.pass, hard) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "NOT OBSERVED",
        };
        println!("criterion {id} {name}: {status} ({})", v.detail);
        if hard && !v.pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("acceptance: criteria {failed:?} failed");
        std::process::exit(1);
    }
    println!("acceptance: all hard criteria passed");
}
