//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Tolerances are pinned below.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use rpfem_core::graph_transformer::{GraphTransformer, TransformerConfig};
use rpfem_core::relation_head::{predict_edges, RelationHead, RelationHeadConfig};
use rpfem_core::rpkg::{
    compute_cooccurrence, compute_distance, compute_orientation, read_rpkg, AnnotatedImage, BBox,
    Corpus, ObjectInstance, Relation,
};
use rpfem_core::tensor::rng::{uniform, SeedStream};
use rpfem_core::tensor::{ParamStore, Tape, Tensor};
use rpfem_core::toy::{
    final_metrics, generate_corpus, train, ModelConfig, ToyTaskSpec, TrainConfig,
};
use rpfem_core::Rpkg64;

const GRAD_TOL: f64 = 1e-4;
const GRAD_SEEDS: u64 = 20;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const ORACLE_TOL: f64 = 1e-10;
const ORACLE_INSTANCES: u64 = 50;
const ORACLE_BUDGET: Duration = Duration::from_secs(60);
const EQUIVARIANCE_TOL: f64 = 1e-9;
const SOFTMAX_TOL: f64 = 1e-9;
const LAYER_NORM_TOL: f64 = 1e-6;
/// Minimum ambiguous-accuracy gain of the enhanced model over the baseline.
const MIN_CONTEXT_GAIN: f64 = 0.10;
/// Gain measured by the seeded reference run (seed 0, default task and
/// training settings, 2004 evaluation proposals), frozen here.
const REFERENCE_CONTEXT_GAIN: f64 = 0.514_786_418_400_876_1;
const REFERENCE_GAIN_TOL: f64 = 0.02;
const CONTEXT_BUDGET: Duration = Duration::from_secs(600);
const NO_HARM_TOL: f64 = 0.02;
const NO_HARM_SEEDS: u64 = 5;
/// Ambiguous proposals are coin flips for any classifier on the independent
/// task; 12 000 evaluation proposals keep that sampling noise well below
/// the tolerance.
const NO_HARM_EVAL_SCENES: usize = 1000;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn micro(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures/micro")
        .join(name)
}

fn rpfem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rpfem"))
        .args(args)
        .env_remove("RPFEM_INJECT_FAULT")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let o = rpfem(&["gradcheck", "--seeds", &GRAD_SEEDS.to_string()]);
    let elapsed = start.elapsed();
    let text = String::from_utf8_lossy(&o.stdout);
    let mut worst = 0.0f64;
    let mut checks = 0;
    let mut bad = Vec::new();
    for line in text.lines().filter(|l| l.contains("max_rel_err")) {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let err: f64 = parts
            .last()
            .and_then(|v| v.parse().ok())
            .unwrap_or(f64::NAN);
        checks += 1;
        if err.is_nan() || err > GRAD_TOL {
            bad.push(parts[1].to_owned());
        }
        worst = worst.max(err);
    }
    outcome(
        o.status.success() && bad.is_empty() && checks > 0 && elapsed <= GRAD_BUDGET,
        format!(
            "{checks} checks x {GRAD_SEEDS} seeds, max rel err {worst:.2e} (tol {GRAD_TOL:.0e}), {:.1}s (budget {}s){}",
            elapsed.as_secs_f64(),
            GRAD_BUDGET.as_secs(),
            if bad.is_empty() { String::new() } else { format!(", failing: {}", bad.join(" ")) }
        ),
    )
}

struct HeadInstance {
    p: Tensor<f64>,
    rpkg: Rpkg64,
    store: ParamStore<f64>,
    head: RelationHead,
}

fn head_instance(seed: u64, n: usize, c: usize, heads: usize) -> HeadInstance {
    let s = SeedStream::new(seed).split("acceptance");
    let (fp, fr, r) = (5, 3, 8);
    let rpkg = Rpkg64::new(
        (0..c).map(|i| format!("k{i}")).collect(),
        Relation::ALL.to_vec(),
        uniform(&mut s.split("d").rng(), &[c, fr], -1.0, 1.0),
        uniform(&mut s.split("k").rng(), &[c, c, r], 0.0, 1.0),
    )
    .unwrap();
    let mut store = ParamStore::new();
    let cfg = RelationHeadConfig {
        heads,
        attn_width: 4,
        value_width: 3,
        edge_width: fp,
    };
    let head =
        RelationHead::new(&mut store, "rel", fp, fr, r, cfg, &mut s.split("w").rng()).unwrap();
    let p = uniform(&mut s.split("p").rng(), &[n, fp], -2.0, 2.0);
    HeadInstance {
        p,
        rpkg,
        store,
        head,
    }
}

fn weight(store: &ParamStore<f64>, name: &str) -> Tensor<f64> {
    store.get(store.find(name).unwrap()).clone()
}

/// `x · W` for a row vector.
fn row_times(x: &[f64], w: &Tensor<f64>) -> Vec<f64> {
    let cols = w.shape()[1];
    (0..cols)
        .map(|k| x.iter().enumerate().map(|(r, a)| a * w.at(&[r, k])).sum())
        .collect()
}

/// Edge tensor by explicit loops over proposal pairs, heads and class pairs.
fn edges_by_loops(inst: &HeadInstance) -> Vec<f64> {
    let (p, g) = (&inst.p, &inst.rpkg);
    let (n, c) = (p.shape()[0], g.num_classes());
    let cfg = inst.head.config();
    let scale = (cfg.attn_width as f64).sqrt();
    let w_e = weight(&inst.store, "rel.w_e");
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let pair: Vec<f64> = p.row(i).iter().chain(p.row(j)).copied().collect();
            let mut heads_out = Vec::new();
            for h in 0..cfg.heads {
                let w = |m: &str| weight(&inst.store, &format!("rel.head{h}.{m}"));
                let q = row_times(&pair, &w("w_q"));
                let mut scores = Vec::with_capacity(c * c);
                let mut values = Vec::with_capacity(c * c);
                for u in 0..c {
                    for v in 0..c {
                        let d: Vec<f64> = g
                            .embeddings()
                            .row(u)
                            .iter()
                            .chain(g.embeddings().row(v))
                            .copied()
                            .collect();
                        let k = row_times(&d, &w("w_k"));
                        scores.push(q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / scale);
                        values.push(row_times(g.prior(u, v), &w("w_v")));
                    }
                }
                let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
                let total: f64 = weights.iter().sum();
                let mut acc = vec![0.0; cfg.value_width];
                for (wt, val) in weights.iter().zip(&values) {
                    for (a, x) in acc.iter_mut().zip(val) {
                        *a += wt / total * x;
                    }
                }
                heads_out.extend(acc);
            }
            out.extend(row_times(&heads_out, &w_e));
        }
    }
    out
}

fn relation_head_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = SeedStream::new(7).split("oracle-sizes").rng();
    let mut worst = 0.0f64;
    for k in 0..ORACLE_INSTANCES {
        let n = rng.random_range(1..=8);
        let c = rng.random_range(1..=6);
        let heads = [1, 2, 4][rng.random_range(0..3)];
        let inst = head_instance(k, n, c, heads);
        let e = predict_edges(&inst.p, &inst.rpkg, &inst.head, &inst.store).unwrap();
        let oracle = edges_by_loops(&inst);
        if e.len() != oracle.len() {
            return outcome(false, format!("instance {k}: edge count differs"));
        }
        for (a, b) in e.data().iter().zip(&oracle) {
            let d = (a - b).abs();
            worst = if d.is_nan() {
                f64::INFINITY
            } else {
                worst.max(d)
            };
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= ORACLE_TOL && elapsed <= ORACLE_BUDGET,
        format!(
            "{ORACLE_INSTANCES} instances (N<=8, C<=6, H in 1,2,4), max abs diff {worst:.2e} (tol {ORACLE_TOL:.0e}), {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn random_corpus(seed: u64) -> Corpus {
    let mut rng = SeedStream::new(seed).split("random-corpus").rng();
    let classes = 5;
    let images = (0..rng.random_range(5..25))
        .map(|i| AnnotatedImage {
            image_id: format!("r{i}"),
            width: 200.0,
            height: 150.0,
            objects: (0..rng.random_range(0..7))
                .map(|_| ObjectInstance {
                    class: rng.random_range(0..classes),
                    // a coarse grid makes ties and nested centers common
                    bbox: BBox {
                        x: f64::from(rng.random_range(0..10u32) * 10),
                        y: f64::from(rng.random_range(0..8u32) * 10),
                        w: f64::from(rng.random_range(1..8u32) * 10),
                        h: f64::from(rng.random_range(1..6u32) * 10),
                    },
                })
                .collect(),
        })
        .collect();
    Corpus {
        classes: (0..classes).map(|c| format!("c{c}")).collect(),
        images,
    }
}

fn symmetry_violations(corpus: &Corpus) -> usize {
    let c = corpus.num_classes();
    let (o, d) = (compute_orientation(corpus), compute_distance(corpus));
    let cooc = compute_cooccurrence(corpus);
    let mut bad = 0;
    for a in 0..c {
        for b in 0..c {
            let same = |x: f64, y: f64| x.to_bits() == y.to_bits();
            bad += usize::from(!same(o.at(&[a, b, 1]), o.at(&[b, a, 2])));
            bad += usize::from(!same(o.at(&[a, b, 3]), o.at(&[b, a, 4])));
            for k in 0..2 {
                bad += usize::from(!same(d.at(&[a, b, k]), d.at(&[b, a, k])));
                bad += usize::from(d.at(&[a, b, k]) < 0.0);
            }
            bad += usize::from(!(0.0..=1.0).contains(&cooc.at(&[a, b, 0])));
        }
    }
    bad
}

fn rpkg_correctness() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("micro.rpkg");
    let o = rpfem(&[
        "build-rpkg",
        "--annotations",
        p(&micro("annotations.jsonl")),
        "--labelmap",
        p(&micro("labelmap.json")),
        "--embeddings",
        p(&micro("embeddings.json")),
        "--out",
        p(&out),
    ]);
    let built = fs::read(&out).unwrap_or_default();
    let golden = fs::read(micro("golden.rpkg")).unwrap();
    let bitwise = o.status.success() && built == golden;

    // hand counts; classes 0 person, 1 cup, 2 hair dryer
    let g: Rpkg64 = read_rpkg(&golden).unwrap();
    let pu = {
        let obs = [0.0, 0.08, 0.1, 0.1];
        let mean = obs.iter().sum::<f64>() / 4.0;
        let var = obs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 4.0;
        [mean, var.sqrt()]
    };
    let hand: [(usize, usize, Vec<f64>); 5] = [
        (
            0,
            1,
            vec![4.0 / 7.0, 0.25, 0.5, 0.25, 0.5, 0.25, pu[0], pu[1]],
        ),
        (
            1,
            0,
            vec![4.0 / 5.0, 1.0, 0.25, 0.5, 0.25, 0.5, pu[0], pu[1]],
        ),
        (2, 0, vec![3.0 / 4.0, 0.0, 0.0, 1.0, 0.0, 2.0 / 3.0]),
        (1, 1, vec![1.0 / 5.0, 0.0, 0.5, 0.5, 0.5, 0.5, 0.6, 0.0]),
        (0, 0, vec![0.0; 8]),
    ];
    let counted = hand.iter().all(|(a, b, want)| {
        g.prior(*a, *b)
            .iter()
            .zip(want)
            .all(|(x, y)| x.to_bits() == y.to_bits())
    });
    let violations: usize = (0..10)
        .map(|s| symmetry_violations(&random_corpus(s)))
        .sum();
    outcome(
        bitwise && counted && violations == 0,
        format!(
            "golden bitwise {bitwise}, hand counts {counted}, symmetry violations on 10 random corpora: {violations}"
        ),
    )
}

fn permute_rows(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let mut data = Vec::new();
    for &i in perm {
        data.extend_from_slice(t.row(i));
    }
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

fn permute_pairs(e: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let n = perm.len();
    let mut data = Vec::new();
    for &i in perm {
        for &j in perm {
            data.extend_from_slice(e.row(i * n + j));
        }
    }
    Tensor::new(e.shape().to_vec(), data).unwrap()
}

fn transformer(
    width: usize,
    edge: usize,
    layers: usize,
    seed: u64,
) -> (ParamStore<f64>, GraphTransformer) {
    let mut store = ParamStore::new();
    let gt = GraphTransformer::new(
        &mut store,
        "ctx",
        TransformerConfig::new(width, edge, 6, layers),
        &mut SeedStream::new(seed).split("transformer").rng(),
    )
    .unwrap();
    (store, gt)
}

fn stack(
    store: &ParamStore<f64>,
    gt: &GraphTransformer,
    p: &Tensor<f64>,
    e: &Tensor<f64>,
) -> Tensor<f64> {
    let mut tape = Tape::new();
    let b = store.bind_frozen(&mut tape);
    let (pv, ev) = (tape.constant(p.clone()), tape.constant(e.clone()));
    let z = gt.run_stack(&mut tape, &b, pv, ev).unwrap();
    tape.value(z).clone()
}

fn equivariance() -> Outcome {
    let (mut edge_err, mut stack_err, mut class_err) = (0.0f64, 0.0f64, 0.0f64);
    let worse = |acc: f64, d: f64| {
        if d.is_nan() {
            f64::INFINITY
        } else {
            acc.max(d)
        }
    };
    for seed in 0..10u64 {
        let (n, c) = (6, 5);
        let inst = head_instance(1000 + seed, n, c, 2);
        let mut rng = SeedStream::new(seed).split("perm").rng();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let mut class_perm: Vec<usize> = (0..c).collect();
        class_perm.shuffle(&mut rng);

        let e = predict_edges(&inst.p, &inst.rpkg, &inst.head, &inst.store).unwrap();
        let pp = permute_rows(&inst.p, &perm);
        let ep = predict_edges(&pp, &inst.rpkg, &inst.head, &inst.store).unwrap();
        edge_err = worse(edge_err, ep.max_abs_diff(&permute_pairs(&e, &perm)));

        let permuted = inst.rpkg.permute_classes(&class_perm).unwrap();
        let ec = predict_edges(&inst.p, &permuted, &inst.head, &inst.store).unwrap();
        class_err = worse(class_err, ec.max_abs_diff(&e));

        for layers in 1..=3 {
            let (store, gt) = transformer(5, 5, layers, seed);
            let z = stack(&store, &gt, &inst.p, &e);
            let zp = stack(&store, &gt, &pp, &ep);
            stack_err = worse(stack_err, zp.max_abs_diff(&permute_rows(&z, &perm)));
        }
    }
    let worst = edge_err.max(stack_err).max(class_err);
    outcome(
        worst <= EQUIVARIANCE_TOL,
        format!(
            "10 seeds, L 1..3: edges {edge_err:.1e}, stack {stack_err:.1e}, class permutation {class_err:.1e} (tol {EQUIVARIANCE_TOL:.0e})"
        ),
    )
}

fn normalization() -> Outcome {
    let (mut softmax_err, mut mean_err, mut var_err) = (0.0f64, 0.0f64, 0.0f64);
    let worse = |acc: f64, d: f64| {
        if d.is_nan() {
            f64::INFINITY
        } else {
            acc.max(d)
        }
    };
    for seed in 0..10u64 {
        let (n, c) = (5, 4);
        let inst = head_instance(2000 + seed, n, c, 4);
        let maps = inst
            .head
            .attention_maps(&inst.store, &inst.p, &inst.rpkg)
            .unwrap();
        for slice in maps.data().chunks(c * c) {
            softmax_err = worse(softmax_err, (slice.iter().sum::<f64>() - 1.0).abs());
        }
        let e = predict_edges(&inst.p, &inst.rpkg, &inst.head, &inst.store).unwrap();
        let (store, gt) = transformer(5, 5, 3, seed);
        let mut tape = Tape::new();
        let b = store.bind_frozen(&mut tape);
        let (pv, ev) = (tape.constant(inst.p.clone()), tape.constant(e));
        for st in gt.run_traced(&mut tape, &b, pv, ev).unwrap() {
            for alpha in [st.trace.alpha_head, st.trace.alpha_tail] {
                for row in tape.value(alpha).data().chunks(n) {
                    softmax_err = worse(softmax_err, (row.iter().sum::<f64>() - 1.0).abs());
                }
            }
            for pre in [st.trace.pre_affine_1, st.trace.pre_affine_2] {
                let width = tape.shape(pre)[1];
                for row in tape.value(pre).data().chunks(width) {
                    let mean = row.iter().sum::<f64>() / width as f64;
                    let var =
                        row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / width as f64;
                    mean_err = worse(mean_err, mean.abs());
                    var_err = worse(var_err, (var - 1.0).abs());
                }
            }
        }
    }
    outcome(
        softmax_err <= SOFTMAX_TOL && mean_err <= LAYER_NORM_TOL && var_err <= LAYER_NORM_TOL,
        format!(
            "softmax |sum-1| {softmax_err:.1e} (tol {SOFTMAX_TOL:.0e}); LayerNorm |mean| {mean_err:.1e}, |var-1| {var_err:.1e} (tol {LAYER_NORM_TOL:.0e})"
        ),
    )
}

fn toy_graph(spec: &ToyTaskSpec, seed: u64) -> Rpkg64 {
    generate_corpus(spec, 400, SeedStream::new(seed))
        .unwrap()
        .build_rpkg(&Relation::ALL)
        .unwrap()
}

fn context_benefit() -> Outcome {
    let start = Instant::now();
    let spec = ToyTaskSpec::default();
    let rpkg = toy_graph(&spec, 0);
    let config = TrainConfig::default();
    let f = spec.feature_width;
    let run = |m: &ModelConfig| {
        let (_, log) = train(&spec, Some(&rpkg), m, &config).unwrap();
        final_metrics(&log).unwrap().clone()
    };
    let enhanced = run(&ModelConfig::enhanced(f));
    let baseline = run(&ModelConfig::baseline(f));
    let elapsed = start.elapsed();
    let (e, b) = (
        enhanced.ambiguous_acc.unwrap_or(f64::NAN),
        baseline.ambiguous_acc.unwrap_or(f64::NAN),
    );
    let gain = e - b;
    outcome(
        enhanced.proposals >= 2000
            && gain >= MIN_CONTEXT_GAIN
            && (gain - REFERENCE_CONTEXT_GAIN).abs() <= REFERENCE_GAIN_TOL
            && elapsed <= CONTEXT_BUDGET,
        format!(
            "ambiguous_acc enhanced {e:.4} vs baseline {b:.4} over {} proposals, gain {gain:.17} (min {MIN_CONTEXT_GAIN}, frozen {REFERENCE_CONTEXT_GAIN} +- {REFERENCE_GAIN_TOL}), {:.1}s",
            enhanced.proposals,
            elapsed.as_secs_f64()
        ),
    )
}

fn no_context_no_harm() -> Outcome {
    let spec = ToyTaskSpec::independent();
    let f = spec.feature_width;
    let mut gaps = Vec::new();
    for seed in 0..NO_HARM_SEEDS {
        let rpkg = toy_graph(&spec, seed);
        let config = TrainConfig {
            seed,
            eval_scenes: NO_HARM_EVAL_SCENES,
            eval_every: TrainConfig::default().steps,
            ..TrainConfig::default()
        };
        let acc = |m: &ModelConfig| {
            let (_, log) = train(&spec, Some(&rpkg), m, &config).unwrap();
            final_metrics(&log).unwrap().overall_acc
        };
        gaps.push(acc(&ModelConfig::enhanced(f)) - acc(&ModelConfig::baseline(f)));
    }
    let worst = gaps.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let shown: Vec<String> = gaps.iter().map(|g| format!("{:+.4}", g)).collect();
    outcome(
        worst <= NO_HARM_TOL,
        format!(
            "enhanced - baseline overall_acc per seed [{}], max |gap| {worst:.4} (tol {NO_HARM_TOL})",
            shown.join(", ")
        ),
    )
}

fn short_flags() -> Vec<&'static str> {
    vec![
        "--steps",
        "6",
        "--eval-every",
        "3",
        "--eval-scenes",
        "10",
        "--batch",
        "4",
    ]
}

fn make_toy_rpkg(dir: &Path) -> PathBuf {
    let corpus = dir.join("corpus");
    rpfem(&["generate-corpus", "--out", p(&corpus), "--images", "100"]);
    let out = dir.join("toy.rpkg");
    rpfem(&[
        "build-rpkg",
        "--annotations",
        p(&corpus.join("annotations.jsonl")),
        "--labelmap",
        p(&corpus.join("labelmap.json")),
        "--embeddings",
        p(&corpus.join("embeddings.json")),
        "--out",
        p(&out),
    ]);
    out
}

fn ablation_harness() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let rpkg = make_toy_rpkg(dir.path());
    let tables: Vec<String> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            let mut args = vec!["ablate", "--rpkg", p(&rpkg), "--out", p(&out)];
            args.extend(short_flags());
            rpfem(&args);
            fs::read_to_string(out.join("ablation.csv")).unwrap_or_default()
        })
        .collect();
    let rows: Vec<&str> = tables[0].lines().skip(1).collect();
    let study = |s: &str| {
        rows.iter()
            .filter(|r| r.split(',').nth(1) == Some(s))
            .count()
    };
    let axes = (study("heads"), study("layers"), study("relations"));
    outcome(
        rows.len() == 10 && axes == (3, 3, 4) && tables[0] == tables[1],
        format!(
            "{} rows (heads {}, layers {}, relations {}), identical across runs: {}",
            rows.len(),
            axes.0,
            axes.1,
            axes.2,
            tables[0] == tables[1]
        ),
    )
}

/// Every file under `dir`, relative path and bytes, sorted by path.
fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if !path.ends_with("ablation_timings.csv") {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Runs the whole workflow inside `dir` and returns every stdout.
fn workflow(dir: &Path) -> Vec<Vec<u8>> {
    let rpkg = make_toy_rpkg(dir);
    let runs = dir.join("runs");
    let mut outputs = Vec::new();
    let mut call = |args: Vec<&str>| {
        let o = rpfem(&args);
        assert!(
            o.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        outputs.push(o.stdout);
        String::from_utf8_lossy(&outputs.last().unwrap()[..]).into_owned()
    };
    call(vec![
        "build-rpkg",
        "--annotations",
        p(&micro("annotations.jsonl")),
        "--labelmap",
        p(&micro("labelmap.json")),
        "--synthetic-width",
        "6",
        "--seed",
        "3",
        "--relations",
        "orientation,distance",
        "--out",
        p(&dir.join("synthetic.rpkg")),
    ]);
    call(vec!["inspect-rpkg", p(&rpkg), "class0", "class1", "--json"]);
    call(vec!["gradcheck", "--seeds", "2"]);
    let mut enh = vec![
        "train-toy",
        "--rpkg",
        p(&rpkg),
        "--layers",
        "2",
        "--out",
        p(&runs),
    ];
    enh.extend(short_flags());
    let enhanced = call(enh).lines().last().unwrap().to_owned();
    let mut base = vec!["train-toy", "--baseline", "--out", p(&runs)];
    base.extend(short_flags());
    let baseline = call(base).lines().last().unwrap().to_owned();
    call(vec![
        "eval-toy",
        "--run",
        &enhanced,
        "--rpkg",
        p(&rpkg),
        "--scenes",
        "8",
    ]);
    call(vec!["eval-toy", "--run", &baseline, "--scenes", "8"]);
    let cmp = dir.join("compare.csv");
    call(vec![
        "compare",
        "--baseline",
        &baseline,
        "--enhanced",
        &enhanced,
        "--out",
        p(&cmp),
    ]);
    let ablation = dir.join("ablation");
    let mut abl = vec!["ablate", "--rpkg", p(&rpkg), "--out", p(&ablation)];
    abl.extend(short_flags());
    call(abl);
    // run directories and paths differ between the two roots
    let root = dir.display().to_string();
    outputs
        .into_iter()
        .map(|o| {
            String::from_utf8_lossy(&o)
                .replace(&root, "<root>")
                .into_bytes()
        })
        .collect()
}

fn cli_determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let out_a = workflow(a.path());
    let out_b = workflow(b.path());
    let (snap_a, snap_b) = (snapshot(a.path()), snapshot(b.path()));
    let differing: Vec<&str> = snap_a
        .iter()
        .zip(&snap_b)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let same_files = snap_a.len() == snap_b.len() && differing.is_empty();
    outcome(
        same_files && out_a == out_b,
        format!(
            "{} artifacts compared, {} differ{}; stdout identical: {}",
            snap_a.len(),
            differing.len(),
            if differing.is_empty() {
                String::new()
            } else {
                format!(" ({})", differing.join(", "))
            },
            out_a == out_b
        ),
    )
}

fn main() {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 9] = [
        ("gradient integrity", gradient_integrity),
        ("relation-head oracle equivalence", relation_head_oracle),
        ("RPKG correctness", rpkg_correctness),
        ("equivariance", equivariance),
        ("normalization", normalization),
        ("context benefit", context_benefit),
        ("no-context no-harm", no_context_no_harm),
        ("ablation harness", ablation_harness),
        ("CLI determinism", cli_determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let o = check();
        failed += usize::from(!o.passed);
        println!(
            "{} {name}: {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
