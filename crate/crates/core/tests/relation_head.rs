use rpfem_core::relation_head::{predict_edges, RelationHead, RelationHeadConfig};
use rpfem_core::rpkg::{Relation, RelationalPriorKnowledgeGraph};
use rpfem_core::tensor::gradcheck::grad_check;
use rpfem_core::tensor::params::BoundParams;
use rpfem_core::tensor::rng::{uniform, SeedStream};
use rpfem_core::tensor::{ParamStore, Tensor};

use rand::seq::SliceRandom;
use rand::Rng;

struct Instance {
    p: Tensor<f64>,
    rpkg: RelationalPriorKnowledgeGraph<f64>,
    store: ParamStore<f64>,
    head: RelationHead,
}

fn instance(seed: u64, n: usize, c: usize, heads: usize) -> Instance {
    let s = SeedStream::new(seed);
    let (fp, fr, da, dv, fe) = (4, 3, 5, 3, 4);
    let rels = vec![Relation::Cooccurrence, Relation::Distance];
    let rpkg = RelationalPriorKnowledgeGraph::new(
        (0..c).map(|i| format!("c{i}")).collect(),
        rels,
        uniform(&mut s.split("d").rng(), &[c, fr], -1.0, 1.0),
        uniform(&mut s.split("k").rng(), &[c, c, 3], 0.0, 1.0),
    )
    .unwrap();
    let mut store = ParamStore::new();
    let cfg = RelationHeadConfig {
        heads,
        attn_width: da,
        value_width: dv,
        edge_width: fe,
    };
    let head =
        RelationHead::new(&mut store, "rel", fp, fr, 3, cfg, &mut s.split("w").rng()).unwrap();
    let p = uniform(&mut s.split("p").rng(), &[n, fp], -1.5, 1.5);
    Instance {
        p,
        rpkg,
        store,
        head,
    }
}

fn mat(store: &ParamStore<f64>, name: &str) -> Vec<Vec<f64>> {
    let t = store.get(store.find(name).unwrap());
    (0..t.shape()[0]).map(|r| t.row(r).to_vec()).collect()
}

fn vec_mat(x: &[f64], w: &[Vec<f64>]) -> Vec<f64> {
    let cols = w[0].len();
    (0..cols)
        .map(|k| x.iter().zip(w).map(|(a, row)| a * row[k]).sum())
        .collect()
}

/// Direct transcription: loop over (i, j), then over (u, v), per head.
fn brute_force(inst: &Instance, heads: usize) -> Vec<f64> {
    let (p, g) = (&inst.p, &inst.rpkg);
    let n = p.shape()[0];
    let c = g.num_classes();
    let d_a = inst.head.config().attn_width as f64;
    let w_e = mat(&inst.store, "rel.w_e");
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let mut merged = Vec::new();
            for h in 0..heads {
                let w_q = mat(&inst.store, &format!("rel.head{h}.w_q"));
                let w_k = mat(&inst.store, &format!("rel.head{h}.w_k"));
                let w_v = mat(&inst.store, &format!("rel.head{h}.w_v"));
                let pij: Vec<f64> = p.row(i).iter().chain(p.row(j)).copied().collect();
                let q = vec_mat(&pij, &w_q);
                let mut logits = Vec::new();
                let mut values = Vec::new();
                for u in 0..c {
                    for v in 0..c {
                        let duv: Vec<f64> = g
                            .embeddings()
                            .row(u)
                            .iter()
                            .chain(g.embeddings().row(v))
                            .copied()
                            .collect();
                        let k = vec_mat(&duv, &w_k);
                        logits.push(q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / d_a.sqrt());
                        values.push(vec_mat(g.prior(u, v), &w_v));
                    }
                }
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let ex: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z: f64 = ex.iter().sum();
                let mut acc = vec![0.0; values[0].len()];
                for (e, val) in ex.iter().zip(&values) {
                    for (a, x) in acc.iter_mut().zip(val) {
                        *a += e / z * x;
                    }
                }
                merged.extend(acc);
            }
            out.extend(vec_mat(&merged, &w_e));
        }
    }
    out
}

#[test]
fn vectorized_path_matches_quadruple_loop() {
    let mut rng = SeedStream::new(2024).rng();
    let mut worst = 0.0f64;
    for k in 0..50 {
        let n = rng.random_range(1..=8);
        let c = rng.random_range(1..=6);
        let heads = [1, 2, 4][k % 3];
        let inst = instance(k as u64, n, c, heads);
        let e = predict_edges(&inst.p, &inst.rpkg, &inst.head, &inst.store).unwrap();
        let oracle = brute_force(&inst, heads);
        assert_eq!(e.len(), oracle.len());
        for (a, b) in e.data().iter().zip(&oracle) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst <= 1e-10, "max abs difference {worst:e}");
}

#[test]
fn small_blocks_match_the_oracle() {
    let inst = instance(77, 3, 2, 2);
    let head = inst.head.clone().with_block_rows(2);
    let e = predict_edges(&inst.p, &inst.rpkg, &head, &inst.store).unwrap();
    let oracle = brute_force(&inst, 2);
    for (a, b) in e.data().iter().zip(&oracle) {
        assert!((a - b).abs() <= 1e-10);
    }
}

fn permute_rows(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let mut data = Vec::new();
    for &p in perm {
        data.extend_from_slice(t.row(p));
    }
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

#[test]
fn proposal_permutation_is_equivariant() {
    for seed in 0..10 {
        let inst = instance(100 + seed, 6, 4, 2);
        let mut perm: Vec<usize> = (0..6).collect();
        perm.shuffle(&mut SeedStream::new(seed).rng());
        let e = predict_edges(&inst.p, &inst.rpkg, &inst.head, &inst.store).unwrap();
        let pp = permute_rows(&inst.p, &perm);
        let ep = predict_edges(&pp, &inst.rpkg, &inst.head, &inst.store).unwrap();
        for a in 0..6 {
            for b in 0..6 {
                for k in 0..4 {
                    let diff = ep.at(&[a, b, k]) - e.at(&[perm[a], perm[b], k]);
                    assert!(diff.abs() <= 1e-10, "seed {seed}: {diff:e}");
                }
            }
        }
    }
}

#[test]
fn class_permutation_leaves_edges_unchanged() {
    for seed in 0..10 {
        let inst = instance(200 + seed, 5, 6, 2);
        let mut perm: Vec<usize> = (0..6).collect();
        perm.shuffle(&mut SeedStream::new(seed).rng());
        let permuted = inst.rpkg.permute_classes(&perm).unwrap();
        let e = predict_edges(&inst.p, &inst.rpkg, &inst.head, &inst.store).unwrap();
        let ep = predict_edges(&inst.p, &permuted, &inst.head, &inst.store).unwrap();
        assert!(e.max_abs_diff(&ep) <= 1e-9, "seed {seed}");

        // α's class axes follow the permutation
        let a = inst
            .head
            .attention_maps(&inst.store, &inst.p, &inst.rpkg)
            .unwrap();
        let ap = inst
            .head
            .attention_maps(&inst.store, &inst.p, &permuted)
            .unwrap();
        for h in 0..2 {
            for i in 0..5 {
                for j in 0..5 {
                    for u in 0..6 {
                        for v in 0..6 {
                            let d = ap.at(&[h, i, j, u, v]) - a.at(&[h, i, j, perm[u], perm[v]]);
                            assert!(d.abs() <= 1e-12);
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn attention_slices_are_distributions() {
    for seed in 0..10 {
        let inst = instance(300 + seed, 4, 5, 4);
        let a = inst
            .head
            .attention_maps(&inst.store, &inst.p, &inst.rpkg)
            .unwrap();
        for slice in a.data().chunks(25) {
            assert!(slice.iter().all(|&x| (0.0..=1.0).contains(&x)));
            assert!((slice.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }
}

#[test]
fn gradient_through_edges_matches_finite_differences() {
    let inst = instance(9, 3, 3, 2);
    let mut inputs = vec![inst.p.clone()];
    inputs.extend(inst.store.tensors().iter().cloned());
    let weights = uniform(&mut SeedStream::new(10).rng(), &[3, 3, 4], -1.0, 1.0);
    let report = grad_check(
        "predict_edges",
        |tape, vars| {
            let bound = BoundParams::from_vars(vars[1..].to_vec());
            let e = inst.head.forward(tape, &bound, vars[0], &inst.rpkg)?;
            let w = tape.constant(weights.clone());
            let y = tape.mul(e, w)?;
            tape.sum(y)
        },
        &inputs,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}
