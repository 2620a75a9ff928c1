//! Gradient checks for every differentiable op and for the composed
//! stacks, at central-difference step `1e-5`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph_transformer::{GraphTransformer, TransformerConfig};
use crate::relation_head::{RelationHead, RelationHeadConfig};
use crate::rpkg::{Relation, RelationalPriorKnowledgeGraph};
use crate::tensor::gradcheck::{grad_check, GradCheckReport};
use crate::tensor::params::BoundParams;
use crate::tensor::rng::{uniform, Rng, SeedStream};
use crate::tensor::{ParamStore, Tape, Tensor, Var};
use crate::toy::model::{ModelConfig, ToyModel};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Problem sizes for the composed checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteSizes {
    /// Proposals `N`.
    pub nodes: usize,
    /// Classes `C`.
    pub classes: usize,
    /// Feature width shared by nodes, class embeddings and edges.
    pub width: usize,
}

impl Default for SuiteSizes {
    fn default() -> Self {
        SuiteSizes {
            nodes: 3,
            classes: 3,
            width: 4,
        }
    }
}

fn rand_t(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    uniform(rng, shape, -1.0, 1.0)
}

/// Values bounded away from zero, so kinked ops stay differentiable.
fn away_from_zero(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Weighted sum `Σ w ⊙ y` with fixed random weights, so every output
/// element contributes a distinct amount to the scalar.
fn probe(tape: &mut Tape<f64>, y: Var, w: &Tensor<f64>) -> Result<Var> {
    let c = tape.constant(w.clone());
    let p = tape.mul(y, c)?;
    tape.sum(p)
}

fn check<F>(name: &str, inputs: &[Tensor<f64>], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check(name, f, inputs, STEP, TOLERANCE)
}

fn op_checks(seed: SeedStream) -> Result<Vec<GradCheckReport>> {
    let mut rng = seed.split("ops").rng();
    let r = &mut rng;
    let mut out = Vec::new();

    let w = rand_t(r, &[3, 2]);
    out.push(check(
        "matmul",
        &[rand_t(r, &[3, 4]), rand_t(r, &[4, 2])],
        |t, v| {
            let y = t.matmul(v[0], v[1])?;
            probe(t, y, &w)
        },
    )?);
    let w = rand_t(r, &[2, 3, 2]);
    out.push(check(
        "batch_matmul",
        &[rand_t(r, &[2, 3, 4]), rand_t(r, &[2, 4, 2])],
        |t, v| {
            let y = t.batch_matmul(v[0], v[1])?;
            probe(t, y, &w)
        },
    )?);
    let w = rand_t(r, &[4, 3]);
    out.push(check("transpose", &[rand_t(r, &[3, 4])], |t, v| {
        let y = t.transpose(v[0])?;
        probe(t, y, &w)
    })?);
    let w = rand_t(r, &[3, 4]);
    let pair = [rand_t(r, &[3, 4]), rand_t(r, &[3, 4])];
    out.push(check("add", &pair, |t, v| {
        let y = t.add(v[0], v[1])?;
        probe(t, y, &w)
    })?);
    out.push(check("sub", &pair, |t, v| {
        let y = t.sub(v[0], v[1])?;
        probe(t, y, &w)
    })?);
    out.push(check("mul", &pair, |t, v| {
        let y = t.mul(v[0], v[1])?;
        probe(t, y, &w)
    })?);
    let row = [rand_t(r, &[3, 4]), rand_t(r, &[4])];
    out.push(check("add_bias", &row, |t, v| {
        let y = t.add_bias(v[0], v[1])?;
        probe(t, y, &w)
    })?);
    out.push(check("scale_cols", &row, |t, v| {
        let y = t.scale_cols(v[0], v[1])?;
        probe(t, y, &w)
    })?);
    out.push(check(
        "scale_rows",
        &[rand_t(r, &[3, 4]), rand_t(r, &[3, 1])],
        |t, v| {
            let y = t.scale_rows(v[0], v[1])?;
            probe(t, y, &w)
        },
    )?);
    out.push(check("scale", &[rand_t(r, &[3, 4])], |t, v| {
        let y = t.scale(v[0], -0.7)?;
        probe(t, y, &w)
    })?);
    out.push(check(
        "leaky_relu",
        &[away_from_zero(r, &[3, 4])],
        |t, v| {
            let y = t.leaky_relu(v[0], 0.01)?;
            probe(t, y, &w)
        },
    )?);
    let x = rand_t(r, &[3, 4]).map(|v| 3.0 * v);
    for axis in [0, 1] {
        out.push(check(
            &format!("softmax(axis={axis})"),
            std::slice::from_ref(&x),
            |t, v| {
                let y = t.softmax(v[0], axis)?;
                probe(t, y, &w)
            },
        )?);
    }
    out.push(check("normalize", std::slice::from_ref(&x), |t, v| {
        let y = t.normalize(v[0], 1e-5)?;
        probe(t, y, &w)
    })?);
    out.push(check(
        "layer_norm",
        &[x.clone(), rand_t(r, &[4]), rand_t(r, &[4])],
        |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            probe(t, y, &w)
        },
    )?);
    let w2 = rand_t(r, &[3, 2]);
    out.push(check(
        "linear",
        &[rand_t(r, &[3, 4]), rand_t(r, &[4, 2]), rand_t(r, &[2])],
        |t, v| {
            let y = t.linear(v[0], v[1], v[2])?;
            probe(t, y, &w2)
        },
    )?);
    let wc = rand_t(r, &[3, 5]);
    out.push(check(
        "concat",
        &[rand_t(r, &[3, 2]), rand_t(r, &[3, 3])],
        |t, v| {
            let y = t.concat(&[v[0], v[1]], 1)?;
            probe(t, y, &wc)
        },
    )?);
    let wg = rand_t(r, &[5, 4]);
    out.push(check("gather", &[rand_t(r, &[3, 4])], |t, v| {
        let y = t.gather(v[0], &[2, 0, 2, 1, 0])?;
        probe(t, y, &wg)
    })?);
    let wr = rand_t(r, &[2, 6]);
    out.push(check("reshape", &[rand_t(r, &[3, 4])], |t, v| {
        let y = t.reshape(v[0], &[2, 6])?;
        probe(t, y, &wr)
    })?);
    let wn = rand_t(r, &[3, 2]);
    out.push(check("narrow", &[rand_t(r, &[3, 4])], |t, v| {
        let y = t.narrow(v[0], 1, 2)?;
        probe(t, y, &wn)
    })?);
    out.push(check("sum", &[rand_t(r, &[3, 4])], |t, v| {
        let y = t.mul(v[0], v[0])?;
        t.sum(y)
    })?);
    out.push(check("mean", &[rand_t(r, &[3, 4])], |t, v| {
        let y = t.mul(v[0], v[0])?;
        t.mean(y)
    })?);
    let targets: Vec<usize> = (0..4).map(|_| r.random_range(0..3)).collect();
    out.push(check(
        "cross_entropy",
        &[rand_t(r, &[4, 3]).map(|v| 2.0 * v)],
        |t, v| t.cross_entropy(v[0], &targets),
    )?);
    Ok(out)
}

fn random_rpkg(
    sizes: SuiteSizes,
    relations: &[Relation],
    rng: &mut Rng,
) -> Result<RelationalPriorKnowledgeGraph<f64>> {
    let c = sizes.classes;
    let r: usize = relations.iter().map(|x| x.width()).sum();
    RelationalPriorKnowledgeGraph::new(
        (0..c).map(|i| format!("class{i}")).collect(),
        relations.to_vec(),
        rand_t(rng, &[c, sizes.width]),
        uniform(rng, &[c, c, r], 0.0, 1.0),
    )
}

fn with_params(store: &ParamStore<f64>, leading: &[Tensor<f64>]) -> Vec<Tensor<f64>> {
    let mut v = leading.to_vec();
    v.extend(store.tensors().iter().cloned());
    v
}

fn bound(vars: &[Var], skip: usize) -> BoundParams {
    BoundParams::from_vars(vars[skip..].to_vec())
}

fn stack_checks(seed: SeedStream, sizes: SuiteSizes) -> Result<Vec<GradCheckReport>> {
    let mut rng = seed.split("stacks").rng();
    let r = &mut rng;
    let (n, f) = (sizes.nodes, sizes.width);
    let rpkg = random_rpkg(sizes, &[Relation::Cooccurrence, Relation::Distance], r)?;
    let mut out = Vec::new();

    let mut store = ParamStore::new();
    let head = RelationHead::new(
        &mut store,
        "relation",
        f,
        f,
        rpkg.prior_width(),
        RelationHeadConfig {
            heads: 2,
            attn_width: f,
            value_width: f,
            edge_width: f,
        },
        r,
    )?;
    let p = rand_t(r, &[n, f]);
    let we = rand_t(r, &[n, n, f]);
    out.push(check(
        "relation_head",
        &with_params(&store, std::slice::from_ref(&p)),
        |t, v| {
            let e = head.forward(t, &bound(v, 1), v[0], &rpkg)?;
            probe(t, e, &we)
        },
    )?);

    let e = rand_t(r, &[n, n, f]);
    let wz = rand_t(r, &[n, f]);
    for layers in [1, 2] {
        let mut store = ParamStore::new();
        let gt = GraphTransformer::new(
            &mut store,
            "context",
            TransformerConfig::new(f, f, f, layers),
            r,
        )?;
        for (name, t) in store.names().to_vec().iter().zip(store.tensors_mut()) {
            if name.contains("norm") {
                *t = uniform(r, t.shape(), 0.5, 1.5);
            }
        }
        let inputs = with_params(&store, &[p.clone(), e.clone()]);
        if layers == 1 {
            out.push(check("context_update", &inputs, |t, v| {
                let (z, _) = gt.layers()[0].context_update(t, &bound(v, 2), v[0], v[1], 0)?;
                probe(t, z, &wz)
            })?);
        } else {
            let wa = rand_t(r, &[n, n, f]);
            out.push(check("update_adjacency", &inputs, |t, v| {
                let a = gt.layers()[0].update_adjacency(t, &bound(v, 2), v[0], v[1], 0)?;
                probe(t, a, &wa)
            })?);
        }
        out.push(check(
            &format!("run_stack(L={layers})"),
            &inputs,
            |t, v| {
                let z = gt.run_stack(t, &bound(v, 2), v[0], v[1])?;
                t.sum(z)
            },
        )?);
    }

    let model_cfg = ModelConfig {
        layers: 2,
        relations: rpkg.relations().to_vec(),
        ..ModelConfig::enhanced(f)
    };
    let model = ToyModel::new(&model_cfg, sizes.classes, f, Some(&rpkg), seed.split("toy"))?;
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..=sizes.classes)).collect();
    out.push(check(
        "toy_forward",
        &with_params(model.store(), std::slice::from_ref(&p)),
        |t, v| {
            let logits = model.forward(t, &bound(v, 1), v[0], Some(&rpkg))?;
            t.cross_entropy(logits, &labels)
        },
    )?);
    Ok(out)
}

/// Every op check followed by the composed checks, for one seed.
pub fn gradcheck_suite(seed: u64, sizes: SuiteSizes) -> Result<Vec<GradCheckReport>> {
    let s = SeedStream::new(seed).split("gradcheck");
    let mut reports = op_checks(s)?;
    reports.extend(stack_checks(s, sizes)?);
    Ok(reports)
}
