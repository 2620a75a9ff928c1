//! Proposal classifiers: the context-free baseline and the enhanced model
//! that classifies `[p_i ⊕ z_i]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph_transformer::{GraphTransformer, TransformerConfig};
use crate::relation_head::{RelationHead, RelationHeadConfig};
use crate::rpkg::{Relation, RelationalPriorKnowledgeGraph};
use crate::tensor::params::BoundParams;
use crate::tensor::rng::{xavier_uniform, SeedStream};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Classifier on the proposal features alone.
    pub baseline: bool,
    pub heads: usize,
    pub layers: usize,
    pub attn_width: usize,
    pub value_width: usize,
    pub edge_width: usize,
    pub adj_width: usize,
    pub relations: Vec<Relation>,
}

impl ModelConfig {
    /// Reference shape: two relation heads, one context update, all
    /// relations, every width equal to the feature width.
    pub fn enhanced(feature_width: usize) -> Self {
        ModelConfig {
            baseline: false,
            heads: 2,
            layers: 1,
            attn_width: feature_width,
            value_width: feature_width,
            edge_width: feature_width,
            adj_width: feature_width,
            relations: Relation::ALL.to_vec(),
        }
    }

    pub fn baseline(feature_width: usize) -> Self {
        ModelConfig {
            baseline: true,
            ..ModelConfig::enhanced(feature_width)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.baseline {
            return Ok(());
        }
        if self.heads == 0 || self.layers == 0 {
            return Err(Error::Config("heads and layers must be at least 1".into()));
        }
        if self.relations.is_empty() {
            return Err(Error::Config("no relations selected".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Context {
    relation: RelationHead,
    transformer: GraphTransformer,
}

/// Trainable proposal classifier with `C + 1` outputs (last = duplicate).
#[derive(Clone, Debug)]
pub struct ToyModel {
    config: ModelConfig,
    feature_width: usize,
    outputs: usize,
    store: ParamStore<f64>,
    context: Option<Context>,
    cls_w: ParamId,
    cls_b: ParamId,
}

impl ToyModel {
    /// `rpkg` must already be restricted to `config.relations`; it fixes the
    /// embedding and prior widths of the relation head. The baseline
    /// ignores it.
    pub fn new(
        config: &ModelConfig,
        num_classes: usize,
        feature_width: usize,
        rpkg: Option<&RelationalPriorKnowledgeGraph<f64>>,
        seed: SeedStream,
    ) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = seed.split("weights").rng();
        let context = if config.baseline {
            None
        } else {
            let rpkg = rpkg.ok_or_else(|| {
                Error::Config("the enhanced model needs a prior graph (or use --baseline)".into())
            })?;
            if rpkg.relations() != config.relations.as_slice() {
                return Err(Error::Config(format!(
                    "prior graph relations {:?} differ from the configured {:?}",
                    rpkg.relations(),
                    config.relations
                )));
            }
            let relation = RelationHead::new(
                &mut store,
                "relation",
                feature_width,
                rpkg.embedding_width(),
                rpkg.prior_width(),
                RelationHeadConfig {
                    heads: config.heads,
                    attn_width: config.attn_width,
                    value_width: config.value_width,
                    edge_width: config.edge_width,
                },
                &mut rng,
            )?;
            let transformer = GraphTransformer::new(
                &mut store,
                "context",
                TransformerConfig::new(
                    feature_width,
                    config.edge_width,
                    config.adj_width,
                    config.layers,
                ),
                &mut rng,
            )?;
            Some(Context {
                relation,
                transformer,
            })
        };
        let fan_in = if context.is_some() {
            2 * feature_width
        } else {
            feature_width
        };
        let outputs = num_classes + 1;
        let cls_w = store.add("classifier.w", xavier_uniform(&mut rng, fan_in, outputs));
        let cls_b = store.add("classifier.b", Tensor::zeros([outputs]));
        Ok(ToyModel {
            config: config.clone(),
            feature_width,
            outputs,
            store,
            context,
            cls_w,
            cls_b,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<f64> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<f64> {
        &mut self.store
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    /// Logits `N × (C + 1)` recorded on `tape`.
    pub fn forward(
        &self,
        tape: &mut Tape<f64>,
        params: &BoundParams,
        p: Var,
        rpkg: Option<&RelationalPriorKnowledgeGraph<f64>>,
    ) -> Result<Var> {
        match tape.shape(p) {
            [n, f] if *n >= 1 && *f == self.feature_width => {}
            s => return Err(Error::dim("toy forward", s, &[0, self.feature_width])),
        }
        let x = match &self.context {
            None => p,
            Some(ctx) => {
                let rpkg = rpkg.ok_or_else(|| Error::Config("missing prior graph".into()))?;
                let e = ctx.relation.forward(tape, params, p, rpkg)?;
                let z = ctx.transformer.run_stack(tape, params, p, e)?;
                tape.concat(&[p, z], 1)?
            }
        };
        tape.linear(x, params.var(self.cls_w), params.var(self.cls_b))
    }

    /// Inference-only logits.
    pub fn logits(
        &self,
        features: &Tensor<f64>,
        rpkg: Option<&RelationalPriorKnowledgeGraph<f64>>,
    ) -> Result<Tensor<f64>> {
        let mut tape = Tape::new();
        let params = self.store.bind_frozen(&mut tape);
        let p = tape.constant(features.clone());
        let out = self.forward(&mut tape, &params, p, rpkg)?;
        Ok(tape.value(out).clone())
    }

    /// Mean cross-entropy over the proposals of one scene and its parameter
    /// gradients in store order.
    pub fn loss_and_grads(
        &self,
        features: &Tensor<f64>,
        labels: &[usize],
        rpkg: Option<&RelationalPriorKnowledgeGraph<f64>>,
    ) -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut tape = Tape::new();
        let params = self.store.bind(&mut tape);
        let p = tape.constant(features.clone());
        let logits = self.forward(&mut tape, &params, p, rpkg)?;
        let loss = tape.cross_entropy(logits, labels)?;
        let grads = tape.backward(loss)?;
        Ok((
            tape.value(loss).data()[0],
            self.store.collect_grads(&params, &grads),
        ))
    }
}

/// Index of the largest entry of each row; ties go to the lower index.
pub fn argmax_rows(logits: &Tensor<f64>) -> Vec<usize> {
    let k = logits.last_dim();
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect()
}
