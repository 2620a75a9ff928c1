//! Prior-conditioned edge prediction.
//!
//! Every ordered proposal pair `(i, j)` queries every ordered class pair
//! `(u, v)` of the prior graph. The query is a projection of `[p_i ⊕ p_j]`,
//! the key a projection of `[d_u ⊕ d_v]`; attention weights come from a
//! softmax over all `C²` scaled dot products and aggregate projected prior
//! vectors `K[u, v]`. Per-head results are concatenated and mapped to the
//! edge width by a shared output matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rpkg::RelationalPriorKnowledgeGraph;
use crate::scalar::Scalar;
use crate::tensor::params::BoundParams;
use crate::tensor::rng::{xavier_uniform, Rng};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Upper bound on the number of attention logits held by one block.
const BLOCK_LOGITS: usize = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationHeadConfig {
    pub heads: usize,
    /// Query/key width `d_a`.
    pub attn_width: usize,
    /// Per-head value width `d_v`.
    pub value_width: usize,
    /// Output edge width `F_e`.
    pub edge_width: usize,
}

#[derive(Clone, Copy, Debug)]
struct HeadParams {
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
}

/// Relation-head weights bound to one prior graph layout (`F_p`, `F_r`, `R`).
#[derive(Clone, Debug)]
pub struct RelationHead {
    config: RelationHeadConfig,
    node_width: usize,
    embedding_width: usize,
    prior_width: usize,
    heads: Vec<HeadParams>,
    w_e: ParamId,
    /// Pair rows per block; `None` picks one from `BLOCK_LOGITS`.
    block_rows: Option<usize>,
}

impl RelationHead {
    /// Registers Xavier-initialized weights under `prefix` in `store`.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        node_width: usize,
        embedding_width: usize,
        prior_width: usize,
        config: RelationHeadConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        let RelationHeadConfig {
            heads,
            attn_width,
            value_width,
            edge_width,
        } = config;
        if heads == 0 || attn_width == 0 || value_width == 0 || edge_width == 0 {
            return Err(Error::Config(format!(
                "degenerate relation head {config:?}"
            )));
        }
        if node_width == 0 || embedding_width == 0 || prior_width == 0 {
            return Err(Error::Config("relation head needs non-empty inputs".into()));
        }
        let heads = (0..heads)
            .map(|h| HeadParams {
                w_q: store.add(
                    format!("{prefix}.head{h}.w_q"),
                    xavier_uniform(rng, 2 * node_width, attn_width),
                ),
                w_k: store.add(
                    format!("{prefix}.head{h}.w_k"),
                    xavier_uniform(rng, 2 * embedding_width, attn_width),
                ),
                w_v: store.add(
                    format!("{prefix}.head{h}.w_v"),
                    xavier_uniform(rng, prior_width, value_width),
                ),
            })
            .collect::<Vec<_>>();
        let w_e = store.add(
            format!("{prefix}.w_e"),
            xavier_uniform(rng, config.heads * value_width, edge_width),
        );
        Ok(RelationHead {
            config,
            node_width,
            embedding_width,
            prior_width,
            heads,
            w_e,
            block_rows: None,
        })
    }

    pub fn config(&self) -> &RelationHeadConfig {
        &self.config
    }

    pub fn edge_width(&self) -> usize {
        self.config.edge_width
    }

    /// Forces a block size (pair rows per attention block).
    pub fn with_block_rows(mut self, rows: usize) -> Self {
        self.block_rows = Some(rows.max(1));
        self
    }

    fn check<T: Scalar>(
        &self,
        p_shape: &[usize],
        rpkg: &RelationalPriorKnowledgeGraph<T>,
    ) -> Result<usize> {
        if rpkg.num_classes() == 0 {
            return Err(Error::Contract("prior graph has no classes".into()));
        }
        let n = match *p_shape {
            [n, f] if f == self.node_width && n >= 1 => n,
            _ => {
                return Err(Error::Config(format!(
                    "proposal features {p_shape:?} do not match node width {}",
                    self.node_width
                )))
            }
        };
        if rpkg.embedding_width() != self.embedding_width || rpkg.prior_width() != self.prior_width
        {
            return Err(Error::Config(format!(
                "prior graph widths (F_r={}, R={}) do not match the head (F_r={}, R={})",
                rpkg.embedding_width(),
                rpkg.prior_width(),
                self.embedding_width,
                self.prior_width
            )));
        }
        Ok(n)
    }

    /// Records edge prediction on `tape`; returns `E` with shape `N × N × F_e`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &BoundParams,
        p: Var,
        rpkg: &RelationalPriorKnowledgeGraph<T>,
    ) -> Result<Var> {
        let n = self.check(tape.shape(p), rpkg)?;
        let c = rpkg.num_classes();
        let pairs = n * n;

        let d = tape.constant(rpkg.embeddings().clone());
        let (cu, cv): (Vec<usize>, Vec<usize>) = (0..c * c).map(|uv| (uv / c, uv % c)).unzip();
        let du = tape.gather(d, &cu)?;
        let dv = tape.gather(d, &cv)?;
        let d_pairs = tape.concat(&[du, dv], 1)?;
        let k_flat = tape.constant(rpkg.priors().clone().reshape([c * c, self.prior_width])?);

        let block = self
            .block_rows
            .unwrap_or_else(|| (BLOCK_LOGITS / (c * c)).max(1));
        let scale = T::of(1.0 / (self.config.attn_width as f64).sqrt());

        let mut head_outputs = Vec::with_capacity(self.heads.len());
        for hp in &self.heads {
            let keys = tape.matmul(d_pairs, params.var(hp.w_k))?;
            let keys_t = tape.transpose(keys)?;
            let values = tape.matmul(k_flat, params.var(hp.w_v))?;
            let mut blocks = Vec::with_capacity(pairs.div_ceil(block));
            for start in (0..pairs).step_by(block) {
                let end = (start + block).min(pairs);
                let (pi, pj): (Vec<usize>, Vec<usize>) =
                    (start..end).map(|ij| (ij / n, ij % n)).unzip();
                let a = tape.gather(p, &pi)?;
                let b = tape.gather(p, &pj)?;
                let q_in = tape.concat(&[a, b], 1)?;
                let q = tape.matmul(q_in, params.var(hp.w_q))?;
                let logits = tape.matmul(q, keys_t)?;
                let logits = tape.scale(logits, scale)?;
                let alpha = tape.softmax(logits, 1)?;
                blocks.push(tape.matmul(alpha, values)?);
            }
            head_outputs.push(if blocks.len() == 1 {
                blocks[0]
            } else {
                tape.concat(&blocks, 0)?
            });
        }
        let merged = if head_outputs.len() == 1 {
            head_outputs[0]
        } else {
            tape.concat(&head_outputs, 1)?
        };
        let e = tape.matmul(merged, params.var(self.w_e))?;
        tape.reshape(e, &[n, n, self.config.edge_width])
    }

    /// Attention weights `H × N × N × C × C`, for inspection only.
    pub fn attention_maps<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        p: &Tensor<T>,
        rpkg: &RelationalPriorKnowledgeGraph<T>,
    ) -> Result<Tensor<T>> {
        let n = self.check(p.shape(), rpkg)?;
        let c = rpkg.num_classes();
        let mut tape = Tape::new();
        let params = store.bind_frozen(&mut tape);
        let pv = tape.constant(p.clone());
        let d = tape.constant(rpkg.embeddings().clone());
        let (cu, cv): (Vec<usize>, Vec<usize>) = (0..c * c).map(|uv| (uv / c, uv % c)).unzip();
        let du = tape.gather(d, &cu)?;
        let dv = tape.gather(d, &cv)?;
        let d_pairs = tape.concat(&[du, dv], 1)?;
        let (pi, pj): (Vec<usize>, Vec<usize>) = (0..n * n).map(|ij| (ij / n, ij % n)).unzip();
        let a = tape.gather(pv, &pi)?;
        let b = tape.gather(pv, &pj)?;
        let q_in = tape.concat(&[a, b], 1)?;
        let scale = T::of(1.0 / (self.config.attn_width as f64).sqrt());
        let mut out = Vec::with_capacity(self.heads.len() * n * n * c * c);
        for hp in &self.heads {
            let keys = tape.matmul(d_pairs, params.var(hp.w_k))?;
            let keys_t = tape.transpose(keys)?;
            let q = tape.matmul(q_in, params.var(hp.w_q))?;
            let logits = tape.matmul(q, keys_t)?;
            let logits = tape.scale(logits, scale)?;
            let alpha = tape.softmax(logits, 1)?;
            out.extend_from_slice(tape.value(alpha).data());
        }
        Tensor::new([self.heads.len(), n, n, c, c], out)
    }
}

/// Edge prediction without gradient tracking.
pub fn predict_edges<T: Scalar>(
    p: &Tensor<T>,
    rpkg: &RelationalPriorKnowledgeGraph<T>,
    head: &RelationHead,
    store: &ParamStore<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let params = store.bind_frozen(&mut tape);
    let pv = tape.constant(p.clone());
    let e = head.forward(&mut tape, &params, pv, rpkg)?;
    Ok(tape.value(e).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rpkg::Relation;
    use crate::tensor::rng::{uniform, SeedStream};

    fn random_rpkg(c: usize, f: usize, seed: u64) -> RelationalPriorKnowledgeGraph<f64> {
        let mut rng = SeedStream::new(seed).rng();
        RelationalPriorKnowledgeGraph::new(
            (0..c).map(|i| format!("class{i}")).collect(),
            vec![Relation::Distance],
            uniform(&mut rng, &[c, f], -1.0, 1.0),
            uniform(&mut rng, &[c, c, 2], 0.0, 1.0),
        )
        .unwrap()
    }

    fn head(store: &mut ParamStore<f64>, heads: usize, fp: usize, fr: usize) -> RelationHead {
        let cfg = RelationHeadConfig {
            heads,
            attn_width: 5,
            value_width: 3,
            edge_width: 4,
        };
        RelationHead::new(store, "rel", fp, fr, 2, cfg, &mut SeedStream::new(3).rng()).unwrap()
    }

    #[test]
    fn single_class_gives_identical_edges() {
        let rpkg = random_rpkg(1, 4, 1);
        let mut store = ParamStore::new();
        let h = head(&mut store, 2, 4, 4);
        let p = uniform(&mut SeedStream::new(2).rng(), &[3, 4], -1.0, 1.0);
        let e = predict_edges(&p, &rpkg, &h, &store).unwrap();
        for ij in 1..9 {
            assert_eq!(e.row(ij), e.row(0));
        }
        let a = h.attention_maps(&store, &p, &rpkg).unwrap();
        assert!(a.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn identical_embeddings_give_uniform_attention() {
        let base = random_rpkg(3, 4, 9);
        let d = Tensor::from_f64([3, 4], &[0.5, -0.25, 1.0, 0.0].repeat(3)).unwrap();
        let rpkg = RelationalPriorKnowledgeGraph::new(
            base.classes().to_vec(),
            base.relations().to_vec(),
            d,
            base.priors().clone(),
        )
        .unwrap();
        let mut store = ParamStore::new();
        let h = head(&mut store, 1, 4, 4);
        let p = uniform(&mut SeedStream::new(4).rng(), &[2, 4], -1.0, 1.0);
        let a = h.attention_maps(&store, &p, &rpkg).unwrap();
        for &v in a.data() {
            assert!((v - 1.0 / 9.0).abs() < 1e-15);
        }
    }

    #[test]
    fn block_size_does_not_change_result() {
        let rpkg = random_rpkg(3, 4, 5);
        let mut store = ParamStore::new();
        let h = head(&mut store, 2, 4, 4);
        let p = uniform(&mut SeedStream::new(6).rng(), &[4, 4], -1.0, 1.0);
        let full = predict_edges(&p, &rpkg, &h, &store).unwrap();
        let blocked = predict_edges(&p, &rpkg, &h.clone().with_block_rows(3), &store).unwrap();
        assert_eq!(full, blocked);
    }

    #[test]
    fn width_mismatch_and_empty_graph() {
        let rpkg = random_rpkg(2, 4, 1);
        let mut store = ParamStore::new();
        let h = head(&mut store, 1, 4, 3);
        let p = Tensor::zeros([2, 4]);
        assert!(matches!(
            predict_edges(&p, &rpkg, &h, &store),
            Err(Error::Config(_))
        ));

        let empty = RelationalPriorKnowledgeGraph::new(
            vec![],
            vec![Relation::Distance],
            Tensor::zeros([0, 4]),
            Tensor::zeros([0, 0, 2]),
        )
        .unwrap();
        let h = head(&mut store, 1, 4, 4);
        assert!(matches!(
            predict_edges(&p, &empty, &h, &store),
            Err(Error::Contract(_))
        ));
    }
}
