use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rpkg::{compute_cooccurrence, compute_distance, compute_orientation, Corpus};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Relation families stored in the prior tensor, in canonical channel order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    Cooccurrence,
    Orientation,
    Distance,
}

impl Relation {
    pub const ALL: [Relation; 3] = [
        Relation::Cooccurrence,
        Relation::Orientation,
        Relation::Distance,
    ];

    pub fn width(self) -> usize {
        match self {
            Relation::Cooccurrence => 1,
            Relation::Orientation => 5,
            Relation::Distance => 2,
        }
    }

    pub fn channel_names(self) -> &'static [&'static str] {
        match self {
            Relation::Cooccurrence => &["cooccurrence"],
            Relation::Orientation => &["center_of", "left_of", "right_of", "above", "below"],
            Relation::Distance => &["distance_mean", "distance_std"],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Relation::Cooccurrence => "cooccurrence",
            Relation::Orientation => "orientation",
            Relation::Distance => "distance",
        }
    }

    /// Parses a comma-separated list into canonical order without duplicates.
    pub fn parse_list(s: &str) -> Result<Vec<Relation>> {
        let mut rels = s
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(str::parse)
            .collect::<Result<Vec<_>>>()?;
        rels.sort();
        rels.dedup();
        if rels.is_empty() {
            return Err(Error::Config("empty relation selection".into()));
        }
        Ok(rels)
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Relation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cooccurrence" | "cooc" => Ok(Relation::Cooccurrence),
            "orientation" | "orient" => Ok(Relation::Orientation),
            "distance" | "dist" => Ok(Relation::Distance),
            other => Err(Error::Config(format!("unknown relation {other:?}"))),
        }
    }
}

/// Prior tensors computed for one class set; absent relations were not requested.
#[derive(Clone, Debug, Default)]
pub struct ComputedPriors {
    pub cooccurrence: Option<Tensor<f64>>,
    pub orientation: Option<Tensor<f64>>,
    pub distance: Option<Tensor<f64>>,
}

impl ComputedPriors {
    pub fn compute(corpus: &Corpus, relations: &[Relation]) -> Self {
        let has = |r| relations.contains(&r);
        ComputedPriors {
            cooccurrence: has(Relation::Cooccurrence).then(|| compute_cooccurrence(corpus)),
            orientation: has(Relation::Orientation).then(|| compute_orientation(corpus)),
            distance: has(Relation::Distance).then(|| compute_distance(corpus)),
        }
    }

    fn get(&self, r: Relation) -> Option<&Tensor<f64>> {
        match r {
            Relation::Cooccurrence => self.cooccurrence.as_ref(),
            Relation::Orientation => self.orientation.as_ref(),
            Relation::Distance => self.distance.as_ref(),
        }
    }
}

/// Class embeddings `D` (`C × F_r`) and pairwise priors `K` (`C × C × R`).
#[derive(Clone, Debug, PartialEq)]
pub struct RelationalPriorKnowledgeGraph<T> {
    classes: Vec<String>,
    relations: Vec<Relation>,
    embeddings: Tensor<T>,
    priors: Tensor<T>,
}

impl<T: Scalar> RelationalPriorKnowledgeGraph<T> {
    /// Validates shapes; `relations` must already be in canonical order.
    pub fn new(
        classes: Vec<String>,
        relations: Vec<Relation>,
        embeddings: Tensor<T>,
        priors: Tensor<T>,
    ) -> Result<Self> {
        let c = classes.len();
        if relations.is_empty() || relations.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Format(format!(
                "relations must be a non-empty canonical list, got {relations:?}"
            )));
        }
        let r: usize = relations.iter().map(|r| r.width()).sum();
        if embeddings.rank() != 2 || embeddings.shape()[0] != c {
            return Err(Error::Format(format!(
                "embeddings shape {:?} does not match {c} classes",
                embeddings.shape()
            )));
        }
        if priors.shape() != [c, c, r] {
            return Err(Error::Format(format!(
                "prior tensor shape {:?} does not match [{c}, {c}, {r}]",
                priors.shape()
            )));
        }
        Ok(RelationalPriorKnowledgeGraph {
            classes,
            relations,
            embeddings,
            priors,
        })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn relations(&self) -> &[Relation] {
        &self.relations
    }

    pub fn embeddings(&self) -> &Tensor<T> {
        &self.embeddings
    }

    pub fn priors(&self) -> &Tensor<T> {
        &self.priors
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// `F_r`, the embedding width.
    pub fn embedding_width(&self) -> usize {
        self.embeddings.last_dim()
    }

    /// `R`, the number of prior channels.
    pub fn prior_width(&self) -> usize {
        self.priors.last_dim()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    /// Prior vector `K[a, b]`.
    pub fn prior(&self, a: usize, b: usize) -> &[T] {
        self.priors.row(a * self.num_classes() + b)
    }

    pub fn channel_names(&self) -> Vec<&'static str> {
        self.relations
            .iter()
            .flat_map(|r| r.channel_names().iter().copied())
            .collect()
    }

    /// Keeps only the channels of `subset` (which must be a subset of the
    /// stored relations).
    pub fn select_relations(&self, subset: &[Relation]) -> Result<Self> {
        let mut keep = Vec::new();
        let mut offset = 0;
        let mut rels = Vec::new();
        for &r in &self.relations {
            if subset.contains(&r) {
                keep.extend(offset..offset + r.width());
                rels.push(r);
            }
            offset += r.width();
        }
        if let Some(missing) = subset.iter().find(|r| !self.relations.contains(r)) {
            return Err(Error::Config(format!(
                "relation {missing} is not stored in this graph"
            )));
        }
        let rw = self.prior_width();
        let data = self
            .priors
            .data()
            .chunks_exact(rw)
            .flat_map(|cell| keep.iter().map(move |&k| cell[k]))
            .collect();
        let c = self.num_classes();
        Self::new(
            self.classes.clone(),
            rels,
            self.embeddings.clone(),
            Tensor::new([c, c, keep.len()], data)?,
        )
    }

    /// Reorders classes so that new class `i` is old class `perm[i]`.
    pub fn permute_classes(&self, perm: &[usize]) -> Result<Self> {
        let c = self.num_classes();
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..c).collect::<Vec<_>>() {
            return Err(Error::Contract("not a permutation of the classes".into()));
        }
        let f = self.embedding_width();
        let r = self.prior_width();
        let mut d = Vec::with_capacity(c * f);
        for &p in perm {
            d.extend_from_slice(self.embeddings.row(p));
        }
        let mut k = Vec::with_capacity(c * c * r);
        for &pa in perm {
            for &pb in perm {
                k.extend_from_slice(self.prior(pa, pb));
            }
        }
        Self::new(
            perm.iter().map(|&p| self.classes[p].clone()).collect(),
            self.relations.clone(),
            Tensor::new([c, f], d)?,
            Tensor::new([c, c, r], k)?,
        )
    }

    pub fn cast<U: Scalar>(&self) -> RelationalPriorKnowledgeGraph<U> {
        RelationalPriorKnowledgeGraph {
            classes: self.classes.clone(),
            relations: self.relations.clone(),
            embeddings: self.embeddings.cast(),
            priors: self.priors.cast(),
        }
    }
}

/// Stacks the selected prior channels in canonical order
/// (co-occurrence, orientation, distance) next to the class embeddings.
pub fn assemble_rpkg<T: Scalar>(
    classes: &[String],
    embeddings: &Tensor<f64>,
    relations: &[Relation],
    priors: &ComputedPriors,
) -> Result<RelationalPriorKnowledgeGraph<T>> {
    let c = classes.len();
    let mut rels = relations.to_vec();
    rels.sort();
    rels.dedup();
    if rels.is_empty() {
        return Err(Error::Config("empty relation selection".into()));
    }
    let mut parts = Vec::with_capacity(rels.len());
    for &r in &rels {
        let t = priors
            .get(r)
            .ok_or_else(|| Error::Config(format!("prior for {r} was not computed")))?;
        if t.shape() != [c, c, r.width()] {
            return Err(Error::Config(format!(
                "{r} prior has shape {:?}, class set has {c} classes",
                t.shape()
            )));
        }
        parts.push(t);
    }
    let mut k = Vec::with_capacity(c * c * 8);
    for cell in 0..c * c {
        for (t, r) in parts.iter().zip(&rels) {
            k.extend(
                t.data()[cell * r.width()..(cell + 1) * r.width()]
                    .iter()
                    .map(|&v| T::of(v)),
            );
        }
    }
    let r: usize = rels.iter().map(|r| r.width()).sum();
    RelationalPriorKnowledgeGraph::new(
        classes.to_vec(),
        rels,
        embeddings.cast(),
        Tensor::new([c, c, r], k)?,
    )
}

/// Computes the selected priors from `corpus` and assembles the graph.
pub fn build_rpkg<T: Scalar>(
    corpus: &Corpus,
    embeddings: &Tensor<f64>,
    relations: &[Relation],
) -> Result<RelationalPriorKnowledgeGraph<T>> {
    let priors = ComputedPriors::compute(corpus, relations);
    assemble_rpkg(&corpus.classes, embeddings, relations, &priors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rpkg::{AnnotatedImage, BBox, ObjectInstance};

    fn tiny_corpus() -> Corpus {
        let o = |class, x| ObjectInstance {
            class,
            bbox: BBox {
                x,
                y: 1.0,
                w: 2.0,
                h: 2.0,
            },
        };
        Corpus {
            classes: vec!["a".into(), "b".into()],
            images: vec![AnnotatedImage {
                image_id: "1".into(),
                width: 20.0,
                height: 20.0,
                objects: vec![o(0, 1.0), o(1, 8.0)],
            }],
        }
    }

    #[test]
    fn prior_widths_per_subset() {
        let corpus = tiny_corpus();
        let d = Tensor::zeros([2, 3]);
        let cases: [(&[Relation], usize); 7] = [
            (&[Relation::Cooccurrence], 1),
            (&[Relation::Orientation], 5),
            (&[Relation::Distance], 2),
            (&[Relation::Cooccurrence, Relation::Orientation], 6),
            (&[Relation::Cooccurrence, Relation::Distance], 3),
            (&[Relation::Orientation, Relation::Distance], 7),
            (&Relation::ALL, 8),
        ];
        for (rels, r) in cases {
            let g = build_rpkg::<f64>(&corpus, &d, rels).unwrap();
            assert_eq!(g.prior_width(), r);
            assert_eq!(g.channel_names().len(), r);
        }
    }

    #[test]
    fn channels_are_stacked_canonically() {
        let corpus = tiny_corpus();
        let d = Tensor::zeros([2, 3]);
        let all = build_rpkg::<f64>(&corpus, &d, &Relation::ALL).unwrap();
        let shuffled = build_rpkg::<f64>(
            &corpus,
            &d,
            &[
                Relation::Distance,
                Relation::Cooccurrence,
                Relation::Orientation,
            ],
        )
        .unwrap();
        assert_eq!(all, shuffled);
        let cooc = compute_cooccurrence(&corpus);
        let dist = compute_distance(&corpus);
        assert_eq!(all.prior(0, 1)[0], cooc.at(&[0, 1, 0]));
        assert_eq!(all.prior(0, 1)[6], dist.at(&[0, 1, 0]));
        let only_dist = all.select_relations(&[Relation::Distance]).unwrap();
        assert_eq!(only_dist.prior(0, 1), &all.prior(0, 1)[6..8]);
    }

    #[test]
    fn class_set_mismatch_is_rejected() {
        let corpus = tiny_corpus();
        let priors = ComputedPriors::compute(&corpus, &Relation::ALL);
        let three: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
        let d = Tensor::zeros([3, 2]);
        assert!(assemble_rpkg::<f64>(&three, &d, &Relation::ALL, &priors).is_err());
        let missing = ComputedPriors {
            cooccurrence: None,
            ..priors
        };
        let d = Tensor::zeros([2, 2]);
        assert!(assemble_rpkg::<f64>(&corpus.classes, &d, &Relation::ALL, &missing).is_err());
    }

    #[test]
    fn parse_relation_list() {
        assert_eq!(
            Relation::parse_list("distance,cooccurrence").unwrap(),
            vec![Relation::Cooccurrence, Relation::Distance]
        );
        assert!(Relation::parse_list("nearness").is_err());
        assert!(Relation::parse_list("").is_err());
    }
}
