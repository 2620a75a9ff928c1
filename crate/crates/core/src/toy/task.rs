//! Synthetic scenes whose classes can only be told apart through context.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rpkg::{
    build_rpkg, embeddings_json, ingest_corpus, parse_class_embeddings, BBox, Corpus, LabelMap,
    Relation, RelationalPriorKnowledgeGraph,
};
use crate::tensor::rng::{Rng, SeedStream};
use crate::tensor::Tensor;

/// Where the objects of a scene kind are placed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// Large boxes in a horizontal row, one slot per class.
    Row,
    /// Small boxes stacked vertically in the image center.
    Column,
    /// Uniformly scattered boxes of mixed size.
    Scatter,
}

/// One component of the scene distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneKind {
    pub name: String,
    pub weight: f64,
    pub classes: Vec<usize>,
    /// Classes drawn per scene from `classes`; `None` uses all of them.
    pub subset: Option<usize>,
    /// Draw every object's class independently instead of first covering
    /// the scene's class set.
    #[serde(default)]
    pub iid: bool,
    pub layout: Layout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyTaskSpec {
    pub num_classes: usize,
    pub feature_width: usize,
    pub proposals: usize,
    pub noise: f64,
    /// Probability that a proposal mixes its class with the confusable one.
    pub ambiguity: f64,
    /// Probability that an object spawns a second, duplicate proposal.
    pub duplicate_rate: f64,
    pub kinds: Vec<SceneKind>,
    /// Confusable partner of each class.
    pub twins: Vec<usize>,
    pub prototype_seed: u64,
    pub image_width: u32,
    pub image_height: u32,
}

impl Default for ToyTaskSpec {
    /// Eight classes in two context groups `{0..3}` and `{4..7}`; class `c`
    /// is confusable with `c + 4`, so a mixed proposal is resolved only by
    /// which group the rest of the scene belongs to.
    fn default() -> Self {
        ToyTaskSpec {
            num_classes: 8,
            feature_width: 16,
            proposals: 12,
            noise: 0.3,
            ambiguity: 0.5,
            duplicate_rate: 0.1,
            kinds: vec![
                SceneKind {
                    name: "row".into(),
                    weight: 0.5,
                    classes: vec![0, 1, 2, 3],
                    subset: None,
                    iid: false,
                    layout: Layout::Row,
                },
                SceneKind {
                    name: "column".into(),
                    weight: 0.5,
                    classes: vec![4, 5, 6, 7],
                    subset: Some(2),
                    iid: false,
                    layout: Layout::Column,
                },
            ],
            twins: (0..8).map(|c| (c + 4) % 8).collect(),
            prototype_seed: 0,
            image_width: 640,
            image_height: 480,
        }
    }
}

impl ToyTaskSpec {
    /// The default task with every object's class drawn independently and
    /// uniformly, so the rest of a scene says nothing about any proposal.
    pub fn independent() -> Self {
        let base = ToyTaskSpec::default();
        ToyTaskSpec {
            kinds: vec![SceneKind {
                name: "scatter".into(),
                weight: 1.0,
                classes: (0..base.num_classes).collect(),
                subset: None,
                iid: true,
                layout: Layout::Scatter,
            }],
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes;
        let bad = |m: String| Err(Error::Config(m));
        if c == 0 || self.feature_width == 0 || self.proposals == 0 {
            return bad("toy spec needs classes, features and proposals".into());
        }
        if !(self.noise > 0.0 && self.noise.is_finite()) {
            return bad(format!("noise scale {} must be positive", self.noise));
        }
        for (name, p) in [
            ("ambiguity", self.ambiguity),
            ("duplicate rate", self.duplicate_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1]"));
            }
        }
        if self.kinds.is_empty() {
            return bad("toy spec has no scene kinds".into());
        }
        let total: f64 = self.kinds.iter().map(|k| k.weight).sum();
        if (total - 1.0).abs() > 1e-9
            || self
                .kinds
                .iter()
                .any(|k| k.weight.is_nan() || k.weight < 0.0)
        {
            return bad(format!("scene kind weights sum to {total}, not 1"));
        }
        for k in &self.kinds {
            if k.classes.is_empty() || k.classes.iter().any(|&x| x >= c) {
                return bad(format!("scene kind {} has an invalid class set", k.name));
            }
            if matches!(k.subset, Some(s) if s == 0 || s > k.classes.len()) {
                return bad(format!("scene kind {} subset size out of range", k.name));
            }
        }
        if self.twins.len() != c || self.twins.iter().any(|&t| t >= c) {
            return bad("twins must name one class per class".into());
        }
        if self.ambiguity > 0.0 && self.twins.iter().enumerate().any(|(i, &t)| i == t) {
            return bad("ambiguous proposals need a twin different from the class".into());
        }
        if self.image_width == 0 || self.image_height == 0 {
            return bad("image size must be positive".into());
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes).map(|c| format!("class{c}")).collect()
    }

    /// Label used for duplicate proposals.
    pub fn duplicate_label(&self) -> usize {
        self.num_classes
    }

    /// Standard-normal prototype features, `C × F_p`.
    pub fn prototypes(&self) -> Tensor<f64> {
        let mut rng = SeedStream::new(self.prototype_seed)
            .split("prototypes")
            .rng();
        let data = (0..self.num_classes * self.feature_width)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Tensor::new([self.num_classes, self.feature_width], data).expect("shape")
    }
}

/// A sampled scene layout: ground-truth objects only.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneObjects {
    pub kind: usize,
    pub objects: Vec<(usize, BBox)>,
}

fn place(spec: &ToyTaskSpec, layout: Layout, slot: usize, slots: usize, rng: &mut Rng) -> BBox {
    let (w, h) = (f64::from(spec.image_width), f64::from(spec.image_height));
    let jitter = |rng: &mut Rng, s: f64| Normal::new(0.0, s).expect("sd").sample(rng);
    let frac = (slot as f64 + 0.5) / slots as f64;
    let (cx, cy, size) = match layout {
        Layout::Row => (
            frac * w + jitter(rng, 0.02 * w),
            0.5 * h + jitter(rng, 0.05 * h),
            rng.random_range(0.10..0.16) * w,
        ),
        Layout::Column => (
            0.5 * w + jitter(rng, 0.02 * w),
            (0.3 + 0.4 * frac) * h + jitter(rng, 0.01 * h),
            rng.random_range(0.03..0.06) * w,
        ),
        Layout::Scatter => (
            rng.random_range(0.1..0.9) * w,
            rng.random_range(0.1..0.9) * h,
            rng.random_range(0.05..0.15) * w,
        ),
    };
    let half = size / 2.0;
    let cx = cx.clamp(half, w - half);
    let cy = cy.clamp(half, h - half);
    let r = |v: f64| (v * 100.0).round() / 100.0;
    BBox {
        x: r(cx - half),
        y: r(cy - half),
        w: r(size),
        h: r(size),
    }
}

/// Samples a scene kind, its class set, and `count` placed objects. Unless
/// the kind is `iid`, every class of the set appears at least once when
/// `count` allows.
pub fn sample_objects(spec: &ToyTaskSpec, count: usize, rng: &mut Rng) -> SceneObjects {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut kind = spec.kinds.len() - 1;
    for (i, k) in spec.kinds.iter().enumerate() {
        acc += k.weight;
        if u < acc {
            kind = i;
            break;
        }
    }
    let k = &spec.kinds[kind];
    let mut set: Vec<usize> = match k.subset {
        Some(s) => k.classes.choose_multiple(rng, s).copied().collect(),
        None => k.classes.clone(),
    };
    set.sort_unstable();
    let covered = if k.iid { 0 } else { count };
    let mut classes: Vec<usize> = set.iter().copied().take(covered).collect();
    while classes.len() < count {
        classes.push(*set.choose(rng).expect("non-empty"));
    }
    classes.shuffle(rng);
    let objects = classes
        .into_iter()
        .map(|c| {
            let slot = k.classes.iter().position(|&x| x == c).expect("member");
            (c, place(spec, k.layout, slot, k.classes.len(), rng))
        })
        .collect();
    SceneObjects { kind, objects }
}

/// One training or evaluation sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyScene {
    /// Proposal features `N × F_p`.
    pub features: Tensor<f64>,
    /// Class per proposal; `C` marks a duplicate.
    pub labels: Vec<usize>,
    pub ambiguous: Vec<bool>,
    pub boxes: Vec<BBox>,
    pub kind: usize,
}

/// Draws a scene of exactly `spec.proposals` proposals.
///
/// Ambiguous proposals are `(proto[c] + proto[twin[c]]) / 2` plus noise;
/// duplicates repeat the base feature of an object with fresh noise.
pub fn generate_scene(spec: &ToyTaskSpec, protos: &Tensor<f64>, seed: SeedStream) -> ToyScene {
    let mut rng = seed.rng();
    let n = spec.proposals;
    let f = spec.feature_width;
    let layout = sample_objects(spec, n, &mut rng);
    let noise = Normal::new(0.0, spec.noise).expect("positive noise");

    struct Proposal {
        base: Vec<f64>,
        label: usize,
        ambiguous: bool,
        bbox: BBox,
    }
    let mut props: Vec<Proposal> = Vec::with_capacity(n);
    for &(c, bbox) in &layout.objects {
        if props.len() == n {
            break;
        }
        let ambiguous = rng.random_bool(spec.ambiguity);
        let base: Vec<f64> = if ambiguous {
            let t = spec.twins[c];
            (0..f)
                .map(|k| 0.5 * (protos.at(&[c, k]) + protos.at(&[t, k])))
                .collect()
        } else {
            protos.row(c).to_vec()
        };
        let dup = rng.random_bool(spec.duplicate_rate);
        if dup && props.len() + 1 < n {
            props.push(Proposal {
                base: base.clone(),
                label: spec.duplicate_label(),
                ambiguous: false,
                bbox,
            });
        }
        props.push(Proposal {
            base,
            label: c,
            ambiguous,
            bbox,
        });
    }
    props.shuffle(&mut rng);

    let mut features = Vec::with_capacity(n * f);
    for p in &props {
        features.extend(p.base.iter().map(|&b| b + noise.sample(&mut rng)));
    }
    ToyScene {
        features: Tensor::new([props.len(), f], features).expect("shape"),
        labels: props.iter().map(|p| p.label).collect(),
        ambiguous: props.iter().map(|p| p.ambiguous).collect(),
        boxes: props.iter().map(|p| p.bbox).collect(),
        kind: layout.kind,
    }
}

/// Scenes `0..count` of one seed stream.
pub fn generate_scenes(spec: &ToyTaskSpec, seed: SeedStream, count: usize) -> Vec<ToyScene> {
    let protos = spec.prototypes();
    (0..count as u64)
        .map(|i| generate_scene(spec, &protos, seed.nth(i)))
        .collect()
}

/// Files describing a generated annotation corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedCorpus {
    pub annotations: String,
    pub labelmap: String,
    pub embeddings: String,
}

#[derive(Serialize)]
struct RecordOut<'a> {
    image_id: String,
    width: u32,
    height: u32,
    objects: Vec<ObjectOut<'a>>,
}

#[derive(Serialize)]
struct ObjectOut<'a> {
    label: &'a str,
    bbox: [f64; 4],
}

/// Annotation corpus drawn from the task's scene distribution, plus the
/// prototypes as class embeddings and an identity label map.
pub fn generate_corpus(
    spec: &ToyTaskSpec,
    n_images: usize,
    seed: SeedStream,
) -> Result<GeneratedCorpus> {
    spec.validate()?;
    if n_images == 0 {
        return Err(Error::Config("corpus needs at least one image".into()));
    }
    let names = spec.class_names();
    let stream = seed.split("corpus");
    let mut annotations = String::new();
    for i in 0..n_images {
        let mut rng = stream.nth(i as u64).rng();
        let scene = sample_objects(spec, spec.proposals, &mut rng);
        let rec = RecordOut {
            image_id: format!("toy-{i:06}"),
            width: spec.image_width,
            height: spec.image_height,
            objects: scene
                .objects
                .iter()
                .map(|(c, b)| ObjectOut {
                    label: &names[*c],
                    bbox: [b.x, b.y, b.w, b.h],
                })
                .collect(),
        };
        annotations.push_str(&serde_json::to_string(&rec)?);
        annotations.push('\n');
    }
    let labelmap = LabelMap {
        target_classes: names.clone(),
        source_to_target: names
            .iter()
            .map(|n| (n.clone(), n.clone()))
            .collect::<BTreeMap<_, _>>(),
    };
    Ok(GeneratedCorpus {
        annotations,
        labelmap: serde_json::to_string_pretty(&labelmap)?,
        embeddings: embeddings_json(&names, &spec.prototypes())?,
    })
}

impl GeneratedCorpus {
    /// Parses the generated files back into a relabeled corpus.
    pub fn corpus(&self) -> Result<Corpus> {
        let map: LabelMap = serde_json::from_str(&self.labelmap)?;
        ingest_corpus(self.annotations.as_bytes(), "annotations.jsonl", &map)
    }

    /// The prior graph `rpfem build-rpkg` would produce from these files.
    pub fn build_rpkg(&self, relations: &[Relation]) -> Result<RelationalPriorKnowledgeGraph<f64>> {
        let corpus = self.corpus()?;
        let d = parse_class_embeddings(&self.embeddings, &corpus.classes)?;
        build_rpkg(&corpus, &d, relations)
    }
}
