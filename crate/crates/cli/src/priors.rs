use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use rpfem_core::rpkg::{
    build_rpkg, load_class_embeddings, load_rpkg, read_corpus, save_rpkg, synthetic_embeddings,
    LabelMap,
};
use rpfem_core::tensor::rng::SeedStream;
use rpfem_core::toy::fmt_f64;
use rpfem_core::Rpkg64;
use serde::Serialize;

use crate::{parse_relations, require_paths};

#[derive(Args)]
pub struct BuildArgs {
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    labelmap: PathBuf,
    /// Class embeddings file; omit to draw synthetic ones.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Width of the synthetic embeddings used without --embeddings.
    #[arg(long, default_value_t = 16)]
    synthetic_width: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "cooccurrence,orientation,distance")]
    relations: String,
    #[arg(long)]
    out: PathBuf,
}

pub fn build(a: BuildArgs) -> Result<()> {
    let mut inputs = vec![
        ("annotations", a.annotations.as_path()),
        ("labelmap", a.labelmap.as_path()),
    ];
    if let Some(e) = &a.embeddings {
        inputs.push(("embeddings", e.as_path()));
    }
    require_paths(inputs)?;
    let relations = parse_relations(&a.relations)?;
    let map = LabelMap::load(&a.labelmap)?;
    let corpus = read_corpus(&a.annotations, &map)?;
    let d = match &a.embeddings {
        Some(p) => load_class_embeddings(p, &corpus.classes)?,
        None => {
            if a.synthetic_width == 0 {
                bail!("--synthetic-width must be positive");
            }
            synthetic_embeddings(
                corpus.num_classes(),
                a.synthetic_width,
                SeedStream::new(a.seed).split("embeddings"),
            )
        }
    };
    let g: Rpkg64 = build_rpkg(&corpus, &d, &relations)?;
    save_rpkg(&g, &a.out)?;
    println!(
        "classes C = {}, channels R = {}, embedding width = {}, images = {}, objects = {}",
        g.num_classes(),
        g.prior_width(),
        g.embedding_width(),
        corpus.images.len(),
        corpus.num_objects()
    );
    println!("wrote {}", a.out.display());
    Ok(())
}

#[derive(Args)]
pub struct InspectArgs {
    rpkg: PathBuf,
    class_a: String,
    class_b: String,
    /// Machine-readable output.
    #[arg(long)]
    json: bool,
}

#[derive(Serialize)]
struct Channel {
    channel: &'static str,
    value: f64,
}

#[derive(Serialize)]
struct Inspection<'a> {
    a: &'a str,
    b: &'a str,
    prior: Vec<Channel>,
}

pub fn inspect(a: InspectArgs) -> Result<()> {
    require_paths([("rpkg", a.rpkg.as_path())])?;
    let g: Rpkg64 = load_rpkg(&a.rpkg)?;
    let index = |name: &str| {
        g.class_index(name)
            .with_context(|| format!("unknown class {name:?}"))
    };
    let (i, j) = (index(&a.class_a)?, index(&a.class_b)?);
    let prior = g
        .channel_names()
        .into_iter()
        .zip(g.prior(i, j))
        .map(|(channel, &value)| Channel { channel, value })
        .collect();
    let out = Inspection {
        a: &a.class_a,
        b: &a.class_b,
        prior,
    };
    if a.json {
        println!("{}", serde_json::to_string_pretty(&out)?);
    } else {
        println!("K[{}, {}]", out.a, out.b);
        for c in &out.prior {
            println!("  {:<14} {}", c.channel, fmt_f64(c.value));
        }
    }
    Ok(())
}
