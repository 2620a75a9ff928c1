use std::fs;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::rng::SeedStream;
use crate::tensor::Tensor;

#[derive(Serialize, Deserialize)]
struct EmbeddingsFile {
    classes: Vec<String>,
    #[serde(rename = "F")]
    width: usize,
    vectors: Vec<Vec<f64>>,
}

/// Reads `embeddings.json` and orders its rows by `classes`.
pub fn load_class_embeddings(path: &Path, classes: &[String]) -> Result<Tensor<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_class_embeddings(&text, classes)
}

pub fn parse_class_embeddings(text: &str, classes: &[String]) -> Result<Tensor<f64>> {
    let file: EmbeddingsFile = serde_json::from_str(text)?;
    if file.classes.len() != file.vectors.len() {
        return Err(Error::Format(format!(
            "{} class names but {} vectors",
            file.classes.len(),
            file.vectors.len()
        )));
    }
    if let Some((name, v)) = file
        .classes
        .iter()
        .zip(&file.vectors)
        .find(|(_, v)| v.len() != file.width)
    {
        return Err(Error::Format(format!(
            "embedding for {name} has width {}, expected {}",
            v.len(),
            file.width
        )));
    }
    let mut data = Vec::with_capacity(classes.len() * file.width);
    for c in classes {
        let row = file
            .classes
            .iter()
            .position(|n| n == c)
            .ok_or_else(|| Error::Format(format!("no embedding for class {c}")))?;
        data.extend_from_slice(&file.vectors[row]);
    }
    Tensor::new([classes.len(), file.width], data)
}

/// `embeddings.json` text for `d`, one row per class.
pub fn embeddings_json(classes: &[String], d: &Tensor<f64>) -> Result<String> {
    if d.rank() != 2 || d.shape()[0] != classes.len() {
        return Err(Error::dim(
            "embeddings_json",
            d.shape(),
            &[classes.len(), 0],
        ));
    }
    let file = EmbeddingsFile {
        classes: classes.to_vec(),
        width: d.last_dim(),
        vectors: (0..classes.len()).map(|i| d.row(i).to_vec()).collect(),
    };
    Ok(serde_json::to_string(&file)?)
}

pub fn save_class_embeddings(path: &Path, classes: &[String], d: &Tensor<f64>) -> Result<()> {
    let text = embeddings_json(classes, d)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Standard-normal class embeddings, reproducible from `seed`.
pub fn synthetic_embeddings(num_classes: usize, width: usize, seed: SeedStream) -> Tensor<f64> {
    let mut rng = seed.split("class-embeddings").rng();
    let data = (0..num_classes * width)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Tensor::new([num_classes, width], data).expect("shape")
}
