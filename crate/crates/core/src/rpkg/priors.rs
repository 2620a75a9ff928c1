//! Corpus statistics behind the three relation types.
//!
//! Every statistic is accumulated from integer counts or from sorted
//! observation lists, so the result does not depend on record order.

use crate::rpkg::Corpus;
use crate::tensor::Tensor;

/// Directed, image-level co-occurrence, `C × C × 1`.
///
/// `cooc(A, B)` is the fraction of images containing `A` that also contain
/// `B`; on the diagonal, the fraction of images containing `A` that contain
/// at least two instances of it.
pub fn compute_cooccurrence(corpus: &Corpus) -> Tensor<f64> {
    let c = corpus.num_classes();
    let mut present = vec![0u64; c];
    let mut joint = vec![0u64; c * c];
    let mut counts = vec![0usize; c];
    for img in &corpus.images {
        counts.iter_mut().for_each(|n| *n = 0);
        for o in &img.objects {
            counts[o.class] += 1;
        }
        for a in (0..c).filter(|&a| counts[a] > 0) {
            present[a] += 1;
            for b in (0..c).filter(|&b| counts[b] > 0) {
                if a != b || counts[a] >= 2 {
                    joint[a * c + b] += 1;
                }
            }
        }
    }
    let data = (0..c * c)
        .map(|ab| {
            let n = present[ab / c];
            if n == 0 {
                0.0
            } else {
                joint[ab] as f64 / n as f64
            }
        })
        .collect();
    Tensor::new([c, c, 1], data).expect("shape")
}

/// Relative orientation, `C × C × 5` with channels
/// (center-of, left-of, right-of, above, below).
///
/// For each ordered pair of distinct instances `(a, b)` sharing an image:
/// center-of when `a`'s center lies strictly inside `b`'s box, and the four
/// directional flags from strict comparisons of the centers (ties set
/// neither side). Entries are the mean flag vector over all such pairs.
pub fn compute_orientation(corpus: &Corpus) -> Tensor<f64> {
    let c = corpus.num_classes();
    let mut sums = vec![[0u64; 5]; c * c];
    let mut pairs = vec![0u64; c * c];
    for img in &corpus.images {
        for (i, a) in img.objects.iter().enumerate() {
            let ca = a.bbox.center();
            for (j, b) in img.objects.iter().enumerate() {
                if i == j {
                    continue;
                }
                let cb = b.bbox.center();
                let cell = a.class * c + b.class;
                pairs[cell] += 1;
                let flags = [
                    b.bbox.contains_strict(ca),
                    ca.0 < cb.0,
                    ca.0 > cb.0,
                    ca.1 < cb.1,
                    ca.1 > cb.1,
                ];
                for (s, f) in sums[cell].iter_mut().zip(flags) {
                    *s += u64::from(f);
                }
            }
        }
    }
    let mut data = Vec::with_capacity(c * c * 5);
    for (s, &n) in sums.iter().zip(&pairs) {
        for &k in s {
            data.push(if n == 0 { 0.0 } else { k as f64 / n as f64 });
        }
    }
    Tensor::new([c, c, 5], data).expect("shape")
}

/// Relative distance, `C × C × 2` with channels (mean, population std).
///
/// Each unordered pair of distinct instances sharing an image contributes the
/// distance between box centers divided by the image diagonal.
pub fn compute_distance(corpus: &Corpus) -> Tensor<f64> {
    let c = corpus.num_classes();
    let mut obs: Vec<Vec<f64>> = vec![Vec::new(); c * c];
    for img in &corpus.images {
        let diag = img.diagonal();
        for (i, a) in img.objects.iter().enumerate() {
            let (ax, ay) = a.bbox.center();
            for b in &img.objects[i + 1..] {
                let (bx, by) = b.bbox.center();
                let d = (ax - bx).hypot(ay - by) / diag;
                let (lo, hi) = (a.class.min(b.class), a.class.max(b.class));
                obs[lo * c + hi].push(d);
            }
        }
    }
    let mut data = vec![0.0; c * c * 2];
    for lo in 0..c {
        for hi in lo..c {
            let v = &mut obs[lo * c + hi];
            if v.is_empty() {
                continue;
            }
            v.sort_by(f64::total_cmp);
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
            let std = var.sqrt();
            for cell in [lo * c + hi, hi * c + lo] {
                data[cell * 2] = mean;
                data[cell * 2 + 1] = std;
            }
        }
    }
    Tensor::new([c, c, 2], data).expect("shape")
}
