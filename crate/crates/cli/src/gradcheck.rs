use std::time::Instant;

use anyhow::{bail, Result};
use clap::Args;
use rayon::prelude::*;
use rpfem_core::checks::{gradcheck_suite, SuiteSizes, TOLERANCE};
use rpfem_core::tensor::gradcheck::GradCheckReport;

use crate::Internal;

#[derive(Args)]
pub struct GradcheckArgs {
    /// Number of seeds, starting at --seed.
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = SuiteSizes::default().nodes)]
    nodes: usize,
    #[arg(long, default_value_t = SuiteSizes::default().classes)]
    classes: usize,
    #[arg(long, default_value_t = SuiteSizes::default().width)]
    width: usize,
}

struct Summary {
    name: String,
    max_rel_err: f64,
    failures: usize,
}

pub fn run(a: GradcheckArgs) -> Result<()> {
    if a.seeds == 0 || a.nodes == 0 || a.classes == 0 || a.width == 0 {
        bail!("seeds and sizes must be at least 1");
    }
    let sizes = SuiteSizes {
        nodes: a.nodes,
        classes: a.classes,
        width: a.width,
    };
    let start = Instant::now();
    let runs: Vec<Vec<GradCheckReport>> = (a.seed..a.seed + a.seeds)
        .into_par_iter()
        .map(|s| gradcheck_suite(s, sizes))
        .collect::<rpfem_core::Result<_>>()?;

    let mut summary: Vec<Summary> = Vec::new();
    for reports in &runs {
        for r in reports {
            let entry = match summary.iter_mut().find(|s| s.name == r.name) {
                Some(e) => e,
                None => {
                    summary.push(Summary {
                        name: r.name.clone(),
                        max_rel_err: 0.0,
                        failures: 0,
                    });
                    summary.last_mut().unwrap()
                }
            };
            // NaN must not hide behind max()
            if r.max_rel_err.is_nan() || r.max_rel_err > entry.max_rel_err {
                entry.max_rel_err = r.max_rel_err;
            }
            entry.failures += usize::from(!r.passed);
        }
    }
    let failed = summary.iter().filter(|s| s.failures > 0).count();
    for s in &summary {
        println!(
            "{} {:<28} max_rel_err {:.3e}",
            if s.failures == 0 { "PASS" } else { "FAIL" },
            s.name,
            s.max_rel_err
        );
    }
    println!(
        "{} checks x {} seeds, tolerance {:.0e}, {} failed",
        summary.len(),
        a.seeds,
        TOLERANCE,
        failed
    );
    eprintln!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    if failed > 0 {
        return Err(Internal(format!("{failed} gradient checks failed")).into());
    }
    Ok(())
}
