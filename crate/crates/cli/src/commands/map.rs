use std::path::PathBuf;

use clap::Args;
use dspa_core::density::DEFAULT_PERCENTILE;
use dspa_core::diff_map::{DEFAULT_PART_SIZE, DEFAULT_SUPPORT_FLOOR};
use dspa_core::steering::DEFAULT_K_DIFF;
use dspa_core::{BuildOptions, DiffMap, Manifest, SaeParams};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{emit, Context};
use crate::config::{required, Layered};
use crate::{layered, Outcome};

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildMapArgs {
    /// Manifest JSON listing prompt/chosen/rejected trace files.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// SAE at the prompt (input) layer.
    #[arg(long)]
    pub input_sae: Option<PathBuf>,
    /// SAE at the response (output) layer.
    #[arg(long)]
    pub output_sae: Option<PathBuf>,
    /// Gate threshold percentile in (0, 100].
    #[arg(long)]
    pub percentile: Option<f64>,
    /// Rows gated on by fewer triples are flagged low-support.
    #[arg(long)]
    pub support_floor: Option<u64>,
    /// Triples per accumulation part.
    #[arg(long, hide = true)]
    pub part_size: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

layered!(BuildMapArgs { manifest, input_sae, output_sae, percentile, support_floor, part_size, out });

#[derive(Serialize)]
struct Bucket {
    min: u64,
    max: u64,
    rows: usize,
}

/// Rows per gate-support bucket: 0, 1, 2-3, 4-7, ...
fn support_histogram(support: &[u64]) -> Vec<Bucket> {
    let mut buckets: Vec<Bucket> = Vec::new();
    for &s in support {
        let (min, max) = if s == 0 {
            (0, 0)
        } else {
            let lo = 1u64 << (63 - s.leading_zeros());
            (lo, lo.saturating_mul(2) - 1)
        };
        match buckets.iter_mut().find(|b| b.min == min) {
            Some(b) => b.rows += 1,
            None => buckets.push(Bucket { min, max, rows: 1 }),
        }
    }
    buckets.sort_by_key(|b| b.min);
    buckets
}

pub fn build_map(args: BuildMapArgs, ctx: &Context) -> anyhow::Result<Outcome> {
    let mut args = args.layer(ctx.file.section("build_map")?);
    let manifest_path = required(&args.manifest, "manifest")?;
    let input_path = required(&args.input_sae, "input-sae")?;
    let output_path = required(&args.output_sae, "output-sae")?;
    let out = required(&args.out, "out")?;
    let opts = BuildOptions {
        percentile: *args.percentile.get_or_insert(DEFAULT_PERCENTILE),
        workers: 0,
        part_size: *args.part_size.get_or_insert(DEFAULT_PART_SIZE),
        support_floor: *args.support_floor.get_or_insert(DEFAULT_SUPPORT_FLOOR),
    };

    let manifest = Manifest::open(&manifest_path)?;
    let input = SaeParams::load(&input_path)?;
    let output = SaeParams::load(&output_path)?;
    let map = dspa_core::build_map(&manifest, &input, &output, &opts)?;
    map.write(&out)?;

    let result = json!({
        "n_triples": map.n_triples,
        "d_sae": map.d_sae(),
        "nnz": map.nnz(),
        "low_support_rows": map.low_support_rows().len(),
        "support_histogram": support_histogram(&map.gate_support),
        "out": out,
    });
    emit("build-map", ctx, &args, &result)?;
    Ok(Outcome::Ok)
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SparsifyArgs {
    #[arg(long)]
    pub map: Option<PathBuf>,
    #[arg(long)]
    pub k_diff: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

layered!(SparsifyArgs { map, k_diff, out });

pub fn sparsify(args: SparsifyArgs, ctx: &Context) -> anyhow::Result<Outcome> {
    let mut args = args.layer(ctx.file.section("sparsify")?);
    let map_path = required(&args.map, "map")?;
    let out = required(&args.out, "out")?;
    let k_diff = *args.k_diff.get_or_insert(DEFAULT_K_DIFF);

    let map = DiffMap::read(&map_path)?;
    let tau = dspa_core::diff_map::sparsify_threshold(&map, k_diff)?;
    let sparse = dspa_core::sparsify(&map, k_diff)?;
    sparse.write(&out)?;

    let result = json!({
        "d_sae": map.d_sae(),
        "nnz_before": map.nnz(),
        "nnz_after": sparse.nnz(),
        "tau": tau,
        "out": out,
    });
    emit("sparsify", ctx, &args, &result)?;
    Ok(Outcome::Ok)
}
