//! Quantitative diagnostics of trained bundles and plotting of learning curves.

mod continuity;
mod histogram;
mod pca;
mod plot;

pub use continuity::{continuity_from_embeddings, embed_dataset, embedding_continuity, ContinuityReport, MIN_RANDOM_PAIRS};
pub use histogram::{bin_counts, build_histogram, critic_histogram, ScoreHistogram, SHUFFLE_MIN_GAP};
pub use pca::{pca, write_projection_csv, Projection};
pub use plot::{mean_std_series, plot_curves, read_curve_table, CurveTable, PLOT_SIZE};

use std::path::Path;

use crate::env::ExpertDataset;
use crate::error::Result;
use crate::models::ModelBundle;

/// Embed every dataset state, project to `dims` components and write the
/// coordinates CSV.
pub fn project_embeddings(ds: &ExpertDataset, bundle: &ModelBundle, dims: usize, out: Option<&Path>) -> Result<Projection> {
    let emb = embed_dataset(ds, bundle)?;
    let labels: Vec<(usize, usize)> = emb
        .iter()
        .enumerate()
        .flat_map(|(t, tr)| (0..tr.len()).map(move |i| (t, i)))
        .collect();
    let rows: Vec<Vec<f64>> = emb.into_iter().flatten().collect();
    let p = pca(&rows, dims)?;
    if let Some(path) = out {
        write_projection_csv(path, &p, &labels)?;
    }
    Ok(p)
}
