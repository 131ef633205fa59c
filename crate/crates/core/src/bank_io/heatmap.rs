//! Routing and similarity maps laid out on the merged token grid, exported as CSV.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bank::GeometryBank;
use crate::error::{Error, Result};
use crate::grounding::RoutingWeights;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapKind {
    /// Mean source-layer id of each token's selected layers.
    AvgLayerIndex,
    /// Cosine similarity of every token to a query token within one bank layer.
    RoiSimilarity,
    /// Selection count per bank layer.
    LayerHistogram,
}

impl HeatmapKind {
    pub fn label(self) -> &'static str {
        match self {
            HeatmapKind::AvgLayerIndex => "avg_layer_index",
            HeatmapKind::RoiSimilarity => "roi_similarity",
            HeatmapKind::LayerHistogram => "layer_histogram",
        }
    }
}

impl FromStr for HeatmapKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg_layer_index" => Ok(HeatmapKind::AvgLayerIndex),
            "roi_similarity" => Ok(HeatmapKind::RoiSimilarity),
            "layer_histogram" => Ok(HeatmapKind::LayerHistogram),
            other => Err(Error::config(format!("unknown heatmap kind `{other}`"))),
        }
    }
}

/// `num_frames` grids of `rows x cols`, frame-major then row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapGrid {
    pub kind: HeatmapKind,
    pub num_frames: usize,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    /// Extra `key = value` lines for the sidecar file.
    pub meta: Vec<(String, String)>,
}

impl HeatmapGrid {
    pub fn get(&self, frame: usize, r: usize, c: usize) -> f64 {
        self.values[(frame * self.rows + r) * self.cols + c]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for f in 0..self.num_frames {
            for r in 0..self.rows {
                let line: Vec<String> = (0..self.cols).map(|c| self.get(f, r, c).to_string()).collect();
                out.push_str(&line.join(","));
                out.push('\n');
            }
        }
        out
    }

    pub fn metadata(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "kind = {}", self.kind.label());
        let _ = writeln!(out, "num_frames = {}", self.num_frames);
        let _ = writeln!(out, "rows = {}", self.rows);
        let _ = writeln!(out, "cols = {}", self.cols);
        let _ = writeln!(out, "layout = frame-major blocks of rows, comma-separated columns");
        for (k, v) in &self.meta {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

fn check_grid(tokens: usize, num_frames: usize, rows: usize, cols: usize) -> Result<()> {
    if num_frames * rows * cols != tokens {
        return Err(Error::dim(format!(
            "{tokens} tokens do not fill {num_frames} frames of {rows}x{cols}"
        )));
    }
    Ok(())
}

/// Per token, the arithmetic mean of the selected layers' source ids.
pub fn avg_layer_index(
    routing: &RoutingWeights,
    layer_ids: &[usize],
    num_frames: usize,
    rows: usize,
    cols: usize,
) -> Result<HeatmapGrid> {
    if layer_ids.len() != routing.num_layers() {
        return Err(Error::dim(format!(
            "{} layer ids for routing over {} layers",
            layer_ids.len(),
            routing.num_layers()
        )));
    }
    check_grid(routing.num_tokens(), num_frames, rows, cols)?;
    let values = routing
        .selected
        .iter()
        .map(|sel| sel.iter().map(|&l| layer_ids[l] as f64).sum::<f64>() / sel.len() as f64)
        .collect();
    Ok(HeatmapGrid {
        kind: HeatmapKind::AvgLayerIndex,
        num_frames,
        rows,
        cols,
        values,
        meta: vec![("layer_ids".into(), format!("{layer_ids:?}"))],
    })
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Cosine similarity of bank layer `layer`'s `query` token against every token of that layer.
/// Zero vectors score 0.
pub fn roi_similarity(
    bank: &GeometryBank,
    layer: usize,
    query: usize,
    rows: usize,
    cols: usize,
) -> Result<HeatmapGrid> {
    if layer >= bank.num_layers() {
        return Err(Error::Index(format!(
            "bank layer {layer} out of range {}",
            bank.num_layers()
        )));
    }
    if query >= bank.num_tokens() {
        return Err(Error::Index(format!(
            "query token {query} out of range {}",
            bank.num_tokens()
        )));
    }
    check_grid(bank.num_tokens(), bank.num_frames, rows, cols)?;
    let g = &bank.layers[layer];
    let q = g.row(query);
    Ok(HeatmapGrid {
        kind: HeatmapKind::RoiSimilarity,
        num_frames: bank.num_frames,
        rows,
        cols,
        values: (0..g.rows()).map(|t| cosine(q, g.row(t))).collect(),
        meta: vec![
            ("layer_id".into(), bank.layer_indices[layer].to_string()),
            ("query_token".into(), query.to_string()),
        ],
    })
}

/// Selection counts per bank layer as a single `1 x |S|` row.
pub fn layer_histogram(routing: &RoutingWeights, layer_ids: &[usize]) -> Result<HeatmapGrid> {
    if layer_ids.len() != routing.num_layers() {
        return Err(Error::dim(format!(
            "{} layer ids for routing over {} layers",
            layer_ids.len(),
            routing.num_layers()
        )));
    }
    let mut counts = vec![0.0; layer_ids.len()];
    for sel in &routing.selected {
        for &l in sel {
            counts[l] += 1.0;
        }
    }
    Ok(HeatmapGrid {
        kind: HeatmapKind::LayerHistogram,
        num_frames: 1,
        rows: 1,
        cols: layer_ids.len(),
        values: counts,
        meta: vec![
            ("layer_ids".into(), format!("{layer_ids:?}")),
            ("tokens".into(), routing.num_tokens().to_string()),
        ],
    })
}

/// Writes `<stem>.csv` and `<stem>.meta.txt` into `dir`.
pub fn export_heatmap(grid: &HeatmapGrid, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join(format!("{stem}.csv"));
    let meta = dir.join(format!("{stem}.meta.txt"));
    fs::write(&csv, grid.to_csv()).map_err(|e| Error::io(&csv, e))?;
    fs::write(&meta, grid.metadata()).map_err(|e| Error::io(&meta, e))?;
    Ok((csv, meta))
}
