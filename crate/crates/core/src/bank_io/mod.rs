//! File formats: `.geobank` raw layer stacks, heatmap CSVs and plain-text reports.

mod geobank;
mod heatmap;
mod report;

pub use geobank::{
    decode_geobank, encode_geobank, inspect_geobank, layer_stats, read_geobank, read_header,
    write_geobank, GeobankHeader, LayerStats,
    DTYPE_F32, HEADER_LEN, MAGIC, VERSION,
};
pub use heatmap::{
    avg_layer_index, export_heatmap, layer_histogram, roi_similarity, HeatmapGrid, HeatmapKind,
};
pub use report::{Report, Table};
