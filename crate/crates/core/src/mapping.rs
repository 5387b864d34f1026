//! Placement of bundle layers onto the macro.
//!
//! A filter of `K × C_in` taps occupies `ceil(K·C_in / 36)` DP units per
//! column. Filters taller than the array are split along input channels into
//! passes whose partial codes the runtime adds digitally; more output channels
//! than the array holds are split into sequential column batches.

use crate::bundle::ModelBundle;
use crate::dataflow::{LayerConfig, LayerKind};
use crate::dp_array::MacroGeometry;
use crate::engine::outputs_per_block;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMapping {
    pub layer: usize,
    /// Input-channel ranges, one per pass.
    pub channel_splits: Vec<(usize, usize)>,
    /// Output-channel ranges, one per column batch.
    pub column_batches: Vec<(usize, usize)>,
    /// DP units connected per column for each channel split.
    pub units_per_column: Vec<usize>,
    pub outputs_per_block: usize,
    /// 4-column blocks used by each column batch.
    pub blocks_per_batch: Vec<usize>,
}

impl LayerMapping {
    pub fn needs_partial_sums(&self) -> bool {
        self.channel_splits.len() > 1
    }

    pub fn passes(&self) -> usize {
        self.channel_splits.len() * self.column_batches.len()
    }

    /// The single-pass layer executed for channel split `s` and batch `b`.
    pub fn sub_layer(&self, full: &LayerConfig, s: usize, b: usize) -> LayerConfig {
        let (c0, c1) = self.channel_splits[s];
        let (o0, o1) = self.column_batches[b];
        let beta = if full.beta.is_empty() || s > 0 { vec![] } else { full.beta[o0..o1].to_vec() };
        LayerConfig { c_in: c1 - c0, c_out: o1 - o0, beta, ..full.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MappingPlan {
    pub layers: Vec<LayerMapping>,
}

fn ranges(total: usize, chunk: usize) -> Vec<(usize, usize)> {
    (0..total.div_ceil(chunk)).map(|i| (i * chunk, ((i + 1) * chunk).min(total))).collect()
}

pub fn map_layer(index: usize, layer: &LayerConfig, geom: &MacroGeometry) -> Result<LayerMapping> {
    layer.validate()?;
    let max_channels = match layer.kind {
        LayerKind::Conv => (geom.n_rows / layer.k) / 4 * 4,
        LayerKind::Fc => geom.n_rows,
    };
    if max_channels == 0 {
        return Err(Error::Unmappable(format!(
            "layer {index}: a {}-tap filter slice of 4 channels needs {} rows, the array has {}",
            layer.k,
            4 * layer.k,
            geom.n_rows
        )));
    }
    let per_block = outputs_per_block(layer.r_w);
    let cap = geom.n_blocks * per_block;
    let channel_splits = ranges(layer.c_in, max_channels);
    let column_batches = ranges(layer.c_out, cap);
    Ok(LayerMapping {
        layer: index,
        units_per_column: channel_splits.iter().map(|(a, b)| geom.units_for_rows((b - a) * layer.k)).collect(),
        blocks_per_batch: column_batches.iter().map(|(a, b)| (b - a).div_ceil(per_block)).collect(),
        channel_splits,
        column_batches,
        outputs_per_block: per_block,
    })
}

pub fn plan_mapping(bundle: &ModelBundle, geom: &MacroGeometry) -> Result<MappingPlan> {
    geom.validate()?;
    let layers = bundle.layers.iter().enumerate().map(|(i, l)| map_layer(i, &l.cfg, geom)).collect::<Result<_>>()?;
    Ok(MappingPlan { layers })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn allocation_examples() {
        let g = MacroGeometry::default();
        let m = map_layer(0, &LayerConfig::conv(16, 8, 8, 4, 8), &g).unwrap();
        assert_eq!(m.units_per_column, vec![4]);
        assert_eq!(m.outputs_per_block, 1);
        let fc = map_layer(0, &LayerConfig::fc(128, 256, 8, 1, 8), &g).unwrap();
        assert_eq!(fc.units_per_column, vec![4]);
        assert_eq!(fc.blocks_per_batch, vec![64]);
        let wide = map_layer(0, &LayerConfig::conv(16, 512, 8, 4, 8), &g).unwrap();
        assert_eq!(wide.column_batches.len(), 8);
        let deep = map_layer(0, &LayerConfig::conv(256, 8, 8, 1, 8), &g).unwrap();
        assert_eq!(deep.channel_splits, vec![(0, 128), (128, 256)]);
        assert!(deep.needs_partial_sums());
    }

    #[test]
    fn oversized_kernel_is_unmappable() {
        let mut l = LayerConfig::conv(4, 4, 8, 1, 8);
        l.k = 17 * 17;
        let err = map_layer(0, &l, &MacroGeometry::default()).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }
}
