//! Position-sensitive RoI pooling.
//!
//! An RoI is split into a `k x k` grid. Bin `(u, v)` (row `u`, column `v`)
//! average-pools only its own channel slice: for output group `g` it reads
//! channel `g * k^2 + u * k + v`. Each group's output is the mean of its `k^2`
//! bin averages. Bin edges are rounded to whole cells with half-open
//! intervals; a bin left without cells contributes zero.

use super::FeatureMap;
use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RoiGrid {
    pub k: usize,
    /// Foreground classes; the score bank also carries background.
    pub class_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    /// `C + 1` class logits from `k^2 (C + 1)` channels.
    Score,
    /// Four regression values from `4 k^2` channels.
    Regression,
}

impl RoiGrid {
    pub fn new(k: usize, class_count: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("RoI grid side k must be >= 1".into()));
        }
        Ok(RoiGrid { k, class_count })
    }

    pub fn bins(&self) -> usize {
        self.k * self.k
    }

    pub fn score_channels(&self) -> usize {
        self.bins() * (self.class_count + 1)
    }

    pub fn regression_channels(&self) -> usize {
        4 * self.bins()
    }

    pub fn groups(&self, mode: PoolMode) -> usize {
        match mode {
            PoolMode::Score => self.class_count + 1,
            PoolMode::Regression => 4,
        }
    }

    pub fn channels(&self, mode: PoolMode) -> usize {
        self.groups(mode) * self.bins()
    }
}

/// Half-open cell ranges `[row0, row1) x [col0, col1)` of one bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BinCells {
    pub row0: usize,
    pub row1: usize,
    pub col0: usize,
    pub col1: usize,
}

impl BinCells {
    pub fn count(&self) -> usize {
        (self.row1 - self.row0) * (self.col1 - self.col0)
    }
}

/// Pooling result plus the bin layout needed for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledRoi {
    pub values: Vec<f64>,
    pub bins: Vec<Option<BinCells>>,
    pub mode: PoolMode,
    pub grid: RoiGrid,
}

fn edges(start: f64, len: f64, k: usize, limit: usize) -> Vec<(usize, usize)> {
    let step = len / k as f64;
    (0..k)
        .map(|u| {
            let lo = (start + u as f64 * step).round().clamp(0.0, limit as f64) as usize;
            let hi = (start + (u + 1) as f64 * step).round().clamp(0.0, limit as f64) as usize;
            (lo, hi.max(lo))
        })
        .collect()
}

/// Pools `roi` (given in image pixels) from `maps`, whose cells are
/// `1 / spatial_scale` pixels wide.
pub fn psroi_pool(
    maps: &FeatureMap,
    roi: &BBox,
    grid: &RoiGrid,
    mode: PoolMode,
    spatial_scale: f64,
) -> Result<PooledRoi> {
    let want = grid.channels(mode);
    if maps.channels() != want {
        return Err(Error::ShapeMismatch(format!(
            "{mode:?} pooling with k={} needs {want} channels, map has {}",
            grid.k,
            maps.channels()
        )));
    }
    roi.validated()?;
    let [x1, y1, x2, y2] = roi.corners().map(|v| v * spatial_scale);
    let (h, w) = (maps.height() as f64, maps.width() as f64);
    if x2 <= 0.0 || y2 <= 0.0 || x1 >= w || y1 >= h {
        return Err(Error::InvalidArgument(format!(
            "RoI {:?} lies outside the {}x{} map",
            roi.to_array(),
            maps.height(),
            maps.width()
        )));
    }
    let k = grid.k;
    let rows = edges(y1, y2 - y1, k, maps.height());
    let cols = edges(x1, x2 - x1, k, maps.width());
    let mut bins = Vec::with_capacity(k * k);
    for &(row0, row1) in &rows {
        for &(col0, col1) in &cols {
            let cells = BinCells { row0, row1, col0, col1 };
            bins.push((cells.count() > 0).then_some(cells));
        }
    }

    let groups = grid.groups(mode);
    let kk = grid.bins() as f64;
    let mut values = vec![0.0; groups];
    for (b, cells) in bins.iter().enumerate() {
        let Some(cells) = cells else { continue };
        let inv = 1.0 / cells.count() as f64;
        for (g, out) in values.iter_mut().enumerate() {
            let ch = g * grid.bins() + b;
            let mut sum = 0.0;
            for i in cells.row0..cells.row1 {
                for j in cells.col0..cells.col1 {
                    sum += maps.get(i, j, ch);
                }
            }
            *out += sum * inv / kk;
        }
    }
    Ok(PooledRoi {
        values,
        bins,
        mode,
        grid: *grid,
    })
}

/// Scatters `grad_values` (one per output group) back onto `grad_maps`.
pub fn psroi_pool_backward(
    grad_values: &[f64],
    pooled: &PooledRoi,
    grad_maps: &mut FeatureMap,
) -> Result<()> {
    let grid = pooled.grid;
    let groups = grid.groups(pooled.mode);
    if grad_values.len() != groups || grad_maps.channels() != grid.channels(pooled.mode) {
        return Err(Error::ShapeMismatch(format!(
            "psroi backward with {} grads into {} channels",
            grad_values.len(),
            grad_maps.channels()
        )));
    }
    let kk = grid.bins() as f64;
    for (b, cells) in pooled.bins.iter().enumerate() {
        let Some(cells) = cells else { continue };
        let inv = 1.0 / (cells.count() as f64 * kk);
        for (g, gv) in grad_values.iter().enumerate() {
            if *gv == 0.0 {
                continue;
            }
            let ch = g * grid.bins() + b;
            for i in cells.row0..cells.row1 {
                for j in cells.col0..cells.col1 {
                    let idx = grad_maps.index(i, j, ch);
                    grad_maps.data_mut()[idx] += gv * inv;
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_laws() {
        let g = RoiGrid::new(7, 30).unwrap();
        assert_eq!(g.score_channels(), 49 * 31);
        assert_eq!(g.regression_channels(), 196);
        assert!(RoiGrid::new(0, 3).is_err());
    }

    #[test]
    fn constant_field_returns_constant() {
        let grid = RoiGrid::new(1, 0).unwrap();
        let maps = FeatureMap::filled(6, 6, 1, 2.5);
        for roi in [BBox::new(3.0, 3.0, 6.0, 6.0), BBox::new(1.5, 2.0, 2.0, 3.0)] {
            let out = psroi_pool(&maps, &roi, &grid, PoolMode::Score, 1.0).unwrap();
            assert_eq!(out.values, vec![2.5]);
        }
        let grid = RoiGrid::new(2, 2).unwrap();
        let maps = FeatureMap::filled(6, 6, grid.score_channels(), -1.0);
        let out = psroi_pool(&maps, &BBox::new(3.0, 3.0, 4.0, 4.0), &grid, PoolMode::Score, 1.0).unwrap();
        assert_eq!(out.values, vec![-1.0; 3]);
    }

    #[test]
    fn bins_read_their_own_channels() {
        // 2 classes incl. background, k = 2: channel g holds the value g.
        let grid = RoiGrid::new(2, 1).unwrap();
        let maps = FeatureMap::from_fn(4, 4, 8, |_, _, c| c as f64);
        let whole = BBox::new(2.0, 2.0, 4.0, 4.0);
        let out = psroi_pool(&maps, &whole, &grid, PoolMode::Score, 1.0).unwrap();
        assert_eq!(out.values, vec![1.5, 5.5]);
        let cells: Vec<_> = out.bins.iter().map(|b| b.unwrap()).collect();
        assert_eq!(cells[0], BinCells { row0: 0, row1: 2, col0: 0, col1: 2 });
        assert_eq!(cells[1], BinCells { row0: 0, row1: 2, col0: 2, col1: 4 });
        assert_eq!(cells[2], BinCells { row0: 2, row1: 4, col0: 0, col1: 2 });
    }

    #[test]
    fn position_sensitivity() {
        // k = 2 regression bank where only the top-left bin slice of group 0 is hot.
        let grid = RoiGrid::new(2, 0).unwrap();
        let maps = FeatureMap::from_fn(4, 4, 16, |i, j, c| if c == 0 && i < 2 && j < 2 { 4.0 } else { 0.0 });
        let whole = BBox::new(2.0, 2.0, 4.0, 4.0);
        let out = psroi_pool(&maps, &whole, &grid, PoolMode::Regression, 1.0).unwrap();
        assert_eq!(out.values, vec![1.0, 0.0, 0.0, 0.0]);
        // shifted RoI: the hot region now falls outside its top-left bin
        let shifted = BBox::new(3.0, 3.0, 2.0, 2.0);
        let out = psroi_pool(&maps, &shifted, &grid, PoolMode::Regression, 1.0).unwrap();
        assert_eq!(out.values[0], 0.0);
    }

    #[test]
    fn spatial_scale_maps_pixels_to_cells() {
        let grid = RoiGrid::new(1, 0).unwrap();
        let maps = FeatureMap::from_fn(4, 4, 1, |i, j, _| (i * 4 + j) as f64);
        // pixels [8, 12) at stride 4 cover cell 2 only
        let roi = BBox::new(10.0, 10.0, 4.0, 4.0);
        let out = psroi_pool(&maps, &roi, &grid, PoolMode::Score, 0.25).unwrap();
        assert_eq!(out.values, vec![10.0]);
    }

    #[test]
    fn empty_bins_contribute_zero() {
        let grid = RoiGrid::new(3, 0).unwrap();
        let maps = FeatureMap::filled(8, 8, 9, 1.0);
        // one cell wide: columns round to [2,2), [2,3), [3,3)
        let roi = BBox::new(3.0, 4.0, 1.0, 6.0);
        let out = psroi_pool(&maps, &roi, &grid, PoolMode::Score, 1.0).unwrap();
        assert!(out.bins.iter().any(|b| b.is_none()));
        assert!(out.values[0] < 1.0 && out.values[0] > 0.0);
    }

    #[test]
    fn errors() {
        let grid = RoiGrid::new(2, 1).unwrap();
        let maps = FeatureMap::zeros(4, 4, 7);
        let roi = BBox::new(2.0, 2.0, 2.0, 2.0);
        assert!(matches!(
            psroi_pool(&maps, &roi, &grid, PoolMode::Score, 1.0),
            Err(Error::ShapeMismatch(_))
        ));
        let maps = FeatureMap::zeros(4, 4, 8);
        let outside = BBox::new(20.0, 2.0, 2.0, 2.0);
        assert!(matches!(
            psroi_pool(&maps, &outside, &grid, PoolMode::Score, 1.0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn backward_spreads_bin_means() {
        let grid = RoiGrid::new(2, 0).unwrap();
        let maps = FeatureMap::zeros(4, 4, 4);
        let pooled = psroi_pool(&maps, &BBox::new(2.0, 2.0, 4.0, 4.0), &grid, PoolMode::Score, 1.0).unwrap();
        let mut g = FeatureMap::zeros(4, 4, 4);
        psroi_pool_backward(&[1.0], &pooled, &mut g).unwrap();
        // each of 16 cells is read once through its bin's channel: weight 1/(4 cells * 4 bins)
        assert_eq!(g.get(0, 0, 0), 1.0 / 16.0);
        assert_eq!(g.get(0, 0, 1), 0.0);
        assert_eq!(g.get(3, 3, 3), 1.0 / 16.0);
        assert!((g.data().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}
