//! Block-wise patch masking with an exact masked-cell count.
//!
//! Rectangles of at least `min_block` cells with aspect ratio in
//! `[aspect, 1/aspect]` are unioned at uniform positions until the mask reaches
//! `round(ratio · cells)`. Any overshoot is trimmed from the cells that the last
//! rectangle newly added, scanning row-major from its end.

use crate::error::{Error, Result};
use crate::rng::Prng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub h: usize,
    pub w: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.h * self.w
    }

    /// Flat row-major cell indices covered on a grid of width `grid_w`.
    pub fn cells(&self, grid_w: usize) -> impl Iterator<Item = usize> + '_ {
        (self.top..self.top + self.h).flat_map(move |r| (self.left..self.left + self.w).map(move |c| r * grid_w + c))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskParams {
    pub ratio: f64,
    pub min_block: usize,
    pub aspect: f64,
}

impl Default for MaskParams {
    fn default() -> Self {
        MaskParams { ratio: 0.4, min_block: 16, aspect: 0.3 }
    }
}

/// Masked patch indices for one image plus the rectangles that produced them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Sorted, unique flat indices.
    pub indices: Vec<usize>,
    pub blocks: Vec<Rect>,
    /// Cells removed from the last block by exact-count trimming.
    pub trimmed: Vec<usize>,
}

impl MaskSet {
    pub fn empty(grid_h: usize, grid_w: usize) -> Self {
        MaskSet { grid_h, grid_w, indices: Vec::new(), blocks: Vec::new(), trimmed: Vec::new() }
    }

    /// Every cell masked, recorded as one full-grid block.
    pub fn full(grid_h: usize, grid_w: usize) -> Self {
        MaskSet {
            grid_h,
            grid_w,
            indices: (0..grid_h * grid_w).collect(),
            blocks: vec![Rect { top: 0, left: 0, h: grid_h, w: grid_w }],
            trimmed: Vec::new(),
        }
    }

    /// Mask from explicit indices (no block record).
    pub fn from_indices(grid_h: usize, grid_w: usize, mut indices: Vec<usize>) -> Result<Self> {
        let n = grid_h * grid_w;
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::OutOfRange { index: bad, limit: n });
        }
        indices.sort_unstable();
        indices.dedup();
        Ok(MaskSet { grid_h, grid_w, indices, blocks: Vec::new(), trimmed: Vec::new() })
    }

    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, idx: usize) -> bool {
        self.indices.binary_search(&idx).is_ok()
    }

    /// Union of recorded blocks minus trimmed cells, sorted.
    pub fn reconstruct(&self) -> Vec<usize> {
        let mut bits = vec![false; self.cells()];
        for b in &self.blocks {
            for c in b.cells(self.grid_w) {
                bits[c] = true;
            }
        }
        for &t in &self.trimmed {
            bits[t] = false;
        }
        bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
    }
}

/// Number of cells a mask at `ratio` covers on `cells` patches.
pub fn target_count(ratio: f64, cells: usize) -> usize {
    (ratio * cells as f64).round() as usize
}

fn aspect_ok(h: usize, w: usize, aspect: f64) -> bool {
    let r = h as f64 / w as f64;
    r >= aspect - 1e-12 && r <= 1.0 / aspect + 1e-12
}

/// Smallest rectangle (area ≥ `lo`, fits the grid) honoring the aspect bound
/// when possible; ties prefer the squarest shape.
fn fallback_shape(grid_h: usize, grid_w: usize, lo: usize, aspect: f64) -> (usize, usize) {
    let mut best: Option<(usize, usize, usize, usize)> = None; // (area, skew, h, w)
    let mut best_any: Option<(usize, usize, usize, usize)> = None;
    for h in 1..=grid_h {
        for w in 1..=grid_w {
            if h * w < lo {
                continue;
            }
            let key = (h * w, h.abs_diff(w), h, w);
            if best_any.is_none_or(|b| key < b) {
                best_any = Some(key);
            }
            if aspect_ok(h, w, aspect) && best.is_none_or(|b| key < b) {
                best = Some(key);
            }
        }
    }
    let (_, _, h, w) = best.or(best_any).expect("grid has at least one cell");
    (h, w)
}

/// Draws a block-wise mask of exactly `round(ratio · grid_h · grid_w)` cells.
pub fn generate(grid_h: usize, grid_w: usize, params: &MaskParams, rng: &mut Prng) -> Result<MaskSet> {
    let MaskParams { ratio, min_block, aspect } = *params;
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("mask ratio must be in [0,1], got {ratio}")));
    }
    if !(aspect > 0.0 && aspect <= 1.0) {
        return Err(Error::InvalidArgument(format!("aspect bound must be in (0,1], got {aspect}")));
    }
    let cells = grid_h * grid_w;
    if cells == 0 {
        return Err(Error::InvalidArgument("mask grid has no cells".into()));
    }
    let target = target_count(ratio, cells);
    if target == 0 {
        return Ok(MaskSet::empty(grid_h, grid_w));
    }

    let lo = min_block.clamp(1, cells);
    let whole_grid = lo == cells;
    let (fb_h, fb_w) = fallback_shape(grid_h, grid_w, lo, aspect);
    let (log_lo, log_hi) = (aspect.ln(), (1.0 / aspect).ln());

    let mut bits = vec![false; cells];
    let mut count = 0usize;
    let mut blocks = Vec::new();
    let mut last_added: Vec<usize> = Vec::new();
    let mut stalls = 0usize;

    while count < target {
        let need = target - count;
        let hi = need.max(lo);
        let mut shape = None;
        for _ in 0..10 {
            let area = rng.uniform_in(lo as f64, hi as f64);
            let ar = rng.uniform_in(log_lo, log_hi).exp();
            let h = ((area * ar).sqrt().round() as usize).clamp(1, grid_h);
            let w = ((area / ar).sqrt().round() as usize).clamp(1, grid_w);
            if h * w >= lo && (whole_grid || aspect_ok(h, w, aspect)) {
                shape = Some((h, w));
                break;
            }
        }
        let (h, w) = shape.unwrap_or((fb_h, fb_w));
        let mut rect = Rect { top: rng.below(grid_h - h + 1), left: rng.below(grid_w - w + 1), h, w };

        if stalls >= 64 {
            // Force progress: cover the first unmasked cell with the fallback shape.
            let first = bits.iter().position(|&b| !b).expect("count < target <= cells");
            let (r, c) = (first / grid_w, first % grid_w);
            rect = Rect { top: r.min(grid_h - fb_h), left: c.min(grid_w - fb_w), h: fb_h, w: fb_w };
        }

        let added: Vec<usize> = rect.cells(grid_w).filter(|&c| !bits[c]).collect();
        if added.is_empty() {
            stalls += 1;
            continue;
        }
        stalls = 0;
        for &c in &added {
            bits[c] = true;
        }
        count += added.len();
        blocks.push(rect);
        last_added = added;
    }

    let mut trimmed = Vec::new();
    let overshoot = count - target;
    for _ in 0..overshoot {
        let c = last_added.pop().expect("last block added more than the overshoot");
        bits[c] = false;
        trimmed.push(c);
    }
    trimmed.sort_unstable();

    let indices = bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect();
    Ok(MaskSet { grid_h, grid_w, indices, blocks, trimmed })
}

/// Row-major `grid_h × grid_w` boolean view of a mask.
pub fn mask_to_bitmap(mask: &MaskSet) -> Vec<Vec<bool>> {
    let mut bm = vec![vec![false; mask.grid_w]; mask.grid_h];
    for &i in &mask.indices {
        bm[i / mask.grid_w][i % mask.grid_w] = true;
    }
    bm
}
