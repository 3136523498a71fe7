use std::ops::Range;

use serde::Serialize;

use crate::accel::{AccelConfig, DesignKind};
use crate::error::{Error, Result};

/// One weight tile: a `K-range × N-range` slice of the weight matrix and the
/// input row blocks it is paired with.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WeightTile {
    pub k_range: Range<usize>,
    pub n_range: Range<usize>,
    /// Indices of native-height input row blocks.
    pub input_blocks: Range<usize>,
}

/// Ordered weight tiles covering `K × N`, grouped by K-range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TilePlan {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub native_cols: usize,
    pub native_rows: usize,
    pub k_ranges: Vec<Range<usize>>,
    pub tiles: Vec<WeightTile>,
}

impl TilePlan {
    /// On-chip bytes a tile occupies once its columns are padded to whole
    /// native strips.
    pub fn footprint(&self, tile: &WeightTile) -> usize {
        tile.n_range.len().div_ceil(self.native_cols) * self.native_cols * tile.k_range.len()
    }

    pub fn tiles_in_k_range(&self, idx: usize) -> impl Iterator<Item = (usize, &WeightTile)> {
        let kr = self.k_ranges[idx].clone();
        self.tiles.iter().enumerate().filter(move |(_, t)| t.k_range == kr)
    }

    pub fn max_k_range(&self) -> usize {
        self.k_ranges.iter().map(|r| r.len()).max().unwrap_or(0)
    }

    /// Check disjoint exact coverage of `K × N` and per-tile capacity.
    pub fn validate(&self, capacity: usize) -> Result<()> {
        let mut covered = vec![false; self.k * self.n];
        for t in &self.tiles {
            if t.k_range.end > self.k || t.n_range.end > self.n || t.k_range.is_empty() || t.n_range.is_empty() {
                return Err(Error::param(format!("tile {t:?} outside {}x{}", self.k, self.n)));
            }
            let fp = self.footprint(t);
            if fp > capacity {
                return Err(Error::Capacity {
                    buffer: "global weight buffer".into(),
                    needed: fp,
                    capacity,
                });
            }
            for k in t.k_range.clone() {
                for n in t.n_range.clone() {
                    let cell = &mut covered[k * self.n + n];
                    if *cell {
                        return Err(Error::param(format!("tiles overlap at ({k}, {n})")));
                    }
                    *cell = true;
                }
            }
        }
        if covered.iter().any(|c| !c) {
            return Err(Error::param("tiles do not cover the weight matrix"));
        }
        Ok(())
    }
}

/// Split `len` into `parts` contiguous ranges whose sizes differ by at most one.
fn even_split(len: usize, parts: usize) -> Vec<Range<usize>> {
    let base = len / parts;
    let extra = len % parts;
    let mut start = 0;
    (0..parts)
        .map(|i| {
            let size = base + usize::from(i < extra);
            let r = start..start + size;
            start += size;
            r
        })
        .collect()
}

/// Largest K depth a single native strip may have under `config`.
fn max_k_depth(config: &AccelConfig) -> usize {
    let native = config.native_cols();
    let global = config.global_weight_buffer_bytes() / native;
    match config.kind {
        DesignKind::Vm => {
            let vm = &config.vm;
            global
                .min(vm.local_weight_tile_bytes / vm.tile_cols)
                .min(vm.local_input_buffer_bytes / vm.tile_rows)
        }
        DesignKind::Sa => global.min(config.sa.global_input_buffer_bytes / config.sa.rows),
    }
}

/// Plan weight tiles: split along N into equal-as-possible runs of native
/// strips that fit the global weight buffer; when one full-K strip does not
/// fit, split K into equal-as-possible ranges as well.
pub fn plan_weight_tiles(m: usize, n: usize, k: usize, config: &AccelConfig) -> Result<TilePlan> {
    if m == 0 || n == 0 || k == 0 {
        return Err(Error::param(format!("GEMM dims must be positive, got {m}x{n}x{k}")));
    }
    let native_cols = config.native_cols();
    let native_rows = config.native_rows();
    let capacity = config.global_weight_buffer_bytes();
    let kmax = max_k_depth(config);
    if kmax == 0 {
        return Err(Error::Capacity {
            buffer: "weight tile".into(),
            needed: native_cols,
            capacity,
        });
    }
    let k_ranges = even_split(k, k.div_ceil(kmax));
    let deepest = k_ranges.iter().map(|r| r.len()).max().unwrap_or(k);
    let strips = n.div_ceil(native_cols);
    let per_tile = capacity / (native_cols * deepest);
    debug_assert!(per_tile >= 1);
    let n_tiles = strips.div_ceil(per_tile);
    let strip_groups = even_split(strips, n_tiles);
    let blocks = m.div_ceil(native_rows);

    let mut tiles = Vec::with_capacity(k_ranges.len() * strip_groups.len());
    for kr in &k_ranges {
        for g in &strip_groups {
            tiles.push(WeightTile {
                k_range: kr.clone(),
                n_range: g.start * native_cols..(g.end * native_cols).min(n),
                input_blocks: 0..blocks,
            });
        }
    }
    Ok(TilePlan {
        m,
        n,
        k,
        native_cols,
        native_rows,
        k_ranges,
        tiles,
    })
}
