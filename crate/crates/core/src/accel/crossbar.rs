use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Reorder buffer that releases tiles in row-major tile order.
#[derive(Debug)]
pub struct Crossbar<T> {
    row_tiles: usize,
    col_tiles: usize,
    next: usize,
    pending: BTreeMap<usize, T>,
}

impl<T> Crossbar<T> {
    pub fn new(row_tiles: usize, col_tiles: usize) -> Self {
        Self {
            row_tiles,
            col_tiles,
            next: 0,
            pending: BTreeMap::new(),
        }
    }

    pub fn total(&self) -> usize {
        self.row_tiles * self.col_tiles
    }

    pub fn emitted(&self) -> usize {
        self.next
    }

    pub fn is_complete(&self) -> bool {
        self.next == self.total()
    }

    pub fn accept(&mut self, tile_row: usize, tile_col: usize, tile: T) -> Result<()> {
        if tile_row >= self.row_tiles || tile_col >= self.col_tiles {
            return Err(Error::Crossbar(format!(
                "tile ({tile_row}, {tile_col}) outside a {}x{} tile grid",
                self.row_tiles, self.col_tiles
            )));
        }
        let idx = tile_row * self.col_tiles + tile_col;
        if idx < self.next || self.pending.contains_key(&idx) {
            return Err(Error::Crossbar(format!("duplicate tile ({tile_row}, {tile_col})")));
        }
        self.pending.insert(idx, tile);
        Ok(())
    }

    /// Next tile in row-major order, if it has arrived.
    pub fn pop_ready(&mut self) -> Option<T> {
        let tile = self.pending.remove(&self.next)?;
        self.next += 1;
        Some(tile)
    }
}

/// Collect tagged tiles arriving in any order into row-major tile order.
pub fn crossbar_collect<T>(
    tiles: impl IntoIterator<Item = ((usize, usize), T)>,
    row_tiles: usize,
    col_tiles: usize,
) -> Result<Vec<T>> {
    let mut xbar = Crossbar::new(row_tiles, col_tiles);
    let mut out = Vec::with_capacity(xbar.total());
    for ((r, c), t) in tiles {
        xbar.accept(r, c, t)?;
        while let Some(t) = xbar.pop_ready() {
            out.push(t);
        }
    }
    if !xbar.is_complete() {
        let missing: Vec<_> = (xbar.emitted()..xbar.total())
            .filter(|i| !xbar.pending.contains_key(i))
            .map(|i| (i / col_tiles, i % col_tiles))
            .collect();
        return Err(Error::Crossbar(format!("missing tiles {missing:?}")));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(rows: usize, cols: usize) -> Vec<((usize, usize), usize)> {
        (0..rows * cols).map(|i| ((i / cols, i % cols), i)).collect()
    }

    #[test]
    fn in_order_is_identity() {
        assert_eq!(crossbar_collect(grid(2, 3), 2, 3).unwrap(), (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn reverse_arrival_emits_row_major() {
        let mut tiles = grid(3, 2);
        tiles.reverse();
        assert_eq!(crossbar_collect(tiles, 3, 2).unwrap(), (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn duplicate_tag_rejected() {
        let mut tiles = grid(2, 2);
        tiles.push(((0, 1), 99));
        assert!(matches!(crossbar_collect(tiles, 2, 2), Err(Error::Crossbar(_))));
        let mut xbar = Crossbar::new(1, 2);
        xbar.accept(0, 0, 'a').unwrap();
        xbar.pop_ready().unwrap();
        assert!(xbar.accept(0, 0, 'b').is_err());
    }

    #[test]
    fn missing_tag_rejected() {
        let err = crossbar_collect(grid(2, 2).into_iter().skip(1), 2, 2).unwrap_err();
        assert!(err.to_string().contains("(0, 0)"));
    }
}
