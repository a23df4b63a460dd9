use crate::error::{Error, Result};

/// Visibility pattern of an additive attention mask over `size x size`
/// entries: visible entries contribute 0, hidden ones -inf.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMask {
    size: usize,
    visible: Vec<bool>,
}

impl AttnMask {
    /// Every entry visible.
    pub fn full(size: usize) -> Self {
        AttnMask {
            size,
            visible: vec![true; size * size],
        }
    }

    pub fn from_visible(size: usize, visible: Vec<bool>) -> Result<Self> {
        if visible.len() != size * size {
            return Err(Error::Shape(format!(
                "mask of size {size} needs {} entries, got {}",
                size * size,
                visible.len()
            )));
        }
        for row in 0..size {
            if !visible[row * size..(row + 1) * size].iter().any(|&v| v) {
                return Err(Error::FullyMaskedRow { row });
            }
        }
        Ok(AttnMask { size, visible })
    }

    /// Parses an additive matrix whose entries must be exactly 0 or -inf.
    pub fn from_additive(size: usize, additive: &[f64]) -> Result<Self> {
        if additive.len() != size * size {
            return Err(Error::Shape(format!(
                "mask of size {size} needs {} entries, got {}",
                size * size,
                additive.len()
            )));
        }
        let mut visible = Vec::with_capacity(additive.len());
        for (i, &v) in additive.iter().enumerate() {
            if v == 0.0 {
                visible.push(true);
            } else if v == f64::NEG_INFINITY {
                visible.push(false);
            } else {
                return Err(Error::BadMaskEntry {
                    row: i / size,
                    col: i % size,
                    value: v,
                });
            }
        }
        AttnMask::from_visible(size, visible)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn is_visible(&self, row: usize, col: usize) -> bool {
        self.visible[row * self.size + col]
    }

    /// Additive value of one entry: `0.0` or `-inf`.
    pub fn additive(&self, row: usize, col: usize) -> f64 {
        if self.is_visible(row, col) {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    }

    pub fn pattern(&self) -> &[bool] {
        &self.visible
    }

    pub fn is_full(&self) -> bool {
        self.visible.iter().all(|&v| v)
    }
}
