use std::collections::VecDeque;

use crate::error::{Error, Result};

/// Binary raster: edge maps and foreground masks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMap {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

/// Canny output; `true` marks an edge pixel.
pub type EdgeMap = BinaryMap;

/// Pixel selection; `true` marks a selected pixel.
pub type Mask = BinaryMap;

impl BinaryMap {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} bits for a {width}x{height} map",
                bits.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![true; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn complement(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    /// 8-connected components of set pixels, each as a list of flat indices.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut seen = vec![false; self.bits.len()];
        let mut out = Vec::new();
        let mut queue = VecDeque::new();
        for start in 0..self.bits.len() {
            if !self.bits[start] || seen[start] {
                continue;
            }
            seen[start] = true;
            queue.push_back(start);
            let mut comp = Vec::new();
            while let Some(p) = queue.pop_front() {
                comp.push(p);
                let (r, c) = ((p / self.width) as isize, (p % self.width) as isize);
                for dr in -1..=1 {
                    for dc in -1..=1 {
                        let (nr, nc) = (r + dr, c + dc);
                        if nr < 0 || nc < 0 || nr >= self.height as isize || nc >= self.width as isize {
                            continue;
                        }
                        let q = nr as usize * self.width + nc as usize;
                        if self.bits[q] && !seen[q] {
                            seen[q] = true;
                            queue.push_back(q);
                        }
                    }
                }
            }
            out.push(comp);
        }
        out
    }

    /// Clears 8-connected components with fewer than `min_size` pixels.
    pub fn remove_small_components(&mut self, min_size: usize) {
        for comp in self.components() {
            if comp.len() < min_size {
                for p in comp {
                    self.bits[p] = false;
                }
            }
        }
    }

    pub fn crop(&self, top: usize, left: usize, width: usize, height: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::param("crop exceeds map bounds"));
        }
        let mut bits = Vec::with_capacity(width * height);
        for r in top..top + height {
            bits.extend_from_slice(&self.bits[r * self.width + left..r * self.width + left + width]);
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn components_and_removal() {
        let mut m = BinaryMap::empty(6, 4);
        // Diagonal pair is one 8-connected component.
        m.set(0, 0, true);
        m.set(1, 1, true);
        m.set(3, 5, true);
        assert_eq!(m.components().len(), 2);
        m.remove_small_components(2);
        assert_eq!(m.count(), 2);
        assert!(!m.get(3, 5));
        assert_eq!(m.complement().count(), 22);
    }
}
