//! The five-class label vocabulary and per-pixel label grids.

use crate::{Error, Result};

/// Number of classes in the label vocabulary.
pub const CLASS_COUNT: usize = 5;

/// Cell classes, ordered as the network's output channels. The first four
/// are the positive (protein-expressing) classes; `Other` covers background
/// and cells expressing none of the targeted markers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum CellClass {
    Cd3 = 0,
    Cd8Cd3Lo = 1,
    Cd8Cd3Hi = 2,
    Cd20 = 3,
    Other = 4,
}

impl CellClass {
    pub const ALL: [CellClass; CLASS_COUNT] = [
        CellClass::Cd3,
        CellClass::Cd8Cd3Lo,
        CellClass::Cd8Cd3Hi,
        CellClass::Cd20,
        CellClass::Other,
    ];

    /// The four protein-expressing classes, in channel order.
    pub const POSITIVE: [CellClass; 4] = [
        CellClass::Cd3,
        CellClass::Cd8Cd3Lo,
        CellClass::Cd8Cd3Hi,
        CellClass::Cd20,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<CellClass> {
        CellClass::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            CellClass::Cd3 => "CD3",
            CellClass::Cd8Cd3Lo => "CD8_CD3LO",
            CellClass::Cd8Cd3Hi => "CD8_CD3HI",
            CellClass::Cd20 => "CD20",
            CellClass::Other => "Other",
        }
    }

    pub fn from_name(name: &str) -> Option<CellClass> {
        CellClass::ALL.iter().copied().find(|c| c.name() == name)
    }
}

impl std::fmt::Display for CellClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-pixel class-index grid. Row-major, `data[y * width + x]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl LabelMap {
    /// A map filled with one class.
    pub fn filled(width: usize, height: usize, class: CellClass) -> Self {
        LabelMap { width, height, data: vec![class as u8; width * height] }
    }

    /// Build from raw class indices; every index must be < [`CLASS_COUNT`].
    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "label map data length {} does not match {}x{}",
                data.len(),
                width,
                height
            )));
        }
        if let Some(bad) = data.iter().find(|&&v| v as usize >= CLASS_COUNT) {
            return Err(Error::InvalidClass(*bad));
        }
        Ok(LabelMap { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> CellClass {
        CellClass::from_index(self.data[y * self.width + x] as usize)
            .expect("label maps hold valid class indices")
    }

    pub fn set(&mut self, x: usize, y: usize, class: CellClass) {
        self.data[y * self.width + x] = class as u8;
    }

    /// Raw row-major class indices.
    pub fn raw(&self) -> &[u8] {
        &self.data
    }

    /// Copy of the rectangle with origin `(x0, y0)` and the given size.
    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<LabelMap> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(Error::ShapeMismatch(format!(
                "crop {}x{} at ({}, {}) exceeds map {}x{}",
                width, height, x0, y0, self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            let row = (y0 + y) * self.width + x0;
            data.extend_from_slice(&self.data[row..row + width]);
        }
        Ok(LabelMap { width, height, data })
    }

    /// Number of pixels labelled with `class`.
    pub fn count(&self, class: CellClass) -> usize {
        let idx = class as u8;
        self.data.iter().filter(|&&v| v == idx).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_round_trip() {
        for class in CellClass::ALL {
            assert_eq!(CellClass::from_index(class.index()), Some(class));
            assert_eq!(CellClass::from_name(class.name()), Some(class));
        }
        assert_eq!(CellClass::from_index(5), None);
    }

    #[test]
    fn vocabulary_order() {
        assert_eq!(CellClass::Cd3.index(), 0);
        assert_eq!(CellClass::Cd8Cd3Lo.index(), 1);
        assert_eq!(CellClass::Cd8Cd3Hi.index(), 2);
        assert_eq!(CellClass::Cd20.index(), 3);
        assert_eq!(CellClass::Other.index(), 4);
    }

    #[test]
    fn from_raw_validates() {
        assert!(LabelMap::from_raw(2, 2, vec![0, 1, 2, 5]).is_err());
        assert!(LabelMap::from_raw(2, 2, vec![0, 1, 2, 3]).is_ok());
        assert!(LabelMap::from_raw(2, 2, vec![0; 3]).is_err());
    }

    #[test]
    fn crop_extracts_window() {
        let mut map = LabelMap::filled(4, 4, CellClass::Other);
        map.set(2, 1, CellClass::Cd20);
        let crop = map.crop(1, 1, 2, 2).unwrap();
        assert_eq!(crop.get(1, 0), CellClass::Cd20);
        assert_eq!(crop.get(0, 0), CellClass::Other);
        assert!(map.crop(3, 3, 2, 2).is_err());
    }
}
