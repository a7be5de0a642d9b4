//! Label maps, attention-to-label conversion and the mutual-complementary update.

use std::path::Path;

use crate::complementary::AttentionMap;
use crate::error::{Error, Result};
use crate::pgm;

/// Per-pixel class indices, 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::invalid(
                "LabelMap::new",
                format!("{} labels for {height}x{width}", data.len()),
            ));
        }
        Ok(LabelMap { height, width, data })
    }

    pub fn background(height: usize, width: usize) -> Self {
        LabelMap {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn background_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 0).count()
    }

    /// Sorted distinct foreground classes.
    pub fn classes(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (1..=255u8).filter(|&c| seen[c as usize]).collect()
    }

    pub fn max_class(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        pgm::encode(self.width, self.height, &self.data)
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let (w, h, data) = pgm::decode(bytes)?;
        LabelMap::new(h, w, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        pgm::write(path, self.width, self.height, &self.data)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (w, h, data) = pgm::read(path)?;
        LabelMap::new(h, w, data)
    }

    fn check_same(&self, other: &LabelMap, op: &'static str) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::shape(
                op,
                &[self.height, self.width],
                &[other.height, other.width],
            ));
        }
        Ok(())
    }
}

/// Argmax over class maps where the maximum exceeds `t_bg`, background elsewhere.
/// Ties go to the lowest class id.
pub fn maps_to_labels(maps: &[AttentionMap], t_bg: f64) -> Result<LabelMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::invalid("maps_to_labels", "no attention maps supplied"))?;
    let (h, w) = (first.height, first.width);
    if let Some(m) = maps.iter().find(|m| (m.height, m.width) != (h, w)) {
        return Err(Error::shape("maps_to_labels", &[h, w], &[m.height, m.width]));
    }
    if let Some(m) = maps.iter().find(|m| m.class_id == 0 || m.class_id > 255) {
        return Err(Error::invalid(
            "maps_to_labels",
            format!("class id {} is not a foreground class", m.class_id),
        ));
    }
    let mut order: Vec<&AttentionMap> = maps.iter().collect();
    order.sort_by_key(|m| m.class_id);
    let data = (0..h * w)
        .map(|i| {
            let mut best = (0u8, f64::NEG_INFINITY);
            for m in &order {
                if m.values[i] > best.1 {
                    best = (m.class_id as u8, m.values[i]);
                }
            }
            if best.1 > t_bg {
                best.0
            } else {
                0
            }
        })
        .collect();
    LabelMap::new(h, w, data)
}

/// Fuses the previous labels `c` with new predictions `phi`, preferring foreground:
/// keep `c` where `phi` is background, otherwise take `phi`.
pub fn mutual_update(c: &LabelMap, phi: &LabelMap) -> Result<LabelMap> {
    c.check_same(phi, "mutual_update")?;
    let data = c
        .data
        .iter()
        .zip(&phi.data)
        .map(|(&c, &p)| if p == 0 { c } else { p })
        .collect();
    Ok(LabelMap {
        height: c.height,
        width: c.width,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(class_id: usize, values: Vec<f64>) -> AttentionMap {
        AttentionMap {
            image_id: "x".into(),
            class_id,
            height: 1,
            width: values.len(),
            values,
        }
    }

    #[test]
    fn single_full_map() {
        let l = maps_to_labels(&[map(3, vec![1.0; 4])], 0.3).unwrap();
        assert_eq!(l.data, vec![3; 4]);
    }

    #[test]
    fn below_threshold_is_background() {
        let l = maps_to_labels(&[map(1, vec![0.1, 0.3]), map(2, vec![0.29, 0.0])], 0.3).unwrap();
        assert_eq!(l.data, vec![0, 0]);
    }

    #[test]
    fn ties_go_to_lower_class() {
        let l = maps_to_labels(&[map(4, vec![0.7, 0.9]), map(2, vec![0.7, 0.2])], 0.3).unwrap();
        assert_eq!(l.data, vec![2, 4]);
    }

    #[test]
    fn maps_to_labels_errors() {
        assert!(maps_to_labels(&[], 0.3).is_err());
        assert!(maps_to_labels(&[map(1, vec![0.0]), map(2, vec![0.0, 0.0])], 0.3).is_err());
        assert!(maps_to_labels(&[map(0, vec![0.0])], 0.3).is_err());
    }

    #[test]
    fn update_branches() {
        let c = LabelMap::new(1, 3, vec![3, 0, 2]).unwrap();
        let phi = LabelMap::new(1, 3, vec![0, 5, 7]).unwrap();
        assert_eq!(mutual_update(&c, &phi).unwrap().data, vec![3, 5, 7]);
        assert_eq!(mutual_update(&c, &c).unwrap(), c);
        assert!(mutual_update(&c, &LabelMap::background(3, 1)).is_err());
    }

    #[test]
    fn pgm_roundtrip() {
        let l = LabelMap::new(2, 3, vec![0, 1, 2, 3, 4, 0]).unwrap();
        assert_eq!(LabelMap::from_pgm(&l.to_pgm()).unwrap(), l);
        assert_eq!(l.classes(), vec![1, 2, 3, 4]);
        assert_eq!(l.background_count(), 2);
    }
}
