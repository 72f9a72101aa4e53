//! Class-boundary targets derived from label maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Rect, TokenKey};

/// Label value for unlabeled pixels.
pub const IGNORE: u16 = u16::MAX;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    height: u32,
    width: u32,
    labels: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: u32, width: u32, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != (height as usize) * (width as usize) {
            return Err(Error::shape("label map", format!("{} labels for {height}×{width}", labels.len())));
        }
        Ok(LabelMap { height, width, labels })
    }

    pub fn filled(height: u32, width: u32, label: u16) -> Self {
        LabelMap { height, width, labels: vec![label; (height * width) as usize] }
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn get(&self, y: u32, x: u32) -> u16 {
        self.labels[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, y: u32, x: u32, label: u16) {
        self.labels[(y * self.width + x) as usize] = label;
    }

    pub fn transpose(&self) -> LabelMap {
        let mut out = LabelMap::filled(self.width, self.height, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(x, y, self.get(y, x));
            }
        }
        out
    }

    /// Extends to `height × width` with IGNORE on the bottom and right.
    pub fn padded_to(&self, height: u32, width: u32) -> Result<LabelMap> {
        if height < self.height || width < self.width {
            return Err(Error::Input(format!("cannot pad {}×{} to {height}×{width}", self.height, self.width)));
        }
        let mut out = LabelMap::filled(height, width, IGNORE);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(y, x, self.get(y, x));
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    #[default]
    Four,
    Eight,
}

impl TryFrom<u8> for Connectivity {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        match v {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            _ => Err(Error::Config(format!("connectivity must be 4 or 8, got {v}"))),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Four => 4,
            Connectivity::Eight => 8,
        }
    }
}

impl Connectivity {
    pub fn offsets(self) -> &'static [(i32, i32)] {
        const FOUR: [(i32, i32); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
        const EIGHT: [(i32, i32); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];
        match self {
            Connectivity::Four => &FOUR,
            Connectivity::Eight => &EIGHT,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoundaryMap {
    height: u32,
    width: u32,
    bits: Vec<bool>,
}

impl BoundaryMap {
    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn get(&self, y: u32, x: u32) -> bool {
        self.bits[(y * self.width + x) as usize]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn fraction(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.bits.len() as f64
        }
    }
}

/// A labeled pixel is a boundary pixel when an in-bounds labeled neighbor
/// carries a different class.
pub fn boundary_map(labels: &LabelMap, conn: Connectivity) -> BoundaryMap {
    let (h, w) = (labels.height as i32, labels.width as i32);
    let mut bits = vec![false; labels.labels.len()];
    for y in 0..h {
        for x in 0..w {
            let here = labels.get(y as u32, x as u32);
            if here == IGNORE {
                continue;
            }
            bits[(y * w + x) as usize] = conn.offsets().iter().any(|&(dy, dx)| {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h || nx >= w {
                    return false;
                }
                let other = labels.get(ny as u32, nx as u32);
                other != IGNORE && other != here
            });
        }
    }
    BoundaryMap { height: labels.height, width: labels.width, bits }
}

/// Summed-area table of boundary bits for O(1) rectangle counts.
#[derive(Clone, Debug)]
pub struct BoundaryCounts {
    height: u32,
    width: u32,
    table: Vec<u32>,
}

impl BoundaryCounts {
    pub fn new(bmap: &BoundaryMap) -> Self {
        let (h, w) = (bmap.height as usize, bmap.width as usize);
        let mut table = vec![0u32; (h + 1) * (w + 1)];
        for y in 0..h {
            let mut row = 0;
            for x in 0..w {
                row += u32::from(bmap.bits[y * w + x]);
                table[(y + 1) * (w + 1) + x + 1] = table[y * (w + 1) + x + 1] + row;
            }
        }
        BoundaryCounts { height: bmap.height, width: bmap.width, table }
    }

    pub fn count(&self, r: Rect) -> Result<u32> {
        if r.y0 + r.side > self.height || r.x0 + r.side > self.width {
            return Err(Error::Contract(format!("rect {r:?} outside {}×{}", self.height, self.width)));
        }
        let w = self.width as usize + 1;
        let (y0, x0, y1, x1) = (r.y0 as usize, r.x0 as usize, (r.y0 + r.side) as usize, (r.x0 + r.side) as usize);
        Ok(self.table[y1 * w + x1] + self.table[y0 * w + x0] - self.table[y0 * w + x1] - self.table[y1 * w + x0])
    }

    /// Boundary fraction of the token's patch.
    pub fn score(&self, key: &TokenKey) -> Result<f64> {
        let r = key.rect();
        Ok(self.count(r)? as f64 / r.area() as f64)
    }
}

pub fn target_scores(bmap: &BoundaryMap, tokens: &[TokenKey]) -> Result<Vec<f64>> {
    let counts = BoundaryCounts::new(bmap);
    tokens.iter().map(|t| counts.score(t)).collect()
}

/// Mean squared error over valid entries; 0 when none is valid.
pub fn allocator_loss(pred: &[f64], target: &[f64], mask: &[bool]) -> Result<f64> {
    if pred.len() != target.len() || pred.len() != mask.len() {
        return Err(Error::shape("allocator_loss", format!("{} / {} / {}", pred.len(), target.len(), mask.len())));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for ((p, t), &m) in pred.iter().zip(target).zip(mask) {
        if m {
            sum += (p - t) * (p - t);
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}
