use crate::error::{Error, Result};
use crate::geometry::Rect;

/// RGB image, row-major with interleaved channels, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: u32,
    width: u32,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: u32, width: u32, data: Vec<f64>) -> Result<Self> {
        if data.len() != (height as usize) * (width as usize) * 3 {
            return Err(Error::shape("image", format!("{} values for {height}×{width}×3", data.len())));
        }
        Ok(Image { height, width, data })
    }

    pub fn zeros(height: u32, width: u32) -> Self {
        Image { height, width, data: vec![0.0; (height * width * 3) as usize] }
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: u32, x: u32) -> [f64; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: u32, x: u32, rgb: [f64; 3]) {
        let i = ((y * self.width + x) * 3) as usize;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Flattened `side × side × 3` patch values, row-major.
    pub fn patch(&self, r: Rect) -> Vec<f64> {
        let mut out = Vec::with_capacity((r.side * r.side * 3) as usize);
        self.patch_into(r, &mut out);
        out
    }

    pub fn patch_into(&self, r: Rect, out: &mut Vec<f64>) {
        let w = self.width as usize;
        for y in r.y0..r.y0 + r.side {
            let start = (y as usize * w + r.x0 as usize) * 3;
            out.extend_from_slice(&self.data[start..start + r.side as usize * 3]);
        }
    }

    /// Zero-extends on the bottom and right.
    pub fn padded_to(&self, height: u32, width: u32) -> Result<Image> {
        if height < self.height || width < self.width {
            return Err(Error::Input(format!("cannot pad {}×{} to {height}×{width}", self.height, self.width)));
        }
        let mut out = Image::zeros(height, width);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(y, x, self.pixel(y, x));
            }
        }
        Ok(out)
    }
}
