//! 64×64 RGB observations.

use crate::error::{Error, Result};
use crate::tensor::Real;

pub const FRAME_SIDE: usize = 64;
pub const FRAME_CHANNELS: usize = 3;
pub const FRAME_LEN: usize = FRAME_SIDE * FRAME_SIDE * FRAME_CHANNELS;

pub type Rgb = [u8; 3];

/// A 64×64×3 image stored as bytes; channel value `b` stands for `b / 255`.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Frame {
    data: Vec<u8>,
}

impl std::fmt::Debug for Frame {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Frame").field("len", &self.data.len()).finish()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResizeFilter {
    Nearest,
    Bilinear,
}

impl Frame {
    pub fn filled(color: Rgb) -> Self {
        Self {
            data: color.iter().copied().cycle().take(FRAME_LEN).collect(),
        }
    }

    pub fn from_bytes(data: Vec<u8>) -> Result<Self> {
        if data.len() != FRAME_LEN {
            return Err(Error::shape("frame", [FRAME_SIDE, FRAME_SIDE, FRAME_CHANNELS], data.len()));
        }
        Ok(Self { data })
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> Rgb {
        let i = (y * FRAME_SIDE + x) * FRAME_CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: i32, y: i32, color: Rgb) {
        if (0..FRAME_SIDE as i32).contains(&x) && (0..FRAME_SIDE as i32).contains(&y) {
            let i = (y as usize * FRAME_SIDE + x as usize) * FRAME_CHANNELS;
            self.data[i..i + 3].copy_from_slice(&color);
        }
    }

    /// Axis-aligned rectangle, clipped to the frame.
    pub fn fill_rect(&mut self, x: i32, y: i32, w: i32, h: i32, color: Rgb) {
        for yy in y.max(0)..(y + h).min(FRAME_SIDE as i32) {
            for xx in x.max(0)..(x + w).min(FRAME_SIDE as i32) {
                self.set(xx, yy, color);
            }
        }
    }

    pub fn fill_disc(&mut self, cx: i32, cy: i32, r: i32, color: Rgb) {
        for yy in cy - r..=cy + r {
            for xx in cx - r..=cx + r {
                let (dx, dy) = (xx - cx, yy - cy);
                if dx * dx + dy * dy <= r * r {
                    self.set(xx, yy, color);
                }
            }
        }
    }

    pub fn to_unit<T: Real>(&self) -> Vec<T> {
        let scale = T::one() / T::lit(255.0);
        self.data.iter().map(|&b| T::lit(b as f64) * scale).collect()
    }

    /// Quantizes `[0,1]` values (clamped) to a frame.
    pub fn from_unit<T: Real>(values: &[T]) -> Result<Self> {
        if values.len() != FRAME_LEN {
            return Err(Error::shape("frame", FRAME_LEN, values.len()));
        }
        let data = values
            .iter()
            .map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Ok(Self { data })
    }

    /// Resamples an arbitrary RGB image to 64×64.
    pub fn resize_from(width: usize, height: usize, rgb: &[u8], filter: ResizeFilter) -> Result<Self> {
        if width == 0 || height == 0 || rgb.len() != width * height * 3 {
            return Err(Error::shape("resize source", (width, height, 3), rgb.len()));
        }
        let mut out = vec![0u8; FRAME_LEN];
        let sx = width as f64 / FRAME_SIDE as f64;
        let sy = height as f64 / FRAME_SIDE as f64;
        let at = |x: usize, y: usize, c: usize| rgb[(y * width + x) * 3 + c] as f64;
        for y in 0..FRAME_SIDE {
            for x in 0..FRAME_SIDE {
                for c in 0..3 {
                    let v = match filter {
                        ResizeFilter::Nearest => {
                            let px = ((x as f64 + 0.5) * sx).floor().min(width as f64 - 1.0) as usize;
                            let py = ((y as f64 + 0.5) * sy).floor().min(height as f64 - 1.0) as usize;
                            at(px, py, c)
                        }
                        ResizeFilter::Bilinear => {
                            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, width as f64 - 1.0);
                            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, height as f64 - 1.0);
                            let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
                            let (x1, y1) = ((x0 + 1).min(width - 1), (y0 + 1).min(height - 1));
                            let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
                            let top = at(x0, y0, c) * (1.0 - tx) + at(x1, y0, c) * tx;
                            let bottom = at(x0, y1, c) * (1.0 - tx) + at(x1, y1, c) * tx;
                            top * (1.0 - ty) + bottom * ty
                        }
                    };
                    out[(y * FRAME_SIDE + x) * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
                }
            }
        }
        Ok(Self { data: out })
    }

    pub fn to_png(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut buf, FRAME_SIDE as u32, FRAME_SIDE as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().expect("in-memory png header");
            w.write_image_data(&self.data).expect("in-memory png data");
        }
        buf
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_values_are_in_range_and_round_trip() {
        let mut f = Frame::filled([0, 128, 255]);
        f.fill_rect(-3, 60, 10, 10, [7, 8, 9]);
        let unit: Vec<f64> = f.to_unit();
        assert!(unit.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(Frame::from_unit(&unit).unwrap(), f);
    }

    #[test]
    fn resize_identity_and_upsample() {
        let f = Frame::filled([10, 20, 30]);
        let same = Frame::resize_from(64, 64, f.bytes(), ResizeFilter::Bilinear).unwrap();
        assert_eq!(same, f);
        let small: Vec<u8> = [0u8, 0, 0, 255, 255, 255].repeat(2);
        let up = Frame::resize_from(2, 2, &small, ResizeFilter::Nearest).unwrap();
        assert_eq!(up.pixel(0, 0), [0, 0, 0]);
        assert_eq!(up.pixel(63, 0), [255, 255, 255]);
        assert!(Frame::resize_from(3, 3, &small, ResizeFilter::Nearest).is_err());
    }

    #[test]
    fn png_has_signature() {
        let png = Frame::filled([1, 2, 3]).to_png();
        assert_eq!(&png[1..4], b"PNG");
    }
}
