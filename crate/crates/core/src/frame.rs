use std::fmt;

/// Square grayscale observation with pixel values in `[0, 1]`, row-major.
#[derive(Clone, PartialEq)]
pub struct Frame {
    size: usize,
    pixels: Vec<f64>,
}

impl Frame {
    pub fn zeros(size: usize) -> Self {
        Self {
            size,
            pixels: vec![0.0; size * size],
        }
    }

    /// Builds a frame, clamping every value into `[0, 1]`. Non-finite values
    /// become 0.
    ///
    /// Panics if `pixels.len() != size * size`.
    pub fn from_pixels(size: usize, mut pixels: Vec<f64>) -> Self {
        assert_eq!(pixels.len(), size * size, "frame needs size² pixels");
        for p in &mut pixels {
            *p = if p.is_finite() {
                p.clamp(0.0, 1.0)
            } else {
                0.0
            };
        }
        Self { size, pixels }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.size + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.pixels[row * self.size + col] = value.clamp(0.0, 1.0);
    }

    pub fn mass(&self) -> f64 {
        self.pixels.iter().sum()
    }

    pub fn l2_distance(&self, other: &Frame) -> f64 {
        l2(&self.pixels, &other.pixels)
    }

    pub fn linf_distance(&self, other: &Frame) -> f64 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl fmt::Debug for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Frame {}x{}", self.size, self.size)?;
        for r in 0..self.size {
            for c in 0..self.size {
                let v = self.get(r, c);
                let ch = match v {
                    v if v > 0.8 => '@',
                    v if v > 0.4 => '#',
                    v if v > 0.1 => '-',
                    v if v > 0.0 => '.',
                    _ => ' ',
                };
                write!(f, "{ch}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

pub(crate) fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
