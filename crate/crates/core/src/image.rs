/// Single-channel image with values in [0, 1], row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Self {
        assert_eq!(pixels.len(), height * width, "pixel buffer size");
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.pixels[y * self.width + x] = v;
    }
}

/// Binary mask stored as bytes (0 or 1), row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<u8>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![0; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x] != 0
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.bits[y * self.width + x] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b != 0).count()
    }

    /// Fraction of each `patch×patch` cell that is set, row-major over cells.
    pub fn patch_coverage(&self, patch: usize) -> Vec<f32> {
        let (gh, gw) = (self.height / patch, self.width / patch);
        let mut out = vec![0.0; gh * gw];
        for y in 0..gh * patch {
            for x in 0..gw * patch {
                if self.get(y, x) {
                    out[(y / patch) * gw + x / patch] += 1.0;
                }
            }
        }
        let area = (patch * patch) as f32;
        out.iter_mut().for_each(|v| *v /= area);
        out
    }
}
