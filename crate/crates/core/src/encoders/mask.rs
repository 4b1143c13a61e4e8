use crate::diff::MASK_NEG;

/// Additive attention mask over `g² + 1` tokens (CLS first, then patches in
/// row-major grid order). Patch pairs farther apart than `radius` get the
/// large negative sentinel; the CLS row and column are open.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalityMask {
    grid: usize,
    radius: f64,
    values: Vec<f32>,
}

impl LocalityMask {
    pub fn new(grid: usize, radius: f64) -> Self {
        let n = grid * grid + 1;
        let mut values = vec![0.0f32; n * n];
        for a in 0..grid * grid {
            let (i, j) = ((a / grid) as f64, (a % grid) as f64);
            for b in 0..grid * grid {
                let (m, q) = ((b / grid) as f64, (b % grid) as f64);
                let dist = ((i - m).powi(2) + (j - q).powi(2)).sqrt();
                if dist > radius {
                    values[(a + 1) * n + b + 1] = MASK_NEG as f32;
                }
            }
        }
        Self {
            grid,
            radius,
            values,
        }
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn tokens(&self) -> usize {
        self.grid * self.grid + 1
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn is_open(&self, query: usize, key: usize) -> bool {
        self.values[query * self.tokens() + key] == 0.0
    }

    /// Token index of grid cell (row, col).
    pub fn token(&self, row: usize, col: usize) -> usize {
        1 + row * self.grid + col
    }

    pub fn admissible_keys(&self, query: usize) -> usize {
        (0..self.tokens()).filter(|&k| self.is_open(query, k)).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radius_one_center_has_four_neighbours() {
        let m = LocalityMask::new(3, 1.0);
        let centre = m.token(1, 1);
        // self + 4-neighbourhood + CLS
        assert_eq!(m.admissible_keys(centre), 5 + 1);
        assert!(!m.is_open(centre, m.token(0, 0)));
    }

    #[test]
    fn radius_one_and_half_centre_sees_all() {
        let m = LocalityMask::new(3, 1.5);
        assert_eq!(m.admissible_keys(m.token(1, 1)), 9 + 1);
        assert_eq!(m.admissible_keys(m.token(0, 0)), 4 + 1);
    }

    #[test]
    fn large_radius_opens_everything() {
        for g in 1..6 {
            let m = LocalityMask::new(g, 2f64.sqrt() * (g as f64 - 1.0) + 1e-9);
            assert!(m.values().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn cls_row_and_column_open_and_symmetric() {
        let m = LocalityMask::new(4, 1.0);
        let n = m.tokens();
        for t in 0..n {
            assert!(m.is_open(0, t) && m.is_open(t, 0));
            for u in 0..n {
                assert_eq!(m.is_open(t, u), m.is_open(u, t));
            }
        }
    }
}
