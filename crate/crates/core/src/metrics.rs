use crate::error::{Error, Result};

/// Mann–Whitney AUROC with average ranks for ties.
pub fn auroc(scores: &[f32], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            what: "auroc",
            left: scores.len(),
            right: labels.len(),
        });
    }
    if let Some(bad) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Invalid(format!("auroc score {bad}")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut pos_rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let avg = (i + j) as f64 / 2.0 + 1.0;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k] == 1).count();
        pos_rank_sum += avg * tied_pos as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// O(P·N) pair counting, ties worth one half.
pub fn auroc_pairs(scores: &[f32], labels: &[u8]) -> Result<f64> {
    let pos: Vec<f32> = scores.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(&s, _)| s).collect();
    let neg: Vec<f32> = scores.iter().zip(labels).filter(|(_, &l)| l != 1).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::SingleClass);
    }
    let mut twice = 0u64;
    for &p in &pos {
        for &n in &neg {
            twice += if p > n {
                2
            } else if p == n {
                1
            } else {
                0
            };
        }
    }
    Ok(twice as f64 / (2.0 * pos.len() as f64 * neg.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(auroc(&[0.1, 0.9], &[0, 1]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.4; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.1, 0.3, 0.35, 0.8], &[0, 1, 0, 1]).unwrap(), 0.75);
        assert_eq!(auroc_pairs(&[0.1, 0.3, 0.35, 0.8], &[0, 1, 0, 1]).unwrap(), 0.75);
    }

    #[test]
    fn errors() {
        assert!(matches!(auroc(&[0.1, 0.2], &[1, 1]), Err(Error::SingleClass)));
        assert!(auroc(&[0.1], &[1, 0]).is_err());
        assert!(auroc(&[f32::NAN, 0.2], &[1, 0]).is_err());
    }
}
