//! Prompt sampling for end-to-end training: a fair coin chooses between the
//! ground-truth box and 1-10 uniformly drawn foreground points.

use crate::eval::MaskBitmap;
use crate::rng::Rng;
use crate::samhead::{PointLabel, PromptSet};
use crate::{Error, Result};

/// Draw one prompt for a mask. The box branch returns the given ground-truth
/// box; the point branch draws `k ~ Uniform{min_points..max_points}`
/// distinct foreground pixels (capped at the mask area), as pixel centers.
pub fn sample_prompt(
    rng: &mut Rng,
    gt_mask: &MaskBitmap,
    gt_box: (f32, f32, f32, f32),
    min_points: usize,
    max_points: usize,
) -> Result<PromptSet> {
    if gt_mask.is_empty() {
        return Err(Error::Invalid("sample_prompt on an empty mask".into()));
    }
    if rng.next_bool(0.5) {
        Ok(PromptSet {
            points: vec![],
            bbox: Some(gt_box),
        })
    } else {
        Ok(sample_point_prompt(rng, gt_mask, min_points, max_points)?)
    }
}

/// The point branch alone (used directly by tests and by callers that force
/// a branch).
pub fn sample_point_prompt(
    rng: &mut Rng,
    gt_mask: &MaskBitmap,
    min_points: usize,
    max_points: usize,
) -> Result<PromptSet> {
    if gt_mask.is_empty() {
        return Err(Error::Invalid("sample_point_prompt on an empty mask".into()));
    }
    if min_points == 0 || min_points > max_points {
        return Err(Error::Invalid(format!(
            "point count range {min_points}..={max_points} invalid"
        )));
    }
    let fg: Vec<usize> = gt_mask
        .bits()
        .iter()
        .enumerate()
        .filter(|(_, &b)| b != 0)
        .map(|(i, _)| i)
        .collect();
    let k = rng.next_range(min_points, max_points).min(fg.len());
    let chosen = rng.sample_distinct(fg.len(), k);
    let w = gt_mask.width();
    let points = chosen
        .into_iter()
        .map(|ci| {
            let p = fg[ci];
            (
                (p % w) as f32 + 0.5,
                (p / w) as f32 + 0.5,
                PointLabel::Foreground,
            )
        })
        .collect();
    Ok(PromptSet {
        points,
        bbox: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(w: usize, h: usize, count: usize) -> MaskBitmap {
        let mut m = MaskBitmap::new(w, h);
        for i in 0..count {
            m.set(i % w, i / w, true);
        }
        m
    }

    #[test]
    fn box_branch_returns_the_box_only() {
        // Scan for a seed whose first coin lands on the box branch; the
        // branch content is what matters.
        let m = blob(8, 8, 20);
        let gt_box = (1.0, 1.0, 5.0, 4.0);
        let mut found = false;
        for seed in 0..20 {
            let mut rng = Rng::new(seed);
            let p = sample_prompt(&mut rng, &m, gt_box, 1, 10).unwrap();
            if let Some(b) = p.bbox {
                assert_eq!(b, gt_box);
                assert!(p.points.is_empty());
                found = true;
                break;
            }
        }
        assert!(found);
    }

    #[test]
    fn point_branch_caps_at_mask_area() {
        let m = blob(4, 4, 1); // single pixel at (0, 0)
        let mut rng = Rng::new(3);
        let p = sample_point_prompt(&mut rng, &m, 1, 10).unwrap();
        assert_eq!(p.points.len(), 1);
        assert_eq!((p.points[0].0, p.points[0].1), (0.5, 0.5));
        assert_eq!(p.points[0].2, PointLabel::Foreground);
    }

    #[test]
    fn points_are_distinct_foreground_pixel_centers() {
        let m = blob(6, 6, 12);
        let mut rng = Rng::new(9);
        for _ in 0..50 {
            let p = sample_point_prompt(&mut rng, &m, 1, 10).unwrap();
            let mut seen = std::collections::HashSet::new();
            for &(x, y, _) in &p.points {
                assert!(m.get((x - 0.5) as usize, (y - 0.5) as usize));
                assert!(seen.insert(((x * 2.0) as i64, (y * 2.0) as i64)), "distinct");
            }
        }
    }

    #[test]
    fn empty_mask_is_an_error() {
        let m = MaskBitmap::new(4, 4);
        let mut rng = Rng::new(1);
        assert!(sample_prompt(&mut rng, &m, (0.0, 0.0, 1.0, 1.0), 1, 10).is_err());
    }

    #[test]
    fn branch_fraction_and_point_counts_are_uniform() {
        // 10,000 draws: box fraction within [0.47, 0.53]; k uniform on
        // {1..10} by a chi-squared test at the 99% level (9 dof, crit 21.67).
        let m = blob(32, 32, 600);
        let mut rng = Rng::new(12345);
        let draws = 10_000usize;
        let mut boxes = 0usize;
        let mut counts = [0usize; 10];
        for _ in 0..draws {
            let p = sample_prompt(&mut rng, &m, (0.0, 0.0, 8.0, 8.0), 1, 10).unwrap();
            if p.bbox.is_some() {
                boxes += 1;
            } else {
                counts[p.points.len() - 1] += 1;
            }
        }
        let frac = boxes as f32 / draws as f32;
        assert!((0.47..=0.53).contains(&frac), "box fraction {frac}");
        let n_points = draws - boxes;
        let expected = n_points as f64 / 10.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(chi2 < 21.67, "chi-squared {chi2} over {counts:?}");
    }
}
