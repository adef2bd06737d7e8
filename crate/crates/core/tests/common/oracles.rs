//! Independent reference implementations used as test oracles.

use mvfd_core::geometry::{FaceLandmarks, ImageBuffer, Point2};
use mvfd_core::ingestion::Label;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn seg_dist(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

pub fn in_triangle(p: (f64, f64), a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> bool {
    let cross = |o: (f64, f64), u: (f64, f64), v: (f64, f64)| (u.0 - o.0) * (v.1 - o.1) - (u.1 - o.1) * (v.0 - o.0);
    let (d1, d2, d3) = (cross(a, b, p), cross(b, c, p), cross(c, a, p));
    let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
    let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
    !(neg && pos)
}

/// Distance from `p` to the convex hull of `pts` without building the hull:
/// inside some triangle of the points means inside the hull, and otherwise
/// the nearest hull point lies on a segment between two of the points.
pub fn hull_distance(p: (f64, f64), pts: &[(f64, f64)]) -> f64 {
    let n = pts.len();
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                let (a, b, c) = (pts[i], pts[j], pts[k]);
                let area = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
                if area != 0.0 && in_triangle(p, a, b, c) {
                    return 0.0;
                }
            }
        }
    }
    let mut best = f64::INFINITY;
    for i in 0..n {
        for j in i..n {
            best = best.min(seg_dist(p, pts[i], pts[j]));
        }
    }
    best
}

pub fn landmarks(pts: &[(f64, f64)]) -> FaceLandmarks {
    FaceLandmarks::from_points([0, 1, 2, 3, 4].map(|i| Point2::new(pts[i].0, pts[i].1)))
}

/// Integer bounding box of the lattice points within `margin` of the hull,
/// found by brute force over a window around the points.
pub fn lattice_local_region(pts: &[(f64, f64)], margin: f64) -> [i64; 4] {
    let (mut x0, mut y0, mut x1, mut y1) = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
    let lo = pts.iter().fold(f64::INFINITY, |m, p| m.min(p.0).min(p.1)).floor() as i64 - margin.ceil() as i64 - 2;
    let hi = pts.iter().fold(f64::NEG_INFINITY, |m, p| m.max(p.0).max(p.1)).ceil() as i64 + margin.ceil() as i64 + 2;
    for y in lo..=hi {
        for x in lo..=hi {
            if hull_distance((x as f64, y as f64), pts) <= margin + 1e-9 {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    [x0, y0, x1, y1]
}

pub fn textured(w: usize, h: usize, seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..w * h * 3).map(|_| rng.random::<u8>()).collect();
    ImageBuffer::new(w, h, data).unwrap()
}

pub fn labels_of(bits: &[bool]) -> Vec<Label> {
    bits.iter().map(|&b| if b { Label::Fake } else { Label::Real }).collect()
}

/// Scores on a coarse grid so ties are common, with both classes present.
pub fn instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<Label>) {
    let n = rng.random_range(2..60);
    let levels = rng.random_range(2..30);
    let mut bits: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
    bits[0] = true;
    bits[1] = false;
    let scores = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
    (scores, labels_of(&bits))
}

pub fn pairwise_auc(scores: &[f64], labels: &[Label]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, a) in scores.iter().enumerate() {
        for (j, b) in scores.iter().enumerate() {
            if labels[i] == Label::Fake && labels[j] == Label::Real {
                pairs += 1.0;
                wins += if a > b {
                    1.0
                } else if a == b {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}


/// Bilinear resampling written as a tent-kernel sum over every source
/// pixel, sampling at pixel centers with the coordinate clamped to the
/// image. No antialiasing on downscale.
pub fn tent_resize(src: &ImageBuffer, width: usize, height: usize) -> Vec<[f64; 3]> {
    let (sw, sh) = (src.width(), src.height());
    let coord = |d: usize, out: usize, len: usize| {
        ((d as f64 + 0.5) * len as f64 / out as f64 - 0.5).clamp(0.0, (len - 1) as f64)
    };
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        let sy = coord(y, height, sh);
        for x in 0..width {
            let sx = coord(x, width, sw);
            let mut acc = [0.0; 3];
            for j in 0..sh {
                let wy = (1.0 - (sy - j as f64).abs()).max(0.0);
                if wy == 0.0 {
                    continue;
                }
                for i in 0..sw {
                    let w = wy * (1.0 - (sx - i as f64).abs()).max(0.0);
                    if w > 0.0 {
                        let px = src.get(i, j);
                        for c in 0..3 {
                            acc[c] += w * f64::from(px[c]);
                        }
                    }
                }
            }
            out.push(acc);
        }
    }
    out
}
