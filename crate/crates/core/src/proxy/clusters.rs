use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};

const MAX_ITERS: usize = 100;

/// Pixel `(width, height)` cluster centers, sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AspectCenters {
    pub centers: Vec<(usize, usize)>,
}

impl AspectCenters {
    pub fn new(mut centers: Vec<(usize, usize)>) -> Result<Self> {
        if centers.is_empty() || centers.iter().any(|&(w, h)| w == 0 || h == 0) {
            return Err(Error::Config("aspect centers must be non-empty and positive".into()));
        }
        centers.sort_unstable();
        centers.dedup();
        Ok(Self { centers })
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// Nearest center by Euclidean distance; ties go to the first in sorted order.
    pub fn nearest(&self, w: usize, h: usize) -> (usize, usize) {
        let d = |&(cw, ch): &(usize, usize)| {
            let dw = cw as f64 - w as f64;
            let dh = ch as f64 - h as f64;
            dw * dw + dh * dh
        };
        let mut best = self.centers[0];
        for c in &self.centers[1..] {
            if d(c) < d(&best) {
                best = *c;
            }
        }
        best
    }

    /// Size a crop is padded to: elementwise max of the crop and its nearest center.
    pub fn padded_size(&self, w: usize, h: usize) -> (usize, usize) {
        let (cw, ch) = self.nearest(w, h);
        (w.max(cw), h.max(ch))
    }
}

fn nearest_index(p: (f64, f64), centers: &[(f64, f64)]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in centers.iter().enumerate() {
        let d = (p.0 - c.0).powi(2) + (p.1 - c.1).powi(2);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

/// Lloyd's k-means on absolute `(w, h)` pairs. Initial centers are `k`
/// distinct sizes drawn by the seeded rng; centers are rounded up so padding
/// always reaches them.
pub fn fit_aspect_clusters(sizes: &[(usize, usize)], k: usize, seed: u64) -> Result<AspectCenters> {
    if k == 0 {
        return Err(Error::Config("cluster count must be at least 1".into()));
    }
    if sizes.is_empty() {
        return Err(Error::Dataset("no sizes to cluster".into()));
    }
    let mut distinct: Vec<(usize, usize)> = sizes.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() <= k {
        return AspectCenters::new(distinct);
    }

    let mut rng = rng_for(seed, stream::CLUSTERS, 0);
    distinct.shuffle(&mut rng);
    let points: Vec<(f64, f64)> = sizes.iter().map(|&(w, h)| (w as f64, h as f64)).collect();
    let mut centers: Vec<(f64, f64)> = distinct[..k].iter().map(|&(w, h)| (w as f64, h as f64)).collect();
    let mut assign = vec![usize::MAX; points.len()];
    for _ in 0..MAX_ITERS {
        let mut changed = false;
        for (a, &p) in assign.iter_mut().zip(&points) {
            let n = nearest_index(p, &centers);
            if *a != n {
                *a = n;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![(0.0, 0.0, 0usize); k];
        for (&a, &p) in assign.iter().zip(&points) {
            sums[a].0 += p.0;
            sums[a].1 += p.1;
            sums[a].2 += 1;
        }
        for (c, s) in centers.iter_mut().zip(&sums) {
            if s.2 > 0 {
                *c = (s.0 / s.2 as f64, s.1 / s.2 as f64);
            }
        }
    }
    AspectCenters::new(
        centers
            .iter()
            .map(|&(w, h)| (w.ceil() as usize, h.ceil() as usize))
            .collect(),
    )
}
