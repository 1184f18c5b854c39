//! Exact brute-force geometric kernels on raw coordinates.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `N` points with coordinates, optional per-point features and integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub coords: Tensor,
    pub feats: Option<Tensor>,
    pub labels: Option<Vec<usize>>,
}

impl PointCloud {
    pub fn new(coords: Tensor, feats: Option<Tensor>, labels: Option<Vec<usize>>) -> Result<Self> {
        if coords.rank() != 2 || coords.cols() != 3 {
            return Err(Error::Dimension(format!("coords must be [N x 3], got {:?}", coords.shape())));
        }
        if !coords.is_finite() {
            return Err(Error::Parameter("coordinates must be finite".into()));
        }
        let n = coords.rows();
        if let Some(f) = &feats {
            if f.rank() != 2 || f.rows() != n {
                return Err(Error::Dimension(format!(
                    "features {:?} do not match {n} points",
                    f.shape()
                )));
            }
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::Dimension(format!("{} labels for {n} points", l.len())));
            }
        }
        Ok(Self { coords, feats, labels })
    }

    pub fn from_points(points: &[[f64; 3]]) -> Result<Self> {
        let data = points.iter().flatten().copied().collect();
        Self::new(Tensor::new(&[points.len(), 3], data)?, None, None)
    }

    pub fn len(&self) -> usize {
        self.coords.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        let r = self.coords.row(i);
        [r[0], r[1], r[2]]
    }

    /// Keeps rows `idx` (in order) of coordinates, features and labels.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let coords = self.coords.select_rows(idx)?;
        let feats = self.feats.as_ref().map(|f| f.select_rows(idx)).transpose()?;
        let labels = self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect());
        Self::new(coords, feats, labels)
    }
}

/// Per-center neighbor indices with gathered relative coordinates and features.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedNeighborhood {
    /// `[N_s][K]` row indices into the source cloud.
    pub indices: Vec<Vec<usize>>,
    /// `[N_s x K x 3]`, `coords[indices[i][k]] - center_i`.
    pub rel_coords: Tensor,
    /// `[N_s x K x D]`; absent when the source has no features.
    pub group_feats: Option<Tensor>,
}

#[inline]
pub fn sq_dist3(a: &[f64], b: &[f64]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

fn check_coords(t: &Tensor, what: &str) -> Result<()> {
    if t.rank() != 2 || t.cols() != 3 {
        return Err(Error::Dimension(format!("{what} must be [N x 3], got {:?}", t.shape())));
    }
    Ok(())
}

/// `out[i, j] = |a_i - b_j|^2`.
pub fn pairwise_sq_dist(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_coords(a, "a")?;
    check_coords(b, "b")?;
    let (m, n) = (a.rows(), b.rows());
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let ai = a.row(i);
        out.extend((0..n).map(|j| sq_dist3(ai, b.row(j))));
    }
    Tensor::new(&[m, n], out)
}

/// Greedy farthest point sampling on the rows of `coords[N x 3]`.
///
/// Starts at `start`; each next pick maximizes the minimum squared distance to
/// the already selected set, ties going to the lowest unselected index.
pub fn farthest_point_sample(coords: &Tensor, n_out: usize, start: usize) -> Result<Vec<usize>> {
    check_coords(coords, "coords")?;
    let n = coords.rows();
    if n_out == 0 || n_out > n {
        return Err(Error::Parameter(format!("cannot sample {n_out} of {n} points")));
    }
    if start >= n {
        return Err(Error::Parameter(format!("start index {start} out of range for {n} points")));
    }
    let mut selected = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut out = Vec::with_capacity(n_out);
    let mut cur = start;
    for _ in 0..n_out {
        out.push(cur);
        selected[cur] = true;
        let c = coords.row(cur);
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for j in 0..n {
            if selected[j] {
                continue;
            }
            let d = sq_dist3(c, coords.row(j));
            if d < min_d[j] {
                min_d[j] = d;
            }
            if min_d[j] > best_d {
                best_d = min_d[j];
                best = j;
            }
        }
        cur = best;
    }
    Ok(out)
}

/// Uniform random subset of `n_out` distinct indices, in draw order.
pub fn random_sample(n: usize, n_out: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if n_out == 0 || n_out > n {
        return Err(Error::Parameter(format!("cannot sample {n_out} of {n} points")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let (head, _) = idx.partial_shuffle(rng, n_out);
    Ok(head.to_vec())
}

/// For each query row, the `k` nearest key rows by squared distance, ascending,
/// ties broken by lowest index.
pub fn knn_query(queries: &Tensor, keys: &Tensor, k: usize) -> Result<Vec<Vec<usize>>> {
    check_coords(queries, "queries")?;
    check_coords(keys, "keys")?;
    let n = keys.rows();
    if k == 0 || k > n {
        return Err(Error::Parameter(format!("k = {k} must be in 1..={n}")));
    }
    let mut out = Vec::with_capacity(queries.rows());
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for qi in 0..queries.rows() {
        let q = queries.row(qi);
        cand.clear();
        cand.extend((0..n).map(|j| (sq_dist3(q, keys.row(j)), j)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < n {
            cand.select_nth_unstable_by(k - 1, cmp);
        }
        let head = &mut cand[..k];
        head.sort_unstable_by(cmp);
        out.push(head.iter().map(|c| c.1).collect());
    }
    Ok(out)
}

/// Gathers neighbor coordinates (relative to each center) and features.
pub fn group_gather(
    src: &PointCloud,
    centers: &Tensor,
    idx: &[Vec<usize>],
) -> Result<GroupedNeighborhood> {
    check_coords(centers, "centers")?;
    if centers.rows() != idx.len() {
        return Err(Error::Dimension(format!(
            "{} centers but {} index rows",
            centers.rows(),
            idx.len()
        )));
    }
    let k = idx.first().map_or(0, Vec::len);
    if k == 0 {
        return Err(Error::Empty("neighborhood has no members".into()));
    }
    let n = src.len();
    let mut rel = Vec::with_capacity(idx.len() * k * 3);
    let mut feats = src.feats.as_ref().map(|f| Vec::with_capacity(idx.len() * k * f.cols()));
    for (i, row) in idx.iter().enumerate() {
        if row.len() != k {
            return Err(Error::Dimension("ragged neighbor lists".into()));
        }
        let c = centers.row(i);
        for &j in row {
            if j >= n {
                return Err(Error::Index { index: j, len: n });
            }
            let p = src.coords.row(j);
            rel.extend([p[0] - c[0], p[1] - c[1], p[2] - c[2]]);
            if let (Some(out), Some(f)) = (feats.as_mut(), src.feats.as_ref()) {
                out.extend_from_slice(f.row(j));
            }
        }
    }
    let group_feats = match (feats, &src.feats) {
        (Some(data), Some(f)) => Some(Tensor::new(&[idx.len(), k, f.cols()], data)?),
        _ => None,
    };
    Ok(GroupedNeighborhood {
        indices: idx.to_vec(),
        rel_coords: Tensor::new(&[idx.len(), k, 3], rel)?,
        group_feats,
    })
}

pub const INTERP_EPS: f64 = 1e-8;

/// Three nearest keys per query with inverse-squared-distance weights
/// `(d^2 + eps)^-1`, normalized to sum to one.
pub fn three_nn_weights(queries: &Tensor, keys: &Tensor) -> Result<(Vec<[usize; 3]>, Vec<[f64; 3]>)> {
    if keys.rows() < 3 {
        return Err(Error::Parameter(format!(
            "3-nearest interpolation needs at least 3 keys, got {}",
            keys.rows()
        )));
    }
    let nn = knn_query(queries, keys, 3)?;
    let mut idx = Vec::with_capacity(nn.len());
    let mut weights = Vec::with_capacity(nn.len());
    for (qi, row) in nn.iter().enumerate() {
        let q = queries.row(qi);
        let inv: Vec<f64> = row.iter().map(|&j| 1.0 / (sq_dist3(q, keys.row(j)) + INTERP_EPS)).collect();
        let s: f64 = inv.iter().sum();
        idx.push([row[0], row[1], row[2]]);
        weights.push([inv[0] / s, inv[1] / s, inv[2] / s]);
    }
    Ok((idx, weights))
}

/// Interpolates `key_feats[N x D]` onto the query positions.
pub fn three_nn_interpolate(queries: &Tensor, keys: &Tensor, key_feats: &Tensor) -> Result<Tensor> {
    if key_feats.rows() != keys.rows() {
        return Err(Error::Dimension(format!(
            "{} key features for {} keys",
            key_feats.rows(),
            keys.rows()
        )));
    }
    let (idx, w) = three_nn_weights(queries, keys)?;
    let d = key_feats.cols();
    let mut out = vec![0.0; idx.len() * d];
    for (qi, (ids, ws)) in idx.iter().zip(&w).enumerate() {
        let o = &mut out[qi * d..(qi + 1) * d];
        for (&j, &wj) in ids.iter().zip(ws) {
            for (a, b) in o.iter_mut().zip(key_feats.row(j)) {
                *a += wj * b;
            }
        }
    }
    Tensor::new(&[idx.len(), d], out)
}

/// Mean distance from each point to its nearest other point.
pub fn mean_nn_distance(coords: &Tensor) -> Result<f64> {
    check_coords(coords, "coords")?;
    let n = coords.rows();
    if n < 2 {
        return Err(Error::Parameter("mean nearest-neighbor distance needs 2 points".into()));
    }
    let mut total = 0.0;
    for i in 0..n {
        let ci = coords.row(i);
        let best = (0..n)
            .filter(|&j| j != i)
            .map(|j| sq_dist3(ci, coords.row(j)))
            .fold(f64::INFINITY, f64::min);
        total += best.sqrt();
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pts(p: &[[f64; 3]]) -> Tensor {
        PointCloud::from_points(p).unwrap().coords
    }

    #[test]
    fn pairwise_examples() {
        let a = pts(&[[1.0, 2.0, 3.0]]);
        assert_eq!(pairwise_sq_dist(&a, &a).unwrap().data(), &[0.0]);
        let o = pts(&[[0.0, 0.0, 0.0]]);
        let b = pts(&[[3.0, 4.0, 0.0]]);
        assert_eq!(pairwise_sq_dist(&o, &b).unwrap().data(), &[25.0]);
        let c = pts(&[[0.0, 1.0, 0.0], [2.0, 0.0, 1.0], [1.0, 1.0, 1.0]]);
        let ab = pairwise_sq_dist(&a, &c).unwrap();
        let ba = pairwise_sq_dist(&c, &a).unwrap();
        for j in 0..3 {
            assert_eq!(ab.get(&[0, j]), ba.get(&[j, 0]));
        }
    }

    #[test]
    fn fps_examples() {
        let c = pts(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [2.0, 0.0, 0.0]]);
        assert_eq!(farthest_point_sample(&c, 2, 0).unwrap(), vec![0, 3]);
        assert_eq!(farthest_point_sample(&c, 1, 2).unwrap(), vec![2]);
        let mut all = farthest_point_sample(&c, 4, 1).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert!(farthest_point_sample(&c, 5, 0).is_err());
        assert!(farthest_point_sample(&c, 2, 4).is_err());
    }

    #[test]
    fn fps_distinct_with_duplicate_points() {
        let c = pts(&[[0.0; 3], [0.0; 3], [0.0; 3]]);
        let mut s = farthest_point_sample(&c, 3, 2).unwrap();
        assert_eq!(s[0], 2);
        s.sort();
        assert_eq!(s, vec![0, 1, 2]);
    }

    #[test]
    fn knn_examples() {
        let q = pts(&[[0.0, 0.0, 0.0]]);
        let keys = pts(&[[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [3.0, 0.0, 0.0]]);
        assert_eq!(knn_query(&q, &keys, 2).unwrap(), vec![vec![0, 1]]);
        let q1 = pts(&[[0.0, 2.0, 0.0]]);
        assert_eq!(knn_query(&q1, &keys, 1).unwrap(), vec![vec![1]]);
        assert_eq!(knn_query(&q, &keys, 3).unwrap(), vec![vec![0, 1, 2]]);
        assert!(knn_query(&q, &keys, 4).is_err());
    }

    #[test]
    fn knn_ties_go_to_lowest_index() {
        let q = pts(&[[0.0, 0.0, 0.0]]);
        let keys = pts(&[[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.5, 0.0, 0.0]]);
        assert_eq!(knn_query(&q, &keys, 3).unwrap(), vec![vec![3, 0, 1]]);
    }

    #[test]
    fn group_gather_examples() {
        let mut src = PointCloud::from_points(&[[1.0, 2.0, 3.0], [0.0, 0.0, 1.0]]).unwrap();
        src.feats = Some(Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap());
        let centers = pts(&[[1.0, 2.0, 3.0]]);
        let g = group_gather(&src, &centers, &[vec![0]]).unwrap();
        assert_eq!(g.rel_coords.data(), &[0.0, 0.0, 0.0]);
        assert_eq!(g.group_feats.as_ref().unwrap().data(), &[5.0, 6.0]);
        let g2 = group_gather(&src, &centers, &[vec![1, 1]]).unwrap();
        assert_eq!(g2.rel_coords.data(), &[-1.0, -2.0, -2.0, -1.0, -2.0, -2.0]);
        assert!(matches!(
            group_gather(&src, &centers, &[vec![2]]),
            Err(Error::Index { index: 2, len: 2 })
        ));
        assert!(matches!(group_gather(&src, &centers, &[vec![]]), Err(Error::Empty(_))));
    }

    #[test]
    fn interpolation_examples() {
        let keys = pts(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [5.0, 5.0, 5.0]]);
        let f = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![9.0, 9.0]]).unwrap();
        // Coincident with key 0.
        let out = three_nn_interpolate(&pts(&[[0.0, 0.0, 0.0]]), &keys, &f).unwrap();
        assert!((out.get(&[0, 0]) - 1.0).abs() < 1e-5 && out.get(&[0, 1]).abs() < 1e-5);

        // Equidistant keys.
        let eq = pts(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let (_, w) = three_nn_weights(&pts(&[[0.0; 3]]), &eq).unwrap();
        for &wi in &w[0] {
            assert!((wi - 1.0 / 3.0).abs() < 1e-15);
        }

        // Midpoint of two keys with equal features, third key far away.
        let f2 = Tensor::from_rows(&[vec![2.0, -1.0], vec![2.0, -1.0], vec![100.0, 100.0]]).unwrap();
        let keys2 = pts(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [50.0, 0.0, 0.0]]);
        let out = three_nn_interpolate(&pts(&[[1.0, 0.0, 0.0]]), &keys2, &f2).unwrap();
        // Far weight is (1/2401) / (2 + 1/2401) of the total.
        let w_far = (1.0 / 2401.0) / (2.0 + 1.0 / 2401.0);
        assert!((out.get(&[0, 0]) - (2.0 + w_far * 98.0)).abs() < 1e-9);
        assert!((out.get(&[0, 0]) - 2.0).abs() < 0.05);

        assert!(three_nn_weights(&pts(&[[0.0; 3]]), &pts(&[[0.0; 3], [1.0, 0.0, 0.0]])).is_err());
    }

    #[test]
    fn random_sample_is_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut s = random_sample(20, 20, &mut rng).unwrap();
        s.sort();
        assert_eq!(s, (0..20).collect::<Vec<_>>());
        assert!(random_sample(3, 4, &mut rng).is_err());
    }
}
