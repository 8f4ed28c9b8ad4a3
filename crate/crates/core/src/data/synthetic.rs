use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Domain, DomainDataset, Split};
use crate::autodiff::Tensor;

/// Two interleaved half circles with Gaussian noise. The source takes the
/// points as drawn; the target is the same draw rotated counter-clockwise by
/// `angle_deg` about the source centroid. Both carry labels; callers strip
/// them from target training data.
pub fn gen_two_moons(n: usize, angle_deg: f64, noise: f64, seed: u64) -> (DomainDataset, DomainDataset) {
    assert!(n >= 2, "need at least two points");
    assert!(noise >= 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = usize::from(i >= n.div_ceil(2));
        let t: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let (x, y) = if class == 0 { (t.cos(), t.sin()) } else { (1.0 - t.cos(), 0.5 - t.sin()) };
        let ex: f64 = rng.sample(StandardNormal);
        let ey: f64 = rng.sample(StandardNormal);
        pts.extend([x + noise * ex, y + noise * ey]);
        labels.push(class);
    }
    let source = Tensor::matrix(n, 2, pts);
    let target = rotate_about_centroid(&source, angle_deg);
    (
        DomainDataset::new(source, labels.clone(), Domain::Source, Split::Train, 2),
        DomainDataset::new(target, labels, Domain::Target, Split::Train, 2),
    )
}

pub(crate) fn rotate_about_centroid(x: &Tensor, angle_deg: f64) -> Tensor {
    if angle_deg == 0.0 {
        return x.clone();
    }
    let n = x.rows() as f64;
    let cx = (0..x.rows()).map(|i| x.get(i, 0)).sum::<f64>() / n;
    let cy = (0..x.rows()).map(|i| x.get(i, 1)).sum::<f64>() / n;
    let (s, c) = angle_deg.to_radians().sin_cos();
    let mut out = x.clone();
    for i in 0..x.rows() {
        let (dx, dy) = (x.get(i, 0) - cx, x.get(i, 1) - cy);
        out.set(i, 0, cx + c * dx - s * dy);
        out.set(i, 1, cy + s * dx + c * dy);
    }
    out
}

/// `classes` isotropic Gaussian clusters centered on a circle of radius 3.
/// Labels cycle `0, 1, …`, so every class gets `n / classes` or one more.
/// The target is the same draw translated by `shift`.
pub fn gen_blobs(n: usize, classes: usize, shift: [f64; 2], noise: f64, seed: u64) -> (DomainDataset, DomainDataset) {
    assert!(classes >= 2, "need at least two classes");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = Vec::with_capacity(2 * n);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    for &l in &labels {
        let a = std::f64::consts::TAU * l as f64 / classes as f64;
        let ex: f64 = rng.sample(StandardNormal);
        let ey: f64 = rng.sample(StandardNormal);
        pts.extend([3.0 * a.cos() + noise * ex, 3.0 * a.sin() + noise * ey]);
    }
    let source = Tensor::matrix(n, 2, pts);
    let mut target = source.clone();
    for i in 0..n {
        target.row_mut(i).iter_mut().zip(shift).for_each(|(v, s)| *v += s);
    }
    (
        DomainDataset::new(source, labels.clone(), Domain::Source, Split::Train, classes),
        DomainDataset::new(target, labels, Domain::Target, Split::Train, classes),
    )
}

/// Bilinear resize of square `side × side` images (one per row) to
/// `out × out`, with corner pixels aligned.
pub fn upscale(images: &Tensor, side: usize, out: usize) -> Tensor {
    assert_eq!(images.cols(), side * side, "rows must be square images");
    assert!(side >= 1 && out >= 1);
    let scale = if out > 1 { (side - 1) as f64 / (out - 1) as f64 } else { 0.0 };
    // Per output coordinate: lower source index and weight of the upper one.
    let taps: Vec<(usize, f64)> = (0..out)
        .map(|o| {
            let s = o as f64 * scale;
            let lo = (s.floor() as usize).min(side - 1);
            (lo, s - lo as f64)
        })
        .collect();
    let mut data = Vec::with_capacity(images.rows() * out * out);
    for n in 0..images.rows() {
        let img = images.row(n);
        let px = |r: usize, c: usize| img[r.min(side - 1) * side + c.min(side - 1)];
        for &(r0, wr) in &taps {
            for &(c0, wc) in &taps {
                let top = (1.0 - wc) * px(r0, c0) + wc * px(r0, c0 + 1);
                let bottom = (1.0 - wc) * px(r0 + 1, c0) + wc * px(r0 + 1, c0 + 1);
                data.push((1.0 - wr) * top + wr * bottom);
            }
        }
    }
    Tensor::matrix(images.rows(), out * out, data)
}
