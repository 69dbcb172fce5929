//! Exact Euclidean distance transform on anisotropic grids.
//!
//! Separable lower-envelope algorithm of Felzenszwalb & Huttenlocher, run
//! along x, then y, then z, with physical (mm) voxel spacing.

use ndarray::{Array3, Axis};

/// Squared distance (mm²) from every voxel to the nearest voxel where `inside` is false.
///
/// Voxels outside the mask get 0. When the mask has no outside voxel at all
/// every entry is `f64::INFINITY`.
pub fn squared_edt(inside: &Array3<bool>, spacing: [f64; 3]) -> Array3<f64> {
    let mut d = inside.mapv(|v| if v { f64::INFINITY } else { 0.0 });
    let n_max = *inside.shape().iter().max().unwrap_or(&0);
    let mut f = vec![0.0; n_max];
    let mut out = vec![0.0; n_max];
    let mut v = vec![0usize; n_max];
    let mut z = vec![0.0; n_max + 1];
    for axis in [2usize, 1, 0] {
        let s = spacing[axis];
        for mut lane in d.lanes_mut(Axis(axis)) {
            let n = lane.len();
            for (i, x) in lane.iter().enumerate() {
                f[i] = *x;
            }
            transform_1d(&f[..n], s, &mut out[..n], &mut v, &mut z);
            for (x, o) in lane.iter_mut().zip(out[..n].iter()) {
                *x = *o;
            }
        }
    }
    d
}

/// Euclidean distance (mm) to the nearest voxel where `inside` is false.
pub fn distance_transform(inside: &Array3<bool>, spacing: [f64; 3]) -> Array3<f64> {
    squared_edt(inside, spacing).mapv(f64::sqrt)
}

fn transform_1d(f: &[f64], s: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k: isize = -1;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let pq = q as f64 * s;
        loop {
            if k < 0 {
                k = 0;
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            let vk = v[k as usize];
            let pv = vk as f64 * s;
            let inter = ((f[q] + pq * pq) - (f[vk] + pv * pv)) / (2.0 * (pq - pv));
            if inter <= z[k as usize] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k as usize] = q;
            z[k as usize] = inter;
            z[k as usize + 1] = f64::INFINITY;
            break;
        }
    }
    if k < 0 {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        let pq = q as f64 * s;
        while z[j + 1] < pq {
            j += 1;
        }
        let pv = v[j] as f64 * s;
        *o = (pq - pv) * (pq - pv) + f[v[j]];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn brute_force(inside: &Array3<bool>, spacing: [f64; 3]) -> Array3<f64> {
        let outside: Vec<[usize; 3]> = inside
            .indexed_iter()
            .filter(|(_, &v)| !v)
            .map(|((z, y, x), _)| [z, y, x])
            .collect();
        Array3::from_shape_fn(inside.raw_dim(), |(z, y, x)| {
            if !inside[[z, y, x]] {
                return 0.0;
            }
            outside
                .iter()
                .map(|o| {
                    let dz = (z as f64 - o[0] as f64) * spacing[0];
                    let dy = (y as f64 - o[1] as f64) * spacing[1];
                    let dx = (x as f64 - o[2] as f64) * spacing[2];
                    dz * dz + dy * dy + dx * dx
                })
                .fold(f64::INFINITY, f64::min)
        })
    }

    #[test]
    fn matches_brute_force_on_random_masks() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for trial in 0..40 {
            let shape = [rng.gen_range(1..7), rng.gen_range(1..7), rng.gen_range(1..7)];
            let spacing = [rng.gen_range(0.5..3.0), rng.gen_range(0.5..3.0), rng.gen_range(0.5..3.0)];
            let p = rng.gen_range(0.3..0.95);
            let mask = Array3::from_shape_simple_fn(shape, || rng.gen_bool(p));
            let got = squared_edt(&mask, spacing);
            let want = brute_force(&mask, spacing);
            for (g, w) in got.iter().zip(want.iter()) {
                if w.is_infinite() {
                    assert!(g.is_infinite(), "trial {trial}");
                } else {
                    assert!((g - w).abs() < 1e-9, "trial {trial}: {g} vs {w}");
                }
            }
        }
    }

    #[test]
    fn sphere_center_is_the_maximum() {
        let n = 15;
        let c = 7.0;
        let mask = Array3::from_shape_fn([n; 3], |(z, y, x)| {
            let d2 = (z as f64 - c).powi(2) + (y as f64 - c).powi(2) + (x as f64 - c).powi(2);
            d2 <= 25.0
        });
        let d = squared_edt(&mask, [1.0; 3]);
        let (argmax, _) = d
            .indexed_iter()
            .fold(((0, 0, 0), -1.0), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        assert_eq!(argmax, (7, 7, 7));
    }
}
