//! Independent reference implementations shared by the oracle tests and the
//! acceptance runner. Each one follows the textbook definition directly and
//! shares no code with the library.
#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `|X_k|^2` by direct summation for every frame and one-sided bin.
pub fn naive_power(x: &[f64], window: &[f64], hop: usize, fft_len: usize) -> Array2<f64> {
    let wl = window.len();
    let frames = 1 + (x.len() - wl) / hop;
    let bins = fft_len / 2 + 1;
    Array2::from_shape_fn((frames, bins), |(f, k)| {
        let (mut re, mut im) = (0.0, 0.0);
        for n in 0..wl {
            let v = x[f * hop + n] * window[n];
            let ang = -2.0 * std::f64::consts::PI * ((k * n) % fft_len) as f64 / fft_len as f64;
            re += v * ang.cos();
            im += v * ang.sin();
        }
        re * re + im * im
    })
}

/// Median of the clamped-border window around every cell, by sorting.
pub fn brute_median(v: &Array2<f64>, (wt, wf): (usize, usize)) -> Array2<f64> {
    let (n, m) = v.dim();
    let (rt, rf) = ((wt / 2) as isize, (wf / 2) as isize);
    Array2::from_shape_fn((n, m), |(i, j)| {
        let mut w = Vec::with_capacity(wt * wf);
        for di in -rt..=rt {
            for dj in -rf..=rf {
                let a = (i as isize + di).clamp(0, n as isize - 1) as usize;
                let b = (j as isize + dj).clamp(0, m as isize - 1) as usize;
                w.push(v[[a, b]]);
            }
        }
        w.sort_by(f64::total_cmp);
        w[w.len() / 2]
    })
}

/// Opening as the union of every placement of the cross that fits inside the mask.
pub fn brute_open(mask: &Array2<bool>, radius: usize) -> Array2<bool> {
    let (n, m) = mask.dim();
    let r = radius as isize;
    let mut shape = vec![(0isize, 0isize)];
    for d in 1..=r {
        shape.extend([(d, 0), (-d, 0), (0, d), (0, -d)]);
    }
    let inside = |a: isize, b: isize| a >= 0 && b >= 0 && (a as usize) < n && (b as usize) < m;
    let mut out = Array2::from_elem((n, m), false);
    for i in 0..n as isize {
        for j in 0..m as isize {
            let fits = shape.iter().all(|&(di, dj)| inside(i + di, j + dj) && mask[[(i + di) as usize, (j + dj) as usize]]);
            if fits {
                for &(di, dj) in &shape {
                    out[[(i + di) as usize, (j + dj) as usize]] = true;
                }
            }
        }
    }
    out
}

/// 8-connected components via union-find, as sorted pixel lists sorted by first pixel.
pub fn brute_components(mask: &Array2<bool>) -> Vec<Vec<(usize, usize)>> {
    let (n, m) = mask.dim();
    let mut parent: Vec<usize> = (0..n * m).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for i in 0..n {
        for j in 0..m {
            if !mask[[i, j]] {
                continue;
            }
            for (di, dj) in [(0isize, 1isize), (1, -1), (1, 0), (1, 1)] {
                let (a, b) = (i as isize + di, j as isize + dj);
                if a < n as isize && b >= 0 && b < m as isize && mask[[a as usize, b as usize]] {
                    let (x, y) = (find(&mut parent, i * m + j), find(&mut parent, a as usize * m + b as usize));
                    parent[x] = y;
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<(usize, usize)>> = Default::default();
    for i in 0..n {
        for j in 0..m {
            if mask[[i, j]] {
                let root = find(&mut parent, i * m + j);
                groups.entry(root).or_default().push((i, j));
            }
        }
    }
    let mut out: Vec<_> = groups.into_values().collect();
    out.sort();
    out
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Inverse normal CDF by bisection on the erf-based CDF.
pub fn probit_bisect(p: f64) -> f64 {
    let (mut lo, mut hi) = (-40.0_f64, 40.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if normal_cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    0.5 * (lo + hi)
}

fn t_density(x: f64, df: f64) -> f64 {
    let c = libm::lgamma((df + 1.0) / 2.0) - libm::lgamma(df / 2.0) - 0.5 * (df * std::f64::consts::PI).ln();
    (c - (df + 1.0) / 2.0 * (1.0 + x * x / df).ln()).exp()
}

fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
        return left + right + (left + right - whole) / 15.0;
    }
    simpson(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + simpson(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson(&f, a, b, fa, fm, fb, whole, tol, 50)
}

/// Upper tail of Student's t by integrating the density. For t > 0 the tail
/// is mapped onto (0, 1] with x = t / s so no infinite range is needed.
pub fn t_sf_integrated(t: f64, df: f64) -> f64 {
    if t < 0.0 {
        return 1.0 - t_sf_integrated(-t, df);
    }
    if t == 0.0 {
        return 0.5;
    }
    integrate(|s| if s <= 0.0 { 0.0 } else { t_density(t / s, df) * t / (s * s) }, 0.0, 1.0, 1e-15)
}

/// Largest number of one-to-one pairs with IoU >= min_overlap (and > 0), by
/// trying every assignment.
pub fn optimal_hits(c: &[(f64, f64)], t: &[(f64, f64)], min_overlap: f64) -> usize {
    fn iou(a: (f64, f64), b: (f64, f64)) -> f64 {
        let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
        let union = (a.1 - a.0) + (b.1 - b.0) - inter;
        if union > 0.0 { inter / union } else { 0.0 }
    }
    fn go(i: usize, c: &[(f64, f64)], t: &[(f64, f64)], used: &mut Vec<bool>, k: f64) -> usize {
        if i == c.len() {
            return 0;
        }
        let mut best = go(i + 1, c, t, used, k);
        for j in 0..t.len() {
            let v = iou(c[i], t[j]);
            if !used[j] && v > 0.0 && v >= k {
                used[j] = true;
                best = best.max(1 + go(i + 1, c, t, used, k));
                used[j] = false;
            }
        }
        best
    }
    go(0, c, t, &mut vec![false; t.len()], min_overlap)
}

pub fn random_intervals<R: Rng>(rng: &mut R, n: usize) -> Vec<(f64, f64)> {
    (0..n)
        .map(|_| {
            let a = rng.random_range(0.0..10.0);
            (a, a + rng.random_range(0.1..2.0))
        })
        .collect()
}

pub fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (mean, x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0))
}

pub mod fixture {
    use usvkit::audio::AudioClip;
    use usvkit::classifier::CallLabel;
    use usvkit::datastore::{NewAnnotation, Store};
    use usvkit::spectrogram::{SpectroImage, TimeFreqBox};
    use usvkit::synthgen::{propose, MorphParams, SeedTile, Verdict};

    /// A seeded noise recording of `seconds` registered in `store`.
    pub fn noise_recording(store: &mut Store, id: &str, seconds: f64, seed: u64) -> String {
        use rand::Rng;
        let mut r = super::rng(seed);
        let n = (seconds * 250_000.0) as usize;
        let x: Vec<f32> = (0..n).map(|_| r.random_range(-0.01f32..0.01)).collect();
        let clip = AudioClip::new(x, 250_000, id).unwrap();
        store.add_recording(&clip, None).unwrap().id
    }

    /// `n` natural annotations on `recording`, labels cycling through the call
    /// categories, boxes 20 ms long laid end to end.
    pub fn naturals(store: &mut Store, recording: &str, n: usize, offset: usize) -> Vec<String> {
        (0..n)
            .map(|i| {
                let k = i + offset;
                let t = 0.01 + 0.025 * (k % 36) as f64;
                store
                    .put_annotation(NewAnnotation {
                        recording_id: recording.into(),
                        bbox: TimeFreqBox::new(t, t + 0.02, 40_000.0, 60_000.0),
                        label: CallLabel::CALLS[k % CallLabel::CALLS.len()],
                        annotator: "fixture".into(),
                        source: usvkit::datastore::AnnotationSource::Human,
                    })
                    .unwrap()
            })
            .collect()
    }

    /// One small stand-in tile per annotation id; enough for morphing.
    pub fn seed_tiles(store: &Store, ids: &[String], px: usize) -> Vec<SeedTile> {
        ids.iter()
            .enumerate()
            .map(|(i, id)| {
                let pixels = ndarray::Array2::from_shape_fn((px, px), |(a, b)| ((a * 7 + b * 3 + i) % 17) as f64 / 16.0);
                SeedTile { annotation_id: id.clone(), label: store.annotation(id).unwrap().label, tile: SpectroImage::new(pixels) }
            })
            .collect()
    }

    /// Proposes one offspring per seed id and records `verdict` for each.
    pub fn morph_and_decide(store: &mut Store, seed_ids: &[String], px: usize, run_seed: u64, verdict: Verdict) -> Vec<String> {
        let seeds = seed_tiles(store, seed_ids, px);
        let params = MorphParams::for_tile(px, run_seed);
        let ids = store.add_synthetics(propose(&seeds, 1, &params).unwrap()).unwrap();
        for id in &ids {
            store.decide(id, verdict, "fixture").unwrap();
        }
        ids
    }
}
