//! Deterministic seeding helpers and shared numeric utilities.

/// FNV-1a hash of a byte string. Stable across platforms and runs; used to
/// derive per-tensor RNG streams from human-readable names.
pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Mix a base seed with a sequence of stream components. The result depends
/// only on the values, never on scheduling, so worker parallelism cannot
/// change which random stream a sample sees.
pub(crate) fn mix_seed(base: u64, components: &[u64]) -> u64 {
    let mut acc = splitmix64(base);
    for &c in components {
        acc = splitmix64(acc ^ c);
    }
    acc
}

/// Seed for the RNG that initializes the tensor with the given name.
pub(crate) fn tensor_seed(base: u64, name: &str) -> u64 {
    mix_seed(base, &[fnv1a64(name.as_bytes())])
}

/// Percentile with linear interpolation between order statistics.
///
/// `sorted` must be ascending and nonempty; `q` is in [0, 100].
pub(crate) fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = (q / 100.0).clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

/// Foreground pixels with at least one 4-neighbor that is background or lies
/// outside the grid. This single definition of "boundary" backs both the
/// boundary-sensitivity factor in the loss and the Hausdorff metric.
pub(crate) fn inner_boundary_pixels(mask: &ndarray::Array2<u8>) -> Vec<(usize, usize)> {
    let (h, w) = mask.dim();
    let fg = |r: isize, c: isize| {
        r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w && mask[[r as usize, c as usize]] > 0
    };
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if mask[[r, c]] == 0 {
                continue;
            }
            let (ri, ci) = (r as isize, c as isize);
            if !fg(ri - 1, ci) || !fg(ri + 1, ci) || !fg(ri, ci - 1) || !fg(ri, ci + 1) {
                out.push((r, c));
            }
        }
    }
    out
}
