//! Reproducible Monte Carlo plumbing: counter-based streams, a blocked
//! parallel executor and mergeable moment accumulators.
//!
//! Path `i` of an experiment always draws from stream `i` of a ChaCha8 key
//! derived from the master seed and a stage label, and work is cut into
//! fixed-size blocks that are merged in index order. Results therefore do
//! not depend on the number of worker threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Default number of paths per block.
pub const BLOCK: usize = 4096;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3))
}

/// Master seed plus stage label; hands out one RNG stream per path index.
#[derive(Debug, Clone)]
pub struct StreamKey {
    base: ChaCha8Rng,
}

impl StreamKey {
    pub fn new(seed: u64, label: &str) -> Self {
        StreamKey { base: ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(fnv1a(label)))) }
    }

    pub fn stream(&self, index: u64) -> ChaCha8Rng {
        let mut r = self.base.clone();
        r.set_stream(index);
        r
    }

    /// Fills `out` with standard normal draws from stream `index`.
    pub fn normals(&self, index: u64, out: &mut [f64]) {
        let mut r = self.stream(index);
        for o in out.iter_mut() {
            *o = StandardNormal.sample(&mut r);
        }
    }
}

/// Runs `f` over `0..n` in blocks of `block` indices on `workers` threads and
/// returns the per-block results in block order.
pub fn run_blocks<R, F>(n: usize, block: usize, workers: usize, f: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(std::ops::Range<usize>) -> Result<R> + Sync,
{
    let block = block.max(1);
    let ranges: Vec<_> = (0..n.div_ceil(block)).map(|b| b * block..((b + 1) * block).min(n)).collect();
    if workers <= 1 {
        return ranges.into_iter().map(&f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start worker pool: {e}")))?;
    pool.install(|| ranges.into_par_iter().map(&f).collect())
}

/// Running mean and variance (Welford), mergeable by Chan's rule.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    pub n: u64,
    pub mean: f64,
    m2: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, o: &Moments) {
        if o.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *o;
            return;
        }
        let n = self.n + o.n;
        let delta = o.mean - self.mean;
        self.mean += delta * o.n as f64 / n as f64;
        self.m2 += o.m2 + delta * delta * self.n as f64 * o.n as f64 / n as f64;
        self.n = n;
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            f64::NAN
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn std_error(&self) -> f64 {
        (self.variance() / self.n as f64).sqrt()
    }
}

/// Joint moments of a pair, for ratio estimators.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CoMoments {
    pub a: Moments,
    pub b: Moments,
    cab: f64,
}

impl CoMoments {
    pub fn push(&mut self, x: f64, y: f64) {
        let dx = x - self.a.mean;
        self.a.push(x);
        self.b.push(y);
        self.cab += dx * (y - self.b.mean);
    }

    pub fn merge(&mut self, o: &CoMoments) {
        if o.a.n == 0 {
            return;
        }
        if self.a.n == 0 {
            *self = *o;
            return;
        }
        let (n1, n2) = (self.a.n as f64, o.a.n as f64);
        let (da, db) = (o.a.mean - self.a.mean, o.b.mean - self.b.mean);
        self.cab += o.cab + da * db * n1 * n2 / (n1 + n2);
        self.a.merge(&o.a);
        self.b.merge(&o.b);
    }

    pub fn covariance(&self) -> f64 {
        if self.a.n < 2 {
            f64::NAN
        } else {
            self.cab / (self.a.n - 1) as f64
        }
    }
}

/// Wilson score interval half-width based standard error for a proportion.
pub fn wilson(successes: u64, n: u64) -> (f64, f64) {
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = 1.0;
    let centre = (p + z2 / (2.0 * nf)) / (1.0 + z2 / nf);
    let half = (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / (1.0 + z2 / nf);
    (centre, half)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let k = StreamKey::new(7, "paths");
        let a: u64 = k.stream(3).random();
        let b: u64 = StreamKey::new(7, "paths").stream(3).random();
        let c: u64 = k.stream(4).random();
        let d: u64 = StreamKey::new(7, "inner").stream(3).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn blocks_independent_of_workers() {
        let k = StreamKey::new(11, "t");
        let run = |w| {
            let parts = run_blocks(10_000, 512, w, |r| {
                let mut m = Moments::default();
                let mut z = [0.0];
                for i in r {
                    k.normals(i as u64, &mut z);
                    m.push(z[0]);
                }
                Ok(m)
            })
            .unwrap();
            let mut tot = Moments::default();
            for p in &parts {
                tot.merge(p);
            }
            tot
        };
        assert_eq!(run(1), run(3));
    }

    proptest! {
        #[test]
        fn merge_equals_sequential(xs in proptest::collection::vec(-1e3f64..1e3, 2..60), cut in 0usize..60) {
            let cut = cut.min(xs.len());
            let mut whole = CoMoments::default();
            let (mut left, mut right) = (CoMoments::default(), CoMoments::default());
            for (i, &x) in xs.iter().enumerate() {
                let y = 0.5 * x * x - x;
                whole.push(x, y);
                if i < cut { left.push(x, y) } else { right.push(x, y) }
            }
            left.merge(&right);
            prop_assert!((left.a.mean - whole.a.mean).abs() < 1e-9);
            prop_assert!((left.b.variance() - whole.b.variance()).abs() < 1e-6 * (1.0 + whole.b.variance()));
            prop_assert!((left.covariance() - whole.covariance()).abs() < 1e-6 * (1.0 + whole.covariance().abs()));
        }
    }

    #[test]
    fn wilson_contains_p() {
        let (c, h) = wilson(30, 100);
        assert!(c - h < 0.3 && 0.3 < c + h);
    }
}
