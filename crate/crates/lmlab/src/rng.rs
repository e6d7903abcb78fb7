//! Counter-based splittable random streams.
//!
//! Every randomized routine in the crate draws from a [`Stream`] derived from
//! one root seed by labeled splits. A stream is a (key, counter) pair: the
//! i-th output is the SplitMix64 finalizer applied to `key + i*GOLDEN`, so
//! results depend only on the seed and the split labels, never on scheduling
//! or call interleaving across workers.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer (Vigna); good diffusion, non-cryptographic.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in label.bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Clone, Debug)]
pub struct Stream {
    key: u64,
    counter: u64,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Stream { key: mix(seed ^ 0x6A09_E667_F3BC_C908), counter: 0 }
    }

    /// Derive an independent child stream by label. Children of distinct
    /// labels (or of distinct parents) never share outputs.
    pub fn child(&self, label: &str) -> Self {
        Stream { key: mix(self.key ^ mix(fnv1a(label))), counter: 0 }
    }

    /// Labeled + indexed split, for per-item streams inside sweeps.
    pub fn child_idx(&self, label: &str, idx: u64) -> Self {
        let base = self.child(label);
        Stream { key: mix(base.key.wrapping_add(idx.wrapping_mul(GOLDEN)).wrapping_add(1)), counter: 0 }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in [0, 1) with 53 bits.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Uniform in (0, 1); safe as a log/division argument.
    #[inline]
    pub fn next_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
    }

    /// Standard normal via Box-Muller (cosine branch only).
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = self.next_open();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn fill_gaussian(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.next_gaussian()).collect()
    }

    /// Gamma(shape, 1) via Marsaglia-Tsang; shape > 0.
    pub fn next_gamma(&mut self, shape: f64) -> f64 {
        assert!(shape > 0.0, "gamma shape must be positive");
        if shape < 1.0 {
            let g = self.next_gamma(shape + 1.0);
            let u = self.next_open();
            return g * u.powf(1.0 / shape);
        }
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let x = self.next_gaussian();
            let v = 1.0 + c * x;
            if v <= 0.0 {
                continue;
            }
            let v3 = v * v * v;
            let u = self.next_open();
            if u.ln() < 0.5 * x * x + d - d * v3 + d * v3.ln() {
                return d * v3;
            }
        }
    }

    /// Symmetric Dirichlet(concentration) over `n` outcomes.
    pub fn next_dirichlet(&mut self, concentration: f64, n: usize) -> Vec<f64> {
        let mut g: Vec<f64> = (0..n).map(|_| self.next_gamma(concentration)).collect();
        let sum: f64 = g.iter().sum();
        if sum <= 0.0 {
            // all-underflow corner; fall back to uniform
            return vec![1.0 / n as f64; n];
        }
        for x in &mut g {
            *x /= sum;
        }
        g
    }
}
