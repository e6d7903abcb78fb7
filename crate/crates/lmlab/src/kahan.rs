//! Kahan-Babuska compensated summation. Expectations over contexts must hold
//! 1e-10..1e-12 tolerances after summing hundreds of terms, so plain
//! accumulation is not enough.

#[derive(Clone, Copy, Debug, Default)]
pub struct Kahan {
    sum: f64,
    comp: f64,
}

impl Kahan {
    pub fn new() -> Self {
        Kahan::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn sum(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Compensated sum of an iterator.
pub fn ksum(it: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = Kahan::new();
    for x in it {
        acc.add(x);
    }
    acc.sum()
}
