//! Counter-based random number generation.
//!
//! Every random decision in the pipeline is keyed by (seed, domain,
//! iteration, element id), so parallel schedules and reruns draw identical
//! values. A stream is a splitmix64 sequence whose starting state is a hash
//! of the key tuple.

/// Domains keep unrelated consumers of randomness from sharing streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    SceneGen = 1,
    CameraPose = 2,
    PixelSampling = 3,
    RayJitter = 4,
    OccupancyJitter = 5,
    HardDraw = 6,
    ParamInit = 7,
    Misc = 8,
}

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Root key for a run; cheap to copy, streams are derived on demand.
#[derive(Clone, Copy, Debug)]
pub struct CounterRng {
    seed: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        CounterRng { seed }
    }

    /// Derive the stream for (domain, key...). Identical keys give
    /// identical streams regardless of call order or thread.
    pub fn stream(&self, domain: Domain, keys: &[u64]) -> Stream {
        let mut state = self.seed ^ 0xD1B54A32D192ED03;
        let mut mix = |v: u64| {
            state ^= v.wrapping_mul(0x2545F4914F6CDD1D);
            splitmix64(&mut state);
        };
        mix(domain as u64);
        for &k in keys {
            mix(k);
        }
        Stream { state }
    }
}

/// A stateful generator over one key tuple.
#[derive(Clone, Debug)]
pub struct Stream {
    state: u64,
}

impl Stream {
    pub fn next_u64(&mut self) -> u64 {
        splitmix64(&mut self.state)
    }

    pub fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n) by rejection; unbiased.
    pub fn next_below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Standard normal via Box-Muller.
    pub fn next_normal(&mut self) -> f64 {
        let u1 = self.next_f64().max(1e-300);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}
