//! Re-seedable standard-normal streams.
//!
//! The optimizer never stores a perturbation direction; it regenerates it by
//! resetting a stream to the step seed. That only works if the stream is a
//! pure function of its seed, so the algorithm is fixed here rather than left
//! to a platform default:
//!
//! * bits: ChaCha8 keyed through `rand_core`'s `seed_from_u64` expansion,
//!   consumed one `u64` at a time;
//! * uniforms: the top 53 bits scaled by 2^-53, with the first uniform of each
//!   pair shifted into (0, 1] so the logarithm is finite;
//! * normals: Box–Muller on each uniform pair, cosine branch first, then the
//!   sine branch. No draw is ever discarded.
//!
//! Transcendentals come from `libm` so sequences do not depend on the host C
//! library.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

const TWO_POW_NEG_53: f64 = 1.0 / (1u64 << 53) as f64;

/// Anything that can be reset to a seed and then yield standard normals.
///
/// The engine is generic over this so tests can record or force the draws.
pub trait NormalSource {
    fn reset(&mut self, seed: u64);
    fn next_normal(&mut self) -> f64;
}

/// Deterministic N(0, 1) stream.
#[derive(Debug, Clone)]
pub struct GaussianStream {
    seed: u64,
    position: u64,
    bits: ChaCha8Rng,
    spare: Option<f64>,
}

impl GaussianStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            position: 0,
            bits: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Count of normals emitted since the last reset.
    pub fn position(&self) -> u64 {
        self.position
    }

    pub fn next_u64(&mut self) -> u64 {
        self.bits.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn next_uniform(&mut self) -> f64 {
        (self.bits.next_u64() >> 11) as f64 * TWO_POW_NEG_53
    }

    /// Uniform integer in `[0, bound)`, unbiased (Lemire's method).
    pub fn next_below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "next_below needs a positive bound");
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let m = (self.bits.next_u64() as u128) * (bound as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }
}

impl NormalSource for GaussianStream {
    fn reset(&mut self, seed: u64) {
        *self = GaussianStream::new(seed);
    }

    #[inline]
    fn next_normal(&mut self) -> f64 {
        self.position += 1;
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = ((self.bits.next_u64() >> 11) + 1) as f64 * TWO_POW_NEG_53;
        let u2 = (self.bits.next_u64() >> 11) as f64 * TWO_POW_NEG_53;
        let radius = (-2.0 * libm::log(u1)).sqrt();
        let (sin, cos) = libm::sincos(std::f64::consts::TAU * u2);
        self.spare = Some(radius * sin);
        radius * cos
    }
}

/// Free-function form of [`NormalSource::reset`].
pub fn reset(stream: &mut GaussianStream, seed: u64) {
    stream.reset(seed);
}

pub fn draw_standard_normal(stream: &mut GaussianStream) -> f64 {
    stream.next_normal()
}

/// What a derived seed is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SeedPurpose {
    Perturbation,
    LayerSelect,
    BatchSample,
}

impl SeedPurpose {
    fn code(self) -> u64 {
        match self {
            SeedPurpose::Perturbation => 1,
            SeedPurpose::LayerSelect => 2,
            SeedPurpose::BatchSample => 3,
        }
    }
}

/// Derives every per-step seed of a run from one base seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedSchedule {
    pub base_seed: u64,
}

impl SeedSchedule {
    pub fn new(base_seed: u64) -> Self {
        Self { base_seed }
    }

    pub fn derive(&self, purpose: SeedPurpose, step: u64) -> u64 {
        derive_seed(self.base_seed, purpose, step)
    }
}

/// SplitMix64 output function: a bijection on `u64`.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Chained SplitMix64 over (base, purpose, step). For a fixed base and
/// purpose the map from step is injective, so consecutive steps never share
/// a seed.
pub fn derive_seed(base_seed: u64, purpose: SeedPurpose, step: u64) -> u64 {
    let h = mix64(base_seed);
    let h = mix64(h ^ purpose.code().wrapping_mul(0xD6E8_FEB8_6659_FD93));
    mix64(h ^ step)
}

/// Wraps a source and logs every draw, one segment per reset.
#[derive(Debug, Clone)]
pub struct RecordingSource<S> {
    inner: S,
    segments: Vec<(u64, Vec<f64>)>,
}

impl<S: NormalSource> RecordingSource<S> {
    pub fn new(inner: S) -> Self {
        Self {
            inner,
            segments: Vec::new(),
        }
    }

    /// `(seed, draws)` for each reset, in call order.
    pub fn segments(&self) -> &[(u64, Vec<f64>)] {
        &self.segments
    }

    pub fn clear(&mut self) {
        self.segments.clear();
    }
}

impl<S: NormalSource> NormalSource for RecordingSource<S> {
    fn reset(&mut self, seed: u64) {
        self.inner.reset(seed);
        self.segments.push((seed, Vec::new()));
    }

    fn next_normal(&mut self) -> f64 {
        let z = self.inner.next_normal();
        if let Some((_, draws)) = self.segments.last_mut() {
            draws.push(z);
        }
        z
    }
}

/// Replays a fixed direction after every reset, ignoring the seed.
#[derive(Debug, Clone)]
pub struct FixedDirection {
    values: Vec<f64>,
    position: usize,
}

impl FixedDirection {
    pub fn new(values: Vec<f64>) -> Self {
        Self {
            values,
            position: 0,
        }
    }
}

impl NormalSource for FixedDirection {
    fn reset(&mut self, _seed: u64) {
        self.position = 0;
    }

    fn next_normal(&mut self) -> f64 {
        let z = *self
            .values
            .get(self.position)
            .expect("fixed direction exhausted; it must cover every active element");
        self.position += 1;
        z
    }
}
