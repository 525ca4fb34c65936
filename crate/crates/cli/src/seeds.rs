use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Independent consumers of randomness. Each one reads its own ChaCha
/// stream, so toggling a feature never shifts the seeds of the others.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Gauge = 0,
    NullVectors = 1,
    Noise = 2,
    Eigensolver = 3,
    Source = 4,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::Gauge,
        Component::NullVectors,
        Component::Noise,
        Component::Eigensolver,
        Component::Source,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Gauge => "gauge",
            Component::NullVectors => "null_vectors",
            Component::Noise => "noise",
            Component::Eigensolver => "eigensolver",
            Component::Source => "source",
        }
    }
}

/// Counter-based splitter: the `index`-th seed of a component is the
/// `index`-th 64-bit word pair of stream `component` under the master key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedSplitter {
    master: u64,
}

impl SeedSplitter {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn seed(&self, component: Component, index: u64) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master);
        rng.set_stream(component as u64);
        rng.set_word_pos(2 * index as u128);
        rng.next_u64()
    }
}
