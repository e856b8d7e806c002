//! Fixtures shared by the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use foe_core::optics::{init_phase_mask, MaskInit, MaskParams, Microscope, OpticsConfig, PhaseMask};
use foe_core::Tensor;

pub fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

/// Single-channel `n x n` input, a padded-grid Fourier weight and the
/// largest odd spatial kernel that fits, all random.
pub struct ConvFixture {
    pub x: Tensor,
    pub x4: Tensor,
    pub weight: Tensor,
    pub kernel: Tensor,
}

impl ConvFixture {
    pub fn new(n: usize) -> Self {
        let mut r = rng();
        let x = Tensor::randn(&[1, n, n], 1.0, &mut r);
        let x4 = x.reshape(&[1, 1, n, n]).expect("same size");
        let k = (n - 1) | 1;
        ConvFixture {
            weight: Tensor::complex_randn(&[1, 1, 2 * n, 2 * n], 1.0, &mut r),
            kernel: Tensor::randn(&[1, 1, 1, k, k], 1.0, &mut r),
            x,
            x4,
        }
    }
}

/// Toy microscope with a pencil-beam mask.
pub fn toy_scope() -> (Microscope, PhaseMask) {
    let cfg = OpticsConfig::toy();
    let phi = init_phase_mask(MaskInit::PencilsHex, &cfg, &MaskParams::default()).expect("toy mask");
    (Microscope::new(cfg).expect("toy config"), phi)
}
