//! Seeded parameter initialisation.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{ParamId, ParamStore, Result, Scalar, Tensor};

/// Deterministic source of initial weights.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal<F: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<F> {
        let n: usize = shape.iter().product();
        let data: Vec<F> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                F::from_f64(z * std)
            })
            .collect();
        Tensor::new(shape, data).expect("shape matches generated data")
    }

    /// `[fan_in × fan_out]` weight with std `gain / sqrt(fan_in)`.
    pub fn linear<F: Scalar>(
        &mut self,
        store: &mut ParamStore<F>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
    ) -> Result<ParamId> {
        let t = self.normal(&[fan_in, fan_out], gain / libm::sqrt(fan_in as f64));
        store.add(name, t, true)
    }

    pub fn zeros<F: Scalar>(&mut self, store: &mut ParamStore<F>, name: &str, shape: &[usize]) -> Result<ParamId> {
        store.add(name, Tensor::zeros(shape), false)
    }

    pub fn ones<F: Scalar>(&mut self, store: &mut ParamStore<F>, name: &str, shape: &[usize]) -> Result<ParamId> {
        store.add(name, Tensor::full(shape, F::ONE), false)
    }

    pub fn tensor<F: Scalar>(
        &mut self,
        store: &mut ParamStore<F>,
        name: &str,
        shape: &[usize],
        std: f64,
        decay: bool,
    ) -> Result<ParamId> {
        let t = self.normal(shape, std);
        store.add(name, t, decay)
    }
}
