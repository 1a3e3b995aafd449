#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use robustnet_core::attacks::Differentiable;
use robustnet_core::{Result, Scalar, Tape, Tensor, Var};

/// `logits = W * flatten(x) + b`, realized as a full-extent convolution.
pub struct LinearModel<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> LinearModel<T> {
    pub fn random(classes: usize, res: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = classes * 3 * res * res;
        let w = (0..n).map(|_| T::c(rng.gen_range(-1.0..1.0))).collect();
        let b = (0..classes).map(|_| T::c(rng.gen_range(-0.5..0.5))).collect();
        Self { w: Tensor::from_vec(&[classes, 3, res, res], w).unwrap(), b: Tensor::from_vec(&[classes], b).unwrap() }
    }
}

impl<T: Scalar> Differentiable<T> for LinearModel<T> {
    fn logits_on_tape(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.constant(self.w.clone());
        let z = tape.conv2d(x, w, 1, 0, 1)?;
        let z = tape.global_avg_pool(z)?;
        let k = self.b.numel();
        let b = tape.constant(Tensor::from_vec(&[k, 1], self.b.data().to_vec()).unwrap());
        let n = tape.value(z).shape()[0];
        let ones = tape.constant(Tensor::full(&[n, 1], T::one()));
        let bias = tape.linear(ones, b, None)?;
        tape.add(z, bias)
    }
}

pub fn random_images<T: Scalar>(n: usize, res: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let data = (0..n * 3 * res * res).map(|_| T::c(rng.gen_range(0.0..=1.0))).collect();
    Tensor::from_vec(&[n, 3, res, res], data).unwrap()
}
