#![allow(dead_code)]

use std::sync::Arc;

use isothermic_core::dressing::{dress, random_element, Regime, SimpleElement};
use isothermic_core::frames::{integrate_frame, FrameSheet, IntegrationOptions};
use isothermic_core::geometry::{make_null_basis, synthesize_sequence, CombescureSequence};
use isothermic_core::{vacuum, GridSpec, SolutionSource, SystemShape};
use nalgebra::Complex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn hyp21() -> SystemShape {
    SystemShape::hypersurface(2, 1).unwrap()
}

pub fn c(re: f64) -> Complex<f64> {
    Complex::new(re, 0.0)
}

pub fn element(shape: SystemShape, regime: Regime, alpha: f64, seed: u64) -> SimpleElement<f64> {
    random_element(shape, regime, alpha, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

pub fn dressed(shape: SystemShape, regime: Regime, alpha: f64, seed: u64) -> Arc<SolutionSource<f64>> {
    dress(Arc::new(vacuum(shape)), element(shape, regime, alpha, seed)).unwrap().source
}

pub fn sheet(source: &Arc<SolutionSource<f64>>, nodes: usize, lambdas: &[Complex<f64>]) -> FrameSheet<f64> {
    let grid = GridSpec::cube(source.shape.n, 1.0, nodes).unwrap();
    integrate_frame(source.clone(), &grid, lambdas, &IntegrationOptions::default()).unwrap()
}

pub fn sequence(sheet: &FrameSheet<f64>) -> CombescureSequence<f64> {
    synthesize_sequence(sheet, &make_null_basis(&sheet.shape, None).unwrap()).unwrap()
}

/// `coarse / fine` for a quantity expected to be second order.
pub fn ratio(coarse: f64, fine: f64) -> f64 {
    coarse / fine
}
