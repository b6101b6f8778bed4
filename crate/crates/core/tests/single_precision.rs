use std::sync::Arc;

use isothermic_core::dressing::{dress, SimpleElement};
use isothermic_core::frames::{integrate_frame, IntegrationOptions};
use isothermic_core::geometry::{make_null_basis, synthesize_sequence};
use isothermic_core::system::pde_residual;
use isothermic_core::{vacuum, GridSpec, SystemShape};
use nalgebra::{Complex, DVector};

#[test]
fn the_pipeline_runs_in_f32() {
    let s = SystemShape::hypersurface(2, 1).unwrap();
    let v = DVector::from_vec(vec![0.6f32, 0.0, 0.8, 0.0, 1.0]);
    let p = SimpleElement::real(s, 1.0f32, &v).unwrap();
    let src = dress(Arc::new(vacuum::<f32>(s)), p).unwrap().source;
    let grid = GridSpec::cube(2, 0.5, 11).unwrap();
    assert!(pde_residual(&src, &grid).unwrap().max() < 0.5);
    let opts = IntegrationOptions { drift_budget: 1e-4, cross_check_y: false, ..Default::default() };
    let sheet = integrate_frame(src, &grid, &[Complex::new(0.5f32, 0.0)], &opts).unwrap();
    let seq = synthesize_sequence(&sheet, &make_null_basis::<f32>(&s, None).unwrap()).unwrap();
    for u in &seq.sheets[0].u {
        assert!(s.form_k(u, u).abs() < 1e-4);
    }
}
