mod common;

use common::*;
use isothermic_core::dressing::{
    conjugation_check, frame_ribaucour_data, lie_transform, lie_transform_sheet, recombine, ribaucour_apply, ribaucour_frame, ribaucour_ode,
    Alpha, Regime,
};
use isothermic_core::geometry::{christoffel_transform, invert_sequence, make_null_basis, verify_combescure, verify_isothermic, NullBasis};
use isothermic_core::scalar::cmax_abs;
use isothermic_core::{Error, SystemShape};
use nalgebra::DMatrix;

#[test]
fn ribaucour_identities_hold_at_rounding_level() {
    for (regime, seed) in [(Regime::Real, 21), (Regime::Imaginary, 22)] {
        let src = dressed(hyp21(), Regime::Real, 0.8, 1);
        let e = element(hyp21(), regime, 0.5, seed);
        let sh = sheet(&src, 21, &[e.alpha.value(), c(1.0)]);
        let seq = sequence(&sh);
        let r = ribaucour_apply(&seq, &sh, &e).unwrap();
        assert!(r.frame.data.iter().all(Option::is_some));
        assert!(r.formula_residual < 1e-12, "{:e}", r.formula_residual);
        assert!(r.equidistance.max() < 1e-8, "{:e}", r.equidistance.max());
        assert!(r.sphere_radius < 1e-8, "{:e}", r.sphere_radius);
        assert!(r.radius_covector < 1e-12);
        // transformed frames still satisfy the group condition and Y nullity
        assert!(r.frame.sheet.max_form_residual().0 < 1e-9);
        for s in &r.seq.sheets {
            for u in &s.u {
                assert!(s.shape.form_k(u, u).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn transformed_frame_blocks_follow_the_explicit_formulas() {
    let src = dressed(hyp21(), Regime::Real, 0.8, 1);
    let e = element(hyp21(), Regime::Imaginary, 0.5, 3);
    let sh = sheet(&src, 11, &[e.alpha.value()]);
    let rf = ribaucour_frame(&sh, &e).unwrap();
    let s = sh.shape;
    let j = s.j_matrix::<f64>();
    for node in 0..sh.grid.len() {
        let d = rf.data[node].as_ref().unwrap();
        let g1 = &sh.g1[node] * (DMatrix::identity(3, 3) - &d.q * d.q.transpose());
        let g2 = &sh.g2[node] * (DMatrix::identity(2, 2) + &d.z * d.z.transpose() * &j * d.zz_sign());
        assert!((&rf.sheet.g1[node] - g1).amax() < 1e-12);
        assert!((&rf.sheet.g2[node] - g2).amax() < 1e-12);
    }
}

#[test]
fn sphere_congruence_normals_align_to_second_order() {
    let src = dressed(hyp21(), Regime::Real, 0.8, 1);
    let e = element(hyp21(), Regime::Real, 0.5, 21);
    let mut worst = Vec::new();
    for nodes in [21, 41] {
        let sh = sheet(&src, nodes, &[e.alpha.value()]);
        let r = ribaucour_apply(&sequence(&sh), &sh, &e).unwrap();
        let seq = &r.seq;
        let align = r.sphere_alignment.unwrap();
        worst.push(align.max_where(|n| !seq.sheets.iter().any(|s| s.mask[n])));
    }
    let q = ratio(worst[0], worst[1]);
    assert!((3.0..=5.0).contains(&q), "{worst:?}");
}

#[test]
fn ribaucour_transforms_are_isothermic_with_preserved_curvature_lines() {
    let src = dressed(hyp21(), Regime::Real, 0.8, 1);
    let e = element(hyp21(), Regime::Imaginary, 0.5, 22);
    let mut fields = Vec::new();
    for nodes in [21, 41] {
        let sh = sheet(&src, nodes, &[e.alpha.value()]);
        let r = ribaucour_apply(&sequence(&sh), &sh, &e).unwrap();
        let s = &r.seq.sheets[0];
        let rep = verify_isothermic(s);
        fields.push((
            rep.diagonality.max_where(|n| !s.mask[n]),
            rep.curvature_line.unwrap().max_where(|n| !s.mask[n]),
        ));
        assert!(!verify_combescure(&r.seq).unwrap().near_degenerate);
    }
    assert!((3.0..=5.0).contains(&ratio(fields[0].0, fields[1].0)), "{fields:?}");
    assert!((3.0..=5.0).contains(&ratio(fields[0].1, fields[1].1)), "{fields:?}");
}

#[test]
fn ode_route_matches_frame_route() {
    for (regime, seed) in [(Regime::Real, 31), (Regime::Imaginary, 32)] {
        let src = dressed(hyp21(), Regime::Real, 0.8, 1);
        let e = element(hyp21(), regime, 0.6, seed);
        let sh = sheet(&src, 21, &[e.alpha.value()]);
        let ode = ribaucour_ode(&src, &sh.grid, e.alpha, &e.v, 0.005).unwrap();
        assert_eq!(ode.y[sh.grid.origin_flat()], e.v);
        assert!(ode.conservation < 1e-9, "{:e}", ode.conservation);
        let frame = frame_ribaucour_data(&sh, &e).unwrap();
        let worst = ode.data.iter().zip(&frame).map(|(a, b)| a.as_ref().unwrap().distance(b.as_ref().unwrap())).fold(0.0, f64::max);
        assert!(worst < 1e-7, "{worst:e}");
    }
}

#[test]
fn ribaucour_needs_alpha_in_the_sheet() {
    let src = dressed(hyp21(), Regime::Real, 0.8, 1);
    let e = element(hyp21(), Regime::Real, 0.5, 21);
    let sh = sheet(&src, 11, &[c(1.0)]);
    assert!(matches!(ribaucour_apply(&sequence(&sh), &sh, &e), Err(Error::MissingLambda(_))));
}

#[test]
fn commutation_identities() {
    let s = hyp21();
    let src = dressed(s, Regime::Real, 0.8, 1);
    let e = element(s, Regime::Real, 1.0, 21);
    let sh = sheet(&src, 21, &[c(1.0), c(0.5), c(1.0 / 3.0)]);
    let seq = sequence(&sh);
    let b = make_null_basis::<f64>(&s, None).unwrap();
    let to = NullBasis::new(&s, vec![&b.vectors[1] * 0.7, &b.vectors[0] * 1.3]).unwrap();
    for r in [1.0, 2.0, 3.0] {
        let rep = conjugation_check(&seq, &sh, &e, &to, r).unwrap();
        assert!(rep.christoffel_ribaucour < 1e-8, "{:e}", rep.christoffel_ribaucour);
        assert!(rep.lie < 1e-6, "r = {r}: {:e}", rep.lie);
    }
}

#[test]
fn wrong_lie_pairing_is_detected() {
    // R_{r alpha} instead of R_{alpha / r} on the right-hand side must not match
    let s = hyp21();
    let src = dressed(s, Regime::Real, 0.8, 1);
    let e = element(s, Regime::Real, 1.0, 21);
    let sh = sheet(&src, 21, &[c(1.0), c(0.5), c(2.0)]);
    let seq = sequence(&sh);
    let scaled = lie_transform(&ribaucour_apply(&lie_transform(&seq, 0.5).unwrap(), &lie_transform_sheet(&sh, 0.5).unwrap(), &e).unwrap().seq, 2.0).unwrap();
    let wrong = ribaucour_apply(&seq, &sh, &e.with_alpha(Alpha::Real(2.0))).unwrap().seq;
    let right = ribaucour_apply(&seq, &sh, &e.with_alpha(Alpha::Real(0.5))).unwrap().seq;
    let gap = |a: &isothermic_core::CombescureSequence<f64>| {
        a.sheets.iter().zip(&scaled.sheets).flat_map(|(x, y)| x.f.iter().zip(&y.f).map(|(p, q)| (p - q).amax())).fold(0.0, f64::max)
    };
    assert!(gap(&right) < 1e-12);
    assert!(gap(&wrong) > 1e-2);
}

#[test]
fn lie_transform_scales_the_underlying_solution() {
    let src = dressed(hyp21(), Regime::Imaginary, 0.9, 2);
    let sh = sheet(&src, 21, &[c(0.5)]);
    let seq = sequence(&sh);
    let same = lie_transform(&seq, 1.0).unwrap();
    assert_eq!(same.sheets[0].f, seq.sheets[0].f);
    let r = 2.5;
    let scaled = lie_transform(&seq, r).unwrap();
    // the metric field is resampled, not scaled: FD tangents of r f(x / r) equal those of f
    let a = verify_isothermic(&seq.sheets[0]);
    let b = verify_isothermic(&scaled.sheets[0]);
    let gap = a.metric.values.iter().zip(&b.metric.values).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()));
    assert!(gap < 1e-12, "{gap:e}");
    // v~(x) = v(x / r) / r, read off the inverted sequences
    let inv = invert_sequence(&seq).unwrap();
    let inv_scaled = invert_sequence(&scaled).unwrap();
    let grid = &scaled.sheets[0].grid;
    let base = inv.source.sample(&seq.sheets[0].grid).unwrap();
    let got = inv_scaled.source.sample(grid).unwrap();
    let exact = src.sample(&seq.sheets[0].grid).unwrap();
    let mut rounding: f64 = 0.0;
    let mut truth: f64 = 0.0;
    let mut base_error: f64 = 0.0;
    for node in 0..grid.len() {
        rounding = rounding.max(got[node].sub(&base[node].scale(1.0 / r)).max_abs());
        truth = truth.max(got[node].sub(&exact[node].scale(1.0 / r)).max_abs());
        base_error = base_error.max(base[node].sub(&exact[node]).max_abs());
    }
    assert!(rounding < 1e-10, "{rounding:e}");
    // the discretization error of the inversion scales with the solution
    assert!((truth - base_error / r).abs() < 1e-10, "{truth:e} vs {base_error:e}");
    assert!(matches!(lie_transform(&seq, -1.0), Err(Error::InvalidElement(_))));
}

#[test]
fn lie_sheet_relabels_spectral_values() {
    let src = dressed(hyp21(), Regime::Real, 0.8, 1);
    let sh = sheet(&src, 11, &[c(0.5)]);
    let t = lie_transform_sheet(&sh, 2.0).unwrap();
    assert!(t.lambda_index(c(0.25)).is_ok());
    assert!(cmax_abs(&(t.frame(c(0.25), 7).unwrap() - sh.frame(c(0.5), 7).unwrap())) == 0.0);
    assert_eq!(t.y[3], &sh.y[3] * 2.0);
}

#[test]
fn christoffel_recombination_agrees_with_resynthesis() {
    let s = SystemShape::hypersurface(3, 1).unwrap();
    let src = dressed(s, Regime::Real, 0.9, 5);
    let sh = sheet(&src, 9, &[c(0.5)]);
    let from = make_null_basis::<f64>(&s, None).unwrap();
    let to = make_null_basis::<f64>(&s, Some(3)).unwrap();
    let pair = christoffel_transform(&sh, &from, &to).unwrap();
    let recombined = recombine(&pair.from, &to).unwrap();
    for (a, b) in recombined.sheets.iter().zip(&pair.to.sheets) {
        for node in 0..a.f.len() {
            assert!((&a.f[node] - &b.f[node]).amax() < 1e-12);
            assert!((&a.u[node] - &b.u[node]).amax() < 1e-12);
        }
    }
    assert!(pair.classical.is_none());
}

#[test]
fn classical_christoffel_dual_is_parallel_and_reversed() {
    let s = hyp21();
    let src = dressed(s, Regime::Real, 0.8, 1);
    let b = make_null_basis::<f64>(&s, None).unwrap();
    let first = NullBasis::new(&s, vec![b.vectors[0].clone(), b.vectors[1].clone()]).unwrap();
    let dual = NullBasis::new(&s, vec![b.vectors[1].clone(), b.vectors[0].clone()]).unwrap();
    let mut par = Vec::new();
    for nodes in [21, 41] {
        let sh = sheet(&src, nodes, &[c(0.5)]);
        let pair = christoffel_transform(&sh, &first, &dual).unwrap();
        let cl = pair.classical.unwrap();
        let f = &pair.from.sheets[0];
        let g = &pair.to.sheets[0];
        let keep = |n: usize| !f.mask[n] && !g.mask[n];
        assert!(cl.orientation.iter().enumerate().filter(|(n, _)| keep(*n)).all(|(_, d)| *d < 0.0));
        par.push(cl.parallelism.max_where(keep));
    }
    assert!((3.0..=5.0).contains(&ratio(par[0], par[1])), "{par:?}");
}
