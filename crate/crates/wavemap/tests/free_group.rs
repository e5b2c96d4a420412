//! The free group on grid data.

use proptest::prelude::*;
use wavemap::scattering::{free_wave, group_action_half};
use wavemap::ManifoldData;

fn data(c: &[f64]) -> ManifoldData<f64> {
    let (a, b, w) = (c[0], c[1], c[2]);
    ManifoldData::from_fns(1, 0.0625, -1.0, 32, move |x: f64| vec![a * (w * x).sin()], move |x: f64| vec![b * x])
}

proptest! {
    // S(−s)S(s) = id on the original grid, for half-integer s as well
    #[test]
    fn group_inverse_at_half_steps(k in 1i64..30, c in prop::collection::vec(-2.0f64..2.0, 3)) {
        let d = data(&c);
        let pad = (k + 1) / 2 + 1;
        let fwd = group_action_half(&d, k, -k - pad, 32 + 2 * (k + pad) as usize);
        let back = group_action_half(&fwd, -k, pad + k, 32);
        prop_assert!((back.x_start - d.x_start).abs() < 1e-14);
        for (a, b) in back.u0.iter().zip(&d.u0) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in back.v0.iter().zip(&d.v0) {
            prop_assert!((a - b).abs() < 1e-11);
        }
    }

    // S(s)S(r) = S(s + r); the grids are exact images of each other, so
    // the composition is exact up to rounding
    #[test]
    fn group_composes(k1 in -8i64..8, k2 in -8i64..8, c in prop::collection::vec(-2.0f64..2.0, 3)) {
        let d = data(&c);
        let mid = group_action_half(&d, k1, -20, 72);
        let twice = group_action_half(&mid, k2, 10, 16);
        let once = group_action_half(&d, k1 + k2, -10, 16);
        prop_assert!((once.x_start - twice.x_start).abs() < 1e-12);
        for (a, b) in once.u0.iter().zip(&twice.u0) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in once.v0.iter().zip(&twice.v0) {
            prop_assert!((a - b).abs() < 1e-11);
        }
    }
}

#[test]
fn free_wave_of_a_gaussian_splits_in_two() {
    let d = ManifoldData::from_fns(1, 0.0625, -6.0, 192, |x: f64| vec![(-4.0 * x * x).exp()], |_| vec![0.0]);
    let s = free_wave(&d, 3.0).unwrap();
    // node i of the slice is x = −6 + i/16; peaks of height ½ at x = ±3
    assert!((s.u[48] - 0.5).abs() < 1e-6);
    assert!((s.u[144] - 0.5).abs() < 1e-6);
    assert!(s.u[96].abs() < 1e-6);
}
