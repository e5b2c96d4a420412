//! The discrete linear solver against closed forms.

use proptest::prelude::*;
use wavemap::fields::transport_plus;
use wavemap::linear_wave::dalembert_solve;
use wavemap::{CellField, ManifoldData, NullLattice};

fn lattice(n: usize, m: usize) -> NullLattice<f64> {
    NullLattice::new(2.0 / n as f64, n, m, 0.0, -1.0).unwrap()
}

proptest! {
    // with v0 = 0 and no source, u(t, x) = ½(u0(x + t) + u0(x − t)) exactly at nodes
    #[test]
    fn dalembert_averages_the_endpoints(vals in prop::collection::vec(-4.0f64..4.0, 17), m in 0usize..=16) {
        let n = 16;
        let l = lattice(n, m);
        let d = ManifoldData::new(1, l.h, -1.0, vals.clone(), vec![0.0; n]).unwrap();
        let u = dalembert_solve(&d, &CellField::zeros(l, 1)).unwrap();
        for k in 0..=m {
            for q in 0..=n - k {
                let want = 0.5 * (vals[q + k] + vals[q]);
                prop_assert_eq!(u.at(k, q)[0], want);
            }
        }
    }

    // a constant source c gives u = u0 + c·t²/2 for constant u0
    #[test]
    fn constant_source_is_quadratic_in_time(c in -3.0f64..3.0, u0 in -1.0f64..1.0) {
        let n = 16;
        let l = lattice(n, n);
        let d = ManifoldData::from_fns(1, l.h, -1.0, n, |_| vec![u0], |_| vec![0.0]);
        let f = CellField::from_fn(l, 1, |_, _| vec![c]);
        let u = dalembert_solve(&d, &f).unwrap();
        for k in 0..=n {
            let t = l.t_of(k);
            for q in 0..=n - k {
                prop_assert!((u.at(k, q)[0] - (u0 + 0.5 * c * t * t)).abs() < 1e-13);
            }
        }
    }

    // v₊ grows linearly along columns under a constant source
    #[test]
    fn transport_is_exact_for_constant_sources(c in -3.0f64..3.0, g in prop::collection::vec(-2.0f64..2.0, 8)) {
        let n = 8;
        let l = lattice(n, n);
        let f = CellField::from_fn(l, 1, |_, _| vec![c]);
        let v = transport_plus(&g, &f);
        for cell in l.cells() {
            let verts = l.cell_vertices(cell);
            for (i, (t, _)) in verts.iter().enumerate() {
                let want = g[cell.q] + c * t;
                prop_assert!((v.vertex(cell.index, i)[0] - want).abs() < 1e-13);
            }
        }
    }
}
