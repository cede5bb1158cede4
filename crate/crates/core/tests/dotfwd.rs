use ucos_core::dotfwd::{
    forward_data, jacobian, simulate_difference_data, Geometry, Instrument, NoiseModel,
    OpticalField,
};
use ucos_core::operator::{adjoint_mismatch, LinearOperator};
use ucos_core::phantom::{generate_phantom, PhantomSpec};
use ucos_core::rng::master_rng;
use ucos_core::PixelGrid;

fn l2(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[test]
fn homogeneous_data_converge_at_second_order() {
    // patches centred on the edge midpoints, with edges on face boundaries at
    // every resolution
    let l = 16.0;
    let inst = Instrument::interleaved(l, 2, 1.0, 2.0, 2.0, 100e6);
    let data: Vec<Vec<f64>> = [16, 32, 64, 128]
        .iter()
        .map(|&n| {
            let o = OpticalField::homogeneous(PixelGrid::square(n, l).unwrap(), 0.01, 1.0).unwrap();
            forward_data(&o, &inst).unwrap().values
        })
        .collect();
    let diff = |a: &[f64], b: &[f64]| l2(&a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>());
    for k in 0..2 {
        let ratio = diff(&data[k], &data[k + 1]) / diff(&data[k + 1], &data[k + 2]);
        assert!((3.0..=5.0).contains(&ratio), "refinement ratio {ratio}");
    }
}

#[test]
fn jacobian_columns_match_nonlinear_differences() {
    let grid = PixelGrid::square(16, 50.0).unwrap();
    let bg = OpticalField::homogeneous(grid, 0.01, 1.0).unwrap();
    let inst = Instrument::interleaved(50.0, 4, 1.0, 1.0, 1.0, 100e6);
    let j = jacobian(&bg, &inst).unwrap();
    let base = forward_data(&bg, &inst).unwrap();
    let h = 1e-6;
    let zeros = vec![0.0; 256];
    for pixel in [0, 17, 100, 136, 255] {
        let mut e = zeros.clone();
        e[pixel] = h;
        for (channel, mat) in [(0, j.mua.matrix()), (1, j.mus.matrix())] {
            let pert = if channel == 0 {
                bg.perturbed(&e, &zeros)
            } else {
                bg.perturbed(&zeros, &e)
            }
            .unwrap();
            let fd: Vec<f64> = forward_data(&pert, &inst)
                .unwrap()
                .difference(&base)
                .unwrap()
                .iter()
                .map(|v| v / h)
                .collect();
            let col: Vec<f64> = mat.column(pixel).iter().copied().collect();
            let err = l2(&fd.iter().zip(&col).map(|(a, b)| a - b).collect::<Vec<_>>());
            assert!(
                err <= 1e-3 * l2(&col),
                "pixel {pixel} channel {channel}: {err:e}"
            );
        }
    }
}

#[test]
fn symmetric_pair_has_mirror_symmetric_sensitivity() {
    let n = 16;
    let grid = PixelGrid::square(n, 40.0).unwrap();
    let bg = OpticalField::homogeneous(grid, 0.01, 1.0).unwrap();
    // one source mid-bottom, one detector mid-top
    let inst = Instrument::interleaved(40.0, 1, 1.0, 1.0, 1.0, 100e6);
    let j = jacobian(&bg, &inst).unwrap();
    for mat in [j.mua.matrix(), j.mus.matrix()] {
        for row in mat.row_iter() {
            let scale = row.amax();
            for i in 0..n {
                for c in 0..n {
                    let a = row[i * n + c];
                    let b = row[i * n + n - 1 - c];
                    assert!((a - b).abs() <= 1e-8 * scale);
                }
            }
        }
    }
}

#[test]
fn rescaled_jacobian_passes_adjoint_test() {
    let bg = Geometry::LimitedView.background(12).unwrap();
    let j = jacobian(&bg, &Geometry::LimitedView.instrument()).unwrap();
    let a = j.rescaled().unwrap();
    assert_eq!(a.operator.domain().channels, 2);
    assert!(adjoint_mismatch(&a.operator, 5, &mut master_rng(2)) < 1e-12);
}

#[test]
fn distinct_data_and_inversion_grids() {
    let geom = Geometry::FullView;
    let inst = geom.instrument();
    let fine = jacobian(&geom.background(17).unwrap(), &inst).unwrap();
    let coarse_grid = PixelGrid::square(16, geom.extent()).unwrap();
    let data_op = fine
        .resampled_from(&coarse_grid)
        .unwrap()
        .rescaled()
        .unwrap();
    let inv_op = jacobian(&geom.background(16).unwrap(), &inst)
        .unwrap()
        .rescaled()
        .unwrap();
    assert_eq!(data_op.operator.domain(), inv_op.operator.domain());

    let spec = PhantomSpec {
        grid: coarse_grid,
        ..Default::default()
    };
    let x = generate_phantom(&spec, &mut master_rng(4));
    let y_data = simulate_difference_data(&x, &data_op.operator, &NoiseModel::none(), 0).unwrap();
    let y_inv = inv_op.operator.apply(&x).unwrap();
    let gap = l2(&y_data
        .iter()
        .zip(&y_inv)
        .map(|(a, b)| a - b)
        .collect::<Vec<_>>())
        / l2(&y_inv);
    // the two discretisations agree closely but not exactly
    assert!(gap > 1e-6 && gap < 0.2, "relative gap {gap}");

    let noisy = simulate_difference_data(&x, &data_op.operator, &NoiseModel::default(), 1).unwrap();
    let again = simulate_difference_data(&x, &data_op.operator, &NoiseModel::default(), 1).unwrap();
    assert_eq!(noisy, again);
}

#[test]
fn experimental_profile_solves() {
    let geom = Geometry::Experimental;
    let data = forward_data(&geom.background(16).unwrap(), &geom.instrument()).unwrap();
    assert_eq!(data.values.len(), 2 * 16 * 16);
    assert!(data.values.iter().all(|v| v.is_finite()));
}
