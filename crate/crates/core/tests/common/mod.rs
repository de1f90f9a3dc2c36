#![allow(dead_code)]

use aesindy::sindy::{build_polynomial_library, CoefficientMatrix, LatentModel, ParamMap, ParamTransform};
use nalgebra::DMatrix;

fn set_by_name(names: &[String], xi: &mut DMatrix<f64>, name: &str, col: usize, v: f64) {
    let k = names
        .iter()
        .position(|n| n == name)
        .unwrap_or_else(|| panic!("no feature {name}"));
    xi[(k, col)] = v;
}

/// Published latent model of the forced beam; parameters (F, ω).
pub fn beam_model() -> LatentModel {
    let lib = build_polynomial_library(2, 0, 3, false, &[(0, 1)]).unwrap();
    let names = lib.names();
    let mut xi = DMatrix::zeros(lib.len(), 2);
    let mut set = |name: &str, col: usize, v: f64| set_by_name(&names, &mut xi, name, col, v);
    set("z2", 0, 1.0);
    set("z1", 1, -0.3);
    set("z2", 1, -0.011);
    set("z1^2", 1, 0.003);
    set("z2^2", 1, -0.012);
    set("z1^3", 1, -0.113);
    set("z1^2*z2", 1, 0.036);
    set("z1*z2^2", 1, 0.719);
    set("z2^3", 1, -0.051);
    set("b1*cos(b2*t)", 1, -0.009);
    LatentModel::new(lib, CoefficientMatrix::fixed(xi), ParamTransform::identity(&["F", "omega"])).unwrap()
}

/// Ξ of the cylinder-wake latent model, one column per equation, features
/// in graded-lexicographic order over (z1, z2, z3, β).
pub const FLUID_XI: [[f64; 35]; 3] = [
    [
        2.23, 0.0, 3.44, 61.8, -0.25, 0.0, -4.17, 0.0, 0.0, 0.0, -8.15, -0.43, -7.55, -29.5, -8.15, 0.0, -33.6, 111.3,
        -1175.1, 0.14, -142.5, 1449.0, -3.38, -687.0, 0.0, 4.58, -565.0, 0.0, 408.2, -18.5, 0.0, -262.1, 7.91, 0.0, 0.0,
    ],
    [
        10.81, -89.0, 112.5, -67.5, 0.0, 327.2, -623.2, 82.17, -2.68, 244.7, -54.0, -1.49, -3.79, -23.0, 3.96, 0.0,
        -734.1, 1309.0, -187.5, 12.5, -781.0, 0.0, -2.23, 0.0, 0.0, 151.5, 113.0, -2.51, -85.9, 6.78, 0.0, 47.3, 1.26,
        0.0, 0.0,
    ],
    [
        0.0, -35.4, -16.1, 0.0, 0.04, 229.2, -61.2, 81.9, 2.34, -7.41, 1.46, 1.77, 31.0, 11.8, 0.0, 0.0, 0.0, 154.1,
        217.0, -12.4, -153.8, -10.9, 0.0, 0.0, 0.0, 94.4, -121.0, 4.03, 139.7, -2.4, 0.0, -58.5, 0.77, 0.0, 0.0,
    ],
];

/// Cylinder-wake latent model in `Re`, seen by the library as `β = 10³/Re`.
pub fn fluid_model() -> LatentModel {
    let lib = build_polynomial_library(3, 1, 3, true, &[]).unwrap();
    assert_eq!(lib.len(), 35);
    let xi = DMatrix::from_fn(35, 3, |k, j| FLUID_XI[j][k]);
    let transform = ParamTransform {
        names: vec!["Re".into()],
        maps: vec![ParamMap::Reciprocal { scale: 1e3 }],
    };
    LatentModel::new(lib, CoefficientMatrix::fixed(xi), transform).unwrap()
}

/// Stuart–Landau normal form with unit frequency; parameter µ.
pub fn stuart_landau_model() -> LatentModel {
    let lib = build_polynomial_library(2, 1, 3, false, &[]).unwrap();
    let names = lib.names();
    let mut xi = DMatrix::zeros(lib.len(), 2);
    let mut set = |name: &str, col: usize, v: f64| set_by_name(&names, &mut xi, name, col, v);
    set("z1*b1", 0, 1.0);
    set("z2", 0, -1.0);
    set("z1^3", 0, -1.0);
    set("z1*z2^2", 0, -1.0);
    set("z1", 1, 1.0);
    set("z2*b1", 1, 1.0);
    set("z1^2*z2", 1, -1.0);
    set("z2^3", 1, -1.0);
    LatentModel::new(lib, CoefficientMatrix::fixed(xi), ParamTransform::identity(&["mu"])).unwrap()
}

/// `z̈ + (ω₀/Q)ż + ω₀²z + γz³ = F cos(ωt)` on the beam library; parameters (F, ω).
pub fn duffing_model(omega0: f64, q: f64, gamma: f64) -> LatentModel {
    let lib = build_polynomial_library(2, 0, 3, false, &[(0, 1)]).unwrap();
    let names = lib.names();
    let mut xi = DMatrix::zeros(lib.len(), 2);
    let mut set = |name: &str, col: usize, v: f64| set_by_name(&names, &mut xi, name, col, v);
    set("z2", 0, 1.0);
    set("z1", 1, -omega0 * omega0);
    set("z2", 1, -omega0 / q);
    set("z1^3", 1, -gamma);
    set("b1*cos(b2*t)", 1, 1.0);
    LatentModel::new(lib, CoefficientMatrix::fixed(xi), ParamTransform::identity(&["F", "omega"])).unwrap()
}
