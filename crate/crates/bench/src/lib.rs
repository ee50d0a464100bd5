//! Fixtures shared by the benchmarks.

use arapreg_core::genmodel::Generator;
use arapreg_core::toolkit::{BarParams, SyntheticFamilySpec};
use arapreg_core::Mesh;
use nalgebra::DMatrix;

/// The default 200-vertex bar at a mid-range pose.
pub fn bar() -> Mesh {
    let spec = SyntheticFamilySpec::default();
    spec.bar_mesh(&BarParams {
        bend: 0.3,
        length_scale: 1.0,
        radius_scale: 1.0,
    })
    .expect("default bar is valid")
}

/// A small MLP generator centred on `mesh`.
pub fn generator(mesh: &Mesh, latent_dim: usize) -> Generator {
    let mut gen = Generator::mlp(latent_dim, &[64], 3 * mesh.n_vertices(), 7).expect("valid architecture");
    gen.set_output_offset(&mesh.positions()).expect("offset matches output");
    gen
}

/// Deterministic dense `3n × k` Jacobian.
pub fn jacobian(mesh: &Mesh, k: usize) -> DMatrix<f64> {
    DMatrix::from_fn(3 * mesh.n_vertices(), k, |i, j| {
        ((i * 31 + j * 17) % 13) as f64 / 13.0 - 0.5
    })
}
