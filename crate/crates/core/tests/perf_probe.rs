//! Coarse timing probe for the heavy numerical kernels
//! (`cargo test --release --test perf_probe -- --ignored --nocapture`).

use atlasforge_core::diffeo::{geodesic_shoot, multigrid_solve, OperatorSpec};
use atlasforge_core::geometry::{GridShape, VectorField};
use std::time::Instant;

#[test]
#[ignore]
fn timing_breakdown() {
    let shape = GridShape::<f64>::isotropic([32, 32, 32]);
    let spec = OperatorSpec::default_for([1.0; 3]);
    let mut u = VectorField::zeros(shape);
    for (j, [x, y, z]) in shape.iter_voxels() {
        let v = nalgebra::Vector3::new(
            0.3 * (x as f64 * 0.4).sin(),
            0.2 * (y as f64 * 0.5).cos(),
            0.1 * (z as f64 * 0.3).sin(),
        );
        u.set(j, v);
    }
    let t = Instant::now();
    let m = atlasforge_core::diffeo::apply_ltl(&u, &spec);
    println!("apply_ltl 32^3: {:?}", t.elapsed());
    let t = Instant::now();
    let _ = multigrid_solve(&m, &spec, &[], 1e-2, &Default::default()).unwrap();
    println!("multigrid_solve 32^3: {:?}", t.elapsed());
    let t = Instant::now();
    let _ = geodesic_shoot(&u, &spec, 8, &Default::default()).unwrap();
    println!("geodesic_shoot 32^3 x8: {:?}", t.elapsed());
}
