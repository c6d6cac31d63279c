//! Seeded inputs for the benchmarks in `benches/`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spectralnet::{standardize_bands, HsiCube, StandardizedCube};

pub fn uniform(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// A `side x side x bands` cube driven by three latent factors, four classes.
pub fn factor_cube(side: usize, bands: usize, seed: u64) -> StandardizedCube {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let loadings: Vec<f64> = (0..bands * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut data = Vec::with_capacity(side * side * bands);
    for _ in 0..side * side {
        let f: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        for b in 0..bands {
            let l = &loadings[b * 3..][..3];
            data.push(l[0] * f[0] + l[1] * f[1] + l[2] * f[2] + 0.3 * rng.random_range(-1.0..1.0));
        }
    }
    let labels = (0..side * side).map(|p| (p % 4) as u32 + 1).collect();
    let cube = HsiCube::new(side, side, bands, data, labels).expect("consistent cube");
    standardize_bands(&cube).expect("no constant band")
}
