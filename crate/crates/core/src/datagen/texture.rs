//! Multi-octave value noise used as a textured background.

use rand::Rng;

const OCTAVES: usize = 4;

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// One `size×size` noise field in `[0, 1]`.
///
/// Octave `k` interpolates a random lattice with `2^(k+1)` cells per side;
/// amplitudes halve per octave.
pub fn value_noise<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Vec<f64> {
    let mut field = vec![0.0; size * size];
    let mut amplitude = 1.0;
    let mut total = 0.0;
    for k in 0..OCTAVES {
        let cells = 2usize << k;
        let lattice: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| rng.random::<f64>()).collect();
        let at = |r: usize, c: usize| lattice[r * (cells + 1) + c];
        for y in 0..size {
            let fy = y as f64 * cells as f64 / size as f64;
            let (ry, ty) = (fy as usize, smooth(fy.fract()));
            for x in 0..size {
                let fx = x as f64 * cells as f64 / size as f64;
                let (rx, tx) = (fx as usize, smooth(fx.fract()));
                let top = at(ry, rx) * (1.0 - tx) + at(ry, rx + 1) * tx;
                let bottom = at(ry + 1, rx) * (1.0 - tx) + at(ry + 1, rx + 1) * tx;
                field[y * size + x] += amplitude * (top * (1.0 - ty) + bottom * ty);
            }
        }
        total += amplitude;
        amplitude *= 0.5;
    }
    field.iter_mut().for_each(|v| *v /= total);
    field
}

/// Tinted `3×size×size` texture with channel values in `[0, 0.6]`.
pub fn tinted_texture<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Vec<f64> {
    let noise = value_noise(size, rng);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..=1.0));
    tint.iter().flat_map(|&t| noise.iter().map(move |&v| 0.6 * t * v)).collect()
}
