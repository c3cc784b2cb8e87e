mod common;

use common::{gradient_error, kink_distance, random_network};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;

#[test]
fn analytic_gradients_match_central_differences() {
    let mut checked = 0;
    let mut seed = 0;
    while checked < 100 {
        seed += 1;
        assert!(seed < 10_000, "too few networks derive facts");
        let Some((model, net)) = random_network(seed) else { continue };
        let params = model.store().values().to_vec();
        if kink_distance(&net, &params) < 1e-4 {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coeffs: Vec<f64> = (0..net.outputs().len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let err = gradient_error(&net, &params, &coeffs, H);
        assert!(err < 1e-4, "seed {seed}: relative error {err}");
        checked += 1;
    }
}
