use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use smartbsp::nn::PolicyPair;
use smartbsp::planner::PolicySet;

/// Networks whose modal action is a fixed fan: network `k` steers every
/// control point into angular row `k - 1`, independent of the grid.
pub fn fan_policies() -> PolicySet {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pairs = (1..=5)
        .map(|k| {
            let mut pair = PolicyPair::init(5, k, &mut rng);
            let head_w = &pair.actor.architecture().layers()[6];
            let (w0, len) = (head_w.offset, head_w.len());
            let params = pair.actor.params_mut();
            params[w0..w0 + len].fill(0.0);
            for row in 0..5 {
                for col in 0..5 {
                    params[w0 + len + row * 5 + col] = if row == k - 1 { 3.0 } else { 0.0 };
                }
            }
            pair
        })
        .collect();
    PolicySet::new(pairs, 5).unwrap()
}
