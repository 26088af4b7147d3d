mod support;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn hundred_seeds_without_violations() {
    for seed in 0..100 {
        let r = support::sched_sim::run(&mut ChaCha8Rng::seed_from_u64(seed));
        assert_eq!(r.violations(), 0, "seed {seed}: {r:?}");
    }
}
