mod support;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::relay_sim::{exhaustive, random_schedule};

#[test]
fn short_traces_exhaustively() {
    let (checked, bad) = exhaustive(9, 6);
    assert!(checked > 10_000, "only {checked} traces");
    assert_eq!(bad, 0);
}

proptest! {
    #[test]
    fn random_reconnect_schedules_lose_and_repeat_nothing(seed in any::<u64>(), steps in 1usize..300) {
        let v = random_schedule(&mut ChaCha8Rng::seed_from_u64(seed), steps);
        prop_assert!(v.clean(), "{:?}", v);
    }
}
