use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use vader_core::kinematics::{inverse_kinematics, IkConfig, JointConfig, KinematicChain};

fn within(chain: &KinematicChain, q: &JointConfig, target: &vader_core::RigidTransform) -> bool {
    let (dt, dr) = chain.forward_kinematics(q).distance_to(target);
    dt <= 2e-3 && dr <= 1e-2 && chain.within_limits(q)
}

#[test]
fn ik_from_random_seeds_reaches_random_targets() {
    let chain = KinematicChain::default_arm();
    let ok: usize = (0..200u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(i);
            let target = chain.forward_kinematics(&chain.random_config(&mut rng));
            let seed = chain.random_config(&mut rng);
            let cfg = IkConfig {
                seed: i,
                ..IkConfig::default()
            };
            usize::from(
                inverse_kinematics(&chain, &target, &seed, &cfg).is_ok_and(|q| within(&chain, &q, &target)),
            )
        })
        .sum();
    assert!(ok >= 190, "{ok}/200");
}

#[test]
fn ik_fk_round_trip() {
    let chain = KinematicChain::default_arm();
    let home = JointConfig::zeros(7);
    let failures: Vec<u64> = (0..500u64)
        .into_par_iter()
        .filter(|&i| {
            let mut rng = ChaCha8Rng::seed_from_u64(10_000 + i);
            let target = chain.forward_kinematics(&chain.random_config(&mut rng));
            !inverse_kinematics(&chain, &target, &home, &IkConfig::default())
                .is_ok_and(|q| within(&chain, &q, &target))
        })
        .collect();
    assert!(failures.is_empty(), "failed for {failures:?}");
}
