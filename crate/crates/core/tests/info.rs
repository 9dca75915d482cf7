use proptest::prelude::*;
use relblend::milab::{vars, DiscreteJoint, A1, A2, B1, B2};

fn joint() -> impl Strategy<Value = DiscreteJoint> {
    (
        proptest::array::uniform4(1usize..=4),
        any::<u64>(),
        any::<u64>(),
    )
        .prop_map(|(sizes, seed, trial)| {
            DiscreteJoint::random_dirichlet(sizes, seed, trial).unwrap()
        })
}

proptest! {
    #[test]
    fn information_is_nonnegative_and_symmetric(j in joint()) {
        let sets = [vars(&[A1]), vars(&[A2]), vars(&[B1]), vars(&[B2]), vars(&[A1, B2])];
        for &x in &sets {
            for &y in &sets {
                if x & y != 0 {
                    continue;
                }
                let xy = j.mutual_info(x, y).unwrap();
                prop_assert!(xy >= -1e-12);
                prop_assert_eq!(xy.to_bits(), j.mutual_info(y, x).unwrap().to_bits());
                for &z in &sets {
                    if z & (x | y) == 0 {
                        prop_assert!(j.cond_mutual_info(x, y, z).unwrap() >= -1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn identities_hold(j in joint()) {
        prop_assert!(j.verify_decomposition().unwrap() <= 1e-10);
        prop_assert!(j.verify_chain_rule(vars(&[A1]), vars(&[B2]), vars(&[A2, B1])).unwrap() <= 1e-10);
    }
}

#[test]
fn independent_pair_has_zero_information() {
    let j = DiscreteJoint::from_fn([3, 2, 1, 1], |[a, b, ..]| {
        [0.2, 0.5, 0.3][a] * [0.4, 0.6][b]
    })
    .unwrap();
    assert!(j.mutual_info(vars(&[A1]), vars(&[A2])).unwrap().abs() < 1e-15);
    // H(A1) by hand
    let h: f64 = [0.2f64, 0.5, 0.3].iter().map(|p| -p * p.ln()).sum();
    assert!((j.entropy(vars(&[A1])).unwrap() - h).abs() < 1e-15);
}
