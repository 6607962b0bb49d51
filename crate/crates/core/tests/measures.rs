use mfg_core::forward_sim::{InitialLaw, NoiseBundle, TimeGrid};
use mfg_core::measures::{w2, EmpiricalMeasure, MeasureMoments};
use mfg_core::model::ModelSpec;
use proptest::prelude::*;

/// All permutations of `0..n` (Heap's algorithm).
fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn heap(k: usize, a: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k <= 1 {
            out.push(a.clone());
            return;
        }
        for i in 0..k {
            heap(k - 1, a, out);
            let j = if k % 2 == 0 { i } else { 0 };
            a.swap(j, k - 1);
        }
    }
    let mut out = Vec::new();
    heap(n, &mut (0..n).collect(), &mut out);
    out
}

/// Minimum over permutation couplings, each summed in the order of the
/// sorted first measure, as the sorted coupling is.
fn brute_force_w2(a: &[f64], b: &[f64]) -> f64 {
    let mut sa = a.to_vec();
    sa.sort_by(f64::total_cmp);
    let n = a.len() as f64;
    permutations(a.len())
        .iter()
        .map(|p| sa.iter().zip(p).map(|(x, &i)| (x - b[i]) * (x - b[i])).sum::<f64>() / n)
        .fold(f64::INFINITY, f64::min)
        .sqrt()
}

fn measure(v: Vec<f64>) -> EmpiricalMeasure {
    EmpiricalMeasure::new(v).unwrap()
}

fn atoms(n: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<f64>> {
    n.prop_flat_map(|k| prop::collection::vec(-10.0..10.0f64, k))
}

/// Atoms on a dyadic lattice, where every operation is exact.
fn dyadic(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((-64i32..64).prop_map(|i| i as f64 / 8.0), k)
}

proptest! {
    #[test]
    fn sorted_coupling_is_the_permutation_minimum(
        (a, b) in (1usize..=6).prop_flat_map(|k| (prop::collection::vec(-10.0..10.0f64, k), prop::collection::vec(-10.0..10.0f64, k)))
    ) {
        let d = w2(&measure(a.clone()), &measure(b.clone())).unwrap();
        prop_assert_eq!(d, brute_force_w2(&a, &b));
    }

    #[test]
    fn sorted_coupling_is_exact_on_a_lattice((a, b) in (1usize..=6).prop_flat_map(|k| (dyadic(k), dyadic(k)))) {
        let d = w2(&measure(a.clone()), &measure(b.clone())).unwrap();
        prop_assert_eq!(d, brute_force_w2(&a, &b));
    }

    #[test]
    fn w2_is_a_metric(
        (a, b, c) in (1usize..=8).prop_flat_map(|k| (
            prop::collection::vec(-10.0..10.0f64, k),
            prop::collection::vec(-10.0..10.0f64, k),
            prop::collection::vec(-10.0..10.0f64, k),
        ))
    ) {
        let (ma, mb, mc) = (measure(a.clone()), measure(b), measure(c));
        let ab = w2(&ma, &mb).unwrap();
        prop_assert_eq!(ab, w2(&mb, &ma).unwrap());
        prop_assert_eq!(w2(&ma, &ma).unwrap(), 0.0);
        let mut shuffled = a;
        shuffled.reverse();
        prop_assert_eq!(w2(&ma, &measure(shuffled)).unwrap(), 0.0);
        prop_assert!(ab <= w2(&ma, &mc).unwrap() + w2(&mc, &mb).unwrap() + 1e-10);
    }

    #[test]
    fn w2_is_translation_invariant((a, b) in (1usize..=8).prop_flat_map(|k| (
        prop::collection::vec(-10.0..10.0f64, k),
        prop::collection::vec(-10.0..10.0f64, k),
    )), c in -5.0..5.0f64) {
        let (ma, mb) = (measure(a), measure(b));
        let shifted = w2(&ma.translate(c), &mb.translate(c)).unwrap();
        prop_assert!((shifted - w2(&ma, &mb).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn moments_ignore_labels(a in atoms(1..=12), seed in any::<u64>()) {
        let mut b = a.clone();
        // a deterministic shuffle from the seed
        let n = b.len();
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            b.swap(i, (s >> 33) as usize % (i + 1));
        }
        prop_assert_eq!(MeasureMoments::from_atoms(&a), MeasureMoments::from_atoms(&b));
    }

    #[test]
    fn own_atom_mixing_matches_the_pooled_measure(others in atoms(1..=9), x in -5.0..5.0f64, y in -5.0..5.0f64) {
        let n = others.len() + 1;
        let w = 1.0 / n as f64;
        let base = MeasureMoments::from_atoms(&others);
        let mut pooled = others.clone();
        pooled.push(x);
        let direct = MeasureMoments::from_atoms(&pooled);
        let mixed = base.with_atom(x, w);
        prop_assert!((mixed.mean - direct.mean).abs() <= 1e-12);
        prop_assert!((mixed.second_moment - direct.second_moment).abs() <= 1e-10);
        let moved = mixed.move_atom(x, y, w);
        let again = base.with_atom(y, w);
        prop_assert!((moved.mean - again.mean).abs() <= 1e-12);
        prop_assert!((moved.second_moment - again.second_moment).abs() <= 1e-10);
    }
}

#[test]
fn brute_force_enumerates_every_permutation() {
    assert_eq!(permutations(4).len(), 24);
    let mut p = permutations(3);
    p.sort();
    p.dedup();
    assert_eq!(p.len(), 6);
}

/// The conditional laws of two ensembles driven by the same noise are no
/// further apart in W2² than the particles themselves, path by path.
#[test]
fn conditional_w2_is_dominated_by_particle_distance() {
    use mfg_core::forward_sim::{simulate_forward, ControlRule};
    let spec = ModelSpec::preset_default("mean_reverting").unwrap();
    let noise = NoiseBundle::new(7, 8, 64, TimeGrid::new(1.0, 20).unwrap()).unwrap();
    let (e1, f1) = simulate_forward(&spec, ControlRule::Zero, &noise, &InitialLaw::Normal { mean: 0.0, std: 1.0 }).unwrap();
    let (e2, f2) = simulate_forward(&spec, ControlRule::Zero, &noise, &InitialLaw::Normal { mean: 0.5, std: 2.0 }).unwrap();
    for n in [0, 10, 20] {
        let (mut lhs, mut rhs) = (0.0, 0.0);
        for j in 0..noise.paths() {
            lhs += w2(f1.measure(n, j), f2.measure(n, j)).unwrap().powi(2);
            let (a, b) = (e1.states.slice(j, n), e2.states.slice(j, n));
            rhs += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
        }
        assert!(lhs <= rhs + 1e-12, "step {n}: {lhs} > {rhs}");
    }
}
