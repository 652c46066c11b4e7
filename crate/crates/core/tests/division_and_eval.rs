use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use rml::division::{consensus, divide, fit_gmm, min_max_normalize, posterior_clean, GmmParams};
use rml::eval::{evaluate, joint_similarity, RetrievalResult};
use rml::math::{rng_from, Matrix};

fn two_clusters(seed: u64) -> (Vec<f64>, Vec<bool>) {
    let mut rng = rng_from(seed);
    let lo = Normal::new(0.2, 0.05).unwrap();
    let hi = Normal::new(0.8, 0.05).unwrap();
    let mut xs = Vec::new();
    let mut clean = Vec::new();
    for _ in 0..500 {
        xs.push(lo.sample(&mut rng));
        clean.push(true);
        xs.push(hi.sample(&mut rng));
        clean.push(false);
    }
    (xs, clean)
}

#[test]
fn gmm_recovers_two_separated_clusters() {
    let (xs, clean) = two_clusters(3);
    let fit = fit_gmm(&xs).unwrap();
    let p = fit.params;
    assert!((p.means[0] - 0.2).abs() < 0.02 && (p.means[1] - 0.8).abs() < 0.02);
    assert!((p.weights[0] - 0.5).abs() < 0.05);
    assert!((p.weights[0] + p.weights[1] - 1.0).abs() < 1e-9);
    for w in fit.log_likelihoods.windows(2) {
        assert!(w[1] >= w[0] - 1e-10);
    }
    let post: Vec<f64> = xs.iter().map(|&x| posterior_clean(&p, x)).collect();
    let d = divide(&post, 0.5).unwrap();
    let correct = (0..xs.len())
        .filter(|i| d.clean.contains(i) == clean[*i])
        .count();
    assert!(correct as f64 / xs.len() as f64 >= 0.99);
}

#[test]
fn gmm_on_a_single_cluster_stays_near_it() {
    let mut rng = rng_from(9);
    let n = Normal::new(0.5, 0.05).unwrap();
    let xs: Vec<f64> = (0..1000).map(|_| n.sample(&mut rng)).collect();
    let fit = fit_gmm(&xs).unwrap();
    for m in fit.params.means {
        assert!((m - 0.5).abs() < 0.05);
    }
}

#[test]
fn fit_is_deterministic() {
    let (xs, _) = two_clusters(4);
    assert_eq!(fit_gmm(&xs).unwrap(), fit_gmm(&xs).unwrap());
}

#[test]
fn far_components_give_confident_posteriors() {
    let p = GmmParams {
        weights: [0.5, 0.5],
        means: [0.1, 0.9],
        variances: [0.01, 0.01],
    };
    assert!(posterior_clean(&p, 0.1) > 0.99);
    assert!((p.posterior_clean(0.5) - 0.5).abs() < 1e-12);
}

#[test]
fn min_max_maps_extremes() {
    assert_eq!(min_max_normalize(&[0.2, 0.8]).0, vec![0.0, 1.0]);
}

proptest! {
    #[test]
    fn posteriors_are_complementary(
        w in 0.01f64..0.99, m0 in -1.0f64..1.0, dm in 0.01f64..1.0,
        v0 in 1e-4f64..1.0, v1 in 1e-4f64..1.0, x in -2.0f64..2.0,
    ) {
        let p = GmmParams { weights: [w, 1.0 - w], means: [m0, m0 + dm], variances: [v0, v1] };
        let c = p.posterior_clean(x);
        prop_assert!((0.0..=1.0).contains(&c));
        prop_assert!((c + p.posterior_noisy(x) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn divide_is_monotone(post in prop::collection::vec(0.0f64..=1.0, 1..40), idx in 0usize..40, bump in 0.0f64..1.0) {
        let i = idx % post.len();
        let before = divide(&post, 0.5).unwrap();
        let mut raised = post.clone();
        raised[i] = (raised[i] + bump).min(1.0);
        let after = divide(&raised, 0.5).unwrap();
        if before.clean.contains(&i) {
            prop_assert!(after.clean.contains(&i));
        }
    }

    #[test]
    fn consensus_partitions_and_reproduces(
        a in prop::collection::vec(0.0f64..=1.0, 1..60),
        b_seed in any::<u64>(), seed in any::<u64>(),
    ) {
        let mut r = rng_from(b_seed);
        let b: Vec<f64> = (0..a.len()).map(|_| r.random_range(0.0..=1.0)).collect();
        let da = divide(&a, 0.5).unwrap();
        let db = divide(&b, 0.5).unwrap();
        let c1 = consensus(&da, &db, &mut rng_from(seed)).unwrap();
        let c2 = consensus(&da, &db, &mut rng_from(seed)).unwrap();
        prop_assert_eq!(&c1, &c2);
        let n = a.len();
        let mut seen = vec![0u8; n];
        for &i in c1.clean.iter().chain(&c1.noisy).chain(&c1.uncertain) {
            seen[i] += 1;
        }
        prop_assert!(seen.iter().all(|&s| s == 1));
        for &i in &c1.clean {
            prop_assert!(c1.recalibrated[i] && a[i] > 0.5 && b[i] > 0.5);
        }
        for &i in &c1.noisy {
            prop_assert!(!c1.recalibrated[i] && a[i] <= 0.5 && b[i] <= 0.5);
        }
    }
}

/// Brute force: for each relevant item, count the gallery items strictly
/// above it, plus the tied ones with a lower index.
fn oracle(sims: &Matrix, rel: &[Vec<bool>]) -> (Vec<f64>, f64, f64) {
    let (q, g) = sims.shape();
    let mut ranks_k = vec![0.0; 3];
    let (mut ap, mut inp) = (0.0, 0.0);
    for qi in 0..q {
        let s = sims.row(qi);
        let pos = |j: usize| (0..g).filter(|&k| s[k] > s[j] || (s[k] == s[j] && k < j)).count() + 1;
        let mut ps: Vec<usize> = (0..g).filter(|&j| rel[qi][j]).map(pos).collect();
        ps.sort_unstable();
        for (slot, k) in [1usize, 5, 10].iter().enumerate() {
            if ps[0] <= *k {
                ranks_k[slot] += 1.0;
            }
        }
        ap += ps.iter().enumerate().map(|(n, &p)| (n + 1) as f64 / p as f64).sum::<f64>() / ps.len() as f64;
        inp += ps.len() as f64 / *ps.last().unwrap() as f64;
    }
    (ranks_k.iter().map(|x| x / q as f64).collect(), ap / q as f64, inp / q as f64)
}

fn random_instance(rng: &mut impl Rng, q: usize, g: usize, levels: Option<u32>) -> (Matrix, Vec<Vec<bool>>) {
    let sims = Matrix::from_fn(q, g, |_, _| match levels {
        Some(l) => rng.random_range(0..l) as f64 / l as f64,
        None => rng.random_range(-1.0..1.0),
    });
    let rel = (0..q)
        .map(|_| {
            let mut r: Vec<bool> = (0..g).map(|_| rng.random_bool(0.15)).collect();
            let forced = rng.random_range(0..g);
            r[forced] = true;
            r
        })
        .collect();
    (sims, rel)
}

fn same(r: &RetrievalResult, o: &(Vec<f64>, f64, f64)) -> bool {
    r.rank1 == o.0[0] && r.rank5 == o.0[1] && r.rank10 == o.0[2] && (r.map - o.1).abs() < 1e-12 && (r.minp - o.2).abs() < 1e-12
}

#[test]
fn evaluate_matches_brute_force_oracle() {
    let mut rng = rng_from(21);
    for t in 0..100 {
        let (q, g) = if t == 0 { (20, 50) } else { (rng.random_range(1..25), rng.random_range(1..60)) };
        let levels = (t % 3 == 0).then_some(5);
        let (sims, rel) = random_instance(&mut rng, q, g, levels);
        let r = evaluate(&sims, &rel).unwrap();
        assert!(same(&r, &oracle(&sims, &rel)), "instance {t}");
    }
}

#[test]
fn perfect_retrieval_scores_one() {
    let rel: Vec<Vec<bool>> = (0..6).map(|i| (0..12).map(|j| j / 2 == i).collect()).collect();
    let sims = Matrix::from_fn(6, 12, |i, j| if rel[i][j] { 1.0 } else { 0.0 });
    let r = evaluate(&sims, &rel).unwrap();
    assert_eq!((r.rank1, r.rank5, r.rank10, r.map, r.minp), (1.0, 1.0, 1.0, 1.0, 1.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_ignore_monotone_transforms(seed in any::<u64>()) {
        let mut rng = rng_from(seed);
        let (sims, rel) = random_instance(&mut rng, 8, 20, None);
        let warped = Matrix::from_fn(8, 20, |i, j| (3.0 * sims.get(i, j)).exp() - 7.0);
        let a = evaluate(&sims, &rel).unwrap();
        let b = evaluate(&warped, &rel).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn metrics_ignore_gallery_order_without_ties(seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut rng = rng_from(seed);
        let (sims, rel) = random_instance(&mut rng, 8, 20, None);
        let mut perm: Vec<usize> = (0..20).collect();
        perm.shuffle(&mut rng);
        let ps = Matrix::from_fn(8, 20, |i, j| sims.get(i, perm[j]));
        let pr: Vec<Vec<bool>> = rel.iter().map(|r| perm.iter().map(|&p| r[p]).collect()).collect();
        let a = evaluate(&sims, &rel).unwrap();
        let b = evaluate(&ps, &pr).unwrap();
        prop_assert_eq!((a.rank1, a.rank5, a.rank10), (b.rank1, b.rank5, b.rank10));
        prop_assert!((a.map - b.map).abs() < 1e-12 && (a.minp - b.minp).abs() < 1e-12);
    }

    #[test]
    fn metrics_are_bounded_and_ordered(seed in any::<u64>(), q in 1usize..10, g in 1usize..30) {
        let mut rng = rng_from(seed);
        let (sims, rel) = random_instance(&mut rng, q, g, Some(4));
        let r = evaluate(&sims, &rel).unwrap();
        prop_assert!(r.rank1 <= r.rank5 && r.rank5 <= r.rank10);
        prop_assert!((0.0..=1.0).contains(&r.map) && (0.0..=1.0).contains(&r.minp));
    }

    #[test]
    fn joint_similarity_is_the_elementwise_mean(a in prop::collection::vec(-1.0f64..=1.0, 12), b in prop::collection::vec(-1.0f64..=1.0, 12)) {
        let ma = Matrix::from_vec(3, 4, a.clone()).unwrap();
        let mb = Matrix::from_vec(3, 4, b.clone()).unwrap();
        let j = joint_similarity(&ma, &mb).unwrap();
        for k in 0..12 {
            prop_assert_eq!(j.as_slice()[k], (a[k] + b[k]) / 2.0);
        }
    }
}
