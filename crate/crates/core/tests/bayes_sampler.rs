use labelaudit::bayes::{self, diagnose_all, FitInput, MrpModelSpec};
use labelaudit::bayes::diagnostics::diagnose;
use labelaudit::rng;
use labelaudit::stats;
use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{Distribution, Exp, StandardNormal};

fn names(p: usize, groups: &[String]) -> (Vec<String>, Vec<String>) {
    ((0..p).map(|j| format!("b{j}")).collect(), groups.to_vec())
}

#[test]
fn constant_chains_are_degenerate() {
    let chains = vec![vec![1.5; 100]; 4];
    let d = diagnose("c", &chains);
    assert!(d.degenerate);
}

#[test]
fn iid_draws_have_unit_rhat() {
    let mut r = rng::seeded(10);
    let chains: Vec<Vec<f64>> = (0..4).map(|_| (0..1000).map(|_| StandardNormal.sample(&mut r)).collect()).collect();
    let d = diagnose("x", &chains);
    let rhat = d.rhat.unwrap();
    assert!((0.99..=1.01).contains(&rhat), "{rhat}");
    assert!(d.ess.unwrap() > 2000.0);
}

#[test]
fn shifted_chain_is_flagged() {
    let mut r = rng::seeded(11);
    let mut draws = Vec::new();
    for c in 0..4 {
        for _ in 0..500 {
            let z: f64 = StandardNormal.sample(&mut r);
            draws.push(if c == 2 { z + 5.0 } else { z });
        }
    }
    // `diagnose_all` takes draws row-major with chains concatenated.
    let report = diagnose_all(&["x".to_string()], &draws, 4);
    assert!(report.params[0].rhat.unwrap() > 1.2);
    assert!(report.convergence_failure);
}

#[test]
fn single_chain_omits_rhat() {
    let draws: Vec<f64> = (0..200).map(|i| f64::from(i % 7)).collect();
    let report = diagnose_all(&["x".to_string()], &draws, 1);
    assert!(report.single_chain);
    assert!(report.params[0].rhat.is_none());
}

#[test]
fn prior_only_group_scale_matches_exponential() {
    let groups: Vec<String> = vec!["A".into(), "B".into()];
    let (fixed, groups) = names(1, &groups);
    let x = DMatrix::zeros(0, 1);
    let input = FitInput { item_id: "i", label_id: "l", x: &x, y: &[], group_index: &[], fixed_names: &fixed, group_names: &groups };
    let spec = MrpModelSpec { seed: 4, chains: 4, warmup: 1000, draws_per_chain: 2000, ..MrpModelSpec::default() };
    let draws = bayes::sample_hmc(&spec, &input).unwrap();
    let sigma: Vec<f64> = draws.column(draws.dim() - 1).iter().map(|t| t.exp()).collect();
    assert!(sigma.iter().all(|s| *s > 0.0));

    let mut r = rng::seeded(5);
    let exp = Exp::new(2.0).unwrap();
    let oracle: Vec<f64> = (0..200_000).map(|_| exp.sample(&mut r)).collect();
    let m = stats::mean(&sigma);
    let d = diagnose_all(&draws.column_names, &draws.draws, draws.chains);
    let ess = d.params.last().unwrap().ess.unwrap();
    let mcse = stats::sd_sample(&sigma) / ess.sqrt();
    assert!((m - stats::mean(&oracle)).abs() < 4.0 * mcse + 0.01, "{m} vs {}", stats::mean(&oracle));
}

fn country_data(n: usize, seed: u64) -> (DMatrix<f64>, Vec<bool>, Vec<usize>) {
    let mut r = rng::seeded(seed);
    let u = [-0.5, 0.0, 0.4, 0.8];
    let mut x = DMatrix::zeros(n, 2);
    let mut y = Vec::with_capacity(n);
    let mut g = Vec::with_capacity(n);
    for i in 0..n {
        let male = f64::from(r.random::<bool>());
        x[(i, 0)] = 1.0;
        x[(i, 1)] = male;
        let gi = i % 4;
        y.push(r.random::<f64>() < stats::logistic(-0.3 + 0.6 * male + u[gi]));
        g.push(gi);
    }
    (x, y, g)
}

fn fit(n: usize, seed: u64, laplace: bool) -> bayes::PosteriorDraws {
    let (x, y, g) = country_data(n, seed);
    let groups: Vec<String> = ["A", "B", "C", "D"].iter().map(|s| s.to_string()).collect();
    let (fixed, groups) = names(2, &groups);
    let input = FitInput { item_id: "i", label_id: "l", x: &x, y: &y, group_index: &g, fixed_names: &fixed, group_names: &groups };
    let spec = MrpModelSpec { seed, chains: 2, warmup: 400, draws_per_chain: 400, ..MrpModelSpec::default() };
    if laplace {
        bayes::laplace_fit(&spec, &input).unwrap()
    } else {
        bayes::sample_hmc(&spec, &input).unwrap()
    }
}

/// Posterior SD of the country-A probability for a female respondent.
fn cell_sd(d: &bayes::PosteriorDraws) -> f64 {
    let p: Vec<f64> = (0..d.n_draws()).map(|s| stats::logistic(d.draw(s)[0] + d.draw(s)[2])).collect();
    stats::sd_sample(&p)
}

#[test]
fn posterior_contracts_with_more_data() {
    let seeds = 0..5u64;
    let small: f64 = seeds.clone().map(|s| cell_sd(&fit(400, s, true))).sum::<f64>() / 5.0;
    let large: f64 = seeds.map(|s| cell_sd(&fit(800, s, true))).sum::<f64>() / 5.0;
    assert!(large < small, "{large} vs {small}");
}

#[test]
fn hmc_is_deterministic_and_accepts_near_target() {
    let a = fit(600, 3, false);
    let b = fit(600, 3, false);
    assert_eq!(a.draws, b.draws);
    for c in &a.chain_stats {
        assert!((0.92..=1.0).contains(&c.mean_accept), "{}", c.mean_accept);
    }
}

#[test]
fn laplace_and_hmc_cell_means_agree() {
    let a = fit(3000, 6, false);
    let b = fit(3000, 6, true);
    for col in [0usize, 2, 3, 4, 5] {
        let pa: Vec<f64> = (0..a.n_draws()).map(|s| stats::logistic(a.draw(s)[0] + if col > 0 { a.draw(s)[col] } else { 0.0 })).collect();
        let pb: Vec<f64> = (0..b.n_draws()).map(|s| stats::logistic(b.draw(s)[0] + if col > 0 { b.draw(s)[col] } else { 0.0 })).collect();
        assert!((stats::mean(&pa) - stats::mean(&pb)).abs() < 0.05);
    }
}
