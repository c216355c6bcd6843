use std::collections::BTreeMap;

use labelaudit::matching::{self, ClusterBy, MatchSpec, MatchedPair, MatchedSample};
use labelaudit::rng;
use labelaudit::stats;
use labelaudit::synth::{self, SynthConfig};
use rand::Rng as _;

/// 13 pairs; counts of (both annotate, treated only, control only, neither).
fn germany_like() -> (MatchedSample, BTreeMap<String, bool>, Vec<(bool, bool)>) {
    let kinds = [(true, true), (true, false), (false, true), (false, false)];
    let counts = [6, 5, 0, 2];
    let mut pairs = Vec::new();
    let mut outcomes = BTreeMap::new();
    let mut flat = Vec::new();
    for (k, n) in counts.iter().enumerate() {
        for _ in 0..*n {
            let i = pairs.len();
            outcomes.insert(format!("t{i}"), kinds[k].0);
            outcomes.insert(format!("c{i}"), kinds[k].1);
            flat.push(kinds[k]);
            pairs.push(MatchedPair { pair_id: i, treated_id: format!("t{i}"), control_id: format!("c{i}"), distance: 0.0 });
        }
    }
    let n = pairs.len();
    let sample =
        MatchedSample { pairs, n_treated: n, n_control: n, unmatched_treated: 0, propensity_fallback: false, balance: Vec::new() };
    (sample, outcomes, flat)
}

fn log_or(pairs: &[(bool, bool)]) -> Option<f64> {
    let n = pairs.len() as f64;
    let pt = pairs.iter().filter(|p| p.0).count() as f64 / n;
    let pc = pairs.iter().filter(|p| p.1).count() as f64 / n;
    let ok = |p: f64| p > 0.0 && p < 1.0;
    (ok(pt) && ok(pc)).then(|| stats::logit(pt) - stats::logit(pc))
}

#[test]
fn germany_fixture_means_and_odds_ratio() {
    let (sample, outcomes, _) = germany_like();
    let e = matching::language_effect(&sample, &outcomes, ClusterBy::Pair).unwrap();
    assert_eq!(e.n_pairs, 13);
    assert!((e.mean_treated - 11.0 / 13.0).abs() < 1e-12);
    assert!((e.mean_control - 6.0 / 13.0).abs() < 1e-12);
    assert!((e.mean_diff - 0.38).abs() <= 0.01, "{}", e.mean_diff);
    let or = e.odds_ratio.unwrap();
    let expected = (11.0 / 2.0) / (6.0 / 7.0);
    assert!((or - expected).abs() < 1e-6 * expected, "{or} vs {expected}");
    assert!((or - 6.42).abs() < 0.01);
    assert!((1.4..=30.0).contains(&or));
    let p = e.p_value.unwrap();
    assert!((0.01..0.03).contains(&p), "{p}");
}

#[test]
fn pair_clustered_se_agrees_with_pair_bootstrap() {
    let (sample, outcomes, flat) = germany_like();
    let e = matching::language_effect(&sample, &outcomes, ClusterBy::Pair).unwrap();
    let (lo, hi) = e.or_ci95.unwrap();
    let se = (hi.ln() - lo.ln()) / (2.0 * stats::normal_quantile(0.975));

    let mut r = rng::seeded(41);
    let mut reps = Vec::new();
    for _ in 0..4000 {
        let boot: Vec<(bool, bool)> = (0..flat.len()).map(|_| flat[r.random_range(0..flat.len())]).collect();
        if let Some(v) = log_or(&boot) {
            reps.push(v);
        }
    }
    let boot_se = stats::sd_sample(&reps);
    assert!((se / boot_se - 1.0).abs() < 0.2, "sandwich se {se:.4} vs bootstrap {boot_se:.4}");
}

#[test]
fn respondent_clustering_changes_only_the_interval() {
    let (sample, outcomes, _) = germany_like();
    let by_pair = matching::language_effect(&sample, &outcomes, ClusterBy::Pair).unwrap();
    let by_resp = matching::language_effect(&sample, &outcomes, ClusterBy::Respondent).unwrap();
    assert_eq!(by_pair.odds_ratio, by_resp.odds_ratio);
    assert_eq!(by_pair.mean_diff, by_resp.mean_diff);
    assert_ne!(by_pair.or_ci95, by_resp.or_ci95);
}

#[test]
fn confounded_sample_is_balanced_after_matching() {
    let out = synth::generate(&SynthConfig::confounded_language(3, 4000, 0.2)).unwrap();
    let refs: Vec<_> = out.records.iter().collect();
    let spec = MatchSpec { seed: 9, ..MatchSpec::default() };
    let units = matching::units_from_records(&refs, &spec);
    let sample = matching::match_units(&units, &spec).unwrap();
    let max_before = sample.balance.iter().map(|b| b.smd_before.abs()).fold(0.0, f64::max);
    let max_after = sample.balance.iter().map(|b| b.smd_after.abs()).fold(0.0, f64::max);
    assert!(max_before > 0.5, "{max_before}");
    assert!(max_after < 0.25, "{max_after}");
    assert!(sample.pairs.len() > 300);

    let again = matching::match_units(&units, &spec).unwrap();
    assert_eq!(sample, again);
}

#[test]
fn sweep_covers_every_label_of_a_context() {
    let out = synth::generate(&SynthConfig::smoke(2)).unwrap();
    let sweep = matching::language_effect_sweep(&out.analysis_records(), &[], &MatchSpec::default());
    for m in &sweep.matches {
        let labels = sweep.effects.iter().filter(|e| e.country == m.country && e.item_id == m.item_id).count();
        assert!(labels <= 10);
    }
    assert!(sweep.significant_share.is_empty());
}
