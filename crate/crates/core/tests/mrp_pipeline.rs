use labelaudit::bayes::hmc::{run_chain, HmcSettings};
use labelaudit::bayes::{LogDensity, MrpModelSpec};
use labelaudit::dataset::{self, AnnotationRecord, PairKey};
use labelaudit::mrp::{self, Engine, ModelFrame, Thresholds};
use labelaudit::rng;
use labelaudit::stats;
use labelaudit::synth::{self, SynthConfig, SynthOutput};

fn smoke() -> (SynthOutput, Vec<AnnotationRecord>, dataset::Strata) {
    let out = synth::generate(&SynthConfig::smoke(21)).unwrap();
    let records = out.analysis_records();
    let strata = dataset::build_strata_with(&records, Some(&out.analysis_strata())).unwrap();
    (out, records, strata)
}

#[test]
fn laplace_recovers_smoke_truths() {
    let (out, records, strata) = smoke();
    let spec = MrpModelSpec { seed: 1, ..MrpModelSpec::default() };
    let run = mrp::run(&records, &strata, &spec, Engine::Laplace);
    assert!(run.failures.is_empty());
    assert_eq!(run.estimates.len(), 20);
    let mut errs = Vec::new();
    for e in &run.estimates {
        assert!(e.approximate);
        for (c, s) in &e.countries {
            errs.push((s.mean - out.manifest.country_probability(&e.item_id, &e.label_id, c).unwrap()).abs());
        }
    }
    let close = errs.iter().filter(|e| **e <= 0.05).count() as f64 / errs.len() as f64;
    assert!(close >= 0.9, "{close}");

    let mut buf = Vec::new();
    mrp::write_estimates_csv(&mut buf, &run.estimates).unwrap();
    let back = mrp::read_estimates_csv(buf.as_slice()).unwrap();
    let v1 = mrp::classify_all(&run.estimates, &Thresholds::default()).unwrap();
    let v2 = mrp::classify_all(&back, &Thresholds::default()).unwrap();
    assert_eq!(v1.iter().map(|v| v.classification).collect::<Vec<_>>(), v2.iter().map(|v| v.classification).collect::<Vec<_>>());
}

#[test]
fn hmc_and_laplace_agree_on_a_pair() {
    let (_, records, strata) = smoke();
    let frame = ModelFrame::new(&records, &strata);
    let pair = PairKey::new(&synth::item_id(0), &synth::label_id(0));
    let refs: Vec<&AnnotationRecord> = records.iter().filter(|r| r.pair() == pair).collect();
    let spec = MrpModelSpec { seed: 2, chains: 2, warmup: 500, draws_per_chain: 500, ..MrpModelSpec::default() };
    let hmc = mrp::fit_pair(&frame, &spec, Engine::Hmc, &pair, &refs).unwrap();
    let lap = mrp::fit_pair(&frame, &spec, Engine::Laplace, &pair, &refs).unwrap();
    let a = mrp::country_estimates(&hmc, &frame, &strata).unwrap();
    let b = mrp::country_estimates(&lap, &frame, &strata).unwrap();
    for (c, e) in &a.countries {
        assert!((e.mean - b.countries[c].mean).abs() < 0.02, "{c}: {} vs {}", e.mean, b.countries[c].mean);
    }
    let diag = hmc.diagnostics();
    assert!(diag.params.iter().all(|p| p.rhat.unwrap() < 1.05));
}

/// Strongly correlated bivariate normal, unit variances.
struct Correlated(f64);

impl LogDensity for Correlated {
    fn dim(&self) -> usize {
        2
    }

    fn logp_grad(&self, t: &[f64], g: &mut [f64]) -> f64 {
        let k = 1.0 / (1.0 - self.0 * self.0);
        g[0] = -k * (t[0] - self.0 * t[1]);
        g[1] = -k * (t[1] - self.0 * t[0]);
        -0.5 * k * (t[0] * t[0] - 2.0 * self.0 * t[0] * t[1] + t[1] * t[1])
    }
}

#[test]
fn dense_adaptation_handles_correlation() {
    let rho = 0.95;
    let mut r = rng::seeded(8);
    let out = run_chain(&Correlated(rho), &[0.5, -0.5], &HmcSettings::default(), &mut r);
    let xs: Vec<f64> = out.draws.chunks(2).map(|d| d[0]).collect();
    let ys: Vec<f64> = out.draws.chunks(2).map(|d| d[1]).collect();
    let corr = stats::pearson(&xs, &ys).unwrap();
    assert!((corr - rho).abs() < 0.03, "{corr}");
    assert!((stats::sd_sample(&xs) - 1.0).abs() < 0.15);
    assert!(out.stats.mean_accept > 0.9);
    assert_eq!(out.stats.divergences, 0);
}
