use labelaudit::culture;
use labelaudit::dataset::{Dimension, HofstedeTable};
use labelaudit::synth::{self, SynthConfig};
use proptest::prelude::*;

#[test]
fn planted_dimension_is_selected_first() {
    let mut cfg = SynthConfig::paper_scale(12);
    cfg.planted_inconsistent.clear();
    cfg.language_shift.clear();
    cfg.base_rates.iter_mut().for_each(|b| *b = 0.5);
    cfg.dimension_effects[Dimension::Uncertainty.index()] = 0.3;
    let out = synth::generate(&cfg).unwrap();
    let sel = culture::select_dimensions(&out.analysis_records(), &out.hofstede, 0.05).unwrap();
    assert_eq!(sel.selected.first(), Some(&Dimension::Uncertainty), "{sel:?}");
    let coef = sel.coefficients.iter().find(|c| c.name == Dimension::Uncertainty.as_str()).unwrap();
    assert!(coef.estimate > 0.0);
}

#[test]
fn no_cultural_signal_selects_little() {
    let mut cfg = SynthConfig::paper_scale(13);
    cfg.planted_inconsistent.clear();
    cfg.language_shift.clear();
    let out = synth::generate(&cfg).unwrap();
    let sel = culture::select_dimensions(&out.analysis_records(), &out.hofstede, 0.01).unwrap();
    assert!(sel.selected.len() <= 1, "{:?}", sel.selected);
}

fn dims_from_mask(mask: u8) -> Vec<Dimension> {
    Dimension::ALL.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, d)| *d).collect()
}

proptest! {
    #[test]
    fn cdi_is_a_metric(mask in 1u8..64) {
        let dims = dims_from_mask(mask);
        let m = culture::cdi(&HofstedeTable::bundled(), &dims).unwrap();
        let n = m.countries.len();
        for i in 0..n {
            prop_assert_eq!(m.distances[i][i], 0.0);
            for j in 0..n {
                prop_assert!((m.distances[i][j] - m.distances[j][i]).abs() < 1e-15);
                for k in 0..n {
                    prop_assert!(m.distances[i][k] <= m.distances[i][j] + m.distances[j][k] + 1e-12);
                }
            }
        }
    }

    #[test]
    fn adding_a_dimension_never_shrinks_distance(mask in 1u8..32) {
        let small = dims_from_mask(mask);
        let mut big = small.clone();
        big.push(Dimension::Indulgence);
        let a = culture::cdi(&HofstedeTable::bundled(), &small).unwrap();
        let b = culture::cdi(&HofstedeTable::bundled(), &big).unwrap();
        for (ra, rb) in a.distances.iter().zip(&b.distances) {
            for (x, y) in ra.iter().zip(rb) {
                prop_assert!(y + 1e-15 >= *x);
            }
        }
    }
}
