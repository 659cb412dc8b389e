use aerolog_core::sensor::{resistance_from_adc, SensorParams};
use num_rational::Ratio;
use proptest::prelude::*;

/// Exact `(adc_max / adc - 1) * r_load` for integral `r_load`.
fn exact_rs(adc: u32, adc_max: u32, r_load: i64) -> f64 {
    let v = (Ratio::new(i64::from(adc_max), i64::from(adc)) - 1) * r_load;
    *v.numer() as f64 / *v.denom() as f64
}

#[test]
fn every_code_of_a_ten_bit_adc() {
    let p = SensorParams::default();
    for adc in 1..=p.adc_max {
        let got = resistance_from_adc(adc, &p).unwrap();
        let want = exact_rs(adc, p.adc_max, 10_000);
        // two roundings in the computation, one in the oracle's division
        assert!(
            (got - want).abs() <= 3.0 * f64::EPSILON * want,
            "adc {adc}: {got} vs {want}"
        );
    }
    assert_eq!(resistance_from_adc(p.adc_max, &p).unwrap(), 0.0);
}

proptest! {
    #[test]
    fn other_resolutions(bits in 8u32..=16, frac in 0.0f64..1.0, r_load in 1_000i64..100_000) {
        let adc_max = (1u32 << bits) - 1;
        let adc = 1 + ((adc_max - 1) as f64 * frac) as u32;
        let p = SensorParams { adc_max, r_load: r_load as f64, ..Default::default() };
        let got = resistance_from_adc(adc, &p).unwrap();
        let want = exact_rs(adc, adc_max, r_load);
        prop_assert!((got - want).abs() <= 3.0 * f64::EPSILON * want);
    }
}
