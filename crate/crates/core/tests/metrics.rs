//! Metric identities and Wilcoxon properties on random inputs.

use cbct_core::metrics::{psnr, rmse_hu, ssim, wilcoxon_signed_rank, wilcoxon_signed_rank_with, WilcoxonMethod};
use proptest::prelude::*;

fn image() -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-1000.0f64..2000.0, 16 * 16)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ssim_is_one_on_itself_symmetric_and_bounded(a in image(), b in image()) {
        prop_assert_eq!(ssim(&a, &a, 16, 3000.0).unwrap(), 1.0);
        let ab = ssim(&a, &b, 16, 3000.0).unwrap();
        let ba = ssim(&b, &a, 16, 3000.0).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn constant_offset_sets_rmse_and_psnr(a in image(), offset in 1.0f64..500.0) {
        let b: Vec<f64> = a.iter().map(|v| v + offset).collect();
        let r = rmse_hu(&b, &a).unwrap();
        prop_assert!((r - offset).abs() <= 1e-9 * offset);
        let p = psnr(&b, &a, 3000.0).unwrap();
        prop_assert!((p - 20.0 * (3000.0 / offset).log10()).abs() <= 1e-9 * p.abs());
    }

    #[test]
    fn wilcoxon_is_a_probability_and_swap_invariant(d in proptest::collection::vec(-5.0f64..5.0, 6..40)) {
        let a: Vec<f64> = d.iter().map(|x| x + 0.5).collect();
        let b: Vec<f64> = vec![0.0; d.len()];
        if let Ok(p) = wilcoxon_signed_rank(&a, &b) {
            prop_assert!((0.0..=1.0).contains(&p));
            prop_assert!((p - wilcoxon_signed_rank(&b, &a).unwrap()).abs() <= 1e-12);
        }
    }
}

#[test]
fn exact_and_normal_paths_agree_at_thirty() {
    let a: Vec<f64> = (0..30).map(|i| ((i * 37 % 17) as f64 - 6.5) * 0.3 + 0.4).collect();
    let b = vec![0.0; 30];
    let exact = wilcoxon_signed_rank_with(&a, &b, WilcoxonMethod::Exact).unwrap();
    let normal = wilcoxon_signed_rank_with(&a, &b, WilcoxonMethod::Normal).unwrap();
    assert!(exact.exact && !normal.exact);
    assert!((exact.p_value - normal.p_value).abs() <= 0.01, "{} vs {}", exact.p_value, normal.p_value);
}

#[test]
fn all_positive_five_is_one_in_sixteen() {
    let p = wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.0; 5]).unwrap();
    assert_eq!(p, 0.0625);
}
