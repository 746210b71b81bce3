use automap_ct::data::{generate_phantom_set, PhantomSpec};
use automap_ct::eval::{
    body_iou, evaluate_run, false_digit_rate, hu_rmse, render_grid, rmse, DigitOracle, EvalTruth, GatedOracle,
};
use automap_ct::formats::KeyValues;
use automap_ct::model::{init_params, AutomapConfig, ConvSpec};
use automap_ct::radon::{AngleSet, Domain, ImageGrid};
use proptest::prelude::*;

fn norm(n: usize, values: Vec<f64>) -> ImageGrid {
    ImageGrid::new(n, 5.0, values, Domain::Normalized).unwrap()
}

fn two_pass_rmse(a: &[f64], b: &[f64]) -> f64 {
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean_sq = diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64;
    mean_sq.sqrt()
}

fn ungated(oracle: DigitOracle) -> GatedOracle {
    GatedOracle {
        oracle,
        accuracy: 1.0,
        held_out: 0,
    }
}

#[test]
fn rmse_hand_values() {
    let a = norm(2, vec![0.1, 0.2, 0.3, 0.4]);
    assert_eq!(rmse(&a, &a).unwrap(), 0.0);
    let b = norm(2, a.values().iter().map(|v| v + 0.1).collect());
    assert!((rmse(&a, &b).unwrap() - 0.1).abs() < 1e-12);
    let hu = ImageGrid::new(2, 5.0, vec![0.0; 4], Domain::Hounsfield).unwrap();
    assert!(rmse(&a, &hu).is_err());
    assert!(rmse(&a, &norm(3, vec![0.0; 9])).is_err());
}

#[test]
fn hu_rmse_hand_values() {
    let truth = ImageGrid::new(2, 5.0, vec![-1000.0, 0.0, 500.0, 2000.0], Domain::Hounsfield).unwrap();
    let perfect = norm(2, vec![0.0, 1.0 / 3.0, 0.5, 1.0]);
    assert!(hu_rmse(&perfect, &truth).unwrap() < 1e-9);
    let off = norm(2, vec![1.0 / 3000.0, 1.0 / 3.0 + 1.0 / 3000.0, 0.5 + 1.0 / 3000.0, 1.0 - 1.0 / 3000.0]);
    assert!((hu_rmse(&off, &truth).unwrap() - 1.0).abs() < 1e-9);
    assert!(hu_rmse(&truth, &truth).is_err());
}

#[test]
fn body_iou_thresholds_both_images() {
    let truth = ImageGrid::new(2, 5.0, vec![-1000.0, 0.0, 0.0, 0.0], Domain::Hounsfield).unwrap();
    // -500 HU is 1/6 in the normalized domain.
    let pred = norm(2, vec![0.0, 0.5, 0.5, 0.1]);
    assert!((body_iou(&pred, &truth).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(body_iou(&norm(2, vec![0.0; 4]), &ImageGrid::filled(2, 5.0, -1000.0, Domain::Hounsfield).unwrap()).unwrap(), 1.0);
}

#[test]
fn blank_images_get_the_oracle_constant_verdict() {
    let mut oracle = DigitOracle::init(3);
    oracle.out_bias.data_mut()[7] = 1.0;
    let gated = ungated(oracle);
    let blank = norm(64, vec![0.0; 64 * 64]);
    let recons = vec![&blank; 4];
    let r = false_digit_rate(&recons, &[1, 2, 3, 4], &gated, None).unwrap();
    assert_eq!(r.rate, 1.0);
    assert!(r.verdicts.iter().all(|v| v.digit == Some(7)));
    let r = false_digit_rate(&recons, &[7, 7, 7, 1], &gated, None).unwrap();
    assert_eq!(r.rate, 0.25);
    assert_eq!(r.false_digit, vec![false, false, false, true]);
    assert_eq!(r.confusion[7][7], 3);
    assert_eq!(r.confusion[1][7], 1);

    // A rejection threshold above every confidence turns all verdicts into
    // "no digit", which always counts as false.
    let r = false_digit_rate(&recons, &[7, 7, 7, 7], &gated, Some(1.1)).unwrap();
    assert_eq!(r.rate, 1.0);
    assert_eq!(r.confusion[7][10], 4);
    assert!(false_digit_rate(&recons, &[7], &gated, None).is_err());
}

#[test]
fn grid_layout_quantization_and_determinism() {
    let half = norm(64, vec![0.5; 64 * 64]);
    let one = render_grid(&[(&half, &half, &half)]).unwrap();
    assert_eq!((one.width, one.height), (3 * 64 + 4, 64));
    assert_eq!(one.pixels[0], 127);
    assert_eq!(one.pixels[64], 255);
    let hu = ImageGrid::filled(64, 5.0, 2000.0, Domain::Hounsfield).unwrap();
    let two = render_grid(&[(&half, &half, &half), (&hu, &half, &half)]).unwrap();
    assert_eq!((two.width, two.height), (196, 130));
    assert_eq!(two.pixels[66 * 196], 255);
    assert_eq!(two, render_grid(&[(&half, &half, &half), (&hu, &half, &half)]).unwrap());
    assert!(render_grid(&[]).is_err());
    let small = norm(8, vec![0.0; 64]);
    assert!(render_grid(&[(&half, &small, &half)]).is_err());
}

fn phantom_model() -> AutomapConfig {
    AutomapConfig {
        n: 16,
        input_len: 4 * 16,
        fc_dims: vec![64, 256],
        conv: vec![
            ConvSpec { filters: 2, kernel: 3 },
            ConvSpec { filters: 2, kernel: 3 },
            ConvSpec { filters: 1, kernel: 3 },
        ],
    }
}

#[test]
fn phantom_evaluation_report() {
    let spec = PhantomSpec {
        n: 16,
        ..PhantomSpec::default()
    };
    let phantoms = generate_phantom_set(&spec, 9, 5).unwrap();
    let images: Vec<&ImageGrid> = phantoms.iter().map(|p| &p.image).collect();
    let params = init_params(&phantom_model(), 1).unwrap();
    let mut config = KeyValues::default();
    config.push("experiment", "phantom");
    let out = evaluate_run(&params, &AngleSet::FourView, EvalTruth::Phantoms { images: &images }, "abc", config).unwrap();
    let r = &out.report;
    assert_eq!(r.n_samples(), 5);
    let mean = r.rmse_per_sample.iter().sum::<f64>() / 5.0;
    assert!((r.rmse_mean - mean).abs() < 1e-15);
    let hu = r.hu_rmse_per_sample.as_ref().unwrap();
    for (h, n) in hu.iter().zip(&r.rmse_per_sample) {
        assert!((h - 3000.0 * n).abs() < 1e-6);
    }
    assert!(r.body_iou_mean.is_some() && r.false_digits.is_none());
    assert_eq!(out.reconstructions.len(), 5);
    assert_eq!((out.grid.width, out.grid.height), (3 * 16 + 4, 5 * 16 + 4 * 2));

    let kv = KeyValues::parse(&r.to_text()).unwrap();
    assert_eq!(kv.get("run_id"), Some("abc"));
    assert_eq!(kv.get("config.experiment"), Some("phantom"));
    assert!(kv.get("rmse_mean").is_some() && kv.get("hu_rmse_mean").is_some());

    let empty: Vec<&ImageGrid> = Vec::new();
    assert!(evaluate_run(&params, &AngleSet::FourView, EvalTruth::Phantoms { images: &empty }, "x", KeyValues::default()).is_err());
    assert!(evaluate_run(&params, &AngleSet::TwoView, EvalTruth::Phantoms { images: &images }, "x", KeyValues::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn rmse_matches_two_pass_reference(
        a in prop::collection::vec(0.0f64..1.0, 25),
        b in prop::collection::vec(0.0f64..1.0, 25),
    ) {
        let got = rmse(&norm(5, a.clone()), &norm(5, b.clone())).unwrap();
        prop_assert!((got - two_pass_rmse(&a, &b)).abs() <= 1e-12);
        prop_assert_eq!(got, rmse(&norm(5, b), &norm(5, a)).unwrap());
    }

    #[test]
    fn hu_rmse_is_rmse_after_conversion(
        p in prop::collection::vec(0.0f64..1.0, 16),
        t in prop::collection::vec(-1000.0f64..2000.0, 16),
    ) {
        let pred = norm(4, p.clone());
        let truth = ImageGrid::new(4, 5.0, t.clone(), Domain::Hounsfield).unwrap();
        let converted: Vec<f64> = p.iter().map(|v| v * 3000.0 - 1000.0).collect();
        prop_assert!((hu_rmse(&pred, &truth).unwrap() - two_pass_rmse(&converted, &t)).abs() <= 1e-9);
    }
}
