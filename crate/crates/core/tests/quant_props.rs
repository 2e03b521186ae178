mod common;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dpuflow::quant::{
    calibrate, dequantize_tensor, qforward, quantize_tensor, quantize_value, CalibrationSet, QuantParams,
};
use dpuflow::tensor::{Tensor, TensorShape};

/// `|dequant(quant(x)) - x|` for every value, at fraction bits `f`.
fn roundtrip_errors(values: &[f32], f: i32) -> Vec<f32> {
    let p = QuantParams::new(f);
    let t = Tensor::from_f32(TensorShape::new(1, 1, 1, values.len()), values.to_vec()).unwrap();
    let q = quantize_tensor(&t, p).unwrap();
    assert_eq!(q.clipped, 0);
    let back = dequantize_tensor(&q.tensor, p).unwrap();
    back.as_f32()
        .unwrap()
        .iter()
        .zip(values)
        .map(|(a, b)| (a - b).abs())
        .collect()
}

#[test]
fn every_code_roundtrips_exactly() {
    for f in 0..=7 {
        let step = 2f32.powi(-f);
        for code in -128i32..=127 {
            let x = code as f32 * step;
            assert_eq!(
                quantize_value(x, QuantParams::new(f)),
                (code as i8, false),
                "f={f} code={code}"
            );
        }
        let codes: Vec<f32> = (-128i32..=127).map(|c| c as f32 * step).collect();
        assert!(roundtrip_errors(&codes, f).iter().all(|&e| e == 0.0));
    }
}

#[test]
fn random_reals_roundtrip_within_half_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut checked = 0;
    for f in 0..=7 {
        let (lo, hi) = QuantParams::new(f).range();
        let d = Uniform::new_inclusive(lo, hi);
        let values: Vec<f32> = (0..12_500).map(|_| d.sample(&mut rng)).collect();
        let bound = 2f32.powi(-(f + 1));
        for (x, e) in values.iter().zip(roundtrip_errors(&values, f)) {
            assert!(e <= bound, "f={f} x={x} err={e}");
        }
        checked += values.len();
    }
    assert_eq!(checked, 100_000);
}

#[test]
fn ties_round_to_even() {
    let p = QuantParams::new(0);
    assert_eq!(quantize_value(0.5, p).0, 0);
    assert_eq!(quantize_value(1.5, p).0, 2);
    assert_eq!(quantize_value(-2.5, p).0, -2);
    assert_eq!(quantize_value(300.0, p), (127, true));
}

#[test]
fn clip_rate_on_calibration_set_is_small() {
    let p = common::test8_pipeline();
    let (mut clipped, mut elements) = (0, 0);
    for img in &p.calibration {
        let r = qforward(&p.qmodel, img).unwrap();
        clipped += r.clipped;
        elements += r.elements;
    }
    let rate = clipped as f64 / elements as f64;
    assert!(rate <= 0.01, "clip rate {rate}");
}

#[test]
fn calibration_ignores_batch_grouping() {
    let p = common::test8_pipeline();
    let cal = CalibrationSet::new("synthetic", p.calibration[..300].to_vec());
    let a = calibrate(&p.folded, &cal, 100).unwrap();
    let b = calibrate(&p.folded, &cal, 1).unwrap();
    let c = calibrate(&p.folded, &cal, 7).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
}
