mod common;

use proptest::prelude::*;

use dpuflow::compiler::{compile, verify_fingerprint, CompileError};
use dpuflow::quant::qforward;
use dpuflow::sim::{load_model, simulate_frame, Arch, TargetConfig};

use common::{quantize_random, random_small_graph, signed_images};

#[test]
fn simulator_matches_qforward_on_random_models() {
    let (frames, tiled) = common::check_bit_exact(120, 5).unwrap();
    assert_eq!(frames, 600);
    assert!(tiled >= 20, "only {tiled} models needed tiling");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Any on-chip buffer large enough to compile gives the same numerics.
    #[test]
    fn buffer_size_does_not_change_outputs(seed in 0u64..100_000, buffer in 512usize..65_536) {
        let g = random_small_graph(seed, 10);
        let (_, q) = quantize_random(&g, 4, seed);
        let mut target = TargetConfig::zcu104_dual_b4096();
        target.buffer_bytes = buffer;
        let compiled = match compile(&q, &target) {
            Err(CompileError::TileExceedsBuffer { .. }) => return Ok(()),
            other => other.unwrap(),
        };
        let loaded = load_model(compiled, &target).unwrap();
        for img in signed_images(2, g.input_shape(), seed) {
            let (got, trace) = simulate_frame(&loaded, &img).unwrap();
            prop_assert_eq!(got, qforward(&q, &img).unwrap().logits);
            prop_assert!(trace.total_cycles > 0);
        }
    }
}

#[test]
fn model_compiled_for_another_target_is_refused() {
    let g = random_small_graph(5, 8);
    let (_, q) = quantize_random(&g, 4, 5);
    let dual = TargetConfig::zcu104_dual_b4096();
    let compiled = compile(&q, &dual).unwrap();
    let single = TargetConfig::new(Arch::B512, 1);
    assert!(matches!(
        verify_fingerprint(&compiled, &single),
        Err(CompileError::FingerprintMismatch { .. })
    ));
    assert!(load_model(compiled, &single).unwrap_err().is_fingerprint_mismatch());
}
