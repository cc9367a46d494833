use hammerlab::dram::{preset, random_mapping, AddressMapping, DramGeometry, MappingConstraints};
use hammerlab::probe::{LatencyModel, MemoryPool, SimulatedProbe, DEFAULT_POOL_COVERAGE};
use hammerlab::remap::{brute_force_baseline, recover_simulated, BaselineConfig, RecoveryConfig};
use hammerlab::seed::stream;
use proptest::prelude::*;

fn sorted_functions(m: &AddressMapping) -> Vec<Vec<u8>> {
    let mut f: Vec<Vec<u8>> = m.functions().iter().map(|f| f.bits()).collect();
    f.sort();
    f
}

/// The exhaustive search and the pairwise engine measure the same simulated
/// DIMM in unrelated ways and must agree on the bank functions.
#[test]
fn baseline_and_engine_agree_on_pairwise_functions() {
    let truth = preset("cometlake-8g").unwrap();
    let pool = MemoryPool::new(truth.addr_width(), DEFAULT_POOL_COVERAGE, 17).unwrap();
    let mut probe = SimulatedProbe::new(truth.clone(), LatencyModel::default(), stream(17, "probe")).unwrap();
    let baseline = brute_force_baseline(&mut probe, &pool, &mut stream(17, "pairs"), &BaselineConfig::default()).unwrap();
    let mut found = baseline.functions.clone();
    found.sort();
    assert_eq!(found, sorted_functions(&truth));

    let engine = recover_simulated(&truth, LatencyModel::default(), 17, &RecoveryConfig::default()).unwrap();
    assert_eq!(sorted_functions(&engine.recovered), found);
    // the pairwise engine needs far fewer timing measurements
    assert!(engine.probe_count * 10 < baseline.probe_count);
}

#[test]
fn noisier_probes_still_recover_with_more_repetitions() {
    let truth = preset("alderlake-8g").unwrap();
    let config = RecoveryConfig { reps: 200, ..RecoveryConfig::default() };
    let r = recover_simulated(&truth, LatencyModel::with_noise(30.0), 4, &config).unwrap();
    assert!(r.recovered.same_functions(&truth));
    assert_eq!(r.recovered.rows(), truth.rows());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// A run either reproduces the mapping or reports an error; it never
    /// returns a different mapping.
    #[test]
    fn recovery_is_exact_or_flagged(seed in any::<u64>(), size in 0usize..3, pure in any::<bool>(), arity in 2u32..8, noise in 0.0f64..12.0) {
        let geometry = [DramGeometry::ddr4_8g(), DramGeometry::ddr4_16g(), DramGeometry::ddr4_32g()][size];
        let constraints = MappingConstraints { max_arity: arity, pure_row_bits: pure, min_bank_bit: 6 };
        // low arities cannot always cover every row bit
        let Ok(truth) = random_mapping(seed, &geometry, &constraints) else { return Ok(()) };
        if let Ok(r) = recover_simulated(&truth, LatencyModel::with_noise(noise), seed, &RecoveryConfig::default()) {
            prop_assert!(r.recovered.same_functions(&truth));
            prop_assert_eq!(r.recovered.rows(), truth.rows());
            prop_assert_eq!(r.recovered.num_banks(), truth.num_banks());
        }
    }
}
