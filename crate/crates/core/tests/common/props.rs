//! Property checks shared by the proptest suite and the acceptance harness.
//! Each check runs a deterministic proptest runner and reports failures as text.

use dfbscan::calibration::{
    build_profile, clean_reference, f1_at, optimize_lambda_from_similarities, ConfigSet,
};
use dfbscan::detector::{anomaly_score, cosine_similarity, detect, ClueProfile};
use dfbscan::indicators::{
    compute_indicator_matrix, extend_indicator, major_indicator, Form, Major,
};
use dfbscan::params::FinalLayerParams;
use dfbscan::selection::{
    featurize, rank_by_accuracy, rank_by_iforest, rank_by_mutual_info, rfe_ranking, sweep_subset,
    DEFAULT_SEED,
};
use dfbscan::synth::{generate_clean, inject, Attack, SynthSpec};
use dfbscan::{stats, INDICATOR_COUNT};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};

use super::{oracle, random_layer};

pub type Check = fn() -> Result<(), String>;

fn runner(cases: u32) -> TestRunner {
    TestRunner::new_with_rng(
        Config {
            cases,
            failure_persistence: None,
            ..Config::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    )
}

fn run<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String>
where
    S::Value: std::fmt::Debug,
{
    runner(cases)
        .run(&strategy, test)
        .map_err(|e| e.to_string())
}

fn layer(max_k: usize, max_d: usize) -> impl Strategy<Value = FinalLayerParams> {
    (2..=max_k, 1..=max_d, any::<u64>()).prop_map(|(k, d, s)| random_layer(k, d, s))
}

fn layer_with_perm(
    max_k: usize,
    max_d: usize,
) -> impl Strategy<Value = (FinalLayerParams, Vec<usize>)> {
    layer(max_k, max_d).prop_flat_map(|p| {
        let ids: Vec<usize> = (0..p.k()).collect();
        (Just(p), Just(ids).prop_shuffle())
    })
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

/// Small synthetic configuration set: cleans plus mean-boosted models.
fn small_config(k: usize, d: usize, n: usize, seed: u64) -> ConfigSet {
    let spec = SynthSpec::new(k, d);
    let cleans = (0..n)
        .map(|i| generate_clean(&spec.clone().with_seed(seed.wrapping_add(i as u64))).unwrap())
        .collect();
    let backdoors = (0..n)
        .map(|i| {
            let s = seed.wrapping_add(1000 + i as u64);
            let base = generate_clean(&spec.clone().with_seed(s)).unwrap();
            let t = i % k;
            let attacked = inject(
                &base,
                &spec
                    .clone()
                    .with_attack(Attack::MeanBoost, 3.0, t)
                    .with_seed(s),
            )
            .unwrap();
            (attacked, t)
        })
        .collect();
    ConfigSet::new(cleans, backdoors).unwrap()
}

// ---- params ----

pub fn params_round_trip() -> Result<(), String> {
    run(128, layer(16, 64), |p| {
        let back = FinalLayerParams::from_binary(&p.to_binary()).unwrap();
        prop_assert_eq!(&back, &p);
        let back = FinalLayerParams::from_json(p.to_json().as_bytes()).unwrap();
        prop_assert!(back
            .weights()
            .iter()
            .zip(p.weights())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert!(back
            .bias()
            .iter()
            .zip(p.bias())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        Ok(())
    })
}

pub fn params_rejects_count_mismatch() -> Result<(), String> {
    let strategy = (layer(8, 16), -64i64..64, 0usize..3);
    run(256, strategy, |(p, delta, which)| {
        let mut bytes = p.to_binary();
        match which {
            // Payload longer or shorter than declared.
            0 => {
                if delta == 0 {
                    return Ok(());
                }
                let len = (bytes.len() as i64 + delta).max(0) as usize;
                bytes.resize(len, 0);
            }
            // Declared K changed.
            1 => {
                let k = (p.k() as i64 + delta).max(0) as u32;
                if k as usize == p.k() {
                    return Ok(());
                }
                bytes[5..9].copy_from_slice(&k.to_le_bytes());
            }
            // Declared D changed.
            _ => {
                let d = (p.d() as i64 + delta).max(0) as u32;
                if d as usize == p.d() {
                    return Ok(());
                }
                bytes[9..13].copy_from_slice(&d.to_le_bytes());
            }
        }
        prop_assert!(FinalLayerParams::from_binary(&bytes).is_err());
        Ok(())
    })
}

// ---- indicators ----

pub fn indicators_match_oracle() -> Result<(), String> {
    let strategy = (3usize..=50, 4usize..=512, any::<u64>());
    run(24, strategy, |(k, d, seed)| {
        let p = random_layer(k, d, seed);
        let m = compute_indicator_matrix(&p);
        for (n, want) in oracle::raw_columns(&p).iter().enumerate() {
            let err = oracle::column_error(m.raw_column(n), want);
            prop_assert!(err <= 1e-6, "indicator {} error {}", n, err);
        }
        Ok(())
    })
}

pub fn indicators_scale_preserves_argmax() -> Result<(), String> {
    run(128, (layer(12, 48), 0.01f64..100.0), |(p, c)| {
        let scaled = FinalLayerParams::new(
            p.k(),
            p.d(),
            p.weights()
                .iter()
                .map(|w| (f64::from(*w) * c) as f32)
                .collect(),
            p.bias()
                .iter()
                .map(|b| (f64::from(*b) * c) as f32)
                .collect(),
        )
        .unwrap();
        for major in [Major::Wm, Major::L1, Major::L2, Major::Swb] {
            let a = major_indicator(&p, major);
            let b = major_indicator(&scaled, major);
            // Skip near-ties that f32 rounding of the scaled layer can legitimately reorder.
            let mut sorted = a.clone();
            sorted.sort_by(|x, y| y.total_cmp(x));
            if sorted.len() > 1
                && (sorted[0] - sorted[1]).abs() <= 1e-5 * sorted[0].abs().max(1e-30)
            {
                continue;
            }
            prop_assert_eq!(stats::argmax(&a), stats::argmax(&b), "{:?}", major);
        }
        Ok(())
    })
}

pub fn indicators_we_sums_to_one() -> Result<(), String> {
    run(128, layer(40, 64), |p| {
        let we = major_indicator(&p, Major::We);
        prop_assert!((we.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        Ok(())
    })
}

pub fn indicators_ws_range() -> Result<(), String> {
    let identical = (2usize..12, 1usize..48, any::<u64>()).prop_map(|(k, d, s)| {
        let row = random_layer(2, d, s).row(0).to_vec();
        FinalLayerParams::from_rows(vec![row; k], vec![0.0; k]).unwrap()
    });
    run(128, layer(20, 48), |p| {
        let ws = major_indicator(&p, Major::Ws);
        prop_assert!(ws.iter().all(|v| (0.0..=2.0).contains(v)), "{:?}", ws);
        Ok(())
    })?;
    run(64, identical, |p| {
        let ws = major_indicator(&p, Major::Ws);
        prop_assert!(ws.iter().all(|v| v.abs() <= 1e-12), "{:?}", ws);
        Ok(())
    })
}

pub fn indicators_zs_standardized() -> Result<(), String> {
    let values = prop::collection::vec(-1e3f64..1e3, 2..64);
    run(256, values, |v| {
        if stats::is_constant(&v) || stats::population_std(&v) < 1e-6 {
            return Ok(());
        }
        let z = extend_indicator(&v, Form::Zs);
        prop_assert!(stats::mean(&z).abs() <= 1e-9);
        prop_assert!((stats::population_std(&z) - 1.0).abs() <= 1e-9);
        Ok(())
    })
}

pub fn indicators_permutation_equivariant() -> Result<(), String> {
    run(96, layer_with_perm(16, 48), |(p, perm)| {
        let q = p.permute_classes(&perm).unwrap();
        let (a, b) = (compute_indicator_matrix(&p), compute_indicator_matrix(&q));
        for n in 0..INDICATOR_COUNT {
            for (i, &src) in perm.iter().enumerate() {
                let (x, y) = (b.raw_at(i, n), a.raw_at(src, n));
                prop_assert!(
                    close(x, y, 1e-9),
                    "indicator {} class {}: {} vs {}",
                    n,
                    i,
                    x,
                    y
                );
            }
        }
        Ok(())
    })
}

// ---- detector ----

fn any_profile(k: usize, ids: &[usize], lambda: f64, seed: u64) -> ClueProfile {
    let reference: Vec<f64> = (0..k)
        .map(|i| ((seed.wrapping_mul(31).wrapping_add(i as u64 * 17)) % 101) as f64 / 100.0)
        .collect();
    ClueProfile::new(ids, lambda, reference, Default::default()).unwrap()
}

fn id_subset() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::btree_set(0..INDICATOR_COUNT, 1..INDICATOR_COUNT)
        .prop_map(|s| s.into_iter().collect::<Vec<_>>())
}

pub fn detector_score_set_semantics() -> Result<(), String> {
    let strategy = (
        layer(12, 32),
        id_subset().prop_flat_map(|ids| Just(ids).prop_shuffle()),
    );
    run(128, strategy, |(p, shuffled)| {
        let m = compute_indicator_matrix(&p);
        let mut sorted = shuffled.clone();
        sorted.sort_unstable();
        prop_assert_eq!(
            anomaly_score(&m, &shuffled).unwrap(),
            anomaly_score(&m, &sorted).unwrap()
        );
        Ok(())
    })
}

pub fn detector_deterministic() -> Result<(), String> {
    run(
        64,
        (layer(12, 32), id_subset(), 0.0f64..=1.0, any::<u64>()),
        |(p, ids, lambda, s)| {
            let profile = any_profile(p.k(), &ids, lambda, s);
            let (mut a, mut b) = (detect(&p, &profile).unwrap(), detect(&p, &profile).unwrap());
            a.elapsed = Default::default();
            b.elapsed = Default::default();
            prop_assert_eq!(a, b);
            Ok(())
        },
    )
}

pub fn detector_permutation_equivariant() -> Result<(), String> {
    run(
        96,
        (layer_with_perm(12, 32), id_subset(), any::<u64>()),
        |((p, perm), ids, s)| {
            let q = p.permute_classes(&perm).unwrap();
            let sp = anomaly_score(&compute_indicator_matrix(&p), &ids).unwrap();
            let sq = anomaly_score(&compute_indicator_matrix(&q), &ids).unwrap();
            for (i, &src) in perm.iter().enumerate() {
                prop_assert!(close(sq[i], sp[src], 1e-9));
            }
            let reference = any_profile(p.k(), &ids, 0.5, s).clean_reference().to_vec();
            let permuted_ref: Vec<f64> = perm.iter().map(|&src| reference[src]).collect();
            let sim_p = cosine_similarity(&sp, &reference).unwrap();
            let sim_q = cosine_similarity(&sq, &permuted_ref).unwrap();
            prop_assert!(close(sim_p, sim_q, 1e-9));

            let top_p = stats::argmax(&sp);
            let top_q = stats::argmax(&sq);
            let unique_top = sp
                .iter()
                .filter(|&&v| (v - sp[top_p]).abs() <= 1e-9)
                .count()
                == 1;
            if unique_top {
                prop_assert_eq!(perm[top_q], top_p);
            }
            Ok(())
        },
    )
}

pub fn detector_lambda_monotone() -> Result<(), String> {
    let strategy = (
        layer(10, 32),
        id_subset(),
        0.0f64..=1.0,
        0.0f64..=1.0,
        any::<u64>(),
    );
    run(128, strategy, |(p, ids, l1, l2, s)| {
        let (lo, hi) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
        let at_hi = detect(&p, &any_profile(p.k(), &ids, hi, s)).unwrap();
        let at_lo = detect(&p, &any_profile(p.k(), &ids, lo, s)).unwrap();
        prop_assert!(!(at_lo.is_backdoored && !at_hi.is_backdoored));
        Ok(())
    })
}

// ---- calibration ----

pub fn calibration_reference_in_unit_interval() -> Result<(), String> {
    let strategy = (2usize..10, 1usize..32, 1usize..6, any::<u64>(), id_subset());
    run(64, strategy, |(k, d, n, seed, ids)| {
        let cleans: Vec<_> = (0..n)
            .map(|i| random_layer(k, d, seed.wrapping_add(i as u64)))
            .collect();
        let r = clean_reference(&cleans, &ids).unwrap();
        prop_assert!(r.iter().all(|v| (0.0..=1.0).contains(v)), "{:?}", r);
        Ok(())
    })
}

fn sims_and_labels() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    prop::collection::vec((0u32..=1000, any::<bool>()), 2..60).prop_map(|v| {
        let sims = v.iter().map(|(s, _)| f64::from(*s) / 1000.0).collect();
        let labels = v.iter().map(|(_, l)| *l).collect();
        (sims, labels)
    })
}

pub fn calibration_lambda_grid_optimal() -> Result<(), String> {
    run(128, sims_and_labels(), |(sims, labels)| {
        let fit = optimize_lambda_from_similarities(&sims, &labels);
        prop_assert!((0.0..=1.0).contains(&fit.lambda));
        prop_assert_eq!(fit.f1, f1_at(&sims, &labels, fit.lambda));
        for g in 0..=2000 {
            let lambda = f64::from(g) / 2000.0;
            prop_assert!(f1_at(&sims, &labels, lambda) <= fit.f1);
        }
        Ok(())
    })
}

pub fn calibration_profile_deterministic() -> Result<(), String> {
    run(8, (any::<u64>(), id_subset()), |(seed, ids)| {
        let config = small_config(5, 24, 5, seed);
        let a = build_profile(&config, &ids).unwrap();
        let b = build_profile(&config, &ids).unwrap();
        prop_assert_eq!(a.to_json(), b.to_json());
        Ok(())
    })
}

// ---- synth ----

fn attack_spec() -> impl Strategy<Value = SynthSpec> {
    let attacks: Vec<Attack> = Attack::ALL
        .into_iter()
        .filter(|a| *a != Attack::None)
        .collect();
    (
        2usize..12,
        2usize..48,
        prop::sample::select(attacks),
        0.0f64..6.0,
        any::<u64>(),
    )
        .prop_flat_map(|(k, d, attack, strength, seed)| {
            (0..k).prop_map(move |t| {
                SynthSpec::new(k, d)
                    .with_attack(attack, strength, t)
                    .with_seed(seed)
            })
        })
}

pub fn synth_inject_touches_only_target() -> Result<(), String> {
    run(256, attack_spec(), |spec| {
        let clean = generate_clean(&spec).unwrap();
        let attacked = inject(&clean, &spec).unwrap();
        for i in 0..spec.k {
            if i == spec.target {
                continue;
            }
            prop_assert_eq!(
                clean.row(i),
                attacked.row(i),
                "row {} changed by {:?}",
                i,
                spec.attack
            );
            prop_assert_eq!(clean.bias()[i].to_bits(), attacked.bias()[i].to_bits());
        }
        Ok(())
    })
}

pub fn synth_outputs_validate() -> Result<(), String> {
    run(256, attack_spec(), |spec| {
        let attacked = inject(&generate_clean(&spec).unwrap(), &spec).unwrap();
        let again = FinalLayerParams::new(
            attacked.k(),
            attacked.d(),
            attacked.weights().to_vec(),
            attacked.bias().to_vec(),
        );
        prop_assert!(again.is_ok());
        prop_assert!(FinalLayerParams::from_binary(&attacked.to_binary()).is_ok());
        Ok(())
    })
}

/// Mean similarity over 50 seeds must not rise from strength 1 to strength 4.
pub fn synth_similarity_monotone_in_strength() -> Result<(), String> {
    let (k, d) = (10, 128);
    let config = small_config(k, d, 20, 9_000);
    let profile = build_profile(&config, &(0..INDICATOR_COUNT).collect::<Vec<_>>())
        .map_err(|e| e.to_string())?;
    let mean_sim = |strength: f64| -> f64 {
        (0..50u64)
            .map(|s| {
                let spec = SynthSpec::new(k, d)
                    .with_attack(Attack::MeanBoost, strength, (s % k as u64) as usize)
                    .with_seed(50_000 + s);
                let model = inject(&generate_clean(&spec).unwrap(), &spec).unwrap();
                detect(&model, &profile).unwrap().similarity
            })
            .sum::<f64>()
            / 50.0
    };
    let (weak, strong) = (mean_sim(1.0), mean_sim(4.0));
    if strong <= weak {
        Ok(())
    } else {
        Err(format!(
            "mean similarity rose from {weak:.4} to {strong:.4}"
        ))
    }
}

// ---- selection ----

fn valid_ranking(order: &[usize]) -> bool {
    let mut seen = [false; INDICATOR_COUNT];
    order.len() == INDICATOR_COUNT
        && order
            .iter()
            .all(|&n| n < INDICATOR_COUNT && !std::mem::replace(&mut seen[n], true))
}

pub fn selection_rankings_are_permutations() -> Result<(), String> {
    run(4, any::<u64>(), |seed| {
        let config = small_config(6, 24, 10, seed);
        let table = featurize(&config);
        prop_assert!(valid_ranking(&rank_by_accuracy(&config).unwrap().order));
        prop_assert!(valid_ranking(&rank_by_mutual_info(&table).unwrap().order));
        prop_assert!(valid_ranking(
            &rank_by_iforest(&table, DEFAULT_SEED).unwrap().order
        ));
        prop_assert!(valid_ranking(&rfe_ranking(&table).unwrap().ranking));
        Ok(())
    })
}

pub fn selection_row_order_invariant() -> Result<(), String> {
    run(4, any::<u64>(), |seed| {
        let config = small_config(6, 24, 10, seed);
        let mut cleans = config.cleans().to_vec();
        let mut backdoors = config.backdoors().to_vec();
        cleans.reverse();
        backdoors.rotate_left(3);
        let shuffled = ConfigSet::new(cleans, backdoors).unwrap();
        prop_assert_eq!(
            rank_by_accuracy(&config).unwrap().order,
            rank_by_accuracy(&shuffled).unwrap().order
        );
        let mi = |c: &ConfigSet| rank_by_mutual_info(&featurize(c)).unwrap();
        let (a, b) = (mi(&config), mi(&shuffled));
        for (x, y) in a.scores.iter().zip(&b.scores) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        Ok(())
    })
}

pub fn selection_sweep_f1_matches_detect() -> Result<(), String> {
    run(4, any::<u64>(), |seed| {
        let config = small_config(6, 24, 10, seed);
        let ranking = rank_by_accuracy(&config).unwrap().order;
        let result = sweep_subset(&config, &ranking).unwrap();
        let profile = build_profile(&config, &result.chosen).unwrap();
        let mut predicted = Vec::new();
        let mut labels = Vec::new();
        for p in config.cleans() {
            predicted.push(detect(p, &profile).unwrap().is_backdoored);
            labels.push(false);
        }
        for (p, _) in config.backdoors() {
            predicted.push(detect(p, &profile).unwrap().is_backdoored);
            labels.push(true);
        }
        let f1 = dfbscan::calibration::Confusion::from_predictions(&predicted, &labels).f1();
        prop_assert_eq!(f1, result.f1);
        Ok(())
    })
}

/// Every invariant check with a stable name, grouped by module.
pub fn all() -> Vec<(&'static str, Check)> {
    vec![
        ("params: binary round trip is bit-exact", params_round_trip),
        (
            "params: element-count mismatch is rejected",
            params_rejects_count_mismatch,
        ),
        ("indicators: oracle equivalence", indicators_match_oracle),
        (
            "indicators: positive scaling keeps argmax",
            indicators_scale_preserves_argmax,
        ),
        ("indicators: WE sums to one", indicators_we_sums_to_one),
        (
            "indicators: WS range and identical rows",
            indicators_ws_range,
        ),
        (
            "indicators: ZS has mean 0 and std 1",
            indicators_zs_standardized,
        ),
        (
            "indicators: class permutation equivariance",
            indicators_permutation_equivariant,
        ),
        (
            "detector: score has set semantics",
            detector_score_set_semantics,
        ),
        ("detector: detect is deterministic", detector_deterministic),
        (
            "detector: class permutation equivariance",
            detector_permutation_equivariant,
        ),
        (
            "detector: lowering lambda never adds a flag",
            detector_lambda_monotone,
        ),
        (
            "calibration: reference lies in [0,1]",
            calibration_reference_in_unit_interval,
        ),
        (
            "calibration: lambda beats every grid point",
            calibration_lambda_grid_optimal,
        ),
        (
            "calibration: profile is deterministic",
            calibration_profile_deterministic,
        ),
        (
            "synth: inject touches only the target",
            synth_inject_touches_only_target,
        ),
        ("synth: outputs pass validation", synth_outputs_validate),
        (
            "synth: similarity falls with strength",
            synth_similarity_monotone_in_strength,
        ),
        (
            "selection: rankings are permutations",
            selection_rankings_are_permutations,
        ),
        (
            "selection: rankings ignore row order",
            selection_row_order_invariant,
        ),
        (
            "selection: sweep F1 matches detect",
            selection_sweep_f1_matches_detect,
        ),
    ]
}
