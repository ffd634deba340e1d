use std::collections::BTreeSet;

use metafl::aggregators::{coordinate_wise_median, fedavg, krum, max_krum_f, norm_bounding, trimmed_mean, Rule};
use metafl::config::ExperimentConfig;
use metafl::linalg::ParameterVector;
use metafl::orchestrator::{Mode, Sampling};
use metafl::secagg::SecAggSession;
use metafl::{Scheme, Topology};
use proptest::prelude::*;

fn vectors(n: std::ops::RangeInclusive<usize>, d: usize) -> impl Strategy<Value = Vec<ParameterVector<f64>>> {
    prop::collection::vec(prop::collection::vec(-100.0f64..100.0, d), n)
        .prop_map(|vs| vs.into_iter().map(|v| ParameterVector::new(v).unwrap()).collect())
}

fn close(a: &ParameterVector<f64>, b: &ParameterVector<f64>, tol: f64) -> bool {
    a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= tol)
}

proptest! {
    #[test]
    fn secagg_reveals_the_mean_of_survivors(
        updates in vectors(2..=8, 5),
        drop_mask in any::<u8>(),
        seed in any::<u64>(),
    ) {
        let n = updates.len();
        let cohort: Vec<usize> = (0..n).map(|i| 10 * i + 3).collect();
        let mut dropped: BTreeSet<usize> = (0..n).filter(|i| drop_mask >> i & 1 == 1).collect();
        while n - dropped.len() < 2 {
            let first = *dropped.iter().next().unwrap();
            dropped.remove(&first);
        }
        let mut s = SecAggSession::prepare(&cohort, 5, seed).unwrap();
        let mut uploads = Vec::new();
        for (i, u) in updates.iter().enumerate() {
            let m = s.commit(cohort[i], u).unwrap();
            if !dropped.contains(&i) {
                uploads.push(m);
            }
        }
        let drop_ids: BTreeSet<usize> = dropped.iter().map(|&i| cohort[i]).collect();
        let got = s.finalize(&uploads, &drop_ids).unwrap();
        let kept: Vec<ParameterVector<f64>> =
            (0..n).filter(|i| !dropped.contains(i)).map(|i| updates[i].clone()).collect();
        prop_assert!(close(&got, &fedavg(&kept).unwrap(), 1e-9));
    }

    #[test]
    fn robust_rules_ignore_aggregand_order(mut v in vectors(5..=9, 4), rot in 0usize..9) {
        let f = max_krum_f(v.len()).unwrap();
        let before = (krum(&v, f).unwrap(), coordinate_wise_median(&v).unwrap(), trimmed_mean(&v, 0.2).unwrap());
        let r = rot % v.len();
        v.rotate_left(r);
        prop_assert_eq!(krum(&v, f).unwrap(), before.0);
        prop_assert!(close(&coordinate_wise_median(&v).unwrap(), &before.1, 1e-12));
        prop_assert!(close(&trimmed_mean(&v, 0.2).unwrap(), &before.2, 1e-9));
    }

    #[test]
    fn coordinate_rules_stay_inside_the_data_range(v in vectors(1..=9, 3), beta in 0.0f64..0.49) {
        let outputs = [coordinate_wise_median(&v).unwrap(), trimmed_mean(&v, beta).unwrap()];
        for j in 0..3 {
            let lo = v.iter().map(|x| x[j]).fold(f64::INFINITY, f64::min);
            let hi = v.iter().map(|x| x[j]).fold(f64::NEG_INFINITY, f64::max);
            for o in &outputs {
                prop_assert!(o[j] >= lo - 1e-9 && o[j] <= hi + 1e-9);
            }
        }
    }

    #[test]
    fn krum_selects_one_of_its_inputs(v in vectors(3..=10, 3)) {
        let out = krum(&v, max_krum_f(v.len()).unwrap()).unwrap();
        prop_assert!(v.contains(&out));
    }

    #[test]
    fn norm_bounding_never_exceeds_the_smallest_norm(v in vectors(1..=8, 4)) {
        let m = v.iter().map(|x| x.norm()).fold(f64::INFINITY, f64::min);
        prop_assert!(norm_bounding(&v).unwrap().norm() <= m + 1e-9);
    }

    #[test]
    fn config_round_trips_through_toml(
        seed in any::<u32>(),
        cohorts in 1usize..20,
        size in 2usize..8,
        meta in any::<bool>(),
        rule in prop::sample::select(Rule::ALL.to_vec()),
        scheme in prop::sample::select(vec![Scheme::None, Scheme::Naive, Scheme::Replacement]),
        freq in 1usize..6,
        k in 1usize..6,
        independent in any::<bool>(),
        lr in 0.01f64..1.0,
        hidden in prop::collection::vec(1usize..40, 0..3),
    ) {
        let mut cfg = ExperimentConfig { seed: seed as u64, ..ExperimentConfig::default() };
        Topology { mode: if meta { Mode::Meta } else { Mode::Baseline }, cohorts, cohort_size: size }.apply(&mut cfg.fl);
        cfg.aggregator.rule = rule;
        cfg.attack.scheme = scheme;
        cfg.attack.frequency = freq;
        cfg.attack.k = k;
        cfg.fl.sampling = if independent { Sampling::Independent } else { Sampling::InOrder };
        cfg.train.lr = lr;
        cfg.model.hidden = hidden;
        let text = cfg.to_toml_string();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_toml_string(), text);
    }
}

#[test]
fn krum_f_bound() {
    assert_eq!(max_krum_f(2), None);
    assert_eq!(max_krum_f(3), Some(0));
    assert_eq!(max_krum_f(5), Some(1));
    assert_eq!(max_krum_f(15), Some(6));
    assert_eq!(max_krum_f(16), Some(6));
}
