use gama_core::eval::{
    check_budget, evaluate_attack, hamming_score, median_blur, parse_report_csv, report_csv,
    AttackRow, Defense, GeneratorInfo, IdentityPerturber, Scenario, Victim,
};
use gama_core::nets::{train_surrogate, Model, SurrogateTrainConfig};
use gama_core::promptbank::{least_similar, PromptBank, TextPrompt};
use gama_core::scenegen::{compute_cooccurrence, generate_dataset, ImageDims, SceneConfig};
use gama_tensor::Tensor;
use proptest::prelude::*;

fn labels(c: usize) -> impl Strategy<Value = Vec<bool>> {
    prop::collection::vec(any::<bool>(), c)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hamming_is_a_bounded_similarity(rows in prop::collection::vec((labels(6), labels(6)), 1..20)) {
        let (p, t): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
        let s = hamming_score(&p, &t).unwrap();
        prop_assert!((0.0..=100.0).contains(&s));
        prop_assert_eq!(s, hamming_score(&t, &p).unwrap());
        prop_assert_eq!(hamming_score(&t, &t).unwrap(), 100.0);
        prop_assert_eq!(s == 100.0, p == t);
    }

    #[test]
    fn median_stays_within_window_range(
        c in 1usize..3, h in 3usize..9, w in 3usize..9,
        seed in any::<u64>(),
    ) {
        let dims = ImageDims { channels: c, height: h, width: w };
        let mut rng = gama_tensor::Rng::seed(seed);
        let img: Vec<f32> = (0..dims.numel()).map(|_| rng.uniform() as f32).collect();
        let out = median_blur(&img, dims, 3).unwrap();
        let plane = h * w;
        for ch in 0..c {
            let src = &img[ch * plane..(ch + 1) * plane];
            let (lo, hi) = src.iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            for v in &out[ch * plane..(ch + 1) * plane] {
                prop_assert!(src.contains(v));
                prop_assert!(*v >= lo && *v <= hi);
            }
        }
    }

    #[test]
    fn budget_check_matches_definition(
        x in prop::collection::vec(0.0f32..=1.0, 8),
        d in prop::collection::vec(-0.1f32..0.1, 8),
    ) {
        let eps = 0.05;
        let adv: Vec<f32> = x.iter().zip(&d).map(|(a, b)| a + b).collect();
        let ok = adv.iter().zip(&x).all(|(a, b)| (0.0..=1.0).contains(a) && (a - b).abs() <= eps + 1e-6);
        prop_assert_eq!(check_budget(&x, &adv, eps).is_ok(), ok);
    }

    #[test]
    fn least_similar_returns_a_minimal_candidate(
        rows in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 4), 2..12),
        rho in prop::collection::vec(-1.0f32..1.0, 4),
        pick in prop::collection::vec(any::<prop::sample::Index>(), 1..8),
    ) {
        prop_assume!(rows.iter().chain(std::iter::once(&rho)).all(|r| r.iter().map(|v| v * v).sum::<f32>() > 1e-3));
        let p = rows.len();
        let bank = PromptBank {
            prefix: "p".into(),
            prompts: (0..p).map(|i| TextPrompt { class_pair: (0, 1), text: i.to_string() }).collect(),
            embeddings: Tensor::new(vec![p, 4], rows.concat()).unwrap(),
            encoder_fingerprint: String::new(),
        };
        let cand: Vec<usize> = pick.iter().map(|i| i.index(p)).collect();
        let (best, row) = least_similar(&rho, &bank, &cand).unwrap();
        prop_assert!(cand.contains(&best));
        prop_assert_eq!(row, bank.row(best));
        let cos = |r: &[f32]| {
            let d: f64 = r.iter().zip(&rho).map(|(a, b)| *a as f64 * *b as f64).sum();
            let n = |v: &[f32]| v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            d / (n(r) * n(&rho))
        };
        for &c in &cand {
            prop_assert!(cos(bank.row(best)) <= cos(bank.row(c)));
        }
    }

    #[test]
    fn report_csv_round_trips_at_six_decimals(
        vals in prop::collection::vec((0.0f64..100.0, 0.0f64..100.0), 1..6),
    ) {
        let rows: Vec<AttackRow> = vals.iter().enumerate().map(|(i, &(c, a))| AttackRow {
            generator_id: format!("gama-s{i}"),
            surrogate_id: "arch0".into(),
            victim_id: format!("arch{i}"),
            task: "multi_label".into(),
            defense: "none".into(),
            scenario: if i == 0 { Scenario::White } else { Scenario::Black },
            metric: "hamming".into(),
            clean: c,
            attacked: a,
            epsilon: 10.0 / 255.0,
        }).collect();
        let back = parse_report_csv(&report_csv(&rows).unwrap()).unwrap();
        prop_assert_eq!(back.len(), rows.len());
        for (a, b) in rows.iter().zip(&back) {
            prop_assert!((a.clean - b.clean).abs() <= 5e-7);
            prop_assert!((a.attacked - b.attacked).abs() <= 5e-7);
            prop_assert_eq!(&a.victim_id, &b.victim_id);
            prop_assert_eq!(a.scenario, b.scenario);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn scenes_respect_label_and_pixel_invariants(seed in any::<u64>(), samples in 12usize..40) {
        let cfg = SceneConfig {
            samples,
            seed,
            dims: ImageDims { channels: 3, height: 16, width: 16 },
            ..Default::default()
        };
        let d = generate_dataset(&cfg).unwrap();
        prop_assert_eq!(d.samples.len(), samples);
        let mut split: Vec<usize> = d.split.train.iter().chain(&d.split.test).copied().collect();
        split.sort_unstable();
        prop_assert_eq!(split, (0..samples).collect::<Vec<_>>());
        for s in &d.samples {
            let n = s.labels.iter().filter(|&&b| b).count();
            prop_assert!((1..=4).contains(&n));
            prop_assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let o = compute_cooccurrence(&d).unwrap();
        prop_assert!(o.is_symmetric());
        for i in 0..o.size() {
            prop_assert!(!o.get(i, i));
        }
        for (i, j) in o.pairs() {
            prop_assert!(d.allowed_pairs.contains(&(i, j)));
        }
    }
}

#[test]
fn identity_perturbation_leaves_scores_unchanged() {
    let d = generate_dataset(&SceneConfig {
        samples: 40,
        dims: ImageDims {
            channels: 3,
            height: 16,
            width: 16,
        },
        ..Default::default()
    })
    .unwrap();
    let (m, _) = train_surrogate(
        &d,
        &SurrogateTrainConfig {
            epochs: 1,
            ..Default::default()
        },
    )
    .unwrap();
    let victims = [
        Victim::new("a", m.clone(), Defense::None),
        Victim::new("b", m.clone(), Defense::MedianBlur { window: 3 }),
    ];
    let info = GeneratorInfo {
        id: "none-s0".into(),
        surrogate_id: "a".into(),
        surrogate_fingerprints: vec![m.fingerprint()],
        distribution_id: d.distribution_id.clone(),
    };
    let report = evaluate_attack(
        &IdentityPerturber { eps: 10.0 / 255.0 },
        &info,
        &victims,
        &d,
    )
    .unwrap();
    assert_eq!(report.rows.len(), 2);
    assert_eq!(report.rows[0].scenario, Scenario::White);
    // A defence wraps the same checkpoint, so the scenario stays white-box.
    assert_eq!(report.rows[1].scenario, Scenario::White);
    for r in &report.rows {
        assert_eq!(r.clean, r.attacked);
    }

    let (other, _) = train_surrogate(
        &d,
        &SurrogateTrainConfig {
            epochs: 1,
            seed: 2,
            ..Default::default()
        },
    )
    .unwrap();
    let report = evaluate_attack(
        &IdentityPerturber { eps: 10.0 / 255.0 },
        &info,
        &[Victim::new("c", other, Defense::None)],
        &d,
    )
    .unwrap();
    assert_eq!(report.rows[0].scenario, Scenario::Black);
}
