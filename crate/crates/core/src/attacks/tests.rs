use super::*;
use crate::detectors::{ArchId, CnnArchitecture, CnnDetector, DetectorMeta, LayerSpec, ParamTensor};
use crate::image::GrayImage;

/// Linear logistic toy model on 2x2 patches: logit difference is
/// `w . x + b` in model units, H1 iff positive.
fn logistic_detector(w: [f32; 4], b: f32) -> CnnDetector {
    let arch = CnnArchitecture::new(
        ArchId::Deep,
        2,
        vec![LayerSpec::Flatten, LayerSpec::Dense { units: 2 }],
        false,
    )
    .unwrap();
    let mut weights = vec![0.0f32; 8];
    for (i, &wi) in w.iter().enumerate() {
        weights[i * 2 + 1] = wi; // class-1 column
    }
    let params = vec![
        ParamTensor { name: "dense0.weights".into(), shape: vec![4, 2], data: weights },
        ParamTensor { name: "dense0.bias".into(), shape: vec![2], data: vec![0.0, b] },
    ];
    CnnDetector {
        arch,
        params,
        bn_stats: vec![],
        meta: DetectorMeta { task: "toy".into(), seed: 0, epochs_run: 0, best_val_accuracy: 0.0 },
    }
}

/// Constant-output model (dead relu layer): gradient w.r.t. the input is
/// exactly zero and the decision is always H1.
fn dead_gradient_detector() -> CnnDetector {
    let arch = CnnArchitecture::new(
        ArchId::Deep,
        2,
        vec![
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 4 },
            LayerSpec::Relu,
            LayerSpec::Dense { units: 2 },
        ],
        false,
    )
    .unwrap();
    let params = vec![
        ParamTensor { name: "dense0.weights".into(), shape: vec![4, 4], data: vec![0.01; 16] },
        ParamTensor { name: "dense0.bias".into(), shape: vec![4], data: vec![-10.0; 4] },
        ParamTensor { name: "dense1.weights".into(), shape: vec![4, 2], data: vec![0.3; 8] },
        ParamTensor { name: "dense1.bias".into(), shape: vec![2], data: vec![0.0, 4.0] },
    ];
    CnnDetector {
        arch,
        params,
        bn_stats: vec![],
        meta: DetectorMeta { task: "toy".into(), seed: 0, epochs_run: 0, best_val_accuracy: 0.0 },
    }
}

fn patch(values: [f32; 4]) -> GrayImage {
    GrayImage::new(2, 2, values.map(|v| v * 255.0).to_vec()).unwrap()
}

fn linf(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b.iter()).map(|(&x, &y)| (x as f64 - y as f64).abs()).fold(0.0, f64::max)
}

fn l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b.iter()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn attacks_reject_inputs_already_classified_h0() {
    let det = logistic_detector([1.0; 4], -10.0); // everything is H0
    let p = patch([0.3; 4]);
    assert!(ifgsm(&det, &p, &IfgsmConfig::paper()).is_err());
    assert!(pgd(&det, &p, &PgdConfig::paper()).is_err());
    assert!(lbfgs_attack(&det, &p, &LbfgsConfig::default()).is_err());
}

#[test]
fn ifgsm_zero_gradient_returns_input_unchanged() {
    let det = dead_gradient_detector();
    let p = patch([0.4, 0.6, 0.2, 0.8]);
    let cfg = IfgsmConfig { steps: 10, epsilons: vec![0.01, 0.05] };
    let out = ifgsm(&det, &p, &cfg).unwrap();
    assert!(!out.success);
    assert_eq!(out.adversarial, p.to_model_input());
    assert_eq!(out.psnr_db, f64::INFINITY);
    assert_eq!(out.iterations, 10);
}

#[test]
fn ifgsm_selects_minimum_distortion_strength() {
    // Margin small enough that several grid strengths succeed.
    let det = logistic_detector([2.0, 2.0, 2.0, 2.0], -2.0);
    let p = patch([0.2, 0.25, 0.35, 0.4]); // w.x + b = 0.4 > 0 -> H1
    let cfg = IfgsmConfig::paper();
    let out = ifgsm(&det, &p, &cfg).unwrap();
    assert!(out.success);

    // Exhaustive re-check: the chosen strength must minimize the distortion
    // among all successful grid members.
    let x0 = p.to_model_input();
    let mut best: Option<(f64, f64)> = None;
    let mut successful = Vec::new();
    for &eps in &cfg.epsilons {
        let (x, ok, _) = super::ifgsm::signed_ascent(&det, &x0, eps, cfg.steps, None).unwrap();
        if ok {
            successful.push(eps);
            let m = mse(&x, &x0);
            if best.as_ref().map_or(true, |(bm, _)| m < *bm) {
                best = Some((m, eps));
            }
        }
    }
    let Hyper::Epsilon(chosen) = out.hyperparameter else { panic!("epsilon expected") };
    assert_eq!(chosen, best.unwrap().1, "returned strength must minimize distortion");
    assert!(successful.contains(&chosen));
    let probs = predict_probs(&det, &out.adversarial).unwrap();
    assert_eq!(decide(&probs), crate::image::Label::Original);
}

#[test]
fn ifgsm_picks_smallest_strength_when_one_step_suffices() {
    // Tiny margin: every grid strength flips the decision in a single step,
    // so distortion is monotone in the strength and the smallest successful
    // value must win.
    let det = logistic_detector([2.0, 2.0, 2.0, 2.0], -2.39);
    let p = patch([0.2, 0.25, 0.35, 0.4]); // margin 0.01
    let cfg = IfgsmConfig { steps: 10, epsilons: (1..=10).map(|k| k as f64 * 0.01).collect() };
    let out = ifgsm(&det, &p, &cfg).unwrap();
    assert!(out.success);
    assert_eq!(out.iterations, 1);
    let Hyper::Epsilon(chosen) = out.hyperparameter else { panic!("epsilon expected") };
    assert_eq!(chosen, 0.01);
}

#[test]
fn pgd_respects_the_ball_and_zero_bound_is_identity() {
    let det = logistic_detector([2.0, 2.0, 2.0, 2.0], -2.0);
    let p = patch([0.2, 0.25, 0.35, 0.4]);
    let x0 = p.to_model_input();

    let cfg = PgdConfig { step_epsilon: 0.05, alpha: 0.08, steps: 10, binary_search: false, search_rounds: 0 };
    let out = pgd(&det, &p, &cfg).unwrap();
    assert!(linf(&out.adversarial, &x0) <= cfg.alpha + 1e-6);
    assert!(out.success);

    let zero = PgdConfig { step_epsilon: 0.05, alpha: 0.0, steps: 10, binary_search: false, search_rounds: 0 };
    let out = pgd(&det, &p, &zero).unwrap();
    assert!(!out.success);
    assert_eq!(out.adversarial, x0);
}

#[test]
fn pgd_binary_search_shrinks_the_bound() {
    let det = logistic_detector([2.0, 2.0, 2.0, 2.0], -2.0);
    let p = patch([0.2, 0.25, 0.35, 0.4]);
    let x0 = p.to_model_input();
    let cfg = PgdConfig { step_epsilon: 0.05, alpha: 0.3, steps: 10, binary_search: true, search_rounds: 10 };
    let out = pgd(&det, &p, &cfg).unwrap();
    assert!(out.success);
    let Hyper::Alpha(alpha) = out.hyperparameter else { panic!("alpha expected") };
    // The needed max-norm distance is 0.1 per pixel; the search must get
    // close to it from above while staying successful.
    assert!(alpha < 0.3, "search did not shrink the bound: {alpha}");
    assert!(linf(&out.adversarial, &x0) <= alpha + 1e-6);
    let probs = predict_probs(&det, &out.adversarial).unwrap();
    assert_eq!(decide(&probs), crate::image::Label::Original);
}

#[test]
fn lbfgs_objective_at_zero_matches_target_loss() {
    let det = logistic_detector([1.5, -0.5, 2.0, 0.5], -0.4);
    let p = patch([0.5, 0.4, 0.3, 0.6]);
    let x0 = p.to_model_input();
    let (f, _, _) = super::lbfgs::objective(&det, &x0, &vec![0.0; 4], 10.0).unwrap();
    let ig = det.input_gradient(&x0, 0).unwrap();
    assert!((f - ig.loss as f64).abs() < 1e-9);
}

#[test]
fn lbfgs_finds_near_minimal_perturbation_on_linear_model() {
    let w = [2.0f32, 1.0, -1.0, 1.5];
    let b = -0.8f32;
    let det = logistic_detector(w, b);
    let p = patch([0.5, 0.5, 0.5, 0.5]);
    let x0 = p.to_model_input();
    let margin: f64 =
        w.iter().zip(x0.iter()).map(|(&wi, &xi)| wi as f64 * xi as f64).sum::<f64>() + b as f64;
    assert!(margin > 0.0, "start must be H1");
    let wnorm = w.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    let distance = margin / wnorm;

    let out = lbfgs_attack(&det, &p, &LbfgsConfig::default()).unwrap();
    assert!(out.success);
    let norm = l2(&out.adversarial, &x0);
    assert!(
        (norm - distance).abs() <= 0.05 * distance,
        "perturbation norm {norm} vs point-to-hyperplane distance {distance}"
    );
}

#[test]
fn lbfgs_sweep_norms_do_not_increase_with_trade_off() {
    let det = logistic_detector([2.0, 2.0, 2.0, 2.0], -2.0);
    let p = patch([0.35, 0.3, 0.25, 0.3]);
    let x0 = p.to_model_input();
    let cfg = LbfgsConfig::default();
    let mut last: Option<f64> = None;
    for &c in &cfg.c_grid {
        let single = LbfgsConfig { c_grid: vec![c], bisection_steps: 0, ..cfg.clone() };
        let out = lbfgs_attack(&det, &p, &single).unwrap();
        if out.success {
            let norm = l2(&out.adversarial, &x0);
            if let Some(prev) = last {
                assert!(norm <= prev + 1e-6, "norm grew from {prev} to {norm} at c={c}");
            }
            last = Some(norm);
        }
    }
    assert!(last.is_some(), "no trade-off value succeeded");
}

#[test]
fn batch_evaluator_summarizes_and_is_consistent() {
    let det = logistic_detector([2.0, 2.0, 2.0, 2.0], -2.0);
    let patches: Vec<GrayImage> = vec![
        patch([0.2, 0.25, 0.35, 0.4]),
        patch([0.35, 0.3, 0.25, 0.38]),
        patch([0.1, 0.12, 0.08, 0.1]), // classified H0: recorded as an error
    ];
    let cfg = AttackConfig::Fgsm(IfgsmConfig::paper());
    let (outcomes, summary) = evaluate_attack_batch(&det, &patches, &cfg).unwrap();
    assert_eq!(outcomes.len(), 3);
    assert_eq!(summary.errored, 1);
    assert_eq!(summary.attempted, 2);
    assert_eq!(summary.succeeded, 2);
    assert!(summary.success_rate >= 0.99);
    assert!(summary.mean_psnr_db.unwrap() > 20.0);
    for pa in &outcomes {
        if let Ok(o) = &pa.outcome {
            if o.success {
                let probs = predict_probs(&det, &o.adversarial).unwrap();
                assert_eq!(decide(&probs), crate::image::Label::Original);
            }
        }
    }
}

#[test]
fn batch_evaluator_on_empty_input() {
    let det = logistic_detector([1.0; 4], -1.0);
    let cfg = AttackConfig::Pgd(PgdConfig::paper());
    let (outcomes, summary) = evaluate_attack_batch(&det, &[], &cfg).unwrap();
    assert!(outcomes.is_empty());
    assert_eq!(summary.attempted, 0);
    assert_eq!(summary.succeeded, 0);
    assert_eq!(summary.success_rate, 0.0);
    assert!(summary.mean_psnr_db.is_none());
}

#[test]
fn cache_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let outcomes = vec![
        PatchAttack {
            patch_index: 0,
            outcome: Ok(AttackOutcome {
                adversarial: vec![0.1, 0.9, 1.0e-40, 0.5],
                success: true,
                psnr_db: 44.5,
                hyperparameter: Hyper::Epsilon(0.003),
                iterations: 4,
            }),
        },
        PatchAttack { patch_index: 1, outcome: Err("already classified H0".into()) },
        PatchAttack {
            patch_index: 2,
            outcome: Ok(AttackOutcome {
                adversarial: vec![0.25; 4],
                success: false,
                psnr_db: f64::INFINITY,
                hyperparameter: Hyper::Alpha(0.6),
                iterations: 10,
            }),
        },
    ];
    write_cache(dir.path(), "fgsm", &outcomes).unwrap();
    let back = read_cache(dir.path(), "fgsm").unwrap();
    assert_eq!(back.len(), 3);
    let Ok(o0) = &back[0].outcome else { panic!() };
    let Ok(orig0) = &outcomes[0].outcome else { panic!() };
    assert_eq!(
        o0.adversarial.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        orig0.adversarial.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(o0.psnr_db, 44.5);
    assert_eq!(o0.hyperparameter, Hyper::Epsilon(0.003));
    assert!(back[1].outcome.is_err());
    let Ok(o2) = &back[2].outcome else { panic!() };
    assert_eq!(o2.psnr_db, f64::INFINITY);

    assert!(matches!(
        read_cache(dir.path(), "missing"),
        Err(crate::error::Error::MissingPrerequisite(_))
    ));
}
