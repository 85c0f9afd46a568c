//! End to end on a small synthetic superpoll: generator, estimators, aggregation, MAE.

use mvmrp::baselines::{fit_estimator, naive_formula, Estimator, Fitted, FittedDocument, SurveyInput};
use mvmrp::formula::parse_formula;
use mvmrp::model::FitOptions;
use mvmrp::poststrat::{aggregate, mae, Quantity};
use mvmrp::sim::{
    generate_superpoll, run_validation, EstimatorSpec, GeneratorSpec, Method, Superpoll, TruthKind, ValidationPlan,
};

const SMALL_FORMULA: &str = "response ~ choice + (1 | state : choice) + (1 | race : choice) \
    + (1 | state : party) + (0 + demvote | choice) + v_fe(case_id)";

fn small_spec() -> GeneratorSpec {
    GeneratorSpec {
        n_geographies: 6,
        n_divisions: 2,
        demographics: vec![("race".into(), 3), ("educ".into(), 2), ("age".into(), 2), ("gender".into(), 2)],
        superpoll_size: 40_000,
        sample_size: 500,
        replications: 2,
        ..Default::default()
    }
}

fn small() -> Superpoll {
    generate_superpoll(&small_spec()).unwrap()
}

fn fit_and_predict(sp: &Superpoll, est: Estimator, formula: &str) -> (Fitted, Vec<mvmrp::poststrat::CellPrediction>) {
    let survey = sp.sample(0);
    let input = SurveyInput { survey: &survey, categories: &sp.categories, alts: &sp.alts };
    let fitted = fit_estimator(est, &parse_formula(formula).unwrap(), input, &FitOptions::default()).unwrap();
    let preds = fitted.predict(&sp.frame, &sp.categories, &sp.alts, false).unwrap();
    (fitted, preds)
}

#[test]
fn superpoll_truth_tracks_generative_truth() {
    let sp = small();
    for q in Quantity::all(&sp.categories) {
        let err = mae(&sp.superpoll_truth, &sp.generative_truth, &q).unwrap();
        assert!(err < 0.03, "{q}: {err}");
    }
}

#[test]
fn generator_is_deterministic_and_replications_differ() {
    let (a, b) = (small(), small());
    assert_eq!(a.cell_joint, b.cell_joint);
    assert_eq!(a.sample(0).case_ids, b.sample(0).case_ids);
    assert_ne!(a.sample(0).case_ids, a.sample(1).case_ids);
    assert_eq!(a.sample(1).n_cases(), small_spec().sample_size);
}

#[test]
fn independent_questions_factorize_within_cells() {
    let spec = GeneratorSpec { association: 0.0, interaction_sd: 0.0, division_sd: 0.0, ..small_spec() };
    let sp = generate_superpoll(&spec).unwrap();
    let cats = &sp.categories;
    for joint in &sp.cell_joint {
        let marg = |q: usize, level: usize| -> f64 {
            (0..cats.len()).filter(|&c| cats.component(c, q) == level).map(|c| joint[c]).sum()
        };
        for (c, p) in joint.iter().enumerate() {
            let prod: f64 = (0..cats.questions.len()).map(|q| marg(q, cats.component(c, q))).product();
            assert!((p - prod).abs() < 1e-12);
        }
    }
}

#[test]
fn truth_passthrough_has_zero_error() {
    let sp = small();
    let plan = ValidationPlan {
        estimators: vec![EstimatorSpec { label: "truth".into(), method: Method::Truth }],
        reference: "truth".into(),
        truth: TruthKind::Superpoll,
        fit: FitOptions::default(),
        variance_adjusted: false,
        jobs: 1,
    };
    let report = run_validation(&sp, &plan).unwrap();
    assert!(!report.records.is_empty());
    assert!(report.records.iter().all(|r| r.mae == 0.0));
}

#[test]
fn every_estimator_yields_probabilities() {
    let sp = small();
    for est in Estimator::ALL {
        let (_, preds) = fit_and_predict(&sp, est, SMALL_FORMULA);
        assert_eq!(preds.len(), sp.frame.n_cells());
        for p in &preds {
            assert!(p.probs.iter().all(|v| (0.0..=1.0).contains(v)), "{est}");
            assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-10, "{est}");
        }
        let report = aggregate(&preds, &sp.categories).unwrap();
        assert_eq!(report.geographies.len(), sp.spec.n_geographies);
    }
}

#[test]
fn naive_joint_is_product_of_its_marginals() {
    let sp = small();
    let (_, preds) = fit_and_predict(&sp, Estimator::Naive, SMALL_FORMULA);
    let cats = &sp.categories;
    for p in &preds {
        let marg: Vec<Vec<f64>> = (0..cats.questions.len())
            .map(|q| {
                let mut m = vec![0.0; cats.questions[q].levels.len()];
                for (c, v) in p.probs.iter().enumerate() {
                    m[cats.component(c, q)] += v;
                }
                m
            })
            .collect();
        for (c, v) in p.probs.iter().enumerate() {
            let prod: f64 = (0..cats.questions.len()).map(|q| marg[q][cats.component(c, q)]).product();
            assert!((v - prod).abs() < 1e-12);
        }
    }
}

#[test]
fn naive_rewrite_keeps_per_question_terms() {
    let sp = small();
    let ast = parse_formula(SMALL_FORMULA).unwrap();
    let party = naive_formula(&ast, &sp.categories, &sp.alts, 0).unwrap();
    let canon = party.to_string();
    assert!(canon.contains("state : party"), "{canon}");
    assert!(!canon.contains("choice"), "{canon}");
    let policy = naive_formula(&ast, &sp.categories, &sp.alts, 1).unwrap();
    assert!(!policy.to_string().contains("party"), "{policy}");

    let crossed = parse_formula("response ~ (1 | party : policy) + v_fe(case_id)").unwrap();
    let err = naive_formula(&crossed, &sp.categories, &sp.alts, 0).unwrap_err();
    assert!(err.to_string().contains("remove"), "{err}");
}

#[test]
fn fitted_document_round_trips_predictions() {
    let sp = small();
    let dir = tempfile::tempdir().unwrap();
    for est in [Estimator::Mvmrp, Estimator::Naive] {
        let (fitted, preds) = fit_and_predict(&sp, est, SMALL_FORMULA);
        let path = dir.path().join(format!("{est}.json"));
        FittedDocument::new(est, &fitted).save(&path).unwrap();
        let back = FittedDocument::load(&path).unwrap().into_fitted().unwrap();
        let again = back.predict(&sp.frame, &sp.categories, &sp.alts, false).unwrap();
        for (a, b) in preds.iter().zip(&again) {
            assert_eq!(a.probs, b.probs);
        }
    }
}

#[test]
fn multivariate_model_beats_naive_on_associated_questions() {
    let spec = GeneratorSpec { association: 1.5, sample_size: 1500, ..small_spec() };
    let sp = generate_superpoll(&spec).unwrap();
    let truth = sp.truth(TruthKind::Generative);
    let (_, mv) = fit_and_predict(&sp, Estimator::Mvmrp, SMALL_FORMULA);
    let (_, nv) = fit_and_predict(&sp, Estimator::Naive, SMALL_FORMULA);
    let e_mv = mae(&aggregate(&mv, &sp.categories).unwrap(), truth, &Quantity::Joint).unwrap();
    let e_nv = mae(&aggregate(&nv, &sp.categories).unwrap(), truth, &Quantity::Joint).unwrap();
    assert!(e_mv < e_nv, "mvmrp {e_mv} vs naive {e_nv}");
}
