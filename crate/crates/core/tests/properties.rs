use std::path::PathBuf;

use jbsde_core::coefficients::{
    Diffusion, Drift, Driver, FnSpec, JumpCoefficient, MarkWeight, ModelCoefficients, Terminal,
};
use jbsde_core::ipde::{operator_b, operator_k, FnField};
use jbsde_core::scenario::{load_scenario, parse_scenario};
use jbsde_core::{LevyMeasure, TruncationIndex};
use proptest::prelude::*;

fn scenarios() -> Vec<PathBuf> {
    let dir: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "scenarios"].iter().collect();
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "toml"))
        .collect();
    v.sort();
    v
}

#[test]
fn shipped_scenarios_round_trip() {
    let files = scenarios();
    assert!(files.len() >= 6);
    for path in files {
        let cfg = load_scenario(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let again = parse_scenario(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again, "{}", path.display());
        cfg.model().unwrap();
        cfg.measure().unwrap();
    }
}

fn jump_model(scale: f64, weight: MarkWeight) -> ModelCoefficients {
    ModelCoefficients::scalar(
        Drift::Zero,
        Diffusion::Zero,
        JumpCoefficient::Linear { scale },
        Terminal::Linear { slope: 1.0, offset: 0.0 },
        Driver::Zero,
    )
    .with_mark_weights(vec![weight])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn registry_specs_round_trip(a in -5.0f64..5.0, b in -5.0f64..5.0) {
        for d in [Drift::Constant(a), Drift::Affine { slope: a, offset: b }, Drift::MeanReverting { rate: a, mean: b }] {
            prop_assert_eq!(Drift::from_spec(&d.to_spec()).unwrap(), d);
        }
        for t in [Terminal::Linear { slope: a, offset: b }, Terminal::Sine { amplitude: a, frequency: b }] {
            prop_assert_eq!(Terminal::from_spec(&t.to_spec()).unwrap(), t);
        }
        let h = Driver::Linear { coupling: vec![a, b], z: b, q: a, constant: 1.0 };
        prop_assert_eq!(Driver::from_spec(&h.to_spec(), 2).unwrap(), h);
        prop_assert!(Driver::from_spec(&FnSpec::new("linear", &[a]), 2).is_err());
    }

    #[test]
    fn operator_b_is_linear(alpha in -3.0f64..3.0, x in -2.0f64..2.0, s in 0.2f64..2.0) {
        let model = jump_model(s, MarkWeight::Norm { scale: 1.0 });
        let mu = LevyMeasure::reference(0.5).unwrap();
        let k = TruncationIndex::new(4).unwrap();
        let u = FnField::new(1, (0.0, 1.0), |_t, x: &[f64]| vec![x[0].sin()]);
        let v = FnField::new(1, (0.0, 1.0), |_t, x: &[f64]| vec![x[0] * x[0] * x[0]]);
        let w = FnField::new(1, (0.0, 1.0), move |_t, x: &[f64]| vec![alpha * x[0].sin() + x[0] * x[0] * x[0]]);
        let bu = operator_b(&u, &model, &mu, 0, 0.3, &[x], k).unwrap();
        let bv = operator_b(&v, &model, &mu, 0, 0.3, &[x], k).unwrap();
        let bw = operator_b(&w, &model, &mu, 0, 0.3, &[x], k).unwrap();
        prop_assert!((bw - alpha * bu - bv).abs() <= 1e-6 * (1.0 + bw.abs()), "{} vs {}", bw, alpha * bu + bv);
    }

    #[test]
    fn operator_k_vanishes_on_affine_fields(a in -3.0f64..3.0, c in -3.0f64..3.0, x in -2.0f64..2.0, s in 0.1f64..3.0) {
        let model = jump_model(s, MarkWeight::Constant(1.0));
        let mu = LevyMeasure::reference(0.5).unwrap();
        let field = FnField::new(1, (0.0, 1.0), move |_t, x: &[f64]| vec![a * x[0] + c]);
        let kk = operator_k(&field, &model, &mu, 0, 0.5, &[x], TruncationIndex::new(8).unwrap(), 1e-3).unwrap();
        prop_assert!(kk.abs() < 1e-8, "{}", kk);
    }

    #[test]
    fn ladder_validation_matches_ordering(ladder in proptest::collection::vec(1u32..40, 0..6)) {
        let text = format!(
            "[measure]\nkind = \"power-law\"\nalpha = 0.5\n[coefficients]\nb = {{ name = \"zero\" }}\n\
             sigma = {{ name = \"zero\" }}\nbeta = {{ name = \"zero\" }}\ngamma = [{{ name = \"zero\" }}]\n\
             g = [{{ name = \"linear\" }}]\nh = [{{ name = \"zero\" }}]\n[start]\nx0 = [0.0]\n\
             [numerics]\nladder = {ladder:?}\n"
        );
        let increasing = ladder.windows(2).all(|w| w[0] < w[1]);
        match parse_scenario(&text) {
            Ok(_) => prop_assert!(increasing),
            Err(e) => {
                prop_assert!(!increasing);
                prop_assert!(e.to_string().contains("ladder not strictly increasing"), "{}", e);
            }
        }
    }
}
