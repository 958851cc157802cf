use std::f64::consts::PI;

use gbdsde::bdsde::{regress_conditional, solve_gbdsde_picard, BdsdeConfig, BdsdeProblem, Ensemble, RegressionBasis};
use gbdsde::gbm::TimeGrid;
use gbdsde::hunt::{CoefficientField, InitialLaw};
use gbdsde::pde::{solve_gspde_picard, Boundary, GspdeData, GspdeProblem, PicardConfig, SpatialGrid};
use gbdsde::reaction::Reaction;
use gbdsde::scenario::ScenarioSet;
use gbdsde::verify::*;
use gbdsde::LabError;

fn gaussian_init() -> InitialLaw {
    InitialLaw::Gaussian {
        mean: 0.0,
        std: 1.0,
        half_width: 2.5,
    }
}

fn shared(set: &ScenarioSet, n: usize, levels: usize, n_b: usize, n_x: usize, seed: u64) -> SharedRandomness {
    let time = TimeGrid::new(0.5, n).unwrap();
    let schedules = SharedRandomness::constant_schedules(set, n).unwrap();
    SharedRandomness::new(time, levels, set.clone(), schedules, gaussian_init(), 1, n_b, n_x, seed).unwrap()
}

fn rep_problem(set: &ScenarioSet, terminal: Reaction, f: Reaction, g: Reaction, n: usize) -> BdsdeProblem {
    BdsdeProblem::new(
        terminal,
        f,
        vec![g],
        CoefficientField::constant(1, 0.5).unwrap(),
        set.clone(),
        TimeGrid::new(0.5, n).unwrap(),
    )
    .unwrap()
}

fn settings<'a>(grid: SpatialGrid, pde: &'a PicardConfig, bd: &'a BdsdeConfig) -> RepresentationSettings<'a> {
    RepresentationSettings {
        grid,
        pde,
        bdsde: bd,
        checkpoints: &[0.0, 0.125, 0.25, 0.375],
        tolerance: 0.05,
    }
}

#[test]
fn representation_without_drivers_matches_the_semigroup() {
    let set = ScenarioSet::scalar(&[1.0]).unwrap();
    let rand = shared(&set, 8, 1, 2, 1500, 1);
    let zero = Reaction::Zero {};
    let psi = Reaction::Gaussian {
        amplitude: 1.0,
        width: 1.0,
        center: 0.0,
    };
    let p = rep_problem(&set, psi, zero.clone(), zero, 8);
    let grid = SpatialGrid::new(1, 8.0, 321, Boundary::Dirichlet).unwrap();
    let pde = PicardConfig {
        substeps: 4,
        ..Default::default()
    };
    let bd = BdsdeConfig::default();
    let r = representation_study(&p, &rand, settings(grid, &pde, &bd)).unwrap();
    assert!(r.within_tolerance(), "{:?}", r.levels[0].worst_y);
}

#[test]
fn representation_of_a_constant_is_exact() {
    let set = ScenarioSet::scalar(&[0.5, 1.0]).unwrap();
    let rand = shared(&set, 4, 1, 2, 300, 2);
    let zero = Reaction::Zero {};
    let p = rep_problem(&set, Reaction::Constant { value: 2.0 }, zero.clone(), zero, 4);
    let grid = SpatialGrid::new(1, PI, 33, Boundary::Periodic).unwrap();
    let pde = PicardConfig::default();
    let bd = BdsdeConfig {
        basis: RegressionBasis::polynomial(2),
        ..Default::default()
    };
    let r = representation_study(&p, &rand, settings(grid, &pde, &bd)).unwrap();
    for s in &r.levels[0].per_scenario {
        assert!(s.y_rel_rms.iter().all(|v| *v < 1e-12), "{:?}", s.y_rel_rms);
    }
}

#[test]
fn representation_rejects_mismatched_randomness() {
    let set = ScenarioSet::scalar(&[1.0]).unwrap();
    let a = shared(&set, 4, 1, 2, 200, 3);
    let b = shared(&set, 4, 1, 2, 200, 4);
    let zero = Reaction::Zero {};
    let p = rep_problem(&set, Reaction::Constant { value: 1.0 }, zero.clone(), zero, 4);
    let grid = SpatialGrid::new(1, PI, 33, Boundary::Periodic).unwrap();
    let gspde = p.to_gspde(grid).unwrap();
    let fam_a = a.family(0).unwrap();
    let fam_b = b.family(0).unwrap();
    let x = a.hunt(p.field(), 0).unwrap();
    let (u, _) = solve_gspde_picard(&gspde, &PicardConfig::default(), &fam_a).unwrap();
    let cfg = BdsdeConfig {
        basis: RegressionBasis::polynomial(2),
        ..Default::default()
    };
    let sol = solve_gbdsde_picard(
        &p,
        Ensemble {
            bundles: &fam_b,
            x: &x,
        },
        &cfg,
    )
    .unwrap();
    let err = check_representation(&u, &sol, &x, &fam_a, p.field(), &[0.0], 0.05).unwrap_err();
    assert!(matches!(err, LabError::Usage(_)), "{err}");
    let err = check_representation(&u, &sol, &x, &fam_b, p.field(), &[0.1], 0.05).unwrap_err();
    assert!(matches!(err, LabError::Usage(_)));
}

fn comparison_base(levels: usize) -> (GspdeProblem, SharedRandomness) {
    let set = ScenarioSet::scalar(&[0.5, 1.0]).unwrap();
    let rand = shared(&set, 8, levels, 3, 10, 5);
    let p = GspdeProblem::new(GspdeData {
        grid: SpatialGrid::new(1, PI, 65, Boundary::Periodic).unwrap(),
        time: TimeGrid::new(0.5, 8).unwrap(),
        field: CoefficientField::sinusoidal_1d(0.5, 0.5).unwrap(),
        scenarios: set,
        terminal: Reaction::Gaussian {
            amplitude: 1.0,
            width: 0.8,
            center: 0.0,
        },
        f: Reaction::Sum {
            terms: vec![
                Reaction::SinInX {
                    amplitude: 0.4,
                    frequency: 1.0,
                    envelope: None,
                    time_frequency: None,
                },
                Reaction::Tanh { y_coeff: 0.0, z_coeff: 0.4 },
            ],
        },
        g: vec![Reaction::Sum {
            terms: vec![
                Reaction::Gaussian {
                    amplitude: 0.5,
                    width: 1.0,
                    center: 0.0,
                },
                Reaction::Tanh { y_coeff: 0.0, z_coeff: 0.5 },
            ],
        }],
        sigma_weighted_gradient: false,
    })
    .unwrap();
    (p, rand)
}

#[test]
fn comparison_of_identical_problems() {
    let (p, rand) = comparison_base(2);
    let r = check_comparison(&p, &p, &rand, &PicardConfig::default(), DEFAULT_COLLAR, 0.0).unwrap();
    assert!(r.min_gap >= -1e-12);
    assert!(r.holds());
}

#[test]
fn comparison_of_shifted_terminal_values() {
    let (p, rand) = comparison_base(2);
    let shifted = p
        .with_terms(
            Reaction::Sum {
                terms: vec![p.data().terminal.clone(), Reaction::Constant { value: 1.0 }],
            },
            p.data().f.clone(),
        )
        .unwrap();
    let r = check_comparison(&p, &shifted, &rand, &PicardConfig::default(), DEFAULT_COLLAR, 1.0).unwrap();
    assert!(r.holds(), "{r:?}");
    assert!((r.min_gap - 1.0).abs() < 1e-9);
    let err = check_comparison(&shifted, &p, &rand, &PicardConfig::default(), DEFAULT_COLLAR, 0.0).unwrap_err();
    assert!(matches!(err, LabError::Usage(_)));
}

#[test]
fn comparison_of_raised_drift() {
    let (p, rand) = comparison_base(2);
    let raised = p
        .with_terms(
            p.data().terminal.clone(),
            Reaction::Sum {
                terms: vec![p.data().f.clone(), Reaction::Constant { value: 0.1 }],
            },
        )
        .unwrap();
    let r = check_comparison(&p, &raised, &rand, &PicardConfig::default(), DEFAULT_COLLAR, 0.0).unwrap();
    assert!(r.holds(), "{r:?}");
    assert!(r.eps_grid > 0.0);
    assert_eq!(r.rows("comparison").len(), 3);
}

#[test]
fn comparison_needs_a_refinement_level() {
    let (p, rand) = comparison_base(1);
    assert!(check_comparison(&p, &p, &rand, &PicardConfig::default(), DEFAULT_COLLAR, 0.0).is_err());
}

fn transport_grid() -> SpatialGrid {
    SpatialGrid::new(1, 8.0, 321, Boundary::Dirichlet).unwrap()
}

#[test]
fn transport_of_zero_noise_is_zero() {
    let set = ScenarioSet::scalar(&[1.0]).unwrap();
    let rand = shared(&set, 4, 1, 2, 100, 6);
    let field = CoefficientField::constant(1, 0.5).unwrap();
    let r = check_linear_transport(&[Reaction::Zero {}], &field, transport_grid(), &rand, &PicardConfig::default(), 0.05).unwrap();
    assert!(r.levels[0].rel_rms.iter().all(|v| *v == 0.0));
}

#[test]
fn transport_identity_holds_and_refines() {
    let set = ScenarioSet::scalar(&[1.0]).unwrap();
    let rand = shared(&set, 32, 3, 4, 500, 7);
    let field = CoefficientField::sinusoidal_1d(0.5, 0.5).unwrap();
    let g = Reaction::Gaussian {
        amplitude: 1.0,
        width: 1.0,
        center: 0.0,
    };
    let cfg = PicardConfig {
        substeps: 4,
        ..Default::default()
    };
    let r = check_linear_transport(&[g], &field, transport_grid(), &rand, &cfg, 0.05).unwrap();
    assert!(r.holds(), "{:?}", r.levels);
    assert!(r.order.unwrap() > 0.0);
}

#[test]
fn transport_single_step_has_no_conditional_bias() {
    let set = ScenarioSet::scalar(&[1.0]).unwrap();
    let time = TimeGrid::new(0.1, 1).unwrap();
    let schedules = SharedRandomness::constant_schedules(&set, 1).unwrap();
    let rand = SharedRandomness::new(time, 1, set.clone(), schedules, gaussian_init(), 1, 1, 10_000, 8).unwrap();
    let field = CoefficientField::constant(1, 0.5).unwrap();
    let g = Reaction::Gaussian {
        amplitude: 1.0,
        width: 1.0,
        center: 0.0,
    };
    let problem = GspdeProblem::new(GspdeData {
        grid: transport_grid(),
        time,
        field: field.clone(),
        scenarios: set,
        terminal: Reaction::Zero {},
        f: Reaction::Zero {},
        g: vec![g.clone()],
        sigma_weighted_gradient: false,
    })
    .unwrap();
    let family = rand.family(0).unwrap();
    let x = rand.hunt(&field, 0).unwrap();
    let cfg = PicardConfig {
        substeps: 32,
        ..Default::default()
    };
    let (u, _) = solve_gspde_picard(&problem, &cfg, &family).unwrap();
    let (res, _) = transport_residuals(&u[0], &[g], &x, &family[0]).unwrap();
    let x0: Vec<f64> = (0..x.n_paths()).map(|p| x.x(p, 0)[0]).collect();
    let fit = regress_conditional(&res, &x0, 1, &RegressionBasis::polynomial(4)).unwrap();
    for (c, se) in fit.coefficients.iter().zip(&fit.std_errors) {
        assert!(c.abs() <= 3.0 * se + 1e-3, "{c} ± {se}");
    }
}

#[test]
fn reports_are_reproducible() {
    let set = ScenarioSet::scalar(&[1.0]).unwrap();
    let field = CoefficientField::sinusoidal_1d(0.5, 0.5).unwrap();
    let g = Reaction::Gaussian {
        amplitude: 1.0,
        width: 1.0,
        center: 0.0,
    };
    let run = || {
        let rand = shared(&set, 4, 2, 2, 200, 9);
        let r = check_linear_transport(std::slice::from_ref(&g), &field, transport_grid(), &rand, &PicardConfig::default(), 0.05).unwrap();
        let mut buf = Vec::new();
        write_rows_csv(&r.rows(), &mut buf).unwrap();
        buf
    };
    assert_eq!(run(), run());
}
