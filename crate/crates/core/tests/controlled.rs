use monoimpute::analysis::{analyze_all, simulate_scenario, AnalysisFamily, AnalysisSpec};
use monoimpute::controlled::{
    generate_imputations, impute_mda, tipping_grid_from_draws, tipping_point_grid, DeltaEntry, DeltaShift, Mechanism,
    TIPPING_COLUMNS,
};
use monoimpute::data::{Dataset, SubjectRecord, VisitType, INTERCEPT};
use monoimpute::mda::{run_mda, McmcConfig, ModelSpec, PosteriorDraw};

fn small_run(n: usize, seed: u64) -> (Dataset, ModelSpec, Vec<PosteriorDraw>, McmcConfig) {
    let ds = simulate_scenario(1, n, seed).unwrap().observed;
    let spec = ModelSpec::default_for(&ds);
    let cfg = McmcConfig { burn_in: 300, thin: 5, draws: 6, seed, ..Default::default() };
    let draws = run_mda(&ds, &spec, &cfg).unwrap().draws;
    (ds, spec, draws, cfg)
}

fn mechanisms() -> Vec<Mechanism> {
    vec![
        Mechanism::Mar,
        Mechanism::CopyReference,
        Mechanism::Delta(DeltaShift::arms(0.0, 0.0)),
        Mechanism::Delta(DeltaShift::arms(-0.5, 1.0)),
    ]
}

#[test]
fn completed_sets_are_full_and_keep_observed_cells() {
    let (ds, spec, draws, cfg) = small_run(150, 1);
    for mech in mechanisms() {
        let sets = generate_imputations(&ds, &spec, &draws, &mech, cfg.seed).unwrap();
        assert_eq!(sets.len(), draws.len());
        for set in &sets {
            assert_eq!(set.missing_count(), 0);
            for (a, b) in set.subjects.iter().zip(&ds.subjects) {
                assert_eq!(a.id, b.id);
                assert_eq!(a.x, b.x);
                for j in 0..ds.p() {
                    if b.observed[j] {
                        assert_eq!(a.y[j].to_bits(), b.y[j].to_bits());
                    }
                    assert!(ds.visit_types[j].check(a.y[j]).is_ok(), "{:?} value {}", ds.visit_types[j], a.y[j]);
                }
            }
        }
    }
}

#[test]
fn intermittent_draws_do_not_depend_on_the_mechanism() {
    let ds = simulate_scenario(1, 150, 2).unwrap().observed;
    let spec = ModelSpec::default_for(&ds);
    let cfg = McmcConfig { burn_in: 200, thin: 3, draws: 4, seed: 9, ..Default::default() };
    let runs: Vec<Vec<Dataset>> = mechanisms().iter().map(|m| impute_mda(&ds, &spec, &cfg, m).unwrap()).collect();
    for (i, subj) in ds.subjects.iter().enumerate() {
        for j in 0..subj.s {
            for k in 0..cfg.draws {
                let bits: Vec<u64> = runs.iter().map(|r| r[k].subjects[i].y[j].to_bits()).collect();
                assert!(bits.windows(2).all(|w| w[0] == w[1]), "subject {i} visit {j}");
            }
        }
    }
    // The zero shift reuses the MAR stream.
    assert_eq!(runs[0], runs[2]);
    assert_ne!(runs[0], runs[1]);
}

#[test]
fn data_without_dropout_come_back_unchanged() {
    let (ds, spec, draws, cfg) = small_run(120, 3);
    let mut complete = ds.clone();
    complete.subjects.retain(|s| s.s == ds.p());
    let complete = Dataset::new(
        complete.covariate_names.clone(),
        complete.visit_names.clone(),
        complete.visit_types.clone(),
        complete.subjects,
        complete.treatment,
    )
    .unwrap();
    let keep: Vec<usize> = ds.subjects.iter().enumerate().filter(|(_, s)| s.s == ds.p()).map(|(i, _)| i).collect();
    let sub_draws: Vec<PosteriorDraw> = draws
        .iter()
        .map(|d| PosteriorDraw { params: d.params.clone(), values: keep.iter().map(|&i| d.values[i].clone()).collect() })
        .collect();
    for mech in mechanisms() {
        let sets = generate_imputations(&complete, &spec, &sub_draws, &mech, cfg.seed).unwrap();
        for (set, d) in sets.iter().zip(&sub_draws) {
            for (s, v) in set.subjects.iter().zip(&d.values) {
                let q = ds.q();
                assert_eq!(&s.x[..], &v[..q]);
                assert_eq!(s.y.iter().map(|y| y.to_bits()).collect::<Vec<_>>(), v[q..].iter().map(|y| y.to_bits()).collect::<Vec<_>>());
            }
        }
    }
}

#[test]
fn a_single_draw_is_enough() {
    let (ds, spec, draws, cfg) = small_run(120, 4);
    let sets = generate_imputations(&ds, &spec, &draws[..1], &Mechanism::CopyReference, cfg.seed).unwrap();
    assert_eq!(sets.len(), 1);
    let pooled = analyze_all(&sets, &AnalysisSpec::new("y2", AnalysisFamily::Probit)).unwrap();
    let g = pooled.get("g").unwrap();
    assert!(g.between.is_none());
    assert_eq!(g.total, g.within);
}

#[test]
fn shifts_move_imputed_means_in_their_direction() {
    let (ds, spec, draws, cfg) = small_run(300, 5);
    let mean_post = |mech: &Mechanism, arm: f64| {
        let sets = generate_imputations(&ds, &spec, &draws, mech, cfg.seed).unwrap();
        let mut acc = (0.0, 0usize);
        for set in &sets {
            for (a, b) in set.subjects.iter().zip(&ds.subjects) {
                if b.s == 0 && b.x[2] == arm {
                    acc.0 += a.y[0];
                    acc.1 += 1;
                }
            }
        }
        acc.0 / acc.1 as f64
    };
    let base1 = mean_post(&Mechanism::Mar, 1.0);
    let up1 = mean_post(&Mechanism::Delta(DeltaShift::arms(0.0, 2.0)), 1.0);
    assert!(up1 - base1 > 1.0);
    let base0 = mean_post(&Mechanism::Mar, 0.0);
    let up0_other = mean_post(&Mechanism::Delta(DeltaShift::arms(0.0, 2.0)), 0.0);
    assert!((up0_other - base0).abs() < 1.0);
    let cr1 = mean_post(&Mechanism::CopyReference, 1.0);
    assert!(base1 - cr1 > 0.3, "treatment effect on y1 should vanish: {base1} vs {cr1}");
}

#[test]
fn table_entries_override_arm_shifts() {
    let ds = simulate_scenario(1, 40, 6).unwrap().observed;
    let d = DeltaShift {
        delta0: 0.1,
        delta1: 0.2,
        table: vec![DeltaEntry { arm: 1, visit: "y2".into(), pattern: 1, delta: -3.0 }],
    };
    assert_eq!(d.get(&ds, 1, 1, 1), -3.0);
    assert_eq!(d.get(&ds, 1, 1, 0), 0.2);
    assert_eq!(d.get(&ds, 0, 1, 1), 0.1);
    assert!(Mechanism::Delta(d).validate(&ds).is_ok());
    let bad = DeltaShift { table: vec![DeltaEntry { arm: 2, visit: "y2".into(), pattern: 1, delta: 1.0 }], ..Default::default() };
    assert!(Mechanism::Delta(bad).validate(&ds).is_err());
    assert!(Mechanism::Delta(DeltaShift::arms(f64::NAN, 0.0)).validate(&ds).is_err());
}

#[test]
fn reference_mechanisms_need_a_binary_treatment() {
    let subjects = vec![
        SubjectRecord::new("a", vec![1.0, 0.5], vec![Some(1.0), None]),
        SubjectRecord::new("b", vec![1.0, 1.0], vec![Some(0.0), Some(2.0)]),
    ];
    let types = vec![VisitType::Continuous, VisitType::Continuous];
    let names = vec![INTERCEPT.to_string(), "dose".to_string()];
    let visits = vec!["v1".to_string(), "v2".to_string()];
    let ds = Dataset::new(names.clone(), visits.clone(), types.clone(), subjects.clone(), Some(1)).unwrap();
    assert!(Mechanism::CopyReference.validate(&ds).is_err());
    assert!(Mechanism::Mar.validate(&ds).is_ok());
    let untreated = Dataset::new(names, visits, types, subjects, None).unwrap();
    assert!(Mechanism::CopyReference.validate(&untreated).is_err());
    assert!(Mechanism::Delta(DeltaShift::arms(1.0, 0.0)).validate(&untreated).is_err());
}

#[test]
fn zero_cell_of_the_grid_is_the_mar_analysis() {
    let (ds, spec, draws, cfg) = small_run(200, 7);
    let an = AnalysisSpec::new("y2", AnalysisFamily::Probit);
    let grid = tipping_grid_from_draws(&ds, &spec, &draws, cfg.seed, &[0.0], &[0.0], &an).unwrap();
    let mar = analyze_all(&generate_imputations(&ds, &spec, &draws, &Mechanism::Mar, cfg.seed).unwrap(), &an).unwrap();
    let g = mar.get("g").unwrap();
    let c = &grid.cell(0, 0).result;
    assert_eq!(c.estimate.to_bits(), g.estimate.to_bits());
    assert_eq!(c.total.to_bits(), g.total.to_bits());
    assert_eq!(c.p.to_bits(), g.p.to_bits());

    let mut buf = Vec::new();
    grid.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next().unwrap(), TIPPING_COLUMNS.join(","));
    assert_eq!(text.lines().count(), 2);

    assert!(tipping_grid_from_draws(&ds, &spec, &draws, cfg.seed, &[], &[0.0], &an).is_err());
    assert!(tipping_point_grid(&ds, &spec, &cfg, &[0.0], &[], &an).is_err());
}

#[test]
fn grid_cells_are_laid_out_row_major() {
    let (ds, spec, draws, cfg) = small_run(150, 8);
    let an = AnalysisSpec::new("y2", AnalysisFamily::Probit);
    let d0 = [-1.0, 0.0, 1.0];
    let d1 = [-0.5, 0.5];
    let grid = tipping_grid_from_draws(&ds, &spec, &draws, cfg.seed, &d0, &d1, &an).unwrap();
    assert_eq!(grid.cells.len(), 6);
    for (a, &x) in d0.iter().enumerate() {
        for (b, &y) in d1.iter().enumerate() {
            let c = grid.cell(a, b);
            assert_eq!((c.delta0, c.delta1), (x, y));
        }
    }
}
