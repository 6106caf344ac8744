use priorsr::datagen::{
    add_noise, integrate_ode, load_csv, make_dataset, save_csv, subsample, NoiseSpec, Split, SystemId, SystemSpec,
};
use priorsr::{parse, MAX_PARAMS};
use proptest::prelude::*;

fn crk() -> priorsr::datagen::Dataset {
    make_dataset(&SystemSpec::default_for(SystemId::Crk)).unwrap()
}

#[test]
fn synthetic_systems_have_all_three_splits() {
    for id in SystemId::SYNTHETIC {
        let d = make_dataset(&SystemSpec::default_for(id)).unwrap();
        for s in [Split::Train, Split::IdVal, Split::OodVal] {
            assert!(d.count(s) > 0, "{id} has no {s:?} rows");
        }
        assert!(d.targets().iter().all(|y| y.is_finite()));
    }
}

#[test]
fn csv_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    for id in SystemId::SYNTHETIC {
        let spec = SystemSpec::default_for(id);
        let d = make_dataset(&spec).unwrap();
        let path = dir.path().join(format!("{id}.csv"));
        save_csv(&d, &path).unwrap();
        let back = load_csv(&path, Some(&spec.schema())).unwrap();
        assert_eq!(back.columns(), d.columns());
        assert_eq!(back.targets(), d.targets());
        assert_eq!(back.splits(), d.splits());
    }
}

#[test]
fn harmonic_oscillator_matches_closed_form() {
    // x'' = -x from (1, 0): x = cos t, v = -sin t.
    let tr = integrate_ode(&parse("-x").unwrap(), &[0.0; MAX_PARAMS], 1.0, 0.0, (0.0, 10.0), 0.01).unwrap();
    let i = tr.len() - 1;
    assert!((tr.t[i] - 10.0).abs() < 1e-9);
    assert!((tr.x[i] - 10f64.cos()).abs() < 1e-7);
    assert!((tr.v[i] + 10f64.sin()).abs() < 1e-7);
    assert!(tr.a.iter().zip(&tr.x).all(|(a, x)| *a == -x));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn noise_touches_only_training_inputs(seed: u64, sigma in 0.001f64..0.5) {
        let d = crk();
        let n = add_noise(&d, NoiseSpec { sigma, seed }).unwrap();
        prop_assert_eq!(n.targets(), d.targets());
        let a = &d.columns()[0];
        let b = &n.columns()[0];
        let mut moved = 0;
        for (i, s) in d.splits().iter().enumerate() {
            if *s == Split::Train {
                moved += usize::from(a[i] != b[i]);
            } else {
                prop_assert_eq!(a[i], b[i]);
            }
        }
        prop_assert!(moved > 0);
        let again = add_noise(&d, NoiseSpec { sigma, seed }).unwrap();
        prop_assert_eq!(again.columns(), n.columns());
    }

    #[test]
    fn subsampling_keeps_validation_and_order(seed: u64, fraction in 0.01f64..1.0) {
        let d = crk();
        let s = subsample(&d, fraction, seed).unwrap();
        prop_assert_eq!(s.count(Split::IdVal), d.count(Split::IdVal));
        prop_assert_eq!(s.count(Split::OodVal), d.count(Split::OodVal));
        let want = ((fraction * d.count(Split::Train) as f64).round() as usize).max(1);
        prop_assert!(s.count(Split::Train).abs_diff(want) <= 1);
        // kept rows appear in their original relative order
        let orig: Vec<(f64, f64)> = d.columns()[0].iter().copied().zip(d.targets().iter().copied()).collect();
        let mut k = 0;
        for row in s.columns()[0].iter().copied().zip(s.targets().iter().copied()) {
            while k < orig.len() && orig[k] != row {
                k += 1;
            }
            prop_assert!(k < orig.len());
            k += 1;
        }
    }
}
