use adaptrial::designs::{DesignConfig, DesignKind};
use adaptrial::dgp::Scenario;
use adaptrial::harness::{run_experiment, Allocator};
use adaptrial::io::{read_trajectory, write_trajectory};
use adaptrial::trial::{DesignFunction, Observation, Trajectory};
use adaptrial::Error;
use proptest::prelude::*;

fn round_trip(t: &Trajectory<f64>) -> Trajectory<f64> {
    let mut buf = Vec::new();
    write_trajectory(t, &mut buf).unwrap();
    read_trajectory(buf.as_slice()).unwrap()
}

fn assert_same(a: &Trajectory<f64>, b: &Trajectory<f64>) {
    assert_eq!(a.scenario_meta(), b.scenario_meta());
    assert_eq!(a.len(), b.len());
    for (x, y) in a.observations().iter().zip(b.observations()) {
        assert_eq!(
            (x.w.to_bits(), x.a, x.y.to_bits(), x.g_prob.to_bits()),
            (y.w.to_bits(), y.a, y.y.to_bits(), y.g_prob.to_bits())
        );
    }
    for k in 0..=30 {
        let w = 0.1 * k as f64;
        for (u, v) in a.design_values_at(w).unwrap().iter().zip(b.design_values_at(w).unwrap()) {
            assert!((u - v).abs() <= 1e-12);
        }
    }
}

#[test]
fn every_design_kind_round_trips() {
    let s = Scenario::appendix_b();
    for kind in [
        DesignKind::NonAdaptive,
        DesignKind::StandardNeyman,
        DesignKind::GbarDriven,
        DesignKind::OracleNeyman,
        DesignKind::BenefitDriven,
    ] {
        let cfg = DesignConfig { n0: 200, refit_stride: 60, nu_period: 60, ..DesignConfig::with_kind(kind) };
        let mut alloc = Allocator::new(&cfg, &s, None).unwrap();
        let t = run_experiment(&s, &mut alloc, 420, 9).unwrap();
        let back = round_trip(&t);
        assert_same(&t, &back);
        assert_eq!(t.gbar_observed().unwrap(), back.gbar_observed().unwrap(), "{kind}");
    }
}

#[test]
fn file_round_trip() {
    let s = Scenario::appendix_b();
    let mut alloc = Allocator::new(&DesignConfig::with_kind(DesignKind::OracleNeyman), &s, None).unwrap();
    let t = run_experiment(&s, &mut alloc, 50, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    write_trajectory(&t, std::fs::File::create(&path).unwrap()).unwrap();
    let back = read_trajectory(std::io::BufReader::new(std::fs::File::open(&path).unwrap())).unwrap();
    assert_same(&t, &back);
}

#[test]
fn malformed_files_name_the_line() {
    let bad_header = "# scenario=x\nunit,w\n";
    assert!(matches!(read_trajectory::<f64, _>(bad_header.as_bytes()), Err(Error::Parse { line: 2, .. })));
    let header = "unit_index,w,a,y,g_prob,design_kind,design_params";
    let skipped = format!("{header}\n2,1.0,1,0.5,0.5,constant,0.5\n");
    assert!(matches!(read_trajectory::<f64, _>(skipped.as_bytes()), Err(Error::Parse { line: 2, .. })));
    let bad_prob = format!("{header}\n1,1.0,1,0.5,1.5,constant,0.5\n");
    assert!(matches!(read_trajectory::<f64, _>(bad_prob.as_bytes()), Err(Error::Parse { line: 2, .. })));
    let short = format!("{header}\n1,1.0,1\n");
    assert!(matches!(read_trajectory::<f64, _>(short.as_bytes()), Err(Error::Parse { line: 2, .. })));
    assert!(read_trajectory::<f64, _>("".as_bytes()).is_err());
}

proptest! {
    #[test]
    fn arbitrary_reals_round_trip_bitwise(
        rows in proptest::collection::vec((-1e6f64..1e6, any::<bool>(), any::<f64>().prop_filter("finite", |x| x.is_finite()), 0.001f64..=1.0), 1..30)
    ) {
        let mut t = Trajectory::new("prop");
        for (w, treated, y, p) in rows {
            let a = u8::from(treated);
            let g = if a == 1 { p } else { 1.0 - p };
            prop_assume!(g > 0.0);
            t.push(Observation::new(w, a, y, g).unwrap(), DesignFunction::constant(p).unwrap());
        }
        assert_same(&t, &round_trip(&t));
    }
}
