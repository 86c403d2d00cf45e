use ume_tensor::gradcheck::GradCheckConfig;
use ume_tensor::suite::{check_primitive, PRIMITIVES};

#[test]
fn every_primitive_matches_central_differences() {
    let cfg = GradCheckConfig {
        eps: 1e-6,
        tol: 1e-4,
        floor: 1e-6,
        max_elements: None,
    };
    for kind in PRIMITIVES {
        for seed in 0..25 {
            let report = check_primitive(kind, seed, cfg).unwrap_or_else(|e| panic!("{kind} seed {seed}: {e}"));
            assert!(report.passed(), "{kind} seed {seed}: {report:?}");
        }
    }
}
