use protodrift_core::otcal::*;
use protodrift_core::tensor::Tensor;

fn main() {
    let c = [0.0, 0.9813650737420386, 1.215325540511362, 0.9813650737420386, 0.0, 0.952517408561821, 1.215325540511362, 0.952517408561821, 0.0, 0.20173254526551698, 1.0165499712814796, 1.4713016283058655, 0.8819216580478463, 0.03329578784471543, 0.8996486415109363];
    let cost = CostMatrix {
        values: Tensor::new(vec![5, 3], c.to_vec()).unwrap(),
        mode: CostMode::Semantic,
        row_classes: vec![0, 1, 2, 3, 4],
        col_classes: vec![0, 1, 2],
    };
    let instances = [
        ("A", [0.11293634565692076, 0.22080360841061117, 0.24858198179324972, 0.17408715771074795, 0.24359090642847048],
              [0.1743015197397991, 0.4019950561877382, 0.4237034240724627]),
        ("B", [0.57388442737669, 0.2369083468562491, 0.012842409909272965, 0.1034938780552578, 0.07287093780253032],
              [0.7205184459645613, 0.2668821963040579, 0.012599357731380875]),
    ];
    let ladders: Vec<(&str, Vec<f64>)> = vec![
        ("l3 (10x)", vec![0.1, 0.01, 0.001]),
        ("l5 (~3x)", vec![0.1, 0.03, 0.01, 0.003, 0.001]),
        ("l7 (2x)", vec![0.1, 0.05, 0.02, 0.01, 0.005, 0.002, 0.001]),
        ("l10", vec![0.1, 0.06, 0.04, 0.025, 0.015, 0.009, 0.005, 0.003, 0.0017, 0.001]),
    ];
    for (name, f, d) in &instances {
        for (lname, ladder) in &ladders {
            for tol in [1e-9, 1e-6] {
                let p = SinkhornParams { eps_schedule: ladder.clone(), max_iter: 500000, tol };
                let t0 = std::time::Instant::now();
                match sinkhorn(f, d, &cost, &p) {
                    Ok(plan) => println!("{name} {lname:9} tol={tol:.0e}: iters={:6} conv={} err={:.1e} ({:?})",
                        plan.iterations, plan.converged, plan.marginal_error, t0.elapsed()),
                    Err(e) => println!("{name} {lname} tol={tol:.0e}: ERROR {e}"),
                }
            }
        }
    }
}
