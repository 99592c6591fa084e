//! Compares the coefficient-free merge baselines on a tiny two-source setup.
//!
//! Two rank-1 task vectors update the same 2x3 layer with opposite signs in
//! one coordinate, which is exactly the interference case where TIES's sign
//! election differs from plain averaging.
//!
//! Run with: cargo run --example merge_baselines

use merge_adapt::param_algebra::{
    merge, merge_average, merge_task_arithmetic, merge_ties, MergeSpec, ParamSet, TaskVector,
};
use ndarray::{arr2, Array2};

fn rank1(fp: &merge_adapt::param_algebra::Fingerprint, col: [f64; 2], row: [f64; 3]) -> TaskVector {
    let b = Array2::from_shape_vec((2, 1), col.to_vec()).unwrap();
    let a = Array2::from_shape_vec((1, 3), row.to_vec()).unwrap();
    TaskVector::new(fp.clone(), 1, vec![("w".into(), b, a)]).unwrap()
}

fn show(label: &str, params: &ParamSet) {
    let w = params.layer("w").unwrap();
    let rows: Vec<String> = w
        .rows()
        .into_iter()
        .map(|r| {
            let cells: Vec<String> = r.iter().map(|v| format!("{v:+.3}")).collect();
            cells.join("  ")
        })
        .collect();
    println!("{label:<16} [{}]", rows.join(" | "));
}

fn main() {
    let base = ParamSet::new(vec![("w".into(), arr2(&[[0.0; 3], [0.0; 3]]))]).unwrap();
    let fp = base.fingerprint();

    // Source 0 pushes the first row positive, source 1 pulls it negative with
    // twice the magnitude in the first column.
    let tvs = vec![
        rank1(&fp, [1.0, 0.0], [0.5, 0.5, 0.0]),
        rank1(&fp, [1.0, 0.5], [-1.0, 0.5, 0.5]),
    ];

    show("base", &base);
    show("averaging", &merge_average(&base, &tvs).unwrap());
    show("task arithmetic", &merge_task_arithmetic(&base, &tvs, 0.4).unwrap());
    show("ties", &merge_ties(&base, &tvs, 1.0, 1.0).unwrap());

    // Searched coefficients use the same primitive with an explicit spec.
    let spec = MergeSpec::new(vec![0.9, 0.1]).unwrap();
    show("lambda [.9,.1]", &merge(&base, &tvs, &spec).unwrap());

    println!();
    println!("In the first column the sources disagree in sign: averaging");
    println!("splits the difference, while ties elects the dominant sign and");
    println!("averages only the entries that agree with it.");
}
