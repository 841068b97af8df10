use grokking_core::data::{gen_multiplication_table, gen_sparse_linear, multiplication_table};
use grokking_core::diagnostics::nuclear_subgrad_certificate;
use grokking_core::model::HomogeneousModel;
use grokking_core::ntk::{build_kernel_system, solve_kernel_svm};
use grokking_core::refsolve::{solve_l1_max_margin, solve_l2_max_margin, solve_min_nuclear, solve_standard_form};
use grokking_core::rng::seeded;
use grokking_core::InitSpec;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

fn brute_force(a: &DMatrix<f64>, b: &[f64], c: &[f64]) -> Option<f64> {
    let (m, n) = a.shape();
    let mut best: Option<f64> = None;
    let mut cols: Vec<usize> = (0..m).collect();
    loop {
        let bm = DMatrix::from_fn(m, m, |i, k| a[(i, cols[k])]);
        if let Some(xb) = bm.clone().lu().solve(&DVector::from_column_slice(b)) {
            if xb.iter().all(|v| *v >= -1e-10) && (&bm * &xb - DVector::from_column_slice(b)).amax() < 1e-9 {
                let obj: f64 = cols.iter().zip(xb.iter()).map(|(&j, v)| c[j] * v).sum();
                best = Some(best.map_or(obj, |o: f64| o.min(obj)));
            }
        }
        let mut k = m;
        while k > 0 && cols[k - 1] == n - m + k - 1 {
            k -= 1;
        }
        if k == 0 {
            return best;
        }
        cols[k - 1] += 1;
        for i in k..m {
            cols[i] = cols[i - 1] + 1;
        }
    }
}

#[test]
fn simplex_matches_vertex_enumeration() {
    let mut rng = seeded(11);
    for _ in 0..60 {
        let (m, n) = (rng.random_range(1..=4), rng.random_range(5..=8));
        let a = DMatrix::from_fn(m, n, |_, _| rng.random_range(-2.0..2.0));
        let x0: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { rng.random_range(0.0..1.0) } else { 0.0 }).collect();
        let b: Vec<f64> = (0..m).map(|i| (0..n).map(|j| a[(i, j)] * x0[j]).sum()).collect();
        let c: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
        let sol = solve_standard_form(&a, &b, &c).unwrap();
        let reference = brute_force(&a, &b, &c).unwrap();
        assert!((sol.objective - reference).abs() <= 1e-8 * (1.0 + reference.abs()), "{} vs {reference}", sol.objective);
        assert!(sol.dual_infeasibility() <= 1e-9);
    }
}

#[test]
fn l1_margin_solution_is_feasible_with_many_features() {
    let ds = gen_sparse_linear(300, 3, 80, 10, 5).unwrap();
    let sol = solve_l1_max_margin(&ds).unwrap();
    for s in ds.train.iter() {
        let x = match s.x {
            grokking_core::Input::Dense(v) => v,
            _ => unreachable!(),
        };
        let q: f64 = s.y * x.iter().zip(&sol.w).map(|(a, b)| a * b).sum::<f64>();
        assert!(q >= 1.0 - 1e-9, "margin {q}");
    }
    assert!(!sol.support_set.is_empty());
}

#[test]
fn l1_solution_is_sparser_than_l2() {
    let mut wins = 0;
    for seed in 0..20 {
        let ds = gen_sparse_linear(40, 3, 60, 10, seed).unwrap();
        let nnz = |w: &[f64]| {
            let m = w.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
            w.iter().filter(|v| v.abs() > 1e-6 * m).count()
        };
        let l1 = solve_l1_max_margin(&ds).unwrap();
        let l2 = solve_l2_max_margin(&ds).unwrap();
        if nnz(&l1.w) <= nnz(&l2.w) {
            wins += 1;
        }
    }
    assert!(wins >= 18, "{wins}/20");
}

#[test]
fn diagonal_kernel_svm_matches_l2_margin_direction() {
    let ds = gen_sparse_linear(15, 3, 25, 5, 2).unwrap();
    let model = HomogeneousModel::diagonal(15).unwrap();
    let base = InitSpec::new(&model, 1.0, 0.0, 0).unwrap().base;
    let system = build_kernel_system(&model, &base, &ds).unwrap();
    let sol = solve_kernel_svm(&system).unwrap();
    let eff: Vec<f64> = (0..15).map(|k| sol.h[k] - sol.h[15 + k]).collect();
    let l2 = solve_l2_max_margin(&ds).unwrap();
    let dot: f64 = eff.iter().zip(&l2.w).map(|(a, b)| a * b).sum();
    let cos = dot / (eff.iter().map(|v| v * v).sum::<f64>().sqrt() * l2.w.iter().map(|v| v * v).sum::<f64>().sqrt());
    assert!(cos >= 1.0 - 1e-9, "{cos}");
}

#[test]
fn nuclear_certificate_separates_solutions_from_perturbations() {
    let ds = gen_multiplication_table(8, 0.6, 1).unwrap();
    let sol = solve_min_nuclear(&ds).unwrap();
    let w = sol.matrix();
    let cert = nuclear_subgrad_certificate(&w, &ds, 2.0 * sol.tau, 1e-4).unwrap();
    assert!(cert.passed, "{:?}", cert.residuals);

    let target = DMatrix::from_row_slice(8, 8, &multiplication_table(8));
    let mut rng = seeded(4);
    for _ in 0..5 {
        let noise = DMatrix::from_fn(8, 8, |_, _| rng.random_range(-1.0..1.0));
        let noise = (&noise + noise.transpose()) * 0.5;
        let scaled = &noise * (0.1 * target.norm() / noise.norm());
        let cert = nuclear_subgrad_certificate(&(&target + scaled), &ds, 2.0 * sol.tau, 1e-4).unwrap();
        assert!(!cert.passed);
    }
}
