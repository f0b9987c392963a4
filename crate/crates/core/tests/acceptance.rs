//! Acceptance suite. Runs as a plain binary so every criterion prints its
//! PASS/FAIL line; exits nonzero if any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use rose_core::calibration::{accumulate_hessian, cholesky_inverse_identity_check, HessianBundle};
use rose_core::method::{run_method, Method};
use rose_core::obs::{obs_update_row, prune_layer, reconstruction_error, PruneOutcome};
use rose_core::oracle::{exact_masked_reconstruction, naive_obs_prune};
use rose_core::rose::{
    move_block, prune_with_block_order, rose_prune_layer, rose_prune_layer_with, ReorderDirection,
};
use rose_core::synth::{gen_activations, gen_uniform, FixtureSpec, NormalStream};
use rose_core::tensor::{
    apply_column_permutation, block_ranges, prune_count, DenseMatrix, PruneMask, SparsityConfig,
};

const SEEDS: u64 = 20;
const SPARSITIES: [f64; 4] = [0.6, 0.7, 0.8, 0.9];

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

/// Runs collected for the cross-cutting criteria 6-8.
#[derive(Default)]
struct Collected {
    trajectories: Vec<(String, Vec<f64>)>,
    sparsity_failures: Vec<String>,
    roundtrip_failures: Vec<String>,
    roundtrip_checked: usize,
    max_objective_gap: f64,
}

impl Collected {
    fn trajectory(&mut self, label: String, o: &PruneOutcome) {
        self.trajectories
            .push((label, o.block_error_trajectory.clone()));
    }
}

fn random_orthogonal(n: usize, s: &mut NormalStream) -> DenseMatrix {
    let mut q = DenseMatrix::from_fn(n, n, |_, _| s.next_normal());
    for j in 0..n {
        for k in 0..j {
            let dot: f64 = (0..n).map(|i| q.get(i, j) * q.get(i, k)).sum();
            for i in 0..n {
                q.set(i, j, q.get(i, j) - dot * q.get(i, k));
            }
        }
        let norm = (0..n).map(|i| q.get(i, j).powi(2)).sum::<f64>().sqrt();
        for i in 0..n {
            q.set(i, j, q.get(i, j) / norm);
        }
    }
    q
}

fn random_spd(n: usize, cond: f64, s: &mut NormalStream) -> DenseMatrix {
    let q = random_orthogonal(n, s);
    let eig: Vec<f64> = (0..n)
        .map(|k| cond.powf(k as f64 / (n - 1) as f64))
        .collect();
    let a = DenseMatrix::from_fn(n, n, |i, j| {
        (0..n).map(|k| q.get(i, k) * eig[k] * q.get(j, k)).sum()
    });
    // exact symmetry
    DenseMatrix::from_fn(n, n, |i, j| 0.5 * (a.get(i, j) + a.get(j, i)))
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let widths = [8, 16, 32, 64];
    let mut s = NormalStream::new(101);
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let n = widths[case % 4];
        let cond = 10f64.powf(6.0 * s.next_uniform());
        let h = random_spd(n, cond, &mut s);
        let bundle = HessianBundle::from_hessian(h).expect("factorisable");
        for i in 0..n {
            worst = worst.max(cholesky_inverse_identity_check(&bundle, i).unwrap());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst <= 1e-7 && secs < 10.0,
        format!("max deviation {worst:.3e} over 50 matrices, {secs:.2} s"),
    )
}

fn criterion_2() -> Verdict {
    let mut worst: f64 = 0.0;
    for case in 0..200u64 {
        let mut s = NormalStream::new(2000 + case);
        let n = 2 + (s.next_uniform() * 15.0) as usize;
        let x = gen_activations(3 * n, n, 0.3, 7000 + case).unwrap();
        let bundle = accumulate_hessian(&[x], 0.01).unwrap();
        let row: Vec<f64> = (0..n).map(|_| s.next_normal()).collect();
        let q = (s.next_uniform() * n as f64) as usize;
        let fast = obs_update_row(&row, q, &bundle.inv_hessian).unwrap();
        let kept: Vec<bool> = (0..n).map(|j| j != q).collect();
        let exact = exact_masked_reconstruction(&row, &kept, &bundle.hessian).unwrap();
        for (a, b) in fast.iter().zip(&exact) {
            worst = worst.max((a - b).abs());
        }
    }
    verdict(
        worst <= 1e-8,
        format!("max |update - optimum| {worst:.3e} over 200 instances"),
    )
}

fn check_unstructured_counts(
    c: &mut Collected,
    label: &str,
    mask: &PruneMask,
    p: f64,
    blocksize: usize,
) {
    for r in block_ranges(mask.cols(), blocksize) {
        let want = prune_count(p, mask.rows() * r.len());
        let got = mask.pruned_in_columns(r.start, r.end);
        if got != want {
            c.sparsity_failures.push(format!(
                "{label}: block {r:?} pruned {got}, expected {want}"
            ));
        }
    }
}

fn criterion_3(c: &mut Collected) -> Verdict {
    let start = Instant::now();
    let widths = [8, 16, 24, 32, 48, 64];
    let mut mask_mismatch = 0;
    let mut worst: f64 = 0.0;
    for case in 0..50u64 {
        let mut s = NormalStream::new(3000 + case);
        let n = widths[case as usize % widths.len()];
        let rows = 4 + (s.next_uniform() * 12.0) as usize;
        let blocksize = [4, 8, 16, n][(s.next_uniform() * 4.0) as usize];
        let w = gen_uniform(rows, n, 9000 + case);
        let acts = [gen_activations(2 * n, n, 0.4, 11000 + case).unwrap()];
        let bundle = accumulate_hessian(&acts, 0.01).unwrap();
        for p in [0.25, 0.5, 0.75] {
            let cfg = SparsityConfig::unstructured(p).with_blocksize(blocksize);
            let engine = prune_layer(&w, &bundle, &acts, &cfg).unwrap();
            let naive = naive_obs_prune(&w, &acts, &cfg).unwrap();
            if engine.mask != naive.mask {
                mask_mismatch += 1;
            }
            let gap = (engine.final_error - naive.final_error).abs()
                / naive.final_error.abs().max(1e-300);
            worst = worst.max(gap);
            let label = format!("c3 case {case} p={p}");
            check_unstructured_counts(c, &label, &engine.mask, p, blocksize);
            c.trajectory(label, &engine);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        mask_mismatch == 0 && worst <= 1e-6 && secs < 60.0,
        format!("150 runs, {mask_mismatch} mask mismatches, max relative error gap {worst:.3e}, {secs:.2} s"),
    )
}

/// Permutation soundness for one reordered run.
fn check_roundtrip(
    c: &mut Collected,
    label: &str,
    w: &DenseMatrix,
    acts: &[DenseMatrix],
    o: &PruneOutcome,
    permuted: &PruneOutcome,
    perm: &rose_core::Permutation,
) {
    c.roundtrip_checked += 1;
    let back = perm.inverted();
    let restored_mask = permuted.mask.permute_columns(&back).unwrap();
    let restored = apply_column_permutation(&permuted.pruned_weights, &back).unwrap();
    let zeros_match = restored
        .data()
        .iter()
        .zip(o.pruned_weights.data())
        .all(|(a, b)| (*a == 0.0) == (*b == 0.0));
    if restored_mask != o.mask || !zeros_match || restored != o.pruned_weights {
        c.roundtrip_failures
            .push(format!("{label}: zero pattern did not round-trip"));
    }
    // Same objective in both coordinate systems.
    let wp = apply_column_permutation(w, perm).unwrap();
    let xp: Vec<DenseMatrix> = acts
        .iter()
        .map(|x| apply_column_permutation(x, perm).unwrap())
        .collect();
    let in_perm = reconstruction_error(&wp, &permuted.pruned_weights, &xp)
        .unwrap()
        .absolute;
    let in_orig = reconstruction_error(w, &o.pruned_weights, acts)
        .unwrap()
        .absolute;
    let gap = (in_perm - in_orig).abs() / in_orig.abs().max(1e-300);
    c.max_objective_gap = c.max_objective_gap.max(gap);
    if gap > 1e-9 {
        c.roundtrip_failures
            .push(format!("{label}: objective gap {gap:.3e}"));
    }
}

fn criterion_4(c: &mut Collected) -> Verdict {
    let spec = FixtureSpec::columnar();
    let mut lines = Vec::new();
    let mut ok = true;
    for p in SPARSITIES {
        let cfg = SparsityConfig::unstructured(p);
        let (mut sg, mut ro, mut asc) = (0.0, 0.0, 0.0);
        for seed in 0..SEEDS {
            let (w, x) = spec.generate(seed).unwrap();
            let acts = [x];
            let s = run_method(Method::Sparsegpt, &w, &acts, &cfg).unwrap();
            sg += s.outcome.relative_error;
            c.trajectory(format!("c4 sparsegpt seed {seed} p={p}"), &s.outcome);
            check_unstructured_counts(
                c,
                &format!("c4 sparsegpt seed {seed} p={p}"),
                &s.outcome.mask,
                p,
                cfg.blocksize,
            );
            for (dir, acc) in [
                (ReorderDirection::Descending, &mut ro),
                (ReorderDirection::Ascending, &mut asc),
            ] {
                let r = rose_prune_layer_with(&w, &acts, &cfg, dir).unwrap();
                *acc += r.outcome.relative_error;
                let label = format!("c4 {dir:?} seed {seed} p={p}");
                let engine_view = r.permuted.as_ref().unwrap_or(&r.outcome);
                check_unstructured_counts(c, &label, &engine_view.mask, p, cfg.blocksize);
                c.trajectory(label.clone(), &r.outcome);
                if let Some(perm_out) = &r.permuted {
                    check_roundtrip(
                        c,
                        &label,
                        &w,
                        &acts,
                        &r.outcome,
                        perm_out,
                        &r.plan.permutation,
                    );
                }
            }
        }
        let k = SEEDS as f64;
        let (sg, ro, asc) = (sg / k, ro / k, asc / k);
        ok &= ro < sg && asc > sg;
        lines.push(format!(
            "p={p}: rose {ro:.4e} < sparsegpt {sg:.4e} < ascending {asc:.4e}"
        ));
    }
    verdict(ok, lines.join("; "))
}

fn criterion_5(c: &mut Collected) -> Verdict {
    let uniform = FixtureSpec::uniform();
    let columnar = FixtureSpec::columnar();
    let mut max_uniform: f64 = 0.0;
    let mut min_columnar = f64::INFINITY;
    let mut not_equal = 0;
    let mut runs = 0;
    for p in SPARSITIES {
        let cfg = SparsityConfig::unstructured(p);
        for seed in 0..SEEDS {
            let (w, x) = uniform.generate(seed).unwrap();
            let acts = [x];
            let r = rose_prune_layer(&w, &acts, &cfg).unwrap();
            let s = run_method(Method::Sparsegpt, &w, &acts, &cfg).unwrap();
            max_uniform = max_uniform.max(r.profile.relative_range);
            runs += 1;
            if r.plan.was_reordered
                || r.outcome.pruned_weights != s.outcome.pruned_weights
                || r.outcome.mask != s.outcome.mask
                || r.outcome.block_error_trajectory != s.outcome.block_error_trajectory
            {
                not_equal += 1;
            }
            let label = format!("c5 uniform seed {seed} p={p}");
            check_unstructured_counts(c, &label, &r.outcome.mask, p, cfg.blocksize);
            c.trajectory(label, &r.outcome);

            let (w, x) = columnar.generate(seed).unwrap();
            let r = rose_prune_layer(&w, &[x], &cfg).unwrap();
            min_columnar = min_columnar.min(r.profile.relative_range);
        }
    }
    verdict(
        max_uniform < 0.5 && min_columnar > 0.5 && not_equal == 0,
        format!(
            "uniform max R_rel {max_uniform:.4}, columnar min R_rel {min_columnar:.4}, {not_equal}/{runs} uniform runs differ from sparsegpt"
        ),
    )
}

fn criterion_6(c: &mut Collected) -> Verdict {
    let columnar = FixtureSpec::columnar();
    let uniform = FixtureSpec::uniform();
    let mut bad_nm = Vec::new();
    let mut nm_runs = 0;
    let mut reordered = 0;
    for (n, m) in [(2, 4), (4, 8)] {
        let cfg = SparsityConfig::semi_structured(n, m);
        for seed in 0..5 {
            for (name, spec) in [("columnar", &columnar), ("uniform", &uniform)] {
                let (w, x) = spec.generate(seed).unwrap();
                let acts = [x];
                for method in [
                    Method::Sparsegpt,
                    Method::Rose,
                    Method::RoseAscending,
                    Method::Wanda,
                    Method::Magnitude,
                ] {
                    let label = format!("c6 {n}:{m} {name} {method} seed {seed}");
                    nm_runs += 1;
                    if matches!(method, Method::Rose | Method::RoseAscending) {
                        let dir = if method == Method::Rose {
                            ReorderDirection::Descending
                        } else {
                            ReorderDirection::Ascending
                        };
                        let r = rose_prune_layer_with(&w, &acts, &cfg, dir).unwrap();
                        if !r.outcome.mask.satisfies_pattern() {
                            bad_nm.push(format!("{label}: original coordinates"));
                        }
                        if let Some(pm) = &r.permuted {
                            reordered += 1;
                            if !pm.mask.satisfies_pattern() {
                                bad_nm.push(format!("{label}: permuted coordinates"));
                            }
                            check_roundtrip(
                                c,
                                &label,
                                &w,
                                &acts,
                                &r.outcome,
                                pm,
                                &r.plan.permutation,
                            );
                        }
                        c.trajectory(label, &r.outcome);
                    } else {
                        let r = run_method(method, &w, &acts, &cfg).unwrap();
                        if !r.outcome.mask.satisfies_pattern() {
                            bad_nm.push(label.clone());
                        }
                        if method == Method::Sparsegpt {
                            c.trajectory(label, &r.outcome);
                        }
                    }
                }
            }
        }
    }
    let unstructured_ok = c.sparsity_failures.is_empty();
    let detail = format!(
        "{} unstructured count violations; {nm_runs} N:M runs ({reordered} reordered), {} pattern violations{}",
        c.sparsity_failures.len(),
        bad_nm.len(),
        bad_nm.first().map(|s| format!(", first: {s}")).unwrap_or_default()
    );
    verdict(unstructured_ok && bad_nm.is_empty(), detail)
}

fn criterion_7(c: &Collected) -> Verdict {
    let mut bad = Vec::new();
    for (label, t) in &c.trajectories {
        let scale = t.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if t.windows(2).any(|w| w[1] < w[0] - 1e-12 * scale) {
            bad.push(label.clone());
        }
    }
    verdict(
        bad.is_empty(),
        format!(
            "{} trajectories, {} decreasing{}",
            c.trajectories.len(),
            bad.len(),
            bad.first()
                .map(|s| format!(", first: {s}"))
                .unwrap_or_default()
        ),
    )
}

fn criterion_8(c: &Collected) -> Verdict {
    verdict(
        c.roundtrip_checked > 0 && c.roundtrip_failures.is_empty(),
        format!(
            "{} reordered runs, {} failures, max objective gap {:.3e}",
            c.roundtrip_checked,
            c.roundtrip_failures.len(),
            c.max_objective_gap
        ),
    )
}

fn criterion_9() -> Verdict {
    let spec = FixtureSpec::position_sweep();
    let cfg = SparsityConfig::unstructured(0.7).with_blocksize(spec.blocksize);
    let k = block_ranges(spec.cols, spec.blocksize).len();
    let hot = spec.hot_block();
    let mut medians = Vec::new();
    for pos in 0..k {
        let mut errs: Vec<f64> = (0..10)
            .map(|seed| {
                let (w, x) = spec.generate(seed).unwrap();
                prune_with_block_order(&w, &[x], &cfg, &move_block(k, hot, pos))
                    .unwrap()
                    .final_error
            })
            .collect();
        errs.sort_by(f64::total_cmp);
        medians.push(0.5 * (errs[4] + errs[5]));
    }
    let monotone = medians.windows(2).all(|w| w[0] <= w[1]);
    let shown: Vec<String> = medians.iter().map(|m| format!("{m:.4e}")).collect();
    verdict(
        monotone,
        format!(
            "median final error by hot-block position: [{}]",
            shown.join(", ")
        ),
    )
}

fn main() -> ExitCode {
    let mut c = Collected::default();
    let results = [
        ("1 trailing inverse identity", criterion_1()),
        ("2 single-weight update optimality", criterion_2()),
        ("3 engine vs naive stepper", criterion_3(&mut c)),
        ("4 direction on columnar fixture", criterion_4(&mut c)),
        ("5 reorder gate", criterion_5(&mut c)),
        ("6 sparsity and pattern exactness", criterion_6(&mut c)),
        ("7 monotone trajectories", criterion_7(&c)),
        ("8 permutation soundness", criterion_8(&c)),
        ("9 hot block position sweep", criterion_9()),
    ];
    let mut failed = 0;
    for (name, v) in &results {
        println!(
            "criterion {name}: {} ({})",
            if v.passed { "PASS" } else { "FAIL" },
            v.detail
        );
        if !v.passed {
            failed += 1;
        }
    }
    println!(
        "acceptance: {}/{} criteria passed",
        results.len() - failed,
        results.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
