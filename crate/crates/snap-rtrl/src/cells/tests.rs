use std::sync::Arc;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::*;

fn patterns(params: &CellParams) -> (Arc<SparsityPattern>, Arc<SparsityPattern>) {
    (
        Arc::new(params.structural_d_pattern().unwrap()),
        Arc::new(params.structural_i_pattern().unwrap()),
    )
}

fn random_state(params: &CellParams, rng: &mut ChaCha8Rng) -> StateVec {
    (0..params.state_dim()).map(|_| rng.gen_range(-0.8..0.8)).collect()
}

fn random_input(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Central finite differences for D: perturb each previous-state coordinate.
fn fd_dynamics(params: &CellParams, state: &StateVec, x: &InputVec<'_>, eps: f64) -> Vec<Vec<f64>> {
    let big_k = params.state_dim();
    let mut out = vec![vec![0.0; big_k]; big_k];
    for j in 0..big_k {
        let mut plus = state.clone();
        plus[j] += eps;
        let mut minus = state.clone();
        minus[j] -= eps;
        let (sp, _) = params.step_forward(&plus, x, &mut MaddCounter::new()).unwrap();
        let (sm, _) = params.step_forward(&minus, x, &mut MaddCounter::new()).unwrap();
        for i in 0..big_k {
            out[i][j] = (sp[i] - sm[i]) / (2.0 * eps);
        }
    }
    out
}

/// Central finite differences for Ĩ: perturb each unmasked parameter.
fn fd_immediate(params: &CellParams, state: &StateVec, x: &InputVec<'_>, eps: f64) -> Vec<Vec<f64>> {
    let big_k = params.state_dim();
    let p_tilde = params.layout.p_tilde;
    let mut out = vec![vec![0.0; p_tilde]; big_k];
    let mut work = params.clone();
    let mut base = vec![0.0; p_tilde];
    params.read_compressed(&mut base);
    for j in 0..p_tilde {
        let mut v = base.clone();
        v[j] += eps;
        work.write_compressed(&v);
        let (sp, _) = work.step_forward(state, x, &mut MaddCounter::new()).unwrap();
        v[j] -= 2.0 * eps;
        work.write_compressed(&v);
        let (sm, _) = work.step_forward(state, x, &mut MaddCounter::new()).unwrap();
        for i in 0..big_k {
            out[i][j] = (sp[i] - sm[i]) / (2.0 * eps);
        }
    }
    out
}

fn all_archs() -> [Architecture; 3] {
    [Architecture::Vanilla, Architecture::Gru, Architecture::Lstm]
}

#[test]
fn vanilla_zero_params_step() {
    let mut params = CellParams::new(Architecture::Vanilla, 3, 2, 0.0, 1).unwrap();
    for w in &mut params.weights {
        w.values.iter_mut().for_each(|v| *v = 0.0);
    }
    let (d_pat, i_pat) = patterns(&params);
    let state = vec![0.3, -0.2, 0.7];
    let x = vec![1.0, -1.0];
    let out = params
        .step(&state, &InputVec::Dense(&x), &d_pat, &i_pat, &mut MaddCounter::new())
        .unwrap();
    assert_eq!(out.next_state, vec![0.0; 3]);
    assert!(out.d.values().iter().all(|&v| v == 0.0));
    // bias columns are one-hot with value 1·(1 − tanh²(0)) = 1
    for i in 0..3 {
        let j = params
            .layout
            .compressed_index(ParamRef::Bias { vector: 0, index: i })
            .unwrap();
        assert_eq!(out.i_tilde.get(i, j), 1.0);
    }
}

#[test]
fn vanilla_hand_computed_entry() {
    // k = 2, W_h = [[0, 0.5], [0, 0]], x path zero, h = [0, 1]
    let mut params = CellParams::new(Architecture::Vanilla, 2, 1, 0.0, 2).unwrap();
    for w in &mut params.weights {
        w.values.iter_mut().for_each(|v| *v = 0.0);
    }
    params.weights[0].set(0, 1, 0.5);
    let (d_pat, i_pat) = patterns(&params);
    let state = vec![0.0, 1.0];
    let x = vec![0.0];
    let out = params
        .step(&state, &InputVec::Dense(&x), &d_pat, &i_pat, &mut MaddCounter::new())
        .unwrap();
    let expect_h0 = 0.5f64.tanh();
    assert!((out.next_state[0] - expect_h0).abs() < 1e-15);
    assert_eq!(out.next_state[1], 0.0);
    let expect_d01 = 0.5 * (1.0 - expect_h0 * expect_h0);
    assert!((out.d.get(0, 1) - expect_d01).abs() < 1e-15);
}

#[test]
fn jacobians_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for arch in all_archs() {
        for &sparsity in &[0.0, 0.5] {
            let k = 6;
            let a = 3;
            let params = CellParams::new(arch, k, a, sparsity, rng.gen()).unwrap();
            let (d_pat, i_pat) = patterns(&params);
            let state = random_state(&params, &mut rng);
            let xv = random_input(a, &mut rng);
            let x = InputVec::Dense(&xv);
            let out = params
                .step(&state, &x, &d_pat, &i_pat, &mut MaddCounter::new())
                .unwrap();
            let fd_d = fd_dynamics(&params, &state, &x, 1e-5);
            let big_k = params.state_dim();
            for i in 0..big_k {
                for j in 0..big_k {
                    assert!(
                        (out.d.get(i, j) - fd_d[i][j]).abs() <= 1e-6,
                        "{:?} D[{i}][{j}]: {} vs fd {}",
                        arch,
                        out.d.get(i, j),
                        fd_d[i][j]
                    );
                }
            }
            let fd_i = fd_immediate(&params, &state, &x, 1e-5);
            for i in 0..big_k {
                for j in 0..params.layout.p_tilde {
                    assert!(
                        (out.i_tilde.get(i, j) - fd_i[i][j]).abs() <= 1e-6,
                        "{:?} I[{i}][{j}]: {} vs fd {}",
                        arch,
                        out.i_tilde.get(i, j),
                        fd_i[i][j]
                    );
                }
            }
        }
    }
}

#[test]
fn structural_patterns_superset_of_numerical_support() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for arch in all_archs() {
        let params = CellParams::new(arch, 8, 4, 0.75, 99).unwrap();
        let (d_pat, i_pat) = patterns(&params);
        for _ in 0..100 {
            let state = random_state(&params, &mut rng);
            let xv = random_input(4, &mut rng);
            let x = InputVec::Dense(&xv);
            let fd_d = fd_dynamics(&params, &state, &x, 1e-5);
            let big_k = params.state_dim();
            for i in 0..big_k {
                for j in 0..big_k {
                    if fd_d[i][j].abs() > 1e-7 {
                        assert!(d_pat.contains(i, j), "{arch:?} D support leak at ({i}, {j})");
                    }
                }
            }
        }
        // Ĩ support: single random evaluation per architecture is enough to
        // exercise every column
        let state = random_state(&params, &mut rng);
        let xv = random_input(4, &mut rng);
        let x = InputVec::Dense(&xv);
        let fd_i = fd_immediate(&params, &state, &x, 1e-5);
        for i in 0..params.state_dim() {
            for j in 0..params.layout.p_tilde {
                if fd_i[i][j].abs() > 1e-7 {
                    assert!(i_pat.contains(i, j), "{arch:?} I support leak at ({i}, {j})");
                }
            }
        }
    }
}

#[test]
fn immediate_pattern_rows_per_column() {
    for (arch, expected) in [
        (Architecture::Vanilla, 1usize),
        (Architecture::Gru, 1),
        (Architecture::Lstm, 2),
    ] {
        let params = CellParams::new(arch, 5, 3, 0.4, 7).unwrap();
        let i_pat = params.structural_i_pattern().unwrap();
        let mut per_col = vec![0usize; params.layout.p_tilde];
        for (_, c) in i_pat.positions() {
            per_col[c] += 1;
        }
        assert!(per_col.iter().all(|&n| n == expected), "{arch:?}");
    }
}

#[test]
fn gru_reset_param_feeds_single_row() {
    let params = CellParams::new(Architecture::Gru, 4, 2, 0.0, 3).unwrap();
    let i_pat = params.structural_i_pattern().unwrap();
    // W_hr is matrix index 1: the column for W_hr[i, j] holds exactly {row i}
    let j = params
        .layout
        .compressed_index(ParamRef::Weight { matrix: 1, row: 2, col: 0 })
        .unwrap();
    let rows: Vec<usize> = (0..4).filter(|&r| i_pat.contains(r, j)).collect();
    assert_eq!(rows, vec![2]);
}

#[test]
fn lstm_candidate_param_feeds_both_blocks() {
    let params = CellParams::new(Architecture::Lstm, 4, 2, 0.0, 3).unwrap();
    let i_pat = params.structural_i_pattern().unwrap();
    // W_hg is matrix index 2
    let j = params
        .layout
        .compressed_index(ParamRef::Weight { matrix: 2, row: 1, col: 3 })
        .unwrap();
    let rows: Vec<usize> = (0..8).filter(|&r| i_pat.contains(r, j)).collect();
    assert_eq!(rows, vec![1, 5]);
}

#[test]
fn vanilla_structural_patterns_from_mask() {
    let params = CellParams::new(Architecture::Vanilla, 3, 2, 0.0, 5).unwrap();
    assert_eq!(params.structural_d_pattern().unwrap(), SparsityPattern::full(3, 3));

    let mut sparse = CellParams::new(Architecture::Vanilla, 3, 2, 0.5, 5).unwrap();
    let cycle = SparsityPattern::from_positions(3, 3, &[(0, 1), (1, 2), (2, 0)]).unwrap();
    sparse.weights[0].mask = cycle.clone();
    sparse.weights[0].enforce_mask();
    assert_eq!(sparse.structural_d_pattern().unwrap(), cycle);
}

#[test]
fn masked_entry_perturbation_is_reverted_by_enforce() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut params = CellParams::new(Architecture::Gru, 5, 3, 0.6, 17).unwrap();
    let state = random_state(&params, &mut rng);
    let xv = random_input(3, &mut rng);
    let (base, _) = params
        .step_forward(&state, &InputVec::Dense(&xv), &mut MaddCounter::new())
        .unwrap();
    // find a masked entry and poke it
    let w = &params.weights[0];
    let (mr, mc) = (0..w.rows)
        .flat_map(|r| (0..w.cols).map(move |c| (r, c)))
        .find(|&(r, c)| !w.mask.contains(r, c))
        .expect("sparse matrix has masked entries");
    params.weights[0].set(mr, mc, 0.5);
    params.enforce_mask();
    let (after, _) = params
        .step_forward(&state, &InputVec::Dense(&xv), &mut MaddCounter::new())
        .unwrap();
    assert_eq!(base, after);
}

#[test]
fn one_hot_input_matches_dense_one_hot() {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    for arch in all_archs() {
        let params = CellParams::new(arch, 4, 6, 0.5, 41).unwrap();
        let (d_pat, i_pat) = patterns(&params);
        let state = random_state(&params, &mut rng);
        let mut dense = vec![0.0; 6];
        dense[2] = 1.0;
        let a = params
            .step(&state, &InputVec::Dense(&dense), &d_pat, &i_pat, &mut MaddCounter::new())
            .unwrap();
        let b = params
            .step(
                &state,
                &InputVec::OneHot { index: 2, dim: 6 },
                &d_pat,
                &i_pat,
                &mut MaddCounter::new(),
            )
            .unwrap();
        assert_eq!(a.next_state, b.next_state);
        assert_eq!(a.d.values(), b.d.values());
        assert_eq!(a.i_tilde.values(), b.i_tilde.values());
    }
}

#[test]
fn mask_nnz_matches_requested_sparsity() {
    let params = CellParams::new(Architecture::Vanilla, 8, 8, 0.75, 13).unwrap();
    assert_eq!(params.weights[0].mask.nnz(), 16); // round(0.25 · 64)
    // biases always dense: every bias index has a compressed column
    for i in 0..8 {
        assert!(params
            .layout
            .compressed_index(ParamRef::Bias { vector: 0, index: i })
            .is_some());
    }
}

#[test]
fn same_seed_same_cell() {
    let a = CellParams::new(Architecture::Lstm, 6, 3, 0.5, 77).unwrap();
    let b = CellParams::new(Architecture::Lstm, 6, 3, 0.5, 77).unwrap();
    for (wa, wb) in a.weights.iter().zip(&b.weights) {
        assert_eq!(wa.values, wb.values);
        assert_eq!(wa.mask, wb.mask);
    }
}

#[test]
fn non_finite_input_is_reported() {
    let params = CellParams::new(Architecture::Vanilla, 3, 2, 0.0, 1).unwrap();
    let state = vec![f64::NAN, 0.0, 0.0];
    let x = vec![0.0, 0.0];
    let err = params
        .step_forward(&state, &InputVec::Dense(&x), &mut MaddCounter::new())
        .unwrap_err();
    assert!(matches!(err, crate::error::Error::NonFinite { .. }));
}

#[test]
fn gru_variant1_patterns_are_denser() {
    // putting the reset gate before the matmul composes two parameterized
    // maps inside one step: both D and Ĩ pick up extra structural positions
    let params = CellParams::new(Architecture::Gru, 12, 4, 0.75, 55).unwrap();
    let d2 = params.structural_d_pattern().unwrap();
    let d1 = variant1_structural_d_pattern(&params).unwrap();
    // the reset contribution is a two-hop composition W_ha ∘ W_hr instead of
    // the direct W_hr positions, which fans out much wider at this sparsity
    assert!(d1.nnz() > d2.nnz());

    let i2 = params.structural_i_pattern().unwrap();
    let i1 = variant1_structural_i_pattern(&params).unwrap();
    assert!(i1.nnz() > i2.nnz());
    // some reset-gate column fans out to multiple units
    let mut per_col = vec![0usize; params.layout.p_tilde];
    for (_, c) in i1.positions() {
        per_col[c] += 1;
    }
    assert!(per_col.iter().any(|&n| n > 1));
}
