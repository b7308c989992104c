// Reference values are kept at the precision they were computed with.
#![allow(clippy::excessive_precision)]

mod common;

use common::fixtures::{max_abs_diff, random_scalar_lstm, random_sequence, sequence_tensor, to_weights};
use common::oracle::ScalarLstm;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skigear::nn::{bilstm_sequence, lstm_sequence, lstm_sequence_from, lstm_step, CandidateActivation, LstmState, LstmVariant};
use skigear::Tensor;

fn candidate(s: &ScalarLstm) -> CandidateActivation {
    if s.sigmoid_candidate {
        CandidateActivation::Sigmoid
    } else {
        CandidateActivation::Tanh
    }
}

#[test]
fn step_and_sequence_match_the_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..300 {
        let hidden = rng.random_range(1..=3);
        let inputs = rng.random_range(1..=2);
        let steps = rng.random_range(1..=5);
        let oracle = random_scalar_lstm(&mut rng, inputs, hidden, case % 3 == 1, case % 5 == 4);
        let w = to_weights(&oracle);
        let cand = candidate(&oracle);
        let xs = random_sequence(&mut rng, steps, inputs);
        let trace = oracle.unroll(&xs);

        let mut state = LstmState::zeros(hidden);
        for (x, (h, c)) in xs.iter().zip(&trace) {
            state = lstm_step(&Tensor::vector(x.clone()), &state, &w, cand).unwrap();
            assert!(max_abs_diff(state.h.data(), h) <= 1e-12, "case {case}");
            assert!(max_abs_diff(state.c.data(), c) <= 1e-12, "case {case}");
        }
        let h_last = lstm_sequence(&sequence_tensor(&xs), &w, cand).unwrap();
        assert!(max_abs_diff(h_last.data(), &trace[steps - 1].0) <= 1e-12, "case {case}");
    }
}

#[test]
fn zero_peepholes_equal_the_standard_cell_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let standard = random_scalar_lstm(&mut rng, 2, 3, false, false);
        let w = to_weights(&standard);
        let peep = to_weights(&ScalarLstm {
            peep: Some([vec![0.0; 3], vec![0.0; 3], vec![0.0; 3]]),
            ..standard.clone()
        });
        assert_eq!(peep.variant(), LstmVariant::Peephole);
        let xs = sequence_tensor(&random_sequence(&mut rng, 5, 2));
        let a = lstm_sequence(&xs, &w, CandidateActivation::Tanh).unwrap();
        let b = lstm_sequence(&xs, &peep, CandidateActivation::Tanh).unwrap();
        assert_eq!(a.data(), b.data());
    }
}

/// Single-unit cell with hand-picked weights, checked against values computed
/// at 40 significant digits.
#[test]
fn single_unit_hand_trace() {
    let cell = ScalarLstm {
        wx: [vec![vec![0.5]], vec![vec![-0.25]], vec![vec![0.75]], vec![vec![1.5]]],
        wh: [vec![vec![0.1]], vec![vec![0.2]], vec![vec![-0.3]], vec![vec![0.4]]],
        b: [vec![0.0], vec![1.0], vec![0.1], vec![-0.2]],
        peep: None,
        sigmoid_candidate: false,
    };
    let xs = vec![vec![1.0], vec![-0.5], vec![2.0]];
    let expect_standard = [
        (0.34345210553175227155, 0.53638762142730985208),
        (0.04540848335145679632, 0.11214609365660560374),
        (0.54972991424309624772, 0.79679424906059984158),
    ];
    let expect_peephole = [
        (0.38793129921516529894, 0.53638762142730985208),
        (0.023656206805131504218, 0.056957364446060558131),
        (0.5841029313409688729, 0.76461044650097611543),
    ];
    let peephole = ScalarLstm {
        peep: Some([vec![0.3], vec![-0.6], vec![0.9]]),
        ..cell.clone()
    };
    for (oracle, expect) in [(cell, expect_standard), (peephole, expect_peephole)] {
        let w = to_weights(&oracle);
        let mut state = LstmState::zeros(1);
        for (x, (h, c)) in xs.iter().zip(expect) {
            state = lstm_step(&Tensor::vector(x.clone()), &state, &w, CandidateActivation::Tanh).unwrap();
            assert!((state.h.data()[0] - h).abs() <= 1e-14);
            assert!((state.c.data()[0] - c).abs() <= 1e-14);
        }
        for ((h, c), (hh, cc)) in oracle.unroll(&xs).iter().zip(expect) {
            assert!((h[0] - hh).abs() <= 1e-14 && (c[0] - cc).abs() <= 1e-14);
        }
    }
}

#[test]
fn continuing_from_a_state_matches_one_long_run() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let oracle = random_scalar_lstm(&mut rng, 2, 3, true, false);
    let w = to_weights(&oracle);
    let xs = random_sequence(&mut rng, 5, 2);
    let mid = lstm_sequence_from(&sequence_tensor(&xs[..2]), &w, CandidateActivation::Tanh, &LstmState::zeros(3)).unwrap();
    let end = lstm_sequence_from(&sequence_tensor(&xs[2..]), &w, CandidateActivation::Tanh, &mid).unwrap();
    let trace = oracle.unroll(&xs);
    assert!(max_abs_diff(end.h.data(), &trace[4].0) <= 1e-12);
    assert!(max_abs_diff(end.c.data(), &trace[4].1) <= 1e-12);
}

#[test]
fn bidirectional_concatenates_forward_and_reversed_passes() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..30 {
        let fwd = random_scalar_lstm(&mut rng, 2, 2, false, false);
        let bwd = random_scalar_lstm(&mut rng, 2, 3, false, false);
        let xs = random_sequence(&mut rng, 4, 2);
        let mut reversed = xs.clone();
        reversed.reverse();
        let mut expect = fwd.unroll(&xs)[3].0.clone();
        expect.extend(bwd.unroll(&reversed)[3].0.clone());
        let out = bilstm_sequence(&sequence_tensor(&xs), &to_weights(&fwd), &to_weights(&bwd), CandidateActivation::Tanh).unwrap();
        assert_eq!(out.len(), 5);
        assert!(max_abs_diff(out.data(), &expect) <= 1e-12);
    }
}
