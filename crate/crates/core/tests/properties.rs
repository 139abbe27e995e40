use proptest::prelude::*;

use icl_core::config::{ExperimentConfig, SweepAxis};
use icl_core::harness::{
    block_alignment, directional_alignment, msd_per_block, sweep, token_alignment,
};
use icl_core::implicit::extract_updates;
use icl_core::model::{block_forward, query_only_block_forward, BlockVariant, ModelParams, ModelShape};
use icl_core::taskgen::sample_tasks;
use icl_core::tensor::{gaussian, softmax_columns, Mask, Matrix, RngState};
use icl_core::train::{loss, loss_and_gradients};

fn variant_strategy() -> impl Strategy<Value = BlockVariant> {
    prop::sample::select(BlockVariant::ALL.to_vec())
}

fn shape(variant: BlockVariant, blocks: usize, width: usize, heads: usize) -> ModelShape {
    ModelShape {
        variant,
        blocks,
        width,
        heads,
        head_dim: width.div_ceil(heads),
        hidden: 4 * width,
        ln_eps: 1e-5,
        positions: None,
    }
}

/// Double loop over tasks and tokens, re-running each block from its own input.
fn naive_msd(params: &ModelParams, inputs: &[Matrix]) -> Vec<f64> {
    let (d, n) = inputs[0].shape();
    let mut totals = vec![0.0; params.blocks.len()];
    for x in inputs {
        let mut h = params.embed(x).unwrap();
        for (l, block) in params.blocks.iter().enumerate() {
            let (out, trace) = block_forward(block, params.variant, &h).unwrap();
            let mut sum = 0.0;
            for u in extract_updates(&trace, block, l).unwrap() {
                let rhs = query_only_block_forward(block, params.variant, &h.col(n - 1), &u.delta_w, &u.delta_b).unwrap();
                for k in 0..d {
                    let e = out[(k, u.token)] - rhs[k];
                    sum += e * e;
                }
            }
            totals[l] += sum;
            h = out;
        }
    }
    totals.into_iter().map(|s| s / (inputs.len() * n * d) as f64).collect()
}

#[test]
fn msd_matches_a_naive_reference() {
    for v in BlockVariant::ALL {
        let params = ModelParams::init(&mut RngState::new(21), &shape(v, 3, 3, 3));
        let inputs = sample_tasks(&mut RngState::new(22), 6, 10, 2).sequences();
        let fast = msd_per_block(&params, &inputs).unwrap();
        let slow = naive_msd(&params, &inputs);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() <= 1e-15 * a.abs().max(b.abs()), "{v}: {a:e} vs {b:e}");
        }
    }
}

#[test]
fn two_block_alignment_equals_the_direct_metric() {
    let params = ModelParams::init(&mut RngState::new(5), &shape(BlockVariant::Skip, 2, 3, 3));
    let seq = sample_tasks(&mut RngState::new(6), 1, 8, 2).sequences().remove(0);
    let m = block_alignment(&params, &seq, 0).unwrap();
    let trace = params.forward_traced(&seq).unwrap();
    let last: Vec<Matrix> = (0..2)
        .map(|l| extract_updates(&trace.blocks[l], &params.blocks[l], l).unwrap().pop().unwrap().delta_w)
        .collect();
    let direct = directional_alignment(&last[0], &last[1]).unwrap();
    assert_eq!(m.get(0, 1), Some(direct));
    assert_eq!(m.get(1, 0), Some(direct));
}

#[test]
fn a_single_sweep_value_with_one_logged_step_gives_one_row() {
    let base = ExperimentConfig {
        batch: 4,
        seq_len: 5,
        blocks: 1,
        steps: 1,
        eval_steps: Some(vec![1]),
        ..ExperimentConfig::default()
    };
    let r = sweep(&base, SweepAxis::Tasks, &[4]).unwrap();
    assert_eq!(r.rows.len(), 1);
    assert_eq!((r.rows[0].value, r.rows[0].step), (4, 1));
}

#[test]
fn gradients_do_not_depend_on_the_thread_count() {
    let params = ModelParams::init(&mut RngState::new(8), &shape(BlockVariant::PreLn, 2, 3, 3));
    let batch = sample_tasks(&mut RngState::new(9), 13, 7, 2);
    let (x, y) = (batch.sequences(), batch.targets());
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| loss_and_gradients(&params, &x, &y).unwrap())
    };
    let (l1, g1) = run(1);
    let (l4, g4) = run(4);
    assert_eq!(l1.to_bits(), l4.to_bits());
    assert_eq!(g1, g4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn equivalence_holds_on_random_models(
        variant in variant_strategy(),
        blocks in 1usize..4,
        input_dim in 1usize..5,
        heads in 1usize..4,
        seq_len in 1usize..12,
        seed in any::<u64>(),
    ) {
        let params = ModelParams::init(&mut RngState::new(seed), &shape(variant, blocks, input_dim + 1, heads));
        let inputs = sample_tasks(&mut RngState::substream(seed, "tasks"), 3, seq_len, input_dim).sequences();
        let msd = msd_per_block(&params, &inputs).unwrap();
        prop_assert!(msd.iter().all(|&m| m <= 1e-12), "{:?}", msd);
    }

    #[test]
    fn alignment_matrices_are_symmetric_and_bounded(
        variant in variant_strategy(),
        seq_len in 2usize..9,
        seed in any::<u64>(),
    ) {
        let params = ModelParams::init(&mut RngState::new(seed), &shape(variant, 2, 3, 3));
        let seq = sample_tasks(&mut RngState::substream(seed, "tasks"), 1, seq_len, 2).sequences().remove(0);
        for m in token_alignment(&params, &seq, 0).unwrap() {
            for i in 0..m.size() {
                if let Some(d) = m.get(i, i) {
                    prop_assert!((d - 1.0).abs() <= 1e-12);
                }
                for j in 0..m.size() {
                    prop_assert_eq!(m.get(i, j).is_some(), m.get(j, i).is_some());
                    if let (Some(a), Some(b)) = (m.get(i, j), m.get(j, i)) {
                        prop_assert!((a - b).abs() <= 1e-12);
                        prop_assert!(a.abs() <= 1.0 + 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn alignment_flips_sign_under_opposite_scaling(
        rows in 1usize..6, cols in 1usize..6, a in 0.01f64..100.0, b in -100.0f64..-0.01, seed in any::<u64>(),
    ) {
        let mut rng = RngState::new(seed);
        let u = gaussian(&mut rng, rows, cols);
        let v = gaussian(&mut rng, rows, cols);
        let da = directional_alignment(&u, &v).unwrap();
        prop_assert!(da.abs() <= 1.0 + 1e-12);
        prop_assert!((directional_alignment(&u.scale(a), &v.scale(b)).unwrap() + da).abs() <= 1e-12);
    }

    #[test]
    fn loss_is_nonnegative_and_zero_only_at_the_targets(
        preds in prop::collection::vec(-10.0f64..10.0, 1..20), shift in -1.0f64..1.0,
    ) {
        prop_assert_eq!(loss(&preds, &preds).unwrap(), 0.0);
        let targets: Vec<f64> = preds.iter().map(|p| p + shift).collect();
        let l = loss(&preds, &targets).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert_eq!(l == 0.0, targets == preds);
    }

    #[test]
    fn causal_softmax_columns_are_distributions(n in 1usize..10, seed in any::<u64>()) {
        let scores = gaussian(&mut RngState::new(seed), n, n).scale(5.0);
        let p = softmax_columns(&scores, &Mask::causal(n)).unwrap();
        for i in 0..n {
            let col = p.col(i);
            prop_assert!((col.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for (j, &w) in col.iter().enumerate() {
                let ok = if j > i { w == 0.0 } else { w > 0.0 };
                prop_assert!(ok);
            }
        }
    }
}
