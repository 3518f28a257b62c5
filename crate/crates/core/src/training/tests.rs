use super::*;
use crate::data::vocab::{self, TokenId, MASK};
use crate::data::{TaskSet, WorldConfig};
use crate::masks::{causal_mask, span_aware_mask};
use crate::model::{forward, softmax, Graph, Matrix};

fn tiny_model() -> ModelConfig {
    ModelConfig {
        vocab: vocab::SIZE,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        max_len: 128,
        seed: 1,
    }
}

fn examples(n_tasks: usize) -> Vec<TrainingExample> {
    let set = TaskSet::generate(5, 1, n_tasks, WorldConfig::default()).unwrap();
    crate::data::make_training_set(&set.gold_trajectories().unwrap()).unwrap()
}

fn nll(row: &[f64], target: usize) -> f64 {
    -softmax(row)[target].ln()
}

#[test]
fn hand_cross_entropy() {
    let mut g = Graph::<f64>::new();
    let z = g.leaf(Matrix::from_vec(1, 4, vec![2.0, 0.0, 0.0, 0.0]).unwrap());
    let l = g.cross_entropy(z, &[0], &[1.0]).unwrap();
    let want = -(2f64.exp() / (2f64.exp() + 3.0)).ln();
    assert!((g.value(l).data[0] - want).abs() < 1e-12);
    assert!((want - 0.3408).abs() < 1e-4);
}

#[test]
fn uniform_model_scores_log_v() {
    let mut p = Parameters::<f64>::init(tiny_model()).unwrap();
    for x in &mut p.get_mut("lm_head").unwrap().data {
        *x = 0.0;
    }
    let ex = &examples(3)[1];
    let ln_v = (vocab::SIZE as f64).ln();
    for k in [1, 8, 16] {
        let b = loss_mdm(&p, ex, NoiseLevel::new(k, 16).unwrap(), 3, Flags::default(), 32).unwrap();
        if b.n_loss_tokens > 0 {
            assert!((b.l_mdm - ln_v).abs() < 1e-12);
        }
    }
    assert!((loss_ar(&p, ex).unwrap().l_ar - ln_v).abs() < 1e-12);
}

#[test]
fn shared_context_layout_matches_separate_forwards() {
    // Oracle: run the noisy sequence under the span-aware mask and the clean
    // sequence under the causal mask as two independent forwards.
    let p = Parameters::<f64>::init(tiny_model()).unwrap();
    let ex = &examples(4)[2];
    let level = NoiseLevel::new(9, 16).unwrap();
    let got = evaluate(
        &p,
        &Objective {
            lambda: 0.5,
            ..Objective::default()
        },
        &[BatchItem {
            example: ex,
            level,
            seed: 21,
        }],
    )
    .unwrap();

    let padded = ex.padded(32);
    let (noisy, plan) = crate::corruption::corrupt(&padded, level, 21).unwrap();
    let clean = padded.tokens();
    let z = forward(&p, &noisy, &span_aware_mask(&padded.layout).unwrap()).unwrap();
    let mdm: f64 = plan
        .masked_positions
        .iter()
        .map(|&q| nll(&z.row(q - 1).to_vec(), clean[q].index()))
        .sum::<f64>()
        / plan.masked_positions.len() as f64;
    let seq = ex.tokens();
    let z = forward(&p, &seq, &causal_mask(seq.len())).unwrap();
    let c = ex.context.len();
    let ar: f64 = (0..ex.action.len())
        .map(|i| nll(&z.row(c + i - 1).to_vec(), seq[c + i].index()))
        .sum::<f64>()
        / ex.action.len() as f64;
    assert!((got.l_mdm - mdm).abs() < 1e-10, "{} vs {mdm}", got.l_mdm);
    assert!((got.l_ar - ar).abs() < 1e-10);
    assert!((got.l_total - (mdm + 0.5 * ar)).abs() < 1e-10);
    assert_eq!(got.n_loss_tokens, plan.masked_positions.len());
}

#[test]
fn lambda_boundary_and_affinity() {
    let p = Parameters::<f32>::init(tiny_model()).unwrap();
    let data = examples(4);
    let items: Vec<BatchItem> = data
        .iter()
        .enumerate()
        .map(|(i, e)| BatchItem {
            example: e,
            level: NoiseLevel::new(1 + i % 16, 16).unwrap(),
            seed: i as u64,
        })
        .collect();
    let at = |lambda| {
        evaluate(
            &p,
            &Objective {
                lambda,
                ..Objective::default()
            },
            &items,
        )
        .unwrap()
    };
    let (l0, l5, l1) = (at(0.0), at(0.5), at(1.0));
    assert_eq!(l0.l_total, l0.l_mdm);
    assert!((l5.l_total - (l0.l_total + l1.l_total) / 2.0).abs() < 1e-6);
    assert_eq!(l5.l_total, (l5.l_mdm as f32 + 0.5f32 * l5.l_ar as f32) as f64);
}

#[test]
fn whole_sequence_corruption_masks_context() {
    let ex = &examples(2)[0];
    let padded = ex.padded(32);
    let (x, _) = crate::corruption::corrupt_with(
        &padded,
        NoiseLevel::new(16, 16).unwrap(),
        0,
        crate::corruption::CorruptionScope::WholeSequence,
    )
    .unwrap();
    assert!(x[..ex.context.len()].iter().all(|t| *t == MASK));
    let p = Parameters::<f32>::init(tiny_model()).unwrap();
    let flags = Flags {
        context_clean: false,
        span_aware: false,
    };
    let b = loss_mdm(&p, ex, NoiseLevel::new(16, 16).unwrap(), 0, flags, 32).unwrap();
    assert_eq!(b.n_loss_tokens, 32);
}

#[test]
fn zero_masked_example_has_zero_weight() {
    let p = Parameters::<f32>::init(tiny_model()).unwrap();
    let data = examples(3);
    // Level 1/1024 almost never masks a 32-token span; find a seed that masks nothing.
    let level = NoiseLevel::new(1, 1024).unwrap();
    let seed = (0..1000u64)
        .find(|&s| crate::corruption::corrupt(&data[0].padded(32), level, s).unwrap().1.masked_positions.is_empty())
        .unwrap();
    let alone = loss_mdm(&p, &data[0], level, seed, Flags::default(), 32).unwrap();
    assert_eq!((alone.l_mdm, alone.n_loss_tokens), (0.0, 0));
    let full = NoiseLevel::new(16, 16).unwrap();
    let obj = Objective::default();
    let pair = evaluate(
        &p,
        &obj,
        &[
            BatchItem { example: &data[0], level, seed },
            BatchItem { example: &data[1], level: full, seed: 1 },
        ],
    )
    .unwrap();
    let single = evaluate(&p, &obj, &[BatchItem { example: &data[1], level: full, seed: 1 }]).unwrap();
    assert!((pair.l_mdm - single.l_mdm).abs() < 1e-6);
}

fn finite_difference_check(flags: Flags, coords: usize) -> f64 {
    let p = Parameters::<f64>::init(tiny_model()).unwrap();
    let data = examples(3);
    let obj = Objective {
        flags,
        ..Objective::default()
    };
    let items: Vec<BatchItem> = data[..3]
        .iter()
        .enumerate()
        .map(|(i, e)| BatchItem {
            example: e,
            level: NoiseLevel::new(6 + i, 16).unwrap(),
            seed: 100 + i as u64,
        })
        .collect();
    let analytic = grad(&p, |g, n| Ok(batch_loss(g, n, &p.config, &obj, &items)?.total)).unwrap();
    let mut worst: f64 = 0.0;
    let mut rng = stream_rng(7, 0, 0);
    let h = 1e-4;
    for _ in 0..coords {
        let a = (rng.next_u64() % p.arrays().len() as u64) as usize;
        let j = (rng.next_u64() % p.arrays()[a].len() as u64) as usize;
        let mut plus = p.clone();
        plus.arrays_mut()[a].data[j] += h;
        let mut minus = p.clone();
        minus.arrays_mut()[a].data[j] -= h;
        let fp = evaluate(&plus, &obj, &items).unwrap().l_total;
        let fm = evaluate(&minus, &obj, &items).unwrap().l_total;
        let numeric = (fp - fm) / (2.0 * h);
        let exact = analytic.arrays[a].data[j];
        worst = worst.max(crate::training::relative_error(exact, numeric));
    }
    worst
}

#[test]
fn gradients_match_finite_differences() {
    for flags in [
        Flags::default(),
        Flags {
            context_clean: false,
            span_aware: false,
        },
    ] {
        let worst = finite_difference_check(flags, 40);
        assert!(worst <= 1e-4, "{flags:?}: {worst}");
    }
}

#[test]
fn regimes_share_the_example_stream() {
    let data = examples(6);
    let base = TrainConfig {
        model: tiny_model(),
        epochs: 2,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let ar = TrainConfig {
        objective: Objective {
            regime: Regime::Ar,
            ..base.objective
        },
        ..base
    };
    let a = train(&base, &data, |_| {}).unwrap();
    let b = train(&ar, &data, |_| {}).unwrap();
    assert_eq!(a.stream_hash, b.stream_hash);
    assert_eq!(a.steps.len(), b.steps.len());
    assert_eq!(a.epochs.len(), 2);
    assert!(b.steps.iter().all(|s| s.l_mdm == 0.0 && s.l_total == s.l_ar));
    // Same seed, same result.
    let again = train(&base, &data, |_| {}).unwrap();
    assert_eq!(again.checkpoint, a.checkpoint);
    assert_eq!(again.steps, a.steps);
}

#[test]
fn overfits_a_single_forced_token() {
    let ctx = vec![vocab::BOS, vocab::QUERY, vocab::entity(3), vocab::END_QUERY];
    let ex = TrainingExample::new(ctx, vec![vocab::entity(7)]);
    let cfg = TrainConfig {
        model: tiny_model(),
        objective: Objective {
            regime: Regime::Ar,
            ..Objective::default()
        },
        epochs: 500,
        batch_size: 1,
        lr_start: 3e-2,
        lr_end: 3e-2,
        optimizer: OptimizerKind::adam(),
        ..TrainConfig::default()
    };
    let out = train(&cfg, std::slice::from_ref(&ex), |_| {}).unwrap();
    let l = loss_ar(&out.checkpoint.params, &ex).unwrap().l_ar;
    assert!(l < 1e-3, "{l}");
}

#[test]
fn divergence_reports_step() {
    let data = examples(2);
    let cfg = TrainConfig {
        model: tiny_model(),
        lr_start: 1e30,
        lr_end: 1e30,
        grad_clip: 0.0,
        epochs: 3,
        batch_size: 1,
        optimizer: OptimizerKind::sgd(),
        ..TrainConfig::default()
    };
    match train(&cfg, &data, |_| {}) {
        Err(Error::Diverged { step }) => assert!(step < 10),
        Err(e) => panic!("{e}"),
        Ok(_) => panic!("expected divergence"),
    }
}

#[test]
fn rejects_bad_inputs() {
    assert!(train(&TrainConfig::default(), &[], |_| {}).is_err());
    let bad = TrainConfig {
        lr_end: 1.0,
        ..TrainConfig::default()
    };
    assert!(bad.validate().is_err());
    let p = Parameters::<f32>::init(tiny_model()).unwrap();
    let empty_ctx = TrainingExample::new(vec![], vec![TokenId(20)]);
    assert!(loss_ar(&p, &empty_ctx).is_err());
}

#[test]
fn loss_csv_has_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("loss.csv");
    let logs = [StepLog {
        step: 0,
        epoch: 0,
        l_mdm: 1.5,
        l_ar: 2.0,
        l_total: 2.5,
        lr: 3e-4,
    }];
    write_loss_csv(&path, &logs).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    assert_eq!(text.lines().next().unwrap(), "step,epoch,l_mdm,l_ar,l_total,lr");
    assert_eq!(text.lines().count(), 2);
}
