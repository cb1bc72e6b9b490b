//! Randomized invariants across the pipeline.

use approx::assert_abs_diff_eq;
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use uniasm::asm::{normalize_instruction, parse_corpus, serialize_linear, serialize_longest_walk, Serialization};
use uniasm::dataset::{pack_pair_ids, pair_budgets, split_shuffle};
use uniasm::model::{MaskMode, Model, ModelConfig, ModelInput};
use uniasm::search::{embed_ids, rank_all, recall_at_k, EmbeddingPool, FunctionLabel};
use uniasm::tokenizer::{build_vocab, tokenize, TokenizerConfig, TokenizerMode};
use uniasm::train::{joint_loss, loss_alg, loss_mlm, loss_sfp, sfp_loss_from_embeddings, TaskSet, TrainConfig, Trainer};

fn tiny(max_seq_len: usize) -> ModelConfig {
    ModelConfig {
        layers: 2,
        heads: 2,
        hidden: 16,
        intermediate: 32,
        max_seq_len,
        vocab_size: 40,
    }
}

fn fixture_corpus() -> Vec<uniasm::asm::NormalizedFunction> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/corpus3.jsonl");
    parse_corpus(&std::fs::read_to_string(path).unwrap())
        .unwrap()
        .iter()
        .map(|f| f.normalize())
        .collect()
}

fn operand() -> impl Strategy<Value = String> {
    prop_oneof![
        "(r[a-d]x|e[a-d]x|rsp|rbp|rip|xmm[0-9]|ymm1[0-5]|r1[0-5]d?)",
        "(0x[0-9a-f]{1,8}|-?[0-9]{1,5}|[0-9a-f]{2,6}h)",
        "(qword |dword |byte )?(ptr )?(fs:)?\\[(rip|rsp|rbp|rax|rbx) ?[+-] ?(0x[0-9a-f]{1,4}|rcx\\*[1248])\\]",
    ]
}

fn instruction() -> impl Strategy<Value = String> {
    (
        "(mov|add|lea|call|jmp|jnz|ja|jle|cmp|movaps|rep stosq|lock xadd)",
        prop::collection::vec(operand(), 0..3),
    )
        .prop_map(|(op, ops)| if ops.is_empty() { op } else { format!("{op}  {}", ops.join(" ,  ")) })
}

proptest! {
    #[test]
    fn normalization_is_idempotent(ins in instruction()) {
        let once = normalize_instruction(&ins);
        prop_assert_eq!(normalize_instruction(&once), once);
    }

    #[test]
    fn no_raw_numbers_survive(ins in instruction()) {
        let out = normalize_instruction(&ins);
        prop_assert!(!out.contains("0x"), "{} -> {}", ins, out);
    }

    #[test]
    fn pair_budgets_fill_the_room(a in 0usize..400, b in 0usize..400, max in 8usize..300) {
        let (x, y) = pair_budgets(a, b, max);
        prop_assert!(x <= a && y <= b);
        prop_assert!(x + y <= max - 3);
        prop_assert!(x + y == (a + b).min(max - 3));
    }

    #[test]
    fn packed_pairs_are_valid(a in 1usize..40, b in 1usize..40, max in 8usize..64) {
        let first: Vec<u32> = (0..a as u32).map(|i| 5 + i % 20).collect();
        let second: Vec<u32> = (0..b as u32).map(|i| 6 + i % 20).collect();
        let seq = pack_pair_ids(&first, &second, max).unwrap();
        prop_assert!(seq.len() <= max);
        prop_assert!(seq.validate(max).is_ok());
        prop_assert_eq!(seq.prefix_len() + seq.target_len(), seq.len());
    }

    #[test]
    fn split_keeps_swap_units_together(units in 1usize..60, ratio in 0.0f64..=1.0, seed in any::<u64>()) {
        let samples: Vec<usize> = (0..2 * units).collect();
        let (train, valid) = split_shuffle(samples, ratio, seed).unwrap();
        prop_assert_eq!(train.len() + valid.len(), 2 * units);
        prop_assert_eq!(train.len() / 2, (ratio * units as f64).round() as usize);
        for part in [&train, &valid] {
            for unit in part.chunks(2) {
                prop_assert_eq!(unit[0] / 2, unit[1] / 2);
            }
        }
    }

    #[test]
    fn sfp_is_scale_invariant(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb = Array2::from_shape_fn((6, 5), |_| rng.random_range(-2.0..2.0));
        let (a, _) = sfp_loss_from_embeddings(&emb).unwrap();
        let (b, _) = sfp_loss_from_embeddings(&(&emb * scale)).unwrap();
        prop_assert!((a - b).abs() < 1e-6);
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn ranking_is_scale_invariant(seed in any::<u64>(), scale in 0.001f32..1000.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = Array2::from_shape_fn((30, 8), |_| rng.random_range(-1.0f32..1.0));
        let labels = (0..30)
            .map(|i| FunctionLabel { project: "p".into(), func_name: format!("f{i}"), variant: Default::default() })
            .collect();
        let pool = EmbeddingPool::new(rows, labels).unwrap();
        let q = ndarray::Array1::from_shape_fn(8, |_| rng.random_range(-1.0f32..1.0));
        let base: Vec<usize> = rank_all(q.view(), &pool).unwrap().iter().map(|h| h.index).collect();
        let scaled: Vec<usize> = rank_all((&q * scale).view(), &pool).unwrap().iter().map(|h| h.index).collect();
        prop_assert_eq!(base, scaled);
    }
}

#[test]
fn recall_is_monotone_in_k_and_self_retrieval_ranks_first() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 80;
    let rows = Array2::from_shape_fn((n, 12), |_| rng.random_range(-1.0f32..1.0));
    let labels: Vec<FunctionLabel> = (0..n)
        .map(|i| FunctionLabel { project: "p".into(), func_name: format!("f{i}"), variant: Default::default() })
        .collect();
    let pool = EmbeddingPool::new(rows.clone(), labels.clone()).unwrap();
    let noisy = EmbeddingPool::new(rows.mapv(|x| x + rng.random_range(-1.0f32..1.0)), labels).unwrap();
    let gt: Vec<Option<usize>> = (0..n).map(Some).collect();
    let mut last = 0.0;
    for k in 1..=n {
        let r = recall_at_k("m", &noisy, &pool, &gt, k).unwrap();
        assert!(r.recall >= last);
        last = r.recall;
    }
    assert_eq!(last, 1.0);
    let own = recall_at_k("self", &pool, &pool, &gt, 1).unwrap();
    assert_eq!(own.recall, 1.0);
}

#[test]
fn padding_does_not_change_real_positions() {
    let model = Model::init(tiny(24), 3).unwrap().cast::<f64>();
    let seq = pack_pair_ids(&[5, 6, 7, 8], &[9, 10, 11], 24).unwrap();
    for mode in [MaskMode::Alg, MaskMode::Bidirectional] {
        let plain = model.forward(&ModelInput::from_packed(&seq, mode).unwrap(), false).unwrap();
        let padded = model.forward(&ModelInput::padded(&seq, mode, 20).unwrap(), false).unwrap();
        for i in 0..seq.len() {
            for (a, b) in plain.hidden.row(i).iter().zip(padded.hidden.row(i)) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
            }
        }
    }
}

#[test]
fn pair_cls_under_generation_mask_is_the_single_function_embedding() {
    let model = Model::init(tiny(24), 4).unwrap().cast::<f64>();
    let first = [5u32, 9, 12, 7, 30];
    let pair = pack_pair_ids(&first, &[8, 8, 21], 24).unwrap();
    let f = model.forward(&ModelInput::from_packed(&pair, MaskMode::Alg).unwrap(), false).unwrap();
    let from_pair = uniasm::model::function_embedding(f.cls(), &model.params);
    let single = embed_ids(&model, &first).unwrap();
    for (a, b) in from_pair.iter().zip(&single) {
        assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
    }
}

#[test]
fn joint_gradient_is_the_sum_of_task_gradients() {
    let model = Model::init(tiny(16), 5).unwrap().cast::<f64>();
    let batch = vec![
        pack_pair_ids(&[5, 6, 7], &[8, 9, 10, 11], 16).unwrap(),
        pack_pair_ids(&[8, 9, 10, 11], &[5, 6, 7], 16).unwrap(),
        pack_pair_ids(&[12, 13], &[14, 15, 16], 16).unwrap(),
        pack_pair_ids(&[14, 15, 16], &[12, 13], 16).unwrap(),
    ];
    let all = TaskSet { alg: true, sfp: true, mlm: true };
    let (report, joint) = joint_loss(&model, &batch, all, 0.3, 7).unwrap();
    let (la, ga) = loss_alg(&model, &batch).unwrap();
    let (ls, gs) = loss_sfp(&model, &batch).unwrap();
    let (lm, gm) = loss_mlm(&model, &batch, 0.3, 7).unwrap();
    assert_eq!(report.alg, Some(la));
    assert_eq!(report.sfp, Some(ls));
    assert_eq!(report.mlm, lm);
    let mut sum = ga;
    sum.add_assign(&gs);
    sum.add_assign(&gm);
    for ((name, _, a), (_, _, b)) in joint.tensors().iter().zip(sum.tensors()) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= 1e-13 * (1.0 + y.abs()), "{name}: {x} vs {y}");
        }
    }
}

#[test]
fn single_pair_overfits() {
    let seq = pack_pair_ids(&[5, 6, 7, 8, 9], &[10, 11, 12, 13], 16).unwrap();
    let swapped = pack_pair_ids(&[10, 11, 12, 13], &[5, 6, 7, 8, 9], 16).unwrap();
    let config = TrainConfig {
        batch_size: 2,
        learning_rate: 1e-2,
        warmup_steps: 4,
        max_steps: 200,
        seed: 3,
        tasks: TaskSet { alg: true, sfp: false, mlm: false },
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(Model::init(tiny(16), 6).unwrap(), config).unwrap();
    let history = trainer.fit(&[seq, swapped], None).unwrap();
    let last = history.last().unwrap().loss.alg.unwrap();
    assert!(last < 0.1, "final loss {last}");
}

#[test]
fn vocabulary_shrinks_with_finer_tokens() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ops = ["mov", "add", "sub", "xor", "cmp", "lea"];
    let operands = ["eax", "ebx", "ecx", "SSP", "SBP", "MEM", "NUM", "qword ptr PTR"];
    let instrs: Vec<String> = (0..2000)
        .map(|_| {
            let pick = |rng: &mut ChaCha8Rng| operands[rng.random_range(0..operands.len())];
            let op = ops[rng.random_range(0..ops.len())];
            format!("{op} {}, {}", pick(&mut rng), pick(&mut rng))
        })
        .collect();
    let size = |mode| {
        let config = TokenizerConfig { mode, vocab_cap: 10_000 };
        build_vocab(tokenize(&instrs, mode), config).len()
    };
    let (full, half, piece) = (size(TokenizerMode::FullI), size(TokenizerMode::HalfI), size(TokenizerMode::PieceI));
    assert!(full > half && half > piece, "{full} {half} {piece}");
}

#[test]
fn token_counts_per_mode() {
    for f in fixture_corpus() {
        let instrs = serialize_linear(&f);
        let n = instrs.len();
        assert_eq!(tokenize(&instrs, TokenizerMode::FullI).len(), n);
        let half = tokenize(&instrs, TokenizerMode::HalfI).len();
        assert!((n..=2 * n).contains(&half));
        assert!(tokenize(&instrs, TokenizerMode::PieceI).len() >= n);
    }
}

#[test]
fn linear_serialization_covers_every_walk() {
    for f in fixture_corpus().iter().filter(|f| f.cfg.is_some()) {
        let linear = serialize_linear(f).len();
        assert!(serialize_longest_walk(f).unwrap().len() <= linear);
        for seed in 0..10 {
            assert!(Serialization::RandomWalk { seed }.apply(f).unwrap().len() <= linear);
        }
    }
}
