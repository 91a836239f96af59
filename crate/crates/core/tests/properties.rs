//! Mask, tokenization and batching invariants over random records.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hindsight_core::batch::{apply_fcm, collate, truncate_prompt_side, BatchError, FcmConfig, RowSource};
use hindsight_core::chain::{
    build_baseline, build_coh, build_examples, loss_mask_chars, ChainSpec, LossPolicy, TrainingMode,
};
use hindsight_core::corpus::{PreferenceRecord, RatedOutput, Source, Task};
use hindsight_core::feedback::{Role, TemplateRegistry};
use hindsight_core::token::{tokenize_example, Vocab, BOS, EOS};

fn text() -> impl Strategy<Value = String> {
    "[a-zé中🙂][a-z é中🙂:.]{0,10}"
}

fn record() -> impl Strategy<Value = PreferenceRecord> {
    (
        prop_oneof![Just(Task::Summary), Just(Task::Dialogue), Just(Task::Qa)],
        text(),
        prop::collection::vec(text(), 2..=4),
        any::<u64>(),
    )
        .prop_map(|(task, prompt, outs, seed)| {
            let mut ranks: Vec<u32> = (0..outs.len() as u32).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::SliceRandom::shuffle(&mut ranks[..], &mut rng);
            let outputs =
                outs.into_iter().zip(ranks).map(|(text, rank)| RatedOutput { text, rank, raw_score: None }).collect();
            PreferenceRecord::new(task, Source::Synthetic, prompt, outputs, false).unwrap()
        })
}

fn mode() -> impl Strategy<Value = TrainingMode> {
    prop::sample::select(TrainingMode::ALL.to_vec())
}

fn spec() -> impl Strategy<Value = ChainSpec> {
    (1usize..=2, any::<bool>(), any::<bool>()).prop_map(|(chain_length, nl, last)| ChainSpec {
        chain_length,
        use_natural_language: nl,
        loss_policy: if last { LossPolicy::LastOutputOnly } else { LossPolicy::AllOutputs },
        ..ChainSpec::default()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn masks_tile_and_never_leak(r in record(), m in mode(), s in spec(), pick in any::<prop::sample::Index>()) {
        let registry = TemplateRegistry::default();
        let eligible = registry.eligible(r.task, s.use_natural_language).unwrap();
        let template = eligible[pick.index(eligible.len())];
        for ex in build_examples(&r, m, &s, template).unwrap() {
            let regions = loss_mask_chars(&ex);
            prop_assert_eq!(regions.first().map(|r| r.start), Some(0));
            prop_assert_eq!(regions.last().map(|r| r.end), Some(ex.text.len()));
            for w in regions.windows(2) {
                prop_assert_eq!(w[0].end, w[1].start);
            }
            for (span, region) in ex.spans.iter().zip(&regions) {
                prop_assert_eq!((span.start, span.end), (region.start, region.end));
                if !span.role.is_output() {
                    prop_assert_eq!(region.weight, 0.0);
                }
                if region.weight < 0.0 {
                    prop_assert_eq!(span.role, Role::OutputNeg);
                    prop_assert_eq!(m, TrainingMode::SftUnlikelihood);
                }
            }
            for &(a, b) in &ex.unlikelihood_spans {
                prop_assert!(ex.spans_with(Role::OutputNeg).any(|s| (s.start, s.end) == (a, b)));
            }
        }
    }

    #[test]
    fn token_weight_mass_matches_char_mass(r in record(), m in mode(), s in spec()) {
        let registry = TemplateRegistry::default();
        let template = registry.eligible(r.task, s.use_natural_language).unwrap()[0];
        for ex in build_examples(&r, m, &s, template).unwrap() {
            let regions = loss_mask_chars(&ex);
            let seq = tokenize_example(&ex, &Vocab::default());
            prop_assert_eq!(seq.ids[0], BOS);
            prop_assert_eq!(*seq.ids.last().unwrap(), EOS);
            let final_weight = regions.last().unwrap().weight;
            for w in [1.0f32, -1.0] {
                let bytes: usize = regions.iter().filter(|r| r.weight == w).map(|r| r.end - r.start).sum();
                let tokens = seq.weights.iter().filter(|&&x| x == w).count();
                prop_assert_eq!(tokens, bytes + usize::from(final_weight == w));
            }
            // Weights are constant within each character.
            for (i, _) in ex.text.char_indices() {
                let len = ex.text[i..].chars().next().unwrap().len_utf8();
                let first = seq.weights[1 + i];
                prop_assert!(seq.weights[1 + i..1 + i + len].iter().all(|&w| w == first));
            }
        }
    }

    #[test]
    fn conditional_sft_is_the_unchained_coh(r in record()) {
        let registry = TemplateRegistry::default();
        let template = registry.eligible(r.task, false).unwrap()[0];
        let spec = ChainSpec { chain_length: 1, ..ChainSpec::default() };
        prop_assert_eq!(
            build_baseline(&r, TrainingMode::ConditionalSft).unwrap(),
            build_coh(&r, &spec, template).unwrap()
        );
    }

    #[test]
    fn fcm_only_touches_the_input_mask(r in record(), ratio in 0.0f64..=1.0, seed in any::<u64>()) {
        let registry = TemplateRegistry::default();
        let template = registry.eligible(r.task, false).unwrap()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for ex in build_coh(&r, &ChainSpec::default(), template).unwrap() {
            let seq = tokenize_example(&ex, &Vocab::default());
            let masked = apply_fcm(seq.clone(), &FcmConfig::fixed(ratio), &mut rng);
            prop_assert_eq!(&masked.ids, &seq.ids);
            prop_assert_eq!(&masked.weights, &seq.weights);
            prop_assert!(!masked.fcm[0] && !*masked.fcm.last().unwrap());
        }
    }

    #[test]
    fn truncation_never_drops_trained_tokens(r in record(), max_len in 4usize..80) {
        let registry = TemplateRegistry::default();
        let template = registry.eligible(r.task, false).unwrap()[0];
        let seqs: Vec<_> = build_coh(&r, &ChainSpec::default(), template)
            .unwrap()
            .iter()
            .map(|ex| tokenize_example(ex, &Vocab::default()))
            .collect();
        let sources = vec![RowSource::Feedback; seqs.len()];
        let out = match collate(&seqs, &sources, max_len, true) {
            Ok(out) => out,
            Err(BatchError::EmptyBatch) => {
                for s in &seqs {
                    prop_assert!(truncate_prompt_side(s, max_len).is_none());
                }
                return Ok(());
            }
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        let kept: Vec<usize> = (0..seqs.len()).filter(|i| !out.skipped.contains(i)).collect();
        prop_assert_eq!(kept.len(), out.batch.rows);
        for (row, &i) in kept.iter().enumerate() {
            let got = out.batch.row(row);
            prop_assert!(got.tokens.len() <= max_len);
            prop_assert_eq!(got.tokens[0], BOS);
            let trained = |w: &[f32]| w.iter().filter(|&&x| x != 0.0).count();
            prop_assert_eq!(trained(got.weights), trained(&seqs[i].weights));
            // The kept suffix is unchanged.
            let n = got.tokens.len();
            prop_assert_eq!(&got.tokens[1..], &seqs[i].ids[seqs[i].len() - (n - 1)..]);
        }
    }
}
