//! Property tests for the tokenizer: round-trip identity and encoding
//! determinism over arbitrary byte strings.

use lmkit::tokenizer::TokenVocabulary;
use proptest::prelude::*;

fn trained_vocab() -> TokenVocabulary {
    // Mixed-structure training text so the vocabulary has multi-byte tokens
    // that real inputs will actually hit.
    let mut corpus = Vec::new();
    for i in 0..400u32 {
        corpus.extend_from_slice(b"the quick brown fox ");
        corpus.extend_from_slice(format!("{i} ").as_bytes());
        if i % 3 == 0 {
            corpus.extend_from_slice(b"jumps over the lazy dog. ");
        }
        if i % 7 == 0 {
            corpus.push((i % 256) as u8);
        }
    }
    TokenVocabulary::train(&corpus, 400).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn round_trip_identity(s in proptest::collection::vec(any::<u8>(), 0..200)) {
        let vocab = trained_vocab();
        let ids = vocab.encode(&s);
        prop_assert_eq!(vocab.decode(&ids).unwrap(), s);
    }

    #[test]
    fn encoding_is_deterministic(s in proptest::collection::vec(any::<u8>(), 0..200)) {
        let vocab = trained_vocab();
        prop_assert_eq!(vocab.encode(&s), vocab.encode(&s));
    }

    #[test]
    fn every_emitted_id_is_in_range(s in proptest::collection::vec(any::<u8>(), 0..200)) {
        let vocab = trained_vocab();
        for id in vocab.encode(&s) {
            prop_assert!((id as usize) < vocab.size());
        }
    }
}
