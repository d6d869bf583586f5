//! Randomized invariants over the numeric kernels.

use proptest::prelude::*;

use cape::embedding::{cosine, trigram_embed, TRIGRAM_DIM};
use cape::grounding::{score_geometric, score_weighted};
use cape::metrics::{fleiss_kappa, lcs_length, AnnotationMatrix};

proptest! {
    #[test]
    fn geometric_score_stays_in_unit_interval(
        c in -1.0f64..=1.0,
        p in -50.0f64..=0.0,
    ) {
        let s = score_geometric(c, p).unwrap();
        prop_assert!((0.0..=1.0).contains(&s), "{s}");
    }

    #[test]
    fn geometric_score_is_monotone_in_similarity(
        c1 in -1.0f64..=1.0,
        c2 in -1.0f64..=1.0,
        p in -20.0f64..=0.0,
    ) {
        let (lo, hi) = if c1 <= c2 { (c1, c2) } else { (c2, c1) };
        prop_assert!(score_geometric(lo, p).unwrap() <= score_geometric(hi, p).unwrap());
    }

    #[test]
    fn weighted_score_is_linear_in_logprob(
        c in -1.0f64..=1.0,
        p in -20.0f64..=0.0,
        beta in 0.0f64..=5.0,
    ) {
        let base = score_weighted(c, 0.0, beta);
        prop_assert!((score_weighted(c, p, beta) - (base + beta * p)).abs() < 1e-9);
    }

    #[test]
    fn lcs_is_symmetric_and_bounded(
        a in proptest::collection::vec(0u8..4, 0..20),
        b in proptest::collection::vec(0u8..4, 0..20),
    ) {
        let forward = lcs_length(&a, &b);
        prop_assert_eq!(forward, lcs_length(&b, &a));
        prop_assert!(forward <= a.len().min(b.len()));
        prop_assert_eq!(lcs_length(&a, &a), a.len());
    }

    #[test]
    fn trigram_cosine_is_a_valid_similarity(
        a in "[a-z][a-z ]{0,29}",
        b in "[a-z][a-z ]{0,29}",
    ) {
        let va = trigram_embed::<f64>(&a, TRIGRAM_DIM).unwrap();
        let vb = trigram_embed::<f64>(&b, TRIGRAM_DIM).unwrap();
        let sim = cosine(&va, &vb).unwrap();
        prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&sim), "{sim}");
        prop_assert!((cosine(&va, &va).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn fleiss_kappa_never_exceeds_one(
        ratings in proptest::collection::vec(
            proptest::collection::vec(0u8..2, 3),
            2..30,
        ),
    ) {
        let matrix = AnnotationMatrix {
            items: ratings
                .into_iter()
                .enumerate()
                .map(|(i, r)| (format!("plan{i}"), r))
                .collect(),
        };
        let k: f64 = fleiss_kappa(&matrix).unwrap();
        prop_assert!(k <= 1.0 + 1e-12, "{k}");
    }
}
