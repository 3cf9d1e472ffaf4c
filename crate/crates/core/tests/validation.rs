mod common;

use proptest::prelude::*;

use citykit::data_models::{validate_entity, RuleKind, SchemaRegistry};
use citykit::feedgen::{generate_corpus, DefectPlan};

fn plan() -> impl Strategy<Value = DefectPlan> {
    (0usize..12, 0usize..12, 0usize..12, 0usize..12, 0usize..12, 0usize..12).prop_map(|(a, b, c, d, e, f)| DefectPlan {
        missing_required: a,
        wrong_type: b,
        out_of_range: c,
        not_in_enum: d,
        pattern_mismatch: e,
        unknown_entity_type: f,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn seeded_counts_match_any_plan(seed in any::<u64>(), defects in plan(), size in 50usize..250) {
        let mut fx = common::default_fixture();
        fx.seed = seed;
        fx.corpus_size = size;
        fx.defects = defects.clone();
        let total = common::corpus_matches_plan(&fx).map_err(TestCaseError::fail)?;
        prop_assert_eq!(total as usize, defects.total());
    }

    #[test]
    fn clean_corpus_has_no_violations(seed in any::<u64>()) {
        let mut fx = common::default_fixture();
        fx.seed = seed;
        fx.defects = DefectPlan::default();
        let (counts, reports) = common::per_kind_counts(generate_corpus(&fx).0);
        prop_assert!(counts.is_empty());
        prop_assert!(reports.iter().all(|r| r.is_valid()));
    }
}

#[test]
fn default_plan_counts() {
    let fx = common::default_fixture();
    let (corpus, truth) = generate_corpus(&fx);
    assert_eq!(corpus.len(), 200);
    assert_eq!(truth.len(), fx.defects.total());
    let (counts, _) = common::per_kind_counts(corpus);
    for kind in RuleKind::ALL {
        assert_eq!(counts.get(&kind).copied().unwrap_or(0), fx.defects.count(kind) as u64, "{kind}");
    }
}

#[test]
fn removing_a_rule_silences_its_violations() {
    let fx = common::default_fixture();
    let (corpus, truth) = generate_corpus(&fx);
    let reg = SchemaRegistry::bundled();
    let d = truth.iter().find(|d| d.rule_kind == RuleKind::NotInEnum).unwrap();
    let ty = &corpus[d.index].entity_type;
    reg.insert(reg.snapshot()[ty].without_rule(&d.attribute));
    let snap = reg.snapshot();
    assert!(validate_entity(&corpus[d.index], &snap).violations.iter().all(|v| v.attribute_name != d.attribute));
}
