use std::path::PathBuf;

use agrl_core::reward::{score, GoldLabels, RewardConfig};
use agrl_core::rules::{check_rule_adherence, Tier};
use agrl_core::trajectory::{parse, parse_bytes, serialize, FormatError, FormatErrorReason, TierSlots};
use Tier::*;

fn fixture(name: &str) -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(format!("{name}.traj.txt"));
    std::fs::read_to_string(path).unwrap()
}

fn slots(initial: Tier, category: Tier, attribute: Tier, derived: Tier) -> TierSlots {
    TierSlots { initial, category, attribute, derived }
}

#[test]
fn well_formed_fixtures_parse_to_their_tiers() {
    let cases = [
        ("cashmere_scarf", slots(Mismatch, Excellent, Mismatch, Mismatch), true),
        ("chiffon_blouse", slots(Related, Related, Excellent, Related), true),
        ("chiffon_rule_break", slots(Excellent, Related, Excellent, Excellent), false),
    ];
    for (name, want, adheres) in cases {
        let text = fixture(name);
        let t = parse(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(t.tiers(), Some(want), "{name}");
        assert_eq!(check_rule_adherence(&t).unwrap(), adheres, "{name}");
        assert_eq!(parse_bytes(text.as_bytes()).unwrap(), t);
        // canonical rendering keeps the conclusions
        assert_eq!(parse(&serialize(&t).unwrap()).unwrap(), t);
    }
}

#[test]
fn malformed_fixtures_report_the_first_violation() {
    let cases = [
        ("cashmere_truncated", 4, FormatErrorReason::Truncated),
        ("chiffon_bad_header", 0, FormatErrorReason::CorruptedToken),
        ("cashmere_swapped_steps", 2, FormatErrorReason::BadStepOrder),
        ("chiffon_lowercase", 3, FormatErrorReason::UnknownTierWord),
    ];
    for (name, position, reason) in cases {
        assert_eq!(parse(&fixture(name)), Err(FormatError { position, reason }), "{name}");
    }
}

#[test]
fn fixture_rewards() {
    let cfg = RewardConfig::default();
    let scarf = GoldLabels { category: Excellent, attribute: Mismatch, relevance: Mismatch };
    let r = score(&parse(&fixture("cashmere_scarf")).unwrap(), &scarf, &cfg).unwrap();
    assert_eq!(r.total, 1.0);

    let blouse = GoldLabels { category: Related, attribute: Excellent, relevance: Related };
    let r = score(&parse(&fixture("chiffon_blouse")).unwrap(), &blouse, &cfg).unwrap();
    assert_eq!(r.total, 1.0);

    // right conclusions, wrong final label: the gate closes
    let r = score(&parse(&fixture("chiffon_rule_break")).unwrap(), &blouse, &cfg).unwrap();
    assert_eq!((r.r_cate, r.r_attr, r.r_adherence, r.gate, r.total), (1.0, 1.0, 0.0, 0.0, 0.0));

    let soft = RewardConfig { gating_lambda: 0.5, ..cfg };
    let r = score(&parse(&fixture("chiffon_rule_break")).unwrap(), &blouse, &soft).unwrap();
    assert!((r.total - 0.5 * (0.4 + 0.4 + 0.2 * 0.5)).abs() < 1e-12);
}
