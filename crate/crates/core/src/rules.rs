//! Relevance tiers and the derivation rules that combine a category tier and
//! an attribute tier into a final relevance tier.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::Trajectory;

/// Four-level ordinal relevance scale. The derived `Ord` follows the ordinal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Tier {
    Irrelevant = 1,
    Mismatch = 2,
    Related = 3,
    Excellent = 4,
}

impl Tier {
    pub const ALL: [Tier; 4] = [Tier::Irrelevant, Tier::Mismatch, Tier::Related, Tier::Excellent];

    pub fn ordinal(self) -> u8 {
        self as u8
    }

    pub fn from_ordinal(ordinal: u8) -> Option<Tier> {
        match ordinal {
            1 => Some(Tier::Irrelevant),
            2 => Some(Tier::Mismatch),
            3 => Some(Tier::Related),
            4 => Some(Tier::Excellent),
            _ => None,
        }
    }

    /// Zero-based index, used as the slot token id.
    pub fn index(self) -> usize {
        self as usize - 1
    }

    pub fn from_index(index: usize) -> Option<Tier> {
        Tier::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Tier::Irrelevant => "Irrelevant",
            Tier::Mismatch => "Mismatch",
            Tier::Related => "Related",
            Tier::Excellent => "Excellent",
        }
    }

    /// Case-sensitive match against the canonical names.
    pub fn from_name(name: &str) -> Option<Tier> {
        Tier::ALL.into_iter().find(|t| t.name() == name)
    }

    /// `"<ordinal>-<Name>"`, e.g. `2-Mismatch`.
    pub fn label(self) -> String {
        format!("{}-{}", self.ordinal(), self.name())
    }

    /// Tiers 3 and 4 collapse into the "good" class.
    pub fn is_good(self) -> bool {
        self >= Tier::Related
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Tier {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if let Some(t) = Tier::from_name(s) {
            return Ok(t);
        }
        s.parse::<u8>()
            .ok()
            .and_then(Tier::from_ordinal)
            .ok_or_else(|| format!("unknown tier `{s}`"))
    }
}

/// Explicit (category, attribute) -> relevance lookup, 16 entries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DerivationTable {
    // indexed [category.index()][attribute.index()]
    entries: [[Tier; 4]; 4],
}

impl Default for DerivationTable {
    fn default() -> Self {
        use Tier::*;
        // rows: category Irrelevant..Excellent; columns: attribute Irrelevant..Excellent
        DerivationTable {
            entries: [
                [Irrelevant, Irrelevant, Irrelevant, Irrelevant],
                [Irrelevant, Mismatch, Mismatch, Mismatch],
                [Irrelevant, Mismatch, Related, Related],
                [Irrelevant, Mismatch, Related, Excellent],
            ],
        }
    }
}

impl DerivationTable {
    pub fn derive(&self, category: Tier, attribute: Tier) -> Tier {
        self.entries[category.index()][attribute.index()]
    }

    pub fn entries(&self) -> impl Iterator<Item = (Tier, Tier, Tier)> + '_ {
        Tier::ALL.into_iter().flat_map(move |c| {
            Tier::ALL
                .into_iter()
                .map(move |a| (c, a, self.derive(c, a)))
        })
    }

    /// Parses 16 lines of `category,attribute,relevance`. Tiers may be given
    /// by name or ordinal. Blank lines and `#` comments are skipped. Every
    /// pair must appear exactly once.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = [[None::<Tier>; 4]; 4];
        let mut seen = 0usize;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let parts: Vec<&str> = body.split(',').map(str::trim).collect();
            if parts.len() != 3 {
                return Err(Error::TableParse {
                    line,
                    reason: format!("expected 3 comma-separated fields, got {}", parts.len()),
                });
            }
            let mut tiers = [Tier::Irrelevant; 3];
            for (slot, p) in tiers.iter_mut().zip(&parts) {
                *slot = p
                    .parse()
                    .map_err(|reason| Error::TableParse { line, reason })?;
            }
            let cell = &mut entries[tiers[0].index()][tiers[1].index()];
            if cell.is_some() {
                return Err(Error::TableParse {
                    line,
                    reason: format!("duplicate entry for ({}, {})", tiers[0], tiers[1]),
                });
            }
            *cell = Some(tiers[2]);
            seen += 1;
        }
        if seen != 16 {
            return Err(Error::TableParse {
                line: text.lines().count(),
                reason: format!("expected 16 entries, got {seen}"),
            });
        }
        let mut out = DerivationTable::default();
        for c in 0..4 {
            for a in 0..4 {
                out.entries[c][a] = entries[c][a].expect("all 16 cells counted");
            }
        }
        Ok(out)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .map(|(c, a, r)| format!("{c},{a},{r}\n"))
            .collect()
    }

    pub fn check_rule_adherence(&self, traj: &Trajectory) -> Result<bool> {
        let t = traj.tiers().ok_or(Error::InvalidTrajectory)?;
        Ok(t.derived == self.derive(t.category, t.attribute))
    }
}

/// Lookup in the built-in table.
pub fn derive_relevance(category: Tier, attribute: Tier) -> Tier {
    static TABLE: std::sync::OnceLock<DerivationTable> = std::sync::OnceLock::new();
    TABLE.get_or_init(DerivationTable::default).derive(category, attribute)
}

/// Does the derived label follow the built-in table given the trajectory's own
/// category and attribute conclusions?
pub fn check_rule_adherence(traj: &Trajectory) -> Result<bool> {
    let t = traj.tiers().ok_or(Error::InvalidTrajectory)?;
    Ok(t.derived == derive_relevance(t.category, t.attribute))
}

/// Does the derived label agree with the up-front answer?
pub fn check_self_consistency(traj: &Trajectory) -> Result<bool> {
    let t = traj.tiers().ok_or(Error::InvalidTrajectory)?;
    Ok(t.initial == t.derived)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::TierSlots;
    use Tier::*;

    fn traj(initial: Tier, category: Tier, attribute: Tier, derived: Tier) -> Trajectory {
        Trajectory::well_formed(TierSlots {
            initial,
            category,
            attribute,
            derived,
        })
    }

    #[test]
    fn tier_mapping_is_lossless() {
        for t in Tier::ALL {
            assert_eq!(Tier::from_ordinal(t.ordinal()), Some(t));
            assert_eq!(Tier::from_name(t.name()), Some(t));
            assert_eq!(Tier::from_index(t.index()), Some(t));
        }
        assert!(Irrelevant < Mismatch && Mismatch < Related && Related < Excellent);
        assert_eq!(Tier::from_ordinal(0), None);
        assert_eq!(Tier::from_ordinal(5), None);
        assert_eq!(Tier::from_name("excellent"), None);
    }

    #[test]
    fn table_rows() {
        assert_eq!(derive_relevance(Related, Excellent), Related);
        assert_eq!(derive_relevance(Irrelevant, Excellent), Irrelevant);
        assert_eq!(derive_relevance(Excellent, Excellent), Excellent);
        assert_eq!(derive_relevance(Related, Irrelevant), Irrelevant);
        assert_eq!(derive_relevance(Mismatch, Related), Mismatch);
    }

    #[test]
    fn table_is_min_and_symmetric() {
        for c in Tier::ALL {
            for a in Tier::ALL {
                assert_eq!(derive_relevance(c, a), c.min(a));
                assert_eq!(derive_relevance(c, a), derive_relevance(a, c));
            }
        }
    }

    #[test]
    fn adherence_examples() {
        assert!(check_rule_adherence(&traj(Excellent, Related, Irrelevant, Irrelevant)).unwrap());
        assert!(!check_rule_adherence(&traj(Excellent, Excellent, Excellent, Mismatch)).unwrap());
        assert!(check_rule_adherence(&traj(Excellent, Mismatch, Related, Mismatch)).unwrap());
    }

    #[test]
    fn consistency_examples() {
        assert!(check_self_consistency(&traj(Mismatch, Excellent, Mismatch, Mismatch)).unwrap());
        assert!(!check_self_consistency(&traj(Excellent, Excellent, Mismatch, Mismatch)).unwrap());
        assert!(!check_self_consistency(&traj(Related, Excellent, Excellent, Excellent)).unwrap());
    }

    #[test]
    fn checks_reject_malformed() {
        let bad = Trajectory::from_tokens(&[0, 0, 0, 0, 1], Vec::new(), false).unwrap();
        assert!(matches!(check_rule_adherence(&bad), Err(Error::InvalidTrajectory)));
        assert!(matches!(check_self_consistency(&bad), Err(Error::InvalidTrajectory)));
    }

    #[test]
    fn adherence_ignores_initial_and_consistency_ignores_evidence() {
        for c in Tier::ALL {
            for a in Tier::ALL {
                for d in Tier::ALL {
                    let base = check_rule_adherence(&traj(Irrelevant, c, a, d)).unwrap();
                    let cons = check_self_consistency(&traj(c, Irrelevant, Irrelevant, d)).unwrap();
                    for i in Tier::ALL {
                        assert_eq!(check_rule_adherence(&traj(i, c, a, d)).unwrap(), base);
                        assert_eq!(check_self_consistency(&traj(c, i, a, d)).unwrap(), cons);
                    }
                }
            }
        }
    }

    #[test]
    fn table_text_round_trip() {
        let table = DerivationTable::default();
        assert_eq!(DerivationTable::parse(&table.to_text()).unwrap(), table);
    }

    #[test]
    fn table_parse_errors() {
        let mut text = DerivationTable::default().to_text();
        let err = DerivationTable::parse(&text.replace("Excellent,Excellent,Excellent", "Excellent,Excellent,Great"))
            .unwrap_err();
        assert!(matches!(err, Error::TableParse { line: 16, .. }), "{err}");
        text.push_str("Excellent,Excellent,Related\n");
        assert!(matches!(
            DerivationTable::parse(&text).unwrap_err(),
            Error::TableParse { line: 17, .. }
        ));
        assert!(DerivationTable::parse("1,1,1\n").is_err());
    }

    #[test]
    fn variant_table_changes_adherence() {
        // a business-rule variant where Related attributes cap relevance at Mismatch
        let text = DerivationTable::default()
            .to_text()
            .replace("Excellent,Related,Related", "Excellent,Related,Mismatch");
        let table = DerivationTable::parse(&text).unwrap();
        assert_eq!(table.derive(Excellent, Related), Mismatch);
        let t = traj(Mismatch, Excellent, Related, Mismatch);
        assert!(table.check_rule_adherence(&t).unwrap());
        assert!(!check_rule_adherence(&t).unwrap());
    }
}
