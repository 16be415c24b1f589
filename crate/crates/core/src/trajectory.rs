//! The respond-then-think trajectory: slot tokens emitted by the policy, and
//! the canonical text form with its strict parser.
//!
//! Text layout (six lines, nothing else):
//!
//! ```text
//! 2-Mismatch
//! 1. Query: <free text>
//! 2. Item: <free text>
//! 3. Category Match: <free text> The conclusion is Excellent.
//! 4. Attribution Match: <free text> The conclusion is Mismatch.
//! 5. Judgement: <free text> Relevance label is 2-Mismatch.
//! ```
//!
//! Free text is allowed only inside a step line, before that step's closing
//! clause. Tier words are case-sensitive.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rules::Tier;

/// Slot alphabet sizes in emission order: initial label, category, attribute,
/// derived label, format token.
pub const SLOT_SIZES: [usize; 5] = [4, 4, 4, 4, 2];
pub const SLOT_COUNT: usize = SLOT_SIZES.len();
pub const FORMAT_SLOT: usize = 4;
pub const FORMAT_OK: u8 = 0;
pub const FORMAT_CORRUPT: u8 = 1;

/// The four tier-valued slots of a well-formed trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TierSlots {
    pub initial: Tier,
    pub category: Tier,
    pub attribute: Tier,
    pub derived: Tier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    tokens: [u8; SLOT_COUNT],
    /// Natural-log probability of each token under the generating policy, or
    /// empty for trajectories that did not come from a policy (parsed text).
    pub token_logps: Vec<f64>,
    pub guided: bool,
}

impl Trajectory {
    pub fn well_formed(tiers: TierSlots) -> Self {
        Trajectory {
            tokens: [
                tiers.initial.index() as u8,
                tiers.category.index() as u8,
                tiers.attribute.index() as u8,
                tiers.derived.index() as u8,
                FORMAT_OK,
            ],
            token_logps: Vec::new(),
            guided: false,
        }
    }

    pub fn from_tokens(tokens: &[usize], token_logps: Vec<f64>, guided: bool) -> Result<Self> {
        if tokens.len() != SLOT_COUNT {
            return Err(Error::BadTokenCount {
                expected: SLOT_COUNT,
                got: tokens.len(),
            });
        }
        if !token_logps.is_empty() && token_logps.len() != SLOT_COUNT {
            return Err(Error::BadTokenCount {
                expected: SLOT_COUNT,
                got: token_logps.len(),
            });
        }
        let mut out = [0u8; SLOT_COUNT];
        for (slot, (&tok, &size)) in tokens.iter().zip(&SLOT_SIZES).enumerate() {
            if tok >= size {
                return Err(Error::TokenOutOfRange {
                    slot,
                    token: tok,
                    size,
                });
            }
            out[slot] = tok as u8;
        }
        Ok(Trajectory {
            tokens: out,
            token_logps,
            guided,
        })
    }

    pub fn tokens(&self) -> [usize; SLOT_COUNT] {
        self.tokens.map(usize::from)
    }

    pub fn format_valid(&self) -> bool {
        self.tokens[FORMAT_SLOT] == FORMAT_OK
    }

    /// Tier fields, present only for well-formed trajectories.
    pub fn tiers(&self) -> Option<TierSlots> {
        if !self.format_valid() {
            return None;
        }
        let t = |i: usize| Tier::from_index(self.tokens[i] as usize).expect("validated token");
        Some(TierSlots {
            initial: t(0),
            category: t(1),
            attribute: t(2),
            derived: t(3),
        })
    }

    pub fn initial_label(&self) -> Option<Tier> {
        self.tiers().map(|t| t.initial)
    }

    pub fn log_prob(&self) -> f64 {
        self.token_logps.iter().sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FormatErrorReason {
    MissingLabelHeader,
    BadStepOrder,
    UnknownTierWord,
    Truncated,
    CorruptedToken,
}

/// First grammar violation found by [`parse`]. `position` indexes the text
/// elements: 0 is the label header, 1..=5 the numbered steps, 6 the end of
/// input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatError {
    pub position: usize,
    pub reason: FormatErrorReason,
}

impl fmt::Display for FormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} at element {}", self.reason, self.position)
    }
}

impl std::error::Error for FormatError {}

/// Number of text elements: header plus five steps.
pub const TEXT_ELEMENTS: usize = 6;

const STEP_HEADERS: [&str; 5] = [
    "1. Query:",
    "2. Item:",
    "3. Category Match:",
    "4. Attribution Match:",
    "5. Judgement:",
];
const CONCLUSION: &str = "The conclusion is ";
const JUDGEMENT: &str = "Relevance label is ";

pub fn serialize(traj: &Trajectory) -> Result<String> {
    let t = traj.tiers().ok_or(Error::InvalidTrajectory)?;
    Ok(format!(
        "{}\n\
         1. Query: The user is looking for the product named in the query.\n\
         2. Item: The item is described by its title and attributes.\n\
         3. Category Match: Comparing the query category with the item category. {CONCLUSION}{}.\n\
         4. Attribution Match: Comparing the requested attributes with the item attributes. {CONCLUSION}{}.\n\
         5. Judgement: Applying the derivation rules to both conclusions. {JUDGEMENT}{}.\n",
        t.initial.label(),
        t.category,
        t.attribute,
        t.derived.label(),
    ))
}

fn err(position: usize, reason: FormatErrorReason) -> FormatError {
    FormatError { position, reason }
}

/// Parses `"<ordinal>-<Name>"`.
fn parse_label(s: &str, position: usize) -> std::result::Result<Tier, FormatError> {
    let (ord, name) = s
        .split_once('-')
        .ok_or(err(position, FormatErrorReason::MissingLabelHeader))?;
    let ord = match ord.as_bytes() {
        [d @ b'0'..=b'9'] => d - b'0',
        _ => return Err(err(position, FormatErrorReason::MissingLabelHeader)),
    };
    let tier = Tier::from_name(name).ok_or(err(position, FormatErrorReason::UnknownTierWord))?;
    if tier.ordinal() != ord {
        return Err(err(position, FormatErrorReason::CorruptedToken));
    }
    Ok(tier)
}

/// Reads the tier word of a closing clause `"<clause><Word>."` at the end of
/// `body`.
fn closing_tier<'a>(body: &'a str, clause: &str, position: usize) -> std::result::Result<&'a str, FormatError> {
    let idx = body
        .rfind(clause)
        .ok_or(err(position, FormatErrorReason::Truncated))?;
    let tail = &body[idx + clause.len()..];
    tail.strip_suffix('.')
        .ok_or(err(position, FormatErrorReason::Truncated))
}

pub fn parse(text: &str) -> std::result::Result<Trajectory, FormatError> {
    let text = text.strip_suffix('\n').unwrap_or(text);
    let lines: Vec<&str> = if text.is_empty() {
        Vec::new()
    } else {
        text.split('\n').collect()
    };

    let mut tiers = [Tier::Irrelevant; 4];
    for position in 0..TEXT_ELEMENTS {
        let line = lines.get(position).ok_or(if position == 0 {
            err(0, FormatErrorReason::MissingLabelHeader)
        } else {
            err(position, FormatErrorReason::Truncated)
        })?;
        if line.chars().any(|c| c.is_control() && c != '\t') {
            return Err(err(position, FormatErrorReason::CorruptedToken));
        }
        if position == 0 {
            tiers[0] = parse_label(line, 0)?;
            continue;
        }
        let body = line
            .strip_prefix(STEP_HEADERS[position - 1])
            .ok_or(err(position, FormatErrorReason::BadStepOrder))?;
        match position {
            3 | 4 => {
                let word = closing_tier(body, CONCLUSION, position)?;
                tiers[position - 2] =
                    Tier::from_name(word).ok_or(err(position, FormatErrorReason::UnknownTierWord))?;
            }
            5 => {
                let label = closing_tier(body, JUDGEMENT, position)?;
                tiers[3] = parse_label(label, position).map_err(|e| match e.reason {
                    FormatErrorReason::MissingLabelHeader => err(position, FormatErrorReason::CorruptedToken),
                    _ => e,
                })?;
            }
            _ => {}
        }
    }
    if lines.len() > TEXT_ELEMENTS {
        return Err(err(TEXT_ELEMENTS, FormatErrorReason::CorruptedToken));
    }
    let [initial, category, attribute, derived] = tiers;

    Ok(Trajectory::well_formed(TierSlots {
        initial,
        category,
        attribute,
        derived,
    }))
}

/// Byte-level entry point; invalid UTF-8 is a corrupted token on the line
/// where it occurs.
pub fn parse_bytes(bytes: &[u8]) -> std::result::Result<Trajectory, FormatError> {
    match std::str::from_utf8(bytes) {
        Ok(s) => parse(s),
        Err(e) => {
            let line = bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count();
            // an earlier structural error still wins
            match parse(&String::from_utf8_lossy(bytes)) {
                Err(pe) if pe.position < line => Err(pe),
                _ => Err(err(line.min(TEXT_ELEMENTS), FormatErrorReason::CorruptedToken)),
            }
        }
    }
}
