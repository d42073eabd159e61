//! Question/answer template banks and the small closed vocabulary of tags
//! they draw on. Placeholders `<sks>`, `<sks1>`, `<sks2>` are bound to
//! concept names at emission time; [`crate::vocab`] guarantees every word
//! here has a token id.

/// Single-entity existence questions, row-paired with both answer banks.
pub const EXIST_Q: [&str; 25] = [
    "Is there any trace of <sks> in this footage?",
    "Can you detect <sks> in this video clip?",
    "Does <sks> show up anywhere in this recording?",
    "Is <sks> visible in this video?",
    "Could you verify if <sks> is here?",
    "Does this footage include <sks>?",
    "Can you spot <sks> in this clip?",
    "Is <sks> present in this video?",
    "Does <sks> appear in this footage?",
    "Can you tell if <sks> is shown here?",
    "Is <sks> in this video segment?",
    "Can you confirm <sks>'s presence?",
    "Does this clip contain <sks>?",
    "Is <sks> featured in this recording?",
    "Can you find <sks> in this video?",
    "Is <sks> shown in any frame?",
    "Does this video show <sks>?",
    "Is <sks> visible anywhere?",
    "Can you see <sks>?",
    "Is <sks> in this video?",
    "Can you recognize <sks>?",
    "Does <sks> appear at all?",
    "Is <sks> recorded here?",
    "Can you identify <sks>?",
    "Is <sks> present?",
];

pub const EXIST_YES: [&str; 25] = [
    "Yes, <sks> is in this video.",
    "I can confirm that <sks> appears.",
    "<sks> is present in this recording.",
    "The video contains <sks>.",
    "I've identified <sks>.",
    "<sks> is shown in this video.",
    "Yes, <sks> appears here.",
    "I can verify that <sks> is present.",
    "The footage shows <sks>.",
    "<sks> is in this video clip.",
    "I've detected <sks>.",
    "Yes, <sks> is featured.",
    "The video includes <sks>.",
    "I can see <sks>.",
    "<sks> is definitely here.",
    "Yes, I've found <sks>.",
    "This video shows <sks>.",
    "<sks> is visible.",
    "Yes, <sks> has been captured.",
    "The video clearly shows <sks>.",
    "I've spotted <sks>.",
    "<sks> appears in this video.",
    "Yes, this footage contains <sks>.",
    "I can recognize <sks>.",
    "<sks> is clearly visible.",
];

pub const EXIST_NO: [&str; 25] = [
    "No, <sks> is not in this video.",
    "I cannot detect <sks>.",
    "This video does not contain <sks>.",
    "<sks> is not shown.",
    "There is no sign of <sks>.",
    "<sks> does not appear.",
    "I can confirm <sks> is not here.",
    "The footage does not include <sks>.",
    "There's no evidence of <sks>.",
    "<sks> is not in this video.",
    "I've checked, <sks> is not present.",
    "This video does not show <sks>.",
    "I see no sign of <sks>.",
    "<sks> is absent.",
    "The video does not show <sks>.",
    "I cannot find <sks>.",
    "<sks> is not visible.",
    "I can verify <sks> is not here.",
    "The video has no <sks>.",
    "<sks> does not exist in this video.",
    "I find no trace of <sks>.",
    "This clip does not contain <sks>.",
    "<sks> is not present.",
    "I cannot identify <sks>.",
    "There is no <sks> here.",
];

/// Two-entity existence questions, row-paired with [`EXIST2_BOTH_YES`]; the
/// first 15 rows also pair with the mixed and both-no banks.
pub const EXIST2_Q: [&str; 25] = [
    "Is there any trace of <sks1> or <sks2> in this footage?",
    "Can you detect <sks1> or <sks2> in this video clip?",
    "Do <sks1> or <sks2> show up anywhere in this recording?",
    "Are <sks1> or <sks2> visible in this video?",
    "Could you verify if <sks1> or <sks2> are here?",
    "Does this footage include <sks1> or <sks2>?",
    "Can you spot <sks1> or <sks2> in this clip?",
    "Are <sks1> or <sks2> present in this video?",
    "Do <sks1> or <sks2> appear in this footage?",
    "Can you tell if <sks1> or <sks2> are shown here?",
    "Are <sks1> or <sks2> in this video segment?",
    "Can you confirm <sks1> or <sks2>'s presence?",
    "Does this clip contain <sks1> or <sks2>?",
    "Are <sks1> or <sks2> featured in this recording?",
    "Can you find <sks1> or <sks2> in this video?",
    "Are <sks1> or <sks2> shown in any frame?",
    "Does this video show <sks1> or <sks2>?",
    "Are <sks1> or <sks2> visible anywhere?",
    "Can you see <sks1> or <sks2>?",
    "Are <sks1> or <sks2> in this video?",
    "Can you recognize <sks1> or <sks2>?",
    "Do <sks1> or <sks2> appear at all?",
    "Are <sks1> or <sks2> recorded here?",
    "Can you identify <sks1> or <sks2>?",
    "Are <sks1> or <sks2> present?",
];

pub const EXIST2_BOTH_YES: [&str; 25] = [
    "Both <sks1> and <sks2> are present in this video.",
    "I can detect both <sks1> and <sks2> in the footage.",
    "The video shows both <sks1> and <sks2> clearly.",
    "<sks1> and <sks2> are both visible in this recording.",
    "I've identified both <sks1> and <sks2> in the clip.",
    "Both <sks1> and <sks2> appear in this video.",
    "The footage contains both <sks1> and <sks2>.",
    "I can see both <sks1> and <sks2> in frame.",
    "<sks1> and <sks2> are both featured in this video.",
    "The recording shows both <sks1> and <sks2> present.",
    "I've spotted both <sks1> and <sks2> in the footage.",
    "Both <sks1> and <sks2> are captured in this clip.",
    "The video includes both <sks1> and <sks2>.",
    "I can confirm the presence of both <sks1> and <sks2>.",
    "<sks1> and <sks2> are both shown in the recording.",
    "Both figures, <sks1> and <sks2>, are visible.",
    "I've found both <sks1> and <sks2> in the video.",
    "The footage displays both <sks1> and <sks2>.",
    "Both <sks1> and <sks2> are identifiable here.",
    "I can recognize both <sks1> and <sks2>.",
    "<sks1> and <sks2> both appear in this recording.",
    "The video features both <sks1> and <sks2>.",
    "Both <sks1> and <sks2> are clearly visible.",
    "I've detected the presence of both <sks1> and <sks2>.",
    "The clip shows both <sks1> and <sks2>.",
];

/// `<sks1>` present, `<sks2>` absent; row `i` answers `EXIST2_Q[i]`.
pub const EXIST2_MIXED: [&str; 15] = [
    "I can confirm that <sks1> appears, but <sks2> is not present.",
    "The video shows <sks1>, though there's no sign of <sks2>.",
    "<sks1> is visible, but <sks2> is absent.",
    "I've detected <sks1>, while <sks2> does not appear.",
    "The video contains <sks1>, but <sks2> is not shown.",
    "<sks1> is present, however <sks2> is not in this clip.",
    "I can see <sks1>, but there's no trace of <sks2>.",
    "The footage includes <sks1>, though <sks2> is not visible.",
    "<sks1> appears, but <sks2> is not featured.",
    "I've spotted <sks1>, while <sks2> is nowhere to be seen.",
    "<sks1> is clearly visible, but <sks2> is not.",
    "The recording shows <sks1>, though <sks2> is absent.",
    "I can identify <sks1>, but <sks2> doesn't appear.",
    "<sks1> is present, while <sks2> is not.",
    "The clip features <sks1>, but there's no sign of <sks2>.",
];

pub const EXIST2_BOTH_NO: [&str; 15] = [
    "Neither <sks1> nor <sks2> appear in this video.",
    "I cannot detect either <sks1> or <sks2>.",
    "The video contains neither <sks1> nor <sks2>.",
    "Both <sks1> and <sks2> are absent.",
    "There is no sign of either <sks1> or <sks2>.",
    "Neither <sks1> nor <sks2> are shown.",
    "I confirm both <sks1> and <sks2> are not present.",
    "The footage does not include <sks1> or <sks2>.",
    "There's no evidence of either <sks1> or <sks2>.",
    "Neither <sks1> nor <sks2> are visible.",
    "I've checked, both <sks1> and <sks2> are absent.",
    "This video shows neither <sks1> nor <sks2>.",
    "I see no sign of <sks1> or <sks2>.",
    "Both <sks1> and <sks2> are not in the recording.",
    "The video does not contain <sks1> or <sks2>.",
];

/// Descriptive question bank (16 rows, one repeated verbatim). Row category
/// follows content: see [`DESC_CATEGORY`].
pub const DESC_Q: [&str; 16] = [
    "What activity is <sks> engaged in during this video?",
    "Could you describe what <sks> is doing in this footage?",
    "What specific actions can you observe <sks> performing in this recording?",
    "What movements or actions does <sks> perform here?",
    "Can you describe <sks>'s behavior in this sequence?",
    "What is <sks> wearing in this video?",
    "Could you describe <sks>'s outfit in this footage?",
    "What color and style of clothing is <sks> dressed in?",
    "How would you describe <sks>'s appearance and attire?",
    "What notable features can you see in <sks>'s clothing?",
    "Where is <sks> positioned in this video?",
    "What color and style of clothing is <sks> dressed in?",
    "Can you describe <sks>'s location relative to others?",
    "Which part of the scene does <sks> appear in?",
    "How does <sks>'s position change throughout the video?",
    "Where can <sks> be found in this footage?",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DescCategory {
    Action,
    Appearance,
    Location,
}

/// Per-row category of [`DESC_Q`].
pub const DESC_CATEGORY: [DescCategory; 16] = {
    use DescCategory::*;
    [
        Action, Action, Action, Action, Action, Appearance, Appearance, Appearance, Appearance,
        Appearance, Location, Appearance, Location, Location, Location, Location,
    ]
};

/// Rows of [`DESC_Q`] with the given category.
pub fn desc_rows(cat: DescCategory) -> impl Iterator<Item = usize> {
    DESC_CATEGORY
        .iter()
        .enumerate()
        .filter(move |(_, c)| **c == cat)
        .map(|(i, _)| i)
}

// ── answer templates for the descriptive categories ──

pub const ACTION_ANSWER: &str = "<sks> is <action> in this video.";
pub const APPEARANCE_ANSWER: &str = "<sks> is wearing a <color> <garment>.";
pub const LOCATION_ANSWER: &str = "<sks> is at the <scenario>.";

/// Scene tags; every clip carries one.
pub const SCENARIOS: [&str; 12] = [
    "gym",
    "restaurant",
    "school",
    "park",
    "office",
    "hospital",
    "beach",
    "library",
    "kitchen",
    "street",
    "garden",
    "studio",
];

/// Motion tags; every clip carries one.
pub const ACTIONS: [&str; 8] = [
    "nodding",
    "waving",
    "smiling",
    "reading",
    "talking",
    "stretching",
    "pacing",
    "pointing",
];

/// Identity wardrobe attributes.
pub const COLORS: [&str; 8] = [
    "red", "blue", "green", "black", "white", "yellow", "purple", "gray",
];

pub const GARMENTS: [&str; 8] = [
    "jacket", "sweater", "coat", "shirt", "scarf", "hat", "vest", "hoodie",
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn banks_are_row_paired() {
        assert_eq!(EXIST_Q.len(), EXIST_YES.len());
        assert_eq!(EXIST_Q.len(), EXIST_NO.len());
        assert_eq!(EXIST2_Q.len(), EXIST2_BOTH_YES.len());
        assert_eq!(EXIST2_MIXED.len(), EXIST2_BOTH_NO.len());
        assert!(EXIST2_MIXED.len() <= EXIST2_Q.len());
    }

    #[test]
    fn descriptive_bank_keeps_its_duplicate_row() {
        assert_eq!(DESC_Q[7], DESC_Q[11]);
        assert_eq!(DESC_CATEGORY[7], DESC_CATEGORY[11]);
    }

    #[test]
    fn category_rows_partition_the_bank() {
        let total: usize = [
            DescCategory::Action,
            DescCategory::Appearance,
            DescCategory::Location,
        ]
        .into_iter()
        .map(|c| desc_rows(c).count())
        .sum();
        assert_eq!(total, DESC_Q.len());
        assert_eq!(desc_rows(DescCategory::Action).count(), 5);
        assert_eq!(desc_rows(DescCategory::Appearance).count(), 6);
        assert_eq!(desc_rows(DescCategory::Location).count(), 5);
    }

    #[test]
    fn single_entity_banks_use_only_the_bare_placeholder() {
        for s in EXIST_Q.iter().chain(&EXIST_YES).chain(&EXIST_NO).chain(&DESC_Q) {
            assert!(s.contains("<sks>"), "missing placeholder in {s:?}");
            assert!(!s.contains("<sks1>") && !s.contains("<sks2>"));
        }
    }

    #[test]
    fn two_entity_banks_use_both_slots() {
        for s in EXIST2_Q
            .iter()
            .chain(&EXIST2_BOTH_YES)
            .chain(&EXIST2_MIXED)
            .chain(&EXIST2_BOTH_NO)
        {
            assert!(s.contains("<sks1>") && s.contains("<sks2>"), "bad row {s:?}");
        }
    }
}
