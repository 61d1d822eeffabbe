use std::collections::BTreeMap;

use qgkit::decode::MockOracleTable;

pub const MOCK_CHAT_REPLY: &str =
    "Question context: Look at the picture. Question: Which of these is a magnet?";

const WORDS: &[&str] = &[
    "</s>", "<unk>", "which", "what", "is", "are", "the", "of", "these", "a", "an", "in", "on",
    "this", "will", "do", "does", "magnet", "magnets", "attract", "repel", "each", "other",
    "state", "farthest", "north", "south", "east", "west", "map", "picture", "property",
    "objects", "have", "common", "animal", "plant", "rock", "material", "?",
];

/// Oracle used in mock mode when no table file is configured: a small question
/// vocabulary with every distribution synthesized from the history.
pub fn default_mock_table() -> MockOracleTable {
    MockOracleTable {
        vocab: WORDS.iter().map(|w| w.to_string()).collect(),
        eos_token: 0,
        unk_token: Some(1),
        context: 2,
        hidden_dim: 8,
        entries: BTreeMap::new(),
        fallback_seed: Some(0x7167_6b69_74),
    }
}
