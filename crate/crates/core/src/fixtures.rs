//! The embedded demo corpus: gadget knowledge base, filter suite, and the
//! Chinook-style schema the SQL range runs on. The same documents ship as
//! files under `fixtures/` for use with the CLI.

use crate::filters::FilterLexicon;
use crate::knowledge_base::{load_kb, KnowledgeBase};
use crate::sql_range::SqlDatabase;

pub const KB_JSON: &str = include_str!("../fixtures/kb.json");
pub const FILTER_SUITE_JSON: &str = include_str!("../fixtures/filters.json");
pub const CHINOOK_JSON: &str = include_str!("../fixtures/chinook.json");
pub const CAMPAIGN_JSON: &str = include_str!("../fixtures/campaign.json");

/// The demo knowledge base.
pub fn knowledge_base() -> KnowledgeBase {
    load_kb(KB_JSON).expect("embedded knowledge base is valid")
}

/// The demo filter suite: a reassembly-aware word filter, the SQL guard,
/// and the phrase-level injection filter.
pub fn filter_suite() -> Vec<FilterLexicon> {
    crate::filters::load_filter_suite(FILTER_SUITE_JSON).expect("embedded filter suite is valid")
}

/// Just the `DROP TABLE` guard lexicon.
pub fn sql_guard() -> FilterLexicon {
    filter_suite()
        .into_iter()
        .find(|l| l.name == "sql-guard")
        .expect("suite ships the sql guard")
}

/// The 11-table Chinook-style schema.
pub fn chinook_db() -> SqlDatabase {
    SqlDatabase::from_schema_json(CHINOOK_JSON).expect("embedded schema is valid")
}
