//! Gadget storage and the deterministic knowledge oracle.
//!
//! A gadget pairs a prompt-ready clue ("the first string that everyone
//! prints when learning to code") with the string it resolves to. The
//! oracle is the offline stand-in for a model's background knowledge: it
//! walks chained gadgets to their direct leaf and always returns the same
//! bytes for the same id, which is what makes chain plans verifiable
//! without querying a model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// How a gadget's clue resolves.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Resolution {
    /// The clue resolves straight to a surface string.
    Direct { value: String },
    /// The clue resolves to another gadget; `hop_text` describes the hop.
    Chained { next: String, hop_text: String },
}

/// Rough taxonomy of where a clue's pull comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GadgetCategory {
    CulturalReference,
    Anecdote,
    QuoteLocation,
    /// Single-word hint used by the fill-in-the-blank strategy.
    Hint,
}

/// A single clue-to-string reference unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gadget {
    pub id: String,
    /// Prompt-ready text that references the resolution indirectly. Must
    /// never contain the final resolution itself.
    pub clue: String,
    pub category: GadgetCategory,
    #[serde(default)]
    pub tags: Vec<String>,
    /// Documentation of clue qualifiers ("capitalized", "plural", ...).
    /// The resolution already stores the exact surface string, so these
    /// are never interpreted.
    #[serde(default)]
    pub modifiers: Vec<String>,
    pub resolution: Resolution,
}

#[derive(Debug, Error)]
pub enum KbError {
    #[error("knowledge base document is not valid JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("gadget id must be nonempty")]
    EmptyId,
    #[error("duplicate gadget id '{0}'")]
    DuplicateId(String),
    #[error("gadget '{0}' has an empty direct resolution")]
    EmptyResolution(String),
    #[error("gadget '{id}' chains to unknown gadget '{next}'")]
    DanglingNext { id: String, next: String },
    #[error("gadget chain starting at '{id}' does not terminate within {max_depth} hops")]
    DepthExceeded { id: String, max_depth: usize },
    #[error("gadget '{0}' gives away its own resolution in the clue")]
    ClueLeaksResolution(String),
    #[error("unknown gadget id '{0}'")]
    UnknownGadget(String),
    #[error("max_chain_depth must be positive")]
    ZeroDepth,
}

/// One visited gadget in an oracle walk. For chained gadgets `text` is the
/// hop description; for the direct leaf it is the resolved value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleHop {
    pub gadget_id: String,
    pub text: String,
}

/// Result of resolving a clue: the leaf string plus the full hop trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleResolution {
    pub resolution: String,
    pub trace: Vec<OracleHop>,
}

/// Gadget ids matching a target string, `partial` when the resolutions
/// merely contain the target rather than equal it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GadgetMatches {
    pub ids: Vec<String>,
    pub partial: bool,
}

impl GadgetMatches {
    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Deserialize)]
struct KbDocument {
    #[serde(default = "default_chain_depth")]
    max_chain_depth: usize,
    gadgets: Vec<Gadget>,
}

fn default_chain_depth() -> usize {
    4
}

/// Validated, immutable gadget store. Safe to share across threads.
#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    gadgets: BTreeMap<String, Gadget>,
    /// final resolution string -> sorted gadget ids resolving to it
    resolution_index: BTreeMap<String, Vec<String>>,
    max_chain_depth: usize,
}

impl KnowledgeBase {
    /// Builds and validates a knowledge base from parsed gadgets.
    pub fn new(gadgets: Vec<Gadget>, max_chain_depth: usize) -> Result<Self, KbError> {
        if max_chain_depth == 0 {
            return Err(KbError::ZeroDepth);
        }
        let mut map = BTreeMap::new();
        for gadget in gadgets {
            if gadget.id.is_empty() {
                return Err(KbError::EmptyId);
            }
            if let Resolution::Direct { value } = &gadget.resolution {
                if value.is_empty() {
                    return Err(KbError::EmptyResolution(gadget.id.clone()));
                }
            }
            if map.insert(gadget.id.clone(), gadget.clone()).is_some() {
                return Err(KbError::DuplicateId(gadget.id));
            }
        }

        let kb = KnowledgeBase {
            gadgets: map,
            resolution_index: BTreeMap::new(),
            max_chain_depth,
        };

        // Walk every gadget to its leaf: catches dangling next-ids, cycles
        // (as depth exhaustion), and clue/resolution overlap, and yields
        // the index in one pass.
        let mut index: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (id, gadget) in &kb.gadgets {
            let resolved = kb.oracle_resolve(id)?;
            if contains_ci(&gadget.clue, &resolved.resolution) {
                return Err(KbError::ClueLeaksResolution(id.clone()));
            }
            index.entry(resolved.resolution).or_default().push(id.clone());
        }
        for ids in index.values_mut() {
            ids.sort();
        }

        Ok(KnowledgeBase {
            resolution_index: index,
            ..kb
        })
    }

    pub fn max_chain_depth(&self) -> usize {
        self.max_chain_depth
    }

    pub fn gadget(&self, id: &str) -> Option<&Gadget> {
        self.gadgets.get(id)
    }

    pub fn len(&self) -> usize {
        self.gadgets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gadgets.is_empty()
    }

    /// Gadget ids in lexicographic order.
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.gadgets.keys().map(String::as_str)
    }

    pub fn gadgets(&self) -> impl Iterator<Item = &Gadget> {
        self.gadgets.values()
    }

    /// Resolves a gadget id to its direct leaf string, walking chained
    /// hops. Purely deterministic: identical inputs yield identical
    /// outputs, byte for byte.
    pub fn oracle_resolve(&self, id: &str) -> Result<OracleResolution, KbError> {
        let mut trace = Vec::new();
        let mut current = id.to_string();
        loop {
            let gadget = self
                .gadgets
                .get(&current)
                .ok_or_else(|| match trace.is_empty() {
                    true => KbError::UnknownGadget(current.clone()),
                    false => KbError::DanglingNext {
                        id: trace
                            .last()
                            .map(|hop: &OracleHop| hop.gadget_id.clone())
                            .unwrap_or_default(),
                        next: current.clone(),
                    },
                })?;
            if trace.len() >= self.max_chain_depth {
                return Err(KbError::DepthExceeded {
                    id: id.to_string(),
                    max_depth: self.max_chain_depth,
                });
            }
            match &gadget.resolution {
                Resolution::Direct { value } => {
                    trace.push(OracleHop {
                        gadget_id: current,
                        text: value.clone(),
                    });
                    return Ok(OracleResolution {
                        resolution: value.clone(),
                        trace,
                    });
                }
                Resolution::Chained { next, hop_text } => {
                    trace.push(OracleHop {
                        gadget_id: current.clone(),
                        text: hop_text.clone(),
                    });
                    current = next.clone();
                }
            }
        }
    }

    /// All gadget ids whose final resolution equals `target` exactly; when
    /// none do, falls back to resolutions that contain `target` and flags
    /// the result as partial. Ordering is lexicographic by id.
    pub fn find_gadgets(&self, target: &str) -> GadgetMatches {
        if target.is_empty() {
            return GadgetMatches {
                ids: Vec::new(),
                partial: false,
            };
        }
        if let Some(ids) = self.resolution_index.get(target) {
            return GadgetMatches {
                ids: ids.clone(),
                partial: false,
            };
        }
        let mut ids: Vec<String> = self
            .resolution_index
            .iter()
            .filter(|(resolution, _)| resolution.contains(target))
            .flat_map(|(_, ids)| ids.iter().cloned())
            .collect();
        ids.sort();
        ids.dedup();
        GadgetMatches {
            partial: !ids.is_empty(),
            ids,
        }
    }
}

/// Loads and validates a knowledge base from its JSON document form.
pub fn load_kb(source: &str) -> Result<KnowledgeBase, KbError> {
    let doc: KbDocument = serde_json::from_str(source)?;
    KnowledgeBase::new(doc.gadgets, doc.max_chain_depth)
}

/// Case-insensitive substring test that tolerates multi-char lowercase
/// expansions.
pub(crate) fn contains_ci(haystack: &str, needle: &str) -> bool {
    let needle: Vec<char> = needle.chars().flat_map(char::to_lowercase).collect();
    if needle.is_empty() {
        return true;
    }
    let hay: Vec<char> = haystack.chars().flat_map(char::to_lowercase).collect();
    hay.windows(needle.len()).any(|w| w == needle.as_slice())
}
