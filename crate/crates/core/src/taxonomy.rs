//! The closed set of driving contexts, their question templates and the AV
//! subsystems each one matters to.
//!
//! The canonical data lives in `data/taxonomy.toml` and is embedded at build
//! time; [`Taxonomy::builtin`] parses it once and hands out a shared
//! reference. Alternate files can be loaded with [`Taxonomy::from_toml`] as
//! long as they describe the same 24 contexts in the same order.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const BUILTIN_TAXONOMY: &str = include_str!("../data/taxonomy.toml");

/// Number of tracked contexts.
pub const CONTEXT_COUNT: usize = 24;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TaxonomyError {
    #[error("unknown context kind `{0}`")]
    UnknownKind(String),
    #[error("taxonomy file does not parse: {0}")]
    Parse(String),
    #[error("invalid taxonomy: {0}")]
    Invalid(String),
}

macro_rules! context_ids {
    ($($variant:ident => $token:literal),+ $(,)?) => {
        /// Identifier of one of the 24 driving contexts, in canonical order.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum ContextId {
            $($variant),+
        }

        impl ContextId {
            pub const ALL: [ContextId; CONTEXT_COUNT] = [$(ContextId::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $(ContextId::$variant => $token),+
                }
            }
        }

        impl FromStr for ContextId {
            type Err = TaxonomyError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($token => Ok(ContextId::$variant),)+
                    other => Err(TaxonomyError::UnknownKind(other.to_string())),
                }
            }
        }
    };
}

context_ids! {
    Daytime => "daytime",
    Nighttime => "nighttime",
    Twilight => "twilight",
    Sunny => "sunny",
    Rainy => "rainy",
    Snowy => "snowy",
    Foggy => "foggy",
    DustSandstorm => "dust_sandstorm",
    TreesOverhead => "trees_overhead",
    PavedRoad => "paved_road",
    LaneMarkersVisible => "lane_markers_visible",
    OffRoad => "off_road",
    ParkingLot => "parking_lot",
    Indoors => "indoors",
    Outdoors => "outdoors",
    Tunnel => "tunnel",
    UrbanCanyon => "urban_canyon",
    RuralArea => "rural_area",
    City => "city",
    Highway => "highway",
    ConstructionZone => "construction_zone",
    HeavyTraffic => "heavy_traffic",
    Bridge => "bridge",
    Underpass => "underpass",
}

impl ContextId {
    /// Position in canonical order.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<ContextId> {
        Self::ALL.get(index).copied()
    }
}

impl fmt::Display for ContextId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Lighting,
    Weather,
    RoadSurface,
    Location,
    Structure,
    Traffic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subsystem {
    Perception,
    Localization,
    Planning,
    Behavior,
    Controls,
}

/// How often a context is expected to change, and therefore how often the
/// realtime loop re-asks about it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefreshClass {
    Fast,
    Slow,
}

impl Category {
    pub fn refresh_class(self) -> RefreshClass {
        match self {
            Category::Lighting | Category::Weather => RefreshClass::Slow,
            _ => RefreshClass::Fast,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextKind {
    pub id: ContextId,
    pub display_name: String,
    pub category: Category,
    pub relevant_subsystems: BTreeSet<Subsystem>,
    pub refresh_class: RefreshClass,
    pub question_text: String,
}

#[derive(Debug, Deserialize, Serialize)]
struct TaxonomyFile {
    taxonomy_version: String,
    template_version: String,
    kind: Vec<KindEntry>,
}

#[derive(Debug, Deserialize, Serialize)]
struct KindEntry {
    id: String,
    display_name: String,
    category: Category,
    subsystems: Vec<Subsystem>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    refresh_class: Option<RefreshClass>,
    question: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Taxonomy {
    taxonomy_version: String,
    template_version: String,
    kinds: Vec<ContextKind>,
    by_question: HashMap<String, ContextId>,
}

fn normalize_question(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

impl Taxonomy {
    /// The embedded taxonomy shipped with the crate.
    pub fn builtin() -> &'static Taxonomy {
        static BUILTIN: OnceLock<Taxonomy> = OnceLock::new();
        BUILTIN.get_or_init(|| {
            Taxonomy::from_toml(BUILTIN_TAXONOMY).expect("embedded taxonomy is valid")
        })
    }

    pub fn from_toml(text: &str) -> Result<Taxonomy, TaxonomyError> {
        let file: TaxonomyFile =
            toml::from_str(text).map_err(|e| TaxonomyError::Parse(e.to_string()))?;
        if file.taxonomy_version.trim().is_empty() || file.template_version.trim().is_empty() {
            return Err(TaxonomyError::Invalid("version strings must be nonempty".into()));
        }
        if file.kind.len() != CONTEXT_COUNT {
            return Err(TaxonomyError::Invalid(format!(
                "expected {CONTEXT_COUNT} kinds, found {}",
                file.kind.len()
            )));
        }

        let mut kinds = Vec::with_capacity(CONTEXT_COUNT);
        let mut by_question = HashMap::new();
        for (position, entry) in file.kind.into_iter().enumerate() {
            let id: ContextId = entry.id.parse()?;
            if id.index() != position {
                return Err(TaxonomyError::Invalid(format!(
                    "kind `{id}` at position {position}, expected position {}",
                    id.index()
                )));
            }
            if entry.subsystems.is_empty() {
                return Err(TaxonomyError::Invalid(format!("kind `{id}` has no subsystems")));
            }
            let question = entry.question.trim().to_string();
            if !question.ends_with('?') {
                return Err(TaxonomyError::Invalid(format!(
                    "question for `{id}` is not interrogative: {question:?}"
                )));
            }
            let refresh_class = entry.refresh_class.unwrap_or(entry.category.refresh_class());
            if refresh_class != entry.category.refresh_class() {
                return Err(TaxonomyError::Invalid(format!(
                    "kind `{id}` has refresh class {refresh_class:?} inconsistent with its category"
                )));
            }
            if by_question.insert(normalize_question(&question), id).is_some() {
                return Err(TaxonomyError::Invalid(format!("duplicate question {question:?}")));
            }
            kinds.push(ContextKind {
                id,
                display_name: entry.display_name,
                category: entry.category,
                relevant_subsystems: entry.subsystems.into_iter().collect(),
                refresh_class,
                question_text: question,
            });
        }

        Ok(Taxonomy {
            taxonomy_version: file.taxonomy_version,
            template_version: file.template_version,
            kinds,
            by_question,
        })
    }

    /// Serializes back to the data-file format.
    pub fn to_toml(&self) -> String {
        let file = TaxonomyFile {
            taxonomy_version: self.taxonomy_version.clone(),
            template_version: self.template_version.clone(),
            kind: self
                .kinds
                .iter()
                .map(|k| KindEntry {
                    id: k.id.as_str().to_string(),
                    display_name: k.display_name.clone(),
                    category: k.category,
                    subsystems: k.relevant_subsystems.iter().copied().collect(),
                    refresh_class: Some(k.refresh_class),
                    question: k.question_text.clone(),
                })
                .collect(),
        };
        toml::to_string(&file).expect("taxonomy serializes")
    }

    pub fn taxonomy_version(&self) -> &str {
        &self.taxonomy_version
    }

    pub fn template_version(&self) -> &str {
        &self.template_version
    }

    /// All kinds in canonical order.
    pub fn kinds(&self) -> &[ContextKind] {
        &self.kinds
    }

    pub fn kind(&self, id: ContextId) -> &ContextKind {
        &self.kinds[id.index()]
    }

    /// Looks up a kind by its string token.
    pub fn get(&self, token: &str) -> Result<&ContextKind, TaxonomyError> {
        let id: ContextId = token.parse()?;
        Ok(self.kind(id))
    }

    pub fn question_for(&self, id: ContextId) -> &str {
        &self.kind(id).question_text
    }

    pub fn subsystems_for(&self, id: ContextId) -> &BTreeSet<Subsystem> {
        &self.kind(id).relevant_subsystems
    }

    /// Reverse lookup from question text (whitespace and case insensitive).
    pub fn kind_for_question(&self, question: &str) -> Option<ContextId> {
        self.by_question.get(&normalize_question(question)).copied()
    }

    /// Parses a comma-separated list of kind tokens; `all` selects every kind.
    pub fn parse_kind_list(&self, spec: &str) -> Result<Vec<ContextId>, TaxonomyError> {
        if spec.trim() == "all" {
            return Ok(ContextId::ALL.to_vec());
        }
        let mut out = Vec::new();
        for token in spec.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let id: ContextId = token.parse()?;
            if !out.contains(&id) {
                out.push(id);
            }
        }
        Ok(out)
    }
}

/// Number of distinct joint context assignments, `2^n`.
pub fn combination_count(n_contexts: usize) -> u64 {
    1u64 << n_contexts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(items: &[Subsystem]) -> BTreeSet<Subsystem> {
        items.iter().copied().collect()
    }

    #[test]
    fn has_24_unique_kinds_in_table_order() {
        let tax = Taxonomy::builtin();
        assert_eq!(tax.kinds().len(), 24);
        assert_eq!(tax.kinds()[0].id, ContextId::Daytime);
        assert_eq!(tax.kinds()[23].id, ContextId::Underpass);
        let ids: BTreeSet<_> = tax.kinds().iter().map(|k| k.id).collect();
        assert_eq!(ids.len(), 24);
        assert_eq!(combination_count(tax.kinds().len()), 16_777_216);
    }

    #[test]
    fn subsystem_relevance_matches_reference_table() {
        use Subsystem::*;
        let expected: [(ContextId, &[Subsystem]); 24] = [
            (ContextId::Daytime, &[Perception]),
            (ContextId::Nighttime, &[Perception]),
            (ContextId::Twilight, &[Perception]),
            (ContextId::Sunny, &[Perception]),
            (ContextId::Rainy, &[Perception]),
            (ContextId::Snowy, &[Perception]),
            (ContextId::Foggy, &[Perception]),
            (ContextId::DustSandstorm, &[Perception]),
            (ContextId::TreesOverhead, &[Localization]),
            (ContextId::PavedRoad, &[Planning, Behavior]),
            (ContextId::LaneMarkersVisible, &[Planning, Behavior, Localization]),
            (ContextId::OffRoad, &[Controls, Behavior]),
            (ContextId::ParkingLot, &[Behavior, Perception, Localization]),
            (ContextId::Indoors, &[Planning, Behavior, Localization]),
            (ContextId::Outdoors, &[Planning, Behavior, Localization]),
            (ContextId::Tunnel, &[Localization, Behavior]),
            (ContextId::UrbanCanyon, &[Localization]),
            (ContextId::RuralArea, &[Planning, Behavior]),
            (ContextId::City, &[Planning, Behavior]),
            (ContextId::Highway, &[Planning, Behavior]),
            (ContextId::ConstructionZone, &[Planning, Behavior, Localization]),
            (ContextId::HeavyTraffic, &[Planning, Behavior]),
            (ContextId::Bridge, &[Localization, Perception]),
            (ContextId::Underpass, &[Localization, Perception]),
        ];
        let tax = Taxonomy::builtin();
        for (id, subsystems) in expected {
            assert_eq!(tax.subsystems_for(id), &set(subsystems), "{id}");
        }
    }

    #[test]
    fn refresh_class_follows_category() {
        for kind in Taxonomy::builtin().kinds() {
            let slow = matches!(kind.category, Category::Lighting | Category::Weather);
            assert_eq!(kind.refresh_class == RefreshClass::Slow, slow, "{}", kind.id);
        }
    }

    #[test]
    fn question_templates() {
        let tax = Taxonomy::builtin();
        assert_eq!(tax.question_for(ContextId::Daytime), "Is this during daytime?");
        assert_eq!(tax.question_for(ContextId::Nighttime), "Is this during nighttime?");
        assert_eq!(tax.question_for(ContextId::Sunny), "Is this during sunny weather?");
        assert_eq!(tax.question_for(ContextId::Rainy), "Is this during rainy weather?");
        assert_eq!(tax.question_for(ContextId::Snowy), "Is this during snowy weather?");
        assert_eq!(tax.question_for(ContextId::Tunnel), "Is this inside a tunnel?");
        for kind in tax.kinds() {
            assert!(kind.question_text.ends_with('?'));
            assert!(kind.question_text.starts_with("Is this "));
            if matches!(kind.category, Category::Lighting | Category::Weather) {
                assert!(kind.question_text.starts_with("Is this during "), "{}", kind.id);
            }
        }
    }

    #[test]
    fn questions_reverse_lookup() {
        let tax = Taxonomy::builtin();
        for kind in tax.kinds() {
            assert_eq!(tax.kind_for_question(&kind.question_text), Some(kind.id));
        }
        assert_eq!(tax.kind_for_question("  is this   DURING daytime? "), Some(ContextId::Daytime));
        assert_eq!(tax.kind_for_question("Are there tall buildings around?"), None);
    }

    #[test]
    fn unknown_kind_is_an_error() {
        let tax = Taxonomy::builtin();
        assert_eq!(
            tax.get("volcano").unwrap_err(),
            TaxonomyError::UnknownKind("volcano".into())
        );
        assert_eq!(
            tax.subsystems_for(tax.get("urban_canyon").unwrap().id),
            &set(&[Subsystem::Localization])
        );
    }

    #[test]
    fn serialization_is_a_fixed_point() {
        let tax = Taxonomy::builtin();
        let reloaded = Taxonomy::from_toml(&tax.to_toml()).unwrap();
        assert_eq!(&reloaded, tax);
    }

    #[test]
    fn rejects_inconsistent_files() {
        let broken = BUILTIN_TAXONOMY.replace("Is this a paved road?", "Is this a paved road");
        assert!(matches!(Taxonomy::from_toml(&broken), Err(TaxonomyError::Invalid(_))));

        let reordered = BUILTIN_TAXONOMY.replacen("id = \"daytime\"", "id = \"nighttime\"", 1);
        assert!(Taxonomy::from_toml(&reordered).is_err());

        let slow_tunnel = BUILTIN_TAXONOMY.replace(
            "question = \"Is this inside a tunnel?\"",
            "question = \"Is this inside a tunnel?\"\nrefresh_class = \"slow\"",
        );
        assert!(Taxonomy::from_toml(&slow_tunnel).is_err());
    }

    #[test]
    fn kind_list_parsing() {
        let tax = Taxonomy::builtin();
        assert_eq!(tax.parse_kind_list("all").unwrap().len(), 24);
        assert_eq!(
            tax.parse_kind_list("rainy, daytime,rainy").unwrap(),
            vec![ContextId::Rainy, ContextId::Daytime]
        );
        assert!(tax.parse_kind_list("rainy,lava").is_err());
    }
}
