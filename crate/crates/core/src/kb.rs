//! Knowledge base, alias table and candidate generation.
//!
//! Entities live in `entities.jsonl` (one `{id, title, description}` object
//! per line, `summary` optional). Aliases live in a separate
//! `aliases.tsv` with rows `alias<TAB>entity_id<TAB>score`; the score column
//! may be omitted and then defaults to 0.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

#[derive(Debug, thiserror::Error)]
pub enum KbError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("duplicate entity id {0:?}")]
    DuplicateId(String),
    #[error("invalid entity at line {line}: {message}")]
    InvalidEntity { line: usize, message: String },
    #[error("alias {alias:?} references unknown entity {id:?}")]
    DanglingAlias { alias: String, id: String },
    #[error("record {0:?} has no gold entity; alias recall needs labelled data")]
    MissingGold(String),
    #[error("alias recall over an empty dataset is undefined")]
    EmptyDataset,
}

/// A knowledge-base entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub id: String,
    pub title: String,
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
}

impl Entity {
    /// The text shown to the model: the summary when one exists.
    pub fn display_text(&self) -> &str {
        self.summary.as_deref().unwrap_or(&self.description)
    }
}

/// Entities keyed by id, remembering file order.
#[derive(Debug, Clone, Default)]
pub struct EntityStore {
    entities: Vec<Entity>,
    index: HashMap<String, usize>,
}

impl EntityStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, entity: Entity) -> Result<(), KbError> {
        if self.index.contains_key(&entity.id) {
            return Err(KbError::DuplicateId(entity.id));
        }
        self.index.insert(entity.id.clone(), self.entities.len());
        self.entities.push(entity);
        Ok(())
    }

    pub fn from_entities(entities: impl IntoIterator<Item = Entity>) -> Result<Self, KbError> {
        let mut store = Self::new();
        for e in entities {
            store.insert(e)?;
        }
        Ok(store)
    }

    pub fn get(&self, id: &str) -> Option<&Entity> {
        self.index.get(id).map(|&i| &self.entities[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Entity> {
        self.entities.iter()
    }
}

/// Loads an `entities.jsonl` file. Blank lines are skipped.
pub fn load_entity_store(path: impl AsRef<Path>) -> Result<EntityStore, KbError> {
    let path = path.as_ref();
    let text = read(path)?;
    parse_entity_store(&text, &path.display().to_string())
}

pub fn parse_entity_store(text: &str, origin: &str) -> Result<EntityStore, KbError> {
    let mut store = EntityStore::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let entity: Entity = serde_json::from_str(line).map_err(|e| KbError::Parse {
            path: origin.to_string(),
            line: line_no,
            message: e.to_string(),
        })?;
        if entity.id.is_empty() {
            return Err(KbError::InvalidEntity {
                line: line_no,
                message: "empty id".into(),
            });
        }
        if entity.title.is_empty() {
            return Err(KbError::InvalidEntity {
                line: line_no,
                message: format!("entity {:?} has an empty title", entity.id),
            });
        }
        store.insert(entity)?;
    }
    Ok(store)
}

/// Case-fold, NFC, and collapse whitespace runs to one space.
pub fn normalize_alias(s: &str) -> String {
    let folded: String = s.nfc().flat_map(char::to_lowercase).collect();
    folded.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Normalized alias → entities, highest prior first, ties by id.
#[derive(Debug, Clone, Default)]
pub struct AliasTable {
    entries: HashMap<String, Vec<(String, f64)>>,
}

impl AliasTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one (alias, entity, prior) row. A repeated pair keeps the larger prior.
    pub fn add(&mut self, alias: &str, entity_id: &str, score: f64) {
        let list = self.entries.entry(normalize_alias(alias)).or_default();
        match list.iter_mut().find(|(id, _)| id == entity_id) {
            Some(slot) => slot.1 = slot.1.max(score),
            None => list.push((entity_id.to_string(), score)),
        }
        list.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    }

    pub fn lookup(&self, alias: &str) -> &[(String, f64)] {
        self.entries
            .get(&normalize_alias(alias))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Checks every referenced id exists in `store`.
    pub fn validate(&self, store: &EntityStore) -> Result<(), KbError> {
        let mut aliases: Vec<_> = self.entries.iter().collect();
        aliases.sort_by(|a, b| a.0.cmp(b.0));
        for (alias, list) in aliases {
            if let Some((id, _)) = list.iter().find(|(id, _)| !store.contains(id)) {
                return Err(KbError::DanglingAlias {
                    alias: alias.clone(),
                    id: id.clone(),
                });
            }
        }
        Ok(())
    }
}

pub fn load_alias_table(path: impl AsRef<Path>) -> Result<AliasTable, KbError> {
    let path = path.as_ref();
    let text = read(path)?;
    parse_alias_table(&text, &path.display().to_string())
}

/// Reads `alias<TAB>entity_id[<TAB>score]` lines; blank lines and lines
/// starting with `#` are skipped.
pub fn parse_alias_table(text: &str, origin: &str) -> Result<AliasTable, KbError> {
    let mut table = AliasTable::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| KbError::Parse {
            path: origin.to_string(),
            line: i + 1,
            message,
        };
        let mut cols = line.split('\t');
        let alias = cols.next().unwrap_or_default();
        let id = cols
            .next()
            .filter(|s| !s.is_empty())
            .ok_or_else(|| parse_err("expected alias<TAB>entity_id[<TAB>score]".into()))?;
        let score = match cols.next().map(str::trim) {
            None | Some("") => 0.0,
            Some(raw) => {
                let v: f64 = raw
                    .parse()
                    .map_err(|_| parse_err(format!("bad score {raw:?}")))?;
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(parse_err(format!("score must be non-negative, got {raw}")));
                }
                v
            }
        };
        if normalize_alias(alias).is_empty() {
            return Err(parse_err("empty alias".into()));
        }
        table.add(alias, id, score);
    }
    Ok(table)
}

/// Candidate entity ids for one mention, in presentation-independent order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub ids: Vec<String>,
    /// Normalized alias the set was generated from; empty when supplied inline.
    pub alias: String,
}

impl CandidateSet {
    /// Builds a set from explicit ids, dropping repeats.
    pub fn from_ids(ids: impl IntoIterator<Item = String>) -> Self {
        let mut seen = HashSet::new();
        let ids = ids.into_iter().filter(|id| seen.insert(id.clone())).collect();
        Self {
            ids,
            alias: String::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.ids.iter().any(|x| x == id)
    }
}

/// Looks the mention up in the alias table, truncating to `k` when given.
/// An unknown alias yields an empty set.
pub fn generate_candidates(mention: &str, table: &AliasTable, k: Option<usize>) -> CandidateSet {
    let alias = normalize_alias(mention);
    let limit = k.unwrap_or(usize::MAX);
    let ids = table
        .lookup(&alias)
        .iter()
        .take(limit)
        .map(|(id, _)| id.clone())
        .collect();
    CandidateSet { ids, alias }
}

/// True when `context` wraps `mention` in `###` markers (spaces inside allowed).
pub fn is_marked(context: &str, mention: &str) -> bool {
    let needle = mention.trim();
    let mut rest = context;
    while let Some(start) = rest.find("###") {
        let after = &rest[start + 3..];
        let Some(end) = after.find("###") else { return false };
        if after[..end].trim() == needle {
            return true;
        }
        rest = &after[end..];
    }
    false
}

/// One mention to link, as read from a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MentionRecord {
    pub id: String,
    pub mention: String,
    /// Context with the mention wrapped in `###`.
    pub context: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<String>,
}

impl MentionRecord {
    /// Inline candidates when present, otherwise the alias table's.
    pub fn candidate_set(&self, table: Option<&AliasTable>, k: Option<usize>) -> CandidateSet {
        match (&self.candidates, table) {
            (Some(ids), _) => {
                let mut set = CandidateSet::from_ids(ids.iter().cloned());
                if let Some(k) = k {
                    set.ids.truncate(k);
                }
                set
            }
            (None, Some(table)) => generate_candidates(&self.mention, table, k),
            (None, None) => CandidateSet {
                ids: Vec::new(),
                alias: normalize_alias(&self.mention),
            },
        }
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<MentionRecord>, KbError> {
    let path = path.as_ref();
    let text = read(path)?;
    parse_dataset(&text, &path.display().to_string())
}

pub fn parse_dataset(text: &str, origin: &str) -> Result<Vec<MentionRecord>, KbError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: MentionRecord = serde_json::from_str(line).map_err(|e| KbError::Parse {
            path: origin.to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if rec.mention.trim().is_empty() {
            return Err(KbError::Parse {
                path: origin.to_string(),
                line: i + 1,
                message: format!("record {:?} has an empty mention", rec.id),
            });
        }
        if !seen.insert(rec.id.clone()) {
            return Err(KbError::DuplicateId(rec.id));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Fraction of records whose gold id is among the generated candidates.
pub fn alias_recall(
    dataset: &[MentionRecord],
    table: &AliasTable,
    k: Option<usize>,
) -> Result<f64, KbError> {
    if dataset.is_empty() {
        return Err(KbError::EmptyDataset);
    }
    let mut hits = 0usize;
    for rec in dataset {
        let gold = rec
            .gold
            .as_deref()
            .ok_or_else(|| KbError::MissingGold(rec.id.clone()))?;
        if generate_candidates(&rec.mention, table, k).contains(gold) {
            hits += 1;
        }
    }
    Ok(hits as f64 / dataset.len() as f64)
}

fn read(path: &Path) -> Result<String, KbError> {
    fs::read_to_string(path).map_err(|source| KbError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn paris_table() -> AliasTable {
        parse_alias_table(
            "Paris\tParis_Texas\t120\nparis\tParis_France\t9000\nParis Hilton\tParis_Hilton\t50\n",
            "mem",
        )
        .unwrap()
    }

    #[test]
    fn loads_two_line_store() {
        let store = parse_entity_store(
            "{\"id\":\"Q1\",\"title\":\"A\",\"description\":\"a\"}\n{\"id\":\"Q2\",\"title\":\"B\",\"description\":\"b\"}\n",
            "mem",
        )
        .unwrap();
        assert_eq!(store.len(), 2);
        assert_eq!(store.get("Q2").unwrap().title, "B");
    }

    #[test]
    fn duplicate_id_is_a_conflict() {
        let err = parse_entity_store(
            "{\"id\":\"Q1\",\"title\":\"A\",\"description\":\"a\"}\n{\"id\":\"Q1\",\"title\":\"B\",\"description\":\"b\"}\n",
            "mem",
        )
        .unwrap_err();
        assert!(matches!(&err, KbError::DuplicateId(id) if id == "Q1"));
        assert!(err.to_string().contains("Q1"));
    }

    #[test]
    fn empty_file_gives_empty_store() {
        assert!(parse_entity_store("", "mem").unwrap().is_empty());
    }

    #[test]
    fn malformed_line_names_line_number() {
        let err = parse_entity_store(
            "{\"id\":\"Q1\",\"title\":\"A\",\"description\":\"a\"}\nnot json\n",
            "x.jsonl",
        )
        .unwrap_err();
        assert!(matches!(err, KbError::Parse { line: 2, .. }));
        assert!(err.to_string().starts_with("x.jsonl:2:"));
    }

    #[test]
    fn empty_title_rejected() {
        let err = parse_entity_store("{\"id\":\"Q1\",\"title\":\"\",\"description\":\"a\"}", "m")
            .unwrap_err();
        assert!(matches!(err, KbError::InvalidEntity { line: 1, .. }));
    }

    #[test]
    fn candidates_in_prior_order() {
        let t = paris_table();
        let c = generate_candidates("paris", &t, None);
        assert_eq!(c.ids, vec!["Paris_France", "Paris_Texas"]);
        assert_eq!(generate_candidates("paris", &t, Some(1)).ids, vec!["Paris_France"]);
        assert!(generate_candidates("zqx", &t, Some(10)).is_empty());
    }

    #[test]
    fn normalization_folds_case_space_and_composition() {
        let t = paris_table();
        assert_eq!(generate_candidates("  PARIS   hilton ", &t, None).ids, vec!["Paris_Hilton"]);
        // "Pe\u{301}" (decomposed é) must match the precomposed form.
        let mut t = AliasTable::new();
        t.add("P\u{e9}le", "Pele", 1.0);
        assert_eq!(generate_candidates("Pe\u{301}le", &t, None).ids, vec!["Pele"]);
    }

    #[test]
    fn ties_break_by_id_and_missing_score_defaults_to_zero() {
        let t = parse_alias_table("x\tb\nx\ta\t0\nx\tc\t1\n", "m").unwrap();
        assert_eq!(generate_candidates("x", &t, None).ids, vec!["c", "a", "b"]);
    }

    #[test]
    fn repeated_pair_keeps_max_prior() {
        let t = parse_alias_table("x\ta\t1\nx\tb\t2\nx\ta\t5\n", "m").unwrap();
        assert_eq!(t.lookup("x"), &[("a".to_string(), 5.0), ("b".to_string(), 2.0)]);
    }

    #[test]
    fn negative_score_rejected() {
        assert!(parse_alias_table("x\ta\t-1\n", "m").is_err());
        assert!(parse_alias_table("x\n", "m").is_err());
        assert_eq!(parse_alias_table("# a\tb\nx\ta\n", "m").unwrap().len(), 1);
    }

    #[test]
    fn dangling_alias_detected() {
        let store = EntityStore::from_entities([Entity {
            id: "Paris_France".into(),
            title: "Paris".into(),
            description: "city".into(),
            summary: None,
        }])
        .unwrap();
        let err = paris_table().validate(&store).unwrap_err();
        assert!(matches!(err, KbError::DanglingAlias { .. }));
    }

    fn rec(id: &str, mention: &str, gold: Option<&str>) -> MentionRecord {
        MentionRecord {
            id: id.into(),
            mention: mention.into(),
            context: format!("###{mention}###"),
            candidates: None,
            gold: gold.map(Into::into),
        }
    }

    #[test]
    fn alias_recall_counts_hits() {
        // Hand-enumerated fixture: "paris" → gold Paris_Texas is rank 2 (hit at k=10),
        // "paris hilton" → Paris_Hilton (hit), "lyon" → unseen alias (miss). 2/3.
        let t = paris_table();
        let data = vec![
            rec("m1", "Paris", Some("Paris_Texas")),
            rec("m2", "Paris Hilton", Some("Paris_Hilton")),
            rec("m3", "Lyon", Some("Lyon")),
        ];
        let r = alias_recall(&data, &t, Some(10)).unwrap();
        assert!((r - 2.0 / 3.0).abs() < 1e-12);
        // k=1 drops Paris_Texas.
        assert!((alias_recall(&data, &t, Some(1)).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn alias_recall_perfect() {
        let t = paris_table();
        let data = vec![rec("m1", "paris", Some("Paris_France"))];
        assert_eq!(alias_recall(&data, &t, None).unwrap(), 1.0);
    }

    #[test]
    fn alias_recall_requires_gold() {
        let t = paris_table();
        let err = alias_recall(&[rec("m1", "paris", None)], &t, None).unwrap_err();
        assert!(matches!(err, KbError::MissingGold(id) if id == "m1"));
    }

    #[test]
    fn marked_context_detection() {
        assert!(is_marked("at the ###Sago### mine", "Sago"));
        assert!(is_marked("###a### then ### Sago ###", "Sago"));
        assert!(!is_marked("at the Sago mine", "Sago"));
        assert!(!is_marked("###Sago", "Sago"));
        assert!(!is_marked("###Sagoo###", "Sago"));
    }

    #[test]
    fn dataset_rejects_duplicate_ids() {
        let line = "{\"id\":\"a\",\"mention\":\"x\",\"context\":\"###x###\"}";
        assert!(parse_dataset(&format!("{line}\n{line}"), "d").is_err());
    }

    #[test]
    fn inline_candidates_take_precedence() {
        let mut r = rec("m", "paris", None);
        r.candidates = Some(vec!["B".into(), "A".into(), "B".into()]);
        let set = r.candidate_set(Some(&paris_table()), None);
        assert_eq!(set.ids, vec!["B", "A"]);
    }

    fn arb_table() -> impl Strategy<Value = AliasTable> {
        proptest::collection::vec(("[ab]{1,2}", "e[0-9]", 0u32..5), 0..30).prop_map(|rows| {
            let mut t = AliasTable::new();
            for (a, id, s) in rows {
                t.add(&a, &id, f64::from(s));
            }
            t
        })
    }

    proptest! {
        #[test]
        fn truncation_is_prefix(table in arb_table(), alias in "[ab]{1,2}", k in 1usize..6, extra in 0usize..6) {
            let short = generate_candidates(&alias, &table, Some(k));
            let long = generate_candidates(&alias, &table, Some(k + extra));
            prop_assert!(long.ids.starts_with(&short.ids));
            prop_assert!(short.len() <= k);
            prop_assert_eq!(short.clone(), generate_candidates(&alias, &table, Some(k)));
            let uniq: HashSet<_> = long.ids.iter().collect();
            prop_assert_eq!(uniq.len(), long.len());
        }

        #[test]
        fn uncapped_recall_dominates(table in arb_table(), golds in proptest::collection::vec(("[ab]{1,2}", "e[0-9]"), 1..10), k in 1usize..4) {
            let data: Vec<_> = golds.iter().enumerate()
                .map(|(i, (m, g))| rec(&i.to_string(), m, Some(g)))
                .collect();
            let full = alias_recall(&data, &table, None).unwrap();
            let capped = alias_recall(&data, &table, Some(k)).unwrap();
            prop_assert!(full >= capped);
        }
    }
}
