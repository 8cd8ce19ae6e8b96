//! Synthetic fact corpus, edit-set construction, and dataset file I/O.
//!
//! Facts are (subject, relation, object) triples rendered through per-relation
//! templates: one canonical prompt, surface rephrases, and an inverse
//! rendering that drives portability probes. The pretraining corpus is the
//! deterministic concatenation of every rendering of every old fact, so it
//! can always be rebuilt from the items alone.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{seeded_rng, SeededRng};

/// A locality or portability probe: prompt plus the output it is checked
/// against (the base model's expected completion for locality, the derived
/// fact for portability).
pub type Probe = (String, String);

/// One editable fact with its evaluation probes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeItem {
    pub id: String,
    pub subject: String,
    pub relation: String,
    pub object_old: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_new: Option<String>,
    /// Canonical prompt; the model should complete it with `target`.
    pub prompt: String,
    /// Expected completion, e.g. " paris." (old object before an edit is
    /// assigned, new object in an edit sequence).
    pub target: String,
    /// Alternative prompts with the same meaning.
    pub rephrases: Vec<String>,
    pub locality_probes: Vec<Probe>,
    pub portability_probes: Vec<Probe>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeDataset {
    pub items: Vec<KnowledgeItem>,
    pub corpus_text: String,
    pub seed: u64,
}

struct RelationSchema {
    name: &'static str,
    /// First template is canonical; the rest become rephrases.
    templates: &'static [&'static str],
    inverse: &'static str,
}

const RELATIONS: &[RelationSchema] = &[
    RelationSchema {
        name: "capital",
        templates: &["the capital of {s} is", "{s} capital is", "chief city of {s} is"],
        inverse: "{o} is the capital of",
    },
    RelationSchema {
        name: "leader",
        templates: &["the leader of {s} is", "{s} is led by", "ruler of {s} is"],
        inverse: "{o} is the leader of",
    },
    RelationSchema {
        name: "currency",
        templates: &["the currency of {s} is", "{s} pays with", "money of {s} is"],
        inverse: "{o} is the currency of",
    },
    RelationSchema {
        name: "language",
        templates: &["the language of {s} is", "{s} speaks", "tongue of {s} is"],
        inverse: "{o} is the language of",
    },
];

fn render(template: &str, subject: &str, object: &str) -> String {
    template.replace("{s}", subject).replace("{o}", object)
}

fn make_name(rng: &mut SeededRng, syllables: usize) -> String {
    const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
    const VOWELS: &[u8] = b"aeiou";
    let mut name = String::new();
    for _ in 0..syllables {
        name.push(CONSONANTS[rng.random_range(0..CONSONANTS.len())] as char);
        name.push(VOWELS[rng.random_range(0..VOWELS.len())] as char);
    }
    name
}

fn unique_names(rng: &mut SeededRng, count: usize, taken: &mut BTreeSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(count);
    let mut tries = 0;
    while out.len() < count {
        let syllables = 2 + (tries / 64) % 2 + rng.random_range(0..2);
        let name = make_name(rng, syllables);
        tries += 1;
        if tries > 100_000 {
            panic!("name space exhausted");
        }
        if taken.insert(name.clone()) {
            out.push(name);
        }
    }
    out
}

/// Deterministically builds the fact pool. Each item gets the canonical
/// prompt, the remaining templates as rephrases, locality probes drawn from
/// other subjects' facts, and a portability probe from the inverse rendering.
pub fn generate_corpus(seed: u64, n_subjects: usize, n_relations: usize) -> Result<KnowledgeDataset> {
    if n_subjects * n_relations < 2 {
        return Err(Error::InvalidArgument(
            "need at least two facts to build disjoint locality probes".into(),
        ));
    }
    if n_relations == 0 || n_relations > RELATIONS.len() {
        return Err(Error::InvalidArgument(format!(
            "n_relations must be in 1..={}, got {n_relations}",
            RELATIONS.len()
        )));
    }
    if n_subjects < 2 {
        return Err(Error::Dataset(
            "cannot build locality probes: no fact with a different subject exists".into(),
        ));
    }

    let mut rng = seeded_rng(seed);
    let mut taken = BTreeSet::new();
    let subjects = unique_names(&mut rng, n_subjects, &mut taken);
    let object_pools: Vec<Vec<String>> = (0..n_relations)
        .map(|_| unique_names(&mut rng, n_subjects.max(20) + 10, &mut taken))
        .collect();

    let mut items = Vec::with_capacity(n_subjects * n_relations);
    for (ri, schema) in RELATIONS.iter().take(n_relations).enumerate() {
        for (si, subject) in subjects.iter().enumerate() {
            let object = object_pools[ri][rng.random_range(0..object_pools[ri].len())].clone();
            let prompt = render(schema.templates[0], subject, &object);
            let rephrases = schema.templates[1..]
                .iter()
                .map(|t| render(t, subject, &object))
                .collect();
            let portability = vec![(
                render(schema.inverse, subject, &object),
                format!(" {subject}."),
            )];
            items.push(KnowledgeItem {
                id: format!("{}-{:03}", schema.name, si),
                subject: subject.clone(),
                relation: schema.name.to_string(),
                object_old: object.clone(),
                object_new: None,
                prompt,
                target: format!(" {object}."),
                rephrases,
                locality_probes: Vec::new(),
                portability_probes: portability,
            });
        }
    }

    // Locality probes: canonical prompts of facts about other subjects.
    let all: Vec<(String, String, String)> = items
        .iter()
        .map(|it| (it.subject.clone(), it.prompt.clone(), it.target.clone()))
        .collect();
    for item in &mut items {
        let candidates: Vec<&(String, String, String)> =
            all.iter().filter(|(s, _, _)| s != &item.subject).collect();
        if candidates.is_empty() {
            return Err(Error::Dataset(format!(
                "cannot build locality probes for {}: no fact with a different subject exists",
                item.id
            )));
        }
        let mut idx: Vec<usize> = (0..candidates.len()).collect();
        idx.shuffle(&mut rng);
        item.locality_probes = idx
            .into_iter()
            .take(3)
            .map(|i| (candidates[i].1.clone(), candidates[i].2.clone()))
            .collect();
    }

    let corpus_text = corpus_text_of(&items);
    Ok(KnowledgeDataset { items, corpus_text, seed })
}

/// Canonical + rephrase + inverse renderings of every old fact, one line
/// each, in item order. A pure function of the items.
pub fn corpus_text_of(items: &[KnowledgeItem]) -> String {
    let mut lines = Vec::new();
    for item in items {
        let old_target = format!(" {}.", item.object_old);
        lines.push(format!("{}{}", item.prompt, old_target));
        for r in &item.rephrases {
            lines.push(format!("{r}{old_target}"));
        }
        for (p, t) in &item.portability_probes {
            lines.push(format!("{p}{t}"));
        }
    }
    lines.join("\n")
}

/// Draws `n_edits` items without replacement, assigns each a counterfactual
/// new object (distinct from the old one, same relation's name pool), rewrites
/// target and portability probes for the new object, and re-draws locality
/// probes from non-edited items only.
pub fn make_edit_set(
    dataset: &KnowledgeDataset,
    n_edits: usize,
    seed: u64,
) -> Result<Vec<KnowledgeItem>> {
    if n_edits > dataset.items.len() {
        return Err(Error::InvalidArgument(format!(
            "requested {} edits from a pool of {}",
            n_edits,
            dataset.items.len()
        )));
    }
    let mut rng = seeded_rng(seed);
    let mut order: Vec<usize> = (0..dataset.items.len()).collect();
    order.shuffle(&mut rng);
    let chosen: Vec<usize> = order[..n_edits].to_vec();
    let edited_subjects: BTreeSet<&str> =
        chosen.iter().map(|&i| dataset.items[i].subject.as_str()).collect();

    // Objects seen per relation, for counterfactual sampling.
    let mut objects_by_relation: std::collections::BTreeMap<&str, Vec<&str>> = Default::default();
    for item in &dataset.items {
        objects_by_relation
            .entry(item.relation.as_str())
            .or_default()
            .push(item.object_old.as_str());
    }
    for objs in objects_by_relation.values_mut() {
        objs.sort_unstable();
        objs.dedup();
    }

    // Locality probe pool: canonical facts whose subject is not edited.
    let probe_pool: Vec<&KnowledgeItem> = dataset
        .items
        .iter()
        .filter(|it| !edited_subjects.contains(it.subject.as_str()))
        .collect();
    if probe_pool.is_empty() {
        return Err(Error::Dataset(
            "every subject is being edited; no disjoint locality probes remain".into(),
        ));
    }

    let mut edits = Vec::with_capacity(n_edits);
    for &i in &chosen {
        let mut item = dataset.items[i].clone();
        let pool = &objects_by_relation[item.relation.as_str()];
        let alternatives: Vec<&&str> = pool.iter().filter(|&&o| o != item.object_old).collect();
        if alternatives.is_empty() {
            return Err(Error::Dataset(format!(
                "relation {} has a single object; no counterfactual exists",
                item.relation
            )));
        }
        let new_obj = alternatives[rng.random_range(0..alternatives.len())].to_string();

        let schema = RELATIONS
            .iter()
            .find(|s| s.name == item.relation)
            .ok_or_else(|| Error::Dataset(format!("unknown relation {}", item.relation)))?;
        item.object_new = Some(new_obj.clone());
        item.target = format!(" {new_obj}.");
        item.portability_probes =
            vec![(render(schema.inverse, &item.subject, &new_obj), format!(" {}.", item.subject))];

        let mut idx: Vec<usize> = (0..probe_pool.len()).collect();
        idx.shuffle(&mut rng);
        item.locality_probes = idx
            .into_iter()
            .take(3)
            .map(|j| (probe_pool[j].prompt.clone(), probe_pool[j].target.clone()))
            .collect();
        edits.push(item);
    }
    Ok(edits)
}

#[derive(Serialize, Deserialize)]
struct MetaLine {
    kind: String,
    version: u32,
    seed: u64,
}

/// Writes the dataset as UTF-8 JSON lines: an optional leading metadata
/// record, then one object per item with keys id, prompt, target, rephrases,
/// locality_probes, portability_probes (plus the triple fields).
pub fn save_dataset(dataset: &KnowledgeDataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    let meta = MetaLine { kind: "meta".into(), version: 1, seed: dataset.seed };
    out.push_str(&serde_json::to_string(&meta).expect("meta serializes"));
    out.push('\n');
    for item in &dataset.items {
        out.push_str(&serde_json::to_string(item).expect("item serializes"));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<KnowledgeDataset> {
    let text = std::fs::read_to_string(path)?;
    load_dataset_from_str(&text)
}

/// Parses JSON-lines dataset text. The metadata line is optional; the corpus
/// text is rebuilt deterministically from the items.
pub fn load_dataset_from_str(text: &str) -> Result<KnowledgeDataset> {
    let mut items: Vec<KnowledgeItem> = Vec::new();
    let mut seed = 0u64;
    let mut ids = BTreeSet::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if lineno == 0 {
            if let Ok(meta) = serde_json::from_str::<MetaLine>(line) {
                if meta.kind == "meta" {
                    if meta.version != 1 {
                        return Err(Error::Dataset(format!(
                            "line 1: unsupported dataset version {}",
                            meta.version
                        )));
                    }
                    seed = meta.seed;
                    continue;
                }
            }
        }
        let item: KnowledgeItem = serde_json::from_str(line).map_err(|e| {
            Error::Dataset(format!("line {}: malformed record: {e}", lineno + 1))
        })?;
        if !ids.insert(item.id.clone()) {
            return Err(Error::Dataset(format!(
                "line {}: duplicate item id {}",
                lineno + 1,
                item.id
            )));
        }
        items.push(item);
    }
    let corpus_text = corpus_text_of(&items);
    Ok(KnowledgeDataset { items, corpus_text, seed })
}
