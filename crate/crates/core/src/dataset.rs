//! Template-driven corpus generation.
//!
//! A template pairs a natural-language question pattern with a SPARQL
//! pattern, both holding the same typed placeholders (`<resource_1>`,
//! `<property_2>`, `<class_1>`). Instantiating a template with concrete URIs
//! yields a dataset entry carrying four aligned views of the same item: the
//! plain question (labels inline), the tagged question (URIs inline), the
//! executable query, and its intermediary token form.
//!
//! The module also owns the split logic and the out-of-vocabulary set
//! builder, which samples bindings from connected KB triples so the
//! resulting queries are satisfiable rather than merely well-formed.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::codec::{self, CodecError};
use crate::kb::{execute, KbError, KnowledgeBase, SparqlQuery, Term};
use crate::vocab::is_kb_element;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum DatasetError {
    #[error("template `{template}`: placeholder `{placeholder}` has no recognised type")]
    BadPlaceholder { template: String, placeholder: String },
    #[error("template `{template}`: question and query placeholders differ ({question:?} vs {query:?})")]
    PlaceholderMismatch { template: String, question: Vec<String>, query: Vec<String> },
    #[error("no binding for placeholder `{0}`")]
    MissingBinding(String),
    #[error("placeholder `{placeholder}` expects a {expected} URI, got `{uri}`")]
    TypeMismatch { placeholder: String, expected: &'static str, uri: String },
    #[error("tagging failed: label `{0}` not found where expected")]
    Tagging(String),
    #[error("split fractions {0}, {1}, {2} do not sum to 1")]
    BadFractions(f64, f64, f64),
    #[error("need at least 10 entries to split, got {0}")]
    TooFewEntries(usize),
    #[error("no unseen {0} URIs available in the knowledge base")]
    ExhaustedPool(&'static str),
    #[error("line {line}: expected {expected} tab-separated fields, got {got}")]
    BadRecord { line: usize, expected: usize, got: usize },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Kb(#[from] KbError),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlaceholderKind {
    Resource,
    Property,
    Class,
}

impl PlaceholderKind {
    fn of(name: &str) -> Option<PlaceholderKind> {
        let head = name.split('_').next().unwrap_or(name);
        match head {
            "resource" => Some(PlaceholderKind::Resource),
            "property" => Some(PlaceholderKind::Property),
            "class" | "domain" => Some(PlaceholderKind::Class),
            _ => None,
        }
    }

    fn expected(&self) -> &'static str {
        match self {
            PlaceholderKind::Resource => "resource (dbr:)",
            PlaceholderKind::Property => "property (dbo:/dbp:/geo:/georss:/dct:)",
            PlaceholderKind::Class => "class (dbo:/dbc:)",
        }
    }

    fn admits(&self, uri: &str) -> bool {
        match self {
            PlaceholderKind::Resource => uri.starts_with("dbr:"),
            PlaceholderKind::Property => {
                ["dbo:", "dbp:", "geo:", "georss:", "dct:"].iter().any(|p| uri.starts_with(p))
            }
            PlaceholderKind::Class => uri.starts_with("dbo:") || uri.starts_with("dbc:"),
        }
    }
}

impl fmt::Display for PlaceholderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlaceholderKind::Resource => write!(f, "resource"),
            PlaceholderKind::Property => write!(f, "property"),
            PlaceholderKind::Class => write!(f, "class"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Placeholder {
    pub name: String,
    pub kind: PlaceholderKind,
}

/// A question/query pattern pair sharing one set of typed placeholders.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub id: String,
    pub question_pattern: String,
    pub query_pattern: String,
    placeholders: Vec<Placeholder>,
}

fn placeholder_name(token: &str) -> Option<&str> {
    token.strip_prefix('<').and_then(|t| t.strip_suffix('>'))
}

impl Template {
    pub fn new(id: &str, question_pattern: &str, query_pattern: &str) -> Result<Template> {
        let mut placeholders: Vec<Placeholder> = Vec::new();
        for token in question_pattern.split_whitespace() {
            if let Some(name) = placeholder_name(token) {
                let kind =
                    PlaceholderKind::of(name).ok_or_else(|| DatasetError::BadPlaceholder {
                        template: id.to_string(),
                        placeholder: name.to_string(),
                    })?;
                if !placeholders.iter().any(|p| p.name == name) {
                    placeholders.push(Placeholder { name: name.to_string(), kind });
                }
            }
        }
        let mut in_query: Vec<String> = Vec::new();
        for token in query_pattern.split_whitespace() {
            if let Some(name) = placeholder_name(token) {
                if PlaceholderKind::of(name).is_none() {
                    return Err(DatasetError::BadPlaceholder {
                        template: id.to_string(),
                        placeholder: name.to_string(),
                    });
                }
                if !in_query.contains(&name.to_string()) {
                    in_query.push(name.to_string());
                }
            }
        }
        let mut in_question: Vec<String> =
            placeholders.iter().map(|p| p.name.clone()).collect();
        let mut query_sorted = in_query.clone();
        in_question.sort();
        query_sorted.sort();
        if in_question != query_sorted {
            return Err(DatasetError::PlaceholderMismatch {
                template: id.to_string(),
                question: in_question,
                query: query_sorted,
            });
        }
        Ok(Template {
            id: id.to_string(),
            question_pattern: question_pattern.to_string(),
            query_pattern: query_pattern.to_string(),
            placeholders,
        })
    }

    pub fn placeholders(&self) -> &[Placeholder] {
        &self.placeholders
    }
}

/// One corpus item in all four aligned views.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub question: Vec<String>,
    pub tagged_question: Vec<String>,
    pub query: String,
    pub intermediary_query: Vec<String>,
    pub template_id: String,
    /// Placeholder → URI, in template placeholder order. Empty for entries
    /// read back from disk (the file format does not store bindings).
    pub bindings: Vec<(String, String)>,
    /// Set by the OOV builder when the entry's query returns an empty answer.
    pub empty_answer: bool,
}

fn lookup<'a>(bindings: &'a [(String, String)], name: &str) -> Option<&'a str> {
    bindings.iter().find(|(n, _)| n == name).map(|(_, u)| u.as_str())
}

/// Fills a template with URIs: labels into the question, URIs into the query
/// and tagged question. Every placeholder must be bound with a URI of its
/// declared type.
pub fn instantiate(
    template: &Template,
    bindings: &[(String, String)],
    kb: &KnowledgeBase,
) -> Result<DatasetEntry> {
    for p in &template.placeholders {
        let uri = lookup(bindings, &p.name).ok_or_else(|| {
            DatasetError::MissingBinding(p.name.clone())
        })?;
        if !p.kind.admits(uri) {
            return Err(DatasetError::TypeMismatch {
                placeholder: p.name.clone(),
                expected: p.kind.expected(),
                uri: uri.to_string(),
            });
        }
    }

    let mut question: Vec<String> = Vec::new();
    for token in template.question_pattern.split_whitespace() {
        match placeholder_name(token) {
            Some(name) => {
                let uri = lookup(bindings, name).expect("checked above");
                let label = kb.label_of(uri)?;
                question.extend(label.split_whitespace().map(str::to_string));
            }
            None => question.push(token.to_string()),
        }
    }
    let tagged_question = tag(&question, template, bindings, kb)?;

    let query_text: String = template
        .query_pattern
        .split_whitespace()
        .map(|token| match placeholder_name(token) {
            Some(name) => lookup(bindings, name).expect("checked above"),
            None => token,
        })
        .collect::<Vec<_>>()
        .join(" ");
    let parsed = SparqlQuery::parse(&query_text)?;
    parsed.validate()?;
    let query = parsed.to_text();
    let intermediary_query = codec::to_intermediary(&query)?;

    let ordered: Vec<(String, String)> = template
        .placeholders
        .iter()
        .map(|p| (p.name.clone(), lookup(bindings, &p.name).expect("checked above").to_string()))
        .collect();

    Ok(DatasetEntry {
        question,
        tagged_question,
        query,
        intermediary_query,
        template_id: template.id.clone(),
        bindings: ordered,
        empty_answer: false,
    })
}

/// Replaces each label span in a question with its URI token. Positions come
/// straight from the template, so no searching is involved; a mismatch means
/// the question was not produced from these bindings.
pub fn tag(
    question: &[String],
    template: &Template,
    bindings: &[(String, String)],
    kb: &KnowledgeBase,
) -> Result<Vec<String>> {
    let mut tagged: Vec<String> = Vec::new();
    let mut pos = 0usize;
    for token in template.question_pattern.split_whitespace() {
        match placeholder_name(token) {
            Some(name) => {
                let uri = lookup(bindings, name)
                    .ok_or_else(|| DatasetError::MissingBinding(name.to_string()))?;
                let label = kb.label_of(uri)?;
                let words: Vec<&str> = label.split_whitespace().collect();
                let span = question.get(pos..pos + words.len());
                let matches = span
                    .map(|s| s.iter().zip(&words).all(|(a, b)| a.eq_ignore_ascii_case(b)))
                    .unwrap_or(false);
                if !matches {
                    return Err(DatasetError::Tagging(label));
                }
                tagged.push(uri.to_string());
                pos += words.len();
            }
            None => {
                if question.get(pos).map(String::as_str) != Some(token) {
                    return Err(DatasetError::Tagging(token.to_string()));
                }
                tagged.push(token.to_string());
                pos += 1;
            }
        }
    }
    if pos != question.len() {
        return Err(DatasetError::Tagging(format!(
            "{} trailing tokens",
            question.len() - pos
        )));
    }
    Ok(tagged)
}

/// Every KB element a set of entries refers to: bound URIs plus all prefixed
/// tokens of the intermediary queries.
pub fn collect_kb_elements(entries: &[DatasetEntry]) -> BTreeSet<String> {
    let mut set = BTreeSet::new();
    for entry in entries {
        for (_, uri) in &entry.bindings {
            set.insert(uri.clone());
        }
        for token in &entry.intermediary_query {
            if is_kb_element(token) {
                set.insert(token.clone());
            }
        }
        for token in &entry.tagged_question {
            if is_kb_element(token) {
                set.insert(token.clone());
            }
        }
    }
    set
}

/// Fraction of `test`'s KB elements that also occur in `train`.
pub fn intersection_rate(train: &[DatasetEntry], test: &[DatasetEntry]) -> f64 {
    let train_set = collect_kb_elements(train);
    let test_set = collect_kb_elements(test);
    if test_set.is_empty() {
        return 0.0;
    }
    let shared = test_set.iter().filter(|u| train_set.contains(*u)).count();
    shared as f64 / test_set.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train: 0.8, valid: 0.1, test: 0.1, seed: 0 }
    }
}

fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// Seed-deterministic partition into train/valid/test, sizes within one of
/// the requested fractions.
pub fn split(
    entries: &[DatasetEntry],
    spec: &SplitSpec,
) -> Result<(Vec<DatasetEntry>, Vec<DatasetEntry>, Vec<DatasetEntry>)> {
    if (spec.train + spec.valid + spec.test - 1.0).abs() > 1e-9
        || spec.train < 0.0
        || spec.valid < 0.0
        || spec.test < 0.0
    {
        return Err(DatasetError::BadFractions(spec.train, spec.valid, spec.test));
    }
    if entries.len() < 10 {
        return Err(DatasetError::TooFewEntries(entries.len()));
    }
    let n = entries.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    shuffle(&mut order, &mut rng);
    let n_train = ((n as f64) * spec.train).round() as usize;
    let n_valid = (((n as f64) * spec.valid).round() as usize).min(n - n_train);
    let take = |r: std::ops::Range<usize>| r.map(|i| entries[order[i]].clone()).collect();
    Ok((
        take(0..n_train),
        take(n_train..n_train + n_valid),
        take(n_train + n_valid..n),
    ))
}

// ---- binding sampling -------------------------------------------------------

/// One slot of a query pattern as seen by the sampler.
enum Slot {
    Fixed(Term),
    Var(String),
    Free(Placeholder),
}

/// Parses the query pattern into (subject, property, object) slot triples,
/// resolving placeholders via the template's declarations.
fn pattern_slots(template: &Template) -> Vec<[SlotSpec; 3]> {
    let tokens: Vec<&str> = template.query_pattern.split_whitespace().collect();
    let open = tokens.iter().position(|t| *t == "{");
    let close = tokens.iter().rposition(|t| *t == "}");
    let (Some(open), Some(close)) = (open, close) else { return Vec::new() };
    let inner = &tokens[open + 1..close];
    inner
        .split(|t| *t == ".")
        .filter(|group| !group.is_empty())
        .filter_map(|group| {
            if group.len() != 3 {
                return None;
            }
            let spec = |tok: &str| -> SlotSpec {
                if let Some(v) = tok.strip_prefix('?') {
                    SlotSpec::Var(v.to_string())
                } else if let Some(name) = placeholder_name(tok) {
                    let kind = PlaceholderKind::of(name).expect("validated at Template::new");
                    SlotSpec::Placeholder(Placeholder { name: name.to_string(), kind })
                } else {
                    SlotSpec::Uri(tok.to_string())
                }
            };
            Some([spec(group[0]), spec(group[1]), spec(group[2])])
        })
        .collect()
}

#[derive(Clone)]
enum SlotSpec {
    Var(String),
    Placeholder(Placeholder),
    Uri(String),
}

/// Samples a total binding for `template` by walking its patterns and picking
/// KB triples consistent with what is already bound. Variables are pinned to
/// the first triple that covers them, so multi-pattern joins come out
/// satisfied by construction most of the time. Returns `None` when the KB
/// offers no consistent triple under `allowed`.
fn sample_bindings(
    template: &Template,
    kb: &KnowledgeBase,
    allowed: &dyn Fn(&str) -> bool,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<(String, String)>> {
    let mut bindings: Vec<(String, String)> = Vec::new();
    let mut var_hints: HashMap<String, Term> = HashMap::new();

    for pattern in pattern_slots(template) {
        let resolve = |spec: &SlotSpec,
                       bindings: &[(String, String)],
                       hints: &HashMap<String, Term>| match spec {
            SlotSpec::Uri(u) => Slot::Fixed(Term::Uri(u.clone())),
            SlotSpec::Var(v) => match hints.get(v) {
                Some(t) => Slot::Fixed(t.clone()),
                None => Slot::Var(v.clone()),
            },
            SlotSpec::Placeholder(p) => match lookup(bindings, &p.name) {
                Some(u) => Slot::Fixed(Term::Uri(u.to_string())),
                None => Slot::Free(p.clone()),
            },
        };
        let slots = [
            resolve(&pattern[0], &bindings, &var_hints),
            resolve(&pattern[1], &bindings, &var_hints),
            resolve(&pattern[2], &bindings, &var_hints),
        ];

        // URI positions (subject, property) compare without cloning; the
        // object position must also admit literals for fixed/var slots.
        let fits_uri = |slot: &Slot, uri: &str| -> bool {
            match slot {
                Slot::Fixed(Term::Uri(u)) => u == uri,
                Slot::Fixed(Term::Literal(_)) => false,
                Slot::Var(_) => true,
                Slot::Free(p) => p.kind.admits(uri) && allowed(uri),
            }
        };
        let fits_object = |slot: &Slot, term: &Term| -> bool {
            match slot {
                Slot::Fixed(t) => t == term,
                Slot::Var(_) => true,
                Slot::Free(p) => match term {
                    Term::Uri(u) => p.kind.admits(u) && allowed(u),
                    Term::Literal(_) => false,
                },
            }
        };

        let candidates: Vec<usize> = kb
            .triples()
            .iter()
            .enumerate()
            .filter(|(_, t)| {
                fits_uri(&slots[0], &t.subject)
                    && fits_uri(&slots[1], &t.property)
                    && fits_object(&slots[2], &t.object)
            })
            .map(|(i, _)| i)
            .collect();
        if candidates.is_empty() {
            return None;
        }
        let t = &kb.triples()[candidates[rng.gen_range(0..candidates.len())]];
        let terms = [
            Term::Uri(t.subject.clone()),
            Term::Uri(t.property.clone()),
            t.object.clone(),
        ];
        for (slot, term) in slots.iter().zip(&terms) {
            match slot {
                Slot::Free(p) => {
                    let Term::Uri(u) = term else { return None };
                    // Reject a sample reusing a URI for a second placeholder:
                    // "is X the spouse of X" is legal but useless.
                    if bindings.iter().any(|(_, b)| b == u) {
                        return None;
                    }
                    bindings.push((p.name.clone(), u.clone()));
                }
                Slot::Var(v) => {
                    var_hints.insert(v.clone(), term.clone());
                }
                Slot::Fixed(_) => {}
            }
        }
    }

    if template.placeholders.iter().all(|p| lookup(&bindings, &p.name).is_some()) {
        Some(bindings)
    } else {
        None
    }
}

/// Outcome of corpus sampling: the entries plus how many of the requested
/// count could not be produced within the attempt budget.
#[derive(Debug, Clone)]
pub struct SampledCorpus {
    pub entries: Vec<DatasetEntry>,
    pub shortfall: usize,
}

/// Draws up to `n` distinct entries by rotating through the templates,
/// preferring bindings whose query returns a non-empty answer; empty-answer
/// entries (flagged) fill the remainder only when needed.
pub fn sample_corpus(
    templates: &[Template],
    kb: &KnowledgeBase,
    allowed: &dyn Fn(&str) -> bool,
    n: usize,
    attempts_cap: usize,
    seed: u64,
) -> Result<SampledCorpus> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut non_empty: Vec<DatasetEntry> = Vec::new();
    let mut empty: Vec<DatasetEntry> = Vec::new();
    let mut used: BTreeSet<(String, Vec<(String, String)>)> = BTreeSet::new();
    let mut attempts = 0usize;
    while non_empty.len() < n && attempts < attempts_cap {
        attempts += 1;
        let template = &templates[rng.gen_range(0..templates.len())];
        let Some(bindings) = sample_bindings(template, kb, allowed, &mut rng) else {
            continue;
        };
        if !used.insert((template.id.clone(), bindings.clone())) {
            continue;
        }
        let mut entry = instantiate(template, &bindings, kb)?;
        let answer = execute(&SparqlQuery::parse(&entry.query)?, kb)?;
        entry.empty_answer = answer.is_empty_answer();
        if entry.empty_answer {
            empty.push(entry);
        } else {
            non_empty.push(entry);
        }
    }
    let mut entries = non_empty;
    while entries.len() < n {
        let Some(e) = empty.pop() else { break };
        entries.push(e);
    }
    let shortfall = n.saturating_sub(entries.len());
    Ok(SampledCorpus { entries, shortfall })
}

/// Builds the out-of-vocabulary test set: entries whose every bound URI is
/// absent from `seen`. Non-empty answers are preferred; the rest are flagged.
pub fn generate_oov_set(
    templates: &[Template],
    seen: &BTreeSet<String>,
    kb: &KnowledgeBase,
    n: usize,
    attempts_cap: usize,
    seed: u64,
) -> Result<SampledCorpus> {
    for kind in [PlaceholderKind::Resource, PlaceholderKind::Property, PlaceholderKind::Class] {
        let available = kb.triples().iter().any(|t| {
            let mut uris = vec![t.subject.as_str(), t.property.as_str()];
            if let Term::Uri(u) = &t.object {
                uris.push(u.as_str());
            }
            uris.iter().any(|u| kind.admits(u) && !seen.contains(*u))
        });
        if !available {
            return Err(DatasetError::ExhaustedPool(match kind {
                PlaceholderKind::Resource => "resource",
                PlaceholderKind::Property => "property",
                PlaceholderKind::Class => "class",
            }));
        }
    }
    let allowed = |uri: &str| !seen.contains(uri);
    sample_corpus(templates, kb, &allowed, n, attempts_cap, seed)
}

// ---- file formats -----------------------------------------------------------

/// `id TAB question_pattern TAB query_pattern`, one template per line;
/// `#` lines and blank lines are skipped.
pub fn parse_templates(text: &str) -> Result<Vec<Template>> {
    let mut templates = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(DatasetError::BadRecord { line: i + 1, expected: 3, got: fields.len() });
        }
        templates.push(Template::new(fields[0], fields[1], fields[2])?);
    }
    Ok(templates)
}

pub fn templates_to_text(templates: &[Template]) -> String {
    let mut out = String::new();
    for t in templates {
        out.push_str(&format!("{}\t{}\t{}\n", t.id, t.question_pattern, t.query_pattern));
    }
    out
}

/// `question TAB tagged_question TAB intermediary_query TAB template_id`,
/// token sequences space-joined. Bindings are not stored; entries read back
/// carry the executable query reconstructed from the intermediary form.
pub fn entries_to_text(entries: &[DatasetEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            e.question.join(" "),
            e.tagged_question.join(" "),
            e.intermediary_query.join(" "),
            e.template_id
        ));
    }
    out
}

pub fn parse_entries(text: &str) -> Result<Vec<DatasetEntry>> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\n');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(DatasetError::BadRecord { line: i + 1, expected: 4, got: fields.len() });
        }
        let intermediary: Vec<String> =
            fields[2].split_whitespace().map(str::to_string).collect();
        let query = codec::from_intermediary(&intermediary)?;
        entries.push(DatasetEntry {
            question: fields[0].split_whitespace().map(str::to_string).collect(),
            tagged_question: fields[1].split_whitespace().map(str::to_string).collect(),
            query,
            intermediary_query: intermediary,
            template_id: fields[3].to_string(),
            bindings: Vec::new(),
            empty_answer: false,
        });
    }
    Ok(entries)
}
