//! In-memory triple store with a conjunctive SELECT/ASK/COUNT executor.
//!
//! The store is the execution target for answer accuracy: generated and gold
//! queries are both run against it and their answer sets compared. It also
//! backs the satisfiability filter of the OOV set generator.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use thiserror::Error;

use crate::vocab::is_kb_element;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum KbError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("query parse error: {0}")]
    QueryParse(String),
    #[error("query error: {0}")]
    Query(String),
    #[error("unrecognized prefix in `{0}`")]
    UnknownPrefix(String),
    #[error("empty label for `{0}`")]
    EmptyLabel(String),
}

pub type Result<T> = std::result::Result<T, KbError>;

/// A subject, property or object value. Objects may be quoted literals;
/// subjects and properties are always prefixed URIs.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Term {
    Uri(String),
    Literal(String),
}

impl std::fmt::Display for Term {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Term::Uri(u) => write!(f, "{u}"),
            Term::Literal(l) => write!(f, "\"{l}\""),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Triple {
    pub subject: String,
    pub property: String,
    pub object: Term,
}

/// Immutable after load; executing queries never mutates the store.
#[derive(Debug, Clone, Default)]
pub struct KnowledgeBase {
    triples: Vec<Triple>,
    labels: HashMap<String, String>,
    by_sp: HashMap<(String, String), Vec<usize>>,
    by_po: HashMap<(String, Term), Vec<usize>>,
    by_so: HashMap<(String, Term), Vec<usize>>,
}

impl KnowledgeBase {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses a line-oriented triple file: `subject property object` per line,
    /// whitespace-separated, object literals double-quoted, `#` starts a
    /// comment. Exact duplicate triples are kept once.
    pub fn load_triples(source: &str) -> Result<Self> {
        let mut kb = Self::new();
        let mut seen: HashSet<Triple> = HashSet::new();
        for (idx, raw) in source.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let toks = tokenize(line).map_err(|msg| KbError::Parse { line: line_no, msg })?;
            if toks.len() != 3 {
                return Err(KbError::Parse {
                    line: line_no,
                    msg: format!("expected 3 terms, found {}", toks.len()),
                });
            }
            let subject = match parse_term(&toks[0]) {
                Ok(Term::Uri(u)) => u,
                Ok(other) => {
                    return Err(KbError::Parse {
                        line: line_no,
                        msg: format!("subject must be a prefixed URI, found {other}"),
                    })
                }
                Err(e) => return Err(KbError::Parse { line: line_no, msg: e.to_string() }),
            };
            let property = match parse_term(&toks[1]) {
                Ok(Term::Uri(u)) => u,
                Ok(other) => {
                    return Err(KbError::Parse {
                        line: line_no,
                        msg: format!("property must be a prefixed URI, found {other}"),
                    })
                }
                Err(e) => return Err(KbError::Parse { line: line_no, msg: e.to_string() }),
            };
            let object = parse_term(&toks[2])
                .map_err(|e| KbError::Parse { line: line_no, msg: e.to_string() })?;
            let triple = Triple { subject, property, object };
            if seen.insert(triple.clone()) {
                kb.push_triple(triple);
            }
        }
        Ok(kb)
    }

    fn push_triple(&mut self, triple: Triple) {
        let i = self.triples.len();
        self.by_sp
            .entry((triple.subject.clone(), triple.property.clone()))
            .or_default()
            .push(i);
        self.by_po
            .entry((triple.property.clone(), triple.object.clone()))
            .or_default()
            .push(i);
        self.by_so
            .entry((triple.subject.clone(), triple.object.clone()))
            .or_default()
            .push(i);
        self.triples.push(triple);
    }

    pub fn add_triple(&mut self, triple: Triple) {
        if !self.triples.contains(&triple) {
            self.push_triple(triple);
        }
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    /// Stores a natural-language label for a URI. Empty labels are rejected.
    pub fn set_label(&mut self, uri: &str, label: &str) -> Result<()> {
        if !is_kb_element(uri) {
            return Err(KbError::UnknownPrefix(uri.to_string()));
        }
        if label.trim().is_empty() {
            return Err(KbError::EmptyLabel(uri.to_string()));
        }
        self.labels.insert(uri.to_string(), label.trim().to_string());
        Ok(())
    }

    /// Returns the stored label, or generates one from the URI by stripping
    /// the prefix, replacing underscores with spaces, splitting camel case
    /// and lowercasing.
    pub fn label_of(&self, uri: &str) -> Result<String> {
        if !is_kb_element(uri) {
            let prefix = uri.split(':').next().unwrap_or(uri);
            return Err(KbError::UnknownPrefix(prefix.to_string()));
        }
        if let Some(label) = self.labels.get(uri) {
            return Ok(label.clone());
        }
        let local = &uri[uri.find(':').expect("prefixed uri") + 1..];
        Ok(generate_label(local))
    }
}

fn generate_label(local: &str) -> String {
    let mut out = String::with_capacity(local.len() + 8);
    let mut prev: Option<char> = None;
    for c in local.chars() {
        if c == '_' {
            out.push(' ');
            prev = Some(' ');
            continue;
        }
        if c.is_uppercase() {
            if let Some(p) = prev {
                if p.is_lowercase() || p.is_ascii_digit() {
                    out.push(' ');
                }
            }
        }
        out.extend(c.to_lowercase());
        prev = Some(c);
    }
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn parse_term(tok: &str) -> Result<Term> {
    if tok.starts_with('"') {
        if tok.len() >= 2 && tok.ends_with('"') {
            return Ok(Term::Literal(tok[1..tok.len() - 1].to_string()));
        }
        return Err(KbError::QueryParse(format!("unterminated literal {tok}")));
    }
    if is_kb_element(tok) {
        return Ok(Term::Uri(tok.to_string()));
    }
    let prefix = tok.split(':').next().unwrap_or(tok);
    Err(KbError::UnknownPrefix(prefix.to_string()))
}

/// Whitespace split that keeps double-quoted literals (which may contain
/// spaces) as single tokens and treats `{` / `}` as standalone tokens.
pub(crate) fn tokenize(text: &str) -> std::result::Result<Vec<String>, String> {
    let mut toks = Vec::new();
    let mut chars = text.chars().peekable();
    while let Some(&c) = chars.peek() {
        if c.is_whitespace() {
            chars.next();
        } else if c == '"' {
            chars.next();
            let mut lit = String::from("\"");
            let mut closed = false;
            for ch in chars.by_ref() {
                lit.push(ch);
                if ch == '"' {
                    closed = true;
                    break;
                }
            }
            if !closed {
                return Err("unterminated string literal".to_string());
            }
            toks.push(lit);
        } else if c == '{' || c == '}' {
            chars.next();
            toks.push(c.to_string());
        } else {
            let mut tok = String::new();
            while let Some(&ch) = chars.peek() {
                if ch.is_whitespace() || ch == '{' || ch == '}' || ch == '"' {
                    break;
                }
                tok.push(ch);
                chars.next();
            }
            toks.push(tok);
        }
    }
    Ok(toks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryForm {
    Select,
    Ask,
    Count,
}

/// One position of a triple pattern: a variable or a constant term.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PatternTerm {
    Var(String),
    Uri(String),
    Literal(String),
}

impl PatternTerm {
    fn as_term(&self) -> Option<Term> {
        match self {
            PatternTerm::Var(_) => None,
            PatternTerm::Uri(u) => Some(Term::Uri(u.clone())),
            PatternTerm::Literal(l) => Some(Term::Literal(l.clone())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TriplePattern {
    pub subject: PatternTerm,
    pub property: PatternTerm,
    pub object: PatternTerm,
}

impl TriplePattern {
    fn positions(&self) -> [&PatternTerm; 3] {
        [&self.subject, &self.property, &self.object]
    }
}

/// Conjunctive query over the SELECT/ASK/COUNT subset. Every projected
/// variable must occur in at least one pattern and patterns are non-empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparqlQuery {
    pub form: QueryForm,
    pub projection: Vec<String>,
    pub patterns: Vec<TriplePattern>,
}

impl SparqlQuery {
    /// Parses executable SPARQL text in the subset grammar, e.g.
    /// `select ?a where { dbr:Villa_La_Mauresque dbo:abstract ?a }`.
    pub fn parse(text: &str) -> Result<Self> {
        let toks = tokenize(text).map_err(KbError::QueryParse)?;
        let mut pos = 0;
        let next = |pos: &mut usize| -> Result<String> {
            let t = toks
                .get(*pos)
                .ok_or_else(|| KbError::QueryParse("unexpected end of query".to_string()))?;
            *pos += 1;
            Ok(t.clone())
        };

        let head = next(&mut pos)?.to_lowercase();
        let (form, projection) = match head.as_str() {
            "ask" => (QueryForm::Ask, Vec::new()),
            "select" => {
                let first = next(&mut pos)?;
                let lower = first.to_lowercase();
                if let Some(var) = lower.strip_prefix("count(").and_then(|s| s.strip_suffix(')')) {
                    let name = var.strip_prefix('?').ok_or_else(|| {
                        KbError::QueryParse(format!("count expects a variable, found {var}"))
                    })?;
                    if name.is_empty() {
                        return Err(KbError::QueryParse("empty variable name".to_string()));
                    }
                    (QueryForm::Count, vec![name.to_string()])
                } else {
                    let mut vars = Vec::new();
                    let mut tok = first;
                    loop {
                        if tok.to_lowercase() == "where" {
                            pos -= 1;
                            break;
                        }
                        let name = tok.strip_prefix('?').ok_or_else(|| {
                            KbError::QueryParse(format!("expected variable or `where`, found {tok}"))
                        })?;
                        if name.is_empty() {
                            return Err(KbError::QueryParse("empty variable name".to_string()));
                        }
                        vars.push(name.to_string());
                        tok = next(&mut pos)?;
                    }
                    if vars.is_empty() {
                        return Err(KbError::QueryParse("select with no projection".to_string()));
                    }
                    (QueryForm::Select, vars)
                }
            }
            other => {
                return Err(KbError::QueryParse(format!(
                    "expected select or ask, found {other}"
                )))
            }
        };

        let kw = next(&mut pos)?;
        if kw.to_lowercase() != "where" {
            return Err(KbError::QueryParse(format!("expected `where`, found {kw}")));
        }
        let brace = next(&mut pos)?;
        if brace != "{" {
            return Err(KbError::QueryParse(format!("expected `{{`, found {brace}")));
        }

        let mut patterns = Vec::new();
        let mut group: Vec<PatternTerm> = Vec::new();
        loop {
            let tok = next(&mut pos)?;
            if tok == "}" {
                break;
            }
            if tok == "." {
                flush_group(&mut group, &mut patterns)?;
                continue;
            }
            group.push(parse_pattern_term(&tok)?);
        }
        flush_group(&mut group, &mut patterns)?;
        if pos != toks.len() {
            return Err(KbError::QueryParse(format!(
                "trailing tokens after `}}`: {}",
                toks[pos..].join(" ")
            )));
        }

        let query = SparqlQuery { form, projection, patterns };
        query.validate()?;
        Ok(query)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patterns.is_empty() {
            return Err(KbError::Query("query has no patterns".to_string()));
        }
        let pattern_vars: HashSet<&str> = self
            .patterns
            .iter()
            .flat_map(|p| p.positions())
            .filter_map(|t| match t {
                PatternTerm::Var(v) => Some(v.as_str()),
                _ => None,
            })
            .collect();
        for v in &self.projection {
            if !pattern_vars.contains(v.as_str()) {
                return Err(KbError::Query(format!(
                    "projected variable ?{v} does not appear in any pattern"
                )));
            }
        }
        match self.form {
            QueryForm::Select if self.projection.is_empty() => {
                Err(KbError::Query("select projects no variables".to_string()))
            }
            QueryForm::Count if self.projection.len() != 1 => {
                Err(KbError::Query("count projects exactly one variable".to_string()))
            }
            _ => Ok(()),
        }
    }

    /// Canonical executable text: lowercase keywords, single spaces,
    /// patterns joined with ` . `.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        match self.form {
            QueryForm::Select => {
                out.push_str("select");
                for v in &self.projection {
                    out.push_str(" ?");
                    out.push_str(v);
                }
            }
            QueryForm::Count => {
                out.push_str(&format!("select count(?{})", self.projection[0]));
            }
            QueryForm::Ask => out.push_str("ask"),
        }
        out.push_str(" where { ");
        let pats: Vec<String> = self
            .patterns
            .iter()
            .map(|p| {
                format!(
                    "{} {} {}",
                    pattern_term_text(&p.subject),
                    pattern_term_text(&p.property),
                    pattern_term_text(&p.object)
                )
            })
            .collect();
        out.push_str(&pats.join(" . "));
        out.push_str(" }");
        out
    }
}

fn pattern_term_text(t: &PatternTerm) -> String {
    match t {
        PatternTerm::Var(v) => format!("?{v}"),
        PatternTerm::Uri(u) => u.clone(),
        PatternTerm::Literal(l) => format!("\"{l}\""),
    }
}

fn parse_pattern_term(tok: &str) -> Result<PatternTerm> {
    if let Some(name) = tok.strip_prefix('?') {
        if name.is_empty() {
            return Err(KbError::QueryParse("empty variable name".to_string()));
        }
        return Ok(PatternTerm::Var(name.to_string()));
    }
    match parse_term(tok)? {
        Term::Uri(u) => Ok(PatternTerm::Uri(u)),
        Term::Literal(l) => Ok(PatternTerm::Literal(l)),
    }
}

fn flush_group(group: &mut Vec<PatternTerm>, patterns: &mut Vec<TriplePattern>) -> Result<()> {
    if group.is_empty() {
        return Ok(());
    }
    if group.len() != 3 {
        return Err(KbError::QueryParse(format!(
            "pattern has {} terms, expected 3",
            group.len()
        )));
    }
    let object = group.pop().unwrap();
    let property = group.pop().unwrap();
    let subject = group.pop().unwrap();
    patterns.push(TriplePattern { subject, property, object });
    Ok(())
}

/// Result of executing a query: deduplicated binding rows for SELECT (values
/// in projection order), a boolean for ASK, a row count for COUNT.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AnswerSet {
    Select(BTreeSet<Vec<Term>>),
    Ask(bool),
    Count(usize),
}

impl AnswerSet {
    /// True for an empty SELECT set, a false ASK, or a COUNT of 0.
    pub fn is_empty_answer(&self) -> bool {
        match self {
            AnswerSet::Select(rows) => rows.is_empty(),
            AnswerSet::Ask(b) => !b,
            AnswerSet::Count(n) => *n == 0,
        }
    }
}

/// Standard conjunctive pattern-matching semantics over the store.
pub fn execute(query: &SparqlQuery, kb: &KnowledgeBase) -> Result<AnswerSet> {
    query.validate()?;
    let mut rows: BTreeSet<Vec<Term>> = BTreeSet::new();
    let mut any = false;
    let mut binding: BTreeMap<String, Term> = BTreeMap::new();
    solve(&query.patterns, 0, kb, &mut binding, &mut |b| {
        any = true;
        if !query.projection.is_empty() {
            let row: Vec<Term> = query
                .projection
                .iter()
                .map(|v| b.get(v).expect("validated projection variable").clone())
                .collect();
            rows.insert(row);
        }
    });
    Ok(match query.form {
        QueryForm::Select => AnswerSet::Select(rows),
        QueryForm::Count => AnswerSet::Count(rows.len()),
        QueryForm::Ask => AnswerSet::Ask(any),
    })
}

fn solve(
    patterns: &[TriplePattern],
    i: usize,
    kb: &KnowledgeBase,
    binding: &mut BTreeMap<String, Term>,
    emit: &mut dyn FnMut(&BTreeMap<String, Term>),
) {
    if i == patterns.len() {
        emit(binding);
        return;
    }
    let pat = &patterns[i];
    let resolve = |t: &PatternTerm, binding: &BTreeMap<String, Term>| -> Option<Term> {
        match t {
            PatternTerm::Var(v) => binding.get(v).cloned(),
            other => other.as_term(),
        }
    };
    let s = resolve(&pat.subject, binding);
    let p = resolve(&pat.property, binding);
    let o = resolve(&pat.object, binding);

    // Pick the candidate set from the pair indexes when two positions are
    // already fixed; otherwise scan.
    let candidates: Vec<usize> = match (&s, &p, &o) {
        (Some(Term::Uri(su)), Some(Term::Uri(pu)), _) => kb
            .by_sp
            .get(&(su.clone(), pu.clone()))
            .cloned()
            .unwrap_or_default(),
        (_, Some(Term::Uri(pu)), Some(ot)) => kb
            .by_po
            .get(&(pu.clone(), ot.clone()))
            .cloned()
            .unwrap_or_default(),
        (Some(Term::Uri(su)), _, Some(ot)) => kb
            .by_so
            .get(&(su.clone(), ot.clone()))
            .cloned()
            .unwrap_or_default(),
        _ => (0..kb.triples.len()).collect(),
    };

    for idx in candidates {
        let triple = &kb.triples[idx];
        if let Some(Term::Uri(su)) = &s {
            if *su != triple.subject {
                continue;
            }
        }
        if s.as_ref().is_some_and(|t| matches!(t, Term::Literal(_))) {
            continue;
        }
        if let Some(Term::Uri(pu)) = &p {
            if *pu != triple.property {
                continue;
            }
        }
        if p.as_ref().is_some_and(|t| matches!(t, Term::Literal(_))) {
            continue;
        }
        if let Some(ot) = &o {
            if *ot != triple.object {
                continue;
            }
        }

        let mut added: Vec<String> = Vec::new();
        let mut ok = true;
        for (term, value) in [
            (&pat.subject, Term::Uri(triple.subject.clone())),
            (&pat.property, Term::Uri(triple.property.clone())),
            (&pat.object, triple.object.clone()),
        ] {
            if let PatternTerm::Var(v) = term {
                match binding.get(v) {
                    Some(existing) if *existing != value => {
                        ok = false;
                        break;
                    }
                    Some(_) => {}
                    None => {
                        binding.insert(v.clone(), value);
                        added.push(v.clone());
                    }
                }
            }
        }
        if ok {
            solve(patterns, i + 1, kb, binding, emit);
        }
        for v in added {
            binding.remove(&v);
        }
    }
}
