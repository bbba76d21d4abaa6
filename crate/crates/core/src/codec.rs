//! Bidirectional translation between executable SPARQL and the token-level
//! intermediary form used as the model's target language.
//!
//! SPARQL symbols cannot survive whitespace tokenization, so each one is
//! replaced by a word-like token (`{` → `brack_open`, …) and every URI is
//! shortened to prefixed form and fused into a single token. The mapping is
//! a fixed bijection, so decoding is exact: a generated token sequence maps
//! back to executable text, which is what makes answer accuracy measurable.

use thiserror::Error;

use crate::kb::{self, KbError, PatternTerm, QueryForm, SparqlQuery, TriplePattern};
use crate::vocab::is_kb_element;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum CodecError {
    #[error(transparent)]
    Query(#[from] KbError),
    #[error("unknown intermediary token `{token}` at position {position}")]
    UnknownToken { position: usize, token: String },
    #[error("structure error: {0}")]
    Structure(String),
    #[error("no prefix for namespace of `{0}`")]
    UnknownNamespace(String),
    #[error("cannot fuse `{0}` into a KB token")]
    BadKbParts(String),
    #[error("literal `{0}` contains whitespace and cannot be a single token")]
    LiteralWhitespace(String),
}

pub type Result<T> = std::result::Result<T, CodecError>;

/// SPARQL symbol ↔ intermediary token. Keywords (select/ask/where/count) and
/// variables (`?a` ↔ `var_a`) are handled structurally; everything else that
/// the query grammar can emit is listed here.
pub const CODEC_TABLE: [(&str, &str); 5] = [
    ("{", "brack_open"),
    ("}", "brack_close"),
    (".", "sep_dot"),
    ("(", "attr_open"),
    (")", "attr_close"),
];

/// Prefix ↔ namespace for the seven recognized KB prefixes.
pub const PREFIX_TABLE: [(&str, &str); 7] = [
    ("dbo:", "http://dbpedia.org/ontology/"),
    ("dbr:", "http://dbpedia.org/resource/"),
    ("dbp:", "http://dbpedia.org/property/"),
    ("dbc:", "http://dbpedia.org/resource/Category:"),
    ("geo:", "http://www.w3.org/2003/01/geo/wgs84_pos#"),
    ("georss:", "http://www.georss.org/georss/"),
    ("dct:", "http://purl.org/dc/terms/"),
];

fn symbol_to_token(symbol: &str) -> Option<&'static str> {
    CODEC_TABLE.iter().find(|(s, _)| *s == symbol).map(|(_, t)| *t)
}


/// Replaces a full URI by its prefixed form, matching the longest namespace
/// first (so `…/resource/Category:X` becomes `dbc:X`, not `dbr:Category:X`).
/// Surrounding angle brackets are accepted and dropped.
pub fn shorten_uri(full: &str) -> Result<String> {
    let bare = full.strip_prefix('<').and_then(|s| s.strip_suffix('>')).unwrap_or(full);
    let mut table: Vec<&(&str, &str)> = PREFIX_TABLE.iter().collect();
    table.sort_by_key(|(_, ns)| std::cmp::Reverse(ns.len()));
    for (prefix, ns) in table {
        if let Some(local) = bare.strip_prefix(ns) {
            return Ok(format!("{prefix}{local}"));
        }
    }
    Err(CodecError::UnknownNamespace(bare.to_string()))
}

/// Inverse of [`shorten_uri`] over the fixed prefix table.
pub fn expand_uri(prefixed: &str) -> Result<String> {
    for (prefix, ns) in PREFIX_TABLE {
        if let Some(local) = prefixed.strip_prefix(prefix) {
            return Ok(format!("{ns}{local}"));
        }
    }
    Err(CodecError::UnknownNamespace(prefixed.to_string()))
}

/// Collapses a URI that a tokenizer split at its parenthesized qualifier back
/// into one token: `[dbr:Cenotaph_, attr_open, Montreal, attr_close]` →
/// `dbr:Cenotaph_(Montreal)`. Already-fused single tokens pass through.
pub fn fuse_kb_token(parts: &[String]) -> Result<String> {
    let stem = parts
        .first()
        .ok_or_else(|| CodecError::BadKbParts("empty part list".to_string()))?;
    if !is_kb_element(stem) {
        return Err(CodecError::BadKbParts(stem.clone()));
    }
    if parts.len() == 1 {
        return Ok(stem.clone());
    }
    if parts.len() < 3 || parts[1] != "attr_open" || parts[parts.len() - 1] != "attr_close" {
        return Err(CodecError::BadKbParts(parts.join(" ")));
    }
    let inner = parts[2..parts.len() - 1].join("_");
    let fused = format!("{stem}({inner})");
    if fused.contains(char::is_whitespace) {
        return Err(CodecError::BadKbParts(fused));
    }
    Ok(fused)
}

/// Encodes executable SPARQL text into the intermediary token sequence.
/// Absolute URIs are shortened to prefixed form on the way in.
pub fn to_intermediary(query: &str) -> Result<Vec<String>> {
    let raw = kb::tokenize(query).map_err(KbError::QueryParse)?;
    let mut prepared = Vec::with_capacity(raw.len());
    for tok in raw {
        if tok.starts_with("http://") || tok.starts_with("<http://") {
            prepared.push(shorten_uri(&tok)?);
        } else {
            prepared.push(tok);
        }
    }
    let parsed = SparqlQuery::parse(&prepared.join(" "))?;
    encode_query(&parsed)
}

/// Structural form of [`to_intermediary`] for already-parsed queries.
pub fn encode_query(query: &SparqlQuery) -> Result<Vec<String>> {
    query.validate()?;
    let mut out: Vec<String> = Vec::new();
    match query.form {
        QueryForm::Select => {
            out.push("select".to_string());
            for v in &query.projection {
                out.push(format!("var_{v}"));
            }
        }
        QueryForm::Count => {
            out.push("select".to_string());
            out.push("count".to_string());
            out.push(symbol_to_token("(").unwrap().to_string());
            out.push(format!("var_{}", query.projection[0]));
            out.push(symbol_to_token(")").unwrap().to_string());
        }
        QueryForm::Ask => out.push("ask".to_string()),
    }
    out.push("where".to_string());
    out.push(symbol_to_token("{").unwrap().to_string());
    for (i, pat) in query.patterns.iter().enumerate() {
        if i > 0 {
            out.push(symbol_to_token(".").unwrap().to_string());
        }
        for term in [&pat.subject, &pat.property, &pat.object] {
            out.push(encode_term(term)?);
        }
    }
    out.push(symbol_to_token("}").unwrap().to_string());
    Ok(out)
}

fn encode_term(term: &PatternTerm) -> Result<String> {
    match term {
        PatternTerm::Var(v) => Ok(format!("var_{v}")),
        PatternTerm::Uri(u) => Ok(u.clone()),
        PatternTerm::Literal(l) => {
            if l.contains(char::is_whitespace) {
                Err(CodecError::LiteralWhitespace(l.clone()))
            } else {
                Ok(format!("\"{l}\""))
            }
        }
    }
}

/// Decodes an intermediary token sequence back to canonical executable
/// SPARQL text. Split KB tokens are fused first; the result is guaranteed to
/// parse under the query grammar.
pub fn from_intermediary<S: AsRef<str>>(tokens: &[S]) -> Result<String> {
    let fused = fuse_stream(tokens)?;
    let query = parse_intermediary(&fused)?;
    Ok(query.to_text())
}

/// Fuses `stem attr_open … attr_close` runs that follow a KB token. The
/// count head keeps its `attr_*` tokens because `count` is not a KB element.
fn fuse_stream<S: AsRef<str>>(tokens: &[S]) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(tokens.len());
    let mut i = 0;
    while i < tokens.len() {
        let tok = tokens[i].as_ref();
        if is_kb_element(tok) && i + 1 < tokens.len() && tokens[i + 1].as_ref() == "attr_open" {
            let close = tokens[i + 1..]
                .iter()
                .position(|t| t.as_ref() == "attr_close")
                .map(|p| i + 1 + p)
                .ok_or_else(|| {
                    CodecError::Structure(format!("`attr_open` after `{tok}` is never closed"))
                })?;
            let parts: Vec<String> =
                tokens[i..=close].iter().map(|t| t.as_ref().to_string()).collect();
            out.push(fuse_kb_token(&parts)?);
            i = close + 1;
        } else {
            out.push(tok.to_string());
            i += 1;
        }
    }
    Ok(out)
}

fn parse_intermediary(tokens: &[String]) -> Result<SparqlQuery> {
    let mut pos = 0;
    let next = |pos: &mut usize| -> Result<&str> {
        let t = tokens.get(*pos).ok_or_else(|| {
            CodecError::Structure("unexpected end of token sequence".to_string())
        })?;
        *pos += 1;
        Ok(t.as_str())
    };
    let expect = |pos: &mut usize, want: &str| -> Result<()> {
        let at = *pos;
        let got = next(pos)?;
        if got == want {
            Ok(())
        } else {
            Err(CodecError::UnknownToken { position: at, token: got.to_string() })
        }
    };

    let head = next(&mut pos)?;
    let (form, projection) = match head {
        "ask" => (QueryForm::Ask, Vec::new()),
        "select" => {
            let at = pos;
            let tok = next(&mut pos)?;
            if tok == "count" {
                expect(&mut pos, "attr_open")?;
                let var_at = pos;
                let var = next(&mut pos)?;
                let name = var.strip_prefix("var_").ok_or_else(|| CodecError::UnknownToken {
                    position: var_at,
                    token: var.to_string(),
                })?;
                expect(&mut pos, "attr_close")?;
                (QueryForm::Count, vec![name.to_string()])
            } else {
                let mut vars = Vec::new();
                let mut at = at;
                let mut tok = tok;
                loop {
                    if tok == "where" {
                        pos -= 1;
                        break;
                    }
                    let name = tok.strip_prefix("var_").ok_or_else(|| {
                        CodecError::UnknownToken { position: at, token: tok.to_string() }
                    })?;
                    if name.is_empty() {
                        return Err(CodecError::UnknownToken {
                            position: at,
                            token: tok.to_string(),
                        });
                    }
                    vars.push(name.to_string());
                    at = pos;
                    tok = next(&mut pos)?;
                }
                (QueryForm::Select, vars)
            }
        }
        other => {
            return Err(CodecError::UnknownToken { position: 0, token: other.to_string() })
        }
    };

    expect(&mut pos, "where")?;
    expect(&mut pos, "brack_open")?;

    let mut patterns = Vec::new();
    let mut group: Vec<PatternTerm> = Vec::new();
    loop {
        if pos == tokens.len() {
            return Err(CodecError::Structure(
                "`brack_open` with no matching `brack_close`".to_string(),
            ));
        }
        let at = pos;
        let tok = next(&mut pos)?;
        match tok {
            "brack_close" => break,
            "sep_dot" => {
                flush(&mut group, &mut patterns)?;
            }
            _ => group.push(parse_term_token(tok, at)?),
        }
    }
    flush(&mut group, &mut patterns)?;
    if pos != tokens.len() {
        return Err(CodecError::UnknownToken {
            position: pos,
            token: tokens[pos].clone(),
        });
    }

    let query = SparqlQuery { form, projection, patterns };
    query.validate()?;
    Ok(query)
}

fn parse_term_token(tok: &str, position: usize) -> Result<PatternTerm> {
    if let Some(name) = tok.strip_prefix("var_") {
        if name.is_empty() {
            return Err(CodecError::UnknownToken { position, token: tok.to_string() });
        }
        return Ok(PatternTerm::Var(name.to_string()));
    }
    if is_kb_element(tok) {
        return Ok(PatternTerm::Uri(tok.to_string()));
    }
    if let Some(inner) = tok.strip_prefix('"').and_then(|s| s.strip_suffix('"')) {
        return Ok(PatternTerm::Literal(inner.to_string()));
    }
    Err(CodecError::UnknownToken { position, token: tok.to_string() })
}

fn flush(group: &mut Vec<PatternTerm>, patterns: &mut Vec<TriplePattern>) -> Result<()> {
    if group.is_empty() {
        return Ok(());
    }
    if group.len() != 3 {
        return Err(CodecError::Structure(format!(
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
