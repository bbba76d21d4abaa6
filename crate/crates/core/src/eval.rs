//! Scoring: corpus BLEU over intermediary tokens, answer accuracy via query
//! execution, and the full greedy-decode evaluation loop.
//!
//! BLEU is the unsmoothed corpus BLEU-4: geometric mean of clipped n-gram
//! precisions (n = 1..4) times the brevity penalty, scaled to 0..100. A zero
//! precision at any order zeroes the score — the simplest variant to
//! reproduce independently, which is what the frozen oracle tests do.
//!
//! Answer accuracy counts an entry correct when the generated and gold
//! queries return equal answer sets. Two different queries that both return
//! empty answers therefore count as correct — a known false-positive mode,
//! which is why per-entry records flag empty gold answers and why reports on
//! unseen-element sets suppress accuracy by default.

use std::collections::HashMap;

use thiserror::Error;

use crate::codec;
use crate::dataset::DatasetEntry;
use crate::kb::{execute, KnowledgeBase, SparqlQuery};
use crate::model::{ModelError, TransformerModel};
use crate::vocab::{is_kb_element, VocabError, VocabPair};

#[derive(Error, Debug, Clone, PartialEq)]
pub enum EvalError {
    #[error("candidate and reference counts differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no entries to score")]
    Empty,
    #[error("gold query {index} failed: {message}")]
    BadGold { index: usize, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

// ---- BLEU -------------------------------------------------------------------

fn ngram_counts<'a>(tokens: &'a [String], n: usize) -> HashMap<&'a [String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for i in 0..=tokens.len() - n {
            *counts.entry(&tokens[i..i + n]).or_insert(0) += 1;
        }
    }
    counts
}

/// Unsmoothed corpus BLEU-4 as a percentage.
pub fn bleu(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(EvalError::LengthMismatch(candidates.len(), references.len()));
    }
    if candidates.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let mut matched = 0usize;
        let mut total = 0usize;
        for (cand, reference) in candidates.iter().zip(references) {
            let ref_counts = ngram_counts(reference, n);
            for (gram, count) in ngram_counts(cand, n) {
                matched += count.min(ref_counts.get(gram).copied().unwrap_or(0));
            }
            total += (cand.len() + 1).saturating_sub(n);
        }
        if matched == 0 || total == 0 {
            return Ok(0.0);
        }
        log_sum += (matched as f64 / total as f64).ln();
    }
    let cand_len: usize = candidates.iter().map(Vec::len).sum();
    let ref_len: usize = references.iter().map(Vec::len).sum();
    if cand_len == 0 {
        return Ok(0.0);
    }
    let brevity = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(100.0 * brevity * (log_sum / 4.0).exp())
}

// ---- answer accuracy ----------------------------------------------------------

/// Per-entry accuracy outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccuracyRecord {
    pub correct: bool,
    pub empty_gold_answer: bool,
    pub generated_query_parses: bool,
}

/// Executes generated against gold intermediary queries. Gold queries must
/// decode and execute — a failure there is a data defect and halts with the
/// entry index. Generated queries that fail anywhere simply count incorrect.
pub fn answer_accuracy(
    generated: &[Vec<String>],
    gold: &[Vec<String>],
    kb: &KnowledgeBase,
) -> Result<(f64, Vec<AccuracyRecord>)> {
    if generated.len() != gold.len() {
        return Err(EvalError::LengthMismatch(generated.len(), gold.len()));
    }
    if generated.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut records = Vec::with_capacity(gold.len());
    let mut correct_count = 0usize;
    for (index, (cand, reference)) in generated.iter().zip(gold).enumerate() {
        let gold_answer = decode_and_execute(reference, kb)
            .map_err(|message| EvalError::BadGold { index, message })?;
        let empty_gold_answer = gold_answer.is_empty_answer();
        let (generated_query_parses, correct) = match decode_and_execute(cand, kb) {
            Ok(answer) => (true, answer == gold_answer),
            Err(_) => (false, false),
        };
        if correct {
            correct_count += 1;
        }
        records.push(AccuracyRecord { correct, empty_gold_answer, generated_query_parses });
    }
    Ok((correct_count as f64 / gold.len() as f64, records))
}

fn decode_and_execute(
    intermediary: &[String],
    kb: &KnowledgeBase,
) -> std::result::Result<crate::kb::AnswerSet, String> {
    let text = codec::from_intermediary(intermediary).map_err(|e| e.to_string())?;
    let query = SparqlQuery::parse(&text).map_err(|e| e.to_string())?;
    query.validate().map_err(|e| e.to_string())?;
    execute(&query, kb).map_err(|e| e.to_string())
}

// ---- evaluation loop ----------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    /// Compute answer accuracy. Reports on unseen-element sets disable this
    /// by default because of the empty-answer false-positive risk.
    pub compute_accuracy: bool,
    /// Decoder budget per entry, in emitted tokens.
    pub max_len: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { compute_accuracy: true, max_len: 48 }
    }
}

/// Everything known about one evaluated entry.
#[derive(Debug, Clone, PartialEq)]
pub struct EntryRecord {
    pub exact_match: bool,
    pub empty_gold_answer: bool,
    pub generated_query_parses: bool,
    pub correct_answer: Option<bool>,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub bleu: f64,
    pub answer_accuracy: Option<f64>,
    pub n_entries: usize,
    pub records: Vec<EntryRecord>,
    /// The decoded candidate token sequences, index-aligned with `records`.
    pub candidates: Vec<Vec<String>>,
}

impl EvalReport {
    pub fn exact_match_rate(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        let hits = self.records.iter().filter(|r| r.exact_match).count();
        hits as f64 / self.records.len() as f64
    }

    pub fn empty_gold_rate(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        let hits = self.records.iter().filter(|r| r.empty_gold_answer).count();
        hits as f64 / self.records.len() as f64
    }
}

/// Encodes a tagged question for decoding: KB tokens go through the shared
/// extension (registering unseen ones), everything else through the source
/// base vocabulary.
pub fn encode_tagged(pair: &mut VocabPair, tokens: &[String]) -> Result<Vec<usize>> {
    tokens
        .iter()
        .map(|token| {
            if is_kb_element(token) {
                Ok(pair.extend_dynamic(token)?)
            } else {
                Ok(pair.source.encode(std::slice::from_ref(token))[0])
            }
        })
        .collect()
}

/// Encodes one entry for teacher-forced training: tagged question ids and
/// intermediary ids terminated by `<eos>`.
pub fn encode_entry(pair: &VocabPair, entry: &DatasetEntry) -> (Vec<usize>, Vec<usize>) {
    let src = pair.source.encode(&entry.tagged_question);
    let mut tgt = pair.target.encode(&entry.intermediary_query);
    tgt.push(crate::vocab::EOS);
    (src, tgt)
}

/// Greedy-decodes every entry and scores the result. Unseen KB tokens are
/// registered in the pair's shared extension before decoding, so the copy
/// model can emit them; gold queries are executed in all cases to flag empty
/// answers, but accuracy is only reported when requested.
pub fn evaluate_run(
    model: &TransformerModel,
    entries: &[DatasetEntry],
    pair: &mut VocabPair,
    kb: &KnowledgeBase,
    options: &EvalOptions,
) -> Result<EvalReport> {
    if entries.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut candidates: Vec<Vec<String>> = Vec::with_capacity(entries.len());
    let mut truncated_flags = Vec::with_capacity(entries.len());
    for entry in entries {
        let src_ids = encode_tagged(pair, &entry.tagged_question)?;
        let decoded = model.greedy_decode(&src_ids, options.max_len)?;
        let tokens = decoded
            .ids
            .iter()
            .map(|&id| pair.target.token(id).map(str::to_string))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        candidates.push(tokens);
        truncated_flags.push(decoded.truncated);
    }
    let references: Vec<Vec<String>> =
        entries.iter().map(|e| e.intermediary_query.clone()).collect();
    let bleu_score = bleu(&candidates, &references)?;
    let (accuracy, acc_records) = answer_accuracy(&candidates, &references, kb)?;
    let records: Vec<EntryRecord> = entries
        .iter()
        .enumerate()
        .map(|(i, entry)| EntryRecord {
            exact_match: candidates[i] == entry.intermediary_query,
            empty_gold_answer: acc_records[i].empty_gold_answer,
            generated_query_parses: acc_records[i].generated_query_parses,
            correct_answer: options.compute_accuracy.then_some(acc_records[i].correct),
            truncated: truncated_flags[i],
        })
        .collect();
    Ok(EvalReport {
        bleu: bleu_score,
        answer_accuracy: options.compute_accuracy.then_some(accuracy),
        n_entries: entries.len(),
        records,
        candidates,
    })
}

/// Means over same-shaped reports from independently trained runs; accuracy
/// is present only when every run reported it.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateReport {
    pub runs: usize,
    pub mean_bleu: f64,
    pub mean_exact_match: f64,
    pub mean_answer_accuracy: Option<f64>,
}

pub fn aggregate(reports: &[EvalReport]) -> Result<AggregateReport> {
    if reports.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = reports.len() as f64;
    let mean_bleu = reports.iter().map(|r| r.bleu).sum::<f64>() / n;
    let mean_exact_match = reports.iter().map(|r| r.exact_match_rate()).sum::<f64>() / n;
    let mean_answer_accuracy = reports
        .iter()
        .map(|r| r.answer_accuracy)
        .collect::<Option<Vec<f64>>>()
        .map(|a| a.iter().sum::<f64>() / n);
    Ok(AggregateReport { runs: reports.len(), mean_bleu, mean_exact_match, mean_answer_accuracy })
}

/// Human-readable summary, stable across runs with equal inputs.
pub fn render_summary(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("entries              {}\n", report.n_entries));
    out.push_str(&format!("bleu                 {:.4}\n", report.bleu));
    out.push_str(&format!("exact_match          {:.4}\n", report.exact_match_rate()));
    match report.answer_accuracy {
        Some(acc) => out.push_str(&format!("answer_accuracy      {acc:.4}\n")),
        None => out.push_str("answer_accuracy      suppressed\n"),
    }
    out.push_str(&format!("empty_gold_answers   {:.4}\n", report.empty_gold_rate()));
    let truncated = report.records.iter().filter(|r| r.truncated).count();
    out.push_str(&format!("truncated_decodes    {truncated}\n"));
    out
}

/// One `key=value` record line per entry, machine-readable.
pub fn render_records(report: &EvalReport) -> String {
    let mut out = String::new();
    for (i, r) in report.records.iter().enumerate() {
        let correct = match r.correct_answer {
            Some(true) => "true",
            Some(false) => "false",
            None => "suppressed",
        };
        out.push_str(&format!(
            "entry={} exact_match={} empty_gold_answer={} generated_query_parses={} correct_answer={}\n",
            i, r.exact_match, r.empty_gold_answer, r.generated_query_parses, correct
        ));
    }
    out
}
