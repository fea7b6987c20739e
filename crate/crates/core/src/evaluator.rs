//! Instruction compliance (ICA) and pure inference (PIA) scoring.
//!
//! A sample is content-correct when the leniently extracted answer equals the
//! gold content, and format-correct when the strict parse exists and equals
//! the gold content. Format-correct therefore implies content-correct, so
//! `ica ≤ pia` on every dataset.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{greedy_decode, MoEModel, RoutingObserver, Token};
use crate::stats::ActivationLog;
use crate::workbench::{vocab::EOS, Dataset};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatSpec {
    pub open: Token,
    pub close: Token,
    pub max_len: usize,
    /// Tokens an answer may consist of; drives the untagged fallback.
    pub alphabet: Vec<Token>,
}

impl FormatSpec {
    pub fn validate(&self) -> Result<()> {
        if self.open == self.close {
            return Err(Error::Config("open and close tags must differ".into()));
        }
        if self.alphabet.contains(&self.open) || self.alphabet.contains(&self.close) {
            return Err(Error::Config("format tags must lie outside the answer alphabet".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Parsed {
    pub strict: Option<Vec<Token>>,
    pub lenient: Option<Vec<Token>>,
}

/// Content of the first open tag followed by a close tag with no other open
/// tag between them, as `(open_index, close_index)`.
fn first_tagged(tokens: &[Token], spec: &FormatSpec) -> Option<(usize, usize)> {
    let open = tokens.iter().position(|&t| t == spec.open)?;
    let close = open + 1 + tokens[open + 1..].iter().position(|&t| t == spec.close)?;
    if tokens[open + 1..close].contains(&spec.open) {
        return None;
    }
    Some((open, close))
}

pub fn parse_output(tokens: &[Token], spec: &FormatSpec) -> Parsed {
    let tagged = first_tagged(tokens, spec).filter(|(o, c)| c > &(o + 1));
    let strict = tagged
        .filter(|&(o, c)| o == 0 && c == tokens.len() - 1 && c - o - 1 <= spec.max_len)
        .map(|(o, c)| tokens[o + 1..c].to_vec());
    let lenient = match tagged {
        Some((o, c)) => Some(tokens[o + 1..c].to_vec()),
        None => {
            let run = tokens
                .iter()
                .rev()
                .take_while(|t| spec.alphabet.contains(t))
                .count();
            (run > 0).then(|| tokens[tokens.len() - run..].to_vec())
        }
    };
    Parsed { strict, lenient }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleScore {
    pub format_ok: bool,
    pub content_ok: bool,
    /// Nothing answer-like could be extracted.
    pub unparseable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub records: Vec<SampleScore>,
    pub ica: f64,
    pub pia: f64,
}

impl EvalOutcome {
    pub fn unparseable_fraction(&self) -> f64 {
        self.records.iter().filter(|r| r.unparseable).count() as f64 / self.records.len() as f64
    }
}

/// `golds` holds answer contents, without tags.
pub fn score(outputs: &[Vec<Token>], golds: &[Vec<Token>], spec: &FormatSpec) -> Result<EvalOutcome> {
    if outputs.len() != golds.len() {
        return Err(Error::Input(format!(
            "{} outputs for {} gold answers",
            outputs.len(),
            golds.len()
        )));
    }
    if outputs.is_empty() {
        return Err(Error::Input("nothing to score".into()));
    }
    let records: Vec<SampleScore> = outputs
        .iter()
        .zip(golds)
        .map(|(out, gold)| {
            let p = parse_output(out, spec);
            SampleScore {
                format_ok: p.strict.as_ref() == Some(gold),
                content_ok: p.lenient.as_ref() == Some(gold),
                unparseable: p.lenient.is_none(),
            }
        })
        .collect();
    let n = records.len() as f64;
    let ica = records.iter().filter(|r| r.format_ok).count() as f64 / n;
    let pia = records.iter().filter(|r| r.content_ok).count() as f64 / n;
    Ok(EvalOutcome { records, ica, pia })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub outputs: Vec<Vec<Token>>,
    pub outcome: EvalOutcome,
    pub log: Option<ActivationLog>,
}

/// Greedy-decodes every prompt (stopping at end of sequence) and scores the
/// outputs. Samples run in parallel; results and activation logs are merged
/// in dataset order.
pub fn evaluate(model: &MoEModel, data: &Dataset, record_activations: bool) -> Result<Evaluation> {
    let spec = data.task.format_spec();
    let budget = spec.max_len + 3;
    let per_sample: Vec<(Vec<Token>, Option<ActivationLog>)> = data
        .samples
        .par_iter()
        .map(|s| {
            let max_new = budget.min(model.config.max_seq_len.saturating_sub(s.prompt.len()));
            let mut log = record_activations.then(|| ActivationLog::for_model(model));
            let out = greedy_decode(
                model,
                &s.prompt,
                max_new,
                Some(EOS),
                log.as_mut().map(|l| l as &mut dyn RoutingObserver),
            )?;
            Ok((out, log))
        })
        .collect::<Result<_>>()?;
    let mut merged = record_activations.then(|| ActivationLog::for_model(model));
    let mut outputs = Vec::with_capacity(per_sample.len());
    for (out, log) in per_sample {
        if let (Some(m), Some(l)) = (merged.as_mut(), log) {
            m.absorb(&l)?;
        }
        outputs.push(out);
    }
    let golds: Vec<Vec<Token>> = data.samples.iter().map(|s| s.content().to_vec()).collect();
    let outcome = score(&outputs, &golds, &spec)?;
    Ok(Evaluation {
        outputs,
        outcome,
        log: merged,
    })
}

#[derive(Serialize)]
struct AuditRecord<'a> {
    prompt: &'a [Token],
    output: &'a [Token],
    gold: &'a [Token],
    format_ok: bool,
    content_ok: bool,
}

/// Per-sample audit trail, one JSON object per line.
pub fn audit_jsonl(data: &Dataset, eval: &Evaluation) -> String {
    let mut out = String::new();
    for ((s, o), r) in data.samples.iter().zip(&eval.outputs).zip(&eval.outcome.records) {
        let rec = AuditRecord {
            prompt: &s.prompt,
            output: o,
            gold: &s.gold,
            format_ok: r.format_ok,
            content_ok: r.content_ok,
        };
        out.push_str(&serde_json::to_string(&rec).expect("audit record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_audit(data: &Dataset, eval: &Evaluation, path: &Path) -> Result<()> {
    fs::write(path, audit_jsonl(data, eval)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const O: Token = 25;
    const C: Token = 26;

    fn spec() -> FormatSpec {
        FormatSpec {
            open: O,
            close: C,
            max_len: 2,
            alphabet: (0..10).collect(),
        }
    }

    #[test]
    fn parse_examples() {
        let p = parse_output(&[O, 4, 2, C], &spec());
        assert_eq!(p.strict, Some(vec![4, 2]));
        assert_eq!(p.lenient, Some(vec![4, 2]));

        let p = parse_output(&[4, 2], &spec());
        assert_eq!(p.strict, None);
        assert_eq!(p.lenient, Some(vec![4, 2]));

        let p = parse_output(&[O, 4, C, 7], &spec());
        assert_eq!(p.strict, None);
        assert_eq!(p.lenient, Some(vec![4]));
    }

    #[test]
    fn parse_edge_cases() {
        assert_eq!(parse_output(&[], &spec()), Parsed::default());
        // too long for strict, still lenient
        let p = parse_output(&[O, 1, 2, 3, C], &spec());
        assert_eq!(p.strict, None);
        assert_eq!(p.lenient, Some(vec![1, 2, 3]));
        // empty tags fall back to the trailing run
        let p = parse_output(&[O, C, 5], &spec());
        assert_eq!(p.strict, None);
        assert_eq!(p.lenient, Some(vec![5]));
        // unmatched open tag
        let p = parse_output(&[O, 5, 6], &spec());
        assert_eq!(p.lenient, Some(vec![5, 6]));
        let p = parse_output(&[O, 5, 27], &spec());
        assert_eq!(p.lenient, None);
    }

    #[test]
    fn score_examples() {
        let s = spec();
        let golds = vec![vec![4], vec![2], vec![7], vec![1]];
        let perfect: Vec<Vec<Token>> = golds.iter().map(|g| [vec![O], g.clone(), vec![C]].concat()).collect();
        let r = score(&perfect, &golds, &s).unwrap();
        assert_eq!((r.ica, r.pia), (1.0, 1.0));

        let r = score(&golds, &golds, &s).unwrap();
        assert_eq!((r.ica, r.pia), (0.0, 1.0));

        let mixed = vec![vec![O, 4, C], vec![O, 2, C], vec![2, O, 7, C], vec![O, 9, C]];
        let r = score(&mixed, &golds, &s).unwrap();
        assert_eq!((r.ica, r.pia), (0.5, 0.75));

        assert!(matches!(score(&mixed[..1], &golds, &s), Err(Error::Input(_))));
    }

    #[test]
    fn well_formed_but_wrong_counts_for_neither() {
        let r = score(&[vec![O, 3, C]], &[vec![4]], &spec()).unwrap();
        assert_eq!((r.ica, r.pia), (0.0, 0.0));
    }
}
