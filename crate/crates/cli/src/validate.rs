use std::io::Write;

use rayon::prelude::*;
use rsvl_core::builder::check_decomposition;
use rsvl_core::record::RecordError;
use rsvl_core::{InstructionRecord, TaskKind};
use serde::Serialize;

use crate::error::{CliError, Status};
use crate::jsonl::{self, Line};
use crate::ValidateArgs;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LineError {
    pub line: usize,
    /// `prompt`, `response`, or `record` for problems with the line itself.
    pub field: String,
    /// Byte offset into the field, when known.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub offset: Option<usize>,
    pub message: String,
}

#[derive(Serialize)]
struct Report<'a> {
    records: usize,
    errors: &'a [LineError],
}

fn record_error(line: usize, field: &str, offset: Option<usize>, message: String) -> LineError {
    LineError {
        line,
        field: field.to_owned(),
        offset,
        message,
    }
}

/// All problems found on one line, plus unknown-key warnings.
pub fn check_line(line: Line<'_>, strict: bool) -> (Vec<LineError>, Vec<String>) {
    let n = line.number;
    let mut errors = Vec::new();
    let text = match line.text.strip_suffix('\r') {
        Some(t) => {
            errors.push(record_error(n, "record", None, "CRLF line ending".into()));
            t
        }
        None => line.text,
    };
    let (rec, unknown) = match jsonl::parse_value::<InstructionRecord>(text) {
        Ok(v) => v,
        Err(e) => {
            errors.push(record_error(n, "record", None, e.to_string()));
            return (errors, Vec::new());
        }
    };
    match rec.check() {
        Ok(_) => {
            if strict && rec.task == TaskKind::Decomposition {
                if let Err(msg) = check_decomposition(&rec.response) {
                    errors.push(record_error(n, "response", None, msg));
                }
            }
        }
        Err(RecordError::Markup { field, source }) => {
            errors.push(record_error(
                n,
                &field.to_string(),
                source.offset(),
                source.to_string(),
            ));
        }
        Err(e) => errors.push(record_error(n, "record", None, e.to_string())),
    }
    (errors, unknown)
}

pub fn run(
    args: &ValidateArgs,
    out: &mut (dyn Write + Send),
    err: &mut (dyn Write + Send),
) -> Result<Status, CliError> {
    let text = jsonl::read_text(&args.input)?;
    let lines = jsonl::lines(&text);
    let results: Vec<_> = lines
        .par_iter()
        .map(|&l| check_line(l, args.strict))
        .collect();

    let mut errors = Vec::new();
    for (line, (errs, unknown)) in lines.iter().zip(results) {
        for key in unknown {
            let _ = writeln!(
                err,
                "warning: line {}: ignoring unknown key `{key}`",
                line.number
            );
        }
        errors.extend(errs);
    }
    for e in &errors {
        let at = e.offset.map(|o| format!(" (byte {o})")).unwrap_or_default();
        let _ = writeln!(
            err,
            "{}:{}: {}{at}: {}",
            args.input.display(),
            e.line,
            e.field,
            e.message
        );
    }
    let _ = writeln!(
        err,
        "{} records checked, {} errors",
        lines.len(),
        errors.len()
    );
    if args.json {
        let report = Report {
            records: lines.len(),
            errors: &errors,
        };
        let s = serde_json::to_string(&report).map_err(|e| CliError::Internal(e.to_string()))?;
        let _ = writeln!(out, "{s}");
    }
    Ok(if errors.is_empty() {
        Status::Ok
    } else {
        Status::ValidationFailed
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check(text: &str) -> Vec<LineError> {
        check_line(Line { number: 7, text }, true).0
    }

    #[test]
    fn good_record_has_no_errors() {
        let l = r#"{"image_refs":["a"],"modality":"opt","task":"vqa","prompt":"Is it? The answer to this question is","response":"yes."}"#;
        assert!(check(l).is_empty());
    }

    #[test]
    fn unbalanced_tag_reports_field_and_offset() {
        let l = r#"{"image_refs":["a"],"modality":"opt","task":"caption","prompt":"x","response":"a <|ref|>ship"}"#;
        let e = check(l);
        assert_eq!(e.len(), 1);
        assert_eq!(e[0].line, 7);
        assert_eq!(e[0].field, "response");
        assert_eq!(e[0].offset, Some(2));
    }

    #[test]
    fn bad_json_and_crlf() {
        let e = check("{not json}\r");
        assert_eq!(e.len(), 2);
        assert!(e.iter().all(|e| e.field == "record"));
    }

    #[test]
    fn strict_mode_checks_counts() {
        let resp = "Step1: Locate the target area: The target area locates at the center of the image.\nStep2: Perform object detection: There are 2 entities in the target area, including: 1 <|ref|>ship<|/ref|><|det|>[[1,1,2,2]]<|/det|>.\nStep3: Perform relation analysis: There are 0 relations found.\nStep4: Perform context summary: 1 object types with 0 interactions.";
        let rec = InstructionRecord {
            image_refs: vec!["a".into()],
            modality: rsvl_core::ModalityLabel::Opt,
            task: TaskKind::Decomposition,
            prompt:
                "<|decomposition|>Analyze the region <|det|>[[0,0,999,999]]<|/det|> of the image."
                    .into(),
            response: resp.into(),
        };
        let line = serde_json::to_string(&rec).unwrap();
        assert_eq!(check(&line).len(), 1);
        assert!(check_line(
            Line {
                number: 1,
                text: &line
            },
            false
        )
        .0
        .is_empty());
    }
}
