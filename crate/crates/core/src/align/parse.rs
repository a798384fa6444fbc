//! Parsing generated `(head| relation| tail)` lines.

use serde::{Deserialize, Serialize};

use crate::prompting::{unescape_name, PromptMode, NONE_RELATION, PAIR_PLACEHOLDER};

/// Where a generated line came from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SourceRef {
    pub doc_id: String,
    pub chunk_index: usize,
    /// 1-based line number within the response.
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawTriple {
    pub head_surface: String,
    pub relation_surface: String,
    pub tail_surface: String,
    pub source: SourceRef,
    /// The line as generated.
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LineRejection {
    NotATriple,
    UnbalancedParentheses,
    FieldCount { found: usize },
    EmptyField,
    /// The relation is the `-` placeholder from the input pair format.
    PlaceholderRelation,
    /// A `None` answer where the template has no `None` option.
    NoneRelation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedLine {
    pub source: SourceRef,
    pub raw: String,
    pub reason: LineRejection,
}

enum LineOutcome {
    Triple(String, String, String),
    Skip,
    Reject(LineRejection),
}

fn balanced(s: &str) -> bool {
    let mut depth = 0i64;
    for c in s.chars() {
        match c {
            '(' => depth += 1,
            ')' => {
                depth -= 1;
                if depth < 0 {
                    return false;
                }
            }
            _ => {}
        }
    }
    depth == 0
}

fn parse_line(line: &str, mode: PromptMode) -> LineOutcome {
    let t = line.trim();
    if t.is_empty() {
        return LineOutcome::Skip;
    }
    let opens = t.starts_with('(');
    let closes = t.ends_with(')');
    if !opens && !closes {
        return LineOutcome::Reject(LineRejection::NotATriple);
    }
    if !(opens && closes) || t.len() < 2 || !balanced(t) {
        return LineOutcome::Reject(LineRejection::UnbalancedParentheses);
    }
    let inner = &t[1..t.len() - 1];
    let fields: Vec<&str> = inner.split('|').map(str::trim).collect();
    if fields.len() != 3 {
        return LineOutcome::Reject(LineRejection::FieldCount { found: fields.len() });
    }
    if fields.iter().any(|f| f.is_empty()) {
        return LineOutcome::Reject(LineRejection::EmptyField);
    }
    let relation = fields[1];
    if relation == PAIR_PLACEHOLDER {
        return LineOutcome::Reject(LineRejection::PlaceholderRelation);
    }
    if relation.eq_ignore_ascii_case(NONE_RELATION) {
        return match mode {
            PromptMode::BaselineDocre => LineOutcome::Skip,
            PromptMode::RelationClassification => LineOutcome::Reject(LineRejection::NoneRelation),
        };
    }
    LineOutcome::Triple(
        unescape_name(fields[0]),
        relation.to_string(),
        unescape_name(fields[2]),
    )
}

/// Splits a response into triples and rejected lines. Blank lines, and
/// `None` answers in baseline mode, are dropped silently.
pub fn parse_response(
    text: &str,
    doc_id: &str,
    chunk_index: usize,
    mode: PromptMode,
) -> (Vec<RawTriple>, Vec<RejectedLine>) {
    let mut triples = Vec::new();
    let mut rejected = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let source = SourceRef {
            doc_id: doc_id.to_string(),
            chunk_index,
            line: i + 1,
        };
        match parse_line(line, mode) {
            LineOutcome::Triple(h, r, t) => triples.push(RawTriple {
                head_surface: h,
                relation_surface: r,
                tail_surface: t,
                source,
                raw: line.to_string(),
            }),
            LineOutcome::Skip => {}
            LineOutcome::Reject(reason) => rejected.push(RejectedLine {
                source,
                raw: line.to_string(),
                reason,
            }),
        }
    }
    (triples, rejected)
}

#[cfg(test)]
mod tests {
    use super::*;

    const RC: PromptMode = PromptMode::RelationClassification;
    const BASE: PromptMode = PromptMode::BaselineDocre;

    #[test]
    fn accepts_a_well_formed_line() {
        let (t, r) = parse_response("(Albert Einstein| country of citizenship| Germany)", "d", 0, RC);
        assert!(r.is_empty());
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].head_surface, "Albert Einstein");
        assert_eq!(t[0].relation_surface, "country of citizenship");
        assert_eq!(t[0].tail_surface, "Germany");
        assert_eq!(t[0].source.line, 1);
    }

    #[test]
    fn whitespace_around_bars_is_flexible() {
        let (t, _) = parse_response("  (A |country|B )  ", "d", 0, RC);
        assert_eq!((t[0].head_surface.as_str(), t[0].tail_surface.as_str()), ("A", "B"));
    }

    #[test]
    fn none_is_dropped_in_baseline_and_rejected_in_rc() {
        let (t, r) = parse_response("(A| None| B)", "d", 0, BASE);
        assert!(t.is_empty() && r.is_empty());
        let (t, r) = parse_response("(A| none| B)", "d", 0, RC);
        assert!(t.is_empty());
        assert_eq!(r[0].reason, LineRejection::NoneRelation);
    }

    #[test]
    fn placeholder_relation_is_rejected() {
        for mode in [BASE, RC] {
            let (t, r) = parse_response("(A| -| B)", "d", 0, mode);
            assert!(t.is_empty());
            assert_eq!(r[0].reason, LineRejection::PlaceholderRelation);
        }
    }

    #[test]
    fn malformed_lines_carry_reasons() {
        let text = "(A| r)\n(A| r| B\nhello\n(A| | B)\n\n(A| r| B| C)\n(x (y| r| z)";
        let (t, r) = parse_response(text, "d", 2, RC);
        assert!(t.is_empty());
        let reasons: Vec<_> = r.iter().map(|x| (x.source.line, x.reason.clone())).collect();
        assert_eq!(
            reasons,
            vec![
                (1, LineRejection::FieldCount { found: 2 }),
                (2, LineRejection::UnbalancedParentheses),
                (3, LineRejection::NotATriple),
                (4, LineRejection::EmptyField),
                (6, LineRejection::FieldCount { found: 4 }),
                (7, LineRejection::UnbalancedParentheses),
            ]
        );
    }

    #[test]
    fn parentheses_inside_names_survive() {
        let (t, _) = parse_response("(Apple (company)| employer| Tim)", "d", 0, RC);
        assert_eq!(t[0].head_surface, "Apple (company)");
    }

    #[test]
    fn escaped_bar_is_restored() {
        let (t, _) = parse_response("(A\\u007CB| r| C)", "d", 0, RC);
        assert_eq!(t[0].head_surface, "A|B");
    }
}
