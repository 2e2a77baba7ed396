//! Prompt templates, answer parsing and ICL-set post-processing.
//!
//! A template file has three sections separated by lines consisting of
//! `---`: the main template (with `{examples}` and `{query}` exactly once),
//! the per-example sub-template (`{text}`, `{label}`), and the answer cue
//! appended after the main template. The final newline of the file is
//! dropped; every other newline is kept.

use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DEFAULT_MAX_CHARS_PER_DOC: usize = 1200;

/// How a class is spelled when scored as a continuation. Part of the hash.
const VERBALIZATION_TAG: &str = "space+label";

const BUILTIN: &[(&str, &str)] = &[
    ("arxiv", include_str!("../templates/arxiv.txt")),
    ("products", include_str!("../templates/products.txt")),
    ("generic", include_str!("../templates/generic.txt")),
];

/// A labeled node shown in a prompt. `label` is the label displayed, which
/// may be a pseudo-label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct IclExample {
    pub node: usize,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    main: String,
    example: String,
    cue: String,
    hash: String,
}

impl PromptTemplate {
    pub fn new(main: impl Into<String>, example: impl Into<String>, cue: impl Into<String>) -> Result<Self> {
        let (main, example, cue) = (main.into(), example.into(), cue.into());
        for ph in ["{examples}", "{query}"] {
            let n = main.matches(ph).count();
            if n != 1 {
                return Err(Error::Template(format!("main template must contain {ph} exactly once, found {n}")));
            }
        }
        let mut h = Sha256::new();
        for part in [main.as_str(), example.as_str(), cue.as_str(), VERBALIZATION_TAG] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        let hash = hex::encode(h.finalize());
        Ok(Self { main, example, cue, hash })
    }

    pub fn parse(source: &str) -> Result<Self> {
        let source = source.strip_suffix('\n').unwrap_or(source);
        let mut sections: Vec<Vec<&str>> = vec![Vec::new()];
        for line in source.split('\n') {
            if line.trim_end_matches('\r') == "---" {
                sections.push(Vec::new());
            } else {
                sections.last_mut().expect("non-empty").push(line);
            }
        }
        if sections.len() != 3 {
            return Err(Error::Template(format!(
                "expected 3 sections separated by '---', found {}",
                sections.len()
            )));
        }
        let join = |s: &Vec<&str>| s.join("\n");
        Self::new(join(&sections[0]), join(&sections[1]), join(&sections[2]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Template(format!("{}: {e}", path.display())))
    }

    pub fn builtin(name: &str) -> Result<Self> {
        BUILTIN
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, src)| Self::parse(src))
            .unwrap_or_else(|| Err(Error::Template(format!("no built-in template {name:?}"))))
    }

    pub fn builtin_names() -> impl Iterator<Item = &'static str> {
        BUILTIN.iter().map(|(n, _)| *n)
    }

    /// A built-in name or a path to a template file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        if BUILTIN.iter().any(|(n, _)| *n == name_or_path) {
            Self::builtin(name_or_path)
        } else {
            Self::load(Path::new(name_or_path))
        }
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn cue(&self) -> &str {
        &self.cue
    }
}

/// The scored continuation for a class label.
pub fn verbalize(label: &str) -> String {
    format!(" {label}")
}

/// Replaces each `{name}` in `template` in one left-to-right pass, so
/// substituted text is never re-scanned.
fn substitute(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    'scan: while let Some(open) = rest.find('{') {
        for (name, value) in values {
            let tail = &rest[open + 1..];
            if tail.starts_with(name) && tail[name.len()..].starts_with('}') {
                out.push_str(&rest[..open]);
                out.push_str(value);
                rest = &tail[name.len() + 1..];
                continue 'scan;
            }
        }
        out.push_str(&rest[..=open]);
        rest = &rest[open + 1..];
    }
    out.push_str(rest);
    out
}

/// Cuts `text` to at most `max_chars` characters, ending at a word boundary
/// when one exists.
pub fn truncate_doc(text: &str, max_chars: usize) -> &str {
    let Some((cut, _)) = text.char_indices().nth(max_chars) else {
        return text;
    };
    let head = &text[..cut];
    let boundary = if text[cut..].starts_with(char::is_whitespace) {
        Some(cut)
    } else {
        head.rfind(char::is_whitespace)
    };
    match boundary {
        Some(b) if b > 0 => head[..b].trim_end(),
        _ => head,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RenderOptions {
    pub max_chars_per_doc: usize,
    /// Whole-prompt limit; examples are dropped from the end until it fits.
    pub max_prompt_chars: Option<usize>,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            max_chars_per_doc: DEFAULT_MAX_CHARS_PER_DOC,
            max_prompt_chars: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub text: String,
    /// Examples that made it into the prompt (a prefix of the input).
    pub n_examples: usize,
}

/// Renders `examples` (text, label) in order, then the query and answer cue.
pub fn render(template: &PromptTemplate, examples: &[(&str, &str)], query: &str, opts: &RenderOptions) -> RenderedPrompt {
    let blocks: Vec<String> = examples
        .iter()
        .map(|(text, label)| {
            substitute(
                &template.example,
                &[("text", truncate_doc(text, opts.max_chars_per_doc)), ("label", label)],
            )
        })
        .collect();
    let query = truncate_doc(query, opts.max_chars_per_doc);
    let build = |n: usize| {
        let mut s = substitute(&template.main, &[("examples", &blocks[..n].concat()), ("query", query)]);
        s.push_str(&template.cue);
        s
    };
    let mut n = blocks.len();
    let mut text = build(n);
    if let Some(limit) = opts.max_prompt_chars {
        while n > 0 && text.chars().count() > limit {
            n -= 1;
            text = build(n);
        }
    }
    RenderedPrompt { text, n_examples: n }
}

/// The class whose label occurs earliest in `completion` (case-insensitive,
/// not inside a longer alphanumeric run); the longest label wins at equal
/// positions. `None` when nothing matches.
pub fn parse_answer(completion: &str, label_vocab: &[String]) -> Option<usize> {
    let hay = completion.to_lowercase();
    let mut best: Option<(usize, usize, usize)> = None; // (start, len, class)
    for (class, label) in label_vocab.iter().enumerate() {
        let needle = label.to_lowercase();
        if needle.is_empty() {
            continue;
        }
        let edge_ok = |c: Option<char>| c.is_none_or(|c| !c.is_alphanumeric());
        for (start, _) in hay.match_indices(&needle) {
            let end = start + needle.len();
            if edge_ok(hay[..start].chars().next_back()) && edge_ok(hay[end..].chars().next()) {
                let cand = (start, needle.len(), class);
                best = match best {
                    Some(b) if (b.0, std::cmp::Reverse(b.1)) <= (start, std::cmp::Reverse(needle.len())) => Some(b),
                    _ => Some(cand),
                };
                break;
            }
        }
    }
    best.map(|b| b.2)
}

/// Most frequent label; ties go to the tied label that appears first.
pub fn majority_vote(labels: &[usize]) -> Result<usize> {
    if labels.is_empty() {
        return Err(Error::Empty("examples for majority vote"));
    }
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    let top = counts.values().copied().max().expect("non-empty");
    Ok(*labels.iter().find(|l| counts[l] == top).expect("some label has the top count"))
}

/// Drops examples whose label occurs fewer than `min_count` times; returns
/// the input unchanged if that would drop everything.
pub fn purify_minority(examples: &[IclExample], min_count: usize) -> Vec<IclExample> {
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for e in examples {
        *counts.entry(e.label).or_default() += 1;
    }
    let kept: Vec<IclExample> = examples.iter().copied().filter(|e| counts[&e.label] >= min_count).collect();
    if kept.is_empty() {
        examples.to_vec()
    } else {
        kept
    }
}

/// Prompt asking the model to pick the most useful candidates by number.
pub fn selection_prompt(candidates: &[(&str, &str)], query: &str, budget: usize, opts: &RenderOptions) -> String {
    let mut s = format!(
        "Below are {} labeled examples. Select the {budget} most informative and diverse examples for classifying the query. \
         Reply with their numbers separated by commas, most useful first.\n\n",
        candidates.len()
    );
    for (i, (text, label)) in candidates.iter().enumerate() {
        s.push_str(&format!("[{}] {} (category: {label})\n", i + 1, truncate_doc(text, opts.max_chars_per_doc)));
    }
    s.push_str(&format!("\nQuery: {}\nSelected:", truncate_doc(query, opts.max_chars_per_doc)));
    s
}

/// 1-based candidate numbers found in `completion`, in order, deduplicated
/// and range-checked.
pub fn parse_selection(completion: &str, n_candidates: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for tok in completion.split(|c: char| !c.is_ascii_digit()).filter(|t| !t.is_empty()) {
        if let Ok(i) = tok.parse::<usize>() {
            if (1..=n_candidates).contains(&i) && !out.contains(&(i - 1)) {
                out.push(i - 1);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub examples: Vec<IclExample>,
    /// True when the model's reply was unusable and rank order was used.
    pub fell_back: bool,
}

/// Orders `examples` by the model's picks, padded with the remaining
/// examples in rank order, cut to `budget`. `reply` is `None` when the
/// call failed.
pub fn apply_selection(examples: &[IclExample], reply: Option<&str>, budget: usize) -> Selection {
    let budget = budget.min(examples.len());
    let picks = reply.map(|r| parse_selection(r, examples.len())).unwrap_or_default();
    let fell_back = picks.is_empty();
    let mut order = picks;
    order.truncate(budget);
    for i in 0..examples.len() {
        if order.len() >= budget {
            break;
        }
        if !order.contains(&i) {
            order.push(i);
        }
    }
    Selection {
        examples: order.into_iter().map(|i| examples[i]).collect(),
        fell_back,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn simple() -> PromptTemplate {
        PromptTemplate::new("Q: {query}\n{examples}", "Text: {text} \u{2192} {label}\n", "A:").unwrap()
    }

    #[test]
    fn placeholders_are_required_once() {
        assert!(PromptTemplate::new("{query}", "", "").is_err());
        assert!(PromptTemplate::new("{query}{examples}{query}", "", "").is_err());
        assert!(PromptTemplate::parse("{query}{examples}\n---\nx").is_err());
    }

    #[test]
    fn hash_tracks_every_section() {
        let base = simple();
        assert_eq!(base.hash(), simple().hash());
        let variants = [
            PromptTemplate::new("Q: {query}\n{examples} ", "Text: {text} \u{2192} {label}\n", "A:").unwrap(),
            PromptTemplate::new("Q: {query}\n{examples}", "Text: {text} -> {label}\n", "A:").unwrap(),
            PromptTemplate::new("Q: {query}\n{examples}", "Text: {text} \u{2192} {label}\n", "A: ").unwrap(),
        ];
        for v in variants {
            assert_ne!(v.hash(), base.hash());
        }
    }

    #[test]
    fn builtins_parse() {
        for name in PromptTemplate::builtin_names() {
            let t = PromptTemplate::builtin(name).unwrap();
            assert_eq!(t.cue().trim(), if name == "generic" { "Category:" } else { "Answer:" });
        }
        assert!(PromptTemplate::builtin("nope").is_err());
    }

    #[test]
    fn file_sections_keep_inner_newlines() {
        let t = PromptTemplate::parse("head {query}\n{examples}\n---\n- {text}: {label}\n\n---\nAnswer:\n").unwrap();
        let p = render(&t, &[("a", "X"), ("b", "Y")], "q", &RenderOptions::default());
        assert_eq!(p.text, "head q\n- a: X\n- b: Y\nAnswer:");
    }

    #[test]
    fn zero_examples_and_single_example() {
        let t = simple();
        let p = render(&t, &[], "hello", &RenderOptions::default());
        assert_eq!(p.text, "Q: hello\nA:");
        let p = render(&t, &[("t", "A")], "hello", &RenderOptions::default());
        assert_eq!(p.text.matches("Text: t \u{2192} A\n").count(), 1);
    }

    #[test]
    fn substitution_is_single_pass() {
        let t = simple();
        let p = render(&t, &[("{query}", "{label}")], "{examples}", &RenderOptions::default());
        assert_eq!(p.text, "Q: {examples}\nText: {query} \u{2192} {label}\nA:");
        assert_eq!(substitute("{a}{b} {c", &[("a", "1"), ("b", "{a}")]), "1{a} {c");
    }

    #[test]
    fn truncation_at_whitespace() {
        let long: String = (0..700).map(|i| format!("w{i} ")).collect();
        assert!(long.chars().count() > 3000);
        let cut = truncate_doc(&long, 1200);
        assert!(cut.chars().count() <= 1200);
        assert!(long[cut.len()..].starts_with(' '));
        assert_eq!(truncate_doc("short text", 1200), "short text");
        assert_eq!(truncate_doc("abcdef", 3), "abc");
        assert_eq!(truncate_doc("ab cd ef", 5), "ab cd");
        assert_eq!(truncate_doc("ab cdef", 5), "ab");
    }

    #[test]
    fn prompt_budget_drops_lowest_ranked() {
        let t = simple();
        let ex = [("first", "A"), ("second", "B"), ("third", "A")];
        let full = render(&t, &ex, "q", &RenderOptions::default());
        let opts = RenderOptions {
            max_prompt_chars: Some(full.text.chars().count() - 1),
            ..Default::default()
        };
        let p = render(&t, &ex, "q", &opts);
        assert_eq!(p.n_examples, 2);
        assert!(p.text.contains("second") && !p.text.contains("third"));
    }

    #[test]
    fn parse_answer_cases() {
        let arxiv = vocab(&["cs.AI", "cs.SY", "cs.LG"]);
        assert_eq!(parse_answer("cs.AI", &arxiv), Some(0));
        assert_eq!(parse_answer(" 'CS.sy'", &arxiv), Some(1));
        assert_eq!(parse_answer("banana", &arxiv), None);
        assert_eq!(parse_answer("cs.AIx or cs.LG", &arxiv), Some(2));
        let prod = vocab(&["Toys", "Toys & Games", "Books"]);
        assert_eq!(parse_answer("The answer is 'Toys & Games'.", &prod), Some(1));
        assert_eq!(parse_answer("Books, not Toys", &prod), Some(2));
        let synth = vocab(&["class_1", "class_10"]);
        assert_eq!(parse_answer("class_10", &synth), Some(1));
    }

    #[test]
    fn votes_and_purification() {
        assert_eq!(majority_vote(&[0, 0, 0]).unwrap(), 0);
        assert_eq!(majority_vote(&[0, 0, 1]).unwrap(), 0);
        assert_eq!(majority_vote(&[0, 1]).unwrap(), 0);
        assert_eq!(majority_vote(&[1, 0]).unwrap(), 1);
        assert_eq!(majority_vote(&[2, 1, 1, 2]).unwrap(), 2);
        assert!(majority_vote(&[]).is_err());

        let e = |node, label| IclExample { node, label };
        let set = [e(0, 0), e(1, 0), e(2, 1)];
        assert_eq!(purify_minority(&set, 2), vec![e(0, 0), e(1, 0)]);
        let distinct = [e(0, 0), e(1, 1), e(2, 2)];
        assert_eq!(purify_minority(&distinct, 2), distinct.to_vec());
        assert_eq!(purify_minority(&set, 1), set.to_vec());
    }

    #[test]
    fn selection_cases() {
        let e = |node| IclExample { node, label: 0 };
        let ex = [e(10), e(11), e(12)];
        let s = apply_selection(&ex, Some("2,1"), 2);
        assert_eq!(s.examples, vec![e(11), e(10)]);
        assert!(!s.fell_back);
        assert_eq!(apply_selection(&ex, Some("3"), 3).examples, vec![e(12), e(10), e(11)]);
        let s = apply_selection(&ex, Some("no idea"), 2);
        assert_eq!(s.examples, vec![e(10), e(11)]);
        assert!(s.fell_back);
        assert!(apply_selection(&ex, None, 3).fell_back);
        assert_eq!(apply_selection(&ex, Some("1,2,3"), 3).examples, ex.to_vec());
        assert_eq!(parse_selection("[2], 7, 2, 0, 3", 3), vec![1, 2]);
        let p = selection_prompt(&[("a", "X"), ("b", "Y")], "q", 1, &RenderOptions::default());
        assert!(p.contains("[1] a (category: X)") && p.contains("[2] b (category: Y)"));
    }
}
