use std::fs;
use std::path::Path;

use super::{tokenize_with_offsets, AspectExample, Parsed, Polarity, Token};
use crate::error::{Error, Result};

/// Reads a SemEval-2014 aspect-term file. One example per `aspectTerm`;
/// terms labelled `conflict` are skipped silently, malformed terms are
/// listed in [`Parsed::rejected`].
pub fn parse_semeval_xml(path: &Path) -> Result<Parsed> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    parse_semeval_str(&text, path)
}

/// As [`parse_semeval_xml`] on in-memory text; `path` only labels errors.
pub fn parse_semeval_str(xml: &str, path: &Path) -> Result<Parsed> {
    let doc = roxmltree::Document::parse(xml).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.pos().row as usize,
        msg: e.to_string(),
    })?;
    let mut out = Parsed::default();
    for (si, sentence) in doc.descendants().filter(|n| n.has_tag_name("sentence")).enumerate() {
        let sid = sentence
            .attribute("id")
            .map(str::to_string)
            .unwrap_or_else(|| format!("s{si}"));
        let line = doc.text_pos_at(sentence.range().start).row;
        let Some(text) = sentence
            .children()
            .find(|n| n.has_tag_name("text"))
            .map(|n| n.text().unwrap_or(""))
        else {
            out.rejected.push(format!("{}:{line}: sentence {sid} has no <text>", path.display()));
            continue;
        };
        let terms = sentence
            .children()
            .filter(|n| n.has_tag_name("aspectTerms"))
            .flat_map(|n| n.children().filter(|c| c.has_tag_name("aspectTerm")));
        for (ti, term) in terms.enumerate() {
            let id = format!("{sid}#{ti}");
            let polarity = term.attribute("polarity").unwrap_or("");
            let label = match polarity {
                "positive" => Polarity::Positive,
                "neutral" => Polarity::Neutral,
                "negative" => Polarity::Negative,
                "conflict" => continue,
                other => {
                    out.rejected.push(format!("{}:{line}: {id}: unknown polarity {other:?}", path.display()));
                    continue;
                }
            };
            let offsets = (
                term.attribute("from").and_then(|v| v.parse::<usize>().ok()),
                term.attribute("to").and_then(|v| v.parse::<usize>().ok()),
            );
            let (Some(from), Some(to)) = offsets else {
                out.rejected.push(format!("{}:{line}: {id}: missing or bad from/to", path.display()));
                continue;
            };
            match align(text, from, to, term.attribute("term")) {
                Ok((tokens, span)) => out.examples.push(AspectExample {
                    id,
                    tokens,
                    span,
                    label,
                }),
                Err(msg) => out.rejected.push(format!("{}:{line}: {id}: {msg}", path.display())),
            }
        }
    }
    Ok(out)
}

/// Tokenizes `text` and maps the character range `from..to` to a token
/// range, splitting tokens that straddle either boundary.
fn align(text: &str, from: usize, to: usize, term: Option<&str>) -> std::result::Result<(Vec<String>, (usize, usize)), String> {
    let chars: Vec<char> = text.chars().collect();
    if from >= to || to > chars.len() {
        return Err(format!("offsets {from}..{to} outside text of {} chars", chars.len()));
    }
    if let Some(term) = term {
        let found: String = chars[from..to].iter().collect();
        if found.trim().to_lowercase() != term.trim().to_lowercase() {
            return Err(format!("offsets {from}..{to} select {found:?}, not {term:?}"));
        }
    }
    let mut tokens = tokenize_with_offsets(text);
    for cut in [from, to] {
        split_at(&mut tokens, cut);
    }
    let inside: Vec<usize> = (0..tokens.len())
        .filter(|&i| tokens[i].start >= from && tokens[i].end <= to)
        .collect();
    let (Some(&s), Some(&e)) = (inside.first(), inside.last()) else {
        return Err(format!("no token inside {from}..{to}"));
    };
    Ok((tokens.into_iter().map(|t| t.text).collect(), (s, e + 1)))
}

fn split_at(tokens: &mut Vec<Token>, cut: usize) {
    if let Some(i) = tokens.iter().position(|t| t.start < cut && cut < t.end) {
        let t = tokens.remove(i);
        let head: String = t.text.chars().take(cut - t.start).collect();
        let tail: String = t.text.chars().skip(cut - t.start).collect();
        tokens.insert(i, Token { text: tail, start: cut, end: t.end });
        tokens.insert(i, Token { text: head, start: t.start, end: cut });
    }
}
