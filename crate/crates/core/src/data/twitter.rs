use std::fs;
use std::path::Path;

use super::{tokenize, AspectExample, Parsed, Polarity};
use crate::error::{Error, Result};

const TARGET: &str = "$T$";

/// Reads the three-line Twitter format: sentence with `$T$`, target,
/// polarity in {-1, 0, 1}.
pub fn parse_twitter(path: &Path) -> Result<Parsed> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    parse_twitter_str(&text, path)
}

pub fn parse_twitter_str(text: &str, path: &Path) -> Result<Parsed> {
    let mut lines: Vec<&str> = text.lines().map(|l| l.trim_end_matches('\r')).collect();
    while lines.last().is_some_and(|l| l.trim().is_empty()) {
        lines.pop();
    }
    if lines.len() % 3 != 0 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: lines.len(),
            msg: format!("{} lines do not form 3-line records", lines.len()),
        });
    }
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("twitter");
    let mut out = Parsed::default();
    for (r, rec) in lines.chunks(3).enumerate() {
        let line = 3 * r + 1;
        let id = format!("{stem}#{r}");
        let label = match rec[2].trim() {
            "1" => Polarity::Positive,
            "0" => Polarity::Neutral,
            "-1" => Polarity::Negative,
            other => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: line + 2,
                    msg: format!("polarity must be -1, 0 or 1, got {other:?}"),
                })
            }
        };
        let Some((left, right)) = rec[0].split_once(TARGET) else {
            out.rejected.push(format!("{}:{line}: {id}: no {TARGET} in sentence", path.display()));
            continue;
        };
        let target = tokenize(rec[1]);
        if target.is_empty() {
            out.rejected.push(format!("{}:{}: {id}: empty target", path.display(), line + 1));
            continue;
        }
        let mut tokens = tokenize(left);
        let start = tokens.len();
        tokens.extend(target);
        let end = tokens.len();
        tokens.extend(tokenize(&right.replace(TARGET, rec[1])));
        out.examples.push(AspectExample {
            id,
            tokens,
            span: (start, end),
            label,
        });
    }
    Ok(out)
}
