//! Tokenization and lenient JSON extraction shared by every module that
//! consumes model output or builds retrieval keys.

use serde_json::Value;

/// Lowercased word tokens. Any character that is not alphanumeric splits, so
/// whitespace and punctuation (ASCII or not) act as separators while CJK runs
/// stay intact.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Number of whole-token occurrences of `needle` (already tokenized) inside
/// `haystack` (already tokenized).
pub fn count_token_runs(haystack: &[String], needle: &[String]) -> usize {
    if needle.is_empty() || needle.len() > haystack.len() {
        return 0;
    }
    haystack
        .windows(needle.len())
        .filter(|w| w.iter().zip(needle).all(|(a, b)| a == b))
        .count()
}

/// Finds the first balanced top-level `[` ... `]` span in `text` that parses
/// as a JSON array and returns its elements.
///
/// Models tend to wrap JSON in prose, and prose may itself contain brackets
/// (`[Feature 1]`), so a span that fails to parse is skipped and the scan
/// resumes at the next `[`.
pub fn extract_json_array(text: &str) -> Option<Vec<Value>> {
    let bytes = text.as_bytes();
    let mut start = 0;
    while let Some(offset) = text[start..].find('[') {
        let open = start + offset;
        if let Some(close) = matching_bracket(bytes, open) {
            if let Ok(Value::Array(items)) = serde_json::from_str::<Value>(&text[open..=close]) {
                return Some(items);
            }
        }
        start = open + 1;
    }
    None
}

/// Index of the `]` closing the `[` at `open`, honouring JSON string
/// literals so brackets inside strings do not count.
fn matching_bracket(bytes: &[u8], open: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(open) {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'[' | b'{' => depth += 1,
            b']' | b'}' => {
                depth = depth.checked_sub(1)?;
                if depth == 0 {
                    return (b == b']').then_some(i);
                }
            }
            _ => {}
        }
    }
    None
}

/// Single-pass `{Name}` placeholder substitution. Substituted values are
/// never rescanned, so user content containing `{Claims}` stays literal.
pub fn fill_template(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + vars.iter().map(|(_, v)| v.len()).sum::<usize>());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let replaced = after.find('}').and_then(|close| {
            let name = &after[..close];
            vars.iter().find(|(k, _)| *k == name).map(|(_, v)| (close, *v))
        });
        match replaced {
            Some((close, value)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tokenize_splits_punctuation_and_lowercases() {
        assert_eq!(
            tokenize("Treasure-Island, (user_a)!"),
            vec!["treasure", "island", "user", "a"]
        );
        assert_eq!(tokenize("夺宝岛 auction"), vec!["夺宝岛", "auction"]);
        assert!(tokenize("  ,.; ").is_empty());
    }

    #[test]
    fn token_runs_are_whole_token() {
        let hay = tokenize("treasure island and treasure islands, Treasure Island");
        let needle = tokenize("Treasure Island");
        assert_eq!(count_token_runs(&hay, &needle), 2);
        assert_eq!(count_token_runs(&hay, &[]), 0);
    }

    #[test]
    fn json_array_extraction_skips_prose_brackets() {
        let text = "Here is [Feature 1] then the answer:\n[{\"claim\": \"a ] b\"}]\nThanks [x]";
        let items = extract_json_array(text).unwrap();
        assert_eq!(items.len(), 1);
        assert_eq!(items[0]["claim"], "a ] b");
    }

    #[test]
    fn json_array_extraction_empty_and_missing() {
        assert_eq!(extract_json_array("[]").unwrap().len(), 0);
        assert!(extract_json_array("no array here").is_none());
        assert!(extract_json_array("[1, 2").is_none());
        assert!(extract_json_array("{\"a\": 1}").is_none());
    }

    #[test]
    fn fill_template_is_single_pass() {
        let out = fill_template("a={A} b={B} c={C}", &[("A", "{B}"), ("B", "2")]);
        assert_eq!(out, "a={B} b=2 c={C}");
    }

    proptest! {
        #[test]
        fn extraction_never_panics(s in ".*") {
            let _ = extract_json_array(&s);
        }

        #[test]
        fn extraction_finds_embedded_array(prefix in "[a-z ]{0,20}", n in 0usize..5) {
            let arr: Vec<serde_json::Value> = (0..n).map(|i| serde_json::json!({"claim": format!("c{i}")})).collect();
            let text = format!("{prefix}{}{prefix}", serde_json::Value::Array(arr.clone()));
            prop_assert_eq!(extract_json_array(&text).unwrap(), arr);
        }
    }
}
