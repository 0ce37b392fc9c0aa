//! Small text helpers shared by the line-oriented file formats.

/// Iterate over whitespace-separated words.
pub fn words(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace()
}

pub fn word_count(text: &str) -> usize {
    words(text).count()
}

/// Backslash-escape tab, newline, carriage return and backslash so a field
/// fits on one tab-separated line.
pub fn escape_field(field: &str) -> String {
    let mut out = String::with_capacity(field.len());
    for ch in field.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

/// Inverse of [`escape_field`]. Returns `None` on a dangling or unknown escape.
pub fn unescape_field(field: &str) -> Option<String> {
    let mut out = String::with_capacity(field.len());
    let mut chars = field.chars();
    while let Some(ch) = chars.next() {
        if ch != '\\' {
            out.push(ch);
            continue;
        }
        match chars.next()? {
            '\\' => out.push('\\'),
            't' => out.push('\t'),
            'n' => out.push('\n'),
            'r' => out.push('\r'),
            _ => return None,
        }
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn escapes_control_characters() {
        assert_eq!(escape_field("a\tb\nc\\d"), "a\\tb\\nc\\\\d");
        assert_eq!(unescape_field("a\\tb\\nc\\\\d").unwrap(), "a\tb\nc\\d");
    }

    #[test]
    fn rejects_dangling_escape() {
        assert!(unescape_field("abc\\").is_none());
        assert!(unescape_field("\\q").is_none());
    }

    proptest! {
        #[test]
        fn escape_round_trips(s in "\\PC*") {
            let escaped = escape_field(&s);
            prop_assert!(!escaped.contains('\t') && !escaped.contains('\n'));
            prop_assert_eq!(unescape_field(&escaped).unwrap(), s);
        }
    }
}
