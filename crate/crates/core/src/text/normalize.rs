//! Built-in corpus normalizer.
//!
//! Steps, in order:
//!
//! 1. optional lowercasing,
//! 2. Unicode NFC,
//! 3. punctuation splitting by the rule table below,
//! 4. whitespace collapsing (any run of whitespace or control characters
//!    becomes one ASCII space; leading/trailing space is trimmed).
//!
//! Punctuation rule table. A character is *punctuation* if it is ASCII
//! punctuation or listed in [`EXTRA_PUNCT`]. Punctuation is surrounded by
//! spaces, with three exceptions where it stays glued to its neighbours:
//!
//! | char        | kept when                         | example  |
//! |-------------|-----------------------------------|----------|
//! | `.` `,`     | both neighbours are digits        | `3.14`   |
//! | `'` `’`     | both neighbours are letters       | `don't`  |
//! | `-`         | both neighbours are alphanumeric  | `e-mail` |
//!
//! Neighbours are taken from the text before splitting, and a kept
//! character's neighbours are never punctuation, so a second pass finds
//! nothing left to split.

use std::path::Path;

use unicode_normalization::UnicodeNormalization;

use super::{Lang, RawCorpus};
use crate::error::{Error, Result};

/// Non-ASCII characters treated as punctuation.
pub const EXTRA_PUNCT: &[char] = &[
    '\u{2018}', '\u{2019}', '\u{201C}', '\u{201D}', '\u{00AB}', '\u{00BB}', '\u{2013}', '\u{2014}',
    '\u{2026}', '\u{00BF}', '\u{00A1}', '\u{00B7}', '\u{0964}', '\u{0965}', '\u{3001}', '\u{3002}',
    '\u{FF0C}', '\u{FF01}', '\u{FF1F}', '\u{060C}', '\u{061F}',
];

pub fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || EXTRA_PUNCT.contains(&c)
}

fn keep_glued(c: char, prev: Option<char>, next: Option<char>) -> bool {
    let (Some(p), Some(n)) = (prev, next) else {
        return false;
    };
    match c {
        '.' | ',' => p.is_numeric() && n.is_numeric(),
        '\'' | '\u{2019}' => p.is_alphabetic() && n.is_alphabetic(),
        '-' => p.is_alphanumeric() && n.is_alphanumeric(),
        _ => false,
    }
}

/// Normalizes a single line. Returns an empty string for lines that carry
/// no tokens.
pub fn normalize_line(line: &str, lowercase: bool) -> String {
    let cased: String = if lowercase {
        line.to_lowercase()
    } else {
        line.to_string()
    };
    let chars: Vec<char> = cased.nfc().collect();

    let mut spaced = String::with_capacity(chars.len() + 8);
    for (i, &c) in chars.iter().enumerate() {
        if c.is_whitespace() || c.is_control() {
            spaced.push(' ');
        } else if is_punct(c) {
            let prev = i.checked_sub(1).map(|j| chars[j]);
            let next = chars.get(i + 1).copied();
            if keep_glued(c, prev, next) {
                spaced.push(c);
            } else {
                spaced.push(' ');
                spaced.push(c);
                spaced.push(' ');
            }
        } else {
            spaced.push(c);
        }
    }
    spaced.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Normalizes every line and drops lines that end up empty.
pub fn normalize_corpus(raw: &RawCorpus, lowercase: bool) -> RawCorpus {
    let lines = raw
        .lines
        .iter()
        .map(|l| normalize_line(l, lowercase))
        .filter(|l| !l.is_empty())
        .collect();
    RawCorpus {
        language: raw.language,
        lines,
    }
}

/// Splits raw bytes into lines, rejecting invalid UTF-8 with its (0-based)
/// line index. Both LF and CRLF endings are accepted.
pub fn corpus_from_bytes(language: Lang, bytes: &[u8]) -> Result<RawCorpus> {
    let mut lines = Vec::new();
    for (idx, raw) in bytes.split(|&b| b == b'\n').enumerate() {
        let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
        let line = std::str::from_utf8(raw).map_err(|_| Error::InvalidUtf8 { line: idx })?;
        lines.push(line.to_string());
    }
    if bytes.ends_with(b"\n") {
        lines.pop();
    }
    Ok(RawCorpus { language, lines })
}

pub fn read_corpus(path: &Path, language: Lang) -> Result<RawCorpus> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    corpus_from_bytes(language, &bytes)
}

pub fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut out = String::with_capacity(lines.iter().map(|l| l.len() + 1).sum());
    for l in lines {
        out.push_str(l);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_punctuation_and_lowercases() {
        assert_eq!(normalize_line("Hello,  World!", true), "hello , world !");
        assert_eq!(normalize_line("Hello,  World!", false), "Hello , World !");
    }

    #[test]
    fn empty_line_is_dropped() {
        let raw = RawCorpus {
            language: Lang::Src,
            lines: vec!["".into(), "  \t ".into(), "ok".into()],
        };
        let out = normalize_corpus(&raw, false);
        assert_eq!(out.lines, vec!["ok".to_string()]);
    }

    #[test]
    fn glue_exceptions() {
        assert_eq!(normalize_line("pi is 3.14, don't e-mail", false), "pi is 3.14 , don't e-mail");
        assert_eq!(normalize_line("end.", false), "end .");
        assert_eq!(normalize_line("'quoted'", false), "' quoted '");
    }

    #[test]
    fn nfc_composes() {
        // e + combining acute -> U+00E9
        assert_eq!(normalize_line("cafe\u{301}", false), "caf\u{e9}");
    }

    #[test]
    fn devanagari_danda_is_split() {
        assert_eq!(normalize_line("राम घर गया।", false), "राम घर गया ।");
    }

    #[test]
    fn invalid_utf8_reports_line() {
        let bytes = b"fine\nbad \xff here\n";
        match corpus_from_bytes(Lang::Src, bytes) {
            Err(Error::InvalidUtf8 { line }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn crlf_and_trailing_newline() {
        let c = corpus_from_bytes(Lang::Tgt, b"a b\r\nc\n").unwrap();
        assert_eq!(c.lines, vec!["a b".to_string(), "c".to_string()]);
    }
}
