//! Report loading, structural segmentation and token-bounded chunking.

use std::path::Path;
use std::process::Command;

use serde::{Deserialize, Serialize};
use unicode_segmentation::UnicodeSegmentation;

pub const DEFAULT_CHUNK_LENGTH: usize = 4096;

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("converter `{command}` failed with {status}: {stderr}")]
    Conversion {
        command: String,
        status: String,
        stderr: String,
    },
    #[error("converter output is not valid UTF-8")]
    ConverterEncoding,
    #[error("invalid chunking configuration: {0}")]
    Config(String),
    #[error("grapheme cluster of {tokens} tokens exceeds chunk length {limit}")]
    UnsplittableGrapheme { tokens: usize, limit: usize },
}

/// External command that turns a binary report (PDF, DOCX, ...) into markdown.
///
/// `{input}` in any argument is replaced by the report path; the command's
/// stdout is taken as the document text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConverterConfig {
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
    /// Extensions (lowercase, no dot) read as text without conversion.
    #[serde(default = "default_text_extensions")]
    pub text_extensions: Vec<String>,
}

fn default_text_extensions() -> Vec<String> {
    ["md", "markdown", "txt"].map(String::from).to_vec()
}

impl ConverterConfig {
    /// Parses a whitespace-separated template such as `pdf2md --stdout {input}`.
    pub fn from_template(template: &str) -> Option<Self> {
        let mut parts = template.split_whitespace().map(String::from);
        let program = parts.next()?;
        Some(Self {
            program,
            args: parts.collect(),
            text_extensions: default_text_extensions(),
        })
    }
}

pub fn load_document(path: &Path, converter: Option<&ConverterConfig>) -> Result<String, IngestError> {
    let io_err = |source| IngestError::Io {
        path: path.display().to_string(),
        source,
    };
    let bytes = std::fs::read(path).map_err(io_err)?;
    let ext = path
        .extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default();

    match converter {
        Some(conv) if !conv.text_extensions.contains(&ext) || std::str::from_utf8(&bytes).is_err() => {
            let input = path.display().to_string();
            let args: Vec<String> = conv.args.iter().map(|a| a.replace("{input}", &input)).collect();
            let output = Command::new(&conv.program)
                .args(&args)
                .output()
                .map_err(|e| IngestError::Conversion {
                    command: conv.program.clone(),
                    status: "spawn failure".into(),
                    stderr: e.to_string(),
                })?;
            if !output.status.success() {
                return Err(IngestError::Conversion {
                    command: conv.program.clone(),
                    status: output.status.to_string(),
                    stderr: String::from_utf8_lossy(&output.stderr).trim().to_owned(),
                });
            }
            String::from_utf8(output.stdout).map_err(|_| IngestError::ConverterEncoding)
        }
        _ => String::from_utf8(bytes).map_err(|e| io_err(std::io::Error::new(std::io::ErrorKind::InvalidData, e))),
    }
}

/// A paragraph-level unit of the document together with its heading lineage.
///
/// A heading line is kept in the text of the first paragraph below it, so the
/// segment texts in order reproduce the document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub heading_path: Vec<String>,
    pub text: String,
    pub order: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub index: usize,
    pub text: String,
    pub token_count: usize,
    pub heading_path: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TokenizerConfig {
    /// ceil(chars / chars_per_token), counting Unicode scalar values.
    Heuristic { chars_per_token: usize },
    /// One token per whitespace-separated word.
    Whitespace,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig::Heuristic { chars_per_token: 4 }
    }
}

pub fn count_tokens(text: &str, tokenizer: &TokenizerConfig) -> usize {
    match *tokenizer {
        TokenizerConfig::Heuristic { chars_per_token } => text.chars().count().div_ceil(chars_per_token.max(1)),
        TokenizerConfig::Whitespace => text.split_whitespace().count(),
    }
}

fn heading(line: &str) -> Option<(usize, String)> {
    let trimmed = line.trim_start_matches(' ');
    if line.len() - trimmed.len() > 3 {
        return None;
    }
    let level = trimmed.bytes().take_while(|&b| b == b'#').count();
    if !(1..=6).contains(&level) {
        return None;
    }
    let rest = &trimmed[level..];
    if !rest.is_empty() && !rest.starts_with([' ', '\t']) {
        return None;
    }
    let title = rest.trim().trim_end_matches('#').trim_end();
    Some((level, title.to_owned()))
}

fn is_fence(line: &str) -> Option<&'static str> {
    let t = line.trim_start();
    if t.starts_with("```") {
        Some("```")
    } else if t.starts_with("~~~") {
        Some("~~~")
    } else {
        None
    }
}

/// Splits at ATX headings, then at blank lines. Lines inside fenced code
/// blocks are never treated as headings or paragraph breaks.
pub fn segment(doc: &str) -> Vec<Segment> {
    let mut segments = Vec::new();
    let mut stack: Vec<(usize, String)> = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    let mut fence: Option<&'static str> = None;

    let flush = |current: &mut Vec<&str>, stack: &[(usize, String)], segments: &mut Vec<Segment>| {
        let text = trim_whitespace_graphemes(&current.join("\n")).to_owned();
        current.clear();
        if !text.is_empty() {
            segments.push(Segment {
                heading_path: stack.iter().map(|(_, t)| t.clone()).collect(),
                order: segments.len(),
                text,
            });
        }
    };

    for line in doc.split('\n') {
        if let Some(open) = fence {
            current.push(line);
            if line.trim_start().starts_with(open) {
                fence = None;
            }
            continue;
        }
        if let Some(marker) = is_fence(line) {
            fence = Some(marker);
            current.push(line);
            continue;
        }
        if let Some((level, title)) = heading(line) {
            flush(&mut current, &stack, &mut segments);
            while stack.last().is_some_and(|(l, _)| *l >= level) {
                stack.pop();
            }
            stack.push((level, title));
            current.push(line);
            continue;
        }
        if line.trim().is_empty() {
            // a heading line alone does not end its paragraph
            let only_heading = current.len() == 1 && heading(current[0]).is_some();
            if only_heading {
                current.push(line);
            } else {
                flush(&mut current, &stack, &mut segments);
            }
            continue;
        }
        current.push(line);
    }
    flush(&mut current, &stack, &mut segments);
    segments
}

/// Trims leading and trailing grapheme clusters that consist only of
/// whitespace. Unlike `str::trim` this never strips a space that carries a
/// combining mark.
pub fn trim_whitespace_graphemes(text: &str) -> &str {
    let is_ws = |g: &str| g.chars().all(char::is_whitespace);
    let mut start = text.len();
    for (i, g) in text.grapheme_indices(true) {
        if !is_ws(g) {
            start = i;
            break;
        }
    }
    let mut end = start;
    for (i, g) in text.grapheme_indices(true).rev() {
        if i < start {
            break;
        }
        if !is_ws(g) {
            end = i + g.len();
            break;
        }
    }
    &text[start..end]
}

fn trim_leading_whitespace_graphemes(text: &str) -> &str {
    let start = text
        .grapheme_indices(true)
        .find(|(_, g)| !g.chars().all(char::is_whitespace))
        .map_or(text.len(), |(i, _)| i);
    &text[start..]
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Level {
    Paragraph,
    Sentence,
    Grapheme,
}

struct Splitter<'a> {
    limit: usize,
    tokenizer: &'a TokenizerConfig,
}

impl Splitter<'_> {
    fn fits(&self, text: &str) -> bool {
        count_tokens(text, self.tokenizer) <= self.limit
    }

    /// Exact substrings of `text`, each within budget, concatenating to `text`.
    fn split<'t>(&self, text: &'t str, level: Level) -> Result<Vec<&'t str>, IngestError> {
        if self.fits(text) {
            return Ok(vec![text]);
        }
        let pieces: Vec<&str> = match level {
            Level::Paragraph => split_inclusive_blank_lines(text),
            Level::Sentence => text.split_sentence_bounds().collect(),
            Level::Grapheme => return self.pack_graphemes(text),
        };
        let next = match level {
            Level::Paragraph => Level::Sentence,
            _ => Level::Grapheme,
        };
        if pieces.len() <= 1 {
            return self.split(text, next);
        }
        let mut atoms = Vec::new();
        for piece in pieces {
            atoms.extend(self.split(piece, next)?);
        }
        Ok(self.pack_adjacent(text, atoms))
    }

    // Greedily re-joins adjacent sub-slices of `source` while they fit.
    fn pack_adjacent<'t>(&self, source: &'t str, atoms: Vec<&'t str>) -> Vec<&'t str> {
        let base = source.as_ptr() as usize;
        let mut out = Vec::new();
        let mut start: Option<usize> = None;
        let mut end = 0;
        for atom in atoms {
            let a_start = atom.as_ptr() as usize - base;
            let a_end = a_start + atom.len();
            match start {
                Some(s) if self.fits(&source[s..a_end]) => end = a_end,
                Some(s) => {
                    out.push(&source[s..end]);
                    start = Some(a_start);
                    end = a_end;
                }
                None => {
                    start = Some(a_start);
                    end = a_end;
                }
            }
        }
        if let Some(s) = start {
            out.push(&source[s..end]);
        }
        out
    }

    fn pack_graphemes<'t>(&self, text: &'t str) -> Result<Vec<&'t str>, IngestError> {
        let bounds: Vec<usize> = text
            .grapheme_indices(true)
            .map(|(i, _)| i)
            .chain(std::iter::once(text.len()))
            .collect();
        let mut out = Vec::new();
        let mut from = 0; // index into bounds
        while from + 1 < bounds.len() {
            // largest `to` with text[bounds[from]..bounds[to]] in budget
            let (mut lo, mut hi) = (from, bounds.len() - 1);
            while lo < hi {
                let mid = (lo + hi).div_ceil(2);
                if self.fits(&text[bounds[from]..bounds[mid]]) {
                    lo = mid;
                } else {
                    hi = mid - 1;
                }
            }
            if lo == from {
                let g = &text[bounds[from]..bounds[from + 1]];
                return Err(IngestError::UnsplittableGrapheme {
                    tokens: count_tokens(g, self.tokenizer),
                    limit: self.limit,
                });
            }
            out.push(&text[bounds[from]..bounds[lo]]);
            from = lo;
        }
        Ok(out)
    }
}

fn split_inclusive_blank_lines(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let bytes = text.as_bytes();
    let mut i = 0;
    while i + 1 < bytes.len() {
        if bytes[i] == b'\n' {
            // find next newline allowing only horizontal whitespace between
            let mut j = i + 1;
            while j < bytes.len() && matches!(bytes[j], b' ' | b'\t' | b'\r') {
                j += 1;
            }
            if j < bytes.len() && bytes[j] == b'\n' {
                let end = j + 1;
                out.push(&text[start..end]);
                start = end;
                i = end;
                continue;
            }
        }
        i += 1;
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

const SEGMENT_SEPARATOR: &str = "\n\n";

/// Packs segments greedily into chunks of at most `chunk_length` tokens,
/// splitting oversized segments at paragraph, sentence, then grapheme
/// boundaries.
pub fn chunk(
    segments: &[Segment],
    chunk_length: usize,
    tokenizer: &TokenizerConfig,
) -> Result<Vec<Chunk>, IngestError> {
    if chunk_length < 1 {
        return Err(IngestError::Config("chunk_length must be at least 1".into()));
    }
    if let TokenizerConfig::Heuristic { chars_per_token: 0 } = tokenizer {
        return Err(IngestError::Config("chars_per_token must be at least 1".into()));
    }
    let splitter = Splitter {
        limit: chunk_length,
        tokenizer,
    };

    let mut chunks: Vec<Chunk> = Vec::new();
    let mut text = String::new();
    let mut heading_path: Vec<String> = Vec::new();

    let emit = |text: &mut String, heading_path: &mut Vec<String>, chunks: &mut Vec<Chunk>| {
        let trimmed = trim_whitespace_graphemes(text);
        if !trimmed.is_empty() {
            chunks.push(Chunk {
                index: chunks.len(),
                token_count: count_tokens(trimmed, tokenizer),
                text: trimmed.to_owned(),
                heading_path: std::mem::take(heading_path),
            });
        }
        text.clear();
    };

    for seg in segments {
        let pieces = splitter.split(&seg.text, Level::Paragraph)?;
        // pieces are exact, contiguous slices of the segment
        for (i, piece) in pieces.into_iter().enumerate() {
            let sep = if i == 0 && !text.is_empty() {
                SEGMENT_SEPARATOR
            } else {
                ""
            };
            let candidate_len = count_tokens(&format!("{text}{sep}{piece}"), tokenizer);
            if !text.is_empty() && candidate_len > chunk_length {
                emit(&mut text, &mut heading_path, &mut chunks);
            }
            if text.is_empty() {
                heading_path = seg.heading_path.clone();
                // only the end of a whole chunk is trimmed: dropping a trailing
                // newline here could fuse it with a combining mark that follows
                text.push_str(trim_leading_whitespace_graphemes(piece));
            } else {
                text.push_str(sep);
                text.push_str(piece);
            }
        }
    }
    emit(&mut text, &mut heading_path, &mut chunks);
    Ok(chunks)
}

/// Segment + chunk in one call.
pub fn chunk_document(doc: &str, chunk_length: usize, tokenizer: &TokenizerConfig) -> Result<Vec<Chunk>, IngestError> {
    chunk(&segment(doc), chunk_length, tokenizer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const DEFAULT: TokenizerConfig = TokenizerConfig::Heuristic { chars_per_token: 4 };

    fn seg(text: &str, order: usize) -> Segment {
        Segment {
            heading_path: vec![],
            text: text.into(),
            order,
        }
    }

    #[test]
    fn heading_then_paragraphs() {
        let segs = segment("# A\npara1\n\npara2");
        assert_eq!(segs.len(), 2);
        assert!(segs.iter().all(|s| s.heading_path == vec!["A".to_string()]));
        assert_eq!(segs[0].text, "# A\npara1");
        assert_eq!(segs[1].text, "para2");
        assert_eq!(segs[1].order, 1);
    }

    #[test]
    fn empty_and_headingless_documents() {
        assert!(segment("").is_empty());
        let segs = segment("first paragraph\n\nsecond paragraph\n");
        assert_eq!(segs.len(), 2);
        assert!(segs.iter().all(|s| s.heading_path.is_empty()));
    }

    #[test]
    fn heading_nesting() {
        let doc = "# Report\nintro\n## Findings\n### H-1 Reentrancy\nbody\n## Appendix\nx";
        let segs = segment(doc);
        let paths: Vec<Vec<String>> = segs.iter().map(|s| s.heading_path.clone()).collect();
        assert_eq!(
            paths,
            vec![
                vec!["Report".to_string()],
                vec!["Report".into(), "Findings".into()],
                vec!["Report".into(), "Findings".into(), "H-1 Reentrancy".into()],
                vec!["Report".into(), "Appendix".into()],
            ]
        );
    }

    #[test]
    fn heading_followed_by_blank_line_stays_with_body() {
        let segs = segment("## Title\n\nBody text.");
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].text, "## Title\n\nBody text.");
    }

    #[test]
    fn code_fences_are_opaque() {
        let doc = "# A\n```solidity\n# not a heading\n\nstill code\n```\nafter";
        let segs = segment(doc);
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].heading_path, vec!["A".to_string()]);
    }

    #[test]
    fn hash_without_space_is_not_heading() {
        assert!(heading("#hashtag").is_none());
        assert_eq!(heading("## Closed ##").unwrap(), (2, "Closed".into()));
        assert!(heading("    # indented code").is_none());
    }

    #[test]
    fn token_counting() {
        assert_eq!(count_tokens("", &DEFAULT), 0);
        assert_eq!(count_tokens("abcdefgh", &DEFAULT), 2);
        assert_eq!(count_tokens("abcdefghi", &DEFAULT), 3);
        assert_eq!(count_tokens("héllo", &DEFAULT), 2);
        assert_eq!(count_tokens("a b  c\nd", &TokenizerConfig::Whitespace), 4);
        let t = "repeatable text";
        assert_eq!(count_tokens(t, &DEFAULT), count_tokens(t, &DEFAULT));
    }

    #[test]
    fn small_input_is_one_chunk() {
        let segs = vec![seg("alpha", 0), seg("beta", 1)];
        let chunks = chunk(&segs, DEFAULT_CHUNK_LENGTH, &DEFAULT).unwrap();
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].text, "alpha\n\nbeta");
    }

    #[test]
    fn oversized_segment_is_split_within_budget() {
        let limit = 50;
        let sentence = "The withdraw function sends ether before updating state. ";
        let mut body = String::new();
        while count_tokens(&body, &DEFAULT) < 3 * limit {
            body.push_str(sentence);
        }
        let chunks = chunk(&[seg(body.trim(), 0)], limit, &DEFAULT).unwrap();
        assert!(chunks.len() >= 3, "{}", chunks.len());
        for c in &chunks {
            assert!(c.token_count <= limit);
            assert_eq!(c.token_count, count_tokens(&c.text, &DEFAULT));
        }
    }

    #[test]
    fn zero_chunk_length_rejected() {
        assert!(matches!(chunk(&[], 0, &DEFAULT), Err(IngestError::Config(_))));
    }

    #[test]
    fn grapheme_larger_than_budget_is_an_error() {
        // family emoji: 7 scalar values, 2 tokens under chars/4
        let family = "\u{1F468}\u{200D}\u{1F469}\u{200D}\u{1F467}\u{200D}\u{1F466}";
        let err = chunk(&[seg(family, 0)], 1, &DEFAULT).unwrap_err();
        assert!(matches!(err, IngestError::UnsplittableGrapheme { .. }));
    }

    #[test]
    fn combining_marks_are_not_split() {
        let text = "e\u{301}".repeat(40);
        let chunks = chunk(&[seg(&text, 0)], 3, &DEFAULT).unwrap();
        for c in &chunks {
            assert!(!c.text.starts_with('\u{301}'));
            assert!(c.token_count <= 3);
        }
        let joined: String = chunks.iter().map(|c| c.text.as_str()).collect();
        assert_eq!(joined, text);
    }

    #[test]
    fn markdown_passthrough_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.md");
        std::fs::write(&p, "# Title\r\nbody\n").unwrap();
        assert_eq!(load_document(&p, None).unwrap(), "# Title\r\nbody\n");
        assert!(matches!(
            load_document(&dir.path().join("nope.md"), None),
            Err(IngestError::Io { .. })
        ));
    }

    #[cfg(unix)]
    #[test]
    fn converter_stdout_is_used_for_binary_reports() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("report.pdf");
        std::fs::write(&p, [0x25, 0x50, 0x44, 0x46, 0xff, 0xfe]).unwrap();
        let conv = ConverterConfig {
            program: "sh".into(),
            args: vec![
                "-c".into(),
                "test -f \"$0\" && printf '# Converted\\n'".into(),
                "{input}".into(),
            ],
            text_extensions: vec!["md".into()],
        };
        assert_eq!(load_document(&p, Some(&conv)).unwrap(), "# Converted\n");

        let failing = ConverterConfig {
            program: "sh".into(),
            args: vec!["-c".into(), "echo boom >&2; exit 3".into()],
            text_extensions: vec![],
        };
        match load_document(&p, Some(&failing)) {
            Err(IngestError::Conversion { stderr, .. }) => assert_eq!(stderr, "boom"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn newline_before_combining_mark_survives_packing() {
        let text = "?\u{301}\u{301}.#. .\u{301}?a?\u{301}\n aaaaaa\n\u{301}\n.aa.aaé.?a aaa\n\u{301}\u{301}";
        let chunks = chunk(&[seg(text, 0)], 10, &DEFAULT).unwrap();
        assert_eq!(chunks.len(), 2);
        assert!(chunks[0].text.ends_with("aaa"));
        assert_eq!(chunks[1].text, "\u{301}\u{301}");
    }

    fn visible_graphemes(text: &str) -> Vec<String> {
        text.graphemes(true)
            .filter(|g| !g.chars().all(char::is_whitespace))
            .map(String::from)
            .collect()
    }

    proptest! {
        #[test]
        fn chunks_respect_budget_and_lose_nothing(
            paras in prop::collection::vec("[a-zé\u{301} .!?\n#]{0,120}", 0..12),
            limit in 4usize..40,
        ) {
            let doc = paras.join("\n\n");
            let segs = segment(&doc);
            let chunks = chunk(&segs, limit, &DEFAULT).unwrap();
            let mut from_chunks = Vec::new();
            for (i, c) in chunks.iter().enumerate() {
                prop_assert_eq!(c.index, i);
                prop_assert!(count_tokens(&c.text, &DEFAULT) <= limit);
                from_chunks.extend(visible_graphemes(&c.text));
            }
            let from_segments: Vec<String> =
                segs.iter().flat_map(|s| visible_graphemes(&s.text)).collect();
            prop_assert_eq!(from_chunks, from_segments);
        }
    }
}
