//! Incremental parser for the image tag protocol.
//!
//! The LLM is prompted to wrap image descriptions in `<image>…</image>` or
//! `<edit>…</edit>`; `<select>N</select>` is an extension used to pick one
//! image out of the most recent batch. The parser accepts arbitrary chunk
//! boundaries and never fails: anything that is not a well-formed tag is
//! passed through as text.
//!
//! Deltas are emitted as soon as they are determined, so how a stream is
//! split into chunks changes how text is split across `TextDelta` /
//! `DescDelta` events. [`coalesce`] merges adjacent deltas; after coalescing,
//! a streamed parse and [`parse_batch`] are identical for every chunking.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Longest delimiter token, `</select>`.
pub const MAX_TOKEN_CHARS: usize = 9;

/// Longest digit run accepted inside `<select>`; anything longer degrades to text.
const MAX_SELECT_CHARS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TagKind {
    Image,
    Edit,
    /// Not part of the original two-tag protocol.
    Select,
}

impl TagKind {
    pub const ALL: [TagKind; 3] = [TagKind::Image, TagKind::Edit, TagKind::Select];

    pub fn name(self) -> &'static str {
        match self {
            TagKind::Image => "image",
            TagKind::Edit => "edit",
            TagKind::Select => "select",
        }
    }

    pub fn is_extension(self) -> bool {
        matches!(self, TagKind::Select)
    }

    pub fn open_token(self) -> &'static str {
        match self {
            TagKind::Image => "<image>",
            TagKind::Edit => "<edit>",
            TagKind::Select => "<select>",
        }
    }

    pub fn close_token(self) -> &'static str {
        match self {
            TagKind::Image => "</image>",
            TagKind::Edit => "</edit>",
            TagKind::Select => "</select>",
        }
    }
}

impl fmt::Display for TagKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamEvent {
    TextDelta(String),
    TagOpen(TagKind),
    DescDelta(TagKind, String),
    TagClose {
        kind: TagKind,
        full_description: String,
        /// The stream ended before the close token arrived.
        implicit: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Mode {
    Outside,
    Inside { kind: TagKind, description: String },
}

/// Streaming parser state. One per LLM stream.
#[derive(Debug, Clone)]
pub struct TagParser {
    mode: Mode,
    /// Characters that may be the start of a delimiter token.
    pending: String,
    /// Determined but not yet emitted text (outside) or description (inside).
    out: String,
    events: Vec<StreamEvent>,
}

impl Default for TagParser {
    fn default() -> Self {
        Self::new()
    }
}

impl TagParser {
    pub fn new() -> Self {
        Self {
            mode: Mode::Outside,
            pending: String::new(),
            out: String::new(),
            events: Vec::new(),
        }
    }

    pub fn is_outside(&self) -> bool {
        matches!(self.mode, Mode::Outside)
    }

    /// Number of characters held back because they may begin a delimiter.
    pub fn buffered_chars(&self) -> usize {
        self.pending.chars().count()
    }

    pub fn feed(&mut self, chunk: &str) -> Vec<StreamEvent> {
        for c in chunk.chars() {
            self.push_char(c);
        }
        self.flush_out();
        std::mem::take(&mut self.events)
    }

    /// Flushes everything still buffered. Consumes the parser.
    pub fn finalize(mut self) -> Vec<StreamEvent> {
        let pending = std::mem::take(&mut self.pending);
        match std::mem::replace(&mut self.mode, Mode::Outside) {
            Mode::Outside => {
                self.out.push_str(&pending);
                self.flush_out();
            }
            Mode::Inside {
                kind: TagKind::Select,
                mut description,
            } => {
                description.push_str(&pending);
                match parse_select_index(&description) {
                    Some(_) => {
                        self.events.push(StreamEvent::TagOpen(TagKind::Select));
                        self.events
                            .push(StreamEvent::DescDelta(TagKind::Select, description.clone()));
                        self.events.push(StreamEvent::TagClose {
                            kind: TagKind::Select,
                            full_description: description.trim().to_string(),
                            implicit: true,
                        });
                    }
                    None => {
                        self.out.push_str(TagKind::Select.open_token());
                        self.out.push_str(&description);
                        self.flush_out();
                    }
                }
            }
            Mode::Inside { kind, description } => {
                self.out.push_str(&pending);
                let mut description = description;
                let tail = std::mem::take(&mut self.out);
                if !tail.is_empty() {
                    self.events.push(StreamEvent::DescDelta(kind, tail.clone()));
                }
                description.push_str(&tail);
                self.events.push(StreamEvent::TagClose {
                    kind,
                    full_description: description.trim().to_string(),
                    implicit: true,
                });
            }
        }
        self.events
    }

    fn push_char(&mut self, c: char) {
        if self.pending.is_empty() && c != '<' {
            self.accept_plain(c);
            return;
        }
        self.pending.push(c);
        self.match_pending();
    }

    /// A character that cannot start a delimiter.
    fn accept_plain(&mut self, c: char) {
        if let Mode::Inside {
            kind: TagKind::Select,
            description,
        } = &mut self.mode
        {
            if c.is_ascii_digit() || c.is_whitespace() {
                if description.chars().count() >= MAX_SELECT_CHARS {
                    self.degrade_select();
                    self.accept_plain(c);
                } else {
                    description.push(c);
                }
            } else {
                self.degrade_select();
                self.accept_plain(c);
            }
            return;
        }
        self.out.push(c);
    }

    fn match_pending(&mut self) {
        let candidates: &[&str] = match &self.mode {
            Mode::Outside => &["<image>", "<edit>", "<select>"],
            Mode::Inside { kind, .. } => match kind {
                TagKind::Image => &["</image>"],
                TagKind::Edit => &["</edit>"],
                TagKind::Select => &["</select>"],
            },
        };

        if let Some(token) = candidates.iter().find(|t| **t == self.pending) {
            let token = *token;
            self.pending.clear();
            self.complete_token(token);
            return;
        }
        if candidates.iter().any(|t| t.starts_with(self.pending.as_str())) {
            return;
        }

        // Not a delimiter: the leading '<' is ordinary content, the rest is
        // rescanned since it may itself start a token. A broken select is
        // rescanned whole, as its '<' may open a tag once outside.
        let pending = std::mem::take(&mut self.pending);
        let mut chars = pending.chars();
        if matches!(
            self.mode,
            Mode::Inside {
                kind: TagKind::Select,
                ..
            }
        ) {
            self.degrade_select();
        } else {
            self.out.push(chars.next().expect("pending is non-empty"));
        }
        for c in chars {
            self.push_char(c);
        }
    }

    fn complete_token(&mut self, token: &str) {
        match std::mem::replace(&mut self.mode, Mode::Outside) {
            Mode::Outside => {
                let kind = TagKind::ALL
                    .into_iter()
                    .find(|k| k.open_token() == token)
                    .expect("token is an open token");
                self.flush_out();
                if kind != TagKind::Select {
                    self.events.push(StreamEvent::TagOpen(kind));
                }
                self.mode = Mode::Inside {
                    kind,
                    description: String::new(),
                };
            }
            Mode::Inside {
                kind: TagKind::Select,
                description,
            } => match parse_select_index(&description) {
                Some(_) => {
                    self.events.push(StreamEvent::TagOpen(TagKind::Select));
                    self.events
                        .push(StreamEvent::DescDelta(TagKind::Select, description.clone()));
                    self.events.push(StreamEvent::TagClose {
                        kind: TagKind::Select,
                        full_description: description.trim().to_string(),
                        implicit: false,
                    });
                }
                None => {
                    self.out.push_str(TagKind::Select.open_token());
                    self.out.push_str(&description);
                    self.out.push_str(TagKind::Select.close_token());
                }
            },
            Mode::Inside {
                kind,
                mut description,
            } => {
                let tail = std::mem::take(&mut self.out);
                if !tail.is_empty() {
                    self.events.push(StreamEvent::DescDelta(kind, tail.clone()));
                }
                description.push_str(&tail);
                self.events.push(StreamEvent::TagClose {
                    kind,
                    full_description: description.trim().to_string(),
                    implicit: false,
                });
            }
        }
    }

    /// Turns a partially read `<select>` back into plain text.
    fn degrade_select(&mut self) {
        if let Mode::Inside {
            kind: TagKind::Select,
            description,
        } = std::mem::replace(&mut self.mode, Mode::Outside)
        {
            self.out.push_str(TagKind::Select.open_token());
            self.out.push_str(&description);
        }
    }

    fn flush_out(&mut self) {
        if self.out.is_empty() {
            return;
        }
        let text = std::mem::take(&mut self.out);
        match &mut self.mode {
            Mode::Outside => self.events.push(StreamEvent::TextDelta(text)),
            // select content is held until the tag validates
            Mode::Inside {
                kind: TagKind::Select,
                ..
            } => unreachable!("select content never reaches the output buffer"),
            Mode::Inside { kind, description } => {
                description.push_str(&text);
                self.events.push(StreamEvent::DescDelta(*kind, text));
            }
        }
    }
}

/// Positive 1-based index carried by a `<select>` tag.
pub fn parse_select_index(content: &str) -> Option<u32> {
    let trimmed = content.trim();
    if trimmed.is_empty() || !trimmed.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    trimmed.parse::<u32>().ok().filter(|n| *n > 0)
}

pub fn parse_batch(text: &str) -> Vec<StreamEvent> {
    let mut parser = TagParser::new();
    let mut events = parser.feed(text);
    events.extend(parser.finalize());
    events
}

/// Merges adjacent `TextDelta`s and adjacent `DescDelta`s of the same kind.
pub fn coalesce(events: impl IntoIterator<Item = StreamEvent>) -> Vec<StreamEvent> {
    let mut merged: Vec<StreamEvent> = Vec::new();
    for event in events {
        match (merged.last_mut(), event) {
            (Some(StreamEvent::TextDelta(prev)), StreamEvent::TextDelta(next)) => {
                prev.push_str(&next)
            }
            (Some(StreamEvent::DescDelta(pk, prev)), StreamEvent::DescDelta(nk, next))
                if *pk == nk =>
            {
                prev.push_str(&next)
            }
            (_, event) => merged.push(event),
        }
    }
    merged
}

/// Rebuilds the raw text an event sequence was parsed from.
pub fn reconstruct(events: &[StreamEvent]) -> String {
    let mut out = String::new();
    for event in events {
        match event {
            StreamEvent::TextDelta(text) => out.push_str(text),
            StreamEvent::TagOpen(kind) => out.push_str(kind.open_token()),
            StreamEvent::DescDelta(_, text) => out.push_str(text),
            StreamEvent::TagClose { kind, implicit, .. } => {
                if !implicit {
                    out.push_str(kind.close_token());
                }
            }
        }
    }
    out
}
