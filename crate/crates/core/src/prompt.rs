//! Prompt templates with named slots.
//!
//! Template syntax:
//!
//! * `{{name}}` inserts a value.
//! * `{{#name}} ... {{/name}}` repeats its body once per item of list `name`;
//!   slots inside the body resolve against the item first, then the outer
//!   values.
//!
//! Captions and candidate explanations are inserted as role-tagged blocks,
//! `<<novel: text>>`, `<<reference 2: text>>`, `<<candidate 1: text>>`, with
//! `\`, `<` and `>` backslash-escaped inside the text. [`parse_blocks`]
//! recovers them from a rendered prompt.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TemplateError {
    #[error("template {template:?}: {message}")]
    Syntax { template: String, message: String },
    #[error("template {template:?} is missing required slot {slot:?}")]
    MissingSlot { template: String, slot: String },
    #[error("template {template:?}: no value for slot {slot:?}")]
    Unbound { template: String, slot: String },
    #[error("reading template {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq)]
enum Segment {
    Text(String),
    Slot(String),
    Section { name: String, body: Vec<Segment> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    name: String,
    source: String,
    segments: Vec<Segment>,
}

pub type Item = BTreeMap<String, String>;

/// Values and lists a template renders against.
#[derive(Debug, Clone, Default)]
pub struct RenderContext {
    values: Item,
    lists: BTreeMap<String, Vec<Item>>,
}

impl RenderContext {
    pub fn value(mut self, name: &str, v: impl Into<String>) -> Self {
        self.values.insert(name.into(), v.into());
        self
    }

    pub fn list(mut self, name: &str, items: Vec<Item>) -> Self {
        self.lists.insert(name.into(), items);
        self
    }
}

impl PromptTemplate {
    pub fn parse(name: &str, source: &str) -> Result<Self, TemplateError> {
        let mut rest = source;
        // stack of open sections: (name, segments collected so far)
        let mut stack: Vec<(String, Vec<Segment>)> = vec![(String::new(), Vec::new())];
        let syntax = |message: String| TemplateError::Syntax { template: name.into(), message };
        while let Some(start) = rest.find("{{") {
            let (text, after) = rest.split_at(start);
            if !text.is_empty() {
                stack.last_mut().unwrap().1.push(Segment::Text(text.into()));
            }
            let end = after.find("}}").ok_or_else(|| syntax("unterminated '{{'".into()))?;
            let tag = after[2..end].trim();
            rest = &after[end + 2..];
            if let Some(section) = tag.strip_prefix('#') {
                stack.push((section.trim().into(), Vec::new()));
            } else if let Some(section) = tag.strip_prefix('/') {
                let (open, body) = stack.pop().filter(|_| !stack.is_empty()).ok_or_else(|| syntax(format!("stray closing tag {section:?}")))?;
                if open != section.trim() || stack.is_empty() {
                    return Err(syntax(format!("closing {section:?} does not match open {open:?}")));
                }
                stack.last_mut().unwrap().1.push(Segment::Section { name: open, body });
            } else if tag.is_empty() || !tag.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(syntax(format!("bad slot name {tag:?}")));
            } else {
                stack.last_mut().unwrap().1.push(Segment::Slot(tag.into()));
            }
        }
        if !rest.is_empty() {
            stack.last_mut().unwrap().1.push(Segment::Text(rest.into()));
        }
        if stack.len() != 1 {
            return Err(syntax(format!("unclosed section {:?}", stack.last().unwrap().0)));
        }
        Ok(Self { name: name.into(), source: source.into(), segments: stack.pop().unwrap().1 })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    fn has_slot(segments: &[Segment], slot: &str) -> bool {
        segments.iter().any(|s| matches!(s, Segment::Slot(n) if n == slot))
    }

    /// Fails unless the template has top-level slot `slot`.
    pub fn require_slot(&self, slot: &str) -> Result<(), TemplateError> {
        if Self::has_slot(&self.segments, slot) {
            Ok(())
        } else {
            Err(TemplateError::MissingSlot { template: self.name.clone(), slot: slot.into() })
        }
    }

    /// Fails unless the template has section `section` whose body uses `slot`.
    pub fn require_section(&self, section: &str, slot: &str) -> Result<(), TemplateError> {
        let found = self
            .segments
            .iter()
            .any(|s| matches!(s, Segment::Section { name, body } if name == section && Self::has_slot(body, slot)));
        if found {
            Ok(())
        } else {
            Err(TemplateError::MissingSlot { template: self.name.clone(), slot: format!("{section}.{slot}") })
        }
    }

    pub fn render(&self, ctx: &RenderContext) -> Result<String, TemplateError> {
        let mut out = String::new();
        self.render_into(&self.segments, ctx, None, &mut out)?;
        Ok(out)
    }

    fn render_into(&self, segments: &[Segment], ctx: &RenderContext, item: Option<&Item>, out: &mut String) -> Result<(), TemplateError> {
        for seg in segments {
            match seg {
                Segment::Text(t) => out.push_str(t),
                Segment::Slot(name) => {
                    let v = item
                        .and_then(|i| i.get(name))
                        .or_else(|| ctx.values.get(name))
                        .ok_or_else(|| TemplateError::Unbound { template: self.name.clone(), slot: name.clone() })?;
                    out.push_str(v);
                }
                Segment::Section { name, body } => {
                    for it in ctx.lists.get(name).map(Vec::as_slice).unwrap_or_default() {
                        self.render_into(body, ctx, Some(it), out)?;
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        if matches!(c, '\\' | '<' | '>') {
            out.push('\\');
        }
        out.push(c);
    }
    out
}

pub fn unescape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            if let Some(n) = chars.next() {
                out.push(n);
            }
        } else {
            out.push(c);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BlockRole {
    Novel,
    Reference(usize),
    Candidate(usize),
}

impl std::fmt::Display for BlockRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BlockRole::Novel => write!(f, "novel"),
            BlockRole::Reference(i) => write!(f, "reference {i}"),
            BlockRole::Candidate(i) => write!(f, "candidate {i}"),
        }
    }
}

pub fn format_block(role: &BlockRole, text: &str) -> String {
    format!("<<{role}: {}>>", escape(text))
}

/// Every role-tagged block in `prompt`, in order of appearance.
pub fn parse_blocks(prompt: &str) -> Vec<(BlockRole, String)> {
    static BLOCK: OnceLock<Regex> = OnceLock::new();
    let re = BLOCK.get_or_init(|| {
        Regex::new(r"<<(novel|reference (\d+)|candidate (\d+)): ((?:[^\\<>]|\\.)*)>>").expect("valid regex")
    });
    re.captures_iter(prompt)
        .filter_map(|c| {
            let role = match (&c[1], c.get(2), c.get(3)) {
                ("novel", _, _) => BlockRole::Novel,
                (_, Some(i), _) => BlockRole::Reference(i.as_str().parse().ok()?),
                (_, _, Some(i)) => BlockRole::Candidate(i.as_str().parse().ok()?),
                _ => return None,
            };
            Some((role, unescape(&c[4])))
        })
        .collect()
}

pub const TEMPLATE_VERSION: &str = "v1";

/// The full set of prompts an explanation run uses.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub version: String,
    /// Instruction sent with each image to the captioning model.
    pub caption: String,
    /// Novel caption against one caption per cluster.
    pub difference: PromptTemplate,
    /// Used when there is nothing to compare against.
    pub describe: PromptTemplate,
    /// Merges several candidate explanations.
    pub consensus: PromptTemplate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSetInfo {
    pub version: String,
    pub caption_sha256: String,
    pub difference_sha256: String,
    pub describe_sha256: String,
    pub consensus_sha256: String,
}

impl PromptSet {
    pub fn builtin() -> Self {
        Self::from_sources(
            TEMPLATE_VERSION,
            include_str!("../templates/caption.v1.txt"),
            include_str!("../templates/difference.v1.txt"),
            include_str!("../templates/describe.v1.txt"),
            include_str!("../templates/consensus.v1.txt"),
        )
        .expect("built-in templates are valid")
    }

    pub fn from_sources(version: &str, caption: &str, difference: &str, describe: &str, consensus: &str) -> Result<Self, TemplateError> {
        let difference = PromptTemplate::parse("difference", difference)?;
        difference.require_slot("novel")?;
        difference.require_section("references", "reference")?;
        let describe = PromptTemplate::parse("describe", describe)?;
        describe.require_slot("novel")?;
        let consensus = PromptTemplate::parse("consensus", consensus)?;
        consensus.require_section("candidates", "candidate")?;
        Ok(Self { version: version.into(), caption: caption.trim_end().into(), difference, describe, consensus })
    }

    /// Loads `caption.txt`, `difference.txt`, `describe.txt` and
    /// `consensus.txt` from `dir`.
    pub fn load_dir(dir: &Path, version: &str) -> Result<Self, TemplateError> {
        let read = |file: &str| {
            let path = dir.join(file);
            std::fs::read_to_string(&path)
                .map_err(|e| TemplateError::Io { path: path.display().to_string(), message: e.to_string() })
        };
        Self::from_sources(version, &read("caption.txt")?, &read("difference.txt")?, &read("describe.txt")?, &read("consensus.txt")?)
    }

    pub fn info(&self) -> PromptSetInfo {
        use sha2::{Digest, Sha256};
        let h = |s: &str| hex::encode(Sha256::digest(s.as_bytes()));
        PromptSetInfo {
            version: self.version.clone(),
            caption_sha256: h(&self.caption),
            difference_sha256: h(self.difference.source()),
            describe_sha256: h(self.describe.source()),
            consensus_sha256: h(self.consensus.source()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_slots_and_sections() {
        let t = PromptTemplate::parse("t", "A={{a}};{{#xs}}[{{i}}:{{x}}|{{a}}]{{/xs}}.").unwrap();
        let item = |i: &str, x: &str| Item::from([("i".into(), i.into()), ("x".into(), x.into())]);
        let ctx = RenderContext::default().value("a", "1").list("xs", vec![item("1", "p"), item("2", "q")]);
        assert_eq!(t.render(&ctx).unwrap(), "A=1;[1:p|1][2:q|1].");
        let empty = RenderContext::default().value("a", "1");
        assert_eq!(t.render(&empty).unwrap(), "A=1;.");
    }

    #[test]
    fn syntax_errors() {
        for bad in ["{{a", "{{#x}}no close", "{{/x}}", "{{#x}}{{/y}}", "{{a b}}", "{{}}"] {
            assert!(matches!(PromptTemplate::parse("t", bad), Err(TemplateError::Syntax { .. })), "{bad}");
        }
        let t = PromptTemplate::parse("t", "{{missing}}").unwrap();
        assert!(matches!(t.render(&RenderContext::default()), Err(TemplateError::Unbound { .. })));
    }

    #[test]
    fn inserted_values_are_not_reinterpreted() {
        let t = PromptTemplate::parse("t", "{{a}}").unwrap();
        assert_eq!(t.render(&RenderContext::default().value("a", "{{b}}")).unwrap(), "{{b}}");
    }

    #[test]
    fn required_slots() {
        let t = PromptTemplate::parse("difference", "{{novel}} {{#references}}{{index}}{{/references}}").unwrap();
        assert!(t.require_slot("novel").is_ok());
        assert!(matches!(t.require_section("references", "reference"), Err(TemplateError::MissingSlot { .. })));
        assert!(PromptSet::from_sources("x", "c", "{{#references}}{{reference}}{{/references}}", "{{novel}}", "{{#candidates}}{{candidate}}{{/candidates}}").is_err());
    }

    #[test]
    fn block_round_trip_with_delimiters() {
        let nasty = r"a <<novel: x>> b \ c >> <";
        let prompt = format!("intro {} mid {}", format_block(&BlockRole::Novel, nasty), format_block(&BlockRole::Reference(3), "plain"));
        let blocks = parse_blocks(&prompt);
        assert_eq!(blocks, vec![(BlockRole::Novel, nasty.to_string()), (BlockRole::Reference(3), "plain".to_string())]);
        assert_eq!(unescape(&escape(nasty)), nasty);
    }

    #[test]
    fn builtin_set_is_valid() {
        let set = PromptSet::builtin();
        assert_eq!(set.version, "v1");
        assert!(!set.caption.is_empty());
        assert_eq!(set.info().version, "v1");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn escape_round_trips(s in ".*") {
                prop_assert_eq!(unescape(&escape(&s)), s.clone());
                let blocks = parse_blocks(&format_block(&BlockRole::Candidate(1), &s));
                prop_assert_eq!(blocks, vec![(BlockRole::Candidate(1), s)]);
            }
        }
    }
}
