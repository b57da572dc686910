//! Log templates and the constant/variable mapping.
//!
//! A template is a whitespace-normalized string in which every variable
//! position is the literal wildcard `<*>`. Wildcards may sit inside a token
//! (`attempt_<*>`), so matching works on characters with literal segments
//! between wildcards rather than on whole tokens.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The variable placeholder.
pub const WILDCARD: &str = "<*>";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("template is empty after whitespace normalization")]
    EmptyTemplate,
    #[error("token list has {tokens} entries but variable mask has {mask}")]
    MaskLength { tokens: usize, mask: usize },
}

/// Collapses every run of whitespace to a single space and trims both ends.
pub fn normalize_whitespace(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for token in text.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(token);
    }
    out
}

/// A normalized log template.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Template {
    text: String,
}

impl Template {
    /// Canonicalizes `raw` into a template.
    pub fn normalize(raw: &str) -> Result<Self, TemplateError> {
        let text = normalize_whitespace(raw);
        if text.is_empty() {
            return Err(TemplateError::EmptyTemplate);
        }
        Ok(Self { text })
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.text.split(' ')
    }

    pub fn wildcard_count(&self) -> usize {
        self.text.matches(WILDCARD).count()
    }

    /// Matches `content` against this template, returning the wildcard captures.
    pub fn match_content(&self, content: &str) -> Option<ParameterList> {
        match_template(content, self)
    }

    /// Substitutes `params` into the wildcards left to right.
    ///
    /// Returns `None` when the parameter count differs from the wildcard count.
    pub fn substitute(&self, params: &ParameterList) -> Option<String> {
        let segments: Vec<&str> = self.text.split(WILDCARD).collect();
        if segments.len() != params.len() + 1 {
            return None;
        }
        let mut out = String::from(segments[0]);
        for (value, literal) in params.iter().zip(&segments[1..]) {
            out.push_str(value);
            out.push_str(literal);
        }
        Some(out)
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

impl TryFrom<String> for Template {
    type Error = TemplateError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Template::normalize(&value)
    }
}

impl From<Template> for String {
    fn from(value: Template) -> Self {
        value.text
    }
}

impl std::str::FromStr for Template {
    type Err = TemplateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Template::normalize(s)
    }
}

/// Values captured at the wildcard positions of a template, in order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParameterList(Vec<String>);

impl ParameterList {
    pub fn new(values: Vec<String>) -> Self {
        Self(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, String> {
        self.0.iter()
    }

    pub fn into_inner(self) -> Vec<String> {
        self.0
    }
}

impl std::ops::Index<usize> for ParameterList {
    type Output = String;

    fn index(&self, index: usize) -> &String {
        &self.0[index]
    }
}

/// Applies the constant/variable mapping: masked tokens become `<*>`.
pub fn apply_mapping<S: AsRef<str>>(
    tokens: &[S],
    variable_mask: &[bool],
) -> Result<Template, TemplateError> {
    if tokens.len() != variable_mask.len() {
        return Err(TemplateError::MaskLength {
            tokens: tokens.len(),
            mask: variable_mask.len(),
        });
    }
    let mapped: Vec<&str> = tokens
        .iter()
        .zip(variable_mask)
        .map(|(tok, &var)| if var { WILDCARD } else { tok.as_ref() })
        .collect();
    Template::normalize(&mapped.join(" "))
}

/// Matches `content` against `template`.
///
/// Each wildcard captures a non-empty substring, preferring the shortest
/// capture for the leftmost wildcard first and backtracking only when the
/// remainder cannot match.
pub fn match_template(content: &str, template: &Template) -> Option<ParameterList> {
    let segments: Vec<&str> = template.as_str().split(WILDCARD).collect();
    let first = segments[0];
    let rest = &content.strip_prefix(first)?;
    let offset = content.len() - rest.len();
    if segments.len() == 1 {
        return rest.is_empty().then(ParameterList::default);
    }

    let mut matcher = Matcher {
        content,
        segments: &segments[1..],
        failed: HashSet::new(),
        captures: Vec::with_capacity(segments.len() - 1),
    };
    if matcher.capture(0, offset) {
        Some(ParameterList(matcher.captures))
    } else {
        None
    }
}

struct Matcher<'a> {
    content: &'a str,
    /// Literal segment following each wildcard.
    segments: &'a [&'a str],
    /// (wildcard index, start offset) pairs already known to fail.
    failed: HashSet<(usize, usize)>,
    captures: Vec<String>,
}

impl Matcher<'_> {
    fn capture(&mut self, wildcard: usize, start: usize) -> bool {
        if self.failed.contains(&(wildcard, start)) {
            return false;
        }
        let literal = self.segments[wildcard];
        let last = wildcard + 1 == self.segments.len();
        let tail = &self.content[start..];

        if last {
            // The trailing literal is anchored at the end of the content.
            if tail.len() > literal.len() && tail.ends_with(literal) {
                let end = self.content.len() - literal.len();
                if self.content.is_char_boundary(end) {
                    self.captures.push(self.content[start..end].to_owned());
                    return true;
                }
            }
            self.failed.insert((wildcard, start));
            return false;
        }

        for (rel, ch) in tail.char_indices() {
            let end = start + rel + ch.len_utf8();
            if !self.content[end..].starts_with(literal) {
                continue;
            }
            self.captures.push(self.content[start..end].to_owned());
            if self.capture(wildcard + 1, end + literal.len()) {
                return true;
            }
            self.captures.pop();
        }
        self.failed.insert((wildcard, start));
        false
    }
}
