use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum TemplateError {
    #[error("template {template:?}: missing slot {slot:?}")]
    MissingSlot { template: String, slot: String },
    #[error("reading template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Text(String),
    Slot(String),
}

/// Prompt text with `{name}` slots.
///
/// A slot is `{` + identifier + `}`. Any other brace is literal text.
/// Rendering is single-pass: braces inside slot values are never expanded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    name: String,
    body: String,
    segments: Vec<Segment>,
}

impl PromptTemplate {
    pub fn new(name: impl Into<String>, body: impl Into<String>) -> Self {
        let body = body.into();
        let segments = parse_segments(&body);
        Self {
            name: name.into(),
            body,
            segments,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    /// Slot names referenced by the body, sorted and deduplicated.
    pub fn slots(&self) -> BTreeSet<&str> {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Slot(n) => Some(n.as_str()),
                Segment::Text(_) => None,
            })
            .collect()
    }

    /// Substitutes every slot. Extra entries in `values` are ignored.
    pub fn render(&self, values: &[(&str, &str)]) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(self.body.len());
        for seg in &self.segments {
            match seg {
                Segment::Text(t) => out.push_str(t),
                Segment::Slot(name) => {
                    let value = values
                        .iter()
                        .find(|(k, _)| k == name)
                        .map(|(_, v)| *v)
                        .ok_or_else(|| TemplateError::MissingSlot {
                            template: self.name.clone(),
                            slot: name.clone(),
                        })?;
                    out.push_str(value);
                }
            }
        }
        Ok(out)
    }
}

fn parse_segments(body: &str) -> Vec<Segment> {
    let mut segments = Vec::new();
    let mut text = String::new();
    let mut rest = body;
    while let Some(open) = rest.find('{') {
        text.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if is_identifier(&after[..close]) => {
                if !text.is_empty() {
                    segments.push(Segment::Text(std::mem::take(&mut text)));
                }
                segments.push(Segment::Slot(after[..close].to_string()));
                rest = &after[close + 1..];
            }
            _ => {
                text.push('{');
                rest = after;
            }
        }
    }
    text.push_str(rest);
    if !text.is_empty() {
        segments.push(Segment::Text(text));
    }
    segments
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// The prompt shells used by each stage, plus the shared linking instruction.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    pub summarize: PromptTemplate,
    pub filter: PromptTemplate,
    pub category: PromptTemplate,
    pub contextual: PromptTemplate,
    /// Wraps the exemplar block inside the contextual prompt; skipped when no exemplar is selected.
    pub exemplar: PromptTemplate,
    pub prior: PromptTemplate,
    pub merge: PromptTemplate,
    /// Entity-linking instruction substituted into `{instruction}`.
    pub instruction: String,
}

const DEFAULTS: [(&str, &str); 8] = [
    ("summarize.tmpl", include_str!("../../templates/summarize.tmpl")),
    ("filter.tmpl", include_str!("../../templates/filter.tmpl")),
    ("category.tmpl", include_str!("../../templates/category.tmpl")),
    ("contextual.tmpl", include_str!("../../templates/contextual.tmpl")),
    ("exemplar.tmpl", include_str!("../../templates/exemplar.tmpl")),
    ("prior.tmpl", include_str!("../../templates/prior.tmpl")),
    ("merge.tmpl", include_str!("../../templates/merge.tmpl")),
    ("instruction.txt", include_str!("../../templates/instruction.txt")),
];

impl Default for TemplateSet {
    fn default() -> Self {
        let map = DEFAULTS.map(|(name, body)| (name, strip_newline(body).to_string()));
        Self::from_files(&map)
    }
}

impl TemplateSet {
    /// Defaults with any same-named file in `dir` taking precedence.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, TemplateError> {
        let dir = dir.as_ref();
        let mut files = DEFAULTS.map(|(name, body)| (name, strip_newline(body).to_string()));
        for (name, body) in files.iter_mut() {
            let path = dir.join(name);
            if path.is_file() {
                let text = fs::read_to_string(&path).map_err(|source| TemplateError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                *body = strip_newline(&text).to_string();
            }
        }
        Ok(Self::from_files(&files))
    }

    /// Writes the templates as files, e.g. to seed a user-editable directory.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> std::io::Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        for t in [
            &self.summarize,
            &self.filter,
            &self.category,
            &self.contextual,
            &self.exemplar,
            &self.prior,
            &self.merge,
        ] {
            fs::write(dir.join(format!("{}.tmpl", t.name())), format!("{}\n", t.body()))?;
        }
        fs::write(dir.join("instruction.txt"), format!("{}\n", self.instruction))
    }

    fn from_files(files: &[(&str, String)]) -> Self {
        let get = |name: &str| {
            files
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, b)| b.clone())
                .unwrap_or_default()
        };
        let t = |name: &str| PromptTemplate::new(name, get(&format!("{name}.tmpl")));
        Self {
            summarize: t("summarize"),
            filter: t("filter"),
            category: t("category"),
            contextual: t("contextual"),
            exemplar: t("exemplar"),
            prior: t("prior"),
            merge: t("merge"),
            instruction: get("instruction.txt"),
        }
    }
}

fn strip_newline(s: &str) -> &str {
    s.strip_suffix('\n').map_or(s, |s| s.strip_suffix('\r').unwrap_or(s))
}
