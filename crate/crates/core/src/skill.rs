//! Skill directories: parsing, surgical patching, mirroring and lineage.
//!
//! A skill is a directory with a top-level `SKILL.md`:
//!
//! ```markdown
//! ---
//! name: schedule-solver
//! description: Solve flexible job-shop instances from runtime inputs.
//! primary_script: scripts/solve.py
//! ---
//!
//! ## Run first
//! `python scripts/solve.py <input-dir>`
//!
//! ## Constraints
//! ...
//! ```
//!
//! Section order is preserved exactly; the hoisting audit depends on it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audit::AuditReport;
use crate::error::{Error, Result};
use crate::util::{files_digest, read_tree, sha256_hex};

pub const MANIFEST_FILE: &str = "SKILL.md";
pub const SCRIPTS_DIR: &str = "scripts/";

/// A relative, normalized, `/`-separated path inside an artifact root.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct RelPath(String);

impl RelPath {
    pub fn new(raw: impl Into<String>) -> Result<Self> {
        let raw = raw.into();
        let invalid = |reason| Error::InvalidPath {
            path: raw.clone(),
            reason,
        };
        if raw.is_empty() {
            return Err(invalid("empty path"));
        }
        if raw.starts_with('/') || raw.contains('\\') || raw.contains(':') {
            return Err(invalid("must be relative with '/' separators"));
        }
        for part in raw.split('/') {
            match part {
                "" => return Err(invalid("empty component")),
                "." | ".." => return Err(invalid("not normalized or escapes the root")),
                _ => {}
            }
        }
        Ok(RelPath(raw))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn file_name(&self) -> &str {
        self.0.rsplit('/').next().unwrap_or(&self.0)
    }
}

impl TryFrom<String> for RelPath {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        RelPath::new(s)
    }
}

impl From<RelPath> for String {
    fn from(p: RelPath) -> String {
        p.0
    }
}

impl fmt::Display for RelPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    /// Heading text without the leading `#`s; empty for a preamble.
    pub heading: String,
    pub level: u8,
    pub text: String,
    /// 1-based line range of the section inside the file, inclusive start,
    /// exclusive end.
    pub lines: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkillManifest {
    pub name: String,
    pub description: String,
    pub primary_script: Option<String>,
    pub extra: BTreeMap<String, String>,
    pub body_sections: Vec<Section>,
}

impl SkillManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let doc = MarkdownDoc::parse(text)?;
        let fm = doc
            .frontmatter
            .ok_or_else(|| Error::Frontmatter("SKILL.md must open with a '---' block".into()))?;
        let mut fields = parse_frontmatter_fields(&fm.body)?;
        let name = fields.remove("name").unwrap_or_default();
        let description = fields.remove("description").unwrap_or_default();
        if name.trim().is_empty() {
            return Err(Error::Frontmatter("name must be non-empty".into()));
        }
        if description.trim().is_empty() {
            return Err(Error::Frontmatter("description must be non-empty".into()));
        }
        let primary_script = fields.remove("primary_script").filter(|s| !s.is_empty());
        Ok(SkillManifest {
            name,
            description,
            primary_script,
            extra: fields,
            body_sections: doc.sections,
        })
    }

    /// Index of the first section whose body names the primary script.
    pub fn invocation_section(&self) -> Option<usize> {
        let script = self.primary_script.as_deref()?;
        let file = script.rsplit('/').next().unwrap_or(script);
        self.body_sections
            .iter()
            .position(|s| s.text.contains(script) || s.text.contains(file))
    }

    /// True when the primary script's invocation is the first section with
    /// prose in it.
    pub fn invocation_hoisted(&self) -> bool {
        match self.invocation_section() {
            Some(idx) => self.body_sections[..idx]
                .iter()
                .all(|s| section_body(s).trim().is_empty()),
            None => false,
        }
    }
}

/// Section text minus its heading line.
pub fn section_body(section: &Section) -> &str {
    if section.heading.is_empty() && section.level == 0 {
        return &section.text;
    }
    match section.text.find('\n') {
        Some(i) => &section.text[i + 1..],
        None => "",
    }
}

#[derive(Debug, Clone)]
struct Frontmatter {
    /// Full text including both delimiter lines and trailing newline.
    raw: String,
    body: String,
}

/// A markdown file split into an optional frontmatter block, a prefix of
/// blank lines, and ordered sections. Concatenating the parts reproduces the
/// input exactly.
#[derive(Debug, Clone)]
struct MarkdownDoc {
    frontmatter: Option<Frontmatter>,
    prefix: String,
    sections: Vec<Section>,
}

impl MarkdownDoc {
    fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.split_inclusive('\n').collect();
        let mut idx = 0;
        let mut frontmatter = None;
        if lines.first().map(|l| l.trim_end()) == Some("---") {
            let close = lines[1..]
                .iter()
                .position(|l| l.trim_end() == "---")
                .ok_or_else(|| Error::Frontmatter("unterminated '---' block".into()))?
                + 1;
            frontmatter = Some(Frontmatter {
                raw: lines[..=close].concat(),
                body: lines[1..close].concat(),
            });
            idx = close + 1;
        }
        let mut prefix = String::new();
        while idx < lines.len() && lines[idx].trim().is_empty() {
            prefix.push_str(lines[idx]);
            idx += 1;
        }
        let mut sections: Vec<Section> = Vec::new();
        let mut in_fence = false;
        for (n, line) in lines.iter().enumerate().skip(idx) {
            let trimmed = line.trim_start();
            if trimmed.starts_with("```") || trimmed.starts_with("~~~") {
                in_fence = !in_fence;
            }
            let heading = if in_fence { None } else { heading_of(line) };
            match (heading, sections.last_mut()) {
                (Some((level, title)), _) => sections.push(Section {
                    heading: title,
                    level,
                    text: line.to_string(),
                    lines: (n + 1, n + 2),
                }),
                (None, Some(cur)) => {
                    cur.text.push_str(line);
                    cur.lines.1 = n + 2;
                }
                (None, None) => sections.push(Section {
                    heading: String::new(),
                    level: 0,
                    text: line.to_string(),
                    lines: (n + 1, n + 2),
                }),
            }
        }
        Ok(MarkdownDoc {
            frontmatter,
            prefix,
            sections,
        })
    }

    fn render(&self) -> String {
        let mut out = String::new();
        if let Some(fm) = &self.frontmatter {
            out.push_str(&fm.raw);
        }
        out.push_str(&self.prefix);
        let n = self.sections.len();
        for (i, s) in self.sections.iter().enumerate() {
            out.push_str(&s.text);
            if i + 1 < n && !s.text.ends_with('\n') {
                out.push('\n');
            }
        }
        out
    }
}

fn heading_of(line: &str) -> Option<(u8, String)> {
    let line = line.trim_end();
    let hashes = line.bytes().take_while(|b| *b == b'#').count();
    if hashes == 0 || hashes > 6 {
        return None;
    }
    let rest = &line[hashes..];
    if !rest.is_empty() && !rest.starts_with(' ') {
        return None;
    }
    Some((hashes as u8, rest.trim().to_string()))
}

/// Parse `key: value` frontmatter lines. Supports quoted values and `|`/`>`
/// block scalars with indented continuation lines.
fn parse_frontmatter_fields(body: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let lines: Vec<&str> = body.lines().collect();
    let mut i = 0;
    while i < lines.len() {
        let line = lines[i];
        i += 1;
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        if line.starts_with(' ') || line.starts_with('\t') {
            return Err(Error::Frontmatter(format!(
                "unexpected indented line {line:?}"
            )));
        }
        let (key, value) = line
            .split_once(':')
            .ok_or_else(|| Error::Frontmatter(format!("expected 'key: value', got {line:?}")))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Frontmatter(format!("empty key in {line:?}")));
        }
        let value = value.trim();
        let value = if value == "|" || value == ">" {
            let mut block = Vec::new();
            while i < lines.len() && (lines[i].starts_with(' ') || lines[i].trim().is_empty()) {
                block.push(lines[i].trim());
                i += 1;
            }
            let sep = if value == "|" { "\n" } else { " " };
            block.join(sep).trim().to_string()
        } else {
            unquote(value).to_string()
        };
        out.insert(key.to_string(), value);
    }
    Ok(out)
}

fn unquote(v: &str) -> &str {
    for q in ['"', '\''] {
        if v.len() >= 2 && v.starts_with(q) && v.ends_with(q) {
            return &v[1..v.len() - 1];
        }
    }
    v
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkillArtifact {
    pub manifest: SkillManifest,
    pub files: BTreeMap<RelPath, Vec<u8>>,
    pub version_index: u32,
}

impl SkillArtifact {
    /// Build an artifact from an in-memory file set, enforcing the manifest
    /// invariants.
    pub fn from_files(files: BTreeMap<RelPath, Vec<u8>>, version_index: u32) -> Result<Self> {
        let manifest_bytes = files
            .get(&RelPath(MANIFEST_FILE.into()))
            .ok_or_else(|| Error::NoManifest(PathBuf::from("<artifact>")))?;
        let text = std::str::from_utf8(manifest_bytes)
            .map_err(|_| Error::Frontmatter("SKILL.md is not UTF-8".into()))?;
        let manifest = SkillManifest::parse(text)?;
        if let Some(script) = &manifest.primary_script {
            let present = RelPath::new(script.clone())
                .map(|p| files.contains_key(&p))
                .unwrap_or(false);
            if !present {
                return Err(Error::DanglingPrimaryScript(script.clone()));
            }
        }
        Ok(SkillArtifact {
            manifest,
            files,
            version_index,
        })
    }

    pub fn file(&self, path: &str) -> Option<&[u8]> {
        self.files
            .get(&RelPath(path.to_string()))
            .map(Vec::as_slice)
    }

    pub fn text(&self, path: &str) -> Option<&str> {
        self.file(path).and_then(|b| std::str::from_utf8(b).ok())
    }

    pub fn manifest_text(&self) -> &str {
        self.text(MANIFEST_FILE).unwrap_or_default()
    }

    pub fn scripts(&self) -> impl Iterator<Item = (&RelPath, &Vec<u8>)> {
        self.files
            .iter()
            .filter(|(p, _)| p.as_str().starts_with(SCRIPTS_DIR))
    }

    pub fn digest(&self) -> String {
        files_digest(&self.string_files())
    }

    pub fn file_digests(&self) -> BTreeMap<RelPath, String> {
        self.files
            .iter()
            .map(|(p, b)| (p.clone(), sha256_hex(b)))
            .collect()
    }

    fn string_files(&self) -> BTreeMap<String, Vec<u8>> {
        self.files
            .iter()
            .map(|(p, b)| (p.0.clone(), b.clone()))
            .collect()
    }

    /// Same files and manifest, ignoring version.
    pub fn same_content(&self, other: &SkillArtifact) -> bool {
        self.files == other.files && self.manifest == other.manifest
    }
}

/// Parse a skill directory.
pub fn parse_skill(dir: &Path) -> Result<SkillArtifact> {
    if !dir.join(MANIFEST_FILE).is_file() {
        return Err(Error::NoManifest(dir.to_path_buf()));
    }
    let mut files = BTreeMap::new();
    for (rel, bytes) in read_tree(dir)? {
        files.insert(RelPath::new(rel)?, bytes);
    }
    SkillArtifact::from_files(files, 0)
}

/// Write a byte-exact copy of `v` to `out`: files not in `v` are removed and
/// unchanged files are not rewritten, so a second call is a no-op.
pub fn mirror(v: &SkillArtifact, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let existing = read_tree(out)?;
    for rel in existing.keys() {
        if !v.files.contains_key(&RelPath(rel.clone())) {
            let p = out.join(rel);
            fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    for (rel, bytes) in &v.files {
        if existing.get(rel.as_str()) == Some(bytes) {
            continue;
        }
        let target = out.join(rel.as_str());
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&target, bytes).map_err(|e| Error::io(&target, e))?;
    }
    remove_empty_dirs(out)?;
    Ok(())
}

fn remove_empty_dirs(dir: &Path) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let ft = entry.file_type().map_err(|e| Error::io(&path, e))?;
        if ft.is_dir() {
            remove_empty_dirs(&path)?;
            if fs::read_dir(&path)
                .map_err(|e| Error::io(&path, e))?
                .next()
                .is_none()
            {
                fs::remove_dir(&path).map_err(|e| Error::io(&path, e))?;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Edit {
    AddFile {
        path: RelPath,
        content: String,
    },
    /// Replace lines `[start, end)` (0-based, half-open) with `content`.
    /// `start == end` inserts before line `start`.
    ReplaceRegion {
        path: RelPath,
        start: usize,
        end: usize,
        content: String,
    },
    DeleteFile {
        path: RelPath,
    },
    /// Reorder the markdown sections of a file; `permutation[i]` is the old
    /// index of the section placed at position `i`.
    ReorderSections {
        path: RelPath,
        permutation: Vec<usize>,
    },
}

impl Edit {
    pub fn path(&self) -> &RelPath {
        match self {
            Edit::AddFile { path, .. }
            | Edit::ReplaceRegion { path, .. }
            | Edit::DeleteFile { path }
            | Edit::ReorderSections { path, .. } => path,
        }
    }

    /// Text this edit introduces into the artifact, if any.
    pub fn introduced_text(&self) -> Option<&str> {
        match self {
            Edit::AddFile { content, .. } | Edit::ReplaceRegion { content, .. } => Some(content),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Patch {
    pub edits: Vec<Edit>,
}

impl Patch {
    pub fn new(edits: Vec<Edit>) -> Self {
        Patch { edits }
    }

    pub fn named_paths(&self) -> BTreeSet<RelPath> {
        self.edits.iter().map(|e| e.path().clone()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.edits.is_empty()
    }

    fn check_overlaps(&self) -> Result<()> {
        let mut spans: BTreeMap<&RelPath, Vec<(usize, usize)>> = BTreeMap::new();
        for e in &self.edits {
            if let Edit::ReplaceRegion {
                path, start, end, ..
            } = e
            {
                if start > end {
                    return Err(Error::Patch(format!(
                        "span {start}..{end} on {path} is inverted"
                    )));
                }
                let list = spans.entry(path).or_default();
                if let Some(&(s, t)) = list
                    .iter()
                    .find(|&&(s, t)| spans_conflict((s, t), (*start, *end)))
                {
                    return Err(Error::Patch(format!(
                        "overlapping replace spans {s}..{t} and {start}..{end} on {path}"
                    )));
                }
                list.push((*start, *end));
            }
        }
        Ok(())
    }
}

/// Two line spans conflict when they share a line, or when an insertion point
/// coincides with another insertion point or falls strictly inside a span.
fn spans_conflict(a: (usize, usize), b: (usize, usize)) -> bool {
    match (a.0 == a.1, b.0 == b.1) {
        (false, false) => a.0 < b.1 && b.0 < a.1,
        (true, true) => a.0 == b.0,
        (true, false) => b.0 < a.0 && a.0 < b.1,
        (false, true) => a.0 < b.0 && b.0 < a.1,
    }
}

/// Apply edits in order to a raw file set.
pub(crate) fn apply_edits(files: &mut BTreeMap<RelPath, Vec<u8>>, patch: &Patch) -> Result<()> {
    patch.check_overlaps()?;
    for edit in &patch.edits {
        match edit {
            Edit::AddFile { path, content } => {
                if files.contains_key(path) {
                    return Err(Error::Patch(format!("add_file: {path} already exists")));
                }
                files.insert(path.clone(), content.as_bytes().to_vec());
            }
            Edit::ReplaceRegion {
                path,
                start,
                end,
                content,
            } => {
                let bytes = files
                    .get(path)
                    .ok_or_else(|| Error::Patch(format!("replace_region: {path} not found")))?;
                let text = std::str::from_utf8(bytes)
                    .map_err(|_| Error::Patch(format!("replace_region: {path} is not UTF-8")))?;
                let mut lines: Vec<String> =
                    text.split_inclusive('\n').map(str::to_string).collect();
                if *end > lines.len() || start > end {
                    return Err(Error::Patch(format!(
                        "replace_region: span {start}..{end} out of bounds for {path} ({} lines)",
                        lines.len()
                    )));
                }
                if *start == lines.len() {
                    if let Some(last) = lines.last_mut() {
                        if !last.ends_with('\n') {
                            last.push('\n');
                        }
                    }
                }
                let mut replacement: Vec<String> =
                    content.split_inclusive('\n').map(str::to_string).collect();
                if *end < lines.len() {
                    if let Some(last) = replacement.last_mut() {
                        if !last.ends_with('\n') {
                            last.push('\n');
                        }
                    }
                }
                lines.splice(*start..*end, replacement);
                files.insert(path.clone(), lines.concat().into_bytes());
            }
            Edit::DeleteFile { path } => {
                if path.as_str() == MANIFEST_FILE {
                    return Err(Error::Patch(
                        "delete_file: SKILL.md cannot be deleted".into(),
                    ));
                }
                files
                    .remove(path)
                    .ok_or_else(|| Error::Patch(format!("delete_file: {path} not found")))?;
            }
            Edit::ReorderSections { path, permutation } => {
                let bytes = files
                    .get(path)
                    .ok_or_else(|| Error::Patch(format!("reorder_sections: {path} not found")))?;
                let text = std::str::from_utf8(bytes)
                    .map_err(|_| Error::Patch(format!("reorder_sections: {path} is not UTF-8")))?;
                let mut doc = MarkdownDoc::parse(text)
                    .map_err(|e| Error::Patch(format!("reorder_sections: {e}")))?;
                let n = doc.sections.len();
                let mut seen = vec![false; n];
                if permutation.len() != n
                    || permutation
                        .iter()
                        .any(|&i| i >= n || std::mem::replace(&mut seen[i], true))
                {
                    return Err(Error::Patch(format!(
                        "reorder_sections: {permutation:?} is not a permutation of {n} sections in {path}"
                    )));
                }
                let old = std::mem::take(&mut doc.sections);
                doc.sections = permutation.iter().map(|&i| old[i].clone()).collect();
                let last = doc.sections.iter().rposition(|s| !s.text.trim().is_empty());
                for (i, s) in doc.sections.iter_mut().enumerate() {
                    if s.text.trim().is_empty() {
                        continue;
                    }
                    let gap = if Some(i) == last { "\n" } else { "\n\n" };
                    s.text = format!("{}{gap}", s.text.trim_end());
                }
                files.insert(path.clone(), doc.render().into_bytes());
            }
        }
    }
    Ok(())
}

/// Apply a patch, producing version `v.version_index + 1`. Files not named by
/// any edit keep their exact bytes.
pub fn apply_patch(v: &SkillArtifact, p: &Patch) -> Result<SkillArtifact> {
    let mut files = v.files.clone();
    apply_edits(&mut files, p)?;
    SkillArtifact::from_files(files, v.version_index + 1)
}

/// Build an artifact from scratch by applying `p` to an empty tree.
pub fn artifact_from_patch(p: &Patch, version_index: u32) -> Result<SkillArtifact> {
    let mut files = BTreeMap::new();
    apply_edits(&mut files, p)?;
    SkillArtifact::from_files(files, version_index)
}

/// Permutation that moves the primary-script invocation section to the front,
/// keeping every other section's relative order.
pub fn hoist_permutation(manifest: &SkillManifest) -> Option<Vec<usize>> {
    let idx = manifest.invocation_section()?;
    // keep an untitled preamble or a title-only heading in front
    let lead = manifest.body_sections[..idx]
        .iter()
        .take_while(|s| section_body(s).trim().is_empty())
        .count();
    let mut perm: Vec<usize> = (0..lead).collect();
    perm.push(idx);
    perm.extend((lead..manifest.body_sections.len()).filter(|&i| i != idx));
    Some(perm)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RejectedCandidate {
    pub artifact: SkillArtifact,
    pub report: AuditReport,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Lineage {
    pub accepted: Vec<(SkillArtifact, AuditReport)>,
    pub candidates: Vec<RejectedCandidate>,
}

impl Lineage {
    pub fn accept(&mut self, artifact: SkillArtifact, report: AuditReport) -> Result<()> {
        if let Some((last, _)) = self.accepted.last() {
            if artifact.version_index <= last.version_index {
                return Err(Error::Loop(format!(
                    "lineage versions must increase: {} after {}",
                    artifact.version_index, last.version_index
                )));
            }
        }
        self.accepted.push((artifact, report));
        Ok(())
    }

    pub fn reject(&mut self, artifact: SkillArtifact, report: AuditReport) {
        self.candidates.push(RejectedCandidate { artifact, report });
    }

    pub fn find(&self, version: u32) -> Option<&SkillArtifact> {
        self.accepted
            .iter()
            .map(|(a, _)| a)
            .chain(self.candidates.iter().map(|c| &c.artifact))
            .find(|a| a.version_index == version)
    }

    pub fn is_empty(&self) -> bool {
        self.accepted.is_empty()
    }
}
