//! Email ingestion and labeled corpora.
//!
//! Only the subject, the plain body text and the attachment filenames of a
//! message are kept. Headers, addresses and routing data are dropped.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use mail_parser::{MessageParser, MimeHeaders, PartType};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::taxonomy::{TaxonomyError, TechniqueId, TechniqueRegistry};

/// Suffix of the sidecar file that marks a synthetic email.
pub const PROVENANCE_SUFFIX: &str = ".provenance.json";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("malformed message: {0}")]
    MalformedMessage(String),
    #[error("message has no text and no attachments")]
    EmptyMessage,
    #[error("label file references unknown technique `{technique}` (email `{email}`)")]
    UnknownTechniqueLabel { email: String, technique: String },
    #[error("label file references missing email `{0}`")]
    MissingEmail(String),
    #[error("duplicate email id `{0}` in corpus")]
    DuplicateEmail(String),
    #[error("synthetic example `{0}` must carry exactly one label")]
    SyntheticLabelCount(String),
    #[error("bad record at {path}:{line}: {reason}")]
    BadRecord { path: PathBuf, line: usize, reason: String },
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_owned(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Real,
    Synthetic,
}

/// Content digest of an email: lowercase hex, 32 characters.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmailId(String);

impl EmailId {
    pub fn new(id: impl Into<String>) -> Self {
        EmailId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for EmailId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for EmailId {
    fn from(s: &str) -> Self {
        EmailId(s.to_owned())
    }
}

/// Length-prefixed encoding so that field boundaries cannot collide.
pub fn email_digest(subject: &str, body: &str, attachments: &[String]) -> EmailId {
    let mut h = Sha256::new();
    let mut field = |bytes: &[u8]| {
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    };
    field(subject.as_bytes());
    field(body.as_bytes());
    field(&(attachments.len() as u64).to_le_bytes());
    for a in attachments {
        field(a.as_bytes());
    }
    let digest = h.finalize();
    EmailId(hex::encode(&digest[..16]))
}

/// Preprocessed message: the only fields a classifier ever sees.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Email {
    pub id: EmailId,
    pub subject: String,
    pub body: String,
    pub attachments: Vec<String>,
    pub source: Source,
}

impl Email {
    pub fn new(subject: impl Into<String>, body: impl Into<String>, attachments: Vec<String>, source: Source) -> Self {
        let subject = subject.into();
        let body = body.into();
        let id = email_digest(&subject, &body, &attachments);
        Email {
            id,
            subject,
            body,
            attachments,
            source,
        }
    }
}

/// Parses an Internet message and keeps subject, body text and attachment names.
pub fn ingest_email(raw: &[u8]) -> Result<Email, CorpusError> {
    let msg = MessageParser::default()
        .parse(raw)
        .ok_or_else(|| CorpusError::MalformedMessage("unparseable input".into()))?;
    if msg.root_part().headers.is_empty() {
        return Err(CorpusError::MalformedMessage("no header block".into()));
    }

    let subject = normalize_line(msg.subject().unwrap_or_default());

    // text_body already prefers text/plain over text/html inside
    // multipart/alternative; html only shows up here when no plain part exists.
    let mut chunks = Vec::new();
    for part in msg.text_bodies() {
        let text = match &part.body {
            PartType::Text(t) => normalize_body(t),
            PartType::Html(h) => normalize_body(&html_to_text(h)),
            _ => continue,
        };
        if !text.is_empty() {
            chunks.push(text);
        }
    }
    let body = chunks.join("\n\n");

    let attachments: Vec<String> = msg
        .attachments()
        .filter(|p| !p.content_disposition().is_some_and(|cd| cd.is_inline()))
        .filter_map(|p| p.attachment_name())
        .map(normalize_line)
        .filter(|n| !n.is_empty())
        .collect();

    if body.is_empty() && attachments.is_empty() {
        return Err(CorpusError::EmptyMessage);
    }
    Ok(Email::new(subject, body, attachments, Source::Real))
}

fn normalize_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn normalize_body(s: &str) -> String {
    let unified = s.replace("\r\n", "\n").replace('\r', "\n");
    let lines: Vec<&str> = unified.lines().map(str::trim_end).collect();
    let mut out = String::with_capacity(unified.len());
    let mut blank_run = 0;
    for line in lines {
        if line.is_empty() {
            blank_run += 1;
            if blank_run > 1 {
                continue;
            }
        } else {
            blank_run = 0;
        }
        out.push_str(line);
        out.push('\n');
    }
    out.trim().to_owned()
}

const BLOCK_TAGS: &[&str] = &[
    "p", "div", "br", "li", "ul", "ol", "tr", "table", "h1", "h2", "h3", "h4", "h5", "h6",
    "blockquote", "hr", "pre", "section", "article", "header", "footer", "title", "dd", "dt",
];

/// Strips markup; block-level tags become line breaks.
pub fn html_to_text(html: &str) -> String {
    let mut out = String::with_capacity(html.len());
    let mut rest = html;
    while let Some(lt) = rest.find('<') {
        out.push_str(&decode_entities(&rest[..lt]));
        rest = &rest[lt..];
        if rest.starts_with("<!--") {
            rest = rest.find("-->").map_or("", |end| &rest[end + 3..]);
            continue;
        }
        let Some(gt) = rest.find('>') else {
            // unterminated tag: keep the remainder as text
            out.push_str(&decode_entities(rest));
            rest = "";
            break;
        };
        let tag = &rest[1..gt];
        rest = &rest[gt + 1..];
        let name: String = tag
            .trim_start_matches('/')
            .chars()
            .take_while(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        if (name == "script" || name == "style") && !tag.starts_with('/') {
            let close = format!("</{name}");
            let lower = rest.to_ascii_lowercase();
            rest = match lower.find(&close) {
                Some(pos) => rest[pos..].find('>').map_or("", |g| &rest[pos + g + 1..]),
                None => "",
            };
            continue;
        }
        if BLOCK_TAGS.contains(&name.as_str()) {
            out.push('\n');
        } else if name == "td" || name == "th" {
            out.push(' ');
        }
    }
    out.push_str(&decode_entities(rest));

    // Collapse whitespace inside each line the way a browser would.
    out.lines()
        .map(|l| l.split_whitespace().collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join("\n")
}

fn decode_entities(s: &str) -> String {
    if !s.contains('&') {
        return s.to_owned();
    }
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(amp) = rest.find('&') {
        out.push_str(&rest[..amp]);
        rest = &rest[amp..];
        let semi = rest[..rest.len().min(12)].find(';');
        let decoded = semi.and_then(|end| {
            let ent = &rest[1..end];
            let ch = match ent {
                "amp" => Some('&'),
                "lt" => Some('<'),
                "gt" => Some('>'),
                "quot" => Some('"'),
                "apos" => Some('\''),
                "nbsp" => Some(' '),
                _ if ent.starts_with("#x") || ent.starts_with("#X") => {
                    u32::from_str_radix(&ent[2..], 16).ok().and_then(char::from_u32)
                }
                _ if ent.starts_with('#') => ent[1..].parse().ok().and_then(char::from_u32),
                _ => None,
            };
            ch.map(|c| (c, end))
        });
        match decoded {
            Some((c, end)) => {
                out.push(c);
                rest = &rest[end + 1..];
            }
            None => {
                out.push('&');
                rest = &rest[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

/// Canonical Internet-message rendering of an [`Email`]; ingesting the
/// output yields the same email back.
pub fn render_email(email: &Email) -> Vec<u8> {
    let mut out = String::new();
    out.push_str("MIME-Version: 1.0\r\n");
    out.push_str(&format!("Subject: {}\r\n", normalize_line(&email.subject)));
    let body = email.body.replace('\n', "\r\n");
    if email.attachments.is_empty() {
        out.push_str("Content-Type: text/plain; charset=utf-8\r\n");
        out.push_str("Content-Transfer-Encoding: 8bit\r\n\r\n");
        out.push_str(&body);
        out.push_str("\r\n");
        return out.into_bytes();
    }
    let boundary = format!("=_part_{}", email.id);
    out.push_str(&format!("Content-Type: multipart/mixed; boundary=\"{boundary}\"\r\n\r\n"));
    out.push_str(&format!("--{boundary}\r\n"));
    out.push_str("Content-Type: text/plain; charset=utf-8\r\n");
    out.push_str("Content-Transfer-Encoding: 8bit\r\n\r\n");
    out.push_str(&body);
    out.push_str("\r\n");
    for name in &email.attachments {
        out.push_str(&format!("--{boundary}\r\n"));
        out.push_str("Content-Type: application/octet-stream\r\n");
        out.push_str(&format!("Content-Disposition: attachment; {}\r\n", filename_param(name)));
        out.push_str("Content-Transfer-Encoding: base64\r\n\r\n\r\n");
    }
    out.push_str(&format!("--{boundary}--\r\n"));
    out.into_bytes()
}

fn filename_param(name: &str) -> String {
    let plain = name
        .chars()
        .all(|c| (c.is_ascii_graphic() && c != '"' && c != '\\') || c == ' ');
    if plain {
        format!("filename=\"{name}\"")
    } else {
        let mut enc = String::new();
        for b in name.bytes() {
            if b.is_ascii_alphanumeric() || b"-._~".contains(&b) {
                enc.push(b as char);
            } else {
                enc.push_str(&format!("%{b:02X}"));
            }
        }
        format!("filename*=utf-8''{enc}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub email: Email,
    pub labels: BTreeSet<TechniqueId>,
}

impl LabeledExample {
    pub fn new(email: Email, labels: impl IntoIterator<Item = TechniqueId>) -> Self {
        LabeledExample {
            email,
            labels: labels.into_iter().collect(),
        }
    }

    pub fn source(&self) -> Source {
        self.email.source
    }

    pub fn has(&self, technique: &TechniqueId) -> bool {
        self.labels.contains(technique)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusName {
    Train,
    Test,
    Custom(String),
}

impl CorpusName {
    pub fn parse(s: &str) -> Self {
        match s {
            "train" => CorpusName::Train,
            "test" => CorpusName::Test,
            other => CorpusName::Custom(other.to_owned()),
        }
    }

    pub fn as_str(&self) -> &str {
        match self {
            CorpusName::Train => "train",
            CorpusName::Test => "test",
            CorpusName::Custom(s) => s,
        }
    }
}

/// An ordered, id-unique collection of labeled emails.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub name: CorpusName,
    items: Vec<LabeledExample>,
    index: HashMap<EmailId, usize>,
}

impl Corpus {
    pub fn new(name: CorpusName, items: Vec<LabeledExample>) -> Result<Self, CorpusError> {
        let mut corpus = Corpus {
            name,
            items: Vec::with_capacity(items.len()),
            index: HashMap::new(),
        };
        for item in items {
            corpus.push(item)?;
        }
        Ok(corpus)
    }

    pub fn push(&mut self, item: LabeledExample) -> Result<(), CorpusError> {
        if item.source() == Source::Synthetic && item.labels.len() != 1 {
            return Err(CorpusError::SyntheticLabelCount(item.email.id.to_string()));
        }
        if self.index.contains_key(&item.email.id) {
            return Err(CorpusError::DuplicateEmail(item.email.id.to_string()));
        }
        self.index.insert(item.email.id.clone(), self.items.len());
        self.items.push(item);
        Ok(())
    }

    pub fn items(&self) -> &[LabeledExample] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, id: &EmailId) -> Option<&LabeledExample> {
        self.index.get(id).map(|&i| &self.items[i])
    }

    pub fn email_ids(&self) -> Vec<EmailId> {
        self.items.iter().map(|i| i.email.id.clone()).collect()
    }

    /// Number of items labeled with `technique`.
    pub fn support(&self, technique: &TechniqueId) -> usize {
        self.items.iter().filter(|i| i.has(technique)).count()
    }

    pub fn label_counts(&self) -> BTreeMap<TechniqueId, usize> {
        let mut counts = BTreeMap::new();
        for item in &self.items {
            for l in &item.labels {
                *counts.entry(l.clone()).or_insert(0) += 1;
            }
        }
        counts
    }
}

/// Support of a technique checked against the registry.
pub fn technique_support(
    corpus: &Corpus,
    registry: &TechniqueRegistry,
    technique: &str,
) -> Result<usize, CorpusError> {
    let t = registry.get(technique)?;
    Ok(corpus.support(&t.id))
}

/// One line of a label file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    /// Email content id, or the file name of the email inside the corpus directory.
    pub email: String,
    pub labels: Vec<TechniqueId>,
}

/// Sidecar written next to every synthetic email.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub technique: TechniqueId,
    pub generated_at: String,
    pub model_id: String,
}

pub fn read_label_file(path: &Path) -> Result<Vec<LabelRecord>, CorpusError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LabelRecord = serde_json::from_str(&line).map_err(|e| CorpusError::BadRecord {
            path: path.to_owned(),
            line: n + 1,
            reason: e.to_string(),
        })?;
        records.push(rec);
    }
    Ok(records)
}

pub fn write_label_file(path: &Path, corpus: &Corpus) -> Result<(), CorpusError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err(path))?);
    for item in corpus.items() {
        let rec = LabelRecord {
            email: item.email.id.to_string(),
            labels: item.labels.iter().cloned().collect(),
        };
        let line = serde_json::to_string(&rec).expect("label record serializes");
        writeln!(file, "{line}").map_err(io_err(path))?;
    }
    file.flush().map_err(io_err(path))
}

/// Loads every `*.eml` file of `dir` (sorted by file name) and attaches labels.
///
/// Files with a provenance sidecar are synthetic and take their single label
/// from it.
pub fn load_corpus(
    dir: &Path,
    labels: Option<&Path>,
    registry: &TechniqueRegistry,
    name: CorpusName,
) -> Result<Corpus, CorpusError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("eml")))
        .collect();
    files.sort();

    let mut emails: Vec<(String, Email, Option<Provenance>)> = Vec::with_capacity(files.len());
    for path in &files {
        let raw = std::fs::read(path).map_err(io_err(path))?;
        let mut email = match ingest_email(&raw) {
            Ok(e) => e,
            Err(err @ (CorpusError::MalformedMessage(_) | CorpusError::EmptyMessage)) => {
                tracing::warn!(path = %path.display(), %err, "skipping email");
                continue;
            }
            Err(e) => return Err(e),
        };
        let file_name = path.file_name().unwrap().to_string_lossy().into_owned();
        let sidecar = path.with_file_name(format!(
            "{}{PROVENANCE_SUFFIX}",
            path.file_stem().unwrap().to_string_lossy()
        ));
        let provenance = if sidecar.exists() {
            let text = std::fs::read_to_string(&sidecar).map_err(io_err(&sidecar))?;
            let p: Provenance = serde_json::from_str(&text).map_err(|e| CorpusError::BadRecord {
                path: sidecar.clone(),
                line: 1,
                reason: e.to_string(),
            })?;
            email.source = Source::Synthetic;
            Some(p)
        } else {
            None
        };
        emails.push((file_name, email, provenance));
    }

    let mut label_map: HashMap<EmailId, BTreeSet<TechniqueId>> = HashMap::new();
    if let Some(label_path) = labels {
        let by_file: HashMap<&str, &EmailId> = emails.iter().map(|(f, e, _)| (f.as_str(), &e.id)).collect();
        let ids: HashMap<&str, &EmailId> = emails.iter().map(|(_, e, _)| (e.id.as_str(), &e.id)).collect();
        for rec in read_label_file(label_path)? {
            let id = ids
                .get(rec.email.as_str())
                .or_else(|| by_file.get(rec.email.as_str()))
                .ok_or_else(|| CorpusError::MissingEmail(rec.email.clone()))?;
            for t in &rec.labels {
                if !registry.contains(t) {
                    return Err(CorpusError::UnknownTechniqueLabel {
                        email: rec.email.clone(),
                        technique: t.to_string(),
                    });
                }
            }
            label_map.entry((*id).clone()).or_default().extend(rec.labels);
        }
    }

    let mut corpus = Corpus::new(name, Vec::new())?;
    for (file, email, provenance) in emails {
        let labels = match provenance {
            Some(p) => {
                if !registry.contains(&p.technique) {
                    return Err(CorpusError::UnknownTechniqueLabel {
                        email: file,
                        technique: p.technique.to_string(),
                    });
                }
                BTreeSet::from([p.technique])
            }
            None => label_map.remove(&email.id).unwrap_or_default(),
        };
        if corpus.get(&email.id).is_some() {
            tracing::warn!(file, id = %email.id, "duplicate email content, skipping");
            continue;
        }
        corpus.push(LabeledExample { email, labels })?;
    }

    if corpus.is_empty() {
        tracing::warn!(dir = %dir.display(), "corpus is empty");
    }
    for (t, n) in corpus.label_counts() {
        tracing::debug!(technique = %t, count = n, "label count");
    }
    tracing::info!(corpus = corpus.name.as_str(), emails = corpus.len(), "loaded corpus");
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_plain_message() {
        let raw = b"From: a@example.com\r\nTo: b@example.com\r\nSubject: Invoice\r\n\r\nPay now\r\n";
        let e = ingest_email(raw).unwrap();
        assert_eq!(e.subject, "Invoice");
        assert_eq!(e.body, "Pay now");
        assert!(e.attachments.is_empty());
        assert_eq!(e.source, Source::Real);
    }

    #[test]
    fn id_is_content_derived() {
        let a = Email::new("s", "b", vec![], Source::Real);
        let b = Email::new("s", "b", vec![], Source::Synthetic);
        let c = Email::new("s", "b ", vec![], Source::Real);
        assert_eq!(a.id, b.id);
        assert_ne!(a.id, c.id);
        // field boundaries matter
        assert_ne!(
            email_digest("ab", "c", &[]),
            email_digest("a", "bc", &[])
        );
        assert_eq!(a.id.as_str().len(), 32);
    }

    #[test]
    fn html_only_body_is_stripped() {
        let raw = b"Subject: Hi\r\nContent-Type: text/html; charset=utf-8\r\n\r\n<html><head><style>p{color:red}</style></head><body><p>Dear&nbsp;client,</p><div>Click <a href=\"x\">here</a> &amp; win</div></body></html>\r\n";
        let e = ingest_email(raw).unwrap();
        assert_eq!(e.body, "Dear client,\n\nClick here & win");
    }

    #[test]
    fn plain_part_wins_over_html() {
        let raw = concat!(
            "Subject: Alt\r\n",
            "MIME-Version: 1.0\r\n",
            "Content-Type: multipart/alternative; boundary=\"b\"\r\n\r\n",
            "--b\r\nContent-Type: text/plain\r\n\r\nplain version\r\n",
            "--b\r\nContent-Type: text/html\r\n\r\n<p>html version</p>\r\n",
            "--b--\r\n"
        );
        let e = ingest_email(raw.as_bytes()).unwrap();
        assert_eq!(e.body, "plain version");
    }

    #[test]
    fn declared_charset_is_decoded() {
        let raw = b"Subject: =?iso-8859-1?q?R=E9glement?=\r\nContent-Type: text/plain; charset=iso-8859-1\r\nContent-Transfer-Encoding: quoted-printable\r\n\r\nPayez la facture =E0 temps\r\n";
        let e = ingest_email(raw).unwrap();
        assert_eq!(e.subject, "Réglement");
        assert_eq!(e.body, "Payez la facture à temps");
    }

    #[test]
    fn empty_and_malformed() {
        assert!(matches!(
            ingest_email(b"Subject: nothing\r\n\r\n   \r\n"),
            Err(CorpusError::EmptyMessage)
        ));
        assert!(matches!(ingest_email(b""), Err(CorpusError::MalformedMessage(_))));
    }

    #[test]
    fn inline_parts_are_not_attachments() {
        let raw = concat!(
            "Subject: Pic\r\n",
            "Content-Type: multipart/related; boundary=\"b\"\r\n\r\n",
            "--b\r\nContent-Type: text/plain\r\n\r\nsee logo\r\n",
            "--b\r\nContent-Type: image/png\r\nContent-Disposition: inline; filename=\"logo.png\"\r\nContent-Transfer-Encoding: base64\r\n\r\niVBORw0KGgo=\r\n",
            "--b\r\nContent-Type: application/zip\r\nContent-Disposition: attachment; filename=\"doc.zip\"\r\nContent-Transfer-Encoding: base64\r\n\r\nUEsDBA==\r\n",
            "--b--\r\n"
        );
        let e = ingest_email(raw.as_bytes()).unwrap();
        assert_eq!(e.attachments, vec!["doc.zip".to_owned()]);
    }

    #[test]
    fn render_round_trip_with_attachments() {
        let e = Email::new(
            "Votre colis",
            "Bonjour,\n\nCliquez ici.",
            vec!["facture.pdf".into(), "reçu \"final\".zip".into()],
            Source::Real,
        );
        let back = ingest_email(&render_email(&e)).unwrap();
        assert_eq!(back, e);
    }

    #[test]
    fn entities_decode() {
        assert_eq!(decode_entities("a &lt;b&gt; &#233;&#x41; &bogus; &"), "a <b> éA &bogus; &");
    }

    #[test]
    fn corpus_rejects_duplicates_and_multi_label_synthetic() {
        let e = Email::new("s", "b", vec![], Source::Real);
        let item = LabeledExample::new(e.clone(), [TechniqueId::from("baiting")]);
        assert!(matches!(
            Corpus::new(CorpusName::Train, vec![item.clone(), item]),
            Err(CorpusError::DuplicateEmail(_))
        ));
        let synth = Email::new("s2", "b2", vec![], Source::Synthetic);
        let bad = LabeledExample::new(synth, [TechniqueId::from("baiting"), TechniqueId::from("authority")]);
        assert!(matches!(
            Corpus::new(CorpusName::Train, vec![bad]),
            Err(CorpusError::SyntheticLabelCount(_))
        ));
    }
}
