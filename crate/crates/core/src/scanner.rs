//! Corpus scanning: locating secret occurrences in local code files,
//! sampling, and regex-precision estimation.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::registry::{compile_matcher, Matcher, Registry, RegistryError, SecretTypeSpec};

/// Lines longer than this are skipped during scanning; base64 walls and
/// minified blobs produce substring false positives the boundary regex
/// cannot catch.
pub const MAX_LINE_BYTES: usize = 4096;

#[derive(Debug, Error)]
pub enum ScanError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("registry error: {0}")]
    Registry(#[from] RegistryError),
    #[error("limit must be positive")]
    ZeroLimit,
    #[error("cannot estimate precision from an empty sample")]
    EmptySample,
    #[error("occurrence {0} has no label")]
    Unlabeled(String),
    #[error("malformed manifest line: {0}")]
    BadManifest(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusDocument {
    pub doc_id: String,
    pub path: PathBuf,
    /// Language tag derived from the file extension only.
    pub language: String,
    pub content: String,
    pub line_count: usize,
}

impl CorpusDocument {
    pub fn new(doc_id: impl Into<String>, path: impl Into<PathBuf>, content: String) -> Self {
        let path: PathBuf = path.into();
        let language = path
            .extension()
            .and_then(|e| e.to_str())
            .unwrap_or("unknown")
            .to_string();
        let line_count = content.lines().count();
        CorpusDocument {
            doc_id: doc_id.into(),
            path,
            language,
            content,
            line_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecretOccurrence {
    pub doc_id: String,
    #[serde(rename = "secret_type")]
    pub secret_type_id: String,
    pub start: usize,
    pub end: usize,
    /// 0-based line of the span start.
    #[serde(rename = "line")]
    pub line_index: usize,
    #[serde(rename = "text")]
    pub matched_text: String,
    #[serde(rename = "first")]
    pub is_first_in_doc: bool,
}

/// Registry with every spec's matcher precompiled; immutable and shareable.
pub struct ScanEngine {
    matchers: Vec<(SecretTypeSpec, Matcher)>,
}

impl ScanEngine {
    pub fn new(registry: &Registry) -> Result<Self, RegistryError> {
        let mut matchers = Vec::with_capacity(registry.len());
        for spec in registry.specs() {
            matchers.push((spec.clone(), compile_matcher(spec)?));
        }
        Ok(ScanEngine { matchers })
    }

    pub fn for_spec(spec: &SecretTypeSpec) -> Result<Self, RegistryError> {
        Ok(ScanEngine {
            matchers: vec![(spec.clone(), compile_matcher(spec)?)],
        })
    }

    /// All non-overlapping boundary-respecting matches across all specs,
    /// ordered by position. Overlaps resolve to the longer match; ties go to
    /// the earlier start, then the lexicographically smaller type id.
    pub fn scan_document(&self, doc: &CorpusDocument) -> Vec<SecretOccurrence> {
        let content = &doc.content;
        let line_starts = line_start_offsets(content);
        let skip = oversized_line_spans(content, &line_starts);

        let mut raw: Vec<(usize, usize, &str)> = Vec::new();
        for (spec, matcher) in &self.matchers {
            for (start, end) in matcher.find_all(content) {
                if skip
                    .iter()
                    .any(|&(ls, le)| start >= ls && start < le)
                {
                    continue;
                }
                raw.push((start, end, spec.id.as_str()));
            }
        }
        // Longer match wins; ties by earlier start, then smaller type id.
        raw.sort_by(|a, b| {
            (b.1 - b.0)
                .cmp(&(a.1 - a.0))
                .then(a.0.cmp(&b.0))
                .then(a.2.cmp(b.2))
        });
        let mut chosen: Vec<(usize, usize, &str)> = Vec::new();
        for cand in raw {
            if chosen
                .iter()
                .all(|c| cand.1 <= c.0 || cand.0 >= c.1)
            {
                chosen.push(cand);
            }
        }
        chosen.sort_by(|a, b| a.0.cmp(&b.0).then(a.2.cmp(b.2)));

        chosen
            .into_iter()
            .enumerate()
            .map(|(i, (start, end, type_id))| SecretOccurrence {
                doc_id: doc.doc_id.clone(),
                secret_type_id: type_id.to_string(),
                start,
                end,
                line_index: line_of_offset(&line_starts, start),
                matched_text: content[start..end].to_string(),
                is_first_in_doc: i == 0,
            })
            .collect()
    }
}

fn line_start_offsets(content: &str) -> Vec<usize> {
    let mut starts = vec![0];
    for (i, b) in content.bytes().enumerate() {
        if b == b'\n' {
            starts.push(i + 1);
        }
    }
    starts
}

/// 0-based line index containing a byte offset.
fn line_of_offset(line_starts: &[usize], offset: usize) -> usize {
    match line_starts.binary_search(&offset) {
        Ok(i) => i,
        Err(i) => i - 1,
    }
}

fn oversized_line_spans(content: &str, line_starts: &[usize]) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    for (i, &start) in line_starts.iter().enumerate() {
        let end = line_starts
            .get(i + 1)
            .copied()
            .unwrap_or(content.len());
        if end - start > MAX_LINE_BYTES {
            spans.push((start, end));
        }
    }
    spans
}

/// Convenience wrapper compiling the registry on the fly.
pub fn scan_document(
    doc: &CorpusDocument,
    registry: &Registry,
) -> Result<Vec<SecretOccurrence>, RegistryError> {
    Ok(ScanEngine::new(registry)?.scan_document(doc))
}

/// First occurrence of one spec per document, from at most `limit` distinct
/// documents, in corpus order. Stops early once the limit is reached.
pub fn collect_candidates<'a, I>(
    corpus: I,
    spec: &SecretTypeSpec,
    limit: usize,
) -> Result<Vec<SecretOccurrence>, ScanError>
where
    I: IntoIterator<Item = &'a CorpusDocument>,
{
    if limit == 0 {
        return Err(ScanError::ZeroLimit);
    }
    let engine = ScanEngine::for_spec(spec)?;
    let mut out = Vec::new();
    for doc in corpus {
        if let Some(occ) = engine.scan_document(doc).into_iter().next() {
            out.push(occ);
            if out.len() == limit {
                break;
            }
        }
    }
    Ok(out)
}

/// Seeded uniform sample without replacement of min(n, len) occurrences,
/// returned in stable (doc_id, start) order.
pub fn sample_occurrences(
    occs: &[SecretOccurrence],
    n: usize,
    seed: u64,
) -> Vec<SecretOccurrence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = n.min(occs.len());
    let mut picked: Vec<SecretOccurrence> = rand::seq::index::sample(&mut rng, occs.len(), k)
        .into_iter()
        .map(|i| occs[i].clone())
        .collect();
    picked.sort_by(|a, b| a.doc_id.cmp(&b.doc_id).then(a.start.cmp(&b.start)));
    picked
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleLabel {
    TruePositive,
    FalsePositive,
}

/// TP / (TP + FP) over a manually labeled sample. Labels are keyed by
/// (doc_id, span start).
pub fn estimate_precision(
    occs: &[SecretOccurrence],
    labels: &HashMap<(String, usize), SampleLabel>,
) -> Result<f64, ScanError> {
    if occs.is_empty() {
        return Err(ScanError::EmptySample);
    }
    let mut tp = 0usize;
    for occ in occs {
        let label = labels
            .get(&(occ.doc_id.clone(), occ.start))
            .ok_or_else(|| ScanError::Unlabeled(format!("{}:{}", occ.doc_id, occ.start)))?;
        if *label == SampleLabel::TruePositive {
            tp += 1;
        }
    }
    Ok(tp as f64 / occs.len() as f64)
}

/// Recursively reads a corpus root into documents, sorted by path. Files
/// that are not valid UTF-8 are skipped with a warning on stderr. An
/// optional extension filter restricts which files are read.
pub fn read_corpus_dir(
    root: &Path,
    extensions: Option<&[String]>,
) -> Result<Vec<CorpusDocument>, ScanError> {
    let mut paths: Vec<PathBuf> = walkdir::WalkDir::new(root)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .collect();
    paths.sort();
    let mut docs = Vec::new();
    for path in paths {
        if let Some(exts) = extensions {
            let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
            if !exts.iter().any(|x| x == ext) {
                continue;
            }
        }
        let bytes = std::fs::read(&path)?;
        let content = match String::from_utf8(bytes) {
            Ok(c) => c,
            Err(_) => {
                eprintln!("warning: skipping undecodable file {}", path.display());
                continue;
            }
        };
        let rel = path
            .strip_prefix(root)
            .unwrap_or(&path)
            .to_string_lossy()
            .replace('\\', "/");
        docs.push(CorpusDocument::new(rel, path.clone(), content));
    }
    Ok(docs)
}

/// Reads a JSONL manifest of {doc_id, path} records.
pub fn read_corpus_manifest(manifest: &Path) -> Result<Vec<CorpusDocument>, ScanError> {
    #[derive(Deserialize)]
    struct Entry {
        doc_id: String,
        path: PathBuf,
    }
    let text = std::fs::read_to_string(manifest)?;
    let mut docs = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: Entry =
            serde_json::from_str(line).map_err(|e| ScanError::BadManifest(e.to_string()))?;
        let bytes = std::fs::read(&entry.path)?;
        let content = match String::from_utf8(bytes) {
            Ok(c) => c,
            Err(_) => {
                eprintln!("warning: skipping undecodable file {}", entry.path.display());
                continue;
            }
        };
        docs.push(CorpusDocument::new(entry.doc_id, entry.path, content));
    }
    Ok(docs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::generate_example_secret;

    fn registry() -> Registry {
        Registry::builtin()
    }

    fn doc(content: &str) -> CorpusDocument {
        CorpusDocument::new("d0", "d0.py", content.to_string())
    }

    #[test]
    fn single_match_is_first() {
        let reg = registry();
        let key = generate_example_secret(reg.get("aws_access_key_id").unwrap(), 1).unwrap();
        let d = doc(&format!("x = 1\nkey = '{key}'\n"));
        let occs = scan_document(&d, &reg).unwrap();
        assert_eq!(occs.len(), 1);
        assert!(occs[0].is_first_in_doc);
        assert_eq!(occs[0].matched_text, key);
        assert_eq!(occs[0].line_index, 1);
        assert_eq!(&d.content[occs[0].start..occs[0].end], key);
    }

    #[test]
    fn two_types_ordered_by_position() {
        let reg = registry();
        let aws = generate_example_secret(reg.get("aws_access_key_id").unwrap(), 2).unwrap();
        let goog = generate_example_secret(reg.get("google_api_key").unwrap(), 2).unwrap();
        let d = doc(&format!("a\nb\nk1 = '{aws}'\nc\nd\ne\nf\nk2 = '{goog}'\n"));
        let occs = scan_document(&d, &reg).unwrap();
        assert_eq!(occs.len(), 2);
        assert_eq!(occs[0].secret_type_id, "aws_access_key_id");
        assert_eq!(occs[0].line_index, 2);
        assert!(occs[0].is_first_in_doc);
        assert_eq!(occs[1].secret_type_id, "google_api_key");
        assert_eq!(occs[1].line_index, 7);
        assert!(!occs[1].is_first_in_doc);
    }

    #[test]
    fn short_stripe_key_does_not_match() {
        let reg = registry();
        let d = doc("key = 'sk_test_abcdefghij0123456789'\n"); // only 20 after prefix
        let occs = scan_document(&d, &reg).unwrap();
        assert!(occs.is_empty());
    }

    #[test]
    fn oversized_lines_are_skipped() {
        let reg = registry();
        let key = generate_example_secret(reg.get("aws_access_key_id").unwrap(), 3).unwrap();
        let blob = format!("{} {} {}", "x".repeat(3000), key, "y".repeat(2000));
        let d = doc(&format!("{blob}\nok = '{key}'\n"));
        let occs = scan_document(&d, &reg).unwrap();
        assert_eq!(occs.len(), 1);
        assert_eq!(occs[0].line_index, 1);
    }

    #[test]
    fn planted_corpus_completeness() {
        let reg = registry();
        let mut content = String::from("# header\n");
        let mut planted = Vec::new();
        for (i, spec) in reg.specs().iter().enumerate() {
            let key = generate_example_secret(spec, i as u64 + 10).unwrap();
            content.push_str(&format!("k{i} = \"{key}\"\n"));
            planted.push(key);
        }
        let d = doc(&content);
        let occs = scan_document(&d, &reg).unwrap();
        // google_api_key values can embed '-'-separated runs that collide
        // with the ebay pattern only when lengths align; the overlap rule
        // keeps exactly one occurrence per planted span either way.
        assert_eq!(occs.len(), planted.len());
        for (occ, key) in occs.iter().zip(planted.iter()) {
            assert_eq!(&occ.matched_text, key);
        }
    }

    #[test]
    fn collect_candidates_respects_limit() {
        let reg = registry();
        let spec = reg.get("aws_access_key_id").unwrap();
        let docs: Vec<CorpusDocument> = (0..200)
            .map(|i| {
                let key = generate_example_secret(spec, i as u64).unwrap();
                CorpusDocument::new(format!("doc{i:03}"), format!("doc{i:03}.py"), {
                    format!("key = '{key}'\n")
                })
            })
            .collect();
        let occs = collect_candidates(docs.iter(), spec, 80).unwrap();
        assert_eq!(occs.len(), 80);
        let ids: std::collections::HashSet<_> = occs.iter().map(|o| &o.doc_id).collect();
        assert_eq!(ids.len(), 80);
    }

    #[test]
    fn collect_candidates_underfull() {
        let reg = registry();
        let spec = reg.get("aws_access_key_id").unwrap();
        let docs: Vec<CorpusDocument> = (0..3)
            .map(|i| {
                let key = generate_example_secret(spec, i as u64).unwrap();
                CorpusDocument::new(format!("d{i}"), format!("d{i}.py"), format!("'{key}'"))
            })
            .collect();
        let occs = collect_candidates(docs.iter(), spec, 80).unwrap();
        assert_eq!(occs.len(), 3);
    }

    #[test]
    fn collect_candidates_zero_limit_errors() {
        let reg = registry();
        let spec = reg.get("aws_access_key_id").unwrap();
        assert!(matches!(
            collect_candidates(std::iter::empty(), spec, 0),
            Err(ScanError::ZeroLimit)
        ));
    }

    #[test]
    fn sampling_is_deterministic_and_sized() {
        let reg = registry();
        let spec = reg.get("aws_access_key_id").unwrap();
        let occs: Vec<SecretOccurrence> = (0..80)
            .map(|i| SecretOccurrence {
                doc_id: format!("doc{i:03}"),
                secret_type_id: spec.id.clone(),
                start: 0,
                end: 20,
                line_index: 0,
                matched_text: generate_example_secret(spec, i as u64).unwrap(),
                is_first_in_doc: true,
            })
            .collect();
        let a = sample_occurrences(&occs, 50, 7);
        let b = sample_occurrences(&occs, 50, 7);
        assert_eq!(a, b);
        assert_eq!(a.len(), 50);
        let all = sample_occurrences(&occs, 500, 7);
        assert_eq!(all.len(), 80);
    }

    #[test]
    fn precision_estimates() {
        let occs: Vec<SecretOccurrence> = (0..100)
            .map(|i| SecretOccurrence {
                doc_id: format!("d{i}"),
                secret_type_id: "t".into(),
                start: 0,
                end: 1,
                line_index: 0,
                matched_text: "x".into(),
                is_first_in_doc: true,
            })
            .collect();
        let mut labels = HashMap::new();
        for (i, occ) in occs.iter().enumerate() {
            let label = if i < 87 {
                SampleLabel::TruePositive
            } else {
                SampleLabel::FalsePositive
            };
            labels.insert((occ.doc_id.clone(), occ.start), label);
        }
        let p = estimate_precision(&occs, &labels).unwrap();
        assert!((p - 0.87).abs() < 1e-12);

        for occ in &occs {
            labels.insert((occ.doc_id.clone(), occ.start), SampleLabel::TruePositive);
        }
        assert_eq!(estimate_precision(&occs, &labels).unwrap(), 1.0);
        assert!(matches!(
            estimate_precision(&[], &labels),
            Err(ScanError::EmptySample)
        ));
    }
}
