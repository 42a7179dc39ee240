//! Four-stage plausibility cascade: regex extraction, Shannon-entropy
//! 3-sigma filter, trivial-pattern filter, and dictionary word filter,
//! applied in that order.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::Suggestion;
use crate::registry::{compile_matcher, strip_fixed_parts, Registry, RegistryError, SecretTypeSpec};

/// Default word dictionary shipped with the crate.
pub const DEFAULT_WORDLIST: &str = include_str!("../data/wordlist.txt");

/// Dictionary hits shorter than this do not fail a candidate.
pub const WORD_FILTER_MIN_LEN: usize = 4;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("entropy of an empty string is undefined")]
    EmptyString,
    #[error("word dictionary missing: {0}")]
    DictionaryMissing(String),
    #[error("registry error: {0}")]
    Registry(#[from] RegistryError),
    #[error("suggestion {0} has no known secret type")]
    UnknownCase(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterStage {
    Regex,
    Entropy,
    Pattern,
    Word,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub stage: FilterStage,
    pub passed: bool,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSecret {
    pub candidate_id: String,
    pub case_id: String,
    pub backend_id: String,
    pub rank: usize,
    #[serde(rename = "text")]
    pub raw_text: String,
    #[serde(rename = "stripped")]
    pub stripped_text: String,
    #[serde(rename = "entropy")]
    pub entropy_per_char: f64,
    pub verdicts: Vec<FilterVerdict>,
    pub plausible: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunnelStage {
    pub stage: FilterStage,
    pub in_count: usize,
    pub dropped: usize,
    pub out_count: usize,
}

// ---------------------------------------------------------------------------
// Stage 1: regex extraction
// ---------------------------------------------------------------------------

/// Boundary-respecting matches of the spec's pattern in a suggestion, in
/// order, deduplicated within the suggestion.
pub fn extract_candidates(
    text: &str,
    spec: &SecretTypeSpec,
) -> Result<Vec<String>, RegistryError> {
    let matcher = compile_matcher(spec)?;
    let mut seen = Vec::new();
    for (s, e) in matcher.find_all(text) {
        let m = &text[s..e];
        if !seen.iter().any(|x: &String| x == m) {
            seen.push(m.to_string());
        }
    }
    Ok(seen)
}

// ---------------------------------------------------------------------------
// Stage 2: Shannon entropy
// ---------------------------------------------------------------------------

/// Shannon entropy per character in bits: H = -sum p(x) log2 p(x) with
/// p(x) = count(x) / len over the characters of `s`.
pub fn shannon_entropy_per_char(s: &str) -> Result<f64, FilterError> {
    if s.is_empty() {
        return Err(FilterError::EmptyString);
    }
    // Deterministic iteration order: float summation order affects the
    // low bits, and artifacts must be byte-identical across runs.
    let mut freq: std::collections::BTreeMap<char, usize> = std::collections::BTreeMap::new();
    let mut len = 0usize;
    for c in s.chars() {
        *freq.entry(c).or_insert(0) += 1;
        len += 1;
    }
    let len = len as f64;
    Ok(freq
        .values()
        .map(|&count| {
            let p = count as f64 / len;
            -p * p.log2()
        })
        .sum())
}

/// Population statistics for the entropy filter: mean and population
/// standard deviation (the 1/N form).
pub fn entropy_population_stats(entropies: &[f64]) -> (f64, f64) {
    let n = entropies.len() as f64;
    if entropies.is_empty() {
        return (0.0, 0.0);
    }
    let mu = entropies.iter().sum::<f64>() / n;
    let var = entropies.iter().map(|h| (h - mu).powi(2)).sum::<f64>() / n;
    (mu, var.sqrt())
}

/// Two-sided 3-sigma verdict for one entropy value against population stats.
/// Degenerate populations (fewer than 2 members, or zero spread) pass.
pub fn entropy_verdict(h: f64, mu: f64, sigma: f64, population: usize) -> FilterVerdict {
    if population < 2 || sigma == 0.0 {
        return FilterVerdict {
            stage: FilterStage::Entropy,
            passed: true,
            reason: "degenerate population; filter inert".to_string(),
        };
    }
    if (h - mu).abs() > 3.0 * sigma {
        FilterVerdict {
            stage: FilterStage::Entropy,
            passed: false,
            reason: format!(
                "entropy {h:.4} outside 3-sigma band around mu={mu:.4}, sigma={sigma:.4}"
            ),
        }
    } else {
        FilterVerdict {
            stage: FilterStage::Entropy,
            passed: true,
            reason: String::new(),
        }
    }
}

// ---------------------------------------------------------------------------
// Stage 3: trivial-pattern filter
// ---------------------------------------------------------------------------

fn char_class(c: char) -> Option<u8> {
    if c.is_ascii_digit() {
        Some(0)
    } else if c.is_ascii_lowercase() {
        Some(1)
    } else if c.is_ascii_uppercase() {
        Some(2)
    } else {
        None
    }
}

fn is_consecutive_run(window: &[char], step: i32) -> bool {
    let class = match char_class(window[0]) {
        Some(c) => c,
        None => return false,
    };
    window.windows(2).all(|pair| {
        char_class(pair[1]) == Some(class)
            && pair[1] as i32 == pair[0] as i32 + step
    })
}

fn has_repeated_unit(chars: &[char], unit: usize, reps: usize) -> bool {
    let total = unit * reps;
    if chars.len() < total {
        return false;
    }
    (0..=chars.len() - total).any(|i| {
        (1..reps).all(|r| chars[i..i + unit] == chars[i + r * unit..i + (r + 1) * unit])
    })
}

/// Finds the first of the six trivial patterns present in `s` as a
/// contiguous substring, returning the rule number (1-6):
/// 1 AAAA, 2 ABCD ascending, 3 DCBA descending, 4 XYXYXY, 5 WXYWXYWXY,
/// 6 WXYZWXYZ. Rules 2/3 require adjacent code points within a single
/// digit/lowercase/uppercase run.
pub fn find_trivial_pattern(s: &str) -> Option<u8> {
    let chars: Vec<char> = s.chars().collect();
    if chars.len() >= 4 && chars.windows(4).any(|w| w.iter().all(|&c| c == w[0])) {
        return Some(1);
    }
    if chars.len() >= 4 && chars.windows(4).any(|w| is_consecutive_run(w, 1)) {
        return Some(2);
    }
    if chars.len() >= 4 && chars.windows(4).any(|w| is_consecutive_run(w, -1)) {
        return Some(3);
    }
    if has_repeated_unit(&chars, 2, 3) {
        return Some(4);
    }
    if has_repeated_unit(&chars, 3, 3) {
        return Some(5);
    }
    if has_repeated_unit(&chars, 4, 2) {
        return Some(6);
    }
    None
}

/// Pattern-filter verdict over an already-stripped candidate string.
pub fn pattern_filter(stripped: &str) -> FilterVerdict {
    match find_trivial_pattern(stripped) {
        Some(rule) => FilterVerdict {
            stage: FilterStage::Pattern,
            passed: false,
            reason: format!("trivial pattern rule {rule}"),
        },
        None => FilterVerdict {
            stage: FilterStage::Pattern,
            passed: true,
            reason: String::new(),
        },
    }
}

// ---------------------------------------------------------------------------
// Stage 4: word filter
// ---------------------------------------------------------------------------

/// Case-insensitive dictionary of common English words.
#[derive(Debug, Clone)]
pub struct WordDictionary {
    /// Lowercased, sorted, deduplicated.
    words: Vec<String>,
}

impl WordDictionary {
    pub fn builtin() -> WordDictionary {
        WordDictionary::from_text(DEFAULT_WORDLIST)
    }

    pub fn load(path: &Path) -> Result<WordDictionary, FilterError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| FilterError::DictionaryMissing(format!("{}: {e}", path.display())))?;
        Ok(WordDictionary::from_text(&text))
    }

    pub fn from_text(text: &str) -> WordDictionary {
        let mut words: Vec<String> = text
            .lines()
            .map(|l| l.trim().to_lowercase())
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect();
        words.sort();
        words.dedup();
        WordDictionary { words }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Earliest (then longest) dictionary word of length >= 4 contained in
    /// `s`, case-insensitively. Returns the matched substring as it appears
    /// in `s`.
    pub fn find_word(&self, s: &str) -> Option<String> {
        let lower = s.to_lowercase();
        let mut best: Option<(usize, usize)> = None; // (position, len)
        for word in &self.words {
            if word.chars().count() < WORD_FILTER_MIN_LEN {
                continue;
            }
            if let Some(pos) = lower.find(word.as_str()) {
                let better = match best {
                    None => true,
                    Some((bp, bl)) => pos < bp || (pos == bp && word.len() > bl),
                };
                if better {
                    best = Some((pos, word.len()));
                }
            }
        }
        best.map(|(pos, len)| s[pos..pos + len].to_string())
    }
}

/// Word-filter verdict over an already-stripped candidate. Exempt specs
/// always pass.
pub fn word_filter(
    stripped: &str,
    dictionary: &WordDictionary,
    spec: &SecretTypeSpec,
) -> FilterVerdict {
    if spec.word_filter_exempt {
        return FilterVerdict {
            stage: FilterStage::Word,
            passed: true,
            reason: "secret type exempt from word filter".to_string(),
        };
    }
    match dictionary.find_word(stripped) {
        Some(word) => FilterVerdict {
            stage: FilterStage::Word,
            passed: false,
            reason: word,
        },
        None => FilterVerdict {
            stage: FilterStage::Word,
            passed: true,
            reason: String::new(),
        },
    }
}

// ---------------------------------------------------------------------------
// Cascade
// ---------------------------------------------------------------------------

/// Runs the full cascade over a set of suggestions. `case_types` maps
/// case_id to secret_type_id so each suggestion is matched against its own
/// spec. The entropy population is global across all candidates that passed
/// the regex stage in this run.
///
/// The funnel's regex row counts suggestions in and candidates out; later
/// rows count candidates on both sides.
pub fn run_cascade(
    suggestions: &[Suggestion],
    case_types: &HashMap<String, String>,
    registry: &Registry,
    dictionary: &WordDictionary,
) -> Result<(Vec<CandidateSecret>, Vec<FunnelStage>), FilterError> {
    let mut candidates: Vec<CandidateSecret> = Vec::new();
    let mut productive_suggestions = 0usize;

    for sugg in suggestions {
        let type_id = case_types
            .get(&sugg.case_id)
            .ok_or_else(|| FilterError::UnknownCase(sugg.case_id.clone()))?;
        let spec = registry
            .get(type_id)
            .ok_or(RegistryError::UnknownId(type_id.clone()))?;
        let extracted = extract_candidates(&sugg.text, spec)?;
        if !extracted.is_empty() {
            productive_suggestions += 1;
        }
        for (idx, raw) in extracted.into_iter().enumerate() {
            let stripped = strip_fixed_parts(spec, &raw)?;
            let entropy = shannon_entropy_per_char(&stripped).unwrap_or(0.0);
            candidates.push(CandidateSecret {
                candidate_id: format!("{}/{}/{}/{}", sugg.case_id, sugg.backend_id, sugg.rank, idx),
                case_id: sugg.case_id.clone(),
                backend_id: sugg.backend_id.clone(),
                rank: sugg.rank,
                raw_text: raw,
                stripped_text: stripped,
                entropy_per_char: entropy,
                verdicts: vec![FilterVerdict {
                    stage: FilterStage::Regex,
                    passed: true,
                    reason: spec.id.clone(),
                }],
                plausible: false,
            });
        }
    }

    let mut funnel = vec![FunnelStage {
        stage: FilterStage::Regex,
        in_count: suggestions.len(),
        dropped: suggestions.len() - productive_suggestions,
        out_count: candidates.len(),
    }];

    // Entropy stage is a barrier: population statistics first, then verdicts.
    let entropies: Vec<f64> = candidates.iter().map(|c| c.entropy_per_char).collect();
    let (mu, sigma) = entropy_population_stats(&entropies);
    let population = entropies.len();
    let mut survivors = candidates.len();
    for cand in &mut candidates {
        let v = entropy_verdict(cand.entropy_per_char, mu, sigma, population);
        if !v.passed {
            survivors -= 1;
        }
        cand.verdicts.push(v);
    }
    funnel.push(FunnelStage {
        stage: FilterStage::Entropy,
        in_count: population,
        dropped: population - survivors,
        out_count: survivors,
    });

    let entropy_survivors = survivors;
    let mut pattern_survivors = 0usize;
    for cand in &mut candidates {
        if cand.verdicts.iter().all(|v| v.passed) {
            let v = pattern_filter(&cand.stripped_text);
            if v.passed {
                pattern_survivors += 1;
            }
            cand.verdicts.push(v);
        }
    }
    funnel.push(FunnelStage {
        stage: FilterStage::Pattern,
        in_count: entropy_survivors,
        dropped: entropy_survivors - pattern_survivors,
        out_count: pattern_survivors,
    });

    let mut word_survivors = 0usize;
    for cand in &mut candidates {
        if cand.verdicts.len() == 3 && cand.verdicts.iter().all(|v| v.passed) {
            let type_id = &case_types[&cand.case_id];
            let spec = registry.get(type_id).expect("checked above");
            let v = word_filter(&cand.stripped_text, dictionary, spec);
            if v.passed {
                word_survivors += 1;
            }
            cand.verdicts.push(v);
        }
    }
    funnel.push(FunnelStage {
        stage: FilterStage::Word,
        in_count: pattern_survivors,
        dropped: pattern_survivors - word_survivors,
        out_count: word_survivors,
    });

    for cand in &mut candidates {
        cand.plausible = cand.verdicts.len() == 4 && cand.verdicts.iter().all(|v| v.passed);
    }
    Ok((candidates, funnel))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::Registry;

    #[test]
    fn entropy_worked_example() {
        // 12 of one char, 4 of another: frequencies 0.75 / 0.25.
        let h = shannon_entropy_per_char("XXXXXXXXXXXXBBBB").unwrap();
        assert!((h - 0.8112).abs() < 2e-4, "H = {h}");
    }

    #[test]
    fn entropy_degenerate_and_uniform() {
        assert_eq!(shannon_entropy_per_char("AAAA").unwrap(), 0.0);
        assert_eq!(shannon_entropy_per_char("ABCDEFGHIJKLMNOP").unwrap(), 4.0);
        assert!(matches!(
            shannon_entropy_per_char(""),
            Err(FilterError::EmptyString)
        ));
    }

    #[test]
    fn entropy_is_permutation_invariant() {
        let a = shannon_entropy_per_char("aabbccdd").unwrap();
        let b = shannon_entropy_per_char("abcdabcd").unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn three_sigma_rejection() {
        let v = entropy_verdict(0.8112, 4.0, 1.0, 100);
        assert!(!v.passed);
        assert!(!v.reason.is_empty());
        let v = entropy_verdict(3.5, 4.0, 1.0, 100);
        assert!(v.passed);
    }

    #[test]
    fn three_sigma_threshold_matches_reported_cutoff() {
        // mu = 4.46, sigma = 0.71 -> cutoff 2.33; values just below fail.
        let (mu, sigma) = (4.46f64, 0.71f64);
        let cutoff = mu - 3.0 * sigma;
        assert!((cutoff - 2.33).abs() < 0.01);
        assert!(!entropy_verdict(2.32, mu, sigma, 100).passed);
        assert!(entropy_verdict(2.34, mu, sigma, 100).passed);
    }

    #[test]
    fn degenerate_population_is_inert() {
        let v = entropy_verdict(0.5, 0.5, 0.0, 1);
        assert!(v.passed);
        assert!(!v.reason.is_empty());
    }

    #[test]
    fn pattern_rules_fire() {
        assert_eq!(find_trivial_pattern("XXXXXXXXXXXXBBBB"), Some(1));
        assert_eq!(find_trivial_pattern("Q9abcdR7"), Some(2));
        assert_eq!(find_trivial_pattern("Q9dcbaR7"), Some(3));
        assert_eq!(find_trivial_pattern("zzababab9"), Some(4));
        assert_eq!(find_trivial_pattern("zab1ab1ab1z"), Some(5));
        assert_eq!(find_trivial_pattern("xq1wxq1wzz"), Some(6));
        assert_eq!(find_trivial_pattern("Q9abcR7d"), None);
    }

    #[test]
    fn ascending_requires_single_class_run() {
        // '9' -> ':' is adjacent in code points but crosses out of digits.
        assert_eq!(find_trivial_pattern("789:"), None);
        // Case-sensitive: 'Y' 'Z' 'a' 'b' is not one run.
        assert_eq!(find_trivial_pattern("YZab"), None);
        assert_eq!(find_trivial_pattern("6789"), Some(2));
    }

    #[test]
    fn word_filter_example_key() {
        let reg = Registry::builtin();
        let dict = WordDictionary::builtin();
        let spec = reg.get("aws_access_key_id").unwrap();
        let stripped = "IOSFQWER7EXAMPLE";
        let v = word_filter(stripped, &dict, spec);
        assert!(!v.passed);
        assert_eq!(v.reason, "EXAMPLE");
    }

    #[test]
    fn short_words_do_not_fail() {
        let reg = Registry::builtin();
        let dict = WordDictionary::from_text("key\nexample\n");
        let spec = reg.get("aws_access_key_id").unwrap();
        let v = word_filter("KEY9Q7R2W8", &dict, spec);
        assert!(v.passed);
    }

    #[test]
    fn ebay_spec_is_exempt() {
        let reg = Registry::builtin();
        let dict = WordDictionary::builtin();
        let spec = reg.get("ebay_production_client_id").unwrap();
        let v = word_filter("AustinFr-ebayplug-xqlt71c7c-57qjc7xq", &dict, spec);
        assert!(v.passed);
    }

    #[test]
    fn word_filter_monotone_under_dictionary_growth() {
        let reg = Registry::builtin();
        let spec = reg.get("aws_access_key_id").unwrap();
        let small = WordDictionary::from_text("example\n");
        let big = WordDictionary::from_text("example\nqwer\nzzzz\n");
        for s in ["IOSFQWER7EXAMPLE", "R7W2Q8Z1X9", "QWERQ7R2"] {
            let v_small = word_filter(s, &small, spec);
            let v_big = word_filter(s, &big, spec);
            if !v_small.passed {
                assert!(!v_big.passed, "adding words must not rescue {s}");
            }
        }
    }
}
