//! Edit distance and the evaluation metrics used throughout the crate:
//! WER, keyword error counting, sentence accuracy, and substring recall.
//!
//! Every comparison normalizes first (NFC, lowercase, whitespace runs
//! collapsed). CJK characters are compared character-wise, everything else
//! word-wise, so Chinese-domain transcripts and space-delimited text go
//! through the same code path.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

/// Normalizes text for metric comparisons: NFC, lowercased, whitespace runs
/// collapsed to single ASCII spaces, leading/trailing whitespace dropped.
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for c in text.nfc() {
        if c.is_whitespace() {
            pending_space = !out.is_empty();
        } else {
            if pending_space {
                out.push(' ');
                pending_space = false;
            }
            out.extend(c.to_lowercase());
        }
    }
    out
}

/// CJK ranges that tokenize character-wise: unified ideographs (+ext A and
/// B), compatibility ideographs, kana, and hangul syllables.
fn is_cjk(c: char) -> bool {
    matches!(c,
        '\u{3400}'..='\u{4DBF}'
        | '\u{4E00}'..='\u{9FFF}'
        | '\u{F900}'..='\u{FAFF}'
        | '\u{3040}'..='\u{30FF}'
        | '\u{AC00}'..='\u{D7AF}'
        | '\u{20000}'..='\u{2A6DF}')
}

/// A normalized token sequence: word tokens for space-delimited text,
/// single-character tokens for CJK runs. Mixed text yields a mix of both.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TokenSeq {
    tokens: Vec<String>,
}

impl TokenSeq {
    /// Tokenizes after [`normalize`]. Deterministic and idempotent:
    /// re-tokenizing the joined tokens yields the same sequence.
    pub fn tokenize(text: &str) -> Self {
        let norm = normalize(text);
        let mut tokens = Vec::new();
        let mut word = String::new();
        for c in norm.chars() {
            if c == ' ' {
                if !word.is_empty() {
                    tokens.push(std::mem::take(&mut word));
                }
            } else if is_cjk(c) {
                if !word.is_empty() {
                    tokens.push(std::mem::take(&mut word));
                }
                tokens.push(c.to_string());
            } else {
                word.push(c);
            }
        }
        if !word.is_empty() {
            tokens.push(word);
        }
        TokenSeq { tokens }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens joined with single spaces.
    pub fn as_text(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Minimum number of insertions, deletions, and substitutions turning `a`
/// into `b`. Symmetric in its arguments by construction (both orders run
/// the identical computation); zero iff the sequences are equal.
pub fn edit_distance(a: &TokenSeq, b: &TokenSeq) -> usize {
    levenshtein(a.tokens(), b.tokens())
}

/// Short tokens dominate this workload; an inline byte loop beats the
/// libc memcmp call the derived `String` equality lowers to.
#[inline]
fn token_eq(a: &str, b: &str) -> bool {
    a.len() == b.len() && a.bytes().zip(b.bytes()).all(|(x, y)| x == y)
}

#[inline]
fn token_cmp(a: &str, b: &str) -> std::cmp::Ordering {
    a.bytes().cmp(b.bytes())
}

pub(crate) fn levenshtein(a: &[String], b: &[String]) -> usize {
    // Shared prefixes and suffixes cost nothing.
    let prefix = a
        .iter()
        .zip(b)
        .take_while(|(x, y)| token_eq(x, y))
        .count();
    let (a, b) = (&a[prefix..], &b[prefix..]);
    let suffix = a
        .iter()
        .rev()
        .zip(b.iter().rev())
        .take_while(|(x, y)| token_eq(x, y))
        .count();
    let (a, b) = (&a[..a.len() - suffix], &b[..b.len() - suffix]);
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    // Canonical argument order: shorter first, ties by content, so both
    // call orders perform the same cell updates.
    let order = a.len().cmp(&b.len()).then_with(|| {
        a.iter()
            .zip(b)
            .map(|(x, y)| token_cmp(x, y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let (short, long) = match order {
        std::cmp::Ordering::Greater => (b, a),
        _ => (a, b),
    };
    // Resolve the inner-loop tokens to byte slices once; chasing String
    // headers per DP cell dominates the runtime otherwise.
    const STACK_ROW: usize = 32;
    if short.len() <= STACK_ROW {
        let mut row = [0usize; STACK_ROW + 1];
        row.iter_mut().enumerate().for_each(|(j, r)| *r = j);
        let mut short_bytes: [&[u8]; STACK_ROW] = [&[]; STACK_ROW];
        for (slot, t) in short_bytes.iter_mut().zip(short) {
            *slot = t.as_bytes();
        }
        levenshtein_row(&short_bytes[..short.len()], long, &mut row[..=short.len()])
    } else {
        let mut row: Vec<usize> = (0..=short.len()).collect();
        let short_bytes: Vec<&[u8]> = short.iter().map(|t| t.as_bytes()).collect();
        levenshtein_row(&short_bytes, long, &mut row)
    }
}

#[inline]
fn bytes_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x == y)
}

/// Single-row DP; `row` arrives initialized to 0..=short.len().
fn levenshtein_row(short: &[&[u8]], long: &[String], row: &mut [usize]) -> usize {
    for (i, lt) in long.iter().enumerate() {
        let lt = lt.as_bytes();
        let mut diag = row[0];
        let mut left = i + 1;
        row[0] = left;
        for (st, cell) in short.iter().zip(&mut row[1..]) {
            let up = *cell;
            let val = (up + 1)
                .min(left + 1)
                .min(diag + usize::from(!bytes_eq(lt, st)));
            *cell = val;
            left = val;
            diag = up;
        }
    }
    row[short.len()]
}

/// Word (or character, for CJK) error rate: edit distance divided by the
/// reference length. Deliberately not clamped; may exceed 1.0.
pub fn wer(reference: &TokenSeq, hypothesis: &TokenSeq) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Ground-truth keywords annotated on one utterance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordAnnotation {
    pub utterance_id: String,
    pub keywords: BTreeSet<String>,
}

impl KeywordAnnotation {
    /// Rejects empty keywords; duplicates collapse via the set.
    pub fn new<I, S>(utterance_id: impl Into<String>, keywords: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut set = BTreeSet::new();
        for kw in keywords {
            let kw = kw.into();
            if normalize(&kw).is_empty() {
                return Err(Error::EmptyInput("keyword"));
            }
            set.insert(kw);
        }
        Ok(KeywordAnnotation {
            utterance_id: utterance_id.into(),
            keywords: set,
        })
    }
}

/// Number of annotated keywords that do not occur as a substring of the
/// (normalized) hypothesis text. Each keyword counts at most once.
pub fn keyword_error_count(annotation: &KeywordAnnotation, hyp_text: &str) -> usize {
    let hyp = normalize(hyp_text);
    annotation
        .keywords
        .iter()
        .filter(|kw| !hyp.contains(&normalize(kw)))
        .count()
}

/// Sentence accuracy: percentage of hypotheses whose normalized tokens
/// match their reference exactly.
pub fn sacc(refs: &[TokenSeq], hyps: &[TokenSeq]) -> Result<f64> {
    if refs.len() != hyps.len() {
        return Err(Error::LengthMismatch {
            refs: refs.len(),
            hyps: hyps.len(),
        });
    }
    if refs.is_empty() {
        return Err(Error::EmptyInput("sentence lists"));
    }
    let correct = refs.iter().zip(hyps).filter(|(r, h)| r == h).count();
    Ok(100.0 * correct as f64 / refs.len() as f64)
}

/// Substring recall rule: `annotated` counts as recalled when any retrieved
/// entry contains it after normalization. Direction matters: "qwen" is
/// recalled by "qwen2.5" but "qwen3" is not recalled by "qwen".
pub fn is_recalled<S: AsRef<str>>(annotated: &str, retrieved: &[S]) -> bool {
    let needle = normalize(annotated);
    debug_assert!(!needle.is_empty(), "annotated keyword must be non-empty");
    retrieved
        .iter()
        .any(|r| normalize(r.as_ref()).contains(&needle))
}

/// Raw tallies backing an [`EvalReport`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub utterances: usize,
    pub keywords: usize,
    pub keyword_errors: usize,
    pub correct_sentences: usize,
}

/// Aggregated evaluation numbers for one test set.
///
/// `ker_percent` is omitted when the set has no annotated keywords
/// (keyword error rate is undefined there, not zero).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub wer: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ker_percent: Option<f64>,
    pub sacc_percent: f64,
    pub per_k_recall: BTreeMap<usize, f64>,
    pub counts: EvalCounts,
}

impl EvalReport {
    pub fn new(wer: f64, per_k_recall: BTreeMap<usize, f64>, counts: EvalCounts) -> Self {
        let ker_percent = (counts.keywords > 0)
            .then(|| 100.0 * counts.keyword_errors as f64 / counts.keywords as f64);
        let sacc_percent = if counts.utterances > 0 {
            100.0 * counts.correct_sentences as f64 / counts.utterances as f64
        } else {
            0.0
        };
        EvalReport {
            wer,
            ker_percent,
            sacc_percent,
            per_k_recall,
            counts,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Full-matrix DP oracle, independent of the two-row implementation.
    fn oracle_edit_distance(a: &[char], b: &[char]) -> usize {
        let mut dp = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for (i, row) in dp.iter_mut().enumerate() {
            row[0] = i;
        }
        for j in 0..=b.len() {
            dp[0][j] = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let cost = usize::from(a[i - 1] != b[j - 1]);
                dp[i][j] = (dp[i - 1][j] + 1)
                    .min(dp[i][j - 1] + 1)
                    .min(dp[i - 1][j - 1] + cost);
            }
        }
        dp[a.len()][b.len()]
    }

    fn chars_seq(s: &str) -> TokenSeq {
        // Character-level sequence via spaced-out characters.
        let spaced: String = s.chars().flat_map(|c| [c, ' ']).collect();
        TokenSeq::tokenize(&spaced)
    }

    #[test]
    fn edit_distance_identity_and_deletions() {
        let abc = TokenSeq::tokenize("a b c");
        assert_eq!(edit_distance(&abc, &abc), 0);
        assert_eq!(edit_distance(&abc, &TokenSeq::tokenize("")), 3);
    }

    #[test]
    fn edit_distance_kitten_sitting() {
        let kitten: Vec<char> = "kitten".chars().collect();
        let sitting: Vec<char> = "sitting".chars().collect();
        assert_eq!(oracle_edit_distance(&kitten, &sitting), 3);
        assert_eq!(edit_distance(&chars_seq("kitten"), &chars_seq("sitting")), 3);
    }

    #[test]
    fn wer_cases() {
        let r = TokenSeq::tokenize("a b c");
        assert_eq!(wer(&r, &r).unwrap(), 0.0);
        let dist = edit_distance(&r, &TokenSeq::tokenize("a x c"));
        assert_eq!(dist, 1);
        assert!((wer(&r, &TokenSeq::tokenize("a x c")).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        // 2 insertions over 2 reference tokens.
        let short = TokenSeq::tokenize("a b");
        assert_eq!(wer(&short, &TokenSeq::tokenize("a b c d")).unwrap(), 1.0);
    }

    #[test]
    fn wer_empty_reference_is_an_error() {
        let empty = TokenSeq::tokenize("   ");
        assert!(matches!(
            wer(&empty, &TokenSeq::tokenize("x")),
            Err(Error::EmptyReference)
        ));
    }

    #[test]
    fn keyword_error_counting() {
        let ann = KeywordAnnotation::new("u1", ["qwen"]).unwrap();
        assert_eq!(keyword_error_count(&ann, "we use qwen daily"), 0);
        let ann2 = KeywordAnnotation::new("u2", ["qwen", "tongyi"]).unwrap();
        assert_eq!(keyword_error_count(&ann2, "we use qwen daily"), 1);
        let empty = KeywordAnnotation::new("u3", Vec::<String>::new()).unwrap();
        assert_eq!(keyword_error_count(&empty, "anything at all"), 0);
    }

    #[test]
    fn keyword_match_is_case_and_space_insensitive() {
        let ann = KeywordAnnotation::new("u", ["Tongyi"]).unwrap();
        assert_eq!(keyword_error_count(&ann, "we   like TONGYI"), 0);
    }

    #[test]
    fn sacc_cases() {
        let refs: Vec<_> = ["a b", "c", "d e", "f"]
            .iter()
            .map(|s| TokenSeq::tokenize(s))
            .collect();
        assert_eq!(sacc(&refs, &refs).unwrap(), 100.0);
        let mut hyps = refs.clone();
        hyps[1] = TokenSeq::tokenize("x");
        assert_eq!(sacc(&refs, &hyps).unwrap(), 75.0);
        let wrong: Vec<_> = refs.iter().map(|_| TokenSeq::tokenize("zzz")).collect();
        assert_eq!(sacc(&refs, &wrong).unwrap(), 0.0);
        assert!(sacc(&refs, &refs[..2]).is_err());
        assert!(sacc(&[], &[]).is_err());
    }

    #[test]
    fn recall_direction() {
        assert!(is_recalled("qwen", &["qwen2.5", "tongyi"]));
        assert!(is_recalled("qwen", &["qwen"]));
        assert!(!is_recalled("qwen3", &["qwen"]));
    }

    #[test]
    fn cjk_tokenizes_per_character() {
        let seq = TokenSeq::tokenize("我用qwen转录");
        assert_eq!(seq.tokens(), ["我", "用", "qwen", "转", "录"]);
        // Idempotent: re-tokenizing the joined text gives the same tokens.
        assert_eq!(TokenSeq::tokenize(&seq.as_text()), seq);
    }

    #[test]
    fn normalization_collapses_whitespace_and_case() {
        assert_eq!(normalize("  Hello\t\tWorld \n"), "hello world");
        assert_eq!(normalize(""), "");
        assert_eq!(normalize(" \t "), "");
    }

    #[test]
    fn report_identities() {
        let counts = EvalCounts {
            utterances: 8,
            keywords: 5,
            keyword_errors: 2,
            correct_sentences: 6,
        };
        let report = EvalReport::new(0.125, BTreeMap::new(), counts);
        assert_eq!(report.ker_percent, Some(100.0 * 2.0 / 5.0));
        assert_eq!(report.sacc_percent, 75.0);
        let no_kw = EvalReport::new(
            0.0,
            BTreeMap::new(),
            EvalCounts {
                utterances: 4,
                keywords: 0,
                keyword_errors: 0,
                correct_sentences: 4,
            },
        );
        assert_eq!(no_kw.ker_percent, None);
        let json = serde_json::to_string(&no_kw).unwrap();
        assert!(!json.contains("ker_percent"));
    }

    proptest! {
        #[test]
        fn edit_distance_matches_oracle_and_is_symmetric(
            a in "[abc]{0,8}",
            b in "[abc]{0,8}",
        ) {
            let sa = chars_seq(&a);
            let sb = chars_seq(&b);
            let d = edit_distance(&sa, &sb);
            let ca: Vec<char> = a.chars().collect();
            let cb: Vec<char> = b.chars().collect();
            prop_assert_eq!(d, oracle_edit_distance(&ca, &cb));
            prop_assert_eq!(d, edit_distance(&sb, &sa));
            prop_assert_eq!(d == 0, sa == sb);
        }

        #[test]
        fn edit_distance_triangle_inequality(
            a in "[abc]{0,6}",
            b in "[abc]{0,6}",
            c in "[abc]{0,6}",
        ) {
            let (sa, sb, sc) = (chars_seq(&a), chars_seq(&b), chars_seq(&c));
            prop_assert!(
                edit_distance(&sa, &sc) <= edit_distance(&sa, &sb) + edit_distance(&sb, &sc)
            );
        }

        #[test]
        fn tokenize_is_idempotent(text in "[ a-z\u{4e00}-\u{4e2f}]{0,24}") {
            let seq = TokenSeq::tokenize(&text);
            prop_assert_eq!(TokenSeq::tokenize(&seq.as_text()), seq);
        }

        #[test]
        fn keyword_errors_monotone_under_appends(
            hyp in "[a-d ]{0,12}",
            suffix in "[a-d ]{0,6}",
        ) {
            let ann = KeywordAnnotation::new("u", ["ab", "cd", "d"]).unwrap();
            let before = keyword_error_count(&ann, &hyp);
            let after = keyword_error_count(&ann, &format!("{hyp}{suffix}"));
            prop_assert!(after <= before);
        }

        #[test]
        fn recall_distributes_over_union(
            l1 in proptest::collection::vec("[a-c]{1,4}", 0..4),
            l2 in proptest::collection::vec("[a-c]{1,4}", 0..4),
        ) {
            let both: Vec<String> = l1.iter().chain(l2.iter()).cloned().collect();
            let expected = is_recalled("ab", &l1) || is_recalled("ab", &l2);
            prop_assert_eq!(is_recalled("ab", &both), expected);
        }

        #[test]
        fn wer_zero_iff_equal_after_normalization(
            a in "[ab ]{1,10}",
            b in "[ab ]{1,10}",
        ) {
            let sa = TokenSeq::tokenize(&a);
            let sb = TokenSeq::tokenize(&b);
            prop_assume!(!sa.is_empty());
            let w = wer(&sa, &sb).unwrap();
            prop_assert_eq!(w == 0.0, sa == sb);
        }
    }
}
