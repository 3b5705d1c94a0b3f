//! Text primitives shared by the scorers, the shortening strategies and the
//! metrics: Unicode tokenization, n-gram counting, paragraph splitting,
//! triple verbalization and coreference rewriting.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_segmentation::UnicodeSegmentation;

use crate::corpus::{CorefClusterRecord, Mention, TripleRecord};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TextError {
    #[error("mentions of cluster {cluster_id} overlap another mention")]
    OverlappingMentions { cluster_id: i64 },
    #[error("cluster {cluster_id} has a mention outside paragraph bounds")]
    SpanOutOfBounds { cluster_id: i64 },
}

/// A word token with its position in the source text.
///
/// `text` is lowercased, so it equals the lowercased source slice; scripts
/// without case come through unchanged.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub char_start: usize,
    pub char_end: usize,
    #[serde(skip)]
    pub byte_range: Range<usize>,
}

impl Token {
    /// The token as it appears in `source`, before lowercasing.
    pub fn surface<'a>(&self, source: &'a str) -> &'a str {
        &source[self.byte_range.clone()]
    }
}

/// UAX #29 word segmentation. Whitespace and punctuation never form tokens.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut chars_seen = 0usize;
    let mut bytes_seen = 0usize;
    for (start, word) in text.unicode_word_indices() {
        chars_seen += text[bytes_seen..start].chars().count();
        let len = word.chars().count();
        tokens.push(Token {
            text: word.to_lowercase(),
            char_start: chars_seen,
            char_end: chars_seen + len,
            byte_range: start..start + word.len(),
        });
        chars_seen += len;
        bytes_seen = start + word.len();
    }
    tokens
}

/// Token texts only.
pub fn tokenize_words(text: &str) -> Vec<String> {
    tokenize(text).into_iter().map(|t| t.text).collect()
}

/// Per-language stopword list. Not applied unless explicitly requested.
#[derive(Debug, Clone, Default)]
pub struct Stopwords(HashSet<String>);

impl Stopwords {
    pub fn new<I: IntoIterator<Item = S>, S: AsRef<str>>(words: I) -> Self {
        Self(words.into_iter().map(|w| w.as_ref().to_lowercase()).collect())
    }

    /// Reads `<dir>/<language>.txt`, one token per line.
    pub fn load(dir: impl AsRef<Path>, language: &str) -> io::Result<Self> {
        let raw = fs::read_to_string(dir.as_ref().join(format!("{language}.txt")))?;
        Ok(Self::new(raw.lines().map(str::trim).filter(|l| !l.is_empty())))
    }

    pub fn contains(&self, word: &str) -> bool {
        self.0.contains(word)
    }
}

pub fn tokenize_words_filtered(text: &str, stopwords: Option<&Stopwords>) -> Vec<String> {
    let words = tokenize_words(text);
    match stopwords {
        Some(sw) => words.into_iter().filter(|w| !sw.contains(w)).collect(),
        None => words,
    }
}

/// Contiguous n-grams with multiplicity.
pub fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    assert!(n >= 1, "n-gram order must be at least 1");
    let mut counts = HashMap::new();
    if tokens.len() < n {
        return counts;
    }
    for window in tokens.windows(n) {
        let key: Vec<&str> = window.iter().map(AsRef::as_ref).collect();
        *counts.entry(key).or_insert(0) += 1;
    }
    counts
}

/// Splits on blank lines; single newlines stay inside a paragraph.
pub fn split_paragraphs(raw: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    let mut flush = |current: &mut Vec<&str>| {
        let joined = current.join("\n");
        let trimmed = joined.trim();
        if !trimmed.is_empty() {
            out.push(trimmed.to_string());
        }
        current.clear();
    };
    for line in raw.lines() {
        if line.trim().is_empty() {
            flush(&mut current);
        } else {
            current.push(line);
        }
    }
    flush(&mut current);
    out
}

/// Renders a triple as `"{head} {relation} {tail}."`.
pub fn verbalize_triple(t: &TripleRecord) -> String {
    format!("{} {} {}.", t.head.trim(), t.relation.trim(), t.tail.trim())
}

fn char_to_byte(s: &str, char_idx: usize) -> Option<usize> {
    if char_idx == s.chars().count() {
        return Some(s.len());
    }
    s.char_indices().nth(char_idx).map(|(b, _)| b)
}

fn mention_text<'a>(paragraphs: &'a [String], m: &Mention) -> Option<&'a str> {
    let p = paragraphs.get(m.paragraph_index)?;
    if m.char_start >= m.char_end {
        return None;
    }
    let start = char_to_byte(p, m.char_start)?;
    let end = char_to_byte(p, m.char_end)?;
    Some(&p[start..end])
}

/// Longest mention text wins; ties go to the earliest mention.
fn representative(paragraphs: &[String], cluster: &CorefClusterRecord) -> Option<Mention> {
    let mut mentions = cluster.mentions.clone();
    mentions.sort();
    mentions
        .into_iter()
        .filter_map(|m| mention_text(paragraphs, &m).map(|t| (m, t.chars().count())))
        .fold(None, |best: Option<(Mention, usize)>, (m, len)| match best {
            Some((_, best_len)) if best_len >= len => best,
            _ => Some((m, len)),
        })
        .map(|(m, _)| m)
}

/// Replaces every non-representative mention of each cluster with the
/// cluster's representative text.
pub fn rewrite_with_coref(
    paragraphs: &[String],
    clusters: &[CorefClusterRecord],
) -> Result<Vec<String>, TextError> {
    // (mention, cluster_id) sorted by position for overlap detection.
    let mut all: Vec<(Mention, i64)> = Vec::new();
    for c in clusters {
        for m in &c.mentions {
            if mention_text(paragraphs, m).is_none() {
                return Err(TextError::SpanOutOfBounds { cluster_id: c.cluster_id });
            }
            all.push((*m, c.cluster_id));
        }
    }
    all.sort();
    all.dedup();
    for pair in all.windows(2) {
        let (a, _) = pair[0];
        let (b, b_cluster) = pair[1];
        if a.paragraph_index == b.paragraph_index && b.char_start < a.char_end {
            return Err(TextError::OverlappingMentions { cluster_id: b_cluster });
        }
    }

    let mut edits: Vec<Vec<(usize, usize, String)>> = vec![Vec::new(); paragraphs.len()];
    for c in clusters {
        let Some(rep) = representative(paragraphs, c) else { continue };
        let rep_text = mention_text(paragraphs, &rep).unwrap().to_string();
        let mut mentions = c.mentions.clone();
        mentions.sort();
        mentions.dedup();
        for m in mentions.into_iter().filter(|m| *m != rep) {
            edits[m.paragraph_index].push((m.char_start, m.char_end, rep_text.clone()));
        }
    }

    let mut out = paragraphs.to_vec();
    for (p, mut list) in out.iter_mut().zip(edits) {
        list.sort_by(|a, b| b.0.cmp(&a.0));
        for (start, end, replacement) in list {
            let bs = char_to_byte(p, start).unwrap();
            let be = char_to_byte(p, end).unwrap();
            p.replace_range(bs..be, &replacement);
        }
    }
    Ok(out)
}

/// Triples linked through shared coreference clusters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripleGroup {
    pub group_id: usize,
    pub triple_indices: Vec<usize>,
    pub cluster_ids: Vec<i64>,
}

fn contains_subsequence(haystack: &[String], needle: &[String]) -> bool {
    !needle.is_empty()
        && haystack.len() >= needle.len()
        && haystack.windows(needle.len()).any(|w| w == needle)
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Groups triples whose slots contain (on token boundaries) mentions of a
/// common coreference cluster, closed transitively.
///
/// Groups are ordered by their smallest triple index; triples that match no
/// cluster stay in singleton groups.
pub fn group_triples_by_cluster(
    triples: &[TripleRecord],
    clusters: &[CorefClusterRecord],
    paragraphs: &[String],
) -> Vec<TripleGroup> {
    let slot_tokens: Vec<Vec<Vec<String>>> = triples
        .iter()
        .map(|t| t.slots().iter().map(|s| tokenize_words(s)).collect())
        .collect();

    // matches[i] = clusters that triple i mentions
    let mut matches: Vec<Vec<i64>> = vec![Vec::new(); triples.len()];
    let mut parent: Vec<usize> = (0..triples.len()).collect();
    for c in clusters {
        let mention_tokens: Vec<Vec<String>> = c
            .mentions
            .iter()
            .filter_map(|m| mention_text(paragraphs, m))
            .map(tokenize_words)
            .filter(|t| !t.is_empty())
            .collect();
        let hits: Vec<usize> = slot_tokens
            .iter()
            .enumerate()
            .filter(|(_, slots)| {
                slots
                    .iter()
                    .any(|slot| mention_tokens.iter().any(|m| contains_subsequence(slot, m)))
            })
            .map(|(i, _)| i)
            .collect();
        for &i in &hits {
            matches[i].push(c.cluster_id);
        }
        for pair in hits.windows(2) {
            let (a, b) = (find(&mut parent, pair[0]), find(&mut parent, pair[1]));
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
    }

    let mut groups: Vec<TripleGroup> = Vec::new();
    let mut root_to_group: HashMap<usize, usize> = HashMap::new();
    for i in 0..triples.len() {
        let root = find(&mut parent, i);
        let g = *root_to_group.entry(root).or_insert_with(|| {
            groups.push(TripleGroup {
                group_id: groups.len(),
                triple_indices: Vec::new(),
                cluster_ids: Vec::new(),
            });
            groups.len() - 1
        });
        groups[g].triple_indices.push(i);
        groups[g].cluster_ids.extend(&matches[i]);
    }
    for g in &mut groups {
        g.cluster_ids.sort_unstable();
        g.cluster_ids.dedup();
    }
    groups
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cluster(id: i64, mentions: &[(usize, usize, usize)]) -> CorefClusterRecord {
        CorefClusterRecord {
            record_id: "r".into(),
            cluster_id: id,
            mentions: mentions
                .iter()
                .map(|&(p, s, e)| Mention { paragraph_index: p, char_start: s, char_end: e })
                .collect(),
        }
    }

    fn span_of(hay: &str, needle: &str) -> (usize, usize) {
        let b = hay.find(needle).unwrap();
        let s = hay[..b].chars().count();
        (s, s + needle.chars().count())
    }

    #[test]
    fn tokenize_basics() {
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize_words("a  b"), vec!["a", "b"]);
        assert_eq!(tokenize_words("Helen, wife!"), vec!["helen", "wife"]);
    }

    #[test]
    fn tokenize_devanagari() {
        // Whitespace split is the oracle here: no punctuation in the sentence.
        let s = "मैं घर जाता";
        let oracle: Vec<&str> = s.split_whitespace().collect();
        assert_eq!(oracle.len(), 3);
        assert_eq!(tokenize_words(s), oracle);
        // danda is punctuation, not a token
        assert_eq!(tokenize_words("राम घर गया।").len(), 3);
    }

    #[test]
    fn tokenize_char_offsets() {
        let s = "नमस्ते John";
        let toks = tokenize(s);
        assert_eq!(toks.len(), 2);
        assert_eq!(toks[1].char_start, 7);
        assert_eq!(toks[1].surface(s), "John");
    }

    #[test]
    fn ngram_examples() {
        let t = ["a", "b", "c"];
        let bi = ngrams(&t, 2);
        assert_eq!(bi.len(), 2);
        assert_eq!(bi[&vec!["a", "b"]], 1);
        assert_eq!(bi[&vec!["b", "c"]], 1);
        assert!(ngrams(&["a"], 2).is_empty());
        assert_eq!(ngrams(&["a", "a", "a"], 1)[&vec!["a"]], 3);
    }

    #[test]
    fn paragraph_splitting() {
        assert_eq!(split_paragraphs("p1\n\np2"), vec!["p1", "p2"]);
        assert!(split_paragraphs("\n\n\n").is_empty());
        assert_eq!(split_paragraphs("a\nb\n\nc"), vec!["a\nb", "c"]);
        assert_eq!(split_paragraphs("  x  \n \n\ty\r\n"), vec!["x", "y"]);
    }

    #[test]
    fn verbalization() {
        let t = TripleRecord::new("r", 0, "Helen", "wife-of", "John Wick");
        assert_eq!(verbalize_triple(&t), "Helen wife-of John Wick.");
        let t = TripleRecord::new("r", 0, "Daisy", "is-a", "beagle");
        assert_eq!(verbalize_triple(&t), "Daisy is-a beagle.");
        let t = TripleRecord::new("r", 0, "New  York City", "has", "parks");
        assert_eq!(verbalize_triple(&t), "New  York City has parks.");
    }

    #[test]
    fn coref_rewrite_replaces_pronoun() {
        let p = vec!["John Wick lost a dog. Helen gifted him a beagle.".to_string()];
        let (a0, a1) = span_of(&p[0], "John Wick");
        let (b0, b1) = span_of(&p[0], "him");
        let out = rewrite_with_coref(&p, &[cluster(1, &[(0, a0, a1), (0, b0, b1)])]).unwrap();
        assert_eq!(out[0], "John Wick lost a dog. Helen gifted John Wick a beagle.");
        assert_eq!(rewrite_with_coref(&p, &[]).unwrap(), p);
    }

    #[test]
    fn coref_rewrite_identical_mentions_is_identity() {
        let p = vec!["Rama met Rama.".to_string()];
        let out = rewrite_with_coref(&p, &[cluster(0, &[(0, 0, 4), (0, 9, 13)])]).unwrap();
        assert_eq!(out, p);
    }

    #[test]
    fn coref_rewrite_across_paragraphs_and_non_ascii() {
        let p = vec!["सीता आई।".to_string(), "वह खुश थी।".to_string()];
        let (a0, a1) = span_of(&p[0], "सीता");
        let (b0, b1) = span_of(&p[1], "वह");
        let out = rewrite_with_coref(&p, &[cluster(0, &[(0, a0, a1), (1, b0, b1)])]).unwrap();
        assert_eq!(out[1], "सीता खुश थी।");
        assert_eq!(out[0], p[0]);
    }

    #[test]
    fn coref_overlap_rejected() {
        let p = vec!["John Wick and him".to_string()];
        let err = rewrite_with_coref(
            &p,
            &[cluster(0, &[(0, 0, 9), (0, 14, 17)]), cluster(1, &[(0, 5, 9), (0, 14, 15)])],
        )
        .unwrap_err();
        assert!(matches!(err, TextError::OverlappingMentions { .. }));
        let err = rewrite_with_coref(&p, &[cluster(2, &[(0, 0, 4), (0, 15, 40)])]).unwrap_err();
        assert_eq!(err, TextError::SpanOutOfBounds { cluster_id: 2 });
    }

    fn wick_fixture() -> (Vec<String>, Vec<TripleRecord>, Vec<CorefClusterRecord>) {
        let p = vec!["John Wick loved Daisy. Helen married him. Daisy was a beagle. Iosef stole a car.".to_string()];
        let (a0, a1) = span_of(&p[0], "John Wick");
        let (b0, b1) = span_of(&p[0], "him");
        let (c0, c1) = span_of(&p[0], "Daisy");
        let (d0, _) = span_of(&p[0], "Daisy was");
        let triples = vec![
            TripleRecord::new("r", 0, "Helen", "wife-of", "John Wick"),
            TripleRecord::new("r", 0, "John Wick", "loved", "Daisy"),
            TripleRecord::new("r", 0, "Daisy", "is-a", "beagle"),
            TripleRecord::new("r", 0, "Iosef", "stole", "a car"),
        ];
        let clusters = vec![
            cluster(10, &[(0, a0, a1), (0, b0, b1)]),
            cluster(20, &[(0, c0, c1), (0, d0, d0 + 5)]),
        ];
        (p, triples, clusters)
    }

    #[test]
    fn grouping_no_clusters_gives_singletons() {
        let (p, triples, _) = wick_fixture();
        let g = group_triples_by_cluster(&triples, &[], &p);
        assert_eq!(g.len(), 4);
        assert!(g.iter().enumerate().all(|(i, g)| g.triple_indices == vec![i] && g.group_id == i));
    }

    #[test]
    fn grouping_shared_mention_and_chain() {
        let (p, triples, clusters) = wick_fixture();
        // only the John Wick cluster: triples 0 and 1 share it
        let g = group_triples_by_cluster(&triples, &clusters[..1], &p);
        assert_eq!(g[0].triple_indices, vec![0, 1]);
        assert_eq!(g[0].cluster_ids, vec![10]);
        assert_eq!(g.len(), 3);
        // chain t0~c10~t1, t1~c20~t2 closes into one group
        let g = group_triples_by_cluster(&triples, &clusters, &p);
        assert_eq!(g[0].triple_indices, vec![0, 1, 2]);
        assert_eq!(g[0].cluster_ids, vec![10, 20]);
        assert_eq!(g[1].triple_indices, vec![3]);
    }

    #[test]
    fn grouping_respects_token_boundaries() {
        let p = vec!["Ram and Ramesh. He left.".to_string()];
        let triples = vec![
            TripleRecord::new("r", 0, "Ramesh", "went", "home"),
            TripleRecord::new("r", 0, "Ram", "left", "town"),
        ];
        let g = group_triples_by_cluster(&triples, &[cluster(0, &[(0, 0, 3), (0, 16, 18)])], &p);
        assert_eq!(g.len(), 2);
        assert_eq!(g[1].cluster_ids, vec![0]);
    }

    proptest! {
        #[test]
        fn tokens_reconstruct_from_offsets(s in "\\PC{0,40}") {
            let chars: Vec<char> = s.chars().collect();
            let toks = tokenize(&s);
            for w in toks.windows(2) {
                prop_assert!(w[0].char_end <= w[1].char_start);
            }
            for t in &toks {
                prop_assert!(t.char_start < t.char_end);
                let slice: String = chars[t.char_start..t.char_end].iter().collect();
                prop_assert_eq!(slice.to_lowercase(), t.text.clone());
                prop_assert_eq!(t.surface(&s), slice.as_str());
            }
        }

        #[test]
        fn ngram_total_count(tokens in proptest::collection::vec("[a-c]", 0..10), n in 1usize..5) {
            let total: usize = ngrams(&tokens, n).values().sum();
            prop_assert_eq!(total, if tokens.len() >= n { tokens.len() - n + 1 } else { 0 });
        }

        #[test]
        fn rewrite_leaves_outside_text_alone(prefix in "[a-z ]{0,10}", mid in "[a-z ]{1,10}", suffix in "[a-z ]{0,10}") {
            // pronoun "he" mid-paragraph, name at the start
            let p = format!("Arjuna{prefix} he{mid}");
            let pre_len = 6 + prefix.chars().count();
            let c = cluster(0, &[(0, 0, 6), (0, pre_len + 1, pre_len + 3)]);
            let out = rewrite_with_coref(&[p.clone() + &suffix], &[c]).unwrap();
            prop_assert_eq!(out[0].clone(), format!("Arjuna{prefix} Arjuna{mid}{suffix}"));
        }

        #[test]
        fn grouping_is_partition(n in 1usize..8, links in proptest::collection::vec((0usize..8, 0usize..8), 0..6)) {
            // triple i has head "e{i}"; each link adds a cluster with mentions e{a} and e{b}
            let text: String = (0..8).map(|i| format!("e{i} ")).collect();
            let triples: Vec<TripleRecord> = (0..n).map(|i| TripleRecord::new("r", 0, format!("e{i}"), "rel", "x")).collect();
            let clusters: Vec<CorefClusterRecord> = links.iter().enumerate()
                .filter(|(_, (a, b))| a != b)
                .map(|(k, &(a, b))| cluster(k as i64, &[(0, a * 3, a * 3 + 2), (0, b * 3, b * 3 + 2)]))
                .collect();
            let groups = group_triples_by_cluster(&triples, &clusters, &[text]);
            let mut seen: Vec<usize> = groups.iter().flat_map(|g| g.triple_indices.clone()).collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
            for w in groups.windows(2) {
                prop_assert!(w[0].triple_indices[0] < w[1].triple_indices[0]);
            }
        }
    }
}
