//! Labeled utterances, tokenization, vocabularies and fixed-length encoding.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const DEFAULT_MAX_LEN: usize = 150;
/// Shortest padded length that still fits the widest default filter.
pub const MIN_MAX_LEN: usize = 5;

const SPLIT_CHARS: &[char] = &['<', '>', '.', ',', '!', '?', ';', ':', '"', '(', ')'];

/// One labeled utterance; `text` marks the target span with `<` and `>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: u32,
    pub text: String,
    pub label: u8,
}

impl Example {
    pub fn new(id: u32, text: impl Into<String>, label: u8) -> Result<Self> {
        let text = text.into();
        check_markers(&text).map_err(Error::InvalidArgument)?;
        if label > 1 {
            return Err(Error::InvalidArgument(format!("label {label} is not 0 or 1")));
        }
        Ok(Example { id, text, label })
    }
}

fn check_markers(text: &str) -> std::result::Result<(), String> {
    let opens = text.matches('<').count();
    let closes = text.matches('>').count();
    if opens != 1 || closes != 1 {
        return Err(format!(
            "text must contain exactly one `<` and one `>` (found {opens} and {closes})"
        ));
    }
    if text.find('<') > text.find('>') {
        return Err("`<` must precede `>`".into());
    }
    Ok(())
}

/// Read a `id,text,label` CSV.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Example>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::path(path, e))?;
    read_dataset(file)
}

pub fn read_dataset<R: std::io::Read>(reader: R) -> Result<Vec<Example>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let names: Vec<&str> = headers.iter().map(str::trim).collect();
    if names != ["id", "text", "label"] {
        return Err(Error::Row {
            row: 1,
            msg: format!("header must be `id,text,label`, found `{}`", names.join(",")),
        });
    }
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let row = record.position().map(|p| p.line()).unwrap_or(0);
        let bad = |msg: String| Error::Row { row, msg };
        if record.len() != 3 {
            return Err(bad(format!("expected 3 columns, found {}", record.len())));
        }
        let id: u32 = record[0]
            .trim()
            .parse()
            .map_err(|_| bad(format!("id `{}` is not a non-negative integer", &record[0])))?;
        let label: u8 = match record[2].trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(bad(format!("label `{other}` is not 0 or 1"))),
        };
        let text = record[1].to_string();
        check_markers(&text).map_err(bad)?;
        out.push(Example { id, text, label });
    }
    if out.is_empty() {
        return Err(Error::Data("no examples".into()));
    }
    Ok(out)
}

pub fn write_dataset(path: impl AsRef<Path>, examples: &[Example]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::path(path, e))?;
    let mut w = csv::WriterBuilder::new().from_writer(file);
    w.write_record(["id", "text", "label"])?;
    for ex in examples {
        w.write_record([ex.id.to_string(), ex.text.clone(), ex.label.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Whitespace split with `< > . , ! ? ; : " ( )` broken out as their own tokens.
pub fn tokenize(text: &str, lowercase: bool) -> Vec<String> {
    let mut tokens = Vec::new();
    for word in text.split_whitespace() {
        let mut current = String::new();
        for ch in word.chars() {
            if SPLIT_CHARS.contains(&ch) {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                tokens.push(ch.to_string());
            } else {
                current.push(ch);
            }
        }
        if !current.is_empty() {
            tokens.push(current);
        }
    }
    if lowercase {
        for t in &mut tokens {
            *t = t.to_lowercase();
        }
    }
    tokens
}

/// Dense token index with `PAD = 0` and `UNK = 1` reserved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(Vec::new())
    }
}

impl Vocabulary {
    /// Build from the non-reserved tokens in index order (index 2 onward).
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let mut all = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        all.extend(tokens);
        let index = all
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens: all, index }
    }

    /// Tokens from index 2 onward, the inverse of [`Vocabulary::from_tokens`].
    pub fn regular_tokens(&self) -> &[String] {
        &self.tokens[2..]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }
}

/// Count tokens over `examples`; keep those seen at least `min_count` times,
/// most frequent first and lexicographic within equal counts.
pub fn build_vocab(examples: &[Example], min_count: usize, lowercase: bool) -> Vocabulary {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for ex in examples {
        for t in tokenize(&ex.text, lowercase) {
            *counts.entry(t).or_default() += 1;
        }
    }
    build_vocab_from_counts(counts, min_count)
}

pub(crate) fn build_vocab_from_counts(counts: HashMap<String, usize>, min_count: usize) -> Vocabulary {
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_count.max(1) && t != PAD_TOKEN && t != UNK_TOKEN)
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Vocabulary::from_tokens(kept.into_iter().map(|(t, _)| t).collect())
}

/// Fixed-length id sequence; positions `>= length` hold [`PAD`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<String>,
    pub ids: Vec<usize>,
    pub length: usize,
    pub max_len: usize,
}

impl TokenSequence {
    pub fn mask(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.max_len).map(|i| i < self.length)
    }
}

/// Map tokens to ids and pad/truncate to `max_len`.
///
/// Over-long sequences keep their prefix unless that would cut the `<`…`>`
/// span, in which case a `max_len` window centered on the span is kept.
pub fn encode(seq: &[String], vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    if max_len < MIN_MAX_LEN {
        return Err(Error::InvalidArgument(format!(
            "max_len {max_len} is below the minimum of {MIN_MAX_LEN}"
        )));
    }
    let (start, end) = window(seq, max_len);
    let tokens: Vec<String> = seq[start..end].to_vec();
    let mut ids: Vec<usize> = tokens.iter().map(|t| vocab.id(t)).collect();
    let length = ids.len();
    ids.resize(max_len, PAD);
    Ok(TokenSequence {
        tokens,
        ids,
        length,
        max_len,
    })
}

fn window(seq: &[String], max_len: usize) -> (usize, usize) {
    let n = seq.len();
    if n <= max_len {
        return (0, n);
    }
    let open = seq.iter().position(|t| t == "<");
    let close = open.and_then(|o| seq[o..].iter().position(|t| t == ">").map(|c| o + c));
    match (open, close) {
        (Some(o), Some(c)) if c >= max_len => {
            let mid = (o + c) / 2;
            let start = mid.saturating_sub(max_len / 2).min(n - max_len);
            (start, start + max_len)
        }
        _ => (0, max_len),
    }
}

/// One histogram bin covering token lengths `lo..=hi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bin {
    pub lo: usize,
    pub hi: usize,
    pub count: usize,
}

/// Token-length histogram listing only non-empty bins, in ascending order.
pub fn length_histogram(examples: &[Example], bin_width: usize) -> Result<Vec<Bin>> {
    let lengths: Vec<usize> = examples
        .iter()
        .map(|e| tokenize(&e.text, false).len())
        .collect();
    histogram_of_lengths(&lengths, bin_width)
}

pub fn histogram_of_lengths(lengths: &[usize], bin_width: usize) -> Result<Vec<Bin>> {
    if bin_width == 0 {
        return Err(Error::InvalidArgument("bin_width must be at least 1".into()));
    }
    let mut counts = std::collections::BTreeMap::new();
    for &l in lengths {
        *counts.entry(l / bin_width).or_insert(0usize) += 1;
    }
    Ok(counts
        .into_iter()
        .map(|(b, count)| Bin {
            lo: b * bin_width,
            hi: b * bin_width + bin_width - 1,
            count,
        })
        .collect())
}

/// Two-column TSV of a histogram.
pub fn histogram_tsv(bins: &[Bin]) -> String {
    let mut s = String::from("bin\tcount\n");
    for b in bins {
        s.push_str(&format!("{}-{}\t{}\n", b.lo, b.hi, b.count));
    }
    s
}

/// Seeded shuffle, then the first `ratio` share of examples goes to the
/// second (held-out) half.
pub fn split(examples: &[Example], ratio: f64, seed: u64) -> Result<(Vec<Example>, Vec<Example>)> {
    let (train, heldout) = split_indices(examples.len(), ratio, seed)?;
    Ok((
        train.into_iter().map(|i| examples[i].clone()).collect(),
        heldout.into_iter().map(|i| examples[i].clone()).collect(),
    ))
}

/// Index form of [`split`]: `(train, heldout)`, each ascending.
pub fn split_indices(n: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("split ratio {ratio} outside [0,1]")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let held = (n as f64 * ratio).round() as usize;
    let mut heldout: Vec<usize> = order[..held].to_vec();
    let mut train: Vec<usize> = order[held..].to_vec();
    heldout.sort_unstable();
    train.sort_unstable();
    Ok((train, heldout))
}

const FILLER: &[&str] = &[
    "the", "report", "said", "that", "our", "team", "was", "told", "about", "a", "new", "plan", "in", "city",
    "yesterday", "people", "were", "quite", "sure", "it",
];
const SOFT_SPANS: &[&str] = &["passed away", "let go", "between jobs", "economically disadvantaged", "senior citizen"];
const PLAIN_SPANS: &[&str] = &["broke down", "ran out", "went home", "painted red", "fell asleep"];

/// Seeded, linearly separable toy corpus: label 1 spans come from one
/// phrase list and label 0 spans from a disjoint one, inside shared filler.
/// Labels alternate, so both classes are present from `n = 2`.
pub fn synthetic_dataset(n: usize, seed: u64) -> Vec<Example> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = (i % 2) as u8;
            let spans = if label == 1 { SOFT_SPANS } else { PLAIN_SPANS };
            let span = spans[rng.gen_range(0..spans.len())];
            let mut words: Vec<&str> = (0..rng.gen_range(4..9))
                .map(|_| FILLER[rng.gen_range(0..FILLER.len())])
                .collect();
            let at = rng.gen_range(0..=words.len());
            let marked = format!("<{span}>");
            words.insert(at, &marked);
            let text = format!("{} .", words.join(" "));
            Example::new(i as u32, text, label).expect("well-formed synthetic example")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strs(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn ex(id: u32, text: &str) -> Example {
        Example {
            id,
            text: text.into(),
            label: 0,
        }
    }

    #[test]
    fn loads_table_rows() {
        let csv = "id,text,label\n\
            7,\"All the deaths were just <collateral damage> in their cause.\",0\n\
            8,\"In spite of his <advanced age>, Rollins remains one of jazz's most talented improvisers.\",1\n";
        let rows = read_dataset(csv.as_bytes()).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!((rows[0].id, rows[0].label), (7, 0));
        assert_eq!((rows[1].id, rows[1].label), (8, 1));
    }

    #[test]
    fn empty_data_section_is_an_error() {
        let err = read_dataset("id,text,label\n".as_bytes()).unwrap_err();
        assert_eq!(err.to_string(), "no examples");
    }

    #[test]
    fn malformed_rows_name_their_line() {
        let cases = [
            ("id,text,label\n1,\"a <b> c\",0\n2,\"x <y> z\",2\n", "row 3"),
            ("id,text,label\n1,\"a b c\",0\n", "row 2"),
            ("id,text,label\n1,\"a <b> c\"\n", "row 2"),
            ("id,text,label\nx,\"a <b> c\",1\n", "row 2"),
            ("id,text,label\n1,\"a >b< c\",1\n", "row 2"),
        ];
        for (csv, want) in cases {
            let err = read_dataset(csv.as_bytes()).unwrap_err().to_string();
            assert!(err.starts_with(want), "{csv:?}: {err}");
        }
    }

    #[test]
    fn tokenizes_table_sentence() {
        let got = tokenize("All the deaths were just <collateral damage> in their cause.", true);
        assert_eq!(
            got,
            strs(&[
                "all", "the", "deaths", "were", "just", "<", "collateral", "damage", ">", "in",
                "their", "cause", "."
            ])
        );
        assert!(tokenize("", true).is_empty());
        assert_eq!(tokenize("<a>", true), strs(&["<", "a", ">"]));
        assert_eq!(tokenize("Hi (There)!", false), strs(&["Hi", "(", "There", ")", "!"]));
    }

    #[test]
    fn vocab_orders_by_count_then_lexically() {
        let corpus = [ex(0, "a a b")];
        let v = build_vocab(&corpus, 1, true);
        assert_eq!(v.len(), 4);
        assert_eq!((v.id("<pad>"), v.id("<unk>"), v.id("a"), v.id("b")), (0, 1, 2, 3));
        let v = build_vocab(&corpus, 2, true);
        assert_eq!(v.len(), 3);
        assert_eq!(v.get("b"), None);
        let v = build_vocab(&[], 1, true);
        assert_eq!(v.len(), 2);
        let tie = build_vocab(&[ex(0, "z y x")], 1, true);
        assert_eq!(tie.regular_tokens(), strs(&["x", "y", "z"]).as_slice());
    }

    #[test]
    fn encode_pads_and_maps_unknowns() {
        let vocab = Vocabulary::from_tokens(strs(&["a", "b"]));
        let s = encode(&strs(&["a", "b"]), &vocab, 5).unwrap();
        assert_eq!(s.ids, vec![2, 3, 0, 0, 0]);
        assert_eq!(s.length, 2);
        let s = encode(&strs(&["a", "zz"]), &vocab, 5).unwrap();
        assert_eq!(s.ids[1], UNK);
        assert!(encode(&strs(&["a"]), &vocab, 4).is_err());
    }

    #[test]
    fn long_sequence_with_early_span_keeps_prefix() {
        let mut toks: Vec<String> = (0..200).map(|i| format!("w{i}")).collect();
        toks[10] = "<".into();
        toks[12] = ">".into();
        let s = encode(&toks, &Vocabulary::default(), 150).unwrap();
        assert_eq!(s.length, 150);
        assert_eq!(s.tokens[0], "w0");
        assert_eq!(s.tokens[10], "<");
        assert_eq!(s.tokens[12], ">");
    }

    #[test]
    fn long_sequence_with_late_span_centers_window() {
        let mut toks: Vec<String> = (0..300).map(|i| format!("w{i}")).collect();
        toks[200] = "<".into();
        toks[204] = ">".into();
        let s = encode(&toks, &Vocabulary::default(), 150).unwrap();
        assert_eq!(s.length, 150);
        // midpoint 202, window starts 202 - 75
        assert_eq!(s.tokens[0], "w127");
        assert!(s.tokens.contains(&"<".to_string()));
        assert!(s.tokens.contains(&">".to_string()));

        let mut toks: Vec<String> = (0..200).map(|i| format!("w{i}")).collect();
        toks[195] = "<".into();
        toks[199] = ">".into();
        let s = encode(&toks, &Vocabulary::default(), 150).unwrap();
        assert_eq!(s.tokens[0], "w50");
        assert_eq!(s.tokens.last().unwrap(), ">");
    }

    #[test]
    fn histogram_bins() {
        let bins = histogram_of_lengths(&[3, 4, 11], 10).unwrap();
        assert_eq!(
            bins,
            vec![Bin { lo: 0, hi: 9, count: 2 }, Bin { lo: 10, hi: 19, count: 1 }]
        );
        assert!(histogram_of_lengths(&[], 10).unwrap().is_empty());
        assert_eq!(
            histogram_of_lengths(&[10], 10).unwrap(),
            vec![Bin { lo: 10, hi: 19, count: 1 }]
        );
        assert!(histogram_of_lengths(&[1], 0).is_err());
        assert_eq!(
            histogram_tsv(&[Bin { lo: 10, hi: 19, count: 1 }]),
            "bin\tcount\n10-19\t1\n"
        );
    }

    #[test]
    fn split_is_seeded_and_complete() {
        let data: Vec<Example> = (0..10).map(|i| ex(i, "<a>")).collect();
        let (a, b) = split(&data, 0.4, 3).unwrap();
        assert_eq!((a.len(), b.len()), (6, 4));
        assert_eq!(split(&data, 0.4, 3).unwrap(), (a, b));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn tokenization_is_idempotent(text in "[a-zA-Z<>.,!?;:\"() ]{0,60}") {
                let once = tokenize(&text, true);
                let again = tokenize(&once.join(" "), true);
                prop_assert_eq!(once, again);
            }

            #[test]
            fn encode_pads_tail_and_keeps_short_spans(words in proptest::collection::vec("[a-c]{1,2}", 0..40),
                                                      at in 0usize..40, max_len in 5usize..30) {
                let mut toks = words.clone();
                let at = at.min(toks.len());
                toks.insert(at, "<".into());
                toks.insert(at + 1, "x".into());
                toks.insert(at + 2, ">".into());
                let vocab = Vocabulary::from_tokens(vec!["a".into(), "b".into()]);
                let s = encode(&toks, &vocab, max_len).unwrap();
                prop_assert_eq!(s.ids.len(), max_len);
                prop_assert!(s.ids[s.length..].iter().all(|&i| i == PAD));
                if toks.len() <= max_len {
                    prop_assert_eq!(s.length, toks.len());
                }
                if max_len >= 3 {
                    prop_assert!(s.tokens.contains(&"<".to_string()));
                    prop_assert!(s.tokens.contains(&">".to_string()));
                }
                prop_assert_eq!(encode(&toks, &vocab, max_len).unwrap(), s);
            }
        }
    }

    #[test]
    fn synthetic_dataset_is_seeded_and_balanced() {
        let a = synthetic_dataset(32, 4);
        assert_eq!(a, synthetic_dataset(32, 4));
        assert_ne!(a, synthetic_dataset(32, 5));
        assert_eq!(a.iter().filter(|e| e.label == 1).count(), 16);
        assert!(a.iter().all(|e| tokenize(&e.text, true).len() >= 5));
    }
}
