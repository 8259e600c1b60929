//! Phoneme and word error rates against multi-pronunciation references, plus
//! the word-length and per-word error breakdowns.

use std::fmt::Write as _;

use crate::data::LexiconEntry;
use crate::error::{G2pError, Result};

/// Unit-cost Levenshtein distance between two symbol sequences.
pub fn edit_distance<S: PartialEq>(pred: &[S], truth: &[S]) -> usize {
    let mut prev: Vec<usize> = (0..=truth.len()).collect();
    let mut curr = vec![0; truth.len() + 1];
    for (i, p) in pred.iter().enumerate() {
        curr[0] = i + 1;
        for (j, t) in truth.iter().enumerate() {
            let sub = prev[j] + usize::from(p != t);
            curr[j + 1] = sub.min(prev[j + 1] + 1).min(curr[j] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[truth.len()]
}

#[derive(Clone, Debug, PartialEq)]
pub struct WordResult {
    pub word: String,
    pub predicted: Vec<String>,
    pub truth: Vec<String>,
    pub distance: usize,
    pub truth_len: usize,
}

impl WordResult {
    pub fn correct(&self) -> bool {
        self.distance == 0
    }

    /// Edit distance over the chosen reference length; can exceed 1.
    pub fn per_word_per(&self) -> f64 {
        self.distance as f64 / self.truth_len as f64
    }

    pub fn grapheme_len(&self) -> usize {
        self.word.chars().count()
    }
}

/// Scores a prediction against the reference with the lowest per-word error
/// rate; ties go to the earliest listed pronunciation.
pub fn score_word(pred: &[String], entry: &LexiconEntry) -> WordResult {
    let mut best: Option<(usize, usize, &Vec<String>)> = None;
    for truth in &entry.pronunciations {
        let d = edit_distance(pred, truth);
        let len = truth.len();
        // d / len < bd / blen without rounding
        let better = match best {
            None => true,
            Some((bd, blen, _)) => d * blen < bd * len,
        };
        if better {
            best = Some((d, len, truth));
        }
    }
    let (distance, truth_len, truth) = best.expect("entry has at least one pronunciation");
    WordResult {
        word: entry.word.clone(),
        predicted: pred.to_vec(),
        truth: truth.clone(),
        distance,
        truth_len,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LengthBucket {
    /// up to 6 graphemes
    Short,
    /// 7 or 8
    Medium,
    /// 9 or 10
    Long,
    /// 11 and more
    VeryLong,
}

impl LengthBucket {
    pub const ALL: [LengthBucket; 4] = [
        LengthBucket::Short,
        LengthBucket::Medium,
        LengthBucket::Long,
        LengthBucket::VeryLong,
    ];

    pub fn of(grapheme_len: usize) -> Self {
        match grapheme_len {
            0..=6 => LengthBucket::Short,
            7 | 8 => LengthBucket::Medium,
            9 | 10 => LengthBucket::Long,
            _ => LengthBucket::VeryLong,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            LengthBucket::Short => "short",
            LengthBucket::Medium => "medium",
            LengthBucket::Long => "long",
            LengthBucket::VeryLong => "very_long",
        }
    }
}

/// Severity of an incorrect word by its per-word PER: `(0, .1]`, `(.1, .2]`,
/// `(.2, .3]`, above `.3`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ErrorBucket {
    Small,
    Medium,
    Large,
    VeryLarge,
}

impl ErrorBucket {
    pub const ALL: [ErrorBucket; 4] = [
        ErrorBucket::Small,
        ErrorBucket::Medium,
        ErrorBucket::Large,
        ErrorBucket::VeryLarge,
    ];

    /// `None` for correct words. Compared as integers, so 1/10 is exactly small.
    pub fn of(distance: usize, truth_len: usize) -> Option<Self> {
        if distance == 0 {
            return None;
        }
        let d = 10 * distance;
        Some(if d <= truth_len {
            ErrorBucket::Small
        } else if d <= 2 * truth_len {
            ErrorBucket::Medium
        } else if d <= 3 * truth_len {
            ErrorBucket::Large
        } else {
            ErrorBucket::VeryLarge
        })
    }

    pub fn label(self) -> &'static str {
        match self {
            ErrorBucket::Small => "small",
            ErrorBucket::Medium => "medium",
            ErrorBucket::Large => "large",
            ErrorBucket::VeryLarge => "very_large",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BucketWer {
    pub bucket: LengthBucket,
    pub words: usize,
    pub errors: usize,
}

impl BucketWer {
    /// WER in percent; `None` for an empty bucket.
    pub fn wer(&self) -> Option<f64> {
        (self.words > 0).then(|| 100.0 * self.errors as f64 / self.words as f64)
    }
}

pub fn length_buckets(results: &[WordResult]) -> Vec<BucketWer> {
    LengthBucket::ALL
        .iter()
        .map(|&bucket| {
            let members = results.iter().filter(|r| LengthBucket::of(r.grapheme_len()) == bucket);
            let (words, errors) = members.fold((0, 0), |(w, e), r| (w + 1, e + usize::from(!r.correct())));
            BucketWer { bucket, words, errors }
        })
        .collect()
}

/// Counts of incorrect words per [`ErrorBucket`], in bucket order.
pub fn per_word_per_buckets(results: &[WordResult]) -> Vec<(ErrorBucket, usize)> {
    let mut counts = [0usize; 4];
    for r in results {
        if let Some(b) = ErrorBucket::of(r.distance, r.truth_len) {
            counts[b as usize] += 1;
        }
    }
    ErrorBucket::ALL.iter().copied().zip(counts).collect()
}

/// The `k` incorrect words with the largest edit distance (ties by word).
pub fn worst_errors(results: &[WordResult], k: usize) -> Vec<WordResult> {
    let mut wrong: Vec<&WordResult> = results.iter().filter(|r| !r.correct()).collect();
    wrong.sort_by(|a, b| b.distance.cmp(&a.distance).then_with(|| a.word.cmp(&b.word)));
    wrong.into_iter().take(k).cloned().collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Phoneme error rate, percent.
    pub per: f64,
    /// Word error rate, percent.
    pub wer: f64,
    pub results: Vec<WordResult>,
    pub length_table: Vec<BucketWer>,
    pub error_histogram: Vec<(ErrorBucket, usize)>,
}

pub fn aggregate(results: Vec<WordResult>) -> Result<EvalReport> {
    if results.is_empty() {
        return Err(G2pError::Contract("cannot aggregate zero words".into()));
    }
    let distance: usize = results.iter().map(|r| r.distance).sum();
    let phones: usize = results.iter().map(|r| r.truth_len).sum();
    let wrong = results.iter().filter(|r| !r.correct()).count();
    Ok(EvalReport {
        per: 100.0 * distance as f64 / phones as f64,
        wer: 100.0 * wrong as f64 / results.len() as f64,
        length_table: length_buckets(&results),
        error_histogram: per_word_per_buckets(&results),
        results,
    })
}

/// Scores aligned predictions against their entries.
pub fn evaluate(predictions: &[Vec<String>], entries: &[LexiconEntry]) -> Result<EvalReport> {
    if predictions.len() != entries.len() {
        return Err(G2pError::Contract(format!(
            "{} predictions for {} entries",
            predictions.len(),
            entries.len()
        )));
    }
    aggregate(
        predictions
            .iter()
            .zip(entries)
            .map(|(p, e)| score_word(p, e))
            .collect(),
    )
}

impl EvalReport {
    pub fn words(&self) -> usize {
        self.results.len()
    }

    pub fn summary(&self) -> String {
        format!("PER {:.2}\nWER {:.2}\nwords {}\n", self.per, self.wer, self.words())
    }

    pub fn bucket_tables(&self) -> String {
        let mut s = String::from("# word length buckets: bucket words errors wer\n");
        for b in &self.length_table {
            let wer = b.wer().map_or_else(|| "-".to_string(), |w| format!("{w:.2}"));
            let _ = writeln!(s, "{}\t{}\t{}\t{}", b.bucket.label(), b.words, b.errors, wer);
        }
        s.push_str("# per-word PER buckets over incorrect words: bucket count\n");
        for (b, n) in &self.error_histogram {
            let _ = writeln!(s, "{}\t{}", b.label(), n);
        }
        s
    }

    /// Key-value summary followed by a tab-separated per-word table.
    pub fn to_document(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "per = {:.2}", self.per);
        let _ = writeln!(s, "wer = {:.2}", self.wer);
        let _ = writeln!(s, "words = {}", self.words());
        let _ = writeln!(s, "incorrect = {}", self.results.iter().filter(|r| !r.correct()).count());
        for b in &self.length_table {
            let wer = b.wer().map_or_else(|| "-".to_string(), |w| format!("{w:.2}"));
            let _ = writeln!(s, "length.{}.words = {}", b.bucket.label(), b.words);
            let _ = writeln!(s, "length.{}.wer = {}", b.bucket.label(), wer);
        }
        for (b, n) in &self.error_histogram {
            let _ = writeln!(s, "per_word_per.{} = {}", b.label(), n);
        }
        s.push('\n');
        s.push_str("word\tprediction\ttruth\tdistance\ttruth_len\tper_word_per\n");
        for r in &self.results {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{:.4}",
                r.word,
                r.predicted.join(" "),
                r.truth.join(" "),
                r.distance,
                r.truth_len,
                r.per_word_per()
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn syms(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn edit_distance_examples() {
        assert_eq!(edit_distance(&syms("L AE S"), &syms("L AE S")), 0);
        assert_eq!(edit_distance(&syms(""), &syms("A B C D")), 4);
        assert_eq!(edit_distance(&syms("L AE S"), &syms("L AE S T S")), 2);
        assert_eq!(edit_distance(&syms("K IH T AH W W K K"), &syms("K IH T AH W EY K")), 2);
    }

    #[test]
    fn score_word_picks_lowest_ratio() {
        let single = LexiconEntry::from_strs("X", &["A B"]).unwrap();
        assert_eq!(score_word(&syms("A"), &single).truth, syms("A B"));

        let two = LexiconEntry::from_strs("X", &["A B C", "D E F"]).unwrap();
        let r = score_word(&syms("D E F"), &two);
        assert!(r.correct());
        assert_eq!(r.truth, syms("D E F"));

        // distance 1 on both; 1/5 beats 1/3
        let e = LexiconEntry::from_strs("X", &["A B C", "A B C D E"]).unwrap();
        let r = score_word(&syms("A B C D"), &e);
        assert_eq!((r.distance, r.truth_len), (1, 5));

        // exact tie goes to the first listing
        let e = LexiconEntry::from_strs("X", &["A B", "A C"]).unwrap();
        assert_eq!(score_word(&syms("A D"), &e).truth, syms("A B"));
    }

    fn result(word: &str, distance: usize, truth_len: usize) -> WordResult {
        WordResult {
            word: word.into(),
            predicted: vec![],
            truth: vec![],
            distance,
            truth_len,
        }
    }

    #[test]
    fn aggregate_formulas() {
        let r = aggregate(vec![
            result("A", 0, 2),
            result("B", 0, 2),
            result("C", 1, 2),
            result("D", 0, 2),
        ])
        .unwrap();
        assert_eq!(r.wer, 25.0);
        let r = aggregate(vec![result("A", 2, 5), result("B", 0, 3)]).unwrap();
        assert_eq!(r.per, 25.0);
        assert_eq!(r.wer, 50.0);
        let r = aggregate(vec![result("A", 0, 5)]).unwrap();
        assert_eq!((r.per, r.wer), (0.0, 0.0));
        assert!(aggregate(vec![]).is_err());
    }

    #[test]
    fn length_bucket_boundaries() {
        assert_eq!(LengthBucket::of("PASTE".len()), LengthBucket::Short);
        assert_eq!(LengthBucket::of(6), LengthBucket::Short);
        assert_eq!(LengthBucket::of(7), LengthBucket::Medium);
        assert_eq!(LengthBucket::of(8), LengthBucket::Medium);
        assert_eq!(LengthBucket::of(9), LengthBucket::Long);
        assert_eq!(LengthBucket::of(10), LengthBucket::Long);
        assert_eq!(LengthBucket::of(11), LengthBucket::VeryLong);
    }

    #[test]
    fn error_bucket_boundaries() {
        assert_eq!(ErrorBucket::of(0, 5), None);
        assert_eq!(ErrorBucket::of(1, 10), Some(ErrorBucket::Small));
        assert_eq!(ErrorBucket::of(1, 9), Some(ErrorBucket::Medium));
        assert_eq!(ErrorBucket::of(2, 10), Some(ErrorBucket::Medium));
        assert_eq!(ErrorBucket::of(1, 4), Some(ErrorBucket::Large));
        assert_eq!(ErrorBucket::of(3, 10), Some(ErrorBucket::Large));
        assert_eq!(ErrorBucket::of(2, 5), Some(ErrorBucket::VeryLarge));
    }

    #[test]
    fn worst_errors_ordering() {
        let rs = vec![result("B", 4, 5), result("A", 1, 5), result("C", 5, 5), result("D", 4, 9), result("OK", 0, 3)];
        let w = worst_errors(&rs, 2);
        assert_eq!(w.iter().map(|r| r.word.as_str()).collect::<Vec<_>>(), ["C", "B"]);
        assert_eq!(worst_errors(&rs, 100).len(), 4);
        assert!(worst_errors(&[result("OK", 0, 3)], 3).is_empty());
    }

    #[test]
    fn document_is_stable() {
        let e = LexiconEntry::from_strs("LASTS", &["L AE S T S"]).unwrap();
        let r = aggregate(vec![score_word(&syms("L AE S"), &e)]).unwrap();
        let doc = r.to_document();
        assert_eq!(doc, r.clone().to_document());
        assert!(doc.starts_with("per = 40.00\nwer = 100.00\n"));
        assert!(doc.contains("LASTS\tL AE S\tL AE S T S\t2\t5\t0.4000"));
    }
}
