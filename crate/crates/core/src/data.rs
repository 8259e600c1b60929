//! Lexicon parsing, vocabularies, dev-set sampling and minibatching.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{G2pError, Result};
use crate::rng::{Purpose, SeedStreams};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
const RESERVED: [&str; 3] = ["<pad>", "<s>", "</s>"];

/// A word and every ground-truth pronunciation listed for it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LexiconEntry {
    pub word: String,
    pub pronunciations: Vec<Vec<String>>,
}

impl LexiconEntry {
    pub fn new(word: &str, pronunciations: Vec<Vec<String>>) -> Result<Self> {
        if word.is_empty() {
            return Err(G2pError::Input("empty word".into()));
        }
        if pronunciations.is_empty() || pronunciations.iter().any(Vec::is_empty) {
            return Err(G2pError::Input(format!("{word}: empty pronunciation")));
        }
        Ok(LexiconEntry {
            word: word.to_uppercase(),
            pronunciations,
        })
    }

    /// Convenience constructor from space-separated pronunciations.
    pub fn from_strs(word: &str, prons: &[&str]) -> Result<Self> {
        let prons = prons
            .iter()
            .map(|p| p.split_whitespace().map(str::to_string).collect())
            .collect();
        LexiconEntry::new(word, prons)
    }

    /// Single-character grapheme symbols of the word.
    pub fn graphemes(&self) -> Vec<String> {
        graphemes_of(&self.word)
    }

    pub fn grapheme_len(&self) -> usize {
        self.word.chars().count()
    }

    /// Training target: the first listed pronunciation.
    pub fn primary(&self) -> &[String] {
        &self.pronunciations[0]
    }
}

pub fn graphemes_of(word: &str) -> Vec<String> {
    word.chars().map(|c| c.to_string()).collect()
}

/// Strips an alternate-pronunciation suffix: `WORD(2)` -> `WORD`.
fn base_word(token: &str) -> &str {
    if let Some(open) = token.rfind('(') {
        let inner = &token[open + 1..];
        if open > 0
            && inner.len() > 1
            && inner.ends_with(')')
            && inner[..inner.len() - 1].chars().all(|c| c.is_ascii_digit())
        {
            return &token[..open];
        }
    }
    token
}

/// Parses a dictionary: one `WORD  PH1 PH2 ...` per line, `;;;` comments,
/// alternates marked `WORD(n)`. Entries are grouped by base word in order of
/// first appearance.
pub fn parse_lexicon<R: BufRead>(reader: R) -> Result<Vec<LexiconEntry>> {
    let mut entries: Vec<LexiconEntry> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with(";;;") {
            continue;
        }
        let mut fields = trimmed.split_whitespace();
        let head = fields.next().unwrap_or_default();
        let phones: Vec<String> = fields.map(str::to_string).collect();
        if phones.is_empty() {
            return Err(G2pError::Parse {
                line: n + 1,
                message: format!("expected a word followed by phonemes, got {trimmed:?}"),
            });
        }
        let word = base_word(head).to_uppercase();
        match index.get(&word) {
            Some(&i) => {
                let entry = &mut entries[i];
                if entry.pronunciations.contains(&phones) {
                    log::warn!("line {}: duplicate pronunciation for {word} dropped", n + 1);
                } else {
                    entry.pronunciations.push(phones);
                }
            }
            None => {
                index.insert(word.clone(), entries.len());
                entries.push(LexiconEntry {
                    word,
                    pronunciations: vec![phones],
                });
            }
        }
    }
    Ok(entries)
}

pub fn parse_lexicon_str(text: &str) -> Result<Vec<LexiconEntry>> {
    parse_lexicon(text.as_bytes())
}

pub fn read_lexicon_file(path: &Path) -> Result<Vec<LexiconEntry>> {
    let file = std::fs::File::open(path)?;
    parse_lexicon(std::io::BufReader::new(file))
}

/// Writes entries back in the dictionary format parsed by [`parse_lexicon`].
pub fn write_lexicon<W: Write>(entries: &[LexiconEntry], mut w: W) -> Result<()> {
    for e in entries {
        for (k, p) in e.pronunciations.iter().enumerate() {
            if k == 0 {
                writeln!(w, "{}  {}", e.word, p.join(" "))?;
            } else {
                writeln!(w, "{}({})  {}", e.word, k + 1, p.join(" "))?;
            }
        }
    }
    Ok(())
}

/// Reads one word per line (first whitespace field), upper-cased.
pub fn read_word_list<R: BufRead>(reader: R) -> Result<Vec<String>> {
    let mut words = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if let Some(w) = line.split_whitespace().next() {
            words.push(w.to_uppercase());
        }
    }
    Ok(words)
}

/// Symbol <-> id table. Ids 0, 1, 2 are PAD, BOS and EOS.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from corpus symbols (reserved tokens are implicit).
    pub fn from_symbols(corpus: Vec<String>) -> Result<Self> {
        let mut symbols: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index = HashMap::new();
        for (i, s) in RESERVED.iter().enumerate() {
            index.insert(s.to_string(), i);
        }
        for s in corpus {
            if index.contains_key(&s) {
                return Err(G2pError::Vocabulary(format!("duplicate or reserved symbol {s:?}")));
            }
            index.insert(s.clone(), symbols.len());
            symbols.push(s);
        }
        Ok(Vocabulary { symbols, index })
    }

    /// Total size including the reserved ids.
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.len() == RESERVED.len()
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied().filter(|&i| i >= RESERVED.len())
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    pub fn is_reserved(id: usize) -> bool {
        id < RESERVED.len()
    }

    /// Non-reserved symbols in id order.
    pub fn corpus_symbols(&self) -> &[String] {
        &self.symbols[RESERVED.len()..]
    }

    /// Maps symbols to ids; the error lists every unknown symbol.
    pub fn encode<S: AsRef<str>>(&self, symbols: &[S]) -> Result<Vec<usize>> {
        let mut unknown = Vec::new();
        let ids: Vec<usize> = symbols
            .iter()
            .map(|s| {
                self.id(s.as_ref()).unwrap_or_else(|| {
                    if !unknown.contains(&s.as_ref()) {
                        unknown.push(s.as_ref());
                    }
                    PAD
                })
            })
            .collect();
        if unknown.is_empty() {
            Ok(ids)
        } else {
            Err(G2pError::Vocabulary(format!("unknown symbols: {}", unknown.join(" "))))
        }
    }

    pub fn encode_word(&self, word: &str) -> Result<Vec<usize>> {
        if word.is_empty() {
            return Err(G2pError::Input("empty word".into()));
        }
        self.encode(&graphemes_of(word))
    }

    /// Maps ids back to symbols, skipping reserved ids.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| !Self::is_reserved(i))
            .filter_map(|&i| self.symbol(i).map(str::to_string))
            .collect()
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = G2pError;

    fn try_from(corpus: Vec<String>) -> Result<Self> {
        Vocabulary::from_symbols(corpus)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.corpus_symbols().to_vec()
    }
}

/// Grapheme and phoneme vocabularies over the given (training) entries, with
/// symbols sorted lexicographically.
pub fn build_vocabularies(entries: &[LexiconEntry]) -> (Vocabulary, Vocabulary) {
    let mut graphemes: Vec<String> = entries.iter().flat_map(LexiconEntry::graphemes).collect();
    let mut phonemes: Vec<String> = entries
        .iter()
        .flat_map(|e| e.pronunciations.iter().flatten().cloned())
        .collect();
    for v in [&mut graphemes, &mut phonemes] {
        v.sort();
        v.dedup();
    }
    (
        Vocabulary::from_symbols(graphemes).expect("deduplicated"),
        Vocabulary::from_symbols(phonemes).expect("deduplicated"),
    )
}

/// Moves `n` uniformly sampled words (with all their pronunciations) into a
/// dev set. Both halves keep the original entry order.
pub fn sample_dev(
    train: &[LexiconEntry],
    n: usize,
    seed: u64,
) -> Result<(Vec<LexiconEntry>, Vec<LexiconEntry>)> {
    if n >= train.len() {
        return Err(G2pError::Config(format!(
            "dev sample of {n} words needs a training set larger than {}",
            train.len()
        )));
    }
    let mut rng = SeedStreams::new(seed).stream(Purpose::DevSplit);
    let mut picked = vec![false; train.len()];
    for i in rand::seq::index::sample(&mut rng, train.len(), n) {
        picked[i] = true;
    }
    let (dev, rest): (Vec<_>, Vec<_>) = train
        .iter()
        .zip(&picked)
        .partition(|(_, &p)| p);
    Ok((
        rest.into_iter().map(|(e, _)| e.clone()).collect(),
        dev.into_iter().map(|(e, _)| e.clone()).collect(),
    ))
}

/// How train/dev/test data are obtained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SplitSpec {
    Files {
        train: PathBuf,
        dev: PathBuf,
        test: Option<PathBuf>,
    },
    Sampled {
        train: PathBuf,
        dev_size: usize,
        seed: u64,
        test: Option<PathBuf>,
    },
}

/// The published benchmark splits and their sizes in words.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StandardSetup {
    CmuDict,
    Pronlex,
    NetTalk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    /// Dev words: a fixed file for Pronlex, sampled from train otherwise.
    pub dev: usize,
    pub dev_sampled: bool,
    pub test: usize,
}

impl StandardSetup {
    pub fn sizes(self) -> SplitSizes {
        match self {
            StandardSetup::CmuDict => SplitSizes {
                train: 106_837,
                dev: 2_670,
                dev_sampled: true,
                test: 12_000,
            },
            StandardSetup::Pronlex => SplitSizes {
                train: 83_182,
                dev: 2_400,
                dev_sampled: false,
                test: 4_800,
            },
            StandardSetup::NetTalk => SplitSizes {
                train: 14_851,
                dev: 1_000,
                dev_sampled: true,
                test: 4_951,
            },
        }
    }

    /// Checks loaded word counts against the published split sizes. `train`
    /// is the size before any dev sampling.
    pub fn verify(self, train: usize, dev: Option<usize>, test: usize) -> Result<()> {
        let s = self.sizes();
        let dev_ok = match (s.dev_sampled, dev) {
            (false, Some(d)) => d == s.dev,
            (false, None) => false,
            (true, _) => true,
        };
        if train != s.train || test != s.test || !dev_ok {
            return Err(G2pError::Input(format!(
                "{self:?} split sizes differ: got train={train} dev={dev:?} test={test}, expected {s:?}"
            )));
        }
        Ok(())
    }
}

/// A padded minibatch of id sequences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub words: Vec<String>,
    /// Grapheme ids, each row padded with PAD to the batch maximum.
    pub sources: Vec<Vec<usize>>,
    pub source_lengths: Vec<usize>,
    /// Phoneme ids ending in EOS, padded with PAD.
    pub targets: Vec<Vec<usize>>,
    /// Target lengths including EOS.
    pub target_lengths: Vec<usize>,
}

impl Batch {
    pub fn from_entries(
        entries: &[&LexiconEntry],
        graphemes: &Vocabulary,
        phonemes: &Vocabulary,
    ) -> Result<Self> {
        let mut sources = Vec::with_capacity(entries.len());
        let mut targets = Vec::with_capacity(entries.len());
        for e in entries {
            sources.push(graphemes.encode_word(&e.word)?);
            let mut t = phonemes.encode(e.primary())?;
            t.push(EOS);
            targets.push(t);
        }
        Ok(Batch::from_ids(
            entries.iter().map(|e| e.word.clone()).collect(),
            sources,
            targets,
        ))
    }

    /// Pads raw id sequences; `targets` must already end in EOS.
    pub fn from_ids(words: Vec<String>, sources: Vec<Vec<usize>>, targets: Vec<Vec<usize>>) -> Self {
        let source_lengths: Vec<usize> = sources.iter().map(Vec::len).collect();
        let target_lengths: Vec<usize> = targets.iter().map(Vec::len).collect();
        let pad = |rows: Vec<Vec<usize>>, width: usize| -> Vec<Vec<usize>> {
            rows.into_iter()
                .map(|mut r| {
                    r.resize(width, PAD);
                    r
                })
                .collect()
        };
        let smax = source_lengths.iter().copied().max().unwrap_or(0);
        let tmax = target_lengths.iter().copied().max().unwrap_or(0);
        Batch {
            words,
            sources: pad(sources, smax),
            source_lengths,
            targets: pad(targets, tmax),
            target_lengths,
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn max_source_len(&self) -> usize {
        self.sources.first().map_or(0, Vec::len)
    }

    pub fn max_target_len(&self) -> usize {
        self.targets.first().map_or(0, Vec::len)
    }

    pub fn source_column(&self, t: usize) -> Vec<usize> {
        self.sources.iter().map(|r| r[t]).collect()
    }

    pub fn target_column(&self, t: usize) -> Vec<usize> {
        self.targets.iter().map(|r| r[t]).collect()
    }

    /// Which rows have a real (non-padding) target at step `t`.
    pub fn target_mask(&self, t: usize) -> Vec<bool> {
        self.target_lengths.iter().map(|&l| t < l).collect()
    }

    pub fn target_tokens(&self) -> usize {
        self.target_lengths.iter().sum()
    }
}

/// Shuffles entries with the stream for `(seed, epoch)` and cuts them into
/// padded batches; the last batch may be smaller.
pub fn make_batches(
    entries: &[LexiconEntry],
    graphemes: &Vocabulary,
    phonemes: &Vocabulary,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(G2pError::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.shuffle(&mut SeedStreams::new(seed).stream_at(Purpose::Shuffle, epoch));
    order
        .chunks(batch_size)
        .map(|chunk| {
            let refs: Vec<&LexiconEntry> = chunk.iter().map(|&i| &entries[i]).collect();
            Batch::from_entries(&refs, graphemes, phonemes)
        })
        .collect()
}
