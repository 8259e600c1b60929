//! Greedy decoding and ensemble voting.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{Batch, BOS, EOS};
use crate::error::{G2pError, Result};
use crate::model::{argmax_phoneme, Model};
use crate::rng::{Purpose, SeedStreams};
use crate::scalar::Scalar;
use crate::tape::Tape;

/// Output length cap for a word of `graphemes` characters.
pub fn max_decode_len(graphemes: usize) -> usize {
    20.max(2 * graphemes + 5)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub word: String,
    /// Phoneme ids, EOS stripped.
    pub phonemes: Vec<usize>,
    /// Attention weights over the word's graphemes at each output step.
    pub attention: Option<Vec<Vec<f64>>>,
}

impl Prediction {
    pub fn symbols<T>(&self, model: &Model<T>) -> Vec<String> {
        model.phonemes.decode(&self.phonemes)
    }
}

/// Greedy decoding of one batch of words (upper-cased before lookup).
pub fn greedy_decode_batch<T: Scalar>(model: &Model<T>, words: &[&str], trace: bool) -> Result<Vec<Prediction>> {
    if words.is_empty() {
        return Ok(Vec::new());
    }
    let words: Vec<String> = words.iter().map(|w| w.to_uppercase()).collect();
    let sources = words
        .iter()
        .map(|w| model.graphemes.encode_word(w).map_err(|e| annotate(w, e)))
        .collect::<Result<Vec<_>>>()?;
    let caps: Vec<usize> = sources.iter().map(|s| max_decode_len(s.len())).collect();
    let targets = vec![vec![EOS]; words.len()];
    let batch = Batch::from_ids(words.clone(), sources, targets);

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let none = None::<&mut ChaCha8Rng>;
    let encoded = model.encode(&mut tape, &bound, &batch.sources, &batch.source_lengths, none)?;
    let v = model.phonemes.len();
    let b = words.len();
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); b];
    let mut traces: Vec<Vec<Vec<f64>>> = vec![Vec::new(); b];
    let mut done = vec![false; b];
    let mut prev = vec![BOS; b];
    let mut state = encoded.init.clone();
    let longest = caps.iter().copied().max().unwrap_or(0);
    for t in 1..=longest {
        let step = model.decode_step(&mut tape, &bound, &encoded, &state, &prev, t, None::<&mut ChaCha8Rng>)?;
        let logits = tape.value(step.logits);
        let weights = match (&step.attention, trace) {
            (Some(a), true) => Some(tape.value(a.weights)),
            _ => None,
        };
        let n = batch.max_source_len();
        for r in 0..b {
            if done[r] {
                continue;
            }
            let id = argmax_phoneme(&logits[r * v..(r + 1) * v]);
            if let Some(w) = weights {
                let len = batch.source_lengths[r];
                traces[r].push(w[r * n..r * n + len].iter().map(|x| x.as_f64()).collect());
            }
            if id == EOS {
                done[r] = true;
            } else {
                out[r].push(id);
                done[r] = out[r].len() >= caps[r];
            }
            prev[r] = id;
        }
        if done.iter().all(|&d| d) {
            break;
        }
        state = step.state;
    }
    let traced = trace && model.config.has_attention();
    Ok(words
        .into_iter()
        .zip(out)
        .zip(traces)
        .map(|((word, phonemes), att)| Prediction {
            word,
            phonemes,
            attention: traced.then_some(att),
        })
        .collect())
}

fn annotate(word: &str, e: G2pError) -> G2pError {
    match e {
        G2pError::Vocabulary(m) => G2pError::Vocabulary(format!("{word}: {m}")),
        other => other,
    }
}

pub fn greedy_decode<T: Scalar>(model: &Model<T>, word: &str) -> Result<Prediction> {
    Ok(greedy_decode_batch(model, &[word], false)?.remove(0))
}

/// Decodes many words in parallel batches; output order follows `words`.
pub fn decode_words<T: Scalar>(model: &Model<T>, words: &[&str], batch_size: usize) -> Result<Vec<Prediction>> {
    let batch_size = batch_size.max(1);
    let parts = words
        .par_chunks(batch_size)
        .map(|chunk| greedy_decode_batch(model, chunk, false))
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// Whole-sequence plurality vote. Tied candidates are listed in order of first
/// appearance and one is drawn uniformly with `rng`.
pub fn ensemble_vote<S: PartialEq + Clone, R: Rng + ?Sized>(predictions: &[S], rng: &mut R) -> Result<S> {
    if predictions.is_empty() {
        return Err(G2pError::Contract("ensemble vote over no predictions".into()));
    }
    let mut tally: Vec<(&S, usize)> = Vec::new();
    for p in predictions {
        match tally.iter_mut().find(|(c, _)| *c == p) {
            Some((_, n)) => *n += 1,
            None => tally.push((p, 1)),
        }
    }
    let top = tally.iter().map(|&(_, n)| n).max().unwrap_or(0);
    let tied: Vec<&S> = tally.iter().filter(|&&(_, n)| n == top).map(|&(c, _)| c).collect();
    let pick = if tied.len() == 1 { 0 } else { rng.random_range(0..tied.len()) };
    Ok(tied[pick].clone())
}

/// Fails unless all models share both vocabularies.
pub fn check_compatible<T>(models: &[Model<T>]) -> Result<()> {
    let first = models
        .first()
        .ok_or_else(|| G2pError::Contract("ensemble of no models".into()))?;
    for (k, m) in models.iter().enumerate().skip(1) {
        if m.graphemes != first.graphemes || m.phonemes != first.phonemes {
            return Err(G2pError::Vocabulary(format!(
                "ensemble member {} has different vocabularies from member 0",
                k + 1
            )));
        }
    }
    Ok(())
}

/// Decodes with every model and votes per word; ties use the `TieBreak`
/// stream of `seed`, consumed in word order.
pub fn ensemble_decode<T: Scalar>(
    models: &[Model<T>],
    words: &[&str],
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Prediction>> {
    check_compatible(models)?;
    let outputs = models
        .par_iter()
        .map(|m| decode_words(m, words, batch_size))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = SeedStreams::new(seed).stream(Purpose::TieBreak);
    (0..words.len())
        .map(|i| {
            let votes: Vec<Vec<usize>> = outputs.iter().map(|o| o[i].phonemes.clone()).collect();
            Ok(Prediction {
                word: outputs[0][i].word.clone(),
                phonemes: ensemble_vote(&votes, &mut rng)?,
                attention: None,
            })
        })
        .collect()
}
