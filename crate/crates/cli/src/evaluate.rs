use std::fmt::Write as _;
use std::io::Write;

use g2p::decode::{decode_words, ensemble_decode};
use g2p::eval::{evaluate, worst_errors};
use g2p::EvalReport;

use crate::error::CliError;
use crate::predict::{load_model, open_output};
use crate::train::read_lexicon;
use crate::{set_threads, EvalArgs};

pub const ENSEMBLE_SIZE: usize = 5;

pub fn render_report(report: &EvalReport, worst: usize) -> String {
    let mut s = report.to_document();
    let _ = writeln!(s, "\n# worst {worst} predictions");
    s.push_str("word\tprediction\ttruth\tdistance\n");
    for r in worst_errors(&report.results, worst) {
        let _ = writeln!(s, "{}\t{}\t{}\t{}", r.word, r.predicted.join(" "), r.truth.join(" "), r.distance);
    }
    s
}

pub fn run(args: &EvalArgs) -> Result<(), CliError> {
    match (args.ensemble, args.models.len()) {
        (true, ENSEMBLE_SIZE) | (false, 1) => {}
        (true, n) => {
            return Err(CliError::Usage(format!(
                "--ensemble needs exactly {ENSEMBLE_SIZE} checkpoints, got {n}"
            )))
        }
        (false, n) => {
            return Err(CliError::Usage(format!(
                "{n} checkpoints given; pass --ensemble to vote over {ENSEMBLE_SIZE}"
            )))
        }
    }
    set_threads(args.threads)?;
    let models = args.models.iter().map(|p| load_model(p)).collect::<Result<Vec<_>, _>>()?;
    let entries = read_lexicon(&args.test)?;

    let graphemes = &models[0].graphemes;
    let mut known = Vec::new();
    for (i, e) in entries.iter().enumerate() {
        match graphemes.encode_word(&e.word) {
            Ok(_) => known.push(i),
            Err(err) => log::warn!("{}: {err}; scored as an empty prediction", e.word),
        }
    }
    let words: Vec<&str> = known.iter().map(|&i| entries[i].word.as_str()).collect();
    let decoded = if args.ensemble {
        ensemble_decode(&models, &words, args.batch_size, args.seed)?
    } else {
        decode_words(&models[0], &words, args.batch_size)?
    };
    let mut predictions = vec![Vec::new(); entries.len()];
    for (&i, p) in known.iter().zip(&decoded) {
        predictions[i] = p.symbols(&models[0]);
    }
    let report = evaluate(&predictions, &entries)?;

    let mut stdout = std::io::stdout().lock();
    let mut text = report.summary();
    if args.buckets {
        text.push_str(&report.bucket_tables());
    }
    let io_err = |e| CliError::io(std::path::Path::new("-"), e);
    stdout.write_all(text.as_bytes()).map_err(io_err)?;

    let mut out = open_output(&args.report)?;
    out.write_all(render_report(&report, args.worst).as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| CliError::io(&args.report, e))
}
