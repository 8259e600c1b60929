use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use g2p::checkpoint;
use g2p::data::read_word_list;
use g2p::decode::decode_words;
use g2p::Model;

use crate::error::CliError;
use crate::{set_threads, PredictArgs};

pub fn load_model(path: &Path) -> Result<Model<f32>, CliError> {
    Ok(checkpoint::load::<f32>(path).map_err(CliError::at(path))?.0)
}

pub fn open_input(path: &Path) -> Result<Box<dyn BufRead>, CliError> {
    if path == Path::new("-") {
        return Ok(Box::new(BufReader::new(io::stdin())));
    }
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(Box::new(BufReader::new(f)))
}

pub fn open_output(path: &Path) -> Result<Box<dyn Write>, CliError> {
    if path == Path::new("-") {
        return Ok(Box::new(BufWriter::new(io::stdout())));
    }
    let f = File::create(path).map_err(|e| CliError::io(path, e))?;
    Ok(Box::new(BufWriter::new(f)))
}

pub fn run(args: &PredictArgs) -> Result<(), CliError> {
    set_threads(args.threads)?;
    let model = load_model(&args.model)?;
    let words = read_word_list(open_input(&args.input)?).map_err(CliError::at(&args.input))?;

    let mut rejected = Vec::new();
    let mut known = Vec::new();
    for (i, w) in words.iter().enumerate() {
        match model.graphemes.encode_word(w) {
            Ok(_) => known.push(i),
            Err(e) => rejected.push((i, e)),
        }
    }
    let batch: Vec<&str> = known.iter().map(|&i| words[i].as_str()).collect();
    let predictions = decode_words(&model, &batch, args.batch_size)?;

    let mut out = open_output(&args.output)?;
    let mut errors = rejected.iter().peekable();
    let mut found = known.iter().zip(&predictions).peekable();
    let write_err = |e: io::Error| CliError::io(&args.output, e);
    for i in 0..words.len() {
        if let Some((_, e)) = errors.next_if(|(j, _)| *j == i) {
            eprintln!("error: {}: {e}", words[i]);
        } else if let Some((_, p)) = found.next_if(|(j, _)| **j == i) {
            writeln!(out, "{}\t{}", p.word, p.symbols(&model).join(" ")).map_err(write_err)?;
        }
    }
    out.flush().map_err(write_err)?;
    if rejected.is_empty() {
        Ok(())
    } else {
        Err(CliError::Rejected(rejected.len()))
    }
}
