use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use g2p::checkpoint::{self, CheckpointMeta};
use g2p::data::{build_vocabularies, read_lexicon_file, sample_dev, SplitSpec};
use g2p::train::{fit, grid_points, grid_search, run_epoch, EpochRecord, GridPoint};
use g2p::{G2pError, LexiconEntry, Model, ModelConfig, TrainConfig, TrainState, Vocabulary};

use crate::error::CliError;
use crate::settings::{
    read_config, RunManifest, CHECKPOINT_FILE, FINAL_CHECKPOINT_FILE, GRID_FILE, LOG_FILE, MANIFEST_FILE,
    RETRAIN_LOG_FILE,
};
use crate::{set_threads, TrainArgs};

pub fn read_lexicon(path: &Path) -> Result<Vec<LexiconEntry>, CliError> {
    let entries = read_lexicon_file(path).map_err(CliError::at(path))?;
    if entries.is_empty() {
        return Err(CliError::at(path)(G2pError::Input("lexicon has no entries".into())));
    }
    Ok(entries)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

struct Data {
    train: Vec<LexiconEntry>,
    dev: Vec<LexiconEntry>,
    graphemes: Vocabulary,
    phonemes: Vocabulary,
}

impl Data {
    fn load(split: &SplitSpec) -> Result<Self, CliError> {
        let (train, dev) = match split {
            SplitSpec::Files { train, dev, .. } => (read_lexicon(train)?, read_lexicon(dev)?),
            SplitSpec::Sampled {
                train, dev_size, seed, ..
            } => sample_dev(&read_lexicon(train)?, *dev_size, *seed).map_err(CliError::at(train))?,
        };
        let all: Vec<LexiconEntry> = train.iter().chain(&dev).cloned().collect();
        let (graphemes, phonemes) = build_vocabularies(&all);
        log::info!(
            "{} training words, {} development words, {} graphemes, {} phonemes",
            train.len(),
            dev.len(),
            graphemes.corpus_symbols().len(),
            phonemes.corpus_symbols().len()
        );
        Ok(Data {
            train,
            dev,
            graphemes,
            phonemes,
        })
    }
}

/// Trains one configuration in `dir`, saving the checkpoint whenever the dev
/// WER improves.
fn train_one(
    model_config: ModelConfig,
    config: &TrainConfig,
    data: &Data,
    dir: &Path,
) -> Result<Vec<EpochRecord>, CliError> {
    create_dir(dir)?;
    let log_path = dir.join(LOG_FILE);
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?);
    writeln!(log, "{}", EpochRecord::TSV_HEADER).map_err(|e| CliError::io(&log_path, e))?;

    let mut model = Model::<f32>::new(model_config, data.graphemes.clone(), data.phonemes.clone())?;
    let mut state = TrainState::new(&model, config);
    log::info!("{}: {} parameters", dir.display(), model.params.count());
    let records = fit(&mut model, &mut state, &data.train, &data.dev, config, |record, model| {
        writeln!(log, "{}", record.to_tsv())?;
        log.flush()?;
        if record.saved {
            let meta = CheckpointMeta {
                epoch: record.epoch,
                dev_wer: Some(record.dev_wer),
                lr: record.lr,
            };
            checkpoint::save(model, &meta, &ckpt_path)?;
        }
        Ok(())
    })?;
    Ok(records)
}

fn best_wer(records: &[EpochRecord]) -> f64 {
    records.iter().map(|r| r.dev_wer).fold(f64::INFINITY, f64::min)
}

fn grid_dir(out: &Path, g: &GridPoint) -> std::path::PathBuf {
    out.join("grid")
        .join(format!("p_drop{}_feed{}", g.p_drop, u8::from(g.input_feeding)))
}

/// Runs every grid point and copies the winner's artifacts into `out`.
fn run_grid(m: &RunManifest, data: &Data) -> Result<(ModelConfig, Vec<EpochRecord>), CliError> {
    let points = grid_points(&m.train);
    if points.is_empty() {
        return Err(CliError::Config("empty hyperparameter grid".into()));
    }
    let (best, scored) = grid_search(&points, |g| {
        let config = ModelConfig {
            p_drop: g.p_drop,
            input_feeding: g.input_feeding,
            ..m.model.clone()
        };
        match train_one(config, &m.train, data, &grid_dir(&m.out, g)) {
            Ok(records) => Ok(best_wer(&records)),
            Err(CliError::Core { source, .. }) => Err(source),
            Err(other) => Err(G2pError::Input(other.to_string())),
        }
    })?;
    let mut table = String::from("p_drop\tinput_feeding\tbest_dev_wer\tselected\n");
    for (g, wer) in &scored {
        table.push_str(&format!(
            "{}\t{}\t{:.2}\t{}\n",
            g.p_drop,
            g.input_feeding,
            wer,
            u8::from(*g == best)
        ));
    }
    write_file(&m.out.join(GRID_FILE), &table)?;
    log::info!("selected p_drop {} input_feeding {}", best.p_drop, best.input_feeding);

    let src = grid_dir(&m.out, &best);
    for name in [CHECKPOINT_FILE, LOG_FILE] {
        fs::copy(src.join(name), m.out.join(name)).map_err(|e| CliError::io(&src.join(name), e))?;
    }
    let text = fs::read_to_string(src.join(LOG_FILE)).map_err(|e| CliError::io(&src.join(LOG_FILE), e))?;
    let records = parse_log(&text)?;
    let config = ModelConfig {
        p_drop: best.p_drop,
        input_feeding: best.input_feeding,
        ..m.model.clone()
    };
    Ok((config, records))
}

fn parse_log(text: &str) -> Result<Vec<EpochRecord>, CliError> {
    let bad = || CliError::Core {
        context: Some(LOG_FILE.into()),
        source: G2pError::Input("malformed training log".into()),
    };
    text.lines()
        .skip(1)
        .map(|line| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(bad());
            }
            Ok(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad())?,
                train_loss: f[1].parse().map_err(|_| bad())?,
                dev_wer: f[2].parse().map_err(|_| bad())?,
                lr: f[3].parse().map_err(|_| bad())?,
                sampling_prob: f[4].parse().map_err(|_| bad())?,
                saved: f[5] == "1",
            })
        })
        .collect()
}

/// Retrains from scratch on train and dev together, for as many epochs as
/// the tuned run needed to reach its best dev WER, replaying its learning
/// rates.
fn retrain_full(
    m: &RunManifest,
    model_config: ModelConfig,
    data: &Data,
    records: &[EpochRecord],
) -> Result<(), CliError> {
    let Some(best) = records.iter().rev().find(|r| r.saved) else {
        return Err(CliError::Config("no improving epoch to retrain towards".into()));
    };
    let full: Vec<LexiconEntry> = data.train.iter().chain(&data.dev).cloned().collect();
    let mut model = Model::<f32>::new(model_config, data.graphemes.clone(), data.phonemes.clone())?;
    let mut state = TrainState::new(&model, &m.train);
    let mut log = String::from("epoch\ttrain_loss\tlr\tsampling_prob\n");
    log::info!("retraining on {} words for {} epochs", full.len(), best.epoch);
    for e in 0..best.epoch as usize {
        let lr = if e == 0 { m.train.lr0 } else { records[e - 1].lr };
        state.schedule.lr = lr;
        let loss = run_epoch(&mut model, &mut state, &full, &m.train)?;
        let line = format!("{}\t{loss:.6}\t{lr:e}\t{:.4}", state.epoch, state.sampling_prob);
        log::info!("retrain {line}");
        log.push_str(&line);
        log.push('\n');
    }
    write_file(&m.out.join(RETRAIN_LOG_FILE), &log)?;
    let meta = CheckpointMeta {
        epoch: best.epoch,
        dev_wer: None,
        lr: state.schedule.lr,
    };
    checkpoint::save(&model, &meta, &m.out.join(FINAL_CHECKPOINT_FILE))?;
    Ok(())
}

pub fn run(args: &TrainArgs) -> Result<(), CliError> {
    let mut kv = match &args.config {
        Some(path) => read_config(path)?,
        None => Default::default(),
    };
    kv.extend(args.overrides());
    let manifest = RunManifest::resolve(&kv)?;
    if manifest.train.epochs == 0 {
        return Err(CliError::Config("epochs must be at least 1".into()));
    }
    set_threads(manifest.threads)?;
    let data = Data::load(&manifest.split)?;
    create_dir(&manifest.out)?;
    write_file(&manifest.out.join(MANIFEST_FILE), &manifest.render())?;

    let (config, records) = if manifest.grid {
        run_grid(&manifest, &data)?
    } else {
        let records = train_one(manifest.model.clone(), &manifest.train, &data, &manifest.out)?;
        (manifest.model.clone(), records)
    };
    log::info!(
        "best dev WER {:.2}; checkpoint {}",
        best_wer(&records),
        manifest.out.join(CHECKPOINT_FILE).display()
    );
    if manifest.retrain_full {
        retrain_full(&manifest, config, &data, &records)?;
    }
    Ok(())
}
