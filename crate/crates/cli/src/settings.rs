//! Key-value configuration files and the resolved run manifest.
//!
//! A config file holds one `key = value` pair per line; `#` starts a comment.
//! Keys accept `-` or `_`. The manifest written by `train` uses the same
//! format and lists every setting, so it can be passed back as `--config`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use g2p::data::SplitSpec;
use g2p::{EncoderMode, ModelConfig, TrainConfig};

use crate::error::CliError;

pub type KeyValues = BTreeMap<String, String>;

/// Keys recognised in config files and manifests.
pub const KEYS: &[&str] = &[
    "train",
    "dev",
    "dev_sample",
    "test",
    "out",
    "encoder",
    "attention",
    "layers",
    "units",
    "embed_dim",
    "window",
    "input_feeding",
    "p_drop",
    "attention_size",
    "batch_size",
    "epochs",
    "lr",
    "lr_decay",
    "beta1",
    "beta2",
    "adam_eps",
    "sampling_floor",
    "sampling_horizon",
    "clip_norm",
    "chunk_size",
    "decode_batch",
    "seed",
    "threads",
    "grid",
    "p_drop_grid",
    "feeding_grid",
    "retrain_full",
];

/// Prefix of informational keys that a manifest records but a run ignores.
const ARTIFACT_PREFIX: &str = "artifact.";

pub fn normalize_key(key: &str) -> String {
    key.trim().replace('-', "_")
}

pub fn parse_key_values(text: &str, origin: &str) -> Result<KeyValues, CliError> {
    let mut out = KeyValues::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CliError::Config(format!("{origin}:{}: expected `key = value`, found {raw:?}", n + 1))
        })?;
        let key = normalize_key(k);
        if !KEYS.contains(&key.as_str()) && !key.starts_with(ARTIFACT_PREFIX) {
            return Err(CliError::Config(format!("{origin}:{}: unknown key {key:?}", n + 1)));
        }
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(CliError::Config(format!("{origin}:{}: duplicate key {key:?}", n + 1)));
        }
    }
    Ok(out)
}

pub fn read_config(path: &Path) -> Result<KeyValues, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_key_values(&text, &path.display().to_string())
}

struct Lookup<'a>(&'a KeyValues);

impl Lookup<'_> {
    fn raw(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str).filter(|v| !v.is_empty())
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| CliError::Config(format!("{key} = {v}: {e}")))
            })
            .transpose()
    }

    fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.parse(key)?.unwrap_or(default))
    }

    fn flag(&self, key: &str, default: bool) -> Result<bool, CliError> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => parse_bool(v).ok_or_else(|| CliError::Config(format!("{key} = {v}: expected true or false"))),
        }
    }

    /// `auto` and `none` both mean "unset".
    fn optional<T: FromStr>(&self, key: &str, default: Option<T>) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some("auto" | "none") => Ok(None),
            Some(_) => self.parse(key),
        }
    }

    fn list<T: FromStr>(&self, key: &str, default: Vec<T>) -> Result<Vec<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let Some(v) = self.raw(key) else { return Ok(default) };
        v.split(',')
            .map(|s| {
                s.trim()
                    .parse::<T>()
                    .map_err(|e| CliError::Config(format!("{key} = {v}: {e}")))
            })
            .collect()
    }
}

pub fn parse_bool(v: &str) -> Option<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Some(true),
        "false" | "no" | "off" | "0" => Some(false),
        _ => None,
    }
}

/// Everything a training run needs, with no implicit defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitSpec,
    pub out: PathBuf,
    pub threads: Option<usize>,
    pub grid: bool,
    pub retrain_full: bool,
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train.log";
pub const MANIFEST_FILE: &str = "manifest.cfg";
pub const FINAL_CHECKPOINT_FILE: &str = "final.ckpt";
pub const RETRAIN_LOG_FILE: &str = "retrain.log";
pub const GRID_FILE: &str = "grid.tsv";

impl RunManifest {
    pub fn resolve(kv: &KeyValues) -> Result<Self, CliError> {
        let l = Lookup(kv);
        let md = ModelConfig::default();
        let td = TrainConfig::default();
        let seed = l.or("seed", td.seed)?;

        let train_path: PathBuf = l
            .parse("train")?
            .ok_or_else(|| CliError::Usage("a training lexicon is required (--train)".into()))?;
        let test = l.parse("test")?;
        let split = match (l.parse::<PathBuf>("dev")?, l.parse::<usize>("dev_sample")?) {
            (Some(_), Some(_)) => {
                return Err(CliError::Usage("use either --dev or --dev-sample, not both".into()))
            }
            (Some(dev), None) => SplitSpec::Files {
                train: train_path,
                dev,
                test,
            },
            (None, Some(dev_size)) => SplitSpec::Sampled {
                train: train_path,
                dev_size,
                seed,
                test,
            },
            (None, None) => {
                return Err(CliError::Usage(
                    "a development set is required (--dev FILE or --dev-sample N)".into(),
                ))
            }
        };

        let model = ModelConfig {
            encoder: l.or("encoder", md.encoder)?,
            attention: l.or("attention", md.attention)?,
            layers: l.or("layers", md.layers)?,
            units: l.or("units", md.units)?,
            embed_dim: l.or("embed_dim", md.embed_dim)?,
            window: l.or("window", md.window)?,
            input_feeding: l.flag("input_feeding", md.input_feeding)?,
            p_drop: l.or("p_drop", md.p_drop)?,
            attention_size: l.optional("attention_size", md.attention_size)?,
            seed,
        };
        let train = TrainConfig {
            batch_size: l.or("batch_size", td.batch_size)?,
            epochs: l.or("epochs", td.epochs)?,
            lr0: l.or("lr", td.lr0)?,
            lr_decay: l.or("lr_decay", td.lr_decay)?,
            beta1: l.or("beta1", td.beta1)?,
            beta2: l.or("beta2", td.beta2)?,
            adam_eps: l.or("adam_eps", td.adam_eps)?,
            sampling_floor: l.or("sampling_floor", td.sampling_floor)?,
            sampling_horizon: l.optional("sampling_horizon", td.sampling_horizon)?,
            clip_norm: l.optional("clip_norm", td.clip_norm)?,
            chunk_size: l.or("chunk_size", td.chunk_size)?,
            decode_batch: l.or("decode_batch", td.decode_batch)?,
            p_drop_grid: l.list("p_drop_grid", td.p_drop_grid)?,
            feeding_grid: l.list("feeding_grid", td.feeding_grid)?,
            seed,
        };
        model.validate()?;
        train.validate()?;
        let threads = l.optional("threads", None)?;
        if threads == Some(0) {
            return Err(CliError::Config("threads must be at least 1".into()));
        }
        Ok(RunManifest {
            model,
            train,
            split,
            out: l.or("out", PathBuf::from("run"))?,
            threads,
            grid: l.flag("grid", false)?,
            retrain_full: l.flag("retrain_full", false)?,
        })
    }

    pub fn to_key_values(&self) -> KeyValues {
        fn p(path: &Path) -> String {
            path.display().to_string()
        }
        fn opt<T: ToString>(v: &Option<T>, unset: &str) -> String {
            v.as_ref().map_or_else(|| unset.to_string(), T::to_string)
        }
        fn join<T: ToString>(v: &[T]) -> String {
            v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
        }
        let m = &self.model;
        let t = &self.train;
        let mut kv = KeyValues::new();
        let mut put = |k: &str, v: String| {
            kv.insert(k.to_string(), v);
        };
        match &self.split {
            SplitSpec::Files { train, dev, test } => {
                put("train", p(train));
                put("dev", p(dev));
                put("test", test.as_deref().map(p).unwrap_or_default());
            }
            SplitSpec::Sampled {
                train, dev_size, test, ..
            } => {
                put("train", p(train));
                put("dev_sample", dev_size.to_string());
                put("test", test.as_deref().map(p).unwrap_or_default());
            }
        }
        put("out", p(&self.out));
        put("encoder", encoder_name(m.encoder).into());
        put("attention", m.attention.as_str().into());
        put("layers", m.layers.to_string());
        put("units", m.units.to_string());
        put("embed_dim", m.embed_dim.to_string());
        put("window", m.window.to_string());
        put("input_feeding", m.input_feeding.to_string());
        put("p_drop", m.p_drop.to_string());
        put("attention_size", opt(&m.attention_size, "auto"));
        put("batch_size", t.batch_size.to_string());
        put("epochs", t.epochs.to_string());
        put("lr", t.lr0.to_string());
        put("lr_decay", t.lr_decay.to_string());
        put("beta1", t.beta1.to_string());
        put("beta2", t.beta2.to_string());
        put("adam_eps", t.adam_eps.to_string());
        put("sampling_floor", t.sampling_floor.to_string());
        put("sampling_horizon", opt(&t.sampling_horizon, "auto"));
        put("clip_norm", opt(&t.clip_norm, "none"));
        put("chunk_size", t.chunk_size.to_string());
        put("decode_batch", t.decode_batch.to_string());
        put("seed", m.seed.to_string());
        put("threads", opt(&self.threads, "auto"));
        put("grid", self.grid.to_string());
        put("p_drop_grid", join(&t.p_drop_grid));
        put("feeding_grid", join(&t.feeding_grid));
        put("retrain_full", self.retrain_full.to_string());
        kv
    }

    pub fn artifacts(&self) -> Vec<(&'static str, PathBuf)> {
        let mut a = vec![
            ("checkpoint", self.out.join(CHECKPOINT_FILE)),
            ("log", self.out.join(LOG_FILE)),
            ("manifest", self.out.join(MANIFEST_FILE)),
        ];
        if self.grid {
            a.push(("grid", self.out.join(GRID_FILE)));
        }
        if self.retrain_full {
            a.push(("final_checkpoint", self.out.join(FINAL_CHECKPOINT_FILE)));
            a.push(("retrain_log", self.out.join(RETRAIN_LOG_FILE)));
        }
        a
    }

    pub fn render(&self) -> String {
        let mut s = String::from("# g2p run manifest; pass back with --config to repeat this run\n");
        for (k, v) in self.to_key_values() {
            let _ = writeln!(s, "{k} = {v}");
        }
        for (k, path) in self.artifacts() {
            let _ = writeln!(s, "{ARTIFACT_PREFIX}{k} = {}", path.display());
        }
        s
    }
}

pub fn encoder_name(mode: EncoderMode) -> &'static str {
    match mode {
        EncoderMode::Bidirectional => "bidirectional",
        EncoderMode::ReverseUnidirectional => "reverse",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use g2p::AttentionKind;

    fn kv(text: &str) -> KeyValues {
        parse_key_values(text, "test").unwrap()
    }

    #[test]
    fn parses_comments_dashes_and_blank_lines() {
        let m = kv("# c\n\nembed-dim = 8 # trailing\n lr=0.01\n");
        assert_eq!(m["embed_dim"], "8");
        assert_eq!(m["lr"], "0.01");
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(parse_key_values("layers 3", "t").is_err());
        assert!(parse_key_values("colour = red", "t").is_err());
        assert!(parse_key_values("layers = 1\nlayers = 2", "t").is_err());
    }

    #[test]
    fn defaults_fill_everything_and_manifest_round_trips() {
        let m = RunManifest::resolve(&kv("train = a.dict\ndev_sample = 10\nattention = local_p\nclip_norm = none"))
            .unwrap();
        assert_eq!(m.model.layers, 3);
        assert_eq!(m.model.attention, AttentionKind::LocalP);
        assert_eq!(m.train.clip_norm, None);
        let back = RunManifest::resolve(&parse_key_values(&m.render(), "manifest").unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn bad_values_are_config_errors() {
        for text in [
            "train = a\ndev = b\nlayers = three",
            "train = a\ndev = b\ninput_feeding = maybe",
            "train = a\ndev = b\nattention = soft",
            "train = a\ndev = b\nlr_decay = 1.5",
        ] {
            assert!(matches!(RunManifest::resolve(&kv(text)), Err(CliError::Config(_) | CliError::Core { .. })));
        }
        assert!(matches!(RunManifest::resolve(&kv("train = a")), Err(CliError::Usage(_))));
    }
}
