use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::rl::RLConfig;
use crate::train::TrainConfig;

/// Where a resolved value came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Default,
    File,
    Flag,
    Checkpoint,
    /// Copied from another resolved key.
    Derived,
}

impl Source {
    pub fn name(self) -> &'static str {
        match self {
            Source::Default => "default",
            Source::File => "file",
            Source::Flag => "flag",
            Source::Checkpoint => "checkpoint",
            Source::Derived => "derived",
        }
    }
}

/// Input files. Empty strings mean unset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Training data, or the prompt or test set for commands that only read one.
    pub data: String,
    pub direct_data: String,
    pub rl_data: String,
    pub test_data: String,
    pub init_checkpoint: String,
}

/// Settings for the comparison, ablation and geometry commands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteSettings {
    /// Epochs of the text-only legs; 0 matches both latent stages together.
    pub baseline_epochs: usize,
    pub with_rl: bool,
    pub k_list: Vec<usize>,
    pub gamma_list: Vec<f64>,
    pub stages: Vec<String>,
    pub geometry_per_task: usize,
    /// Levels kept for evaluation; empty keeps all.
    pub levels: Vec<usize>,
}

impl Default for SuiteSettings {
    fn default() -> Self {
        SuiteSettings {
            baseline_epochs: 0,
            with_rl: false,
            k_list: vec![2, 4, 6, 8],
            gamma_list: vec![0.1, 0.5, 1.0],
            stages: vec!["full".into(), "no-stage-1".into(), "no-stage-2".into()],
            geometry_per_task: 100,
            levels: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub command: String,
    pub threads: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { command: String::new(), threads: 1 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sections {
    run: RunSection,
    model: ModelConfig,
    train: TrainConfig,
    rl: RLConfig,
    suite: SuiteSettings,
    paths: PathsConfig,
}

const SECTION_ORDER: [&str; 6] = ["run", "model", "train", "rl", "suite", "paths"];

/// Every setting a command uses, with the source of each value.
/// Precedence is flag over file over default.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub run: RunSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub rl: RLConfig,
    pub suite: SuiteSettings,
    pub paths: PathsConfig,
    /// `section.key` to source, for every key.
    pub provenance: BTreeMap<String, Source>,
}

fn kind(v: &Value) -> &'static str {
    v.type_str()
}

/// Checks `v` against the default's type; integers widen to floats.
fn coerce(key: &str, v: Value, default: &Value) -> Result<Value> {
    match (default, v) {
        (Value::Float(_), Value::Integer(i)) => Ok(Value::Float(i as f64)),
        (d, v) if kind(d) == kind(&v) => Ok(v),
        (d, v) => Err(Error::config(key, format!("expected {}, got {}", kind(d), kind(&v)))),
    }
}

fn split_key(key: &str) -> Result<(&str, &str)> {
    key.split_once('.').ok_or_else(|| Error::config(key, "keys take the form section.name"))
}

impl RunConfig {
    pub fn defaults() -> Self {
        Self::resolve(None, &[]).expect("defaults resolve")
    }

    /// Layers `file` (TOML text) and then `flags` (`section.key`, raw value)
    /// over the defaults. Unknown sections and keys are rejected by name.
    pub fn resolve(file: Option<&str>, flags: &[(String, String)]) -> Result<Self> {
        let defaults = Value::try_from(Sections::default()).map_err(|e| Error::Invalid(e.to_string()))?;
        let Value::Table(defaults) = defaults else { unreachable!("sections serialize to a table") };
        let mut table = defaults.clone();
        let mut provenance = BTreeMap::new();
        for (sec, body) in &defaults {
            if let Value::Table(t) = body {
                for k in t.keys() {
                    provenance.insert(format!("{sec}.{k}"), Source::Default);
                }
            }
        }
        let default_of = |sec: &str, key: &str| -> Result<Value> {
            match defaults.get(sec) {
                Some(Value::Table(t)) => t.get(key).cloned().ok_or_else(|| Error::config(format!("{sec}.{key}"), "unknown key")),
                _ => Err(Error::config(format!("{sec}.{key}"), format!("unknown section [{sec}]"))),
            }
        };
        let mut set = |sec: &str, key: &str, v: Value, src: Source, table: &mut Table| -> Result<()> {
            let full = format!("{sec}.{key}");
            let v = coerce(&full, v, &default_of(sec, key)?)?;
            if let Some(Value::Table(t)) = table.get_mut(sec) {
                t.insert(key.to_string(), v);
            }
            provenance.insert(full, src);
            Ok(())
        };

        if let Some(text) = file {
            let parsed: Table = text.parse().map_err(|e: toml::de::Error| Error::config("config", e.to_string()))?;
            for (sec, body) in parsed {
                let Value::Table(body) = body else {
                    return Err(Error::config(sec, "top-level keys must sit inside a [section]"));
                };
                if !defaults.contains_key(&sec) {
                    return Err(Error::config(&sec, format!("unknown section [{sec}]")));
                }
                for (k, v) in body {
                    set(&sec, &k, v, Source::File, &mut table)?;
                }
            }
        }
        for (key, raw) in flags {
            let (sec, k) = split_key(key)?;
            let v = match default_of(sec, k)? {
                Value::String(_) => Value::String(raw.clone()),
                _ => {
                    let t: Table = format!("v = {raw}").parse().map_err(|_| Error::config(key, format!("cannot parse value {raw:?}")))?;
                    t["v"].clone()
                }
            };
            set(sec, k, v, Source::Flag, &mut table)?;
        }

        let s: Sections = Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::config("config", e.to_string()))?;
        Ok(RunConfig { run: s.run, model: s.model, train: s.train, rl: s.rl, suite: s.suite, paths: s.paths, provenance })
    }

    pub fn source(&self, key: &str) -> Source {
        self.provenance.get(key).copied().unwrap_or(Source::Default)
    }

    fn sections(&self) -> Sections {
        Sections {
            run: self.run.clone(),
            model: self.model.clone(),
            train: self.train.clone(),
            rl: self.rl.clone(),
            suite: self.suite.clone(),
            paths: self.paths.clone(),
        }
    }

    /// Takes the model shape from a checkpoint. A file or flag value that
    /// disagrees with it is a conflict.
    pub fn adopt_model(&mut self, cfg: &ModelConfig) -> Result<()> {
        let ours = Value::try_from(&self.model).map_err(|e| Error::Invalid(e.to_string()))?;
        let theirs = Value::try_from(cfg).map_err(|e| Error::Invalid(e.to_string()))?;
        let (Value::Table(ours), Value::Table(theirs)) = (ours, theirs) else { unreachable!() };
        for (k, v) in &theirs {
            let key = format!("model.{k}");
            if matches!(self.source(&key), Source::File | Source::Flag) && ours.get(k) != Some(v) {
                return Err(Error::config(&key, format!("set to {} but the checkpoint has {v}", ours[k])));
            }
            if self.source(&key) == Source::Default {
                self.provenance.insert(key, Source::Checkpoint);
            }
        }
        self.model = cfg.clone();
        Ok(())
    }

    /// TOML with one `# source` comment per key. Reading it back with
    /// [`RunConfig::resolve`] gives the same values.
    pub fn to_toml(&self) -> String {
        let Ok(Value::Table(t)) = Value::try_from(self.sections()) else { unreachable!("sections serialize to a table") };
        let mut out = String::new();
        for sec in SECTION_ORDER {
            let Some(Value::Table(body)) = t.get(sec) else { continue };
            let _ = writeln!(out, "[{sec}]");
            for (k, v) in body {
                let _ = writeln!(out, "{k} = {v} # {}", self.source(&format!("{sec}.{k}")).name());
            }
            out.push('\n');
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.rl.validate()?;
        if self.run.threads == 0 {
            return Err(Error::config("run.threads", "must be at least 1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flag(k: &str, v: &str) -> (String, String) {
        (k.to_string(), v.to_string())
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let file = "[train]\nlr = 3e-4\nepochs = 4\n[model]\nd_model = 64\n";
        let c = RunConfig::resolve(Some(file), &[flag("train.lr", "0.5")]).unwrap();
        assert_eq!(c.train.lr, 0.5);
        assert_eq!(c.train.epochs, 4);
        assert_eq!(c.model.d_model, 64);
        assert_eq!(c.train.gamma, TrainConfig::default().gamma);
        assert_eq!(c.source("train.lr"), Source::Flag);
        assert_eq!(c.source("train.epochs"), Source::File);
        assert_eq!(c.source("train.gamma"), Source::Default);
    }

    #[test]
    fn integers_widen_to_floats_and_strings_stay_raw() {
        let c = RunConfig::resolve(Some("[train]\ngamma = 1\n"), &[flag("paths.data", "a b.jsonl"), flag("suite.k_list", "[2, 8]")]).unwrap();
        assert_eq!(c.train.gamma, 1.0);
        assert_eq!(c.paths.data, "a b.jsonl");
        assert_eq!(c.suite.k_list, [2, 8]);
    }

    #[test]
    fn unknown_or_mistyped_keys_name_the_field() {
        let field = |r: Result<RunConfig>| match r {
            Err(Error::Config { field, .. }) => field,
            other => panic!("{other:?}"),
        };
        assert_eq!(field(RunConfig::resolve(Some("[train]\nlrr = 1.0\n"), &[])), "train.lrr");
        assert_eq!(field(RunConfig::resolve(Some("[optim]\nlr = 1.0\n"), &[])), "optim");
        assert_eq!(field(RunConfig::resolve(None, &[flag("model.d_model", "\"wide\"")])), "model.d_model");
        assert_eq!(field(RunConfig::resolve(None, &[flag("epochs", "3")])), "epochs");
        assert_eq!(field(RunConfig::resolve(Some("lr = 1.0\n"), &[])), "lr");
    }

    #[test]
    fn resolved_text_reads_back_identically() {
        let c = RunConfig::resolve(Some("[rl]\nclip_ratio = 0.3\n"), &[flag("train.lr", "1e-4"), flag("run.command", "train")]).unwrap();
        let text = c.to_toml();
        assert!(text.contains("clip_ratio = 0.3 # file"));
        assert!(text.contains("lr = 0.0001 # flag"));
        let back = RunConfig::resolve(Some(&text), &[]).unwrap();
        assert_eq!((&back.run, &back.model, &back.train, &back.rl, &back.suite, &back.paths), (&c.run, &c.model, &c.train, &c.rl, &c.suite, &c.paths));
    }

    #[test]
    fn checkpoint_shape_conflicts_are_reported() {
        let ck = ModelConfig { d_model: 32, d_ff: 128, ..ModelConfig::default() };
        let mut c = RunConfig::defaults();
        c.adopt_model(&ck).unwrap();
        assert_eq!(c.model, ck);
        assert_eq!(c.source("model.d_model"), Source::Checkpoint);

        let mut c = RunConfig::resolve(None, &[flag("model.d_model", "64")]).unwrap();
        match c.adopt_model(&ck) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "model.d_model"),
            other => panic!("{other:?}"),
        }
        let mut c = RunConfig::resolve(None, &[flag("model.d_model", "32")]).unwrap();
        assert!(c.adopt_model(&ck).is_ok());
    }
}
