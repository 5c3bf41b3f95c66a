//! Flat TOML configuration shared by all subcommands.
//!
//! Keys are the field names of [`TrainConfig`], [`InferConfig`],
//! [`EvalConfig`] and [`SyntheticSpec`]; a key present in several of them
//! (for example `seed` or `snippet_frames`) sets all of them. Unknown keys
//! are rejected.

use std::collections::BTreeSet;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::dataio::SyntheticSpec;
use crate::error::{Error, Result};
use crate::evalkit::EvalConfig;
use crate::localization::InferConfig;
use crate::pipeline::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub eval: EvalConfig,
    pub synthetic: SyntheticSpec,
}

fn field_names<T: Serialize + Default>() -> BTreeSet<String> {
    match toml::Table::try_from(T::default()) {
        Ok(t) => t.keys().cloned().collect(),
        Err(_) => BTreeSet::new(),
    }
}

fn section<T: Serialize + DeserializeOwned + Default>(table: &toml::Table) -> Result<T> {
    let known = field_names::<T>();
    let sub: toml::Table = table
        .iter()
        .filter(|(k, _)| known.contains(*k))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    sub.try_into().map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
        let mut known = field_names::<TrainConfig>();
        known.extend(field_names::<InferConfig>());
        known.extend(field_names::<EvalConfig>());
        known.extend(field_names::<SyntheticSpec>());
        if let Some(k) = table.keys().find(|k| !known.contains(*k)) {
            return Err(Error::InvalidConfig(format!("unknown configuration key `{k}`")));
        }
        Ok(Self {
            train: section(&table)?,
            infer: section(&table)?,
            eval: section(&table)?,
            synthetic: section(&table)?,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets the seed of every component.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.synthetic.seed = seed;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(Config::parse("").unwrap(), Config::default());
    }

    #[test]
    fn keys_route_to_their_sections() {
        let c = Config::parse(
            "lr = 0.05\ntau = 0.5\nnms_tiou = 0.4\ntiou_thresholds = [0.3, 0.5]\nn_train = 7\nseed = 9\nsnippet_frames = 8\nsmooth = \"hard\"\n",
        )
        .unwrap();
        assert_eq!(c.train.lr, 0.05);
        assert_eq!(c.train.tau, 0.5);
        assert_eq!(c.train.smooth, crate::pipeline::SmoothKind::Hard);
        assert_eq!(c.infer.nms_tiou, 0.4);
        assert_eq!(c.eval.tiou_thresholds, vec![0.3, 0.5]);
        assert_eq!(c.synthetic.n_train, 7);
        assert_eq!((c.train.seed, c.synthetic.seed), (9, 9));
        assert_eq!((c.infer.snippet_frames, c.eval.snippet_frames), (8, 8));
    }

    #[test]
    fn unknown_and_mistyped_keys_are_rejected() {
        assert!(matches!(Config::parse("learning_rate = 1.0"), Err(Error::InvalidConfig(_))));
        assert!(matches!(Config::parse("batch_size = \"big\""), Err(Error::InvalidConfig(_))));
        assert!(matches!(Config::parse("not toml ["), Err(Error::InvalidConfig(_))));
    }
}
