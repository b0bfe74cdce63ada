//! `key = value` run configuration files.
//!
//! Blank lines and `#` comments are ignored. Unknown keys and repeated keys
//! are errors. Keys not given keep their [`TrainConfig::default`] value.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::backbone::STAGES;
use crate::error::{Error, Result};
use crate::model::ContextSource;
use crate::train::TrainConfig;

pub const KEYS: [&str; 20] = [
    "lr0",
    "momentum",
    "weight_decay",
    "poly_power",
    "batch_size",
    "image_size",
    "epochs",
    "seed",
    "c_d",
    "d_model",
    "channels",
    "blocks_per_stage",
    "context",
    "train_frac",
    "augment",
    "hflip",
    "vflip",
    "rotate",
    "crop",
    "min_crop",
];

fn value<V: FromStr>(line: usize, key: &str, raw: &str) -> Result<V> {
    raw.parse().map_err(|_| Error::Config { line, reason: format!("invalid value `{raw}` for `{key}`") })
}

fn context_name(c: ContextSource) -> &'static str {
    match c {
        ContextSource::EncoderAttention => "attention",
        ContextSource::DeepestStage => "deepest",
    }
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut seen: Vec<&str> = Vec::new();
        for (i, raw_line) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw_line.split('#').next().unwrap().trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, val)) = content.split_once('=') else {
                return Err(Error::Config { line, reason: format!("expected `key = value`, got `{content}`") });
            };
            let (key, val) = (key.trim(), val.trim());
            let Some(&key) = KEYS.iter().find(|k| **k == key) else {
                return Err(Error::Config { line, reason: format!("unknown key `{key}`") });
            };
            if seen.contains(&key) {
                return Err(Error::Config { line, reason: format!("duplicate key `{key}`") });
            }
            seen.push(key);
            match key {
                "lr0" => cfg.optim.lr0 = value(line, key, val)?,
                "momentum" => cfg.optim.momentum = value(line, key, val)?,
                "weight_decay" => cfg.optim.weight_decay = value(line, key, val)?,
                "poly_power" => cfg.optim.poly_power = value(line, key, val)?,
                "batch_size" => cfg.batch_size = value(line, key, val)?,
                "image_size" => cfg.image_size = value(line, key, val)?,
                "epochs" => cfg.epochs = value(line, key, val)?,
                "seed" => cfg.seed = value(line, key, val)?,
                "c_d" => cfg.model.c_d = value(line, key, val)?,
                "d_model" => cfg.model.d_model = value(line, key, val)?,
                "blocks_per_stage" => cfg.model.backbone.blocks_per_stage = value(line, key, val)?,
                "train_frac" => cfg.train_frac = value(line, key, val)?,
                "min_crop" => cfg.augment.min_crop = value(line, key, val)?,
                "hflip" => cfg.augment.hflip = value(line, key, val)?,
                "vflip" => cfg.augment.vflip = value(line, key, val)?,
                "rotate" => cfg.augment.rotate = value(line, key, val)?,
                "crop" => cfg.augment.crop = value(line, key, val)?,
                "augment" => {
                    let on: bool = value(line, key, val)?;
                    let a = &mut cfg.augment;
                    (a.hflip, a.vflip, a.rotate, a.crop) = (on, on, on, on);
                }
                "context" => {
                    cfg.model.context = match val {
                        "attention" => ContextSource::EncoderAttention,
                        "deepest" => ContextSource::DeepestStage,
                        _ => {
                            return Err(Error::Config {
                                line,
                                reason: format!("`context` must be `attention` or `deepest`, got `{val}`"),
                            })
                        }
                    }
                }
                "channels" => {
                    let parts: Vec<usize> =
                        val.split(',').map(|p| value(line, key, p.trim())).collect::<Result<_>>()?;
                    cfg.model.backbone.channels = parts.try_into().map_err(|p: Vec<usize>| Error::Config {
                        line,
                        reason: format!("`channels` needs {STAGES} values, got {}", p.len()),
                    })?;
                }
                _ => unreachable!("key list and match arms agree"),
            }
        }
        cfg.validate().map_err(|e| match e {
            Error::Config { reason, .. } => Error::Config { line: 0, reason },
            other => Error::Config { line: 0, reason: other.to_string() },
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ch = self.model.backbone.channels.map(|c| c.to_string()).join(",");
        writeln!(f, "lr0 = {:?}", self.optim.lr0)?;
        writeln!(f, "momentum = {:?}", self.optim.momentum)?;
        writeln!(f, "weight_decay = {:?}", self.optim.weight_decay)?;
        writeln!(f, "poly_power = {:?}", self.optim.poly_power)?;
        writeln!(f, "batch_size = {}", self.batch_size)?;
        writeln!(f, "image_size = {}", self.image_size)?;
        writeln!(f, "epochs = {}", self.epochs)?;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "c_d = {}", self.model.c_d)?;
        writeln!(f, "d_model = {}", self.model.d_model)?;
        writeln!(f, "channels = {ch}")?;
        writeln!(f, "blocks_per_stage = {}", self.model.backbone.blocks_per_stage)?;
        writeln!(f, "context = {}", context_name(self.model.context))?;
        writeln!(f, "train_frac = {:?}", self.train_frac)?;
        writeln!(f, "hflip = {}", self.augment.hflip)?;
        writeln!(f, "vflip = {}", self.augment.vflip)?;
        writeln!(f, "rotate = {}", self.augment.rotate)?;
        writeln!(f, "crop = {}", self.augment.crop)?;
        writeln!(f, "min_crop = {:?}", self.augment.min_crop)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = TrainConfig::default();
        assert_eq!(TrainConfig::parse(&cfg.to_string()).unwrap(), cfg);
        assert_eq!(TrainConfig::parse("").unwrap(), cfg);
    }

    #[test]
    fn overrides_and_comments() {
        let text = "# run\nlr0 = 4e-4  # default value\nchannels = 8, 8, 16, 16, 32\ncontext = deepest\naugment = false\n";
        let cfg = TrainConfig::parse(text).unwrap();
        assert_eq!(cfg.optim.lr0, 4e-4);
        assert_eq!(cfg.model.backbone.channels, [8, 8, 16, 16, 32]);
        assert_eq!(cfg.model.context, ContextSource::DeepestStage);
        assert!(!cfg.augment.hflip && !cfg.augment.crop);
        assert_eq!(TrainConfig::parse(&cfg.to_string()).unwrap(), cfg);
    }

    #[test]
    fn errors_name_the_line() {
        let cases = [
            ("seed = 1\nbogus = 2", 2),
            ("epochs = ten", 1),
            ("seed = 1\nseed = 2", 2),
            ("channels = 1,2,3", 1),
            ("just words", 1),
        ];
        for (text, want) in cases {
            match TrainConfig::parse(text) {
                Err(Error::Config { line, .. }) => assert_eq!(line, want, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
        assert!(matches!(TrainConfig::parse("image_size = 48"), Err(Error::Config { .. })));
    }
}
