//! `key = value` run configuration shared by every command.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use pcda::dataio::key_value_lines;
use pcda::experiment::AblationConfig;
use pcda::mixup::MixConfig;
use pcda::synth::DomainParams;
use pcda::training::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub ablation: AblationConfig,
    pub source_manifest: Option<PathBuf>,
    pub target_manifest: Option<PathBuf>,
    pub eval_manifest: Option<PathBuf>,
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse()
        .map_err(|e| anyhow!("{key}: cannot parse {v:?}: {e}"))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => bail!("{key}: expected true or false, got {v:?}"),
    }
}

impl RunConfig {
    pub fn train(&self) -> &TrainConfig {
        &self.ablation.train
    }

    pub fn mix(&self) -> &MixConfig {
        &self.ablation.mix
    }

    /// Reads a config file; relative paths in it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).with_context(|| format!("config {}", path.display()))
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (line, kv) in key_value_lines(text) {
            let (k, v) = kv?;
            if !seen.insert(k.to_string()) {
                bail!("line {line}: duplicate key {k:?}");
            }
            cfg.set(k, v, base)
                .with_context(|| format!("line {line}"))?;
        }
        cfg.ablation.source.check()?;
        cfg.ablation.target.check()?;
        cfg.ablation.mix.check()?;
        cfg.ablation.train.check()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str, base: &Path) -> Result<()> {
        if let Some(k) = key.strip_prefix("source.") {
            return Ok(self.ablation.source.set(k, v)?);
        }
        if let Some(k) = key.strip_prefix("target.") {
            return Ok(self.ablation.target.set(k, v)?);
        }
        let a = &mut self.ablation;
        let t = &mut a.train;
        match key {
            "batch_size" => t.batch_size = num(key, v)?,
            "lr" => t.lr = num(key, v)?,
            "lambda" => t.lambda = num(key, v)?,
            "epochs" => t.epochs = num(key, v)?,
            "mix_proportion" => t.mix_proportion = num(key, v)?,
            "tau" => t.tau = num(key, v)?,
            "seed" => t.seed = num(key, v)?,
            "beta1" => t.beta1 = num(key, v)?,
            "beta2" => t.beta2 = num(key, v)?,
            "eps" => t.eps = num(key, v)?,
            "weight_decay" => t.weight_decay = num(key, v)?,
            "hidden" => t.hidden = num(key, v)?,
            "num_classes" => t.num_classes = num(key, v)?,
            "augment" => t.augment = flag(key, v)?,
            "points_per_cloud" => t.points_per_cloud = num(key, v)?,
            "mix_weights" => {
                let w: Vec<f64> = v
                    .split(',')
                    .map(|s| num(key, s.trim()))
                    .collect::<Result<_>>()?;
                a.mix.weights = w
                    .try_into()
                    .map_err(|_| anyhow!("{key}: expected four comma-separated weights"))?;
            }
            "instance_min" => a.mix.instance_range.0 = num(key, v)?,
            "instance_max" => a.mix.instance_range.1 = num(key, v)?,
            "mix_seed" => a.mix.seed = num(key, v)?,
            "scenes" => a.scenes = num(key, v)?,
            "eval_scenes" => a.eval_scenes = num(key, v)?,
            "pseudo_epochs" => a.pseudo_epochs = num(key, v)?,
            "pseudo_restart" => a.pseudo_restart = flag(key, v)?,
            "source_manifest" => self.source_manifest = Some(base.join(v)),
            "target_manifest" => self.target_manifest = Some(base.join(v)),
            "eval_manifest" => self.eval_manifest = Some(base.join(v)),
            _ => bail!("unknown config key {key:?}"),
        }
        Ok(())
    }

    /// Every key with its current value, one `key = value` line each.
    pub fn to_text(&self) -> String {
        let a = &self.ablation;
        let t = &a.train;
        let mut out = String::new();
        let mut put = |k: &str, v: String| writeln!(out, "{k} = {v}").unwrap();
        put("batch_size", t.batch_size.to_string());
        put("lr", format!("{:?}", t.lr));
        put("lambda", format!("{:?}", t.lambda));
        put("epochs", t.epochs.to_string());
        put("mix_proportion", format!("{:?}", t.mix_proportion));
        put("tau", format!("{:?}", t.tau));
        put("seed", t.seed.to_string());
        put("beta1", format!("{:?}", t.beta1));
        put("beta2", format!("{:?}", t.beta2));
        put("eps", format!("{:?}", t.eps));
        put("weight_decay", format!("{:?}", t.weight_decay));
        put("hidden", t.hidden.to_string());
        put("num_classes", t.num_classes.to_string());
        put("augment", t.augment.to_string());
        put("points_per_cloud", t.points_per_cloud.to_string());
        let w: Vec<String> = a.mix.weights.iter().map(|x| format!("{x:?}")).collect();
        put("mix_weights", w.join(","));
        put("instance_min", a.mix.instance_range.0.to_string());
        put("instance_max", a.mix.instance_range.1.to_string());
        put("mix_seed", a.mix.seed.to_string());
        put("scenes", a.scenes.to_string());
        put("eval_scenes", a.eval_scenes.to_string());
        put("pseudo_epochs", a.pseudo_epochs.to_string());
        put("pseudo_restart", a.pseudo_restart.to_string());
        for (k, p) in [
            ("source_manifest", &self.source_manifest),
            ("target_manifest", &self.target_manifest),
            ("eval_manifest", &self.eval_manifest),
        ] {
            if let Some(p) = p {
                put(k, p.display().to_string());
            }
        }
        for (prefix, params) in [("source", &a.source), ("target", &a.target)] {
            for k in DomainParams::KEYS {
                put(&format!("{prefix}.{k}"), params.get(k).unwrap());
            }
        }
        out
    }
}

/// Text appended to `--help`: every config key with its default.
pub fn keys_help() -> String {
    let mut out = String::from("Config keys (`key = value`, `#` comments) and their defaults:\n");
    for line in RunConfig::default().to_text().lines() {
        writeln!(out, "  {line}").unwrap();
    }
    out.push_str(
        "  source_manifest, target_manifest, eval_manifest = <path relative to the config file>\n",
    );
    out
}
