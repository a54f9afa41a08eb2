//! `key = value` training configuration files.

use std::str::FromStr;

use skinfield_core::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{source_name}:{line}: {key}: {message}")]
pub struct ConfigError {
    pub source_name: String,
    pub line: usize,
    pub key: String,
    pub message: String,
}

pub const KEYS: &[&str] = &[
    "rank_density",
    "rank_color",
    "epochs",
    "iters_per_epoch",
    "patch_size",
    "patches",
    "start_voxels",
    "end_voxels",
    "upsample_at",
    "lr_factors",
    "lr_pose",
    "lr_decay",
    "tau",
    "n_samples",
    "background",
    "seed",
    "sparse_samples",
    "init_scale",
    "jitter",
    "min_transmittance",
];

fn num<T: FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn list<T: FromStr>(v: &str) -> Result<Vec<T>, String> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(num).collect()
}

/// Sets one key; unknown keys are errors.
pub fn set(cfg: &mut TrainConfig, key: &str, v: &str) -> Result<(), String> {
    match key {
        "rank_density" => cfg.rank_density = num(v)?,
        "rank_color" => cfg.rank_color = num(v)?,
        "epochs" => cfg.epochs = num(v)?,
        "iters_per_epoch" => cfg.iters_per_epoch = num(v)?,
        "patch_size" => cfg.patch_size = num(v)?,
        "patches" => cfg.patches = num(v)?,
        "start_voxels" => cfg.start_voxels = num(v)?,
        "end_voxels" => cfg.end_voxels = num(v)?,
        "upsample_at" => cfg.upsample_at = list(v)?,
        "lr_factors" => cfg.lr_factors = num(v)?,
        "lr_pose" => cfg.lr_pose = num(v)?,
        "lr_decay" => cfg.lr_decay = num(v)?,
        "tau" => cfg.tau = if v == "auto" { None } else { Some(num(v)?) },
        "n_samples" => cfg.n_samples = num(v)?,
        "background" => {
            let c: Vec<f64> = list(v)?;
            cfg.background = c.try_into().map_err(|_| "expected three comma-separated values".to_string())?;
        }
        "seed" => cfg.seed = num(v)?,
        "sparse_samples" => cfg.sparse_samples = num(v)?,
        "init_scale" => cfg.init_scale = num(v)?,
        "jitter" => cfg.jitter = num(v)?,
        "min_transmittance" => cfg.min_transmittance = num(v)?,
        _ => return Err("unknown key".into()),
    }
    Ok(())
}

/// Applies `key = value` lines on top of `cfg`. `#` starts a comment.
pub fn apply(cfg: &mut TrainConfig, text: &str, source_name: &str) -> Result<(), ConfigError> {
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |key: &str, message: String| ConfigError { source_name: source_name.into(), line: i + 1, key: key.into(), message };
        let (k, v) = line.split_once('=').ok_or_else(|| err(line, "expected key = value".into()))?;
        let (k, v) = (k.trim(), v.trim());
        set(cfg, k, v).map_err(|m| err(k, m))?;
    }
    Ok(())
}

/// Renders every key in file syntax.
pub fn to_text(cfg: &TrainConfig) -> String {
    let join = |v: &[String]| v.join(",");
    let mut s = String::new();
    let mut kv = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
    kv("rank_density", cfg.rank_density.to_string());
    kv("rank_color", cfg.rank_color.to_string());
    kv("epochs", cfg.epochs.to_string());
    kv("iters_per_epoch", cfg.iters_per_epoch.to_string());
    kv("patch_size", cfg.patch_size.to_string());
    kv("patches", cfg.patches.to_string());
    kv("start_voxels", cfg.start_voxels.to_string());
    kv("end_voxels", cfg.end_voxels.to_string());
    kv("upsample_at", join(&cfg.upsample_at.iter().map(u32::to_string).collect::<Vec<_>>()));
    kv("lr_factors", cfg.lr_factors.to_string());
    kv("lr_pose", cfg.lr_pose.to_string());
    kv("lr_decay", cfg.lr_decay.to_string());
    kv("tau", cfg.tau.map_or("auto".into(), |t| t.to_string()));
    kv("n_samples", cfg.n_samples.to_string());
    kv("background", join(&cfg.background.iter().map(f64::to_string).collect::<Vec<_>>()));
    kv("seed", cfg.seed.to_string());
    kv("sparse_samples", cfg.sparse_samples.to_string());
    kv("init_scale", cfg.init_scale.to_string());
    kv("jitter", cfg.jitter.to_string());
    kv("min_transmittance", cfg.min_transmittance.to_string());
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig { tau: Some(0.05), upsample_at: vec![10, 20], jitter: false, ..TrainConfig::default() };
        cfg.background = [0.25, 0.5, 1.0];
        let mut back = TrainConfig::default();
        apply(&mut back, &to_text(&cfg), "cfg").unwrap();
        assert_eq!(back, cfg);
        assert_eq!(to_text(&cfg).lines().count(), KEYS.len());
    }

    #[test]
    fn errors_name_line_and_key() {
        let mut cfg = TrainConfig::default();
        let e = apply(&mut cfg, "# comment\nepochs = 3\n\npatches = many\n", "f.cfg").unwrap_err();
        assert_eq!((e.line, e.key.as_str()), (4, "patches"));
        assert_eq!(cfg.epochs, 3);
        let e = apply(&mut cfg, "bogus = 1", "f.cfg").unwrap_err();
        assert_eq!(e.key, "bogus");
        assert!(apply(&mut cfg, "no equals sign", "f.cfg").is_err());
    }
}
