//! Full-state checkpoints: every parameter, both optimizers' moments, the
//! replay pools with their stream positions, and the epoch/step counters,
//! all in one archive file. A checkpoint written mid-run and reloaded
//! continues the run bit-identically.
//!
//! The archive stores a config fingerprint; loading under a different
//! config is refused rather than letting shapes or semantics drift.

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use autodiff::archive::Archive;
use autodiff::AdamState;
use std::path::Path;

use super::{unique_params, ImagePool, Trainer};

const STATE_FILE: &str = "state.bin";

/// Writes the run's config snapshot and manifest. A run directory holds
/// exactly one config; re-entering with a different one is refused.
pub fn write_run_manifest(run_dir: &Path, cfg: &TrainConfig) -> Result<()> {
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let config_path = run_dir.join("config.toml");
    let rendered = cfg.to_toml();
    if config_path.exists() {
        let existing =
            std::fs::read_to_string(&config_path).map_err(|e| Error::io(&config_path, e))?;
        if existing != rendered {
            return Err(Error::Config(format!(
                "{} already holds a different config; use a fresh run directory",
                config_path.display()
            )));
        }
    } else {
        std::fs::write(&config_path, &rendered).map_err(|e| Error::io(&config_path, e))?;
    }
    let manifest_path = run_dir.join("manifest.toml");
    if !manifest_path.exists() {
        let manifest = format!(
            "fingerprint = \"{}\"\nversion = \"{}\"\ncreated_unix = {}\n",
            cfg.fingerprint(),
            env!("CARGO_PKG_VERSION"),
            unix_now()
        );
        std::fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
    }
    Ok(())
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Stamps (or restamps) the completion time into the run manifest.
pub fn finish_run_manifest(run_dir: &Path) -> Result<()> {
    let path = run_dir.join("manifest.toml");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut table: toml::Table = text
        .parse()
        .map_err(|e| Error::Data(format!("{} is not valid: {e}", path.display())))?;
    table.insert(
        "finished_unix".to_string(),
        toml::Value::Integer(unix_now() as i64),
    );
    let rendered = toml::to_string(&table)
        .map_err(|e| Error::Data(format!("manifest serialization failed: {e}")))?;
    std::fs::write(&path, rendered).map_err(|e| Error::io(&path, e))
}

fn put_optimizer(archive: &mut Archive, prefix: &str, state: &AdamState) {
    archive.put_uint(format!("{prefix}/t"), state.t);
    for (name, m, v) in &state.moments {
        archive.put_array(format!("{prefix}/m/{name}"), m.clone());
        archive.put_array(format!("{prefix}/v/{name}"), v.clone());
    }
}

fn get_optimizer(archive: &Archive, prefix: &str, names: &[String]) -> Result<AdamState> {
    let bad = |e: std::io::Error| Error::Data(format!("{prefix}: {e}"));
    let t = archive.get_uint(&format!("{prefix}/t")).map_err(bad)?;
    let mut moments = Vec::with_capacity(names.len());
    for name in names {
        let m = archive
            .get_array(&format!("{prefix}/m/{name}"))
            .map_err(bad)?
            .clone();
        let v = archive
            .get_array(&format!("{prefix}/v/{name}"))
            .map_err(bad)?
            .clone();
        moments.push((name.clone(), m, v));
    }
    Ok(AdamState { t, moments })
}

/// Serializes the complete trainer state into `dir/state.bin`. The file is
/// staged and renamed so an interrupted write never corrupts an existing
/// checkpoint.
pub fn save_trainer(trainer: &Trainer, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut archive = Archive::new();
    archive.put_text("meta/fingerprint", trainer.cfg.fingerprint());
    archive.put_uint("meta/epoch", trainer.epoch as u64);
    archive.put_uint("meta/step", trainer.step);
    for p in unique_params(trainer.nets.all_params()) {
        archive.put_array(format!("param/{}", p.name()), p.value().clone());
    }
    put_optimizer(&mut archive, "opt_g", &trainer.opt_g.state());
    put_optimizer(&mut archive, "opt_d", &trainer.opt_d.state());
    trainer.pool_x.write_state(&mut archive, "pool_x");
    trainer.pool_y.write_state(&mut archive, "pool_y");

    let final_path = dir.join(STATE_FILE);
    let tmp_path = dir.join(format!("{STATE_FILE}.tmp"));
    archive
        .write_to(&tmp_path)
        .map_err(|e| Error::io(&tmp_path, e))?;
    std::fs::rename(&tmp_path, &final_path).map_err(|e| Error::io(&final_path, e))?;
    Ok(())
}

/// Rebuilds a trainer from `dir/state.bin` under the given config. The
/// stored fingerprint must match; parameters are restored by name into a
/// freshly built bundle, so aliased parameters under the shared-embedding
/// ablation load once and stay aliased.
pub fn load_trainer(cfg: &TrainConfig, dir: &Path) -> Result<Trainer> {
    let path = dir.join(STATE_FILE);
    let archive = Archive::read_from(&path).map_err(|e| Error::io(&path, e))?;
    let stored = archive
        .get_text("meta/fingerprint")
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if stored != cfg.fingerprint() {
        return Err(Error::Config(format!(
            "checkpoint {} was written under a different config (fingerprint {} vs {})",
            path.display(),
            stored,
            cfg.fingerprint()
        )));
    }
    let epoch = archive
        .get_uint("meta/epoch")
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let step = archive
        .get_uint("meta/step")
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;

    let mut trainer = Trainer::new(cfg);
    for p in unique_params(trainer.nets.all_params()) {
        let stored = archive
            .get_array(&format!("param/{}", p.name()))
            .map_err(|e| Error::Data(format!("parameter {}: {e}", p.name())))?;
        p.set_value(stored.clone());
    }
    let g_state = get_optimizer(&archive, "opt_g", &trainer.opt_g.param_names())?;
    trainer.opt_g.load_state(&g_state).map_err(Error::Data)?;
    let d_state = get_optimizer(&archive, "opt_d", &trainer.opt_d.param_names())?;
    trainer.opt_d.load_state(&d_state).map_err(Error::Data)?;
    trainer.pool_x = ImagePool::read_state(cfg.buffer_capacity, &archive, "pool_x")?;
    trainer.pool_y = ImagePool::read_state(cfg.buffer_capacity, &archive, "pool_y")?;
    trainer.epoch = epoch as usize;
    trainer.step = step;
    Ok(trainer)
}
