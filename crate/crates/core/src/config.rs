//! Training configuration: a TOML document (flat dotted keys or sections),
//! `--set` overrides patched into the parsed tree, typed deserialization that
//! rejects unknown keys by name, mode-dependent defaults, validation, and a
//! canonical fingerprint for checkpoint compatibility checks.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::path::{Path, PathBuf};

/// Training mode: the base dual-contrastive setup, or the variant that adds
/// four light networks and a similarity loss to resist mode collapse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "DCL")]
    Dcl,
    #[serde(rename = "SimDCL")]
    SimDcl,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Dcl => write!(f, "DCL"),
            Mode::SimDcl => write!(f, "SimDCL"),
        }
    }
}

/// Adversarial loss family. Hinge is the trained default; the others are
/// selectable for completeness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GanVariant {
    Hinge,
    Lsgan,
    Log,
}

/// An encoder tap that contrastive features are drawn from. `Res` indices are
/// 1-based within the residual stack and must stay inside the encoder half.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TapPoint {
    Rgb,
    Down1,
    Down2,
    Res(usize),
}

impl TapPoint {
    pub fn name(&self) -> String {
        match self {
            TapPoint::Rgb => "rgb".to_string(),
            TapPoint::Down1 => "down1".to_string(),
            TapPoint::Down2 => "down2".to_string(),
            TapPoint::Res(k) => format!("res{k}"),
        }
    }

    pub fn parse(s: &str) -> Result<TapPoint> {
        match s {
            "rgb" => Ok(TapPoint::Rgb),
            "down1" => Ok(TapPoint::Down1),
            "down2" => Ok(TapPoint::Down2),
            _ => {
                if let Some(num) = s.strip_prefix("res") {
                    let k: usize = num
                        .parse()
                        .map_err(|_| Error::Config(format!("invalid tap layer name: {s}")))?;
                    if k == 0 {
                        return Err(Error::Config(
                            "residual tap indices start at res1".to_string(),
                        ));
                    }
                    Ok(TapPoint::Res(k))
                } else {
                    Err(Error::Config(format!("invalid tap layer name: {s}")))
                }
            }
        }
    }
}

impl fmt::Display for TapPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.name())
    }
}

impl Serialize for TapPoint {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for TapPoint {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        TapPoint::parse(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Dataset root following the `trainA`/`trainB`/`testA`/`testB` layout.
    pub root: Option<PathBuf>,
    /// Explicit domain directories; override the root-derived ones.
    pub dir_x: Option<PathBuf>,
    pub dir_y: Option<PathBuf>,
    pub load_size: u32,
    pub crop_size: u32,
    pub flip: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            root: None,
            dir_x: None,
            dir_y: None,
            load_size: 286,
            crop_size: 256,
            flip: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetSection {
    pub residual_blocks: usize,
    pub base_width: usize,
    pub disc_width: usize,
}

impl Default for NetSection {
    fn default() -> Self {
        NetSection {
            residual_blocks: 9,
            base_width: 64,
            disc_width: 64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NceSection {
    pub temperature: f64,
    pub num_patches: usize,
    pub layers: Vec<TapPoint>,
    pub include_rgb_layer: bool,
    pub external_negatives: bool,
}

impl Default for NceSection {
    fn default() -> Self {
        NceSection {
            temperature: 0.07,
            num_patches: 256,
            layers: vec![
                TapPoint::Down1,
                TapPoint::Down2,
                TapPoint::Res(1),
                TapPoint::Res(5),
            ],
            include_rgb_layer: false,
            external_negatives: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub lambda_gan: f64,
    pub lambda_nce: f64,
    pub lambda_idt: f64,
    pub lambda_sim: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_cycle: Option<f64>,
    pub gan_variant: GanVariant,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            lambda_gan: 1.0,
            lambda_nce: 2.0,
            lambda_idt: 1.0,
            lambda_sim: 10.0,
            lambda_cycle: None,
            gan_variant: GanVariant::Hinge,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub shared_embedding: bool,
    pub cycle_loss: bool,
    pub single_direction: bool,
}

/// The configuration document as written by the user: `epochs` and `lr` may
/// be absent, in which case the mode supplies them.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub mode: Mode,
    pub seed: u64,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub checkpoint_every: usize,
    pub data: DataSection,
    pub net: NetSection,
    pub nce: NceSection,
    pub loss: LossSection,
    pub ablation: AblationSection,
}

impl Default for ConfigFile {
    fn default() -> Self {
        ConfigFile {
            mode: Mode::Dcl,
            seed: 1,
            epochs: None,
            lr: None,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            batch_size: 1,
            buffer_capacity: 50,
            checkpoint_every: 5,
            data: DataSection::default(),
            net: NetSection::default(),
            nce: NceSection::default(),
            loss: LossSection::default(),
            ablation: AblationSection::default(),
        }
    }
}

/// Fully resolved, validated training configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub checkpoint_every: usize,
    pub data: DataSection,
    pub net: NetSection,
    pub nce: NceSection,
    pub loss: LossSection,
    pub ablation: AblationSection,
}

impl TrainConfig {
    pub fn resolve(file: ConfigFile) -> Result<TrainConfig> {
        let epochs = file.epochs.unwrap_or(match file.mode {
            Mode::Dcl => 400,
            Mode::SimDcl => 200,
        });
        let lr = file.lr.unwrap_or(match file.mode {
            Mode::Dcl => 1e-4,
            Mode::SimDcl => 2e-4,
        });
        let lambda_cycle = match (file.ablation.cycle_loss, file.loss.lambda_cycle) {
            (true, v) => Some(v.unwrap_or(10.0)),
            (false, None) => None,
            (false, Some(_)) => {
                return Err(Error::Config(
                    "loss.lambda_cycle is only meaningful with ablation.cycle_loss = true"
                        .to_string(),
                ))
            }
        };
        let cfg = TrainConfig {
            mode: file.mode,
            seed: file.seed,
            epochs,
            lr,
            adam_beta1: file.adam_beta1,
            adam_beta2: file.adam_beta2,
            batch_size: file.batch_size,
            buffer_capacity: file.buffer_capacity,
            checkpoint_every: file.checkpoint_every,
            data: file.data,
            net: file.net,
            nce: file.nce,
            loss: LossSection {
                lambda_cycle,
                ..file.loss
            },
            ablation: file.ablation,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 || self.epochs % 2 != 0 {
            return bad(format!(
                "epochs must be even and positive (decay starts at the midpoint); got {}",
                self.epochs
            ));
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1".to_string());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive and finite; got {}", self.lr));
        }
        for (name, v) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1); got {v}"));
            }
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be at least 1".to_string());
        }
        if self.data.crop_size == 0 || self.data.crop_size % 4 != 0 {
            return bad(format!(
                "data.crop_size must be a positive multiple of 4; got {}",
                self.data.crop_size
            ));
        }
        // The critic's five 4x4 convolutions (three strided) shrink the map
        // to side/8 - 2, so anything under 24 collapses to nothing.
        if self.data.crop_size < 24 {
            return bad(format!(
                "data.crop_size must be at least 24 for the critic; got {}",
                self.data.crop_size
            ));
        }
        if self.data.crop_size > self.data.load_size {
            return bad(format!(
                "data.crop_size {} exceeds data.load_size {}",
                self.data.crop_size, self.data.load_size
            ));
        }
        if !(self.nce.temperature.is_finite() && self.nce.temperature > 0.0) {
            return bad(format!(
                "nce.temperature must be positive; got {}",
                self.nce.temperature
            ));
        }
        if self.nce.num_patches == 0 {
            return bad("nce.num_patches must be at least 1".to_string());
        }
        if self.nce.layers.is_empty() {
            return bad("nce.layers must name at least one tap".to_string());
        }
        let mut seen = std::collections::HashSet::new();
        let encoder_len = (self.net.residual_blocks + 1) / 2;
        for tap in &self.nce.layers {
            if !seen.insert(*tap) {
                return bad(format!("duplicate tap layer {tap} in nce.layers"));
            }
            match tap {
                TapPoint::Rgb => {
                    return bad(
                        "nce.layers may not contain rgb; use nce.include_rgb_layer".to_string()
                    )
                }
                TapPoint::Res(k) if *k > encoder_len => {
                    return bad(format!(
                        "tap {tap} is outside the encoder ({encoder_len} residual blocks with net.residual_blocks = {})",
                        self.net.residual_blocks
                    ));
                }
                _ => {}
            }
        }
        if self.net.residual_blocks == 0 {
            return bad("net.residual_blocks must be at least 1".to_string());
        }
        if self.net.base_width == 0 || self.net.disc_width == 0 {
            return bad("network widths must be positive".to_string());
        }
        for (name, v) in [
            ("loss.lambda_gan", self.loss.lambda_gan),
            ("loss.lambda_nce", self.loss.lambda_nce),
            ("loss.lambda_idt", self.loss.lambda_idt),
            ("loss.lambda_sim", self.loss.lambda_sim),
            ("loss.lambda_cycle", self.loss.lambda_cycle.unwrap_or(0.0)),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be nonnegative and finite; got {v}"));
            }
        }
        if self.ablation.single_direction {
            if self.mode == Mode::SimDcl {
                return bad(
                    "single_direction is incompatible with SimDCL mode (the similarity pairing needs both directions)"
                        .to_string(),
                );
            }
            if self.nce.external_negatives {
                return bad(
                    "single_direction is incompatible with nce.external_negatives (no second same-domain image exists)"
                        .to_string(),
                );
            }
            if self.ablation.shared_embedding {
                return bad(
                    "single_direction is incompatible with shared_embedding (only one embedding is built)"
                        .to_string(),
                );
            }
            if self.ablation.cycle_loss {
                return bad(
                    "single_direction is incompatible with cycle_loss (no reverse generator)"
                        .to_string(),
                );
            }
        }
        Ok(())
    }

    /// The tap points actually used for contrastive features, in network
    /// order (raw pixels first when enabled).
    pub fn effective_taps(&self) -> Vec<TapPoint> {
        let mut taps = Vec::new();
        if self.nce.include_rgb_layer {
            taps.push(TapPoint::Rgb);
        }
        taps.extend(self.nce.layers.iter().copied());
        taps
    }

    /// Resolved training directories for the two domains.
    pub fn train_dirs(&self) -> Result<(PathBuf, PathBuf)> {
        let dx = self
            .data
            .dir_x
            .clone()
            .or_else(|| self.data.root.as_ref().map(|r| r.join("trainA")));
        let dy = self
            .data
            .dir_y
            .clone()
            .or_else(|| self.data.root.as_ref().map(|r| r.join("trainB")));
        match (dx, dy) {
            (Some(a), Some(b)) => Ok((a, b)),
            _ => Err(Error::Config(
                "no dataset directories: set data.root or data.dir_x and data.dir_y".to_string(),
            )),
        }
    }

    /// Canonical serialization of the resolved config.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hex digest of the canonical serialization. Two configs fingerprint
    /// equal iff every resolved field matches.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn parse_toml_literal(raw: &str) -> toml::Value {
    if !raw.contains('\n') {
        if let Ok(doc) = format!("v = {raw}").parse::<toml::Table>() {
            if let Some(v) = doc.get("v") {
                return v.clone();
            }
        }
    }
    toml::Value::String(raw.to_string())
}

/// Applies one `--set key=value` override into a parsed TOML tree, creating
/// intermediate tables as needed. Values parse as TOML literals and fall back
/// to strings.
pub fn apply_override(root: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    let segments: Vec<&str> = key.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::Config(format!("malformed override key: {key}")));
    }
    let mut node = root;
    for seg in &segments[..segments.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key {key} crosses a non-table")))?;
        node = table
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("override key {key} crosses a non-table")))?;
    table.insert(
        segments.last().unwrap().to_string(),
        parse_toml_literal(raw),
    );
    Ok(())
}

/// Parses a config document with `--set` overrides applied before typed
/// deserialization, then resolves and validates it.
pub fn config_from_str(text: &str, overrides: &[(String, String)]) -> Result<TrainConfig> {
    let table: toml::Table = text
        .parse()
        .map_err(|e| Error::Config(format!("config parse failure: {e}")))?;
    let mut value = toml::Value::Table(table);
    for (k, v) in overrides {
        apply_override(&mut value, k, v)?;
    }
    let file: ConfigFile = value
        .try_into()
        .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
    TrainConfig::resolve(file)
}

pub fn load_config(path: &Path, overrides: &[(String, String)]) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    config_from_str(&text, overrides)
}
