//! Run configuration: one JSON document, overridable key by key.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use atomshadow_core::campaign::CampaignConfig;
use atomshadow_core::filter::{geometric_grid, BackgroundThresholds, FilterConfig, MdlConfig};
use atomshadow_core::image::{ImageFormat, DEFAULT_CLAMP_FLOOR};
use atomshadow_core::metrics::{PhysicalContext, BOLTZMANN_K, RB87_CROSS_SECTION_M2, RB87_MASS_KG};
use atomshadow_core::sensorsim::{CloudModel, Fringe, SensorModel};
use atomshadow_core::EnhanceConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const SEED_ENV: &str = "ATOMSHADOW_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub input: InputConfig,
    pub output_dir: PathBuf,
    pub output_format: ImageFormat,
    /// Smallest transmitted-light ratio before taking the logarithm.
    pub clamp_floor: f64,
    pub crop_width: usize,
    pub log_sigma: f64,
    pub mdl: MdlSettings,
    pub thresholds: BackgroundThresholds,
    pub kappa: f64,
    pub max_components: usize,
    pub component_sigma: f64,
    pub physics: PhysicsConfig,
    pub histogram_bins: usize,
    pub seed: u64,
    pub simulate: SimulateConfig,
    pub campaign: CampaignSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let enh = EnhanceConfig::default();
        Self {
            input: InputConfig::default(),
            output_dir: PathBuf::from("out"),
            output_format: ImageFormat::F32,
            clamp_floor: DEFAULT_CLAMP_FLOOR,
            crop_width: enh.filter.crop_width,
            log_sigma: enh.filter.log_sigma,
            mdl: MdlSettings::default(),
            thresholds: enh.filter.thresholds,
            kappa: enh.kappa,
            max_components: enh.max_components,
            component_sigma: enh.component_sigma,
            physics: PhysicsConfig::default(),
            histogram_bins: 64,
            seed: 0,
            simulate: SimulateConfig::default(),
            campaign: CampaignSettings::default(),
        }
    }
}

/// Either a precomputed OD image or the three raw frames.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputConfig {
    pub od: Option<PathBuf>,
    pub atoms: Option<PathBuf>,
    pub light: Option<PathBuf>,
    pub dark: Option<PathBuf>,
    /// Format of every input; guessed from the extension when absent.
    pub format: Option<ImageFormat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MdlSettings {
    pub mesh_edge_l: f64,
    pub sigma_grid_min: f64,
    pub sigma_grid_max: f64,
    pub sigma_grid_n: usize,
    pub residual_window: usize,
}

impl Default for MdlSettings {
    fn default() -> Self {
        Self {
            mesh_edge_l: 1.0,
            sigma_grid_min: 0.3,
            sigma_grid_max: 10.0,
            sigma_grid_n: 60,
            residual_window: 5,
        }
    }
}

impl MdlSettings {
    pub fn build(&self) -> Result<MdlConfig> {
        let grid = geometric_grid(self.sigma_grid_min, self.sigma_grid_max, self.sigma_grid_n)?;
        Ok(MdlConfig::new(self.mesh_edge_l, grid, self.residual_window)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicsConfig {
    pub atom_mass_kg: f64,
    pub boltzmann_k: f64,
    pub tof_ms: Option<f64>,
    /// Object-space size of one pixel; the image sidecar's value is used
    /// when absent.
    pub pixel_pitch_um: Option<f64>,
    pub cross_section_m2: Option<f64>,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        Self {
            atom_mass_kg: RB87_MASS_KG,
            boltzmann_k: BOLTZMANN_K,
            tof_ms: None,
            pixel_pitch_um: None,
            cross_section_m2: Some(RB87_CROSS_SECTION_M2),
        }
    }
}

impl PhysicsConfig {
    /// Context for an image whose own pitch is `image_pitch_um`. Without a
    /// configured time of flight the context carries a 1 ms placeholder and
    /// temperatures must not be reported.
    pub fn context(&self, image_pitch_um: Option<f64>) -> Result<PhysicalContext> {
        let ctx = PhysicalContext {
            atom_mass_kg: self.atom_mass_kg,
            boltzmann_k: self.boltzmann_k,
            tof_time_s: self.tof_ms.unwrap_or(1.0) * 1e-3,
            pixel_pitch_m: self.pixel_pitch_um.or(image_pitch_um).map(|p| p * 1e-6),
            cross_section_m2: self.cross_section_m2,
        };
        ctx.validate()?;
        Ok(ctx)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub width: usize,
    pub height: usize,
    /// Peak probe light in photoelectrons per pixel.
    pub baseline_light: f64,
    /// Clouds summed into one OD map.
    pub clouds: Vec<CloudSpec>,
    pub fringe: Option<Fringe>,
    pub sensor: SensorModel,
    pub pixel_pitch_um: Option<f64>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            width: 301,
            height: 301,
            baseline_light: 2000.0,
            clouds: vec![CloudSpec {
                amplitude: 1.0,
                center_x: 150.0,
                center_y: 150.0,
                sigma_x: 8.5,
                sigma_y: 8.5,
            }],
            fringe: None,
            sensor: SensorModel::default(),
            pixel_pitch_um: None,
        }
    }
}

/// Gaussian OD profile of one simulated cloud.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CloudSpec {
    pub amplitude: f64,
    pub center_x: f64,
    pub center_y: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
}

impl CloudSpec {
    pub fn model(&self, baseline_light: f64) -> CloudModel {
        CloudModel {
            amplitude: self.amplitude,
            center_x: self.center_x,
            center_y: self.center_y,
            sigma_x: self.sigma_x,
            sigma_y: self.sigma_y,
            baseline_light,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CampaignSettings {
    pub frame_size: usize,
    pub delays_ms: Vec<f64>,
    pub shots_per_delay: usize,
    pub temperature_nk: f64,
    pub sigma0_um: f64,
    pub pixel_pitch_um: f64,
    pub integrated_od: f64,
}

impl Default for CampaignSettings {
    fn default() -> Self {
        let c = CampaignConfig::default();
        Self {
            frame_size: c.frame_size,
            delays_ms: c.delays_ms,
            shots_per_delay: c.shots_per_delay,
            temperature_nk: c.temperature_nk,
            sigma0_um: c.sigma0_um,
            pixel_pitch_um: c.pixel_pitch_um,
            integrated_od: c.integrated_od,
        }
    }
}

impl RunConfig {
    pub fn enhance_config(&self) -> Result<EnhanceConfig> {
        let cfg = EnhanceConfig {
            filter: FilterConfig {
                mdl: self.mdl.build()?,
                thresholds: self.thresholds,
                crop_width: self.crop_width,
                log_sigma: self.log_sigma,
            },
            kappa: self.kappa,
            max_components: self.max_components,
            component_sigma: self.component_sigma,
        };
        self.thresholds.validate()?;
        if self.crop_width.is_multiple_of(2) {
            bail!("crop_width must be odd, got {}", self.crop_width);
        }
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            bail!("kappa must lie in (0, 1), got {}", self.kappa);
        }
        if self.log_sigma.is_nan()
            || self.log_sigma <= 0.0
            || self.component_sigma.is_nan()
            || self.component_sigma <= 0.0
        {
            bail!("log_sigma and component_sigma must be positive");
        }
        if self.max_components == 0 {
            bail!("max_components must be at least 1");
        }
        Ok(cfg)
    }

    pub fn campaign_config(&self) -> CampaignConfig {
        let c = &self.campaign;
        CampaignConfig {
            frame_size: c.frame_size,
            delays_ms: c.delays_ms.clone(),
            shots_per_delay: c.shots_per_delay,
            temperature_nk: c.temperature_nk,
            sigma0_um: c.sigma0_um,
            pixel_pitch_um: c.pixel_pitch_um,
            integrated_od: c.integrated_od,
            baseline_light: self.simulate.baseline_light,
            atom_mass_kg: self.physics.atom_mass_kg,
            cross_section_m2: self.physics.cross_section_m2.unwrap_or(RB87_CROSS_SECTION_M2),
            sensor: self.simulate.sensor.clone(),
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.enhance_config()?;
        if !(self.clamp_floor > 0.0 && self.clamp_floor < 1.0) {
            bail!("clamp_floor must lie in (0, 1), got {}", self.clamp_floor);
        }
        if self.histogram_bins == 0 {
            bail!("histogram_bins must be at least 1");
        }
        self.simulate.sensor.validate()?;
        Ok(())
    }
}

/// Builds the configuration from defaults, then the JSON file, then the
/// seed environment variable, then `overrides` in order.
pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut tree = serde_json::to_value(RunConfig::default())?;
    if let Some(path) = path {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let file: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        // Reject unknown keys against the typed schema before merging.
        serde_json::from_value::<RunConfig>(file.clone()).with_context(|| format!("config {}", path.display()))?;
        merge(&mut tree, file);
    }
    if let Ok(seed) = std::env::var(SEED_ENV) {
        let seed: u64 = seed
            .trim()
            .parse()
            .with_context(|| format!("{SEED_ENV} must be an unsigned integer, got {seed:?}"))?;
        tree["seed"] = Value::from(seed);
    }
    for (key, value) in overrides {
        set_path(&mut tree, key, value)?;
    }
    let cfg: RunConfig = serde_json::from_value(tree).context("invalid configuration")?;
    cfg.validate()?;
    Ok(cfg)
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

fn key_path(flag: &str) -> Vec<String> {
    flag.split('.').map(|s| s.replace('-', "_")).collect()
}

/// True when `flag` names a key of the default configuration.
pub fn is_config_key(flag: &str) -> bool {
    let tree = serde_json::to_value(RunConfig::default()).expect("default config serializes");
    let mut node = &tree;
    for part in key_path(flag) {
        match node.get(&part) {
            Some(next) => node = next,
            None => return false,
        }
    }
    true
}

/// Sets `flag` (a dotted key path) to `raw`, read as JSON when it parses and
/// as a string otherwise.
fn set_path(tree: &mut Value, flag: &str, raw: &str) -> Result<()> {
    let parts = key_path(flag);
    let mut node = tree;
    for (i, part) in parts.iter().enumerate() {
        let obj = match node {
            Value::Object(map) => map,
            Value::Null => {
                *node = Value::Object(Default::default());
                node.as_object_mut().expect("just created")
            }
            _ => bail!("--{flag}: {} is not a section", parts[..i].join(".")),
        };
        if i + 1 == parts.len() {
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            obj.insert(part.clone(), value);
            return Ok(());
        }
        node = obj.entry(part.clone()).or_insert(Value::Null);
    }
    bail!("empty override key")
}
