//! Pipeline configuration file.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

use optiguide::datagen::GenerationConfig;
use optiguide::dynamics::ItcgParams;
use optiguide::eds_filter::FilterConfig;
use optiguide::gpr::TrainConfig;
use optiguide::guidance_sim::BlendMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub generation: GenerationConfig,
    pub filter: FilterSection,
    pub gp: GpSection,
    pub sim: SimSection,
    pub paths: PathsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            generation: GenerationConfig::reduced(),
            filter: FilterSection::default(),
            gp: GpSection::default(),
            sim: SimSection::default(),
            paths: PathsConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterSection {
    #[serde(flatten)]
    pub params: FilterConfig,
    /// Number of evenly spaced thresholds for the size-versus-epsilon table;
    /// zero disables it.
    pub sweep_points: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Dataset,
    Filtered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GpSection {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub source: DataSource,
    /// Share of the source held out for the reported test error.
    pub holdout_fraction: f64,
    /// Cap on held-out samples evaluated.
    pub holdout_eval_max: usize,
}

impl Default for GpSection {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            source: DataSource::Filtered,
            holdout_fraction: 0.1,
            holdout_eval_max: 20_000,
        }
    }
}

/// How the variance-mode reference deviation is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum SigmaRefPolicy {
    Fixed { value: f64 },
    /// Median predictive deviation at the model's training inputs.
    TrainingMedian,
    /// Quantile `quantile` of the predictive deviation over a held-out grid
    /// (the generation grid shifted by half a step) receives confidence `rho`.
    Probe {
        quantile: f64,
        rho: f64,
        #[serde(default = "default_probe_stride")]
        store_stride: usize,
    },
}

fn default_probe_stride() -> usize {
    50
}

impl Default for SigmaRefPolicy {
    fn default() -> Self {
        Self::Probe { quantile: 0.99, rho: 0.9, store_stride: default_probe_stride() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseSpec {
    pub r0: f64,
    pub sigma0: f64,
    /// Terminal time as a multiple of the minimum flight time.
    pub t_mult: f64,
    #[serde(default)]
    pub lambda0: f64,
    /// Overrides the section's blend mode.
    #[serde(default)]
    pub mode: Option<BlendMode>,
    #[serde(default = "default_true")]
    pub expect_hit: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub r0: Vec<f64>,
    pub sigma0: Vec<f64>,
    pub t_mult: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { r0: vec![0.8, 1.0, 1.2], sigma0: vec![0.2, 0.8, 1.4], t_mult: vec![1.3, 1.6, 1.9] }
    }
}

impl GridSpec {
    pub fn cases(&self) -> Vec<CaseSpec> {
        let mut out = Vec::new();
        for &t_mult in &self.t_mult {
            for &sigma0 in &self.sigma0 {
                for &r0 in &self.r0 {
                    out.push(CaseSpec { r0, sigma0, t_mult, lambda0: 0.0, mode: None, expect_hit: true });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub dt: f64,
    pub u_m: f64,
    pub r_hit: f64,
    pub timeout: f64,
    pub itcg: ItcgParams,
    pub mode: BlendMode,
    pub sigma_ref: SigmaRefPolicy,
    /// Cases run by `simulate`.
    pub cases: Vec<CaseSpec>,
    /// Grid run by `sweep`.
    pub grid: GridSpec,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            u_m: 5.0,
            r_hit: 2e-3,
            timeout: 0.5,
            itcg: ItcgParams::default(),
            mode: BlendMode::Variance,
            sigma_ref: SigmaRefPolicy::default(),
            cases: vec![CaseSpec { r0: 1.0, sigma0: 0.5, t_mult: 1.6, lambda0: 0.0, mode: None, expect_hit: true }],
            grid: GridSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Output directory, relative to the configuration file.
    pub out_dir: PathBuf,
    /// External dataset used instead of `<out_dir>/dataset.csv`.
    pub dataset: Option<PathBuf>,
    /// External model used instead of `<out_dir>/model.json`.
    pub model: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { out_dir: PathBuf::from("out"), dataset: None, model: None }
    }
}

/// A loaded configuration together with its identity.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: PipelineConfig,
    /// Hex SHA-256 of the canonical JSON form of `config`.
    pub hash: String,
    pub base_dir: PathBuf,
}

impl Loaded {
    pub fn read(path: &Path, seed: Option<u64>) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut config: PipelineConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if let Some(s) = seed {
            config.seed = s;
        }
        let raw: serde_json::Value = serde_json::from_str(&text)?;
        reject_unknown_keys(&raw, &serde_json::to_value(&config)?, "")?;
        config.validate()?;
        let canonical = serde_json::to_vec(&config)?;
        let hash = format!("{:x}", Sha256::digest(&canonical));
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { config, hash, base_dir })
    }

    pub fn out_dir(&self) -> PathBuf {
        self.base_dir.join(&self.config.paths.out_dir)
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.out_dir().join(name)
    }

    pub fn dataset_path(&self) -> PathBuf {
        match &self.config.paths.dataset {
            Some(p) => self.base_dir.join(p),
            None => self.out("dataset.csv"),
        }
    }

    pub fn model_path(&self) -> PathBuf {
        match &self.config.paths.model {
            Some(p) => self.base_dir.join(p),
            None => self.out("model.json"),
        }
    }
}

/// Flattened sections accept unknown keys silently, so the input is compared
/// against the re-serialized configuration instead.
fn reject_unknown_keys(input: &serde_json::Value, known: &serde_json::Value, at: &str) -> Result<()> {
    use serde_json::Value;
    match (input, known) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in a {
                let path = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                match b.get(k) {
                    Some(w) => reject_unknown_keys(v, w, &path)?,
                    None => bail!(optiguide::Error::InvalidConfig(format!("unknown field `{path}`"))),
                }
            }
        }
        (Value::Array(a), Value::Array(b)) => {
            for (i, (v, w)) in a.iter().zip(b).enumerate() {
                reject_unknown_keys(v, w, &format!("{at}[{i}]"))?;
            }
        }
        _ => {}
    }
    Ok(())
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.generation.validate()?;
        self.filter.params.validate()?;
        self.gp.train.validate()?;
        if !(self.gp.holdout_fraction >= 0.0 && self.gp.holdout_fraction < 1.0) {
            bail!(optiguide::Error::InvalidConfig("gp.holdout_fraction must lie in [0, 1)".into()));
        }
        let sim = &self.sim;
        if !(sim.dt > 0.0 && sim.u_m > 0.0 && sim.r_hit > 0.0 && sim.timeout > 0.0) {
            bail!(optiguide::Error::InvalidConfig("sim.dt, u_m, r_hit and timeout must be positive".into()));
        }
        sim.itcg.validate()?;
        match sim.sigma_ref {
            SigmaRefPolicy::Fixed { value } if !(value > 0.0) => {
                bail!(optiguide::Error::InvalidConfig("sim.sigma_ref.value must be positive".into()))
            }
            SigmaRefPolicy::Probe { quantile, rho, store_stride }
                if !((0.0..=1.0).contains(&quantile) && rho > 0.0 && rho < 1.0 && store_stride > 0) =>
            {
                bail!(optiguide::Error::InvalidConfig(
                    "sim.sigma_ref probe needs quantile in [0, 1], rho in (0, 1), store_stride >= 1".into()
                ))
            }
            _ => {}
        }
        for c in sim.cases.iter().chain(sim.grid.cases().iter()) {
            if !(c.r0 > 0.0 && c.t_mult >= 1.0) {
                bail!(optiguide::Error::InvalidConfig(format!(
                    "case r0 = {}, t_mult = {} needs r0 > 0 and t_mult >= 1",
                    c.r0, c.t_mult
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: PipelineConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let empty: PipelineConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(empty, cfg);
    }

    #[test]
    fn rejects_bad_values() {
        let mut cfg = PipelineConfig::default();
        cfg.generation.t_min = 0.5;
        assert!(cfg.validate().is_err());
        let mut cfg = PipelineConfig::default();
        cfg.sim.sigma_ref = SigmaRefPolicy::Fixed { value: 0.0 };
        assert!(cfg.validate().is_err());
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn unknown_nested_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"gp": {"hyper_train_size": 10, "typo": 1}}"#).unwrap();
        let err = Loaded::read(&path, None).unwrap_err();
        assert!(format!("{err:#}").contains("gp.typo"), "{err:#}");
        std::fs::write(&path, r#"{"gp": {"hyper_train_size": 10}, "sim": {"cases": [{"r0": 1, "sigma0": 0.1, "t_mult": 1.5}]}}"#)
            .unwrap();
        let ok = Loaded::read(&path, Some(9)).unwrap();
        assert_eq!((ok.config.gp.train.hyper_train_size, ok.config.seed), (10, 9));
    }

    #[test]
    fn grid_expands_in_order() {
        let g = GridSpec { r0: vec![1.0, 2.0], sigma0: vec![0.1], t_mult: vec![1.5, 1.7] };
        let c = g.cases();
        assert_eq!(c.len(), 4);
        assert_eq!((c[1].r0, c[1].t_mult), (2.0, 1.5));
        assert_eq!((c[2].r0, c[2].t_mult), (1.0, 1.7));
    }

    #[test]
    fn sigma_ref_policy_is_tagged() {
        let p: SigmaRefPolicy = serde_json::from_str(r#"{"policy": "fixed", "value": 0.05}"#).unwrap();
        assert_eq!(p, SigmaRefPolicy::Fixed { value: 0.05 });
        let p: SigmaRefPolicy = serde_json::from_str(r#"{"policy": "probe", "quantile": 0.9, "rho": 0.5}"#).unwrap();
        assert_eq!(p, SigmaRefPolicy::Probe { quantile: 0.9, rho: 0.5, store_stride: 50 });
    }
}
