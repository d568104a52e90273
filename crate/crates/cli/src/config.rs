//! Run configuration files.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use g2t_core::mpc::JointAnglePolytope;
use g2t_core::sim::reference_suite;
use g2t_core::{design_default, ExperimentSpec, MpcConfig, PathSpec, SimContext, VehicleParams};
use serde::Deserialize;

/// A run configuration. Relative file names are resolved against the
/// directory of the configuration file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// `"paper"` adds the reference suite to `experiment`.
    pub preset: Option<String>,
    pub vehicle_file: Option<PathBuf>,
    /// Inline vehicle parameters; missing keys keep their defaults.
    pub vehicle: Option<toml::Table>,
    /// MPC overrides on top of the defaults for the vehicle.
    pub mpc: Option<toml::Table>,
    /// Joint-angle polytope CSV; the default octagon otherwise.
    pub polytope: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    /// Base noise seed; run `i` uses `seed + i`.
    pub seed: Option<u64>,
    #[serde(default)]
    pub experiment: Vec<ExperimentSpec>,
}

/// Everything needed to execute a configuration.
#[derive(Debug, Clone)]
pub struct ResolvedRun {
    pub ctx: SimContext,
    pub specs: Vec<ExperimentSpec>,
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self { preset: Some(name.into()), ..Self::default() }),
            other => bail!("unknown preset {other:?} (available: paper)"),
        }
    }

    pub fn from_file(path: &Path) -> Result<(Self, PathBuf)> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, base))
    }

    pub fn resolve(self, base: &Path) -> Result<ResolvedRun> {
        let at = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let mut params = match &self.vehicle_file {
            Some(f) => VehicleParams::from_file(at(f)).with_context(|| format!("vehicle file {}", f.display()))?,
            None => VehicleParams::default(),
        };
        if let Some(table) = self.vehicle {
            params = overlay(&params, table).context("[vehicle]")?;
            params.validate()?;
        }
        let mut cfg = MpcConfig::for_vehicle(&params);
        if let Some(table) = self.mpc {
            cfg = overlay(&cfg, table).context("[mpc]")?;
        }
        cfg.validate()?;
        let polytope = match (&self.polytope, cfg.joint_constraints) {
            (_, false) => None,
            (Some(f), true) => {
                Some(JointAnglePolytope::from_file(at(f)).with_context(|| format!("polytope file {}", f.display()))?)
            }
            (None, true) => Some(JointAnglePolytope::fitted_default()),
        };
        let cost = design_default(&params, &cfg)?;
        let ctx = SimContext { params, cfg, cost, polytope };

        let mut specs = match self.preset.as_deref() {
            None => Vec::new(),
            Some("paper") => reference_suite(),
            Some(other) => bail!("unknown preset {other:?} (available: paper)"),
        };
        specs.extend(self.experiment);
        if specs.is_empty() {
            bail!("no experiments configured");
        }
        for (i, spec) in specs.iter_mut().enumerate() {
            if let PathSpec::File { file } = &mut spec.path {
                *file = at(file);
            }
            if let (Some(seed), Some(noise)) = (self.seed, spec.noise.as_mut()) {
                noise.seed = seed.wrapping_add(i as u64);
            }
            spec.validate()?;
        }
        let mut names: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            bail!("duplicate experiment name {:?}", w[0]);
        }
        Ok(ResolvedRun { ctx, specs, output_dir: self.output_dir.map(|d| at(&d)) })
    }
}

/// Applies the keys of `table` on top of `base`, type-checked by serde.
fn overlay<T: serde::Serialize + serde::de::DeserializeOwned>(base: &T, table: toml::Table) -> Result<T> {
    let mut merged = toml::Table::try_from(base)?;
    merged.extend(table);
    Ok(merged.try_into()?)
}
