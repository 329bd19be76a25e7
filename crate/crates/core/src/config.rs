//! Scenario configuration: a TOML file naming the episode parameters, reward
//! weights, node assignments and the fleet/topology/tariff data files.
//! Relative file paths resolve against the config file's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assets::{AgentConfig, Profile, HORIZON};
use crate::error::{Error, Result};
use crate::grid::GridTopology;
use crate::market::{DsoTariff, MarketLimits};
use crate::reward::RewardWeights;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeConfig {
    pub max_steps: usize,
    pub seed: u64,
    pub grid_capacity_kw: f64,
    pub price_floor: f64,
    pub price_cap: f64,
    pub max_order_kwh: f64,
    pub forecast_max_error: f64,
    pub async_orders: bool,
    pub kpi_window: usize,
    pub reputation_window: usize,
    /// Transmission losses as a fraction of P2P volume.
    pub loss_fraction: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            max_steps: HORIZON,
            seed: 42,
            grid_capacity_kw: 1800.0,
            price_floor: 20.0,
            price_cap: 600.0,
            max_order_kwh: 180.0,
            forecast_max_error: 0.3,
            async_orders: true,
            kpi_window: 6,
            reputation_window: 24,
            loss_fraction: 0.02,
        }
    }
}

impl EpisodeConfig {
    pub fn limits(&self) -> MarketLimits {
        MarketLimits {
            price_floor: self.price_floor,
            price_cap: self.price_cap,
            max_quantity: self.max_order_kwh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::config(format!("episode.{field}"), msg));
        if !(1..=HORIZON).contains(&self.max_steps) {
            return bad("max_steps", format!("must lie in 1..={HORIZON}, got {}", self.max_steps));
        }
        if !(self.grid_capacity_kw.is_finite() && self.grid_capacity_kw > 0.0) {
            return bad("grid_capacity_kw", format!("must be positive, got {}", self.grid_capacity_kw));
        }
        if !(self.price_floor.is_finite() && self.price_floor >= 0.0) {
            return bad("price_floor", format!("must be non-negative, got {}", self.price_floor));
        }
        if !(self.price_cap.is_finite() && self.price_cap > self.price_floor) {
            return bad(
                "price_cap",
                format!("must exceed price_floor {}, got {}", self.price_floor, self.price_cap),
            );
        }
        if !(self.max_order_kwh.is_finite() && self.max_order_kwh > 0.0) {
            return bad("max_order_kwh", format!("must be positive, got {}", self.max_order_kwh));
        }
        if !(0.0..1.0).contains(&self.forecast_max_error) {
            return bad(
                "forecast_max_error",
                format!("must lie in [0, 1), got {}", self.forecast_max_error),
            );
        }
        if self.kpi_window == 0 {
            return bad("kpi_window", "must be at least 1".into());
        }
        if self.reputation_window == 0 {
            return bad("reputation_window", "must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.loss_fraction) {
            return bad("loss_fraction", format!("must lie in [0, 1], got {}", self.loss_fraction));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilesConfig {
    pub fleet: PathBuf,
    pub topology: PathBuf,
    pub tariff: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub episode: EpisodeConfig,
    pub files: FilesConfig,
    pub nodes: BTreeMap<String, String>,
    #[serde(default)]
    pub reward: RewardWeights,
}

/// A fully loaded, validated scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub episode: EpisodeConfig,
    pub reward: RewardWeights,
    pub fleet: Vec<AgentConfig>,
    pub topology: GridTopology,
    pub tariff: DsoTariff,
    /// SHA-256 of the config file bytes.
    pub config_hash: String,
    /// SHA-256 over the config bytes followed by every referenced data file.
    pub data_hash: String,
}

#[derive(Deserialize)]
struct FleetRow {
    agent_id: String,
    name: String,
    capacity_kw: f64,
    battery_ratio: f64,
    profile: PathBuf,
}

const EMBEDDED: &[(&str, &str)] = &[
    ("default.toml", include_str!("../data/default.toml")),
    ("fleet.csv", include_str!("../data/fleet.csv")),
    ("ieee34.csv", include_str!("../data/ieee34.csv")),
    ("tariff.csv", include_str!("../data/tariff.csv")),
    ("profiles/small_industry.csv", include_str!("../data/profiles/small_industry.csv")),
    ("profiles/community_hospital.csv", include_str!("../data/profiles/community_hospital.csv")),
    ("profiles/university_campus.csv", include_str!("../data/profiles/university_campus.csv")),
    ("profiles/shopping_mall.csv", include_str!("../data/profiles/shopping_mall.csv")),
    ("profiles/residential_complex.csv", include_str!("../data/profiles/residential_complex.csv")),
    ("profiles/apartment_building.csv", include_str!("../data/profiles/apartment_building.csv")),
    ("profiles/community_solar_farm.csv", include_str!("../data/profiles/community_solar_farm.csv")),
    ("profiles/parking_lot.csv", include_str!("../data/profiles/parking_lot.csv")),
];

/// Lower-case hex SHA-256 digest.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Scenario {
    /// Loads a scenario from a config file on disk.
    pub fn load(path: &Path) -> Result<Scenario> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::config(path.display().to_string(), format!("cannot read config: {e}")))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_bytes(&bytes, path, &|rel: &Path| std::fs::read(base.join(rel)))
    }

    /// The shipped 8-agent case study, compiled into the library.
    pub fn default_case() -> Scenario {
        let config = EMBEDDED[0].1.as_bytes();
        Self::from_bytes(config, Path::new("default.toml"), &|rel: &Path| {
            let key = rel.to_string_lossy().replace('\\', "/");
            EMBEDDED
                .iter()
                .find(|(name, _)| *name == key)
                .map(|(_, text)| text.as_bytes().to_vec())
                .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::NotFound, key))
        })
        .expect("embedded default scenario is valid")
    }

    /// Text of the embedded default config, for writing a starter file.
    pub fn default_config_text() -> &'static str {
        EMBEDDED[0].1
    }

    /// Parses config bytes; `read` resolves data-file paths relative to the config.
    pub fn from_bytes(
        config_bytes: &[u8],
        origin: &Path,
        read: &dyn Fn(&Path) -> std::io::Result<Vec<u8>>,
    ) -> Result<Scenario> {
        let text = std::str::from_utf8(config_bytes)
            .map_err(|e| Error::config(origin.display().to_string(), format!("not UTF-8: {e}")))?;
        let cfg: ConfigFile = toml::from_str(text).map_err(|e| {
            Error::config(origin.display().to_string(), e.to_string().trim_end().to_string())
        })?;
        cfg.episode.validate()?;
        cfg.reward.validate()?;

        let mut hasher = Sha256::new();
        hasher.update(config_bytes);
        let mut fetch = |field: &str, rel: &Path| -> Result<Vec<u8>> {
            let bytes = read(rel).map_err(|e| {
                Error::config(field, format!("cannot read `{}`: {e}", rel.display()))
            })?;
            hasher.update(&bytes);
            Ok(bytes)
        };

        let fleet_bytes = fetch("files.fleet", &cfg.files.fleet)?;
        let mut rdr = csv::Reader::from_reader(fleet_bytes.as_slice());
        let mut rows = Vec::new();
        for (i, row) in rdr.deserialize::<FleetRow>().enumerate() {
            rows.push(row.map_err(|e| Error::data(&cfg.files.fleet, format!("row {}: {e}", i + 2)))?);
        }
        if rows.is_empty() {
            return Err(Error::data(&cfg.files.fleet, "fleet is empty"));
        }
        let fleet_dir = cfg.files.fleet.parent().map(Path::to_path_buf).unwrap_or_default();

        let topology_bytes = fetch("files.topology", &cfg.files.topology)?;
        let topology = GridTopology::from_reader(
            topology_bytes.as_slice(),
            &cfg.files.topology,
            cfg.episode.grid_capacity_kw,
        )?;

        let tariff_bytes = fetch("files.tariff", &cfg.files.tariff)?;
        let tariff = DsoTariff::from_reader(tariff_bytes.as_slice(), &cfg.files.tariff)?;
        for (h, (f, u)) in tariff.feed_in.iter().zip(&tariff.utility).enumerate() {
            if *f < cfg.episode.price_floor || *u > cfg.episode.price_cap {
                return Err(Error::data(
                    &cfg.files.tariff,
                    format!(
                        "hour {h}: tariff ({f}, {u}) leaves the price range [{}, {}]",
                        cfg.episode.price_floor, cfg.episode.price_cap
                    ),
                ));
            }
        }

        let mut fleet = Vec::with_capacity(rows.len());
        for row in rows {
            let node = cfg.nodes.get(&row.agent_id).ok_or_else(|| {
                Error::config(
                    format!("nodes.{}", row.agent_id),
                    "agent has no node assignment",
                )
            })?;
            if !topology.contains(node) {
                return Err(Error::config(
                    format!("nodes.{}", row.agent_id),
                    format!("node `{node}` is not in the topology"),
                ));
            }
            if fleet.iter().any(|a: &AgentConfig| a.agent_id.as_str() == row.agent_id) {
                return Err(Error::data(
                    &cfg.files.fleet,
                    format!("duplicate agent `{}`", row.agent_id),
                ));
            }
            let profile_path = fleet_dir.join(&row.profile);
            let profile_bytes = fetch("files.fleet", &profile_path)?;
            let profile = Profile::from_reader(profile_bytes.as_slice(), &profile_path)?;
            let agent = AgentConfig::new(
                row.agent_id.as_str(),
                row.name,
                node.clone(),
                row.capacity_kw,
                row.battery_ratio,
                profile.generation_kw,
                profile.demand_kw,
            )
            .map_err(|e| Error::data(&cfg.files.fleet, e.to_string()))?;
            fleet.push(agent);
        }
        if let Some(extra) = cfg
            .nodes
            .keys()
            .find(|k| !fleet.iter().any(|a| a.agent_id.as_str() == k.as_str()))
        {
            return Err(Error::config(format!("nodes.{extra}"), "no such agent in the fleet"));
        }

        Ok(Scenario {
            episode: cfg.episode,
            reward: cfg.reward,
            fleet,
            topology,
            tariff,
            config_hash: sha256_hex(config_bytes),
            data_hash: hex::encode(hasher.finalize()),
        })
    }
}
