//! On-disk episode artifacts and run manifests.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kpi::KpiRecord;
use crate::market::Trade;
use crate::network::TradeNetwork;
use crate::reward::RewardBreakdown;
use crate::runner::EpisodeRecord;
use crate::types::AgentId;

pub const TRADES_FILE: &str = "trades.jsonl";
pub const KPIS_FILE: &str = "kpis.csv";
pub const REWARDS_FILE: &str = "rewards.jsonl";
pub const LEDGER_FILE: &str = "ledger.jsonl";
pub const NETWORK_DOT_FILE: &str = "network.dot";
pub const NETWORK_JSON_FILE: &str = "network.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUMMARY_FILE: &str = "summary.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardLine {
    pub step: usize,
    pub agent: AgentId,
    pub breakdown: RewardBreakdown,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn json_line<T: Serialize>(out: &mut impl Write, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *out, value)
        .map_err(|e| Error::State(format!("cannot encode artifact line: {e}")))?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn kpi_csv_header() -> String {
    let mut h = String::from("step");
    for f in KpiRecord::FIELDS {
        h.push(',');
        h.push_str(f);
    }
    h
}

pub fn kpi_csv_row(step: usize, k: &KpiRecord) -> String {
    let mut row = step.to_string();
    for v in k.values() {
        row.push(',');
        row.push_str(&v.to_string());
    }
    row
}

/// Parses a KPI CSV written by [`write_episode`].
pub fn read_kpi_csv(path: &Path) -> Result<Vec<(usize, KpiRecord)>> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| Error::data(path, format!("cannot open KPI table: {e}")))?;
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| Error::data(path, format!("line {}: {e}", i + 2)))?;
        let nums: Vec<f64> = row
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::data(path, format!("line {}: {e}", i + 2)))?;
        if nums.len() != KpiRecord::FIELDS.len() + 1 {
            return Err(Error::data(path, format!("line {}: wrong column count", i + 2)));
        }
        let v = &nums[1..];
        out.push((
            nums[0] as usize,
            KpiRecord {
                social_welfare: v[0],
                liquidity: v[1],
                bid_ask_spread: v[2],
                price_volatility: v[3],
                imbalance: v[4],
                congestion: v[5],
                grid_balance: v[6],
                self_consumption: v[7],
                flexibility_utilization: v[8],
                coordination_score: v[9],
                coordination_convergence: v[10],
                p2p_trade_ratio: v[11],
                grid_balance_index: v[12],
            },
        ));
    }
    Ok(out)
}

/// Writes trade, KPI, reward, ledger and network files for one episode.
/// Returns the file names written, relative to `dir`.
pub fn write_episode(dir: &Path, record: &EpisodeRecord) -> Result<Vec<String>> {
    fs::create_dir_all(dir)?;

    let mut trades = create(&dir.join(TRADES_FILE))?;
    for s in &record.steps {
        for t in &s.ledger.trades {
            json_line(&mut trades, t)?;
        }
    }
    trades.flush()?;

    let mut kpis = create(&dir.join(KPIS_FILE))?;
    writeln!(kpis, "{}", kpi_csv_header())?;
    for s in &record.steps {
        writeln!(kpis, "{}", kpi_csv_row(s.ledger.step, &s.kpis))?;
    }
    kpis.flush()?;

    let mut rewards = create(&dir.join(REWARDS_FILE))?;
    for s in &record.steps {
        for (agent, breakdown) in &s.rewards {
            json_line(
                &mut rewards,
                &RewardLine {
                    step: s.ledger.step,
                    agent: agent.clone(),
                    breakdown: *breakdown,
                },
            )?;
        }
    }
    rewards.flush()?;

    let mut ledger = create(&dir.join(LEDGER_FILE))?;
    for s in &record.steps {
        json_line(&mut ledger, &s.ledger)?;
    }
    ledger.flush()?;

    let all: Vec<&Trade> = record.steps.iter().flat_map(|s| &s.ledger.trades).collect();
    let net = TradeNetwork::from_trades(all, false);
    fs::write(dir.join(NETWORK_DOT_FILE), net.to_dot())?;
    fs::write(dir.join(NETWORK_JSON_FILE), net.to_json())?;

    Ok([
        TRADES_FILE,
        KPIS_FILE,
        REWARDS_FILE,
        LEDGER_FILE,
        NETWORK_DOT_FILE,
        NETWORK_JSON_FILE,
    ]
    .iter()
    .map(|s| s.to_string())
    .collect())
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub engine_version: String,
    pub config_path: String,
    pub config_hash: String,
    pub data_hash: String,
    pub seed: u64,
    pub episode_seeds: Vec<u64>,
    pub policy: String,
    pub artifacts: Vec<String>,
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::State(format!("cannot encode manifest: {e}")))?;
        fs::write(&path, text + "\n")?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::data(path, format!("cannot read manifest: {e}")))?;
        serde_json::from_str(&text).map_err(|e| Error::data(path, e.to_string()))
    }
}

/// Descriptive statistics of one series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Stats {
        if values.is_empty() {
            return Stats { mean: 0.0, std: 0.0, min: 0.0, max: 0.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Stats {
            mean,
            std: var.sqrt(),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Per-KPI statistics over every step of every episode, plus the per-episode
/// mean agent return.
pub fn summarize(episodes: &[EpisodeRecord]) -> Vec<(String, Stats)> {
    let mut rows = Vec::new();
    for (i, name) in KpiRecord::FIELDS.iter().enumerate() {
        let series: Vec<f64> = episodes
            .iter()
            .flat_map(|e| e.steps.iter().map(move |s| s.kpis.values()[i]))
            .collect();
        rows.push((name.to_string(), Stats::of(&series)));
    }
    let returns: Vec<f64> = episodes.iter().map(EpisodeRecord::mean_return).collect();
    rows.push(("episode_reward".to_string(), Stats::of(&returns)));
    let ratios: Vec<f64> = episodes.iter().map(EpisodeRecord::p2p_ratio).collect();
    rows.push(("episode_p2p_ratio".to_string(), Stats::of(&ratios)));
    rows
}

pub fn write_summary(path: &Path, rows: &[(String, Stats)]) -> Result<()> {
    let mut out = create(path)?;
    writeln!(out, "metric,mean,std,min,max")?;
    for (name, s) in rows {
        writeln!(out, "{name},{},{},{},{}", s.mean, s.std, s.min, s.max)?;
    }
    out.flush()?;
    Ok(())
}
