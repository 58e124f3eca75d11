use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ScenarioError;
use crate::ids::{LinkId, NodeId, SwitchId};
use crate::keyrelay::{HealthTransition, SessionStatus};
use crate::keystore::{AuditLog, AuditRecord};
use crate::switchfab::{ConnectivityChange, RealignOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub schema_version: u32,
    pub scenario: String,
    pub topology: String,
    pub seed: u64,
    pub duration_s: f64,
}

/// One row of the per-link time series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// End of the sampling window.
    pub time_s: f64,
    pub link_id: LinkId,
    pub sifted_bps: f64,
    /// Bit-weighted QBER of blocks finished in the window, if any.
    pub qber: Option<f64>,
    pub secret_bps: f64,
    /// Key-pool bits the link's endpoints share at `time_s`.
    pub reservoir_bits: u64,
}

/// Stable column order of the CSV time series.
pub const CSV_COLUMNS: [&str; 6] = ["time_s", "link_id", "sifted_bps", "qber", "secret_bps", "reservoir_bits"];

/// Reservoir level of one node pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairLevel {
    pub time_s: f64,
    pub a: NodeId,
    pub b: NodeId,
    pub key_bits: u64,
    pub auth_bits: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockOutcome {
    /// Distilled; secret (possibly zero bits) deposited.
    Secret,
    /// QBER too high to reconcile; block dropped.
    Rejected,
    /// Reconciliation check failed; block dropped.
    ReconciliationFailed,
    /// Not enough authentication key; block dropped.
    AuthStarved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub link_id: LinkId,
    pub tx: NodeId,
    pub rx: NodeId,
    /// Switch the photonic path runs through.
    pub via: Option<SwitchId>,
    pub block_id: u64,
    /// Pairing epoch: bumped whenever the link loses its photonic path.
    pub epoch: u64,
    /// First contributing frame began.
    pub start_s: f64,
    pub end_s: f64,
    pub sifted_bits: u64,
    pub qber: f64,
    pub reconciled_bits: u64,
    pub leaked_bits: u64,
    pub secret_bits: u64,
    pub outcome: BlockOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealignRecord {
    pub time_s: f64,
    pub link_id: LinkId,
    pub switch: Option<SwitchId>,
    pub duration_s: f64,
    pub outcome: RealignOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelayRecord {
    pub session_id: u64,
    pub src: NodeId,
    pub dst: NodeId,
    pub r_length: u64,
    pub requested_s: f64,
    pub finished_s: Option<f64>,
    pub status: SessionStatus,
    pub path: Vec<NodeId>,
    pub attempts: u32,
    pub hops: u32,
    pub written_off_bits: u64,
    pub cause: Option<String>,
}

/// Whole-run totals for one QKD link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSummary {
    pub link_id: LinkId,
    pub tx: NodeId,
    pub rx: NodeId,
    pub frames: u64,
    pub clicks: u64,
    pub sifted_bits: u64,
    /// Sifted bits thrown away on pairing changes or sifting changes.
    pub discarded_bits: u64,
    pub blocks: u64,
    pub secret_bits: u64,
    /// Bit-weighted over blocks; `None` without blocks.
    pub mean_qber: Option<f64>,
    /// Secret bits per simulated second over the whole run.
    pub secret_bps: f64,
    /// Authentication bits drawn for this link's own post-processing.
    pub auth_bits: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub header: Option<ReportHeader>,
    pub samples: Vec<Sample>,
    pub levels: Vec<PairLevel>,
    pub blocks: Vec<BlockRecord>,
    pub health: Vec<HealthTransition>,
    pub switch_events: Vec<ConnectivityChange>,
    pub realignments: Vec<RealignRecord>,
    pub relays: Vec<RelayRecord>,
    pub links: Vec<LinkSummary>,
    pub audit: AuditLog,
}

impl MetricsReport {
    pub fn link(&self, id: &str) -> Option<&LinkSummary> {
        self.links.iter().find(|l| l.link_id.as_str() == id)
    }

    /// Secret bits per second summed over relay deliveries between `a` and `b`.
    pub fn relay_bits(&self, a: &NodeId, b: &NodeId) -> u64 {
        self.relays
            .iter()
            .filter(|r| r.status == SessionStatus::Delivered && ((&r.src == a && &r.dst == b) || (&r.src == b && &r.dst == a)))
            .map(|r| r.r_length)
            .sum()
    }

    pub fn to_records(&self) -> Vec<ReportRecord> {
        let mut v = Vec::new();
        v.extend(self.header.clone().map(ReportRecord::Header));
        v.extend(self.samples.iter().cloned().map(ReportRecord::Sample));
        v.extend(self.levels.iter().cloned().map(ReportRecord::Level));
        v.extend(self.blocks.iter().cloned().map(ReportRecord::Block));
        v.extend(self.health.iter().cloned().map(ReportRecord::Health));
        v.extend(self.switch_events.iter().cloned().map(ReportRecord::Switch));
        v.extend(self.realignments.iter().cloned().map(ReportRecord::Realign));
        v.extend(self.relays.iter().cloned().map(ReportRecord::Relay));
        v.extend(self.links.iter().cloned().map(ReportRecord::Link));
        v.extend(self.audit.iter().cloned().map(ReportRecord::Audit));
        v
    }

    pub fn from_records(records: impl IntoIterator<Item = ReportRecord>) -> MetricsReport {
        let mut r = MetricsReport::default();
        for rec in records {
            match rec {
                ReportRecord::Header(h) => r.header = Some(h),
                ReportRecord::Sample(x) => r.samples.push(x),
                ReportRecord::Level(x) => r.levels.push(x),
                ReportRecord::Block(x) => r.blocks.push(x),
                ReportRecord::Health(x) => r.health.push(x),
                ReportRecord::Switch(x) => r.switch_events.push(x),
                ReportRecord::Realign(x) => r.realignments.push(x),
                ReportRecord::Relay(x) => r.relays.push(x),
                ReportRecord::Link(x) => r.links.push(x),
                ReportRecord::Audit(x) => r.audit.push(x),
            }
        }
        r
    }
}

/// One line of the JSON Lines output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", content = "data", rename_all = "snake_case")]
pub enum ReportRecord {
    Header(ReportHeader),
    Sample(Sample),
    Level(PairLevel),
    Block(BlockRecord),
    Health(HealthTransition),
    Switch(ConnectivityChange),
    Realign(RealignRecord),
    Relay(RelayRecord),
    Link(LinkSummary),
    Audit(AuditRecord),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    #[default]
    Csv,
    Records,
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> ScenarioError + '_ {
    move |source| ScenarioError::Io {
        path: path.to_owned(),
        source,
    }
}

/// Time series as CSV; header only when there are no samples.
pub fn write_csv<W: Write>(report: &MetricsReport, out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_COLUMNS)?;
    for s in &report.samples {
        w.write_record([
            s.time_s.to_string(),
            s.link_id.to_string(),
            s.sifted_bps.to_string(),
            s.qber.map(|q| q.to_string()).unwrap_or_default(),
            s.secret_bps.to_string(),
            s.reservoir_bits.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Every report record as one JSON object per line.
pub fn write_records<W: Write>(report: &MetricsReport, mut out: W) -> std::io::Result<()> {
    for r in report.to_records() {
        serde_json::to_writer(&mut out, &r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_records<R: BufRead>(input: R) -> Result<MetricsReport, ScenarioError> {
    let mut records = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| ScenarioError::Parse(format!("line {}: {e}", i + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: ReportRecord = serde_json::from_str(&line).map_err(|e| ScenarioError::Parse(format!("line {}: {e}", i + 1)))?;
        records.push(r);
    }
    Ok(MetricsReport::from_records(records))
}

/// Write the report into `dir` and return the files written: `metrics.csv`
/// for CSV, `records.jsonl` for records.
pub fn emit(report: &MetricsReport, format: OutputFormat, dir: &Path) -> Result<Vec<PathBuf>, ScenarioError> {
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    match format {
        OutputFormat::Csv => {
            let path = dir.join("metrics.csv");
            let f = File::create(&path).map_err(io(&path))?;
            write_csv(report, BufWriter::new(f)).map_err(|e| ScenarioError::Io {
                path: path.clone(),
                source: std::io::Error::other(e.to_string()),
            })?;
            Ok(vec![path])
        }
        OutputFormat::Records => {
            let path = dir.join("records.jsonl");
            let f = File::create(&path).map_err(io(&path))?;
            write_records(report, BufWriter::new(f)).map_err(io(&path))?;
            Ok(vec![path])
        }
    }
}

/// Read a `records.jsonl` back.
pub fn load_records(path: &Path) -> Result<MetricsReport, ScenarioError> {
    let f = File::open(path).map_err(io(path))?;
    read_records(BufReader::new(f))
}
