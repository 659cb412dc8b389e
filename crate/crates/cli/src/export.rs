use std::io::{self, Write};

use aerolog_core::storage::{ChannelEntry, Store, FIELD_COUNT};
use aerolog_core::timefmt;
use anyhow::Context;
use chrono::{DateTime, Utc};
use clap::Args;

use crate::config::CliConfig;
use crate::{CmdResult, Failure};

#[derive(Debug, Clone, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub channel: u64,
    /// Field number
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=FIELD_COUNT as i64))]
    pub field: u8,
    /// Inclusive lower bound on created_at
    #[arg(long, value_parser = crate::parse_time)]
    pub start: Option<DateTime<Utc>>,
    /// Inclusive upper bound on created_at
    #[arg(long, value_parser = crate::parse_time)]
    pub end: Option<DateTime<Utc>>,
    /// Name the value column after the field label instead of `value`
    #[arg(long)]
    pub label_header: bool,
}

/// Writes `created_at,entry_id,<value header>` and one row per entry that
/// carries the field. Values are the stored strings.
pub fn write_csv<W: Write>(entries: &[ChannelEntry], field: usize, value_header: &str, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["created_at", "entry_id", value_header])?;
    for e in entries {
        if let Some(v) = e.field(field) {
            w.write_record([
                timefmt::format_seconds(&e.created_at).as_str(),
                &e.entry_id.to_string(),
                v,
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn open_store(cfg: &CliConfig) -> CmdResult<Store> {
    if !cfg.data_dir.join("channels").is_dir() {
        return Err(Failure::usage(anyhow::anyhow!(
            "no channel store at {}",
            cfg.data_dir.display()
        )));
    }
    Ok(Store::open_read_only(&cfg.data_dir)?)
}

pub(crate) fn field_label(store: &Store, channel: u64, field: usize) -> CmdResult<String> {
    let meta = store.channel(channel)?;
    Ok(meta.field_labels[field - 1]
        .clone()
        .unwrap_or_else(|| format!("field{field}")))
}

pub fn run(cfg: &CliConfig, args: &ExportArgs) -> CmdResult {
    let store = open_store(cfg)?;
    let field = usize::from(args.field);
    let header = if args.label_header {
        field_label(&store, args.channel, field)?
    } else {
        "value".to_string()
    };
    let entries = store.query(args.channel, args.start, args.end, usize::MAX)?;
    write_csv(&entries, field, &header, io::stdout().lock())
        .context("writing CSV")
        .map_err(Failure::internal)
}
