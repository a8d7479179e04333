//! Per-packet budget table: builtin kernel service times against the time
//! between packet arrivals on a fully loaded link.

use std::fs;

use anyhow::Context;

use osmosim::kernels::{builtin, builtin_names, service_cycles};
use osmosim::{ppb, SimConfig};

use crate::run::CliError;
use crate::PpbArgs;

#[derive(Debug, Clone, PartialEq)]
pub struct PpbRow {
    pub kernel: String,
    pub size: u32,
    pub service_ns: f64,
    pub ppb_ns: f64,
}

impl PpbRow {
    pub fn exceeds(&self) -> bool {
        self.service_ns > self.ppb_ns
    }

    pub fn verdict(&self) -> &'static str {
        if self.exceeds() {
            "exceeds PPB"
        } else {
            "fits PPB"
        }
    }
}

/// One row per (kernel, size) in catalog order, using uncontended mean
/// latencies from `cfg`.
pub fn ppb_rows(cfg: &SimConfig, pus: u32, sizes: &[u32], bandwidth: f64) -> Result<Vec<PpbRow>, CliError> {
    let d = cfg.validate().map_err(|e| CliError::Config(e.into()))?;
    let ns_per_cycle = 1e9 / cfg.clock_freq;
    let mut rows = Vec::new();
    for name in builtin_names() {
        let model = builtin(name).expect("catalog name");
        for &size in sizes {
            let cycles = service_cycles(
                &model,
                size,
                d.interconnect_width,
                d.egress.as_f64(),
                cfg.local_dma_latency.mean(),
                d.host_latency_cycles.mean(),
                cfg.sched_decision_latency,
            );
            rows.push(PpbRow {
                kernel: name.to_string(),
                size,
                service_ns: cycles * ns_per_cycle,
                ppb_ns: ppb(pus, size, bandwidth) * 1e9,
            });
        }
    }
    Ok(rows)
}

pub fn render(rows: &[PpbRow], pus: u32, bandwidth: f64) -> String {
    let mut s = format!("per-packet budget: {pus} PUs, {:.0} Gbit/s link\n", bandwidth / 1e9);
    s.push_str(&format!("{:<10} {:>8} {:>14} {:>12}  verdict\n", "kernel", "size_B", "service_ns", "ppb_ns"));
    for r in rows {
        s.push_str(&format!(
            "{:<10} {:>8} {:>14.2} {:>12.2}  {}\n",
            r.kernel,
            r.size,
            r.service_ns,
            r.ppb_ns,
            r.verdict()
        ));
    }
    s
}

pub fn cmd_ppb(args: &PpbArgs) -> Result<(), CliError> {
    let cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))
                .map_err(CliError::Config)?;
            let mut table: toml::Table =
                text.parse().with_context(|| format!("parsing config {}", path.display())).map_err(CliError::Config)?;
            table.remove("run");
            toml::Value::Table(table).try_into().context("parsing config").map_err(CliError::Config)?
        }
        None => SimConfig::default(),
    };
    if args.pus == 0 || args.bandwidth.is_nan() || args.bandwidth <= 0.0 || args.sizes.contains(&0) {
        return Err(CliError::Config(anyhow::anyhow!("--pus, --bandwidth and --sizes must be positive")));
    }
    let rows = ppb_rows(&cfg, args.pus, &args.sizes, args.bandwidth)?;
    print!("{}", render(&rows, args.pus, args.bandwidth));
    Ok(())
}
