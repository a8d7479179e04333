//! Fairness, budget and latency metrics, run aggregation and CSV/text
//! rendering.

use std::fmt::Write as _;

use crate::traffic::Role;

/// Jain's index `(sum x)^2 / (n * sum x^2)`; `None` when every allocation
/// is zero (no traffic).
pub fn jain(x: &[f64]) -> Option<f64> {
    let sum: f64 = x.iter().sum();
    let sum_sq: f64 = x.iter().map(|v| v * v).sum();
    if x.is_empty() || sum_sq == 0.0 {
        return None;
    }
    Some(sum * sum / (x.len() as f64 * sum_sq))
}

/// Jain's index over `x_i / prio_i`.
pub fn priority_adjusted_jain(x: &[f64], prio: &[u16]) -> Option<f64> {
    assert_eq!(x.len(), prio.len(), "one priority per allocation");
    let adj: Vec<f64> = x.iter().zip(prio).map(|(v, &p)| v / p.max(1) as f64).collect();
    jain(&adj)
}

/// Per-packet time budget in seconds for `n_pus` PUs, `packet_bytes`
/// packets and a `link_bps` link.
pub fn ppb(n_pus: u32, packet_bytes: u32, link_bps: f64) -> f64 {
    n_pus as f64 * (packet_bytes as f64 * 8.0) / link_bps
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[u64], p: f64) -> Option<u64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    Some(sorted[rank.min(sorted.len()) - 1])
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlowLog {
    pub name: String,
    pub role: Role,
    pub prio: u16,
    pub packets_in: u64,
    pub dropped: u64,
    pub processed: u64,
    pub terminated: u64,
    pub first_arrival: Option<u64>,
    pub last_completion: Option<u64>,
    pub kernel_times: Vec<u64>,
    /// Latency of each logical IO request, submit to last byte.
    pub io_latencies: Vec<u64>,
    pub bytes_processed: u64,
    pub dma_bytes: u64,
    pub egress_bytes: u64,
    /// Sum over cycles of `cur_pu_occup`.
    pub occupancy_cycles: u64,
    pub steady_occupancy_cycles: u64,
}

/// One sample window ending at `cycle` (exclusive).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Sample {
    pub cycle: u64,
    pub window_len: u64,
    pub occupancy: Vec<u32>,
    pub occupancy_sum: Vec<u64>,
    pub active_now: Vec<bool>,
    pub active_window: Vec<bool>,
    pub io_bytes: Vec<u64>,
}

/// Raw record of one run, produced by the simulator.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub scenario: String,
    pub steady_window: Option<[u64; 2]>,
    pub cycles: u64,
    pub num_pus: usize,
    pub flows: Vec<FlowLog>,
    pub samples: Vec<Sample>,
    pub pu_busy_cycles: u64,
    pub dma_busy_cycles: u64,
    pub egress_busy_cycles: u64,
    pub unmatched: u64,
    pub events: u64,
    pub work_conservation_violations: u64,
    pub packet_conservation_violations: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Percentiles {
    pub p50: u64,
    pub p90: u64,
    pub p99: u64,
    pub max: u64,
    pub min: u64,
}

impl Percentiles {
    pub fn of(values: &[u64]) -> Option<Self> {
        let mut v = values.to_vec();
        v.sort_unstable();
        Some(Percentiles {
            p50: percentile(&v, 50.0)?,
            p90: percentile(&v, 90.0)?,
            p99: percentile(&v, 99.0)?,
            max: *v.last()?,
            min: v[0],
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowReport {
    pub name: String,
    pub role: Role,
    pub packets_in: u64,
    pub dropped: u64,
    pub processed: u64,
    pub terminated: u64,
    pub fct: Option<u64>,
    pub kernel_time: Option<Percentiles>,
    pub io_latency: Option<Percentiles>,
    pub bytes_processed: u64,
    pub dma_bytes: u64,
    pub egress_bytes: u64,
    pub mean_occupancy: f64,
    pub steady_occupancy: Option<f64>,
    /// Processed bytes per cycle over the flow's completion time.
    pub goodput: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesPoint {
    pub cycle: u64,
    pub occupancy: Vec<u32>,
    pub window_occupancy: Vec<f64>,
    pub io_bytes: Vec<u64>,
    pub jain_instant: Option<f64>,
    pub jain_window: Option<f64>,
    pub jain_io: Option<f64>,
}

/// Aggregated results of one run. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct SimReport {
    pub scenario: String,
    pub cycles: u64,
    pub num_pus: usize,
    pub flows: Vec<FlowReport>,
    pub series: Vec<SeriesPoint>,
    /// Mean windowed Jain over windows with at least two active flows.
    pub fairness: Option<f64>,
    pub fairness_instant: Option<f64>,
    pub fairness_io: Option<f64>,
    pub pu_utilization: f64,
    pub dma_utilization: f64,
    pub egress_utilization: f64,
    pub unmatched: u64,
    pub events: u64,
    pub work_conservation_violations: u64,
    pub packet_conservation_violations: u64,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Jain over the flows flagged active, priority adjusted.
fn masked_jain(x: &[f64], active: &[bool], prio: &[u16]) -> Option<f64> {
    let (xs, ps): (Vec<f64>, Vec<u16>) =
        x.iter().zip(prio).zip(active).filter(|(_, &a)| a).map(|((&v, &p), _)| (v, p)).unzip();
    if xs.is_empty() {
        return None;
    }
    priority_adjusted_jain(&xs, &ps)
}

pub fn summarize(log: &RunLog) -> SimReport {
    let prio: Vec<u16> = log.flows.iter().map(|f| f.prio).collect();
    let cycles = log.cycles.max(1) as f64;
    let flows = log
        .flows
        .iter()
        .map(|f| {
            let fct = match (f.first_arrival, f.last_completion) {
                (Some(a), Some(c)) => Some(c.saturating_sub(a)),
                _ => None,
            };
            let steady = log.steady_window.and_then(|[a, b]| {
                let end = b.min(log.cycles);
                (end > a).then(|| f.steady_occupancy_cycles as f64 / (end - a) as f64)
            });
            FlowReport {
                name: f.name.clone(),
                role: f.role,
                packets_in: f.packets_in,
                dropped: f.dropped,
                processed: f.processed,
                terminated: f.terminated,
                fct,
                kernel_time: Percentiles::of(&f.kernel_times),
                io_latency: Percentiles::of(&f.io_latencies),
                bytes_processed: f.bytes_processed,
                dma_bytes: f.dma_bytes,
                egress_bytes: f.egress_bytes,
                mean_occupancy: f.occupancy_cycles as f64 / cycles,
                steady_occupancy: steady,
                goodput: fct.filter(|&t| t > 0).map(|t| f.bytes_processed as f64 / t as f64),
            }
        })
        .collect();
    let series: Vec<SeriesPoint> = log
        .samples
        .iter()
        .map(|s| {
            let window: Vec<f64> = s.occupancy_sum.iter().map(|&o| o as f64 / s.window_len.max(1) as f64).collect();
            let now: Vec<f64> = s.occupancy.iter().map(|&o| o as f64).collect();
            let io: Vec<f64> = s.io_bytes.iter().map(|&b| b as f64).collect();
            SeriesPoint {
                cycle: s.cycle,
                jain_instant: masked_jain(&now, &s.active_now, &prio),
                jain_window: masked_jain(&window, &s.active_window, &prio),
                jain_io: masked_jain(&io, &s.active_window, &prio),
                occupancy: s.occupancy.clone(),
                window_occupancy: window,
                io_bytes: s.io_bytes.clone(),
            }
        })
        .collect();
    let contended = |s: &Sample| s.active_window.iter().filter(|&&a| a).count() >= 2;
    let headline = |pick: fn(&SeriesPoint) -> Option<f64>| {
        mean(log.samples.iter().zip(&series).filter(|(s, _)| contended(s)).filter_map(|(_, p)| pick(p)))
    };
    SimReport {
        scenario: log.scenario.clone(),
        cycles: log.cycles,
        num_pus: log.num_pus,
        flows,
        fairness: headline(|p| p.jain_window),
        fairness_instant: headline(|p| p.jain_instant),
        fairness_io: headline(|p| p.jain_io),
        series,
        pu_utilization: log.pu_busy_cycles as f64 / (cycles * log.num_pus.max(1) as f64),
        dma_utilization: log.dma_busy_cycles as f64 / cycles,
        egress_utilization: log.egress_busy_cycles as f64 / cycles,
        unmatched: log.unmatched,
        events: log.events,
        work_conservation_violations: log.work_conservation_violations,
        packet_conservation_violations: log.packet_conservation_violations,
    }
}

pub const CSV_VERSION: &str = "# osmosim csv v1";

fn fmt_f(v: f64) -> String {
    format!("{v:.6}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "no-traffic".to_string(), fmt_f)
}

impl SimReport {
    pub fn flow(&self, name: &str) -> Option<&FlowReport> {
        self.flows.iter().find(|f| f.name == name)
    }

    pub fn by_role(&self, role: Role) -> impl Iterator<Item = &FlowReport> {
        self.flows.iter().filter(move |f| f.role == role)
    }

    pub fn total_processed(&self) -> u64 {
        self.flows.iter().map(|f| f.processed).sum()
    }

    pub fn total_dropped(&self) -> u64 {
        self.flows.iter().map(|f| f.dropped).sum()
    }

    /// `(metric, flow_id, value)` rows in a fixed order.
    pub fn summary_rows(&self) -> Vec<(String, String, String)> {
        let mut rows = Vec::new();
        let mut g = |m: &str, v: String| rows.push((m.to_string(), "all".to_string(), v));
        g("cycles", self.cycles.to_string());
        g("num_pus", self.num_pus.to_string());
        g("packets_processed", self.total_processed().to_string());
        g("packets_dropped", self.total_dropped().to_string());
        g("packets_unmatched", self.unmatched.to_string());
        g("events", self.events.to_string());
        g("fairness_window_mean", fmt_opt(self.fairness));
        g("fairness_instant_mean", fmt_opt(self.fairness_instant));
        g("fairness_io_mean", fmt_opt(self.fairness_io));
        g("pu_utilization", fmt_f(self.pu_utilization));
        g("dma_utilization", fmt_f(self.dma_utilization));
        g("egress_utilization", fmt_f(self.egress_utilization));
        g("work_conservation_violations", self.work_conservation_violations.to_string());
        g("packet_conservation_violations", self.packet_conservation_violations.to_string());
        for (i, f) in self.flows.iter().enumerate() {
            let id = i.to_string();
            let mut r = |m: &str, v: String| rows.push((m.to_string(), id.clone(), v));
            r("name", f.name.clone());
            r("role", f.role.as_str().to_string());
            r("packets_in", f.packets_in.to_string());
            r("packets_processed", f.processed.to_string());
            r("packets_dropped", f.dropped.to_string());
            r("kernels_terminated", f.terminated.to_string());
            r("fct_cycles", f.fct.map_or("none".into(), |v| v.to_string()));
            for (label, p) in [("kernel_time", f.kernel_time), ("io_latency", f.io_latency)] {
                if let Some(p) = p {
                    r(&format!("{label}_p50"), p.p50.to_string());
                    r(&format!("{label}_p90"), p.p90.to_string());
                    r(&format!("{label}_p99"), p.p99.to_string());
                    r(&format!("{label}_max"), p.max.to_string());
                }
            }
            r("bytes_processed", f.bytes_processed.to_string());
            r("bytes_dma", f.dma_bytes.to_string());
            r("bytes_egress", f.egress_bytes.to_string());
            r("mean_pu_occupancy", fmt_f(f.mean_occupancy));
            if let Some(s) = f.steady_occupancy {
                r("steady_pu_occupancy", fmt_f(s));
            }
            if let Some(gp) = f.goodput {
                r("goodput_bytes_per_cycle", fmt_f(gp));
            }
        }
        rows
    }

    pub fn summary_csv(&self) -> String {
        let mut s = format!("{CSV_VERSION}\nmetric,flow_id,value\n");
        for (m, f, v) in self.summary_rows() {
            writeln!(s, "{m},{f},{v}").expect("write to String");
        }
        s
    }

    /// `(file name, contents)` for every exported series.
    pub fn series_csvs(&self) -> Vec<(String, String)> {
        let header = format!("{CSV_VERSION}\ncycle,flow_id,value\n");
        let mut occ = header.clone();
        let mut wocc = header.clone();
        let mut io = header.clone();
        let mut jain = header;
        for p in &self.series {
            for (i, o) in p.occupancy.iter().enumerate() {
                writeln!(occ, "{},{i},{o}", p.cycle).expect("write to String");
                writeln!(wocc, "{},{i},{}", p.cycle, fmt_f(p.window_occupancy[i])).expect("write to String");
                writeln!(io, "{},{i},{}", p.cycle, p.io_bytes[i]).expect("write to String");
            }
            for (label, v) in [("instant", p.jain_instant), ("window", p.jain_window), ("io", p.jain_io)] {
                writeln!(jain, "{},{label},{}", p.cycle, fmt_opt(v)).expect("write to String");
            }
        }
        vec![
            ("series_pu_occupancy.csv".into(), occ),
            ("series_pu_occupancy_window.csv".into(), wocc),
            ("series_io_bytes.csv".into(), io),
            ("series_jain.csv".into(), jain),
        ]
    }

    /// Victim latency inflation: median over best kernel completion time.
    pub fn victim_inflation(&self) -> Option<f64> {
        mean(self.by_role(Role::Victim).filter_map(|f| f.kernel_time).map(|p| p.p50 as f64 / p.min.max(1) as f64))
    }

    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let w = &mut s;
        writeln!(w, "scenario: {}", self.scenario).ok();
        writeln!(w, "cycles: {}  PUs: {}", self.cycles, self.num_pus).ok();
        writeln!(
            w,
            "utilization: PU {:.1}%  DMA {:.1}%  egress {:.1}%",
            self.pu_utilization * 100.0,
            self.dma_utilization * 100.0,
            self.egress_utilization * 100.0
        )
        .ok();
        let f = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
        writeln!(
            w,
            "fairness (Jain, time averaged): occupancy {}  instantaneous {}  IO bytes {}",
            f(self.fairness),
            f(self.fairness_instant),
            f(self.fairness_io)
        )
        .ok();
        if let Some(v) = self.victim_inflation() {
            writeln!(w, "victim latency inflation (p50 / best): {v:.2}x").ok();
        }
        writeln!(
            w,
            "invariants: work-conservation violations {}  packet-conservation violations {}  events {}",
            self.work_conservation_violations, self.packet_conservation_violations, self.events
        )
        .ok();
        writeln!(w).ok();
        writeln!(
            w,
            "{:<22} {:<9} {:>8} {:>8} {:>7} {:>10} {:>9} {:>9} {:>9} {:>8}",
            "flow", "role", "in", "done", "drops", "fct", "k_p50", "k_p99", "io_p50", "occ"
        )
        .ok();
        for fl in &self.flows {
            let opt = |v: Option<u64>| v.map_or("-".to_string(), |x| x.to_string());
            writeln!(
                w,
                "{:<22} {:<9} {:>8} {:>8} {:>7} {:>10} {:>9} {:>9} {:>9} {:>8.2}",
                fl.name,
                fl.role.as_str(),
                fl.packets_in,
                fl.processed,
                fl.dropped,
                opt(fl.fct),
                opt(fl.kernel_time.map(|p| p.p50)),
                opt(fl.kernel_time.map(|p| p.p99)),
                opt(fl.io_latency.map(|p| p.p50)),
                fl.mean_occupancy
            )
            .ok();
        }
        s
    }
}

/// Relative change in percent, positive when `managed` is lower.
fn reduction(base: f64, managed: f64) -> Option<f64> {
    (base > 0.0).then(|| (base - managed) / base * 100.0)
}

/// Headline deltas between a baseline and a managed run of the same
/// scenario.
pub fn compare_text(base_label: &str, base: &SimReport, label: &str, managed: &SimReport) -> String {
    let mut s = String::new();
    let w = &mut s;
    writeln!(w, "{label} vs {base_label} ({})", managed.scenario).ok();
    match (base.fairness, managed.fairness) {
        (Some(b), Some(m)) => {
            writeln!(w, "  fairness improvement: {:+.1}% ({b:.4} -> {m:.4})", (m - b) / b * 100.0).ok();
        }
        _ => {
            writeln!(w, "  fairness improvement: n/a").ok();
        }
    }
    for (b, m) in base.flows.iter().zip(&managed.flows) {
        let fct = match (b.fct, m.fct) {
            (Some(x), Some(y)) => reduction(x as f64, y as f64).map_or("n/a".into(), |r| format!("{r:+.1}%")),
            _ => "n/a".into(),
        };
        let p50 = match (b.kernel_time, m.kernel_time) {
            (Some(x), Some(y)) => format!("{} -> {}", x.p50, y.p50),
            _ => "n/a".into(),
        };
        writeln!(w, "  {:<22} FCT reduction {fct:>8}  kernel p50 {p50}", b.name).ok();
    }
    let inflation = |r: &SimReport| r.victim_inflation().map_or("n/a".into(), |v| format!("{v:.2}x"));
    writeln!(w, "  victim latency inflation: {} -> {}", inflation(base), inflation(managed)).ok();
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn jain_examples() {
        assert_eq!(jain(&[1.0, 1.0, 1.0, 1.0]), Some(1.0));
        assert_eq!(jain(&[1.0, 0.0]), Some(0.5));
        assert_eq!(jain(&[2.0, 1.0, 1.0]), Some(16.0 / 18.0));
        assert_eq!(jain(&[0.0, 0.0]), None);
    }

    #[test]
    fn priority_adjusted_examples() {
        assert_eq!(priority_adjusted_jain(&[2.0, 1.0], &[2, 1]), Some(1.0));
        assert_eq!(priority_adjusted_jain(&[1.0, 1.0], &[2, 1]), Some(2.25 / 2.5));
        let x = [3.0, 1.0, 4.0];
        assert_eq!(priority_adjusted_jain(&x, &[1, 1, 1]), jain(&x));
    }

    #[test]
    fn ppb_examples() {
        assert_eq!(ppb(1, 64, 400e9), 8.0 * 64.0 / 400e9);
        assert_eq!(ppb(32, 64, 400e9), 32.0 * 64.0 * 8.0 / 400e9);
        assert!((ppb(32, 64, 400e9) - 40.96e-9).abs() < 1e-21);
        assert!((ppb(32, 4096, 400e9) - 2621.44e-9).abs() < 1e-18);
    }

    #[test]
    fn nearest_rank() {
        assert_eq!(percentile(&[100], 50.0), Some(100));
        assert_eq!(percentile(&[100], 99.0), Some(100));
        let v: Vec<u64> = (1..=10).collect();
        assert_eq!(percentile(&v, 50.0), Some(5));
        assert_eq!(percentile(&v, 90.0), Some(9));
        assert_eq!(percentile(&v, 99.0), Some(10));
        assert_eq!(percentile(&[], 50.0), None);
    }

    fn two_flow_log() -> RunLog {
        let flow = |name: &str| FlowLog { name: name.into(), prio: 1, ..FlowLog::default() };
        RunLog { cycles: 10, num_pus: 1, flows: vec![flow("a"), flow("b")], ..RunLog::default() }
    }

    #[test]
    fn single_kernel_percentiles() {
        let mut log = two_flow_log();
        log.flows[0].kernel_times = vec![100];
        log.flows[0].first_arrival = Some(3);
        log.flows[0].last_completion = Some(140);
        let r = summarize(&log);
        let k = r.flows[0].kernel_time.unwrap();
        assert_eq!((k.p50, k.p99), (100, 100));
        assert_eq!(r.flows[0].fct, Some(137));
        assert_eq!(r.flows[1].kernel_time, None);
    }

    #[test]
    fn swapping_single_pu_is_fair_on_average() {
        let mut log = two_flow_log();
        for c in 0..10u64 {
            let occ = if c % 2 == 0 { vec![1, 0] } else { vec![0, 1] };
            log.samples.push(Sample {
                cycle: c + 1,
                window_len: 1,
                occupancy: occ.clone(),
                occupancy_sum: occ.iter().map(|&o| o as u64).collect(),
                active_now: vec![true, true],
                active_window: vec![true, true],
                io_bytes: vec![0, 0],
            });
        }
        let r = summarize(&log);
        assert!(r.series.iter().all(|p| p.jain_instant == Some(0.5)));
        // a window spanning two cycles sees (0.5, 0.5)
        let mut wide = two_flow_log();
        wide.samples.push(Sample {
            cycle: 2,
            window_len: 2,
            occupancy: vec![0, 1],
            occupancy_sum: vec![1, 1],
            active_now: vec![true, true],
            active_window: vec![true, true],
            io_bytes: vec![0, 0],
        });
        let r = summarize(&wide);
        assert_eq!(r.series[0].jain_window, Some(1.0));
        assert_eq!(r.series[0].jain_instant, Some(0.5));
        assert_eq!(r.fairness, Some(1.0));
    }

    #[test]
    fn csv_has_versioned_headers() {
        let r = summarize(&two_flow_log());
        assert!(r.summary_csv().starts_with("# osmosim csv v1\nmetric,flow_id,value\ncycles,all,10\n"));
        for (name, body) in r.series_csvs() {
            assert!(name.starts_with("series_"));
            assert!(body.starts_with("# osmosim csv v1\ncycle,flow_id,value\n"));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn jain_bounded(x in prop::collection::vec(0.0f64..1e6, 1..16)) {
            if let Some(j) = jain(&x) {
                let n = x.len() as f64;
                prop_assert!(j >= 1.0 / n - 1e-12 && j <= 1.0 + 1e-12);
            } else {
                prop_assert!(x.iter().all(|&v| v == 0.0));
            }
        }

        #[test]
        fn jain_scale_invariant(x in prop::collection::vec(0.001f64..1e6, 1..16), c in 0.001f64..1e3) {
            let scaled: Vec<f64> = x.iter().map(|v| v * c).collect();
            prop_assert!((jain(&x).unwrap() - jain(&scaled).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn jain_permutation_invariant(mut x in prop::collection::vec(0.001f64..1e6, 1..16), seed in any::<u64>()) {
            let before = jain(&x).unwrap();
            let len = x.len();
            x.rotate_left((seed % len as u64) as usize);
            x.reverse();
            prop_assert!((before - jain(&x).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn ppb_is_linear(n in 1u32..64, p in 64u32..9000, k in 1u32..8) {
            let base = ppb(n, p, 400e9);
            prop_assert!((ppb(n * k, p, 400e9) - k as f64 * base).abs() <= 1e-9 * base);
            prop_assert!((ppb(n, p * k, 400e9) - k as f64 * base).abs() <= 1e-9 * base);
        }
    }
}
