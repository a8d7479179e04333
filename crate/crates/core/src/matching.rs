//! Matching engine: classifies ingress packets onto FMQs and applies FIFO
//! admission.

use crate::flows::{FlowTuple, Fmq, MatchRule};

#[derive(Debug, Clone, Default)]
pub struct MatchTable {
    rules: Vec<(MatchRule, usize)>,
    pub unmatched: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admission {
    Admitted,
    Dropped,
}

impl MatchTable {
    /// Inserts a rule; fails with the conflicting FMQ id on overlap.
    pub fn insert(&mut self, rule: MatchRule, fmq_id: usize) -> Result<(), usize> {
        if let Some((_, id)) = self.rules.iter().find(|(r, _)| r.overlaps(&rule)) {
            return Err(*id);
        }
        self.rules.push((rule, fmq_id));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// Returns the matching FMQ; unmatched packets are counted and dropped
    /// from the simulation.
    pub fn classify(&mut self, tuple: &FlowTuple) -> Option<usize> {
        let hit = self.rules.iter().find(|(r, _)| r.matches(tuple)).map(|(_, id)| *id);
        if hit.is_none() {
            self.unmatched += 1;
        }
        hit
    }
}

/// Appends `descriptor` if the FIFO has room; otherwise drops the newest
/// packet and marks congestion.
pub fn admit(fmq: &mut Fmq, descriptor: u64) -> Admission {
    if fmq.fifo.len() < fmq.capacity as usize {
        fmq.fifo.push_back(descriptor);
        Admission::Admitted
    } else {
        fmq.drops += 1;
        fmq.congestion_marks += 1;
        Admission::Dropped
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::Proto;
    use std::net::Ipv4Addr;

    fn udp(dst: [u8; 4], port: u16) -> FlowTuple {
        FlowTuple {
            src_ip: Ipv4Addr::new(1, 2, 3, 4),
            dst_ip: Ipv4Addr::from(dst),
            src_port: 999,
            dst_port: port,
            proto: Proto::Udp,
        }
    }

    #[test]
    fn three_tuple_direct_match() {
        let mut t = MatchTable::default();
        t.insert(MatchRule::ThreeTuple { dst_ip: Ipv4Addr::new(10, 0, 0, 1), dst_port: 4242, proto: Proto::Udp }, 3)
            .unwrap();
        assert_eq!(t.classify(&udp([10, 0, 0, 1], 4242)), Some(3));
        assert_eq!(t.unmatched, 0);
    }

    #[test]
    fn no_rule_is_no_match() {
        let mut t = MatchTable::default();
        t.insert(MatchRule::ThreeTuple { dst_ip: Ipv4Addr::new(10, 0, 0, 1), dst_port: 4242, proto: Proto::Udp }, 0)
            .unwrap();
        assert_eq!(t.classify(&udp([10, 0, 0, 2], 4242)), None);
        assert_eq!(t.unmatched, 1);
    }

    #[test]
    fn five_tuple_requires_every_field() {
        let tcp = FlowTuple { proto: Proto::Tcp, ..udp([10, 0, 0, 1], 80) };
        let mut t = MatchTable::default();
        t.insert(MatchRule::FiveTuple { tuple: tcp }, 1).unwrap();
        assert_eq!(t.classify(&tcp), Some(1));
        assert_eq!(t.classify(&FlowTuple { src_port: 1000, ..tcp }), None);
        assert_eq!(t.classify(&FlowTuple { src_ip: Ipv4Addr::new(1, 2, 3, 5), ..tcp }), None);
        assert_eq!(t.classify(&FlowTuple { proto: Proto::Udp, ..tcp }), None);
    }

    #[test]
    fn overlapping_insert_rejected() {
        let r = MatchRule::ThreeTuple { dst_ip: Ipv4Addr::new(10, 0, 0, 1), dst_port: 1, proto: Proto::Udp };
        let mut t = MatchTable::default();
        t.insert(r, 0).unwrap();
        assert_eq!(t.insert(r, 1), Err(0));
    }

    #[test]
    fn admit_into_empty_fifo() {
        let mut f = Fmq::new(1, 256);
        assert_eq!(admit(&mut f, 7), Admission::Admitted);
        assert_eq!(f.fifo.len(), 1);
    }

    #[test]
    fn full_fifo_drops_and_marks() {
        let mut f = Fmq::new(1, 2);
        admit(&mut f, 1);
        admit(&mut f, 2);
        assert_eq!(admit(&mut f, 3), Admission::Dropped);
        assert_eq!((f.drops, f.congestion_marks), (1, 1));
        assert_eq!(f.fifo.iter().copied().collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn burst_over_capacity_drops_exactly_k() {
        for (cap, k) in [(256u32, 0u64), (256, 1), (256, 17), (4, 100)] {
            let mut f = Fmq::new(1, cap);
            let mut dropped = 0;
            for d in 0..cap as u64 + k {
                if admit(&mut f, d) == Admission::Dropped {
                    dropped += 1;
                }
            }
            assert_eq!(dropped, k);
            assert_eq!(f.fifo.len(), cap as usize);
            // FIFO keeps the earliest arrivals in order
            assert!(f.fifo.iter().copied().eq(0..cap as u64));
        }
    }
}
