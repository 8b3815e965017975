//! First-order Markov click logs for smoke tests and toy benchmarks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::{RawEvent, SECONDS_PER_DAY};

#[derive(Clone, Debug, PartialEq)]
pub struct MarkovSpec {
    pub items: usize,
    pub sessions: usize,
    /// Probability of following an item's dominant successor.
    pub dominant: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub days: i64,
    pub seed: u64,
}

impl Default for MarkovSpec {
    fn default() -> Self {
        MarkovSpec {
            items: 30,
            sessions: 1500,
            dominant: 0.6,
            min_len: 3,
            max_len: 10,
            days: 30,
            seed: 0,
        }
    }
}

impl MarkovSpec {
    /// Each item's dominant successor: one random cycle over all items, so
    /// no item is its own successor.
    pub fn successors(&self) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5EED);
        let mut order: Vec<usize> = (0..self.items).collect();
        order.shuffle(&mut rng);
        let mut next = vec![0; self.items];
        for (k, &i) in order.iter().enumerate() {
            next[i] = order[(k + 1) % self.items];
        }
        next
    }

    /// Best achievable HR@K under the generating process.
    pub fn oracle_hit_rate(&self, k: usize) -> f64 {
        let others = (self.items - 1) as f64;
        let rest = (1.0 - self.dominant) / others;
        (self.dominant + rest * (k.saturating_sub(1)) as f64).min(1.0)
    }

    /// Events with ids `s<n>` / `i<n>`, one click per minute inside each session.
    pub fn generate(&self) -> Vec<RawEvent> {
        assert!(self.items >= 2 && self.min_len >= 1 && self.min_len <= self.max_len);
        let succ = self.successors();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut events = Vec::new();
        for s in 0..self.sessions {
            let len = rng.gen_range(self.min_len..=self.max_len);
            let start = rng.gen_range(0..self.days * SECONDS_PER_DAY - 3600);
            let mut cur = rng.gen_range(0..self.items);
            for k in 0..len {
                events.push(RawEvent {
                    session_id: format!("s{s}"),
                    item_id: format!("i{cur}"),
                    timestamp: start + 60 * k as i64,
                });
                cur = if rng.gen::<f64>() < self.dominant {
                    succ[cur]
                } else {
                    let j = rng.gen_range(0..self.items - 1);
                    if j >= succ[cur] {
                        j + 1
                    } else {
                        j
                    }
                };
            }
        }
        events
    }

    pub fn to_csv(events: &[RawEvent]) -> String {
        let mut out = String::from("session_id,item_id,timestamp\n");
        for e in events {
            out.push_str(&format!("{},{},{}\n", e.session_id, e.item_id, e.timestamp));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn successors_form_a_cycle() {
        let spec = MarkovSpec::default();
        let succ = spec.successors();
        let mut seen = vec![false; spec.items];
        let mut cur = 0;
        for _ in 0..spec.items {
            assert!(!seen[cur]);
            seen[cur] = true;
            cur = succ[cur];
        }
        assert_eq!(cur, 0);
    }

    #[test]
    fn empirical_dominance() {
        let spec = MarkovSpec { seed: 4, ..MarkovSpec::default() };
        let succ = spec.successors();
        let ev = spec.generate();
        let (mut hits, mut total) = (0, 0);
        for w in ev.windows(2).filter(|w| w[0].session_id == w[1].session_id) {
            let a: usize = w[0].item_id[1..].parse().unwrap();
            let b: usize = w[1].item_id[1..].parse().unwrap();
            hits += (succ[a] == b) as usize;
            total += 1;
        }
        let p = hits as f64 / total as f64;
        assert!((p - 0.6).abs() < 0.03, "{p}");
        assert_eq!(ev, spec.generate());
    }

    #[test]
    fn oracle_rate() {
        let spec = MarkovSpec::default();
        assert!((spec.oracle_hit_rate(1) - 0.6).abs() < 1e-12);
        assert!((spec.oracle_hit_rate(10) - (0.6 + 0.4 * 9.0 / 29.0)).abs() < 1e-12);
    }
}
