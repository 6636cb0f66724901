use serde::{Deserialize, Serialize};
use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

/// Live partial result of a running measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Partial {
    Spectrum { freqs: Vec<f64>, contrast: Vec<f64>, sweep: u32 },
    Pulsed { params: Vec<f64>, signal: Vec<f64>, alternate: Vec<f64>, snr: Option<f64>, repetition: u32 },
    ScanRow { row: usize, values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub run_id: u64,
    /// Strictly increasing per run.
    pub seq: u64,
    pub partial: Partial,
}

struct Queue {
    frames: Mutex<(VecDeque<Frame>, u64)>,
    cv: Condvar,
    capacity: usize,
}

/// Receiving end of a bus subscription.
pub struct Subscription {
    queue: Arc<Queue>,
}

impl Subscription {
    pub fn try_recv(&self) -> Option<Frame> {
        self.queue.frames.lock().unwrap().0.pop_front()
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Option<Frame> {
        let g = self.queue.frames.lock().unwrap();
        let (mut g, _) = self.queue.cv.wait_timeout_while(g, timeout, |q| q.0.is_empty()).unwrap();
        g.0.pop_front()
    }

    /// Frames discarded because this subscriber lagged.
    pub fn dropped(&self) -> u64 {
        self.queue.frames.lock().unwrap().1
    }
}

/// Fan-out of partial results to bounded subscriber queues.
pub struct LiveBus {
    capacity: usize,
    subscribers: Mutex<Vec<std::sync::Weak<Queue>>>,
    seqs: Mutex<HashMap<u64, u64>>,
}

impl LiveBus {
    pub fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(1), subscribers: Mutex::new(Vec::new()), seqs: Mutex::new(HashMap::new()) }
    }

    pub fn subscribe(&self) -> Subscription {
        let queue = Arc::new(Queue { frames: Mutex::new((VecDeque::new(), 0)), cv: Condvar::new(), capacity: self.capacity });
        self.subscribers.lock().unwrap().push(Arc::downgrade(&queue));
        Subscription { queue }
    }

    /// Never blocks on slow subscribers: a full queue loses its oldest frame.
    pub fn publish(&self, run_id: u64, partial: Partial) {
        let seq = {
            let mut s = self.seqs.lock().unwrap();
            let n = s.entry(run_id).or_insert(0);
            *n += 1;
            *n
        };
        let frame = Frame { run_id, seq, partial };
        let mut subs = self.subscribers.lock().unwrap();
        subs.retain(|w| w.strong_count() > 0);
        for q in subs.iter().filter_map(|w| w.upgrade()) {
            let mut g = q.frames.lock().unwrap();
            if g.0.len() >= q.capacity {
                g.0.pop_front();
                g.1 += 1;
            }
            g.0.push_back(frame.clone());
            q.cv.notify_all();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(k: usize) -> Partial {
        Partial::ScanRow { row: k, values: vec![k as f64] }
    }

    #[test]
    fn fan_out_same_sequence() {
        let bus = LiveBus::new(16);
        let a = bus.subscribe();
        let b = bus.subscribe();
        for k in 0..5 {
            bus.publish(3, row(k));
        }
        let sa: Vec<u64> = std::iter::from_fn(|| a.try_recv()).map(|f| f.seq).collect();
        let sb: Vec<u64> = std::iter::from_fn(|| b.try_recv()).map(|f| f.seq).collect();
        assert_eq!(sa, vec![1, 2, 3, 4, 5]);
        assert_eq!(sa, sb);
    }

    #[test]
    fn lagging_subscriber_drops_oldest() {
        let bus = LiveBus::new(3);
        let s = bus.subscribe();
        for k in 0..10 {
            bus.publish(1, row(k));
        }
        let seqs: Vec<u64> = std::iter::from_fn(|| s.try_recv()).map(|f| f.seq).collect();
        assert_eq!(seqs, vec![8, 9, 10]);
        assert_eq!(s.dropped(), 7);
    }
}
