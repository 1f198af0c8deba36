//! The experiment record stored in every output, and the worker pool.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use mixlift::entropic::NiceConstants;
use serde::Serialize;
use serde_json::Value;

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentConfig {
    pub command: String,
    pub spec: Option<String>,
    pub seed: u64,
    pub n_grid: Vec<usize>,
    pub r: Option<usize>,
    pub big_l: Option<usize>,
    pub m: Option<u64>,
    pub constants: Option<NiceConstants>,
    pub out_dir: String,
    pub workers: usize,
    /// Command-specific settings.
    pub params: BTreeMap<String, Value>,
}

impl ExperimentConfig {
    pub fn new(command: &str, out_dir: String, seed: u64, workers: usize) -> Self {
        Self {
            command: command.to_string(),
            spec: None,
            seed,
            n_grid: Vec::new(),
            r: None,
            big_l: None,
            m: None,
            constants: None,
            out_dir,
            workers,
            params: BTreeMap::new(),
        }
    }

    pub fn param(&mut self, key: &str, value: impl Serialize) {
        self.params.insert(key.to_string(), serde_json::to_value(value).expect("param serializes"));
    }
}

/// Apply `f` to every item on `workers` threads; results keep the input order.
/// Each task must derive its randomness from its own index.
pub fn parallel_map<T, R, F>(items: Vec<T>, workers: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    let count = items.len();
    let slots: Vec<Mutex<Option<T>>> = items.into_iter().map(|t| Mutex::new(Some(t))).collect();
    let out: Vec<Mutex<Option<R>>> = (0..count).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, count.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= count {
                    break;
                }
                let item = slots[i].lock().expect("slot").take().expect("taken once");
                let r = f(item);
                *out[i].lock().expect("slot") = Some(r);
            });
        }
    });
    out.into_iter().map(|m| m.into_inner().expect("slot").expect("filled")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_kept_for_any_pool_size() {
        let items: Vec<u64> = (0..50).collect();
        let one = parallel_map(items.clone(), 1, |x| x * x);
        let four = parallel_map(items, 4, |x| x * x);
        assert_eq!(one, four);
        assert_eq!(one[7], 49);
    }
}
