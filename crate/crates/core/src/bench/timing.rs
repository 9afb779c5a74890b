use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{EatError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimingProtocol {
    pub warmup_examples: usize,
    pub measured_examples: usize,
    pub seeds: usize,
    pub base_seed: u64,
    pub batch_latency: usize,
    pub batch_throughput: usize,
}

impl Default for TimingProtocol {
    fn default() -> Self {
        TimingProtocol {
            warmup_examples: 50,
            measured_examples: 1000,
            seeds: 3,
            base_seed: 0,
            batch_latency: 1,
            batch_throughput: 32,
        }
    }
}

impl TimingProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.measured_examples == 0 || self.seeds == 0 || self.batch_latency == 0 || self.batch_throughput == 0 {
            return Err(EatError::invalid("timing counts must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    /// Mean per-example latency, averaged over seeds.
    pub latency_ms: f64,
    /// Standard deviation of the per-seed mean latencies.
    pub latency_std_ms: f64,
    pub per_seed_latency_ms: Vec<f64>,
    /// Examples per second running batches through the per-example loop.
    pub throughput: f64,
    /// Timed calls per seed, warmup excluded.
    pub measured_calls: Vec<usize>,
    /// Whether the dev set was too small and examples were drawn with
    /// replacement.
    pub with_replacement: bool,
}

fn draw(n: usize, count: usize, rng: &mut ChaCha8Rng, with_replacement: bool) -> Vec<usize> {
    if with_replacement {
        (0..count).map(|_| rng.random_range(0..n)).collect()
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        idx.truncate(count);
        idx
    }
}

/// Wall-clock latency and loop throughput of `infer`. Only the `infer` call
/// is inside the clock; calls run strictly one after another.
pub fn time_inference<F>(infer: F, dev: &[Example], protocol: &TimingProtocol) -> Result<TimingReport>
where
    F: Fn(&[u32]) -> Result<()>,
{
    protocol.validate()?;
    if dev.is_empty() {
        return Err(EatError::invalid("cannot time an empty dev set"));
    }
    let needed = protocol.warmup_examples + protocol.measured_examples;
    let with_replacement = dev.len() < needed;

    let mut per_seed = Vec::with_capacity(protocol.seeds);
    let mut throughputs = Vec::with_capacity(protocol.seeds);
    let mut measured_calls = Vec::with_capacity(protocol.seeds);
    for s in 0..protocol.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(protocol.base_seed.wrapping_add(s as u64));
        let order = draw(dev.len(), needed, &mut rng, with_replacement);
        let (warmup, measured) = order.split_at(protocol.warmup_examples);
        for &i in warmup {
            infer(&dev[i].ids)?;
        }

        let mut calls = 0;
        let mut elapsed = 0.0;
        for chunk in measured.chunks(protocol.batch_latency) {
            let start = Instant::now();
            for &i in chunk {
                infer(&dev[i].ids)?;
            }
            elapsed += start.elapsed().as_secs_f64();
            calls += chunk.len();
        }
        per_seed.push(elapsed * 1e3 / calls as f64);
        measured_calls.push(calls);

        let mut batch_time = 0.0;
        for chunk in measured.chunks(protocol.batch_throughput) {
            let start = Instant::now();
            for &i in chunk {
                infer(&dev[i].ids)?;
            }
            batch_time += start.elapsed().as_secs_f64();
        }
        throughputs.push(measured.len() as f64 / batch_time.max(f64::MIN_POSITIVE));
    }
    let n = per_seed.len() as f64;
    let mean = per_seed.iter().sum::<f64>() / n;
    let std = (per_seed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(TimingReport {
        latency_ms: mean,
        latency_std_ms: std,
        per_seed_latency_ms: per_seed,
        throughput: throughputs.iter().sum::<f64>() / n,
        measured_calls,
        with_replacement,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;
    use std::time::Duration;

    use crate::data::{Difficulty, CLS_ID};

    fn dev(n: usize) -> Vec<Example> {
        (0..n)
            .map(|i| Example {
                ids: vec![CLS_ID, 2 + i as u32],
                label: 0,
                difficulty: Difficulty::Easy,
            })
            .collect()
    }

    #[test]
    fn warmup_is_excluded_from_the_measured_count() {
        let calls = Cell::new(0usize);
        let protocol = TimingProtocol::default();
        let report = time_inference(
            |_| {
                calls.set(calls.get() + 1);
                Ok(())
            },
            &dev(1200),
            &protocol,
        )
        .unwrap();
        assert_eq!(report.measured_calls, vec![1000; 3]);
        assert!(!report.with_replacement);
        // warmup + latency pass + throughput pass, per seed
        assert_eq!(calls.get(), 3 * (50 + 1000 + 1000));
    }

    #[test]
    fn small_dev_set_samples_with_replacement() {
        let protocol = TimingProtocol {
            measured_examples: 40,
            warmup_examples: 5,
            ..TimingProtocol::default()
        };
        let report = time_inference(|_| Ok(()), &dev(10), &protocol).unwrap();
        assert!(report.with_replacement);
        assert_eq!(report.measured_calls, vec![40; 3]);
    }

    #[test]
    fn injected_sleep_bounds_latency() {
        let protocol = TimingProtocol {
            warmup_examples: 2,
            measured_examples: 10,
            seeds: 2,
            ..TimingProtocol::default()
        };
        let report = time_inference(
            |_| {
                std::thread::sleep(Duration::from_millis(1));
                Ok(())
            },
            &dev(20),
            &protocol,
        )
        .unwrap();
        assert!(report.latency_ms >= 1.0, "{report:?}");
        assert!(report.throughput <= 1000.0);
    }

    #[test]
    fn errors_propagate() {
        let r = time_inference(|_| Err(EatError::invalid("boom")), &dev(5), &TimingProtocol::default());
        assert!(r.is_err());
    }
}
