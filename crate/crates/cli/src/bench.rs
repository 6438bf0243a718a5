//! Datasets x variants x seeds, appended to `results.csv` one run at a time.
//! Rerunning skips every (dataset, variant, seed) already present.

use std::collections::{HashSet, VecDeque};
use std::path::Path;
use std::sync::Mutex;

use qclmix::data::{self, Dataset, ManifestEntry};
use qclmix::metrics::Metrics;
use qclmix::model::Variant;
use qclmix::train::TrainConfig;
use qclmix::Result;

use crate::run::{self, RunRecord};

pub const RESULTS_HEADER: &str = "dataset,model,seed,metric,value\n";
const FAILURES_HEADER: &str = "dataset,model,seed,error\n";

#[derive(Debug, Default, PartialEq, Eq)]
pub struct Summary {
    pub trained: usize,
    pub skipped: usize,
    pub failed: usize,
}

type Key = (String, String, u64);

fn completed(path: &Path) -> Result<HashSet<Key>> {
    let mut done = HashSet::new();
    let Ok(text) = std::fs::read_to_string(path) else {
        return Ok(done);
    };
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if let [d, m, s, ..] = f[..] {
            if let Ok(seed) = s.parse() {
                done.insert((d.to_string(), m.to_string(), seed));
            }
        }
    }
    Ok(done)
}

fn result_rows(key: &Key, m: &Metrics) -> String {
    Metrics::NAMES
        .iter()
        .zip(m.values())
        .map(|(name, v)| format!("{},{},{},{name},{v}\n", key.0, key.1, key.2))
        .collect()
}

pub fn run(
    entries: &[ManifestEntry],
    variants: &[Variant],
    seeds: &[u64],
    base: &TrainConfig,
    out: &Path,
    jobs: usize,
) -> Result<Summary> {
    std::fs::create_dir_all(out)?;
    let results = out.join("results.csv");
    let runs = out.join("runs.csv");
    let failures = out.join("failures.csv");
    let done = completed(&results)?;

    let mut summary = Summary::default();
    let mut queue = VecDeque::new();
    for e in entries {
        for &v in variants {
            for &s in seeds {
                let key = (e.name.clone(), v.name().to_string(), s);
                if done.contains(&key) {
                    summary.skipped += 1;
                } else {
                    queue.push_back((e, v, s, key));
                }
            }
        }
    }
    log::info!(
        "bench: {} runs to do, {} already in {}",
        queue.len(),
        summary.skipped,
        results.display()
    );

    // each dataset is parsed once, on first use
    let cache: Mutex<Vec<(String, std::result::Result<std::sync::Arc<Dataset>, String>)>> =
        Mutex::new(Vec::new());
    let load = |e: &ManifestEntry| {
        let mut c = cache.lock().unwrap();
        if let Some((_, d)) = c.iter().find(|(n, _)| *n == e.name) {
            return d.clone();
        }
        let d = data::load_csv(&e.path, &e.label)
            .map(|mut ds| {
                ds.name = e.name.clone();
                std::sync::Arc::new(ds)
            })
            .map_err(|err| err.to_string());
        c.push((e.name.clone(), d.clone()));
        d
    };

    let queue = Mutex::new(queue);
    let tally = Mutex::new((0usize, 0usize));
    let worker = || -> Result<()> {
        loop {
            let Some((e, v, s, key)) = queue.lock().unwrap().pop_front() else {
                return Ok(());
            };
            let mut cfg = base.clone();
            cfg.ablation = v.ablation();
            cfg.seed = s;
            let dir = out.join("runs").join(&e.name).join(v.name()).join(format!("seed{s}"));
            let outcome = load(e).and_then(|ds| {
                run::train_run(&ds, &e.label, &cfg, &dir).map_err(|err| err.to_string())
            });
            match outcome {
                Ok(rec) => {
                    log::info!(
                        "{} {} seed {}: maF1 {:.4} ({:.1}s)",
                        key.0,
                        key.1,
                        s,
                        rec.metrics.macro_f1,
                        rec.wall_time
                    );
                    run::append_locked(&runs, RunRecord::HEADER, &rec.to_csv())?;
                    run::append_locked(&results, RESULTS_HEADER, &result_rows(&key, &rec.metrics))?;
                    tally.lock().unwrap().0 += 1;
                }
                Err(msg) => {
                    log::error!("{} {} seed {}: {msg}", key.0, key.1, s);
                    let clean = msg.replace(['\n', ','], " ");
                    let line = format!("{},{},{},{clean}\n", key.0, key.1, s);
                    run::append_locked(&failures, FAILURES_HEADER, &line)?;
                    tally.lock().unwrap().1 += 1;
                }
            }
        }
    };
    std::thread::scope(|scope| -> Result<()> {
        let handles: Vec<_> = (0..jobs.max(1)).map(|_| scope.spawn(&worker)).collect();
        for h in handles {
            h.join().expect("bench worker panicked")?;
        }
        Ok(())
    })?;
    let (trained, failed) = *tally.lock().unwrap();
    summary.trained = trained;
    summary.failed = failed;
    Ok(summary)
}
