//! Per-stage wall time, memory and CPU-proxy recording.
//!
//! The CPU proxy of a stage is busy time over wall time. Busy time is either
//! supplied by the caller (summed worker time for fanned-out work) or the
//! calling thread's CPU time. Memory is the process resident set size, read
//! at stage boundaries and polled in the background while stages are open.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::error::{Error, Result, Stage};

pub const MEMORY_POLL_INTERVAL: Duration = Duration::from_millis(100);

/// Resident set size of this process in bytes, or 0 where unavailable.
pub fn resident_set_bytes() -> u64 {
    #[cfg(target_os = "linux")]
    {
        let page = unsafe { libc::sysconf(libc::_SC_PAGESIZE) };
        if let Ok(statm) = std::fs::read_to_string("/proc/self/statm") {
            if let Some(pages) = statm.split_whitespace().nth(1).and_then(|p| p.parse::<u64>().ok()) {
                return pages * page.max(0) as u64;
            }
        }
    }
    0
}

/// CPU time consumed by the calling thread, in seconds.
pub fn thread_cpu_seconds() -> Option<f64> {
    #[cfg(unix)]
    {
        let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
        let rc = unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
        if rc == 0 {
            return Some(ts.tv_sec as f64 + ts.tv_nsec as f64 * 1e-9);
        }
    }
    None
}

struct MemoryPoller {
    samples: Arc<Mutex<Vec<(Instant, u64)>>>,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl MemoryPoller {
    fn start(interval: Duration) -> Self {
        let samples = Arc::new(Mutex::new(Vec::new()));
        let stop = Arc::new(AtomicBool::new(false));
        let handle = {
            let samples = Arc::clone(&samples);
            let stop = Arc::clone(&stop);
            std::thread::Builder::new()
                .name("rss-poller".into())
                .spawn(move || {
                    while !stop.load(Ordering::Relaxed) {
                        let rss = resident_set_bytes();
                        samples.lock().expect("poller samples").push((Instant::now(), rss));
                        std::thread::park_timeout(interval);
                    }
                })
                .ok()
        };
        Self { samples, stop, handle }
    }

    fn peak_between(&self, from: Instant, to: Instant) -> u64 {
        self.samples
            .lock()
            .expect("poller samples")
            .iter()
            .filter(|(t, _)| *t >= from && *t <= to)
            .map(|(_, m)| *m)
            .max()
            .unwrap_or(0)
    }
}

impl Drop for MemoryPoller {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            h.thread().unpark();
            let _ = h.join();
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StageEvent {
    Begin { stage: Stage, at: Instant },
    /// `busy_s` overrides the thread-CPU busy measurement.
    End { stage: Stage, at: Instant, busy_s: Option<f64> },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageSample {
    pub stage: Stage,
    pub wall_s: f64,
    pub peak_memory_bytes: u64,
    pub cpu_proxy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageSummary {
    pub stage: Stage,
    pub samples: usize,
    pub mean_time_s: f64,
    pub peak_memory_bytes: u64,
    pub mean_cpu_proxy: f64,
}

struct OpenStage {
    stage: Stage,
    at: Instant,
    rss: u64,
    cpu: Option<f64>,
}

#[derive(Default)]
pub struct MetricsRecorder {
    open: Vec<OpenStage>,
    samples: Vec<StageSample>,
    poller: Option<MemoryPoller>,
}

impl MetricsRecorder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Recorder with a background RSS poller.
    pub fn with_memory_polling(interval: Duration) -> Self {
        Self {
            poller: Some(MemoryPoller::start(interval)),
            ..Self::default()
        }
    }

    pub fn record_stage(&mut self, event: StageEvent) -> Result<Option<StageSample>> {
        match event {
            StageEvent::Begin { stage, at } => {
                self.open.push(OpenStage {
                    stage,
                    at,
                    rss: resident_set_bytes(),
                    cpu: thread_cpu_seconds(),
                });
                Ok(None)
            }
            StageEvent::End { stage, at, busy_s } => {
                let top = self.open.pop().ok_or_else(|| {
                    Error::Instrumentation(format!("end of {stage} without a matching begin"))
                })?;
                if top.stage != stage {
                    let msg = format!("end of {stage} while {} is open", top.stage);
                    self.open.push(top);
                    return Err(Error::Instrumentation(msg));
                }
                if at < top.at {
                    return Err(Error::Instrumentation(format!("{stage} ends before it begins")));
                }
                let wall_s = (at - top.at).as_secs_f64();
                let busy = busy_s.or_else(|| Some(thread_cpu_seconds()? - top.cpu?)).unwrap_or(wall_s);
                let polled = self.poller.as_ref().map_or(0, |p| p.peak_between(top.at, at));
                let sample = StageSample {
                    stage,
                    wall_s,
                    peak_memory_bytes: top.rss.max(resident_set_bytes()).max(polled),
                    cpu_proxy: if wall_s > 0.0 { busy / wall_s } else { 0.0 },
                };
                self.samples.push(sample);
                Ok(Some(sample))
            }
        }
    }

    pub fn begin(&mut self, stage: Stage) -> Result<()> {
        self.record_stage(StageEvent::Begin {
            stage,
            at: Instant::now(),
        })
        .map(|_| ())
    }

    pub fn end(&mut self, stage: Stage) -> Result<StageSample> {
        self.end_with_busy(stage, None)
    }

    pub fn end_with_busy(&mut self, stage: Stage, busy_s: Option<f64>) -> Result<StageSample> {
        self.record_stage(StageEvent::End {
            stage,
            at: Instant::now(),
            busy_s,
        })
        .map(|s| s.expect("end yields a sample"))
    }

    pub fn samples(&self) -> &[StageSample] {
        &self.samples
    }

    /// One row per recorded stage, in training-stage order.
    pub fn summarize(&self) -> Result<Vec<StageSummary>> {
        if let Some(open) = self.open.last() {
            return Err(Error::Instrumentation(format!("stage {} never ended", open.stage)));
        }
        let mut by_stage: BTreeMap<Stage, Vec<&StageSample>> = BTreeMap::new();
        for s in &self.samples {
            by_stage.entry(s.stage).or_default().push(s);
        }
        Ok(by_stage
            .into_iter()
            .map(|(stage, v)| {
                let n = v.len() as f64;
                StageSummary {
                    stage,
                    samples: v.len(),
                    mean_time_s: v.iter().map(|s| s.wall_s).sum::<f64>() / n,
                    peak_memory_bytes: v.iter().map(|s| s.peak_memory_bytes).max().unwrap_or(0),
                    mean_cpu_proxy: v.iter().map(|s| s.cpu_proxy).sum::<f64>() / n,
                }
            })
            .collect())
    }
}
