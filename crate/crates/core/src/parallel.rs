//! Persistent worker pool with stage-start broadcast and end-of-stage barrier.
//!
//! Workers are spawned once and sleep on a condition variable between
//! stages. `execute_stage` wakes all of them at once, each worker runs a
//! static contiguous block of the stage's items, and the call returns only
//! after every worker has reported back. Items own disjoint outputs, so a
//! stage produces the same bits for any worker count.

use std::any::Any;
use std::ops::Range;
use std::panic::{self, AssertUnwindSafe};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, JoinHandle, ThreadId};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StageError {
    #[error("worker {worker} panicked: {message}")]
    WorkerPanic { worker: usize, message: String },
}

/// Static partition of a stage's items over the pool's workers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StagePlan {
    pub item_count: usize,
    pub worker_count: usize,
}

impl StagePlan {
    pub fn new(item_count: usize, worker_count: usize) -> Self {
        assert!(worker_count >= 1, "a stage needs at least one worker");
        StagePlan {
            item_count,
            worker_count,
        }
    }

    /// Items handled by `worker`; blocks are contiguous and ascending.
    pub fn block(&self, worker: usize) -> Range<usize> {
        let n = self.item_count;
        let w = self.worker_count;
        (worker * n / w)..((worker + 1) * n / w)
    }
}

type Job = dyn Fn(usize) + Sync;

// Lifetime-erased pointer to the current stage's job. Only dereferenced
// while `execute_stage` is blocked waiting for the barrier.
#[derive(Clone, Copy)]
struct JobPtr(*const Job);
unsafe impl Send for JobPtr {}

struct State {
    generation: u64,
    job: Option<JobPtr>,
    remaining: usize,
    shutdown: bool,
    failures: Vec<(usize, String)>,
    stages_seen: Vec<u64>,
}

struct Shared {
    state: Mutex<State>,
    start: Condvar,
    done: Condvar,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }
}

pub struct WorkerPool {
    shared: Arc<Shared>,
    handles: Vec<JoinHandle<()>>,
    thread_ids: Vec<ThreadId>,
    stage_lock: Mutex<()>,
}

impl WorkerPool {
    /// Spawns `worker_count` persistent workers; 0 means hardware concurrency.
    pub fn new(worker_count: usize) -> Self {
        let worker_count = if worker_count == 0 {
            thread::available_parallelism().map_or(1, |n| n.get())
        } else {
            worker_count
        };
        let shared = Arc::new(Shared {
            state: Mutex::new(State {
                generation: 0,
                job: None,
                remaining: 0,
                shutdown: false,
                failures: Vec::new(),
                stages_seen: vec![0; worker_count],
            }),
            start: Condvar::new(),
            done: Condvar::new(),
        });
        let handles: Vec<_> = (0..worker_count)
            .map(|id| {
                let shared = Arc::clone(&shared);
                thread::Builder::new()
                    .name(format!("ignet-worker-{id}"))
                    .spawn(move || worker_loop(id, &shared))
                    .expect("failed to spawn worker thread")
            })
            .collect();
        let thread_ids = handles.iter().map(|h| h.thread().id()).collect();
        WorkerPool {
            shared,
            handles,
            thread_ids,
            stage_lock: Mutex::new(()),
        }
    }

    pub fn worker_count(&self) -> usize {
        self.handles.len()
    }

    pub fn plan(&self, item_count: usize) -> StagePlan {
        StagePlan::new(item_count, self.worker_count())
    }

    /// Thread identities of the workers; fixed for the pool's lifetime.
    pub fn thread_ids(&self) -> &[ThreadId] {
        &self.thread_ids
    }

    /// Number of stages each worker has taken part in.
    pub fn stages_per_worker(&self) -> Vec<u64> {
        self.shared.lock().stages_seen.clone()
    }

    /// Runs `work(item)` for every item of the plan exactly once and waits
    /// for all workers to finish. A panicking item is reported after the
    /// barrier; the remaining workers still complete their blocks.
    pub fn execute_stage(
        &self,
        plan: StagePlan,
        work: &(dyn Fn(usize) + Sync),
    ) -> Result<(), StageError> {
        assert_eq!(
            plan.worker_count,
            self.worker_count(),
            "plan was built for a different pool size"
        );
        if plan.item_count == 0 {
            return Ok(());
        }
        let block_job = move |worker: usize| {
            for item in plan.block(worker) {
                work(item);
            }
        };
        self.run(&block_job)
    }

    /// Maps `f` over `0..item_count` in parallel, returning results in item order.
    pub fn map_collect<R, F>(&self, item_count: usize, f: F) -> Result<Vec<R>, StageError>
    where
        R: Send,
        F: Fn(usize) -> R + Sync,
    {
        let plan = self.plan(item_count);
        let slots: Vec<Mutex<Vec<R>>> = (0..plan.worker_count)
            .map(|_| Mutex::new(Vec::new()))
            .collect();
        if item_count > 0 {
            let job = |worker: usize| {
                let out: Vec<R> = plan.block(worker).map(&f).collect();
                *slots[worker].lock().unwrap_or_else(|e| e.into_inner()) = out;
            };
            self.run(&job)?;
        }
        Ok(slots
            .into_iter()
            .flat_map(|s| s.into_inner().unwrap_or_else(|e| e.into_inner()))
            .collect())
    }

    fn run<'a>(&self, job: &'a (dyn Fn(usize) + Sync + 'a)) -> Result<(), StageError> {
        let _stage = self.stage_lock.lock().unwrap_or_else(|e| e.into_inner());
        // SAFETY: the pointer is cleared before this function returns, and it
        // does not return until every worker has finished calling the job.
        let erased: *const Job = unsafe {
            std::mem::transmute::<&'a (dyn Fn(usize) + Sync + 'a), &'static Job>(job)
        };
        let mut state = self.shared.lock();
        state.job = Some(JobPtr(erased));
        state.remaining = self.worker_count();
        state.failures.clear();
        state.generation += 1;
        self.shared.start.notify_all();
        while state.remaining > 0 {
            state = self
                .shared
                .done
                .wait(state)
                .unwrap_or_else(|e| e.into_inner());
        }
        state.job = None;
        match state.failures.iter().min_by_key(|(w, _)| *w) {
            Some((worker, message)) => Err(StageError::WorkerPanic {
                worker: *worker,
                message: message.clone(),
            }),
            None => Ok(()),
        }
    }
}

impl Drop for WorkerPool {
    fn drop(&mut self) {
        {
            let mut state = self.shared.lock();
            state.shutdown = true;
            self.shared.start.notify_all();
        }
        for handle in self.handles.drain(..) {
            let _ = handle.join();
        }
    }
}

impl std::fmt::Debug for WorkerPool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WorkerPool")
            .field("worker_count", &self.worker_count())
            .finish()
    }
}

fn worker_loop(id: usize, shared: &Shared) {
    let mut seen = 0u64;
    loop {
        let job = {
            let mut state = shared.lock();
            while state.generation == seen && !state.shutdown {
                state = shared.start.wait(state).unwrap_or_else(|e| e.into_inner());
            }
            if state.shutdown {
                return;
            }
            seen = state.generation;
            state.stages_seen[id] += 1;
            state.job.expect("stage started without a job")
        };
        // SAFETY: see `WorkerPool::run`; the caller is blocked until we
        // decrement `remaining` below.
        let result = panic::catch_unwind(AssertUnwindSafe(|| unsafe { (*job.0)(id) }));
        let mut state = shared.lock();
        if let Err(payload) = result {
            state.failures.push((id, panic_message(payload)));
        }
        state.remaining -= 1;
        if state.remaining == 0 {
            shared.done.notify_all();
        }
    }
}

fn panic_message(payload: Box<dyn Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "non-string panic payload".to_string()
    }
}
