//! Worker threads backing a pilot allocation.
//!
//! Each worker owns a private queue (used for partition-affine engine tasks)
//! and also pulls from a queue shared by the whole pool (compute units).

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use crossbeam_channel::{select, unbounded, Receiver, Sender};
use parking_lot::Mutex;

pub type Job = Box<dyn FnOnce() + Send + 'static>;
pub type ResizeHook = Arc<dyn Fn(usize) + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WorkerId(pub usize);

impl std::fmt::Display for WorkerId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "w{}", self.0)
    }
}

enum Msg {
    Run(Job),
    Stop,
}

struct Worker {
    id: WorkerId,
    owner: String,
    tx: Sender<Msg>,
    handle: Option<JoinHandle<()>>,
}

struct PoolInner {
    name: String,
    shared_tx: Sender<Job>,
    shared_rx: Receiver<Job>,
    workers: Mutex<Vec<Worker>>,
    next_id: AtomicUsize,
    hooks: Mutex<Vec<ResizeHook>>,
    panics: AtomicUsize,
}

#[derive(Clone)]
pub struct WorkerPool {
    inner: Arc<PoolInner>,
}

impl std::fmt::Debug for WorkerPool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WorkerPool").field("name", &self.inner.name).field("workers", &self.len()).finish()
    }
}

fn run_guarded(job: Job, panics: &AtomicUsize) {
    if catch_unwind(AssertUnwindSafe(job)).is_err() {
        panics.fetch_add(1, Ordering::Relaxed);
    }
}

impl WorkerPool {
    pub fn new(name: impl Into<String>) -> Self {
        let (shared_tx, shared_rx) = unbounded();
        WorkerPool {
            inner: Arc::new(PoolInner {
                name: name.into(),
                shared_tx,
                shared_rx,
                workers: Mutex::new(Vec::new()),
                next_id: AtomicUsize::new(0),
                hooks: Mutex::new(Vec::new()),
                panics: AtomicUsize::new(0),
            }),
        }
    }

    pub fn name(&self) -> &str {
        &self.inner.name
    }

    /// Starts `n` worker threads attributed to `owner`.
    pub fn spawn_workers(&self, owner: &str, n: usize) -> std::io::Result<Vec<WorkerId>> {
        let mut ids = Vec::with_capacity(n);
        {
            let mut workers = self.inner.workers.lock();
            for _ in 0..n {
                let id = WorkerId(self.inner.next_id.fetch_add(1, Ordering::Relaxed));
                let (tx, rx) = unbounded::<Msg>();
                let shared = self.inner.shared_rx.clone();
                let inner = Arc::downgrade(&self.inner);
                let handle = std::thread::Builder::new()
                    .name(format!("{}-{id}", self.inner.name))
                    .spawn(move || loop {
                        select! {
                            recv(rx) -> msg => match msg {
                                Ok(Msg::Run(job)) => {
                                    let Some(inner) = inner.upgrade() else { return };
                                    run_guarded(job, &inner.panics);
                                }
                                Ok(Msg::Stop) | Err(_) => return,
                            },
                            recv(shared) -> job => match job {
                                Ok(job) => {
                                    let Some(inner) = inner.upgrade() else { return };
                                    run_guarded(job, &inner.panics);
                                }
                                Err(_) => return,
                            },
                        }
                    })?;
                workers.push(Worker { id, owner: owner.to_string(), tx, handle: Some(handle) });
                ids.push(id);
            }
        }
        if n > 0 {
            self.fire_hooks();
        }
        Ok(ids)
    }

    /// Stops every worker attributed to `owner` after it drains its private
    /// queue. Returns the number removed.
    pub fn remove_workers(&self, owner: &str) -> usize {
        let removed: Vec<Worker> = {
            let mut workers = self.inner.workers.lock();
            let (gone, keep): (Vec<_>, Vec<_>) = workers.drain(..).partition(|w| w.owner == owner);
            *workers = keep;
            gone
        };
        let count = removed.len();
        Self::stop_and_join(removed);
        if count > 0 {
            self.fire_hooks();
        }
        count
    }

    fn stop_and_join(workers: Vec<Worker>) {
        for w in &workers {
            let _ = w.tx.send(Msg::Stop);
        }
        let current = std::thread::current().id();
        for mut w in workers {
            if let Some(h) = w.handle.take() {
                if h.thread().id() != current {
                    let _ = h.join();
                }
            }
        }
    }

    pub fn shutdown(&self) {
        let all: Vec<Worker> = self.inner.workers.lock().drain(..).collect();
        Self::stop_and_join(all);
    }

    pub fn len(&self) -> usize {
        self.inner.workers.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn owned_by(&self, owner: &str) -> usize {
        self.inner.workers.lock().iter().filter(|w| w.owner == owner).count()
    }

    pub fn worker_ids(&self) -> Vec<WorkerId> {
        self.inner.workers.lock().iter().map(|w| w.id).collect()
    }

    /// Jobs that panicked instead of returning.
    pub fn panics(&self) -> usize {
        self.inner.panics.load(Ordering::Relaxed)
    }

    /// Queues a job for whichever worker frees up first.
    pub fn execute(&self, job: Job) {
        // The pool holds the receiver, so send never fails.
        let _ = self.inner.shared_tx.send(job);
    }

    /// Queues a job on one worker; falls back to the shared queue if that
    /// worker has been removed.
    pub fn execute_on(&self, worker: WorkerId, job: Job) {
        let tx = self.inner.workers.lock().iter().find(|w| w.id == worker).map(|w| w.tx.clone());
        match tx {
            Some(tx) => {
                if let Err(e) = tx.send(Msg::Run(job)) {
                    if let Msg::Run(job) = e.into_inner() {
                        self.execute(job);
                    }
                }
            }
            None => self.execute(job),
        }
    }

    /// Registers a callback invoked with the new worker count whenever the
    /// pool grows or shrinks.
    pub fn on_resize(&self, hook: ResizeHook) {
        self.inner.hooks.lock().push(hook);
    }

    fn fire_hooks(&self) {
        let hooks: Vec<ResizeHook> = self.inner.hooks.lock().clone();
        let n = self.len();
        for h in hooks {
            h(n);
        }
    }
}
