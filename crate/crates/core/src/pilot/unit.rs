use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Condvar, Mutex, RwLock};
use serde_json::Value;

use super::PilotError;

/// A registered, named function a compute unit can invoke.
pub type UnitFn = Arc<dyn Fn(Value) -> Result<Value, String> + Send + Sync>;

/// Name → function table shared by all pilots of a service.
#[derive(Clone, Default)]
pub struct FunctionRegistry {
    functions: Arc<RwLock<HashMap<String, UnitFn>>>,
}

impl FunctionRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry preloaded with the demo functions (`square`, `sum`, `sleep_ms`).
    pub fn with_builtins() -> Self {
        let r = Self::new();
        r.register("square", |v: Value| match (v.as_i64(), v.as_f64()) {
            (Some(i), _) => Ok(Value::from(i.wrapping_mul(i))),
            (None, Some(x)) => Ok(Value::from(x * x)),
            _ => Err(format!("square expects a number, got {v}")),
        });
        r.register("sum", |v: Value| {
            let items = v.as_array().ok_or("sum expects an array")?;
            let mut total = 0.0;
            for i in items {
                total += i.as_f64().ok_or("sum expects numbers")?;
            }
            Ok(Value::from(total))
        });
        r.register("sleep_ms", |v: Value| {
            let ms = v.as_u64().ok_or("sleep_ms expects a non-negative integer")?;
            std::thread::sleep(Duration::from_millis(ms));
            Ok(Value::from(ms))
        });
        r
    }

    pub fn register<F>(&self, name: &str, f: F)
    where
        F: Fn(Value) -> Result<Value, String> + Send + Sync + 'static,
    {
        self.functions.write().insert(name.to_string(), Arc::new(f));
    }

    pub fn get(&self, name: &str) -> Option<UnitFn> {
        self.functions.read().get(name).cloned()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitState {
    Pending,
    Running,
    Done,
    Failed,
}

impl UnitState {
    pub fn is_terminal(self) -> bool {
        matches!(self, UnitState::Done | UnitState::Failed)
    }
}

struct UnitData {
    state: UnitState,
    outcome: Option<Result<Value, String>>,
}

/// Handle to a submitted compute unit; cloneable and waitable from any thread.
#[derive(Clone)]
pub struct ComputeUnit {
    id: u64,
    function: String,
    shared: Arc<(Mutex<UnitData>, Condvar)>,
}

impl std::fmt::Debug for ComputeUnit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ComputeUnit")
            .field("id", &self.id)
            .field("function", &self.function)
            .field("state", &self.state())
            .finish()
    }
}

impl ComputeUnit {
    pub(crate) fn new(id: u64, function: &str) -> Self {
        ComputeUnit {
            id,
            function: function.to_string(),
            shared: Arc::new((Mutex::new(UnitData { state: UnitState::Pending, outcome: None }), Condvar::new())),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn function(&self) -> &str {
        &self.function
    }

    pub fn state(&self) -> UnitState {
        self.shared.0.lock().state
    }

    pub(crate) fn mark_running(&self) {
        let mut d = self.shared.0.lock();
        if d.state == UnitState::Pending {
            d.state = UnitState::Running;
        }
    }

    pub(crate) fn finish(&self, outcome: Result<Value, String>) {
        let (lock, cv) = &*self.shared;
        let mut d = lock.lock();
        if d.state.is_terminal() {
            return;
        }
        d.state = if outcome.is_ok() { UnitState::Done } else { UnitState::Failed };
        d.outcome = Some(outcome);
        cv.notify_all();
    }

    /// The result, available only once the unit is DONE.
    pub fn result(&self) -> Option<Value> {
        let d = self.shared.0.lock();
        match (&d.state, &d.outcome) {
            (UnitState::Done, Some(Ok(v))) => Some(v.clone()),
            _ => None,
        }
    }

    pub fn wait(&self) -> Result<Value, PilotError> {
        self.wait_timeout(Duration::MAX).and_then(|r| r.ok_or(PilotError::TimedOut))
    }

    /// `Ok(None)` if the unit is still running when the timeout elapses.
    pub fn wait_timeout(&self, timeout: Duration) -> Result<Option<Value>, PilotError> {
        let (lock, cv) = &*self.shared;
        let mut d = lock.lock();
        let deadline = std::time::Instant::now().checked_add(timeout);
        while !d.state.is_terminal() {
            match deadline {
                Some(deadline) => {
                    if cv.wait_until(&mut d, deadline).timed_out() && !d.state.is_terminal() {
                        return Ok(None);
                    }
                }
                None => cv.wait(&mut d),
            }
        }
        match d.outcome.clone().expect("terminal unit has an outcome") {
            Ok(v) => Ok(Some(v)),
            Err(e) => Err(PilotError::TaskFailed { unit: self.id, message: e }),
        }
    }
}
