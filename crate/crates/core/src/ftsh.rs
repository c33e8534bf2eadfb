//! Timeout-and-retry semantics for flaky commands (chiefly transfers).
//!
//! [`FtshSession`] is the event-driven form used inside the simulator: the
//! caller reports completions and deadline expiries and the session decides
//! what happens next. [`run_with_retry`] drives the same state machine
//! against an action whose per-attempt duration is known up front.

use serde::{Deserialize, Serialize};

use crate::error::FtshError;
use crate::gridsim::SimClock;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backoff {
    Fixed(f64),
    Multiplicative { initial: f64, factor: f64 },
}

impl Backoff {
    /// Delay inserted after failed attempt number `attempt` (1-based).
    pub fn delay(&self, attempt: u32) -> f64 {
        match *self {
            Backoff::Fixed(s) => s,
            Backoff::Multiplicative { initial, factor } => {
                initial * factor.powi(attempt.saturating_sub(1) as i32)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrySpec {
    pub timeout: f64,
    pub max_attempts: u32,
    pub backoff: Backoff,
}

impl Default for RetrySpec {
    fn default() -> Self {
        Self {
            timeout: 300.0,
            max_attempts: 5,
            backoff: Backoff::Fixed(60.0),
        }
    }
}

impl RetrySpec {
    pub fn new(timeout: f64, max_attempts: u32, backoff: Backoff) -> Result<Self, FtshError> {
        let spec = Self {
            timeout,
            max_attempts,
            backoff,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), FtshError> {
        if !(self.timeout > 0.0) || !self.timeout.is_finite() {
            return Err(FtshError::InvalidTimeout(self.timeout));
        }
        if self.max_attempts == 0 {
            return Err(FtshError::ZeroAttempts);
        }
        let ok = match self.backoff {
            Backoff::Fixed(s) => s >= 0.0 && s.is_finite(),
            Backoff::Multiplicative { initial, factor } => {
                initial >= 0.0 && initial.is_finite() && factor >= 1.0 && factor.is_finite()
            }
        };
        if !ok {
            return Err(FtshError::InvalidBackoff);
        }
        Ok(())
    }

    /// Largest time a session can take: every attempt times out.
    pub fn worst_case_elapsed(&self) -> f64 {
        let backoffs: f64 = (1..self.max_attempts).map(|a| self.backoff.delay(a)).sum();
        self.max_attempts as f64 * self.timeout + backoffs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttemptOutcome {
    Success,
    Fail,
    TimedOut,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub attempt_index: u32,
    pub start_time: f64,
    pub end_time: f64,
    pub outcome: AttemptOutcome,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Step {
    /// Start attempt `index` now; cancel it at `deadline` unless it completes.
    Attempt { index: u32, deadline: f64 },
    /// Wait, then call [`FtshSession::resume`] at `resume_at`.
    Backoff { resume_at: f64 },
    Succeeded,
    Exhausted,
}

#[derive(Debug, Clone)]
pub struct FtshSession {
    spec: RetrySpec,
    attempt: u32,
    attempt_start: f64,
    in_attempt: bool,
    finished: bool,
    history: Vec<AttemptRecord>,
}

impl FtshSession {
    pub fn new(spec: RetrySpec) -> Self {
        Self {
            spec,
            attempt: 0,
            attempt_start: 0.0,
            in_attempt: false,
            finished: false,
            history: Vec::new(),
        }
    }

    pub fn spec(&self) -> &RetrySpec {
        &self.spec
    }

    pub fn attempt(&self) -> u32 {
        self.attempt
    }

    pub fn history(&self) -> &[AttemptRecord] {
        &self.history
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn begin(&mut self, now: f64) -> Result<Step, FtshError> {
        if self.attempt != 0 {
            return Err(FtshError::AlreadyStarted);
        }
        Ok(self.start_attempt(now))
    }

    pub fn resume(&mut self, now: f64) -> Result<Step, FtshError> {
        if self.in_attempt || self.finished || self.attempt == 0 {
            return Err(FtshError::NotWaiting);
        }
        Ok(self.start_attempt(now))
    }

    fn start_attempt(&mut self, now: f64) -> Step {
        self.attempt += 1;
        self.attempt_start = now;
        self.in_attempt = true;
        Step::Attempt {
            index: self.attempt,
            deadline: now + self.spec.timeout,
        }
    }

    /// The running attempt finished on its own before its deadline.
    pub fn on_complete(&mut self, now: f64, success: bool) -> Result<Step, FtshError> {
        self.close_attempt(
            now,
            if success {
                AttemptOutcome::Success
            } else {
                AttemptOutcome::Fail
            },
        )
    }

    /// The running attempt reached its deadline and was cancelled.
    pub fn on_timeout(&mut self, now: f64) -> Result<Step, FtshError> {
        self.close_attempt(now, AttemptOutcome::TimedOut)
    }

    fn close_attempt(&mut self, now: f64, outcome: AttemptOutcome) -> Result<Step, FtshError> {
        if !self.in_attempt {
            return Err(FtshError::NoAttemptRunning);
        }
        self.in_attempt = false;
        self.history.push(AttemptRecord {
            attempt_index: self.attempt,
            start_time: self.attempt_start,
            end_time: now,
            outcome,
        });
        if outcome == AttemptOutcome::Success {
            self.finished = true;
            return Ok(Step::Succeeded);
        }
        if self.attempt >= self.spec.max_attempts {
            self.finished = true;
            return Ok(Step::Exhausted);
        }
        Ok(Step::Backoff {
            resume_at: now + self.spec.backoff.delay(self.attempt),
        })
    }
}

/// What one attempt of an action does when started.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttemptResult {
    Completes { duration: f64, success: bool },
    Hangs,
}

pub trait TimedAction {
    fn attempt(&mut self, index: u32, start: f64) -> AttemptResult;
}

impl<F> TimedAction for F
where
    F: FnMut(u32, f64) -> AttemptResult,
{
    fn attempt(&mut self, index: u32, start: f64) -> AttemptResult {
        self(index, start)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FinalOutcome {
    Success,
    Fail,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetryRun {
    pub outcome: FinalOutcome,
    pub history: Vec<AttemptRecord>,
    pub start: f64,
    pub end: f64,
}

impl RetryRun {
    pub fn elapsed(&self) -> f64 {
        self.end - self.start
    }
}

/// Run `action` under `spec`, advancing `clock` to the end of the session.
pub fn run_with_retry<A: TimedAction>(
    action: &mut A,
    spec: &RetrySpec,
    clock: &mut SimClock,
) -> Result<RetryRun, FtshError> {
    spec.validate()?;
    let start = clock.now();
    let mut session = FtshSession::new(*spec);
    let mut step = session.begin(start)?;
    loop {
        match step {
            Step::Attempt { index, deadline } => {
                let begun = clock.now();
                step = match action.attempt(index, begun) {
                    AttemptResult::Completes { duration, success } if begun + duration < deadline => {
                        clock.advance_to(begun + duration.max(0.0));
                        session.on_complete(clock.now(), success)?
                    }
                    _ => {
                        clock.advance_to(deadline);
                        session.on_timeout(deadline)?
                    }
                };
            }
            Step::Backoff { resume_at } => {
                clock.advance_to(resume_at);
                step = session.resume(resume_at)?;
            }
            Step::Succeeded | Step::Exhausted => {
                let outcome = if step == Step::Succeeded {
                    FinalOutcome::Success
                } else {
                    FinalOutcome::Fail
                };
                return Ok(RetryRun {
                    outcome,
                    history: session.history,
                    start,
                    end: clock.now(),
                });
            }
        }
    }
}
