//! Single-threaded deterministic discrete-event executor.
//!
//! Every simulated actor (coordinator, client, monitor, recovery worker) is a
//! future. Futures suspend only on [`Sim::sleep_until`] or a [`WaitQueue`];
//! the executor always resumes the task with the smallest wake-up time, ties
//! broken by registration order, so a run is a pure function of its inputs.

use std::cell::{Cell, RefCell};
use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, VecDeque};
use std::fmt;
use std::future::Future;
use std::ops::{Add, Sub};
use std::pin::Pin;
use std::rc::Rc;
use std::task::{Context, Poll, RawWaker, RawWakerVTable, Waker};

/// Simulated time in picoseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MAX: SimTime = SimTime(u64::MAX);

    pub const fn from_ps(ps: u64) -> Self {
        SimTime(ps)
    }
    pub const fn from_ns(ns: u64) -> Self {
        SimTime(ns * 1_000)
    }
    pub const fn from_us(us: u64) -> Self {
        SimTime(us * 1_000_000)
    }
    pub const fn from_ms(ms: u64) -> Self {
        SimTime(ms * 1_000_000_000)
    }
    pub const fn as_ps(self) -> u64 {
        self.0
    }
    pub const fn as_ns(self) -> u64 {
        self.0 / 1_000
    }
    pub fn as_ms_f64(self) -> f64 {
        self.0 as f64 / 1e9
    }
    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e12
    }
    pub fn saturating_sub(self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(other.0))
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_add(rhs.0))
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 - rhs.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}ms", self.as_ms_f64())
    }
}

pub type TaskId = u64;

/// Tasks may be grouped (one group per compute node) so a crash can drop
/// every task of a node at once.
pub type TaskGroup = Option<u16>;

type BoxedTask = Pin<Box<dyn Future<Output = ()>>>;

struct TaskSlot {
    future: Option<BoxedTask>,
    group: TaskGroup,
    epoch: u64,
}

#[derive(Default)]
struct Scheduler {
    now: SimTime,
    seq: u64,
    next_task: TaskId,
    queue: BinaryHeap<Reverse<(SimTime, u64, TaskId, u64)>>,
    current: Option<TaskId>,
}

struct SimInner {
    sched: RefCell<Scheduler>,
    tasks: RefCell<HashMap<TaskId, TaskSlot>>,
    polls: Cell<u64>,
}

/// Handle to the executor; cheap to clone.
#[derive(Clone)]
pub struct Sim(Rc<SimInner>);

impl Default for Sim {
    fn default() -> Self {
        Self::new()
    }
}

impl Sim {
    pub fn new() -> Self {
        Sim(Rc::new(SimInner {
            sched: RefCell::new(Scheduler::default()),
            tasks: RefCell::new(HashMap::new()),
            polls: Cell::new(0),
        }))
    }

    pub fn now(&self) -> SimTime {
        self.0.sched.borrow().now
    }

    /// Number of task polls performed so far.
    pub fn polls(&self) -> u64 {
        self.0.polls.get()
    }

    pub fn spawn<F>(&self, group: TaskGroup, fut: F) -> TaskId
    where
        F: Future<Output = ()> + 'static,
    {
        let id = {
            let mut s = self.0.sched.borrow_mut();
            let id = s.next_task;
            s.next_task += 1;
            id
        };
        self.0.tasks.borrow_mut().insert(
            id,
            TaskSlot {
                future: Some(Box::pin(fut)),
                group,
                epoch: 0,
            },
        );
        let now = self.now();
        self.wake_at(id, now);
        id
    }

    pub fn is_alive(&self, task: TaskId) -> bool {
        self.0.tasks.borrow().contains_key(&task)
    }

    /// Drop every task in `group`. A task cannot kill its own group while it
    /// is being polled; its future is dropped once the poll returns.
    pub fn kill_group(&self, group: u16) -> usize {
        let victims: Vec<TaskId> = {
            let tasks = self.0.tasks.borrow();
            let mut v: Vec<TaskId> = tasks
                .iter()
                .filter(|(_, t)| t.group == Some(group))
                .map(|(id, _)| *id)
                .collect();
            v.sort_unstable();
            v
        };
        let mut dropped = Vec::new();
        {
            let mut tasks = self.0.tasks.borrow_mut();
            for id in &victims {
                if let Some(slot) = tasks.remove(id) {
                    dropped.push(slot.future);
                }
            }
        }
        // Drop outside the borrow: futures may hold handles into the sim.
        drop(dropped);
        victims.len()
    }

    /// Drop every task, grouped or not.
    pub fn kill_all(&self) -> usize {
        let dropped: Vec<_> = self.0.tasks.borrow_mut().drain().map(|(_, slot)| slot.future).collect();
        let n = dropped.len();
        drop(dropped);
        self.0.sched.borrow_mut().queue.clear();
        n
    }

    fn wake_at(&self, task: TaskId, at: SimTime) {
        let epoch = match self.0.tasks.borrow().get(&task) {
            Some(slot) => slot.epoch,
            None => return,
        };
        let mut s = self.0.sched.borrow_mut();
        let at = at.max(s.now);
        let seq = s.seq;
        s.seq += 1;
        s.queue.push(Reverse((at, seq, task, epoch)));
    }

    fn current_task(&self) -> TaskId {
        self.0
            .sched
            .borrow()
            .current
            .expect("simulation future polled outside the executor")
    }

    /// Suspend the calling task until `at` (or yield once if `at` has passed).
    pub fn sleep_until(&self, at: SimTime) -> Delay {
        Delay {
            sim: self.clone(),
            until: at,
            registered: false,
        }
    }

    pub fn sleep(&self, d: SimTime) -> Delay {
        self.sleep_until(self.now() + d)
    }

    pub fn yield_now(&self) -> Delay {
        self.sleep_until(self.now())
    }

    fn pop_due(&self, limit: SimTime) -> Option<(SimTime, u64, TaskId, u64)> {
        let mut s = self.0.sched.borrow_mut();
        match s.queue.peek() {
            Some(Reverse((t, _, _, _))) if *t <= limit => s.queue.pop().map(|Reverse(e)| e),
            _ => None,
        }
    }

    /// Run until no task is runnable or the next event lies beyond `limit`.
    /// Returns the number of tasks still alive.
    pub fn run_until(&self, limit: SimTime) -> usize {
        while let Some(e) = self.pop_due(limit) {
            self.poll_event(e);
        }
        self.0.tasks.borrow().len()
    }

    pub fn run(&self) -> usize {
        self.run_until(SimTime::MAX)
    }

    /// Advance the clock to `t` without running anything (no-op if in the past).
    pub fn advance_to(&self, t: SimTime) {
        let mut s = self.0.sched.borrow_mut();
        if t > s.now {
            s.now = t;
        }
    }

    /// Drive a single future to completion alongside any spawned tasks.
    /// Panics if the future can never complete.
    pub fn block_on<F, T>(&self, fut: F) -> T
    where
        F: Future<Output = T> + 'static,
        T: 'static,
    {
        let out = Rc::new(RefCell::new(None));
        let slot = out.clone();
        let id = self.spawn(None, async move {
            let v = fut.await;
            *slot.borrow_mut() = Some(v);
        });
        while self.is_alive(id) {
            match self.pop_due(SimTime::MAX) {
                Some(e) => self.poll_event(e),
                None => panic!("block_on: future can never complete (deadlock)"),
            }
        }
        let v = out.borrow_mut().take().expect("task finished without output");
        v
    }

    fn poll_event(&self, (at, _, task, epoch): (SimTime, u64, TaskId, u64)) {
        let fut = {
            let mut tasks = self.0.tasks.borrow_mut();
            match tasks.get_mut(&task) {
                Some(slot) if slot.epoch == epoch => {
                    slot.epoch += 1;
                    slot.future.take()
                }
                _ => None,
            }
        };
        let Some(mut fut) = fut else { return };
        {
            let mut s = self.0.sched.borrow_mut();
            s.now = s.now.max(at);
            s.current = Some(task);
        }
        self.0.polls.set(self.0.polls.get() + 1);
        let waker = noop_waker();
        let mut cx = Context::from_waker(&waker);
        let res = fut.as_mut().poll(&mut cx);
        self.0.sched.borrow_mut().current = None;
        let mut tasks = self.0.tasks.borrow_mut();
        match res {
            Poll::Ready(()) => {
                tasks.remove(&task);
            }
            Poll::Pending => {
                if let Some(slot) = tasks.get_mut(&task) {
                    slot.future = Some(fut);
                }
            }
        }
    }
}

/// Future returned by [`Sim::sleep_until`].
pub struct Delay {
    sim: Sim,
    until: SimTime,
    registered: bool,
}

impl Future for Delay {
    type Output = ();
    fn poll(mut self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<()> {
        if self.registered && self.sim.now() >= self.until {
            return Poll::Ready(());
        }
        let task = self.sim.current_task();
        let until = self.until;
        self.sim.wake_at(task, until);
        self.registered = true;
        Poll::Pending
    }
}

/// FIFO of parked tasks, woken explicitly.
#[derive(Default)]
pub struct WaitQueue {
    waiters: RefCell<VecDeque<(TaskId, Rc<Cell<bool>>)>>,
}

impl WaitQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn wait<'a>(&'a self, sim: &Sim) -> Wait<'a> {
        Wait {
            queue: self,
            sim: sim.clone(),
            flag: None,
        }
    }

    pub fn notify_one(&self, sim: &Sim) -> bool {
        loop {
            let next = self.waiters.borrow_mut().pop_front();
            match next {
                Some((task, flag)) => {
                    if !sim.is_alive(task) {
                        continue;
                    }
                    flag.set(true);
                    sim.wake_at(task, sim.now());
                    return true;
                }
                None => return false,
            }
        }
    }

    pub fn notify_all(&self, sim: &Sim) {
        while self.notify_one(sim) {}
    }

    pub fn len(&self) -> usize {
        self.waiters.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct Wait<'a> {
    queue: &'a WaitQueue,
    sim: Sim,
    flag: Option<Rc<Cell<bool>>>,
}

impl Future for Wait<'_> {
    type Output = ();
    fn poll(mut self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<()> {
        if let Some(flag) = &self.flag {
            if flag.get() {
                return Poll::Ready(());
            }
            return Poll::Pending;
        }
        let flag = Rc::new(Cell::new(false));
        let task = self.sim.current_task();
        self.queue
            .waiters
            .borrow_mut()
            .push_back((task, flag.clone()));
        self.flag = Some(flag);
        Poll::Pending
    }
}

/// Poll every future each time the task wakes; completes when all do.
///
/// Unlike `futures::future::join_all` this does not rely on wakers, which the
/// simulator does not use.
pub async fn join_all<F: Future>(futs: Vec<F>) -> Vec<F::Output> {
    JoinAll {
        futs: futs.into_iter().map(|f| Some(Box::pin(f))).collect(),
        outs: Vec::new(),
    }
    .await
}

struct JoinAll<F: Future> {
    futs: Vec<Option<Pin<Box<F>>>>,
    outs: Vec<Option<F::Output>>,
}

impl<F: Future> Unpin for JoinAll<F> {}

impl<F: Future> Future for JoinAll<F> {
    type Output = Vec<F::Output>;
    fn poll(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<Self::Output> {
        let this = &mut *self;
        if this.outs.is_empty() {
            this.outs = (0..this.futs.len()).map(|_| None).collect();
        }
        let mut pending = false;
        for (i, slot) in this.futs.iter_mut().enumerate() {
            if let Some(f) = slot {
                match f.as_mut().poll(cx) {
                    Poll::Ready(v) => {
                        this.outs[i] = Some(v);
                        *slot = None;
                    }
                    Poll::Pending => pending = true,
                }
            }
        }
        if pending {
            Poll::Pending
        } else {
            Poll::Ready(this.outs.drain(..).map(|o| o.unwrap()).collect())
        }
    }
}

fn noop_waker() -> Waker {
    const VTABLE: RawWakerVTable = RawWakerVTable::new(
        |_| RawWaker::new(std::ptr::null(), &VTABLE),
        |_| {},
        |_| {},
        |_| {},
    );
    // SAFETY: every vtable function ignores the data pointer.
    unsafe { Waker::from_raw(RawWaker::new(std::ptr::null(), &VTABLE)) }
}
