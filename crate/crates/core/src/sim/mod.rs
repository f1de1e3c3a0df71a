//! The cycle loop: thread-block dispatch, async-event wakeup, engine ticks
//! and per-SM Greedy-Then-Oldest issue of one WarpGroup instruction.
//!
//! Each cycle runs, in order: dispatch of pending blocks into free CTA
//! slots; wakeup of threads whose wait condition became true (or whose
//! `BUBBLES` occupancy ended); engine ticks (memory responses, TMA, tensor
//! core, L2 and DRAM); issue. Engine events produced in cycle `t` become
//! visible to waiting threads in cycle `t + 1`.

mod aeq;
mod groups;
mod sched;

use std::collections::{HashMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, SimConfig};
use crate::gantt::{Engine, GanttEntry};
use crate::isa::{validate_program, Diagnostic, Instruction, Role, Severity, TraceProgram};
use crate::mem::{MemorySystem, TrafficCounters};
use crate::tensorcore::{wgmma_latency, TcEvent, TcOp, TensorCore};
use crate::tma::{generate_line_requests, TmaEngine, TmaEvent, TmaKind, TmaOp};

pub use aeq::{AsyncEventQueue, WaitCond};
pub use groups::{GroupError, GroupTable};
pub use sched::{dispatch_round_robin, select_gto, Candidate};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineUtilization {
    pub tma: f64,
    pub tensorcore: f64,
}

/// When and where one thread block ran.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CtaRecord {
    pub block_id: u32,
    pub sm: u32,
    pub start: u64,
    pub end: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub total_cycles: u64,
    pub latency_us: f64,
    /// Busy fraction averaged over the SMs that ran at least one block.
    pub engine_utilization: EngineUtilization,
    pub traffic: TrafficCounters,
    pub gantt: Vec<GanttEntry>,
    pub ctas: Vec<CtaRecord>,
    pub max_tma_inflight_lines: u32,
    pub seed: u64,
}

impl SimResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StalledThread {
    pub sm: u32,
    pub block: u32,
    pub role: Role,
    pub pc: usize,
    pub instruction: String,
    pub waiting_on: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DeadlockReport {
    pub cycle: u64,
    pub stalled: Vec<StalledThread>,
}

impl fmt::Display for DeadlockReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "deadlock at cycle {}: no thread can make progress", self.cycle)?;
        for s in &self.stalled {
            writeln!(
                f,
                "  sm {} block {} {} pc {} ({}) waits for {}",
                s.sm, s.block, s.role, s.pc, s.instruction, s.waiting_on
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(#[from] ConfigError),
    #[error("program failed validation ({} error(s)); first: {}", .0.len(), .0[0])]
    Validation(Vec<Diagnostic>),
    #[error("block {block} {role} pc {pc}: {message}")]
    Isa { block: u32, role: Role, pc: usize, message: String },
    #[error("{0}")]
    Deadlock(Box<DeadlockReport>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Ready,
    Stalled,
    /// Occupied by `BUBBLES` until the given cycle.
    Busy(u64),
    Done,
}

#[derive(Debug)]
struct Thread {
    cta: usize,
    block_idx: usize,
    prog_idx: usize,
    block_id: u32,
    role: Role,
    sm: u32,
    age: u64,
    pc: usize,
    len: usize,
    status: Status,
    wgmma: GroupTable,
    stores: GroupTable,
    /// MB_WAITs passed, per stage.
    mb_waits: Vec<u32>,
    /// ACQUIRE_STAGEs passed, per stage.
    acquires: Vec<u32>,
}

#[derive(Debug)]
struct Cta {
    block_id: u32,
    sm: u32,
    threads: Vec<u32>,
    consumers: u32,
    filled: Vec<u32>,
    released: Vec<u32>,
    barriers: HashMap<u32, u32>,
    pending_tma: u32,
    start: u64,
    done: bool,
}

#[derive(Debug)]
struct Sm {
    tma: TmaEngine,
    tc: TensorCore,
    threads: Vec<u32>,
    ctas: Vec<usize>,
    last: Option<u32>,
    ran_cta: bool,
    tma_busy: u64,
}

#[derive(Debug, Clone, Copy)]
enum Target {
    Fill { cta: usize, sid: u32 },
    Store { thread: u32, gid: u32 },
}

#[derive(Debug)]
struct Token {
    target: Target,
    thread: u32,
    label: String,
}

struct Simulator<'p> {
    program: &'p TraceProgram,
    cfg: SimConfig,
    threads: Vec<Thread>,
    ctas: Vec<Cta>,
    sms: Vec<Sm>,
    free_slots: Vec<u32>,
    pending: VecDeque<usize>,
    cursor: usize,
    aeq: AsyncEventQueue,
    mem: MemorySystem,
    tokens: HashMap<u64, Token>,
    next_token: u64,
    next_age: u64,
    gantt: Vec<GanttEntry>,
    records: Vec<CtaRecord>,
    completed: usize,
    freed_this_cycle: bool,
}

/// Simulates `program` on the machine described by `cfg` until every
/// thread block has finished.
pub fn run_to_completion(program: &TraceProgram, cfg: &SimConfig) -> Result<SimResult, SimError> {
    cfg.check()?;
    let errors: Vec<Diagnostic> =
        validate_program(program).into_iter().filter(|d| d.severity == Severity::Error).collect();
    if !errors.is_empty() {
        return Err(SimError::Validation(errors));
    }
    Simulator::new(program, cfg).run()
}

impl<'p> Simulator<'p> {
    fn new(program: &'p TraceProgram, cfg: &SimConfig) -> Self {
        let mut order: Vec<usize> = (0..program.blocks.len()).collect();
        order.sort_by_key(|&i| program.blocks[i].block_id);
        Self {
            program,
            cfg: cfg.clone(),
            threads: Vec::new(),
            ctas: Vec::new(),
            sms: (0..cfg.num_sms)
                .map(|sm| Sm {
                    tma: TmaEngine::new(sm, cfg),
                    tc: TensorCore::new(cfg.wgmma_issue_buffer),
                    threads: Vec::new(),
                    ctas: Vec::new(),
                    last: None,
                    ran_cta: false,
                    tma_busy: 0,
                })
                .collect(),
            free_slots: vec![cfg.o_limit; cfg.num_sms as usize],
            pending: order.into(),
            cursor: 0,
            aeq: AsyncEventQueue::new(cfg.num_sms),
            mem: MemorySystem::new(cfg),
            tokens: HashMap::new(),
            next_token: 0,
            next_age: 0,
            gantt: Vec::new(),
            records: Vec::new(),
            completed: 0,
            freed_this_cycle: false,
        }
    }

    fn run(mut self) -> Result<SimResult, SimError> {
        let total = self.program.blocks.len();
        let mut now = 0u64;
        let total_cycles = if total == 0 {
            0
        } else {
            loop {
                self.freed_this_cycle = false;
                self.dispatch(now);
                self.wake(now);
                self.tick_engines(now);
                let issued = self.issue(now)?;
                self.retire(now);
                if self.completed == total {
                    break now + 1;
                }
                now = match self.next_cycle(now, issued) {
                    Some(next) => next,
                    None => return Err(SimError::Deadlock(Box::new(self.deadlock_report(now)))),
                };
            }
        };
        self.mem.flush();
        Ok(self.result(total_cycles))
    }

    fn dispatch(&mut self, now: u64) {
        if self.pending.is_empty() {
            return;
        }
        for (block_idx, sm) in dispatch_round_robin(&mut self.pending, &mut self.free_slots, &mut self.cursor) {
            let block = &self.program.blocks[block_idx];
            let stages = self.program.stages as usize;
            let cta = self.ctas.len();
            let mut ids = Vec::new();
            for (prog_idx, prog) in block.programs.iter().enumerate() {
                let id = self.threads.len() as u32;
                self.threads.push(Thread {
                    cta,
                    block_idx,
                    prog_idx,
                    block_id: block.block_id,
                    role: prog.role,
                    sm,
                    age: self.next_age,
                    pc: 0,
                    len: prog.instructions.len(),
                    status: if prog.instructions.is_empty() { Status::Done } else { Status::Ready },
                    wgmma: GroupTable::default(),
                    stores: GroupTable::default(),
                    mb_waits: vec![0; stages],
                    acquires: vec![0; stages],
                });
                self.next_age += 1;
                ids.push(id);
            }
            let s = &mut self.sms[sm as usize];
            s.threads.extend(&ids);
            s.ctas.push(cta);
            s.ran_cta = true;
            self.ctas.push(Cta {
                block_id: block.block_id,
                sm,
                threads: ids,
                consumers: block.consumers().count() as u32,
                filled: vec![0; stages],
                released: vec![0; stages],
                barriers: HashMap::new(),
                pending_tma: 0,
                start: now,
                done: false,
            });
        }
    }

    fn wake(&mut self, now: u64) {
        for sm in 0..self.sms.len() {
            for &t in &self.sms[sm].threads {
                let th = &mut self.threads[t as usize];
                if let Status::Busy(until) = th.status {
                    if until <= now {
                        th.status = if th.pc == th.len { Status::Done } else { Status::Ready };
                    }
                }
            }
            if !self.aeq.is_dirty(sm as u32) {
                continue;
            }
            let (threads, ctas, sms) = (&self.threads, &self.ctas, &self.sms);
            let woken = self.aeq.wake(sm as u32, |t, cond| condition_holds(&threads[t as usize], ctas, sms, cond, &self.cfg));
            for t in woken {
                self.threads[t as usize].status = Status::Ready;
            }
        }
    }

    fn tick_engines(&mut self, now: u64) {
        for d in self.mem.deliver(now) {
            self.sms[d.sm as usize].tma.on_response(d.tag);
        }
        for sm in 0..self.sms.len() {
            let mem = &mut self.mem;
            let s = &mut self.sms[sm];
            s.tma.tick(now, |req| mem.submit(req, now));
            for ev in s.tma.drain_events() {
                self.on_tma_event(sm as u32, ev);
            }
            let s = &mut self.sms[sm];
            let before = s.tc.occupancy();
            s.tc.tick(now);
            if s.tc.occupancy() < before {
                self.aeq.touch(sm as u32);
            }
            for ev in self.sms[sm].tc.drain_events() {
                self.on_tc_event(sm as u32, ev);
            }
        }
        self.mem.tick(now);
    }

    fn on_tma_event(&mut self, sm: u32, ev: TmaEvent) {
        match ev {
            TmaEvent::Completed { token } => {
                let tok = self.tokens.remove(&token).expect("known TMA token");
                let cta = self.threads[tok.thread as usize].cta;
                match tok.target {
                    Target::Fill { cta, sid } => self.ctas[cta].filled[sid as usize] += 1,
                    Target::Store { thread, gid } => self.threads[thread as usize].stores.complete(gid),
                }
                self.ctas[cta].pending_tma -= 1;
                self.aeq.touch(sm);
            }
            TmaEvent::Busy { token, start, end } => {
                self.sms[sm as usize].tma_busy += end - start;
                if self.cfg.record_gantt {
                    let tok = &self.tokens[&token];
                    let th = &self.threads[tok.thread as usize];
                    self.gantt.push(GanttEntry {
                        sm,
                        block: th.block_id,
                        warpgroup: th.role,
                        engine: Engine::Tma,
                        start,
                        end,
                        label: tok.label.clone(),
                    });
                }
            }
        }
    }

    fn on_tc_event(&mut self, sm: u32, ev: TcEvent) {
        match ev {
            TcEvent::Completed { thread, gid } => {
                self.threads[thread as usize].wgmma.complete(gid);
                self.aeq.touch(sm);
            }
            TcEvent::Busy { thread, gid, start, end } => {
                if self.cfg.record_gantt {
                    let th = &self.threads[thread as usize];
                    self.gantt.push(GanttEntry {
                        sm,
                        block: th.block_id,
                        warpgroup: th.role,
                        engine: Engine::TensorCore,
                        start,
                        end,
                        label: format!("wgmma g{gid}"),
                    });
                }
            }
        }
    }

    fn issue(&mut self, now: u64) -> Result<bool, SimError> {
        let mut issued = false;
        for sm in 0..self.sms.len() {
            if self.sms[sm].threads.is_empty() {
                continue;
            }
            for _ in 0..self.cfg.issue_width {
                let s = &self.sms[sm];
                let cands: Vec<Candidate> = s
                    .threads
                    .iter()
                    .map(|&t| {
                        let th = &self.threads[t as usize];
                        Candidate { thread: t, age: th.age, ready: th.status == Status::Ready }
                    })
                    .collect();
                let Some(t) = select_gto(s.last, &cands) else { break };
                self.sms[sm].last = Some(t);
                self.execute(t, now)?;
                issued = true;
            }
        }
        Ok(issued)
    }

    fn isa_error(&self, t: u32, message: String) -> SimError {
        let th = &self.threads[t as usize];
        SimError::Isa { block: th.block_id, role: th.role, pc: th.pc, message }
    }

    fn stall(&mut self, t: u32, cond: WaitCond) {
        let th = &mut self.threads[t as usize];
        th.status = Status::Stalled;
        self.aeq.park(th.sm, t, cond);
    }

    fn new_token(&mut self, target: Target, thread: u32, label: String) -> u64 {
        let token = self.next_token;
        self.next_token += 1;
        self.tokens.insert(token, Token { target, thread, label });
        token
    }

    fn execute(&mut self, t: u32, now: u64) -> Result<(), SimError> {
        let th = &self.threads[t as usize];
        let (sm, cta) = (th.sm, th.cta);
        let inst = self.program.blocks[th.block_idx].programs[th.prog_idx].instructions[th.pc];
        let stages = self.program.stages;
        if let Some(sid) = inst.stage() {
            if sid >= stages {
                return Err(self.isa_error(t, format!("stage index {sid} out of range for ring depth {stages}")));
            }
        }
        match inst {
            Instruction::TmaTensor { gmem, map, sid, .. } | Instruction::TmaStore { gmem, map, gid: sid, .. } => {
                let store = matches!(inst, Instruction::TmaStore { .. });
                let Some(desc) = self.program.tensor_map(map) else {
                    return Err(self.isa_error(t, format!("unresolved tensor map {map}")));
                };
                let lines = generate_line_requests(desc, gmem, self.cfg.line_size, self.cfg.tma_dedup)
                    .map_err(|e| self.isa_error(t, e.to_string()))?;
                let (kind, target, label) = if store {
                    if let Err(e) = self.threads[t as usize].stores.join(sid) {
                        return Err(self.isa_error(t, e.to_string()));
                    }
                    (TmaKind::TensorStore, Target::Store { thread: t, gid: sid }, format!("store g{sid}"))
                } else {
                    (TmaKind::TensorLoad, Target::Fill { cta, sid }, format!("load s{sid}"))
                };
                let token = self.new_token(target, t, label);
                self.ctas[cta].pending_tma += 1;
                self.sms[sm as usize].tma.enqueue(TmaOp { kind, lines, token });
            }
            Instruction::MbWait { sid } => {
                let need = self.threads[t as usize].mb_waits[sid as usize] + 1;
                if self.ctas[cta].filled[sid as usize] < need {
                    self.stall(t, WaitCond::StageFilled { sid, need });
                    return Ok(());
                }
                self.threads[t as usize].mb_waits[sid as usize] = need;
            }
            Instruction::AcquireStage { sid } => {
                let prior = self.threads[t as usize].acquires[sid as usize];
                let c = &self.ctas[cta];
                let need = prior * c.consumers;
                if c.released[sid as usize] < need {
                    self.stall(t, WaitCond::StageReleased { sid, need });
                    return Ok(());
                }
                // Every consumer let go of the previous use, which they
                // could only do after that use was filled.
                debug_assert!(c.filled[sid as usize] >= prior, "stage {sid} reacquired before its fill");
                self.threads[t as usize].acquires[sid as usize] = prior + 1;
            }
            Instruction::ReleaseStage { sid } => {
                self.ctas[cta].released[sid as usize] += 1;
                self.aeq.touch(sm);
            }
            Instruction::TmaCommit { gid } => {
                if let Err(e) = self.threads[t as usize].stores.commit(gid) {
                    return Err(self.isa_error(t, e.to_string()));
                }
            }
            Instruction::TmaWait { gid, max_outstanding } => {
                if self.threads[t as usize].stores.pending(gid) > max_outstanding {
                    self.stall(t, WaitCond::StoreDrain { gid, max_outstanding });
                    return Ok(());
                }
            }
            Instruction::Wgmma(w) => {
                let latency = wgmma_latency(w.m, w.n, w.k, w.dtype, self.cfg.wgmma_min_latency)
                    .map_err(|e| self.isa_error(t, e.to_string()))?;
                if w.sparse {
                    return Err(self.isa_error(t, "sparse WGMMA is not modeled".into()));
                }
                if self.sms[sm as usize].tc.occupancy() >= self.cfg.wgmma_issue_buffer as usize {
                    self.stall(t, WaitCond::TensorCoreSlot);
                    return Ok(());
                }
                if let Err(e) = self.threads[t as usize].wgmma.join(w.gid) {
                    return Err(self.isa_error(t, e.to_string()));
                }
                self.sms[sm as usize]
                    .tc
                    .enqueue(TcOp { latency, thread: t, gid: w.gid })
                    .expect("capacity checked");
            }
            Instruction::WgmmaCommit { gid } => {
                if let Err(e) = self.threads[t as usize].wgmma.commit(gid) {
                    return Err(self.isa_error(t, e.to_string()));
                }
            }
            Instruction::WgmmaWait { gid, max_outstanding } => {
                if self.threads[t as usize].wgmma.pending(gid) > max_outstanding {
                    self.stall(t, WaitCond::WgmmaDrain { gid, max_outstanding });
                    return Ok(());
                }
            }
            Instruction::BarArrive { bid } => {
                *self.ctas[cta].barriers.entry(bid).or_default() += 1;
                self.aeq.touch(sm);
            }
            Instruction::BarWait { bid, count } => {
                let arrived = self.ctas[cta].barriers.entry(bid).or_default();
                if *arrived < count {
                    self.stall(t, WaitCond::Barrier { bid, count });
                    return Ok(());
                }
                *arrived -= count;
            }
            Instruction::Bubbles { cycles } => {
                if cycles > 0 {
                    self.threads[t as usize].status = Status::Busy(now + cycles);
                    if self.cfg.record_gantt {
                        let th = &self.threads[t as usize];
                        self.gantt.push(GanttEntry {
                            sm,
                            block: th.block_id,
                            warpgroup: th.role,
                            engine: Engine::Bubble,
                            start: now,
                            end: now + cycles,
                            label: format!("bubbles {cycles}"),
                        });
                    }
                }
            }
        }
        let th = &mut self.threads[t as usize];
        th.pc += 1;
        // A trailing bubble keeps the thread busy until it expires.
        if th.pc == th.len && !matches!(th.status, Status::Busy(_)) {
            th.status = Status::Done;
        }
        Ok(())
    }

    fn retire(&mut self, now: u64) {
        for sm in 0..self.sms.len() {
            let mut i = 0;
            while i < self.sms[sm].ctas.len() {
                let c = self.sms[sm].ctas[i];
                let cta = &self.ctas[c];
                let finished = cta.pending_tma == 0
                    && cta.threads.iter().all(|&t| {
                        let th = &self.threads[t as usize];
                        th.status == Status::Done && th.wgmma.drained() && th.stores.drained()
                    });
                if !finished {
                    i += 1;
                    continue;
                }
                let cta = &mut self.ctas[c];
                cta.done = true;
                self.records.push(CtaRecord { block_id: cta.block_id, sm: cta.sm, start: cta.start, end: now + 1 });
                let s = &mut self.sms[sm];
                s.ctas.swap_remove(i);
                s.threads.retain(|t| !cta.threads.contains(t));
                if s.last.is_some_and(|l| cta.threads.contains(&l)) {
                    s.last = None;
                }
                self.free_slots[sm] += 1;
                self.completed += 1;
                self.freed_this_cycle = true;
            }
        }
    }

    /// The next cycle anything can happen. Skips stretches where every
    /// thread is parked or busy and no engine has work due.
    fn next_cycle(&self, now: u64, issued: bool) -> Option<u64> {
        if issued || self.aeq.any_dirty() || (self.freed_this_cycle && !self.pending.is_empty()) {
            return Some(now + 1);
        }
        let mut next = self.mem.next_event(now);
        let mut consider = |t: Option<u64>| {
            if let Some(t) = t {
                next = Some(next.map_or(t, |n: u64| n.min(t)));
            }
        };
        for s in &self.sms {
            consider(s.tma.next_tick(now));
            consider(s.tc.next_tick(now));
            for &t in &s.threads {
                if let Status::Busy(until) = self.threads[t as usize].status {
                    consider(Some(until));
                }
            }
        }
        next.map(|n| n.max(now + 1))
    }

    fn deadlock_report(&self, now: u64) -> DeadlockReport {
        let mut stalled: Vec<StalledThread> = self
            .aeq
            .parked()
            .map(|(sm, t, cond)| {
                let th = &self.threads[t as usize];
                let inst = self.program.blocks[th.block_idx].programs[th.prog_idx].instructions[th.pc];
                StalledThread {
                    sm,
                    block: th.block_id,
                    role: th.role,
                    pc: th.pc,
                    instruction: inst.to_string(),
                    waiting_on: cond.to_string(),
                }
            })
            .collect();
        stalled.sort_by_key(|s| (s.sm, s.block, s.role));
        DeadlockReport { cycle: now + self.cfg.deadlock_threshold, stalled }
    }

    fn result(self, total_cycles: u64) -> SimResult {
        let active = self.sms.iter().filter(|s| s.ran_cta).count() as u64;
        let denom = (total_cycles * active) as f64;
        let util = |busy: u64| if denom > 0.0 { busy as f64 / denom } else { 0.0 };
        let tma_busy: u64 = self.sms.iter().map(|s| s.tma_busy).sum();
        let tc_busy: u64 = self.sms.iter().map(|s| s.tc.busy_cycles()).sum();
        let mut gantt = self.gantt;
        crate::gantt::sort(&mut gantt);
        let mut ctas = self.records;
        ctas.sort_by_key(|r| r.block_id);
        SimResult {
            total_cycles,
            latency_us: self.cfg.cycles_to_us(total_cycles),
            engine_utilization: EngineUtilization { tma: util(tma_busy), tensorcore: util(tc_busy) },
            traffic: self.mem.counters().clone(),
            gantt,
            ctas,
            max_tma_inflight_lines: self.sms.iter().map(|s| s.tma.max_inflight_seen()).max().unwrap_or(0),
            seed: self.cfg.seed,
        }
    }
}

fn condition_holds(th: &Thread, ctas: &[Cta], sms: &[Sm], cond: WaitCond, cfg: &SimConfig) -> bool {
    let cta = &ctas[th.cta];
    match cond {
        WaitCond::StageFilled { sid, need } => cta.filled[sid as usize] >= need,
        WaitCond::StageReleased { sid, need } => cta.released[sid as usize] >= need,
        WaitCond::WgmmaDrain { gid, max_outstanding } => th.wgmma.pending(gid) <= max_outstanding,
        WaitCond::StoreDrain { gid, max_outstanding } => th.stores.pending(gid) <= max_outstanding,
        WaitCond::Barrier { bid, count } => cta.barriers.get(&bid).copied().unwrap_or(0) >= count,
        WaitCond::TensorCoreSlot => sms[th.sm as usize].tc.occupancy() < cfg.wgmma_issue_buffer as usize,
    }
}
