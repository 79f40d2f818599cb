//! Bounded single-producer/single-consumer channels and a cooperative
//! runner for a network of actors.
//!
//! Every actor only talks through channels, so the words that come out of
//! the network do not depend on the order actors are stepped in or on the
//! channel capacities. [`Schedule`] exists to exercise that property.

use alloc::boxed::Box;
use alloc::collections::VecDeque;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Fault, StreamPacket};

pub type ChannelId = usize;

#[derive(Debug)]
struct Fifo {
    name: String,
    capacity: usize,
    queue: VecDeque<StreamPacket>,
    packets: u64,
    words: u64,
    high_water: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceKind {
    Push,
    Pop,
}

/// One channel event, stamped with the runner round it happened in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub cycle: u64,
    pub channel: String,
    pub kind: TraceKind,
    pub words: usize,
    pub last: bool,
    pub occupancy: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelStats {
    pub name: String,
    pub packets: u64,
    pub words: u64,
    pub high_water: usize,
}

#[derive(Debug, Default)]
pub struct Channels {
    fifos: Vec<Fifo>,
    cycle: u64,
    trace: Option<Vec<TraceEvent>>,
}

impl Channels {
    pub fn new(trace: bool) -> Self {
        Self {
            fifos: Vec::new(),
            cycle: 0,
            trace: trace.then(Vec::new),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, capacity: usize) -> ChannelId {
        assert!(capacity > 0, "channel capacity must be at least one packet");
        self.fifos.push(Fifo {
            name: name.into(),
            capacity,
            queue: VecDeque::new(),
            packets: 0,
            words: 0,
            high_water: 0,
        });
        self.fifos.len() - 1
    }

    pub fn can_push(&self, id: ChannelId) -> bool {
        let f = &self.fifos[id];
        f.queue.len() < f.capacity
    }

    /// Push onto a channel the caller has checked with [`Channels::can_push`].
    pub fn push(&mut self, id: ChannelId, packet: StreamPacket) {
        let f = &mut self.fifos[id];
        assert!(f.queue.len() < f.capacity, "push on full channel {}", f.name);
        f.packets += 1;
        f.words += packet.words.len() as u64;
        if let Some(t) = &mut self.trace {
            t.push(TraceEvent {
                cycle: self.cycle,
                channel: f.name.clone(),
                kind: TraceKind::Push,
                words: packet.words.len(),
                last: packet.last,
                occupancy: f.queue.len() + 1,
            });
        }
        f.queue.push_back(packet);
        f.high_water = f.high_water.max(f.queue.len());
    }

    pub fn peek(&self, id: ChannelId) -> Option<&StreamPacket> {
        self.fifos[id].queue.front()
    }

    pub fn pop(&mut self, id: ChannelId) -> Option<StreamPacket> {
        let f = &mut self.fifos[id];
        let p = f.queue.pop_front()?;
        if let Some(t) = &mut self.trace {
            t.push(TraceEvent {
                cycle: self.cycle,
                channel: f.name.clone(),
                kind: TraceKind::Pop,
                words: p.words.len(),
                last: p.last,
                occupancy: f.queue.len(),
            });
        }
        Some(p)
    }

    pub fn is_empty(&self, id: ChannelId) -> bool {
        self.fifos[id].queue.is_empty()
    }

    pub fn stats(&self) -> Vec<ChannelStats> {
        self.fifos
            .iter()
            .map(|f| ChannelStats {
                name: f.name.clone(),
                packets: f.packets,
                words: f.words,
                high_water: f.high_water,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    /// Moved at least one packet.
    Busy,
    /// Blocked on an empty input or a full output.
    Idle,
    /// Finished; will not be stepped again.
    Done,
}

pub trait Actor {
    fn name(&self) -> String;
    fn step(&mut self, ch: &mut Channels) -> Result<Step, Fault>;
}

/// Order in which actors are stepped within a round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Schedule {
    #[default]
    Forward,
    Reverse,
    /// A fresh pseudo-random permutation every round.
    Shuffled(u64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunStats {
    pub rounds: u64,
    pub channels: Vec<ChannelStats>,
}

impl RunStats {
    pub fn channel(&self, name: &str) -> Option<&ChannelStats> {
        self.channels.iter().find(|c| c.name == name)
    }
}

/// Actors plus the channels between them. Channels listed as sinks are
/// drained by the runner at the end of every round, the way a DMA engine
/// writes a stream back to memory.
#[derive(Default)]
pub struct Network {
    pub channels: Channels,
    actors: Vec<Box<dyn Actor>>,
    sinks: Vec<(ChannelId, Vec<StreamPacket>)>,
}

impl Network {
    pub fn new(trace: bool) -> Self {
        Self {
            channels: Channels::new(trace),
            actors: Vec::new(),
            sinks: Vec::new(),
        }
    }

    pub fn channel(&mut self, name: impl Into<String>, capacity: usize) -> ChannelId {
        self.channels.add(name, capacity)
    }

    pub fn actor(&mut self, a: impl Actor + 'static) {
        self.actors.push(Box::new(a));
    }

    pub fn sink(&mut self, id: ChannelId) {
        self.sinks.push((id, Vec::new()));
    }

    /// Packets collected from sink `id`.
    pub fn take_sink(&mut self, id: ChannelId) -> Vec<StreamPacket> {
        self.sinks
            .iter_mut()
            .find(|(c, _)| *c == id)
            .map(|(_, v)| core::mem::take(v))
            .unwrap_or_default()
    }

    pub fn take_trace(&mut self) -> Option<Vec<TraceEvent>> {
        self.channels.trace.take()
    }

    fn drain_sinks(&mut self) -> bool {
        let mut moved = false;
        for (id, out) in &mut self.sinks {
            while let Some(p) = self.channels.pop(*id) {
                out.push(p);
                moved = true;
            }
        }
        moved
    }

    /// Step actors until all are done. A round in which nothing moves while
    /// some actor is unfinished is a deadlock.
    pub fn run(&mut self, schedule: Schedule) -> Result<RunStats, Fault> {
        let n = self.actors.len();
        let mut done = alloc::vec![false; n];
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = match schedule {
            Schedule::Shuffled(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
            _ => None,
        };
        if schedule == Schedule::Reverse {
            order.reverse();
        }
        let mut rounds = 0u64;
        loop {
            if let Some(rng) = &mut rng {
                order.shuffle(rng);
            }
            let mut progressed = false;
            for &i in &order {
                if done[i] {
                    continue;
                }
                match self.actors[i].step(&mut self.channels)? {
                    Step::Busy => progressed = true,
                    Step::Idle => {}
                    Step::Done => {
                        done[i] = true;
                        progressed = true;
                    }
                }
            }
            progressed |= self.drain_sinks();
            rounds += 1;
            self.channels.cycle = rounds;
            if done.iter().all(|&d| d) {
                break;
            }
            if !progressed {
                let blocked = order
                    .iter()
                    .filter(|&&i| !done[i])
                    .map(|&i| self.actors[i].name())
                    .collect();
                return Err(Fault::Deadlock { blocked });
            }
        }
        Ok(RunStats {
            rounds,
            channels: self.channels.stats(),
        })
    }
}

/// Feeds a prepared packet list into a channel, one packet per step.
pub struct Source {
    name: String,
    out: ChannelId,
    packets: VecDeque<StreamPacket>,
}

impl Source {
    pub fn new(name: impl Into<String>, out: ChannelId, packets: impl IntoIterator<Item = StreamPacket>) -> Self {
        Self {
            name: name.into(),
            out,
            packets: packets.into_iter().collect(),
        }
    }
}

impl Actor for Source {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn step(&mut self, ch: &mut Channels) -> Result<Step, Fault> {
        if self.packets.is_empty() {
            return Ok(Step::Done);
        }
        if !ch.can_push(self.out) {
            return Ok(Step::Idle);
        }
        let p = self.packets.pop_front().expect("checked non-empty");
        ch.push(self.out, p);
        Ok(Step::Busy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fxp::FixedPointFormat;
    use alloc::vec;

    struct Doubler {
        input: ChannelId,
        out: ChannelId,
        left: usize,
    }

    impl Actor for Doubler {
        fn name(&self) -> String {
            "doubler".into()
        }
        fn step(&mut self, ch: &mut Channels) -> Result<Step, Fault> {
            if self.left == 0 {
                return Ok(Step::Done);
            }
            if ch.peek(self.input).is_none() || !ch.can_push(self.out) {
                return Ok(Step::Idle);
            }
            let mut p = ch.pop(self.input).unwrap();
            for w in &mut p.words {
                *w = w.saturating_add(*w);
            }
            ch.push(self.out, p);
            self.left -= 1;
            Ok(Step::Busy)
        }
    }

    fn packets(n: usize) -> Vec<StreamPacket> {
        let f = FixedPointFormat::new(8, 8).unwrap();
        (0..n)
            .map(|i| StreamPacket::new(vec![f.word(i as i64).unwrap()], i + 1 == n))
            .collect()
    }

    fn run(cap: usize, schedule: Schedule, trace: bool) -> (Vec<StreamPacket>, RunStats, Option<Vec<TraceEvent>>) {
        let mut net = Network::new(trace);
        let a = net.channel("a", cap);
        let b = net.channel("b", cap);
        net.actor(Doubler {
            input: a,
            out: b,
            left: 10,
        });
        net.actor(Source::new("src", a, packets(10)));
        net.sink(b);
        let stats = net.run(schedule).unwrap();
        (net.take_sink(b), stats, net.take_trace())
    }

    #[test]
    fn output_is_schedule_and_capacity_invariant() {
        let (base, _, _) = run(16, Schedule::Forward, false);
        assert_eq!(base.len(), 10);
        assert_eq!(base[3].words[0].raw(), 6);
        for cap in [1, 2, 5] {
            for s in [Schedule::Forward, Schedule::Reverse, Schedule::Shuffled(7)] {
                assert_eq!(run(cap, s, false).0, base);
            }
        }
    }

    #[test]
    fn bounded_channels_respect_capacity() {
        let (_, stats, _) = run(2, Schedule::Reverse, false);
        assert!(stats.channels.iter().all(|c| c.high_water <= 2));
        assert_eq!(stats.channel("a").unwrap().packets, 10);
    }

    #[test]
    fn trace_records_every_push_and_pop() {
        let (_, _, trace) = run(4, Schedule::Forward, true);
        let t = trace.unwrap();
        assert_eq!(t.iter().filter(|e| e.kind == TraceKind::Push).count(), 20);
        assert_eq!(t.iter().filter(|e| e.kind == TraceKind::Pop).count(), 20);
        assert!(t.windows(2).all(|w| w[0].cycle <= w[1].cycle));
    }

    #[test]
    fn starved_actor_is_a_deadlock() {
        let mut net = Network::new(false);
        let a = net.channel("a", 1);
        let b = net.channel("b", 1);
        net.actor(Doubler {
            input: a,
            out: b,
            left: 3,
        });
        net.actor(Source::new("src", a, packets(2)));
        net.sink(b);
        match net.run(Schedule::Forward) {
            Err(Fault::Deadlock { blocked }) => assert_eq!(blocked, vec![String::from("doubler")]),
            other => panic!("expected deadlock, got {other:?}"),
        }
    }
}
