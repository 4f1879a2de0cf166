use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::address::{PhysicalAddress, VirtualAddress, PAGE_SIZE};
use crate::attacks::{address_translation_attack, GadgetDriver, TranslationSearch};
use crate::error::{Error, Result};
use crate::kernel::{MachineConfig, MachineState, Pid, FLUSH_CYCLES};
use crate::par::{derive_seed, Execution};

/// Cost of one Flush+Reload of an uncached line.
pub fn probe_round_trip(m: &MachineState) -> u64 {
    m.config().cache.miss_latency + FLUSH_CYCLES
}

pub fn default_window(m: &MachineState) -> u64 {
    4 * probe_round_trip(m)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CovertFrame {
    pub payload: Vec<bool>,
    /// Cycles per bit.
    pub window: u64,
    /// Line of the receiver page that carries the bits.
    pub line_index: u64,
}

impl CovertFrame {
    pub fn new(m: &MachineState, payload: Vec<bool>, window: u64, line_index: u64) -> Result<Self> {
        let rt = probe_round_trip(m);
        if window < rt {
            return Err(Error::config(format!("window {window} is shorter than one probe round trip ({rt})")));
        }
        let lines = PAGE_SIZE / m.line_size();
        if line_index >= lines {
            return Err(Error::config(format!("line index {line_index} outside a {lines}-line page")));
        }
        Ok(CovertFrame {
            payload,
            window,
            line_index,
        })
    }

    /// Bytes are sent most significant bit first.
    pub fn from_bytes(m: &MachineState, bytes: &[u8], window: u64, line_index: u64) -> Result<Self> {
        Self::new(m, bytes_to_bits(bytes), window, line_index)
    }
}

pub fn bytes_to_bits(bytes: &[u8]) -> Vec<bool> {
    bytes
        .iter()
        .flat_map(|&b| (0..8).rev().map(move |i| b >> i & 1 == 1))
        .collect()
}

pub fn bits_to_bytes(bits: &[bool]) -> Vec<u8> {
    bits.chunks(8)
        .map(|c| c.iter().fold(0u8, |acc, &b| acc << 1 | b as u8))
        .collect()
}

/// Sender and receiver bound to one receiver page.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CovertChannel {
    pub sender: Pid,
    pub receiver: Pid,
    pub receiver_page: VirtualAddress,
    /// Physical address of the receiver page, as learned by the sender.
    pub page_physical: PhysicalAddress,
    pub driver: GadgetDriver,
    /// Cycle at which window 0 starts.
    pub epoch: u64,
}

impl CovertChannel {
    /// Resolves the physical address of `receiver_page` with the translation
    /// attack and fixes the window epoch at the current cycle.
    pub fn establish(
        m: &mut MachineState,
        sender: Pid,
        receiver: Pid,
        receiver_page: VirtualAddress,
        search: &TranslationSearch,
        driver: GadgetDriver,
    ) -> Result<Self> {
        let found = address_translation_attack(m, receiver, receiver_page, search, &driver)?;
        let page_physical = found
            .physical
            .ok_or_else(|| Error::Aborted("receiver page could not be translated".into()))?;
        Ok(CovertChannel {
            sender,
            receiver,
            receiver_page,
            page_physical,
            driver,
            epoch: m.cycle(),
        })
    }

    fn window_start(&self, cycle: u64, window: u64) -> u64 {
        self.epoch + (cycle.saturating_sub(self.epoch)) / window * window
    }

    fn next_boundary(&self, cycle: u64, window: u64) -> u64 {
        let start = self.window_start(cycle, window);
        if start == cycle.max(self.epoch) {
            start
        } else {
            start + window
        }
    }
}

fn idle_until(m: &mut MachineState, cycle: u64) -> Result<()> {
    m.idle(cycle.saturating_sub(m.cycle()))
}

/// Sends one bit in the next window. A 1 keeps the gadget busy on the
/// receiver line for half the window; a 0 stays idle. Returns with the
/// clock one probe round trip before the window ends.
pub fn covert_send(m: &mut MachineState, ch: &CovertChannel, frame: &CovertFrame, bit: bool) -> Result<()> {
    let start = ch.next_boundary(m.cycle(), frame.window);
    idle_until(m, start)?;
    if bit {
        let target = PhysicalAddress(ch.page_physical.0 + frame.line_index * m.line_size());
        let value = m.dpm_address(target)?.0;
        loop {
            ch.driver.fire(m, ch.sender, value)?;
            if m.cycle() >= start + frame.window / 2 {
                break;
            }
        }
    }
    idle_until(m, start + frame.window - probe_round_trip(m))
}

/// Probes the receiver line: a hit reads as 1. Leaves the line flushed and
/// the clock at the end of the current window.
pub fn covert_receive(m: &mut MachineState, ch: &CovertChannel, frame: &CovertFrame) -> Result<bool> {
    let start = ch.window_start(m.cycle(), frame.window);
    let v = ch.receiver_page.offset(frame.line_index * m.line_size());
    let bit = m.probe(ch.receiver, v)?.is_hit();
    idle_until(m, start + frame.window)?;
    Ok(bit)
}

/// Sends the whole payload and returns what the receiver decoded.
pub fn transmit(m: &mut MachineState, ch: &CovertChannel, frame: &CovertFrame) -> Result<Vec<bool>> {
    let mut received = Vec::with_capacity(frame.payload.len());
    for &bit in &frame.payload {
        covert_send(m, ch, frame, bit)?;
        received.push(covert_receive(m, ch, frame)?);
    }
    Ok(received)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CovertBenchmark {
    pub runs: u32,
    pub bits: u64,
    pub bit_errors: u64,
    pub error_rate: f64,
    /// Bits per million simulated cycles.
    pub bitrate: f64,
    pub transmit_cycles: u64,
}

pub const SENDER: Pid = Pid(1);
pub const RECEIVER: Pid = Pid(2);
const RECEIVER_PAGE: VirtualAddress = VirtualAddress(0x7f3a_0000_0000);

/// One run on a fresh machine: the receiver page lands on a random frame,
/// the sender translates it, then the message goes through the channel.
pub fn covert_run(config: &MachineConfig, seed: u64, message: &[u8], window: Option<u64>) -> Result<(Vec<bool>, u64)> {
    let mut m = MachineState::new(config.clone(), seed)?;
    let frames = m.memory_size() / PAGE_SIZE;
    let frame = ChaCha8Rng::seed_from_u64(seed).gen_range(1..frames);
    m.spawn_process(SENDER)?;
    m.spawn_process(RECEIVER)?;
    m.map_page(RECEIVER, RECEIVER_PAGE, PhysicalAddress::from_frame(frame, 0), true)?;
    let driver = GadgetDriver::default_for(&m);
    let search = TranslationSearch::full(&m).sweeps(8).confirmations(2);
    let window = window.unwrap_or_else(|| default_window(&m));
    let frame = CovertFrame::from_bytes(&m, message, window, 0)?;
    let ch = CovertChannel::establish(&mut m, SENDER, RECEIVER, RECEIVER_PAGE, &search, driver)?;
    let start = m.cycle();
    let received = transmit(&mut m, &ch, &frame)?;
    Ok((received, m.cycle() - start))
}

/// Transmits `message` `runs` times, each run on its own machine seeded
/// from `seed`.
pub fn covert_benchmark(
    config: &MachineConfig,
    seed: u64,
    message: &[u8],
    runs: u32,
    window: Option<u64>,
    exec: Execution,
) -> Result<CovertBenchmark> {
    if let Some(w) = window {
        let probe = MachineState::new(config.clone(), seed)?;
        CovertFrame::new(&probe, Vec::new(), w, 0)?;
    }
    let sent = bytes_to_bits(message);
    let results = exec.map_range(runs as u64, |i| covert_run(config, derive_seed(seed, i), message, window));
    let mut bits = 0;
    let mut bit_errors = 0;
    let mut transmit_cycles = 0;
    for r in results {
        let (received, cycles) = r?;
        bits += sent.len() as u64;
        bit_errors += sent.iter().zip(&received).filter(|(a, b)| a != b).count() as u64;
        transmit_cycles += cycles;
    }
    let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
    Ok(CovertBenchmark {
        runs,
        bits,
        bit_errors,
        error_rate: ratio(bit_errors as f64, bits as f64),
        bitrate: ratio(bits as f64 * 1e6, transmit_cycles as f64),
        transmit_cycles,
    })
}
