use std::collections::BTreeSet;

use proptest::prelude::*;

use specderef::address::{PhysicalAddress, VirtualAddress, DEFAULT_DPM_BASE, PAGE_SIZE};
use specderef::attacks::{
    address_translation_attack, bits_to_bytes, bytes_to_bits, covert_run, dereference_trap, foreshadow_l3_attack,
    meltdown_l3_experiment, GadgetDriver, GuestTrigger, TranslationSearch, TypeConfusionGadget,
};
use specderef::kernel::{
    Action, CpuOrder, L1dFlushPolicy, MachineConfig, MachineState, MitigationConfig, NoiseModel, Pid, Register,
};
use specderef::microarch::{CacheConfig, CacheState, HitLevel, LevelName};

const PID: Pid = Pid(1);
const USER: VirtualAddress = VirtualAddress(0x7f55_0000_0000);

fn fills(m: &MachineState) -> BTreeSet<u64> {
    m.events()
        .iter()
        .filter(|e| e.is_speculative_fill())
        .filter_map(|e| match e.action {
            Action::Access { p, .. } => Some(p.0 / 64),
            _ => None,
        })
        .collect()
}

fn mitigations() -> impl Strategy<Value = MitigationConfig> {
    (any::<[bool; 7]>(), 0usize..3).prop_map(|(b, f)| MitigationConfig {
        spectre_btb: b[0],
        kaiser: b[1],
        smap: b[2],
        register_clearing_on_syscall: b[3],
        register_clearing_on_vmexit: b[4],
        l1d_flush_on_vmentry: [L1dFlushPolicy::None, L1dFlushPolicy::Conditional, L1dFlushPolicy::Always][f],
        cpu_order: if b[5] { CpuOrder::InOrder } else { CpuOrder::OutOfOrder },
        meltdown_us_vulnerable: b[6],
        l1tf_vulnerable: true,
    })
}

fn register_values() -> impl Strategy<Value = Vec<u64>> {
    let value = prop_oneof![
        (0u64..1 << 24).prop_map(|o| DEFAULT_DPM_BASE + o),
        (0..PAGE_SIZE).prop_map(|o| USER.0 + o),
        any::<u64>(),
    ];
    prop::collection::vec(value, 16)
}

fn entry_fills(mit: MitigationConfig, values: &[u64], trainer: usize, victim: usize, interrupt: bool) -> BTreeSet<u64> {
    let mut m = MachineState::new(MachineConfig::with_mitigations(mit), 9).unwrap();
    m.spawn_process(PID).unwrap();
    m.map_page(PID, USER, PhysicalAddress::from_frame(77, 0), true).unwrap();
    for r in Register::fillable() {
        m.write_registers(&[r], values[r.index()]).unwrap();
    }
    if interrupt {
        m.deliver_interrupt(PID).unwrap();
    } else {
        let (a, b) = (m.syscall_table()[trainer].id, m.syscall_table()[victim].id);
        m.do_syscall(PID, a).unwrap();
        m.do_syscall(PID, b).unwrap();
    }
    fills(&m)
}

fn strengthen(mit: MitigationConfig, which: usize) -> MitigationConfig {
    let mut s = mit;
    match which {
        0 => s.spectre_btb = true,
        1 => s.smap = true,
        2 => s.register_clearing_on_syscall = true,
        _ => s.cpu_order = CpuOrder::InOrder,
    }
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bit_encoding_round_trips(bytes in prop::collection::vec(any::<u8>(), 0..=1024)) {
        let bits = bytes_to_bits(&bytes);
        prop_assert_eq!(bits.len(), bytes.len() * 8);
        prop_assert_eq!(bits_to_bytes(&bits), bytes);
    }

    #[test]
    fn stronger_mitigation_never_adds_fills(
        mit in mitigations(),
        values in register_values(),
        trainer in 0usize..8,
        victim in 0usize..8,
        interrupt in any::<bool>(),
        which in 0usize..4,
    ) {
        let weak = entry_fills(mit, &values, trainer, victim, interrupt);
        let strong = entry_fills(strengthen(mit, which), &values, trainer, victim, interrupt);
        prop_assert!(strong.is_subset(&weak), "{:?} vs {:?}", strong, weak);
    }

    #[test]
    fn kaiser_does_not_change_kernel_entry(
        mit in mitigations(),
        values in register_values(),
        trainer in 0usize..8,
        victim in 0usize..8,
        interrupt in any::<bool>(),
    ) {
        let on = entry_fills(MitigationConfig { kaiser: true, ..mit }, &values, trainer, victim, interrupt);
        let off = entry_fills(MitigationConfig { kaiser: false, ..mit }, &values, trainer, victim, interrupt);
        prop_assert_eq!(on, off);
    }

    #[test]
    fn cache_stays_inclusive(ops in prop::collection::vec((0u8..4, 0u64..4096), 1..600)) {
        let mut c = CacheState::new(CacheConfig::default()).unwrap();
        for (op, line) in ops {
            let p = PhysicalAddress(line * 64 * 37 % (1 << 24));
            match op {
                0 => { c.access(p).unwrap(); }
                1 => c.remote_access(p).unwrap(),
                2 => c.flush(p).unwrap(),
                _ => { c.evict_from(LevelName::L2, p); }
            }
            prop_assert!(c.inclusion_holds());
        }
    }

    #[test]
    fn cache_is_physically_indexed(frame in 1u64..4096, offset in 0u64..PAGE_SIZE, a in 0u64..1 << 30, b in 0u64..1 << 30) {
        let mut m = MachineState::new(MachineConfig::default(), 1).unwrap();
        m.spawn_process(Pid(1)).unwrap();
        m.spawn_process(Pid(2)).unwrap();
        let va = VirtualAddress(0x1000_0000 + a * PAGE_SIZE);
        let vb = VirtualAddress(0x1000_0000 + b * PAGE_SIZE);
        let p = PhysicalAddress::from_frame(frame, 0);
        m.map_page(Pid(1), va, p, true).unwrap();
        m.map_page(Pid(2), vb, p, true).unwrap();
        m.user_access(Pid(1), va.offset(offset)).unwrap();
        prop_assert_eq!(m.user_access(Pid(2), vb.offset(offset)).unwrap().level, HitLevel::L1);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn covert_channel_decodes_what_was_sent(message in prop::collection::vec(any::<u8>(), 1..=64), seed in any::<u64>()) {
        let (bits, _) = covert_run(&MachineConfig::default(), seed, &message, None).unwrap();
        prop_assert_eq!(bits_to_bytes(&bits), message);
    }

    #[test]
    fn trap_recovers_secret_exactly(secret in any::<u32>()) {
        let pid = Pid(3);
        let mut m = MachineState::new(MachineConfig::default(), 4).unwrap();
        m.spawn_process(pid).unwrap();
        let mut g = TypeConfusionGadget { pid, secret };
        let out = dereference_trap(&mut m, pid, &mut g, PhysicalAddress(0x11_000), PhysicalAddress(0x2F_000), 1).unwrap();
        prop_assert_eq!(out.value, (secret & !0x3F) as u64);
        prop_assert_eq!(out.schedule.len(), 20);
        prop_assert!(out.probes <= 2560);
    }

    #[test]
    fn translation_never_returns_a_wrong_frame(
        frame in 1u64..4096,
        seed in any::<u64>(),
        spec in 0.2f64..=1.0,
        fp in 0.0f64..0.02,
    ) {
        let cfg = MachineConfig {
            noise: NoiseModel { speculation_probability: spec, fp_rate: fp },
            ..Default::default()
        };
        let mut m = MachineState::new(cfg, seed).unwrap();
        m.spawn_process(PID).unwrap();
        m.map_page(PID, USER, PhysicalAddress::from_frame(frame, 0), true).unwrap();
        let lo = frame.saturating_sub(64).max(1);
        let search = TranslationSearch::full(&m).frames(lo..(frame + 64).min(4096)).sweeps(4).confirmations(2);
        let driver = GadgetDriver::default_for(&m);
        let out = address_translation_attack(&mut m, PID, USER.offset(0x240), &search, &driver).unwrap();
        if let Some(p) = out.physical {
            prop_assert_eq!(p, PhysicalAddress::from_frame(frame, 0x240));
        }
    }

    #[test]
    fn kaiser_does_not_change_l3_attacks(mit in mitigations(), line in 1u64..(1 << 18)) {
        let p = PhysicalAddress(line * 64);
        let run = |kaiser: bool| {
            let mit = MitigationConfig { kaiser, ..mit };
            let mut m = MachineState::new(MachineConfig::with_mitigations(mit), 2).unwrap();
            m.spawn_process(PID).unwrap();
            m.register_vm(Pid(6)).unwrap();
            m.plant_secret(p, &[0xA7; 8]).unwrap();
            let d = GadgetDriver::default_for(&m);
            let melt = meltdown_l3_experiment(&mut m, PID, p, Some(&d)).unwrap().read;
            let fore = foreshadow_l3_attack(&mut m, Pid(6), p, 8, GuestTrigger::Interrupt, 1).unwrap().bytes;
            (melt, fore)
        };
        prop_assert_eq!(run(true), run(false));
    }
}
