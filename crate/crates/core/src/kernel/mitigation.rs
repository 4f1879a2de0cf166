use sha2::{Digest, Sha256};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum L1dFlushPolicy {
    None,
    /// Flush only lines the host has marked sensitive.
    Conditional,
    /// Flush the whole L1D on every VM entry.
    Always,
}

impl L1dFlushPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            L1dFlushPolicy::None => "none",
            L1dFlushPolicy::Conditional => "conditional",
            L1dFlushPolicy::Always => "always",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "none" => L1dFlushPolicy::None,
            "conditional" | "cond" => L1dFlushPolicy::Conditional,
            "always" => L1dFlushPolicy::Always,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CpuOrder {
    InOrder,
    OutOfOrder,
}

impl CpuOrder {
    pub fn as_str(self) -> &'static str {
        match self {
            CpuOrder::InOrder => "in_order",
            CpuOrder::OutOfOrder => "out_of_order",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "in_order" | "inorder" => CpuOrder::InOrder,
            "out_of_order" | "ooo" => CpuOrder::OutOfOrder,
            _ => return None,
        })
    }
}

/// Which leaks exist on the simulated machine.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MitigationConfig {
    /// Retpoline on indirect branches in kernel entry code.
    pub spectre_btb: bool,
    pub kaiser: bool,
    pub smap: bool,
    pub register_clearing_on_syscall: bool,
    pub register_clearing_on_vmexit: bool,
    pub l1d_flush_on_vmentry: L1dFlushPolicy,
    pub cpu_order: CpuOrder,
    pub meltdown_us_vulnerable: bool,
    pub l1tf_vulnerable: bool,
}

impl Default for MitigationConfig {
    /// A machine booted with `nospectre_v2`: KAISER, SMAP and the KVM
    /// register clearing are on, Foreshadow mitigated by conditional L1D
    /// flushes, silicon still vulnerable.
    fn default() -> Self {
        MitigationConfig {
            spectre_btb: false,
            kaiser: true,
            smap: true,
            register_clearing_on_syscall: false,
            register_clearing_on_vmexit: true,
            l1d_flush_on_vmentry: L1dFlushPolicy::Conditional,
            cpu_order: CpuOrder::OutOfOrder,
            meltdown_us_vulnerable: true,
            l1tf_vulnerable: true,
        }
    }
}

impl MitigationConfig {
    /// Speculation reaches the wrong indirect-branch target in kernel code.
    pub fn kernel_speculation(&self) -> bool {
        !self.spectre_btb && self.cpu_order == CpuOrder::OutOfOrder
    }

    /// `key=value` pairs in a fixed order; the basis of the fingerprint.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let flag = |b: bool| if b { "on" } else { "off" }.to_string();
        vec![
            ("spectre_btb", flag(self.spectre_btb)),
            ("kaiser", flag(self.kaiser)),
            ("smap", flag(self.smap)),
            ("register_clearing_on_syscall", flag(self.register_clearing_on_syscall)),
            ("register_clearing_on_vmexit", flag(self.register_clearing_on_vmexit)),
            ("l1d_flush_on_vmentry", self.l1d_flush_on_vmentry.as_str().to_string()),
            ("cpu_order", self.cpu_order.as_str().to_string()),
            ("meltdown_us_vulnerable", flag(self.meltdown_us_vulnerable)),
            ("l1tf_vulnerable", flag(self.l1tf_vulnerable)),
        ]
    }

    /// Sets one field from its config-file spelling.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let flag = || match value {
            "on" | "true" | "1" | "yes" => Ok(true),
            "off" | "false" | "0" | "no" => Ok(false),
            _ => Err(format!("expected on/off for {key}, got '{value}'")),
        };
        match key {
            "spectre_btb" => self.spectre_btb = flag()?,
            "kaiser" => self.kaiser = flag()?,
            "smap" => self.smap = flag()?,
            "register_clearing_on_syscall" => self.register_clearing_on_syscall = flag()?,
            "register_clearing_on_vmexit" => self.register_clearing_on_vmexit = flag()?,
            "meltdown_us_vulnerable" => self.meltdown_us_vulnerable = flag()?,
            "l1tf_vulnerable" => self.l1tf_vulnerable = flag()?,
            "l1d_flush_on_vmentry" => {
                self.l1d_flush_on_vmentry =
                    L1dFlushPolicy::parse(value).ok_or_else(|| format!("unknown L1D flush policy '{value}'"))?
            }
            "cpu_order" => {
                self.cpu_order = CpuOrder::parse(value).ok_or_else(|| format!("unknown cpu order '{value}'"))?
            }
            _ => return Err(format!("unknown mitigation '{key}'")),
        }
        Ok(())
    }

    /// First 16 hex digits of SHA-256 over the canonical entries.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b";");
        }
        hex::encode(&h.finalize()[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprint_is_stable_and_sensitive() {
        let a = MitigationConfig::default();
        let mut b = a;
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 16);
        b.kaiser = false;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn set_round_trips_entries() {
        let mut m = MitigationConfig::default();
        m.spectre_btb = true;
        m.cpu_order = CpuOrder::InOrder;
        m.l1d_flush_on_vmentry = L1dFlushPolicy::Always;
        let mut n = MitigationConfig::default();
        for (k, v) in m.entries() {
            n.set(k, &v).unwrap();
        }
        assert_eq!(m, n);
        assert!(n.set("smap", "maybe").is_err());
        assert!(n.set("nonsense", "on").is_err());
    }

    #[test]
    fn in_order_never_speculates() {
        let mut m = MitigationConfig::default();
        assert!(m.kernel_speculation());
        m.cpu_order = CpuOrder::InOrder;
        assert!(!m.kernel_speculation());
        m.cpu_order = CpuOrder::OutOfOrder;
        m.spectre_btb = true;
        assert!(!m.kernel_speculation());
    }
}
