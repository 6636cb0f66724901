use serde::{Deserialize, Serialize};

use super::Instrument;

pub const CH_LASER: u8 = 1 << 0;
pub const CH_MW: u8 = 1 << 1;
pub const CH_SYNC: u8 = 1 << 2;

/// Hardware limits of the pulse generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HardwareConstraints {
    pub min_pulse_width_ns: u64,
    pub max_instructions: usize,
}

impl Default for HardwareConstraints {
    fn default() -> Self {
        Self { min_pulse_width_ns: 2, max_instructions: 4096 }
    }
}

/// One pulse-generator state held for `duration_ns`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Instruction {
    pub mask: u8,
    pub duration_ns: u64,
    /// MW phase (rad) carried as metadata while the MW channel is high.
    pub mw_phase: f64,
}

impl Instruction {
    pub fn new(mask: u8, duration_ns: u64) -> Self {
        Self { mask, duration_ns, mw_phase: 0.0 }
    }
}

/// A run of instructions repeated `repeat` times in hardware.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub instructions: Vec<Instruction>,
    pub repeat: u32,
}

impl Section {
    pub fn duration_ns(&self) -> u64 {
        self.instructions.iter().map(|i| i.duration_ns).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulseProgram {
    pub channels: Vec<String>,
    pub sections: Vec<Section>,
    /// Whole-program repetitions.
    pub repetitions: u32,
}

impl PulseProgram {
    pub fn default_channels() -> Vec<String> {
        vec!["laser".into(), "mw_switch".into(), "sync".into()]
    }

    pub fn instruction_count(&self) -> usize {
        self.sections.iter().map(|s| s.instructions.len()).sum()
    }

    pub fn duration_ns(&self) -> u64 {
        self.repetitions as u64 * self.sections.iter().map(|s| s.duration_ns() * s.repeat as u64).sum::<u64>()
    }

    /// Every executed instruction with its absolute start time (ns), in order.
    pub fn timeline(&self) -> impl Iterator<Item = (u64, Instruction)> + '_ {
        let mut t = 0u64;
        (0..self.repetitions).flat_map(move |_| {
            self.sections.iter().flat_map(move |s| (0..s.repeat).flat_map(move |_| s.instructions.iter().copied()))
        })
        .map(move |i| {
            let start = t;
            t += i.duration_ns;
            (start, i)
        })
    }

    /// High intervals `(start, stop, phase)` of the channels in `mask`, merged across instructions.
    pub fn edges(&self, mask: u8) -> Vec<(u64, u64, f64)> {
        let mut out: Vec<(u64, u64, f64)> = Vec::new();
        for (t, ins) in self.timeline() {
            if ins.mask & mask == 0 || ins.duration_ns == 0 {
                continue;
            }
            match out.last_mut() {
                Some(last) if last.1 == t && last.2 == ins.mw_phase => last.1 = t + ins.duration_ns,
                _ => out.push((t, t + ins.duration_ns, ins.mw_phase)),
            }
        }
        out
    }
}

/// Virtual pulse generator holding one loaded program.
#[derive(Debug, Clone, Default)]
pub struct VirtualPulser {
    pub constraints: HardwareConstraints,
    pub program: Option<PulseProgram>,
}

impl Instrument for VirtualPulser {
    fn name(&self) -> &'static str {
        "pulse_generator"
    }
    fn dummy_info(&self) -> String {
        format!(
            "virtual pulse generator: 1 ns grid, min width {} ns, max {} instructions, {}",
            self.constraints.min_pulse_width_ns,
            self.constraints.max_instructions,
            match &self.program {
                Some(p) => format!("{} instructions loaded", p.instruction_count()),
                None => "idle".into(),
            }
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timeline_and_edges() {
        let p = PulseProgram {
            channels: PulseProgram::default_channels(),
            sections: vec![Section {
                instructions: vec![Instruction::new(CH_LASER, 10), Instruction::new(0, 5), Instruction::new(CH_LASER | CH_SYNC, 3)],
                repeat: 2,
            }],
            repetitions: 1,
        };
        assert_eq!(p.duration_ns(), 36);
        assert_eq!(p.timeline().count(), 6);
        let e: Vec<_> = p.edges(CH_LASER).iter().map(|e| (e.0, e.1)).collect();
        assert_eq!(e, vec![(0, 10), (15, 28), (33, 36)]);
        assert_eq!(p.edges(CH_SYNC).len(), 2);
    }
}
