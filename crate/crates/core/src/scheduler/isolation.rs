//! OS-level placement of worker threads once plans hold reservations. With spare
//! CPUs, reserved workers are pinned to their own CPU and shared workers are kept
//! off it; when there are not enough CPUs, shared workers run at lower priority.

/// Where a worker should run given `reserved` reserved workers in total.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Placement {
    /// No constraint.
    Any,
    /// Pinned to one CPU (a reserved worker).
    Cpu(usize),
    /// Any of the CPUs below `limit` (a shared worker).
    Below(usize),
    /// Shared worker on an oversubscribed host.
    Background,
}

/// Placement for a worker. `slot` is the reserved worker's index, `None` for shared.
pub fn placement(cpus: usize, reserved: usize, slot: Option<usize>) -> Placement {
    if reserved == 0 {
        return Placement::Any;
    }
    let spare = cpus > reserved;
    match (slot, spare) {
        (Some(i), true) => Placement::Cpu(cpus - 1 - i % reserved),
        (Some(_), false) => Placement::Any,
        (None, true) => Placement::Below(cpus - reserved),
        (None, false) => Placement::Background,
    }
}

/// Niceness given to shared workers when placement falls back to priority.
pub const BACKGROUND_NICE: i32 = 19;

/// Applies `p` to the calling thread. Best effort: failures leave it unconstrained.
#[cfg(target_os = "linux")]
pub fn apply(p: &Placement, cpus: usize) {
    // SAFETY: cpu_set_t is plain data, and both calls only affect the calling thread.
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        let cpu_range = match p {
            Placement::Cpu(c) => *c..*c + 1,
            Placement::Below(n) => 0..*n,
            Placement::Any | Placement::Background => 0..cpus,
        };
        for c in cpu_range {
            libc::CPU_SET(c, &mut set);
        }
        libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set);
        let nice = if *p == Placement::Background {
            BACKGROUND_NICE
        } else {
            0
        };
        libc::setpriority(libc::PRIO_PROCESS, libc::gettid() as libc::id_t, nice);
    }
}

#[cfg(not(target_os = "linux"))]
pub fn apply(_: &Placement, _: usize) {}
