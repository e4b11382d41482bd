//! Process peak resident memory via procfs.

use std::fs;

/// Reset the kernel's peak-RSS counter. Returns `false` where unsupported.
pub fn reset_peak() -> bool {
    fs::write("/proc/self/clear_refs", "5").is_ok()
}

fn status_kib(field: &str) -> Option<u64> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    status.lines().find_map(|line| {
        let rest = line.strip_prefix(field)?.strip_prefix(':')?;
        rest.trim().trim_end_matches("kB").trim().parse().ok()
    })
}

/// Peak resident set size since start or the last [`reset_peak`].
pub fn peak_rss_bytes() -> Option<u64> {
    status_kib("VmHWM").map(|k| k * 1024)
}

pub fn current_rss_bytes() -> Option<u64> {
    status_kib("VmRSS").map(|k| k * 1024)
}

/// Run `f` and report how far the peak RSS rose above the starting RSS.
///
/// `None` when the platform does not expose or cannot reset the counter.
pub fn measure_peak<R>(f: impl FnOnce() -> R) -> (R, Option<u64>) {
    let armed = reset_peak();
    let base = current_rss_bytes();
    let out = f();
    let peak = match (armed, base, peak_rss_bytes()) {
        (true, Some(b), Some(p)) => Some(p.saturating_sub(b)),
        _ => None,
    };
    (out, peak)
}
