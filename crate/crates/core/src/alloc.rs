//! Allocator tuning for training processes.
//!
//! Every training step allocates and frees tens of megabytes of activations.
//! glibc hands blocks that large straight back to the kernel, so each step
//! pays for fresh page faults; on small VMs that costs as much as the
//! arithmetic. Raising the mmap and trim thresholds keeps the memory in the
//! process heap for reuse.

/// Opt-in, process-wide. A no-op off glibc.
pub fn retain_freed_memory() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator parameters; it is called before
    // any worker threads exist in our binaries and has no memory effects.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
    }
}
