use stein_quad::bench::alloc::{current_allocated_bytes, peak_allocated_bytes, reset_peak, PeakAlloc};

#[global_allocator]
static ALLOC: PeakAlloc = PeakAlloc;

#[test]
fn peak_tracks_large_allocations() {
    let before = current_allocated_bytes().unwrap_or(0);
    let big = vec![1u8; 8 << 20];
    let peak = peak_allocated_bytes().expect("allocator installed");
    assert!(peak >= before + (8 << 20), "peak {peak} below the live 8 MiB buffer");
    assert!(current_allocated_bytes().expect("allocator installed") >= 8 << 20);
    drop(big);

    reset_peak();
    let after = peak_allocated_bytes().expect("allocator installed");
    assert!(after < peak, "reset did not lower the peak ({after} vs {peak})");
    let grown: Vec<u64> = (0..1000).collect();
    assert!(peak_allocated_bytes().unwrap() >= after + grown.len() * 8 - 64);
}
