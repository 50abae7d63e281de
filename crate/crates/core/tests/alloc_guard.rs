//! Allocation guard: on instances with n > 10^4, evaluating the bound and
//! its gradient must never materialize an n x n (or comparably huge) matrix.
//! A tracking allocator records the largest single allocation.

use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use sgplvm_core::kernels::{KernelSpec, VariationalLatentPosterior};
use sgplvm_core::model::{SgplvmModel, TrainableFlags};
use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering};

static MAX_ALLOC: AtomicUsize = AtomicUsize::new(0);

struct TrackingAllocator;

unsafe impl GlobalAlloc for TrackingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        MAX_ALLOC.fetch_max(layout.size(), Ordering::Relaxed);
        unsafe { System.alloc(layout) }
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) }
    }
}

#[global_allocator]
static ALLOCATOR: TrackingAllocator = TrackingAllocator;

#[test]
fn bound_and_gradient_never_materialize_n_by_n() {
    let mut r = ChaCha20Rng::seed_from_u64(77);
    let n_xi = 128;
    let d_xi = 4;
    let m_xi = 64;
    let g = 9;
    let n_s = g * g;
    let n = n_xi * n_s;
    assert!(n > 10_000, "instance too small for the guard: n = {n}");

    let x1 = DMatrix::from_fn(g, 1, |i, _| i as f64 / (g - 1) as f64);
    let x2 = DMatrix::from_fn(g, 1, |i, _| i as f64 / (g - 1) as f64);
    let y = DMatrix::from_fn(n, 1, |_, _| r.gen_range(-1.0..1.0));
    let q = VariationalLatentPosterior::new(
        DMatrix::from_fn(n_xi, d_xi, |_, _| r.gen_range(-1.0..1.0)),
        DMatrix::from_element(n_xi, d_xi, 0.2),
    )
    .unwrap();
    let z = DMatrix::from_fn(m_xi, d_xi, |_, _| r.gen_range(-1.0..1.0));
    let model = SgplvmModel::new(
        y,
        vec![x1, x2],
        q,
        z,
        KernelSpec::sum(1.0, vec![2.0; d_xi], vec![0.3; d_xi]),
        vec![KernelSpec::exponential(0.3), KernelSpec::exponential(0.3)],
        10.0,
        TrainableFlags::default(),
    )
    .unwrap();

    MAX_ALLOC.store(0, Ordering::SeqCst);
    let (bound, cache) = model.collapsed_bound().unwrap();
    let grads = model.bound_gradients_with_cache(&cache).unwrap();
    let peak = MAX_ALLOC.load(Ordering::SeqCst);
    assert!(bound.is_finite());
    assert!(grads.d_log_beta.is_finite());

    // an n x n matrix would need 8 n^2 bytes; allow nothing beyond a small
    // multiple of the O(n) work buffers
    let budget = 64 * n * 8;
    assert!(
        peak <= budget,
        "largest single allocation {peak} bytes exceeds budget {budget} (n = {n})"
    );
    assert!(peak < 8 * n * n / 1000, "allocation near n^2 scale: {peak}");
}
