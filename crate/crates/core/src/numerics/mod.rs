//! Differentiable-compute layer: tensors, 3D convolution with hand-written
//! gradients, pooling/upsampling, the Adam optimizer, reparameterized
//! sampling, and a finite-difference gradient checker.
//!
//! Everything is generic over [`real::Real`] so training can run in f32 while
//! gradient checks run in f64. All ops are single-threaded and use a fixed
//! summation order, so runs are bitwise reproducible for a given seed.

pub mod act;

/// Enable flush-to-zero and denormals-are-zero in the x86 MXCSR register for
/// the calling thread. Long training runs push saturated sigmoid outputs into
/// the subnormal range, where hardware float ops are an order of magnitude
/// slower; flushing keeps step time flat. Anything subnormal (< 1.2e-38 in
/// f32) is far below every tolerance used in this crate. No-op elsewhere.
pub fn flush_denormals() {
    #[cfg(target_arch = "x86_64")]
    // SAFETY: only sets the FTZ/DAZ control bits of this thread's MXCSR.
    unsafe {
        let mut csr: u32 = 0;
        std::arch::asm!("stmxcsr [{p}]", p = in(reg) &mut csr, options(nostack, preserves_flags));
        csr |= (1 << 15) | (1 << 6);
        std::arch::asm!("ldmxcsr [{p}]", p = in(reg) &csr, options(nostack, preserves_flags));
    }
}
pub mod adam;
pub mod conv;
pub mod gradcheck;
pub mod pool;
pub mod real;
pub mod rng;
pub mod tensor;
